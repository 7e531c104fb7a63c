#include "mapmatch/model/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "mapmatch/corpus_io.hpp"
#include "mapmatch/error.hpp"

namespace mapmatch::model {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'T', 'C'};

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw VersionError("checkpoint is truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Transformer<float>& model) {
  std::string out(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string header = nlohmann::json{{"format", "mapmatch-transformer"},
                                            {"version", kCheckpointVersion},
                                            {"config", model.config().to_json()}}
                                 .dump();
  put_le<std::uint64_t>(out, header.size());
  out += header;
  const auto& tensors = model.parameters().tensors();
  put_le<std::uint64_t>(out, tensors.size());
  for (const auto& t : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank));
    if (t.rank == 1) {
      put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.cols()));
    } else {
      put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.rows()));
      put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.value.cols()));
    }
    out.push_back(static_cast<char>(t.tag));
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(t.value.data()[i]));
    }
  }
  return out;
}

Transformer<float> decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(4) != std::string(kMagic, sizeof kMagic)) {
    throw VersionError("not a model checkpoint (bad magic)");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = in.get<std::uint64_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.take(static_cast<std::size_t>(header_len)));
  } catch (const nlohmann::json::exception& ex) {
    throw VersionError(std::string("checkpoint header: ") + ex.what());
  }
  if (header.value("version", 0u) != kCheckpointVersion || !header.contains("config")) {
    throw VersionError("checkpoint header version mismatch");
  }
  const ModelConfig cfg = ModelConfig::from_json(header["config"]);
  ParameterStore<float> params(cfg);

  const auto count = in.get<std::uint64_t>();
  if (count != params.size()) throw VersionError("checkpoint tensor count does not match config");
  for (auto& t : params.tensors()) {
    const auto name = in.take(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    if (name != t.name || static_cast<int>(rank) != t.rank) {
      throw VersionError("checkpoint tensor " + name + " does not match expected " + t.name);
    }
    std::uint64_t rows = 1, cols = 0;
    if (rank == 1) {
      cols = in.get<std::uint64_t>();
    } else {
      rows = in.get<std::uint64_t>();
      cols = in.get<std::uint64_t>();
    }
    if (rows != static_cast<std::uint64_t>(t.value.rows()) ||
        cols != static_cast<std::uint64_t>(t.value.cols())) {
      throw VersionError("checkpoint tensor " + name + " has a mismatched shape");
    }
    const auto tag = in.get<std::uint8_t>();
    if (tag != static_cast<std::uint8_t>(t.tag)) {
      throw VersionError("checkpoint tensor " + name + " has a mismatched component tag");
    }
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      t.value.data()[i] = std::bit_cast<float>(in.get<std::uint32_t>());
    }
  }
  if (!in.done()) throw VersionError("trailing bytes after checkpoint tensors");
  return Transformer<float>(cfg, std::move(params));
}

void save_checkpoint(const Transformer<float>& model, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(model));
}

Transformer<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace mapmatch::model
