#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mtclip/error.hpp"
#include "mtclip/rng.hpp"
#include "mtclip/trainer.hpp"

namespace mtclip {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint encoding assumes a little-endian host");

constexpr char kMagic[4] = {'M', 'T', 'C', 'K'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const ModelBundle& model, std::uint64_t step, std::uint64_t seed) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, model.config().digest());
  put<std::uint64_t>(out, step);
  put<std::uint64_t>(out, seed);
  const std::string cfg = model.config().to_kv().to_string();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(model.params().size()));
  for (const auto& [name, t] : model.params()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    for (double v : t.data()) put<float>(out, static_cast<float>(v));
  }
  put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

void save_checkpoint(const ModelBundle& model, const std::filesystem::path& path,
                     std::uint64_t step, std::uint64_t seed) {
  const std::string bytes = encode_checkpoint(model, step, seed);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed for '" + path.string() + "'");
}

ModelBundle decode_checkpoint(std::string_view bytes, const std::optional<ModelConfig>& expected,
                              CheckpointInfo* info) {
  if (bytes.size() < 4 + 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError("not a checkpoint (bad magic)");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a64(bytes.substr(0, bytes.size() - 8)) != stored)
    throw CheckpointError("checksum mismatch");

  Reader r(bytes.substr(0, bytes.size() - 8));
  r.take(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  CheckpointInfo meta;
  meta.digest = r.get<std::uint64_t>("digest");
  meta.step = r.get<std::uint64_t>("step");
  meta.seed = r.get<std::uint64_t>("seed");
  const auto cfg_len = r.get<std::uint32_t>("config length");
  const ModelConfig config = ModelConfig::from_kv(KeyValues::parse(std::string(r.take(cfg_len, "config"))));
  if (config.digest() != meta.digest)
    throw CheckpointError("stored config does not match the header digest");
  if (expected && expected->digest() != meta.digest)
    throw CheckpointError("config digest mismatch: checkpoint " + std::to_string(meta.digest) +
                          ", expected " + std::to_string(expected->digest()));

  // The layout must be exactly what this config builds.
  ModelBundle model = build_model(config, 0);
  const auto count = r.get<std::uint32_t>("parameter count");
  if (count != model.params().size())
    throw CheckpointError("checkpoint has " + std::to_string(count) + " parameters, config needs " +
                          std::to_string(model.params().size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("name length");
    const std::string name(r.take(name_len, "name"));
    if (!model.has_param(name)) throw CheckpointError("unexpected parameter '" + name + "'");
    Tensor& t = model.params().at(name);
    const auto ndim = r.get<std::uint32_t>("rank");
    Shape shape(ndim);
    for (auto& d : shape) d = r.get<std::uint64_t>("shape");
    if (shape != t.shape())
      throw CheckpointError("parameter '" + name + "' has shape " + shape_str(shape) +
                            ", config needs " + shape_str(t.shape()));
    auto w = t.mutable_data();
    const auto raw = r.take(w.size() * sizeof(float), "parameter data");
    for (std::size_t k = 0; k < w.size(); ++k) {
      float f;
      std::memcpy(&f, raw.data() + k * sizeof(float), sizeof(float));
      w[k] = f;
    }
  }
  if (r.pos() != bytes.size() - 8) throw CheckpointError("trailing bytes before checksum");
  if (info) *info = meta;
  return model;
}

ModelBundle load_checkpoint(const std::filesystem::path& path,
                            const std::optional<ModelConfig>& expected, CheckpointInfo* info) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, expected, info);
}

}  // namespace mtclip
