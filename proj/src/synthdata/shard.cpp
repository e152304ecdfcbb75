#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mtclip/error.hpp"
#include "mtclip/rng.hpp"
#include "mtclip/synthdata.hpp"

namespace mtclip {

namespace {

static_assert(std::endian::native == std::endian::little,
              "shard encoding assumes a little-endian host");

constexpr char kMagic[4] = {'M', 'T', 'C', 'X'};
constexpr std::size_t kHeaderBytes = 24;

enum PseudoBits : std::uint32_t { kSegBit = 1, kDepthBit = 2, kNormalBit = 4 };

std::uint32_t pseudo_bits(const PseudoLabelSet& p) {
  return (p.mask.empty() ? 0u : kSegBit) | (p.disparity.empty() ? 0u : kDepthBit) |
         (p.normals.empty() ? 0u : kNormalBit);
}

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
void put_array(std::string& out, const std::vector<T>& v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  template <typename T>
  void get_array(std::vector<T>& v, std::size_t count, const char* what) {
    need(count * sizeof(T), what);
    v.resize(count);
    std::memcpy(v.data(), bytes_.data() + pos_, count * sizeof(T));
    pos_ += count * sizeof(T);
  }
  std::string get_string(std::size_t count, const char* what) {
    need(count, what);
    std::string s(bytes_.substr(pos_, count));
    pos_ += count;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n)
      throw FormatError(std::string("truncated ") + what + ": need " + std::to_string(n) +
                            " bytes, " + std::to_string(remaining()) + " left",
                        pos_);
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::size_t record_bytes(std::size_t size, std::size_t caption, std::uint32_t bits) {
  const std::size_t n = size * size;
  std::size_t total = 8 + 3 * n + 4 + caption + n + 4 * n + 12 * n;
  if (bits & kSegBit) total += n;
  if (bits & kDepthBit) total += 4 * n;
  if (bits & kNormalBit) total += 12 * n;
  return total;
}

}  // namespace

std::string encode_shard(const ShardData& data) {
  const std::size_t size = data.image_size;
  const std::size_t n = size * size;
  if (!data.pseudo.empty() && data.pseudo.size() != data.samples.size())
    throw ArgumentError("write_shard: " + std::to_string(data.pseudo.size()) +
                        " pseudo-label sets for " + std::to_string(data.samples.size()) +
                        " samples");
  const std::uint32_t bits = data.pseudo.empty() ? 0u : pseudo_bits(data.pseudo.front());

  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kShardVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.samples.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(size));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(data.num_classes));
  put<std::uint32_t>(out, bits);

  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    if (s.image_size != size || s.image.size() != 3 * n || s.gt.mask.size() != n ||
        s.gt.disparity.size() != n || s.gt.normals.size() != 3 * n) {
      throw ArgumentError("write_shard: sample " + std::to_string(i) +
                          " does not match image size " + std::to_string(size));
    }
    const std::size_t len = record_bytes(size, s.caption.size(), bits);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(len));
    put<std::uint64_t>(out, s.seed);
    put_array(out, s.image);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.caption.size()));
    out += s.caption;
    put_array(out, s.gt.mask);
    put_array(out, s.gt.disparity);
    put_array(out, s.gt.normals);
    if (bits != 0) {
      const PseudoLabelSet& p = data.pseudo[i];
      if (pseudo_bits(p) != bits)
        throw ArgumentError("write_shard: pseudo-label tasks differ at sample " +
                            std::to_string(i));
      put_array(out, p.mask);
      put_array(out, p.disparity);
      put_array(out, p.normals);
    }
  }
  return out;
}

ShardData decode_shard(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("bad shard magic (expected MTCX)", 0);
  r.get_string(4, "magic");
  const auto version = r.get<std::uint32_t>("header");
  if (version != kShardVersion)
    throw FormatError("unsupported shard version " + std::to_string(version), 4);
  const auto count = r.get<std::uint32_t>("header");
  ShardData data;
  data.image_size = r.get<std::uint32_t>("header");
  data.num_classes = r.get<std::uint32_t>("header");
  const auto bits = r.get<std::uint32_t>("header");
  if (bits > 7) throw FormatError("invalid pseudo-label task flags", kHeaderBytes - 4);
  const std::size_t size = data.image_size;
  const std::size_t n = size * size;

  data.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = r.offset();
    if (r.remaining() == 0)
      throw FormatError("header declares " + std::to_string(count) + " records, found " +
                            std::to_string(i),
                        start);
    const auto len = r.get<std::uint32_t>("record length");
    const std::size_t body = r.offset();
    Sample s;
    s.image_size = size;
    s.seed = r.get<std::uint64_t>("record");
    r.get_array(s.image, 3 * n, "image");
    const auto cap = r.get<std::uint32_t>("caption length");
    if (len != record_bytes(size, cap, bits))
      throw FormatError("record " + std::to_string(i) + " length " + std::to_string(len) +
                            " inconsistent with header",
                        start);
    s.caption = r.get_string(cap, "caption");
    r.get_array(s.gt.mask, n, "mask");
    r.get_array(s.gt.disparity, n, "disparity");
    r.get_array(s.gt.normals, 3 * n, "normals");
    if (bits != 0) {
      PseudoLabelSet p;
      if (bits & kSegBit) r.get_array(p.mask, n, "pseudo mask");
      if (bits & kDepthBit) r.get_array(p.disparity, n, "pseudo disparity");
      if (bits & kNormalBit) r.get_array(p.normals, 3 * n, "pseudo normals");
      data.pseudo.push_back(std::move(p));
    }
    if (r.offset() - body != len) throw FormatError("record length mismatch", start);
    data.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0)
    throw FormatError("trailing bytes after " + std::to_string(count) + " records",
                      r.offset());
  return data;
}

void write_shard(const ShardData& data, const std::filesystem::path& path) {
  const std::string bytes = encode_shard(data);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write shard " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("short write on shard " + path.string());
}

ShardData read_shard(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open shard " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_shard(bytes);
}

ShardData generate_dataset(const GenConfig& gen, const OracleConfig& oracle,
                           std::size_t count, std::uint64_t seed) {
  gen.validate();
  oracle.validate();
  ShardData data;
  data.image_size = gen.image_size;
  data.num_classes = kNumSegClasses;
  data.samples.reserve(count);
  data.pseudo.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const SceneSpec spec = sample_scene(gen, derive_seed(seed, static_cast<std::uint64_t>(i)));
    data.samples.push_back(render_scene(spec, gen.image_size, gen.min_caption_area));
    data.pseudo.push_back(make_pseudo_labels(data.samples.back(), oracle, data.num_classes));
  }
  return data;
}

std::vector<std::uint64_t> pseudo_class_counts(const ShardData& data) {
  std::vector<std::uint64_t> counts(data.num_classes, 0);
  for (const auto& p : data.pseudo)
    for (std::uint8_t c : p.mask)
      if (c < counts.size()) ++counts[c];
  return counts;
}

std::filesystem::path manifest_path(const std::filesystem::path& shard) {
  std::filesystem::path p = shard;
  p += ".manifest";
  return p;
}

void write_manifest(const std::filesystem::path& shard, const GenConfig& gen,
                    const OracleConfig& oracle, std::uint64_t seed, const ShardData& data) {
  KeyValues kv = gen.to_kv();
  kv.merge(oracle.to_kv());
  kv.set("seed", std::to_string(seed));
  kv.set("count", std::to_string(data.samples.size()));
  kv.set("num_classes", std::to_string(data.num_classes));
  const auto counts = pseudo_class_counts(data);
  std::vector<std::size_t> as_sizes(counts.begin(), counts.end());
  kv.set("pseudo_class_pixels", join_sizes(as_sizes));
  kv.save(manifest_path(shard).string());
}

}  // namespace mtclip
