#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mtclip/keyvalue.hpp"

namespace mtclip {

inline constexpr std::size_t kNumShapes = 8;
inline constexpr std::size_t kNumColors = 6;
inline constexpr std::size_t kNumSegClasses = kNumShapes + 1;  // 0 = background
inline constexpr float kFarDisparity = 0.1f;
inline constexpr std::uint32_t kShardVersion = 1;

const std::array<const char*, kNumShapes>& shape_names();
const std::array<const char*, kNumColors>& color_names();

enum class ClassSkew { kUniform, kZipf };

struct GenConfig {
  std::size_t image_size = 64;
  std::size_t num_backgrounds = 4;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  ClassSkew skew = ClassSkew::kUniform;
  double zipf_exponent = 1.0;
  // Objects named in a caption must own at least this many pixels.
  std::size_t min_caption_area = 12;

  void validate() const;
  // Probability of each shape class under the configured skew.
  std::vector<double> class_probabilities() const;
  KeyValues to_kv() const;
  static GenConfig from_kv(const KeyValues& kv);
};

struct ObjectSpec {
  std::uint8_t shape = 0;  // 0..7, mask class is shape + 1
  std::uint8_t color = 0;
  double cx = 0.0, cy = 0.0;
  double radius = 0.0;
  // Disparity plane: d0 at the center plus a linear gradient in pixels.
  double d0 = 0.5;
  double gx = 0.0, gy = 0.0;

  bool operator==(const ObjectSpec&) const = default;
};

struct SceneSpec {
  std::size_t background = 0;
  std::vector<ObjectSpec> objects;  // far to near (painter's order)
  std::uint64_t seed = 0;

  bool operator==(const SceneSpec&) const = default;
};

// Dense per-pixel maps shared by ground truth and pseudo-labels.
struct DenseLabels {
  std::vector<std::uint8_t> mask;  // S*S class ids
  std::vector<float> disparity;    // S*S in [0,1]
  std::vector<float> normals;      // 3*S*S, channel-major

  bool operator==(const DenseLabels&) const = default;
};

using PseudoLabelSet = DenseLabels;

struct Sample {
  std::size_t image_size = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> image;  // 3*S*S, channel-major RGB
  std::string caption;
  DenseLabels gt;

  // Synthetic ground truth is defined everywhere.
  std::vector<std::uint8_t> valid() const {
    return std::vector<std::uint8_t>(image_size * image_size, 1);
  }
  bool operator==(const Sample&) const = default;
};

SceneSpec sample_scene(const GenConfig& config, std::uint64_t seed);

// Index of the object owning each pixel (-1 for background).
std::vector<int> owner_map(const SceneSpec& spec, std::size_t image_size);
// Whether pixel (x, y) lies inside the object's silhouette.
bool covers(const ObjectSpec& object, double x, double y);

Sample render_scene(const SceneSpec& spec, std::size_t image_size,
                    std::size_t min_caption_area = 12);

struct OracleConfig {
  double seg_boundary_flip_rate = 0.2;
  double seg_uniform_flip_rate = 0.02;
  double disparity_noise_sigma = 0.05;
  double normal_jitter_deg = 10.0;
  std::uint64_t seed = 0;

  void validate() const;
  KeyValues to_kv() const;
  static OracleConfig from_kv(const KeyValues& kv);
};

// Pixels within Chebyshev distance `radius` of a class change.
std::vector<std::uint8_t> boundary_band(const std::vector<std::uint8_t>& mask,
                                        std::size_t image_size, std::size_t radius = 2);

PseudoLabelSet make_pseudo_labels(const Sample& sample, const OracleConfig& oracle,
                                  std::size_t num_classes = kNumSegClasses);

class Vocab {
 public:
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kBos = 1;
  static constexpr std::int64_t kEos = 2;
  static constexpr std::int64_t kUnk = 3;

  // The closed caption-grammar vocabulary.
  static Vocab builtin();
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return words_.size(); }
  std::int64_t id(std::string_view word) const;
  const std::string& word(std::int64_t id) const;
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
};

// BOS + word ids + EOS, padded with PAD or truncated (EOS kept last).
std::vector<std::int64_t> tokenize(std::string_view caption, const Vocab& vocab,
                                   std::size_t context_length);

struct ShardData {
  std::size_t image_size = 0;
  std::size_t num_classes = kNumSegClasses;
  std::vector<Sample> samples;
  std::vector<PseudoLabelSet> pseudo;

  bool operator==(const ShardData&) const = default;
};

void write_shard(const ShardData& data, const std::filesystem::path& path);
ShardData read_shard(const std::filesystem::path& path);
// Serialized form used by write_shard; exposed for corruption tests.
std::string encode_shard(const ShardData& data);
ShardData decode_shard(std::string_view bytes);

// Renders `count` scenes with seeds derived from `seed` and corrupts each
// into pseudo-labels.
ShardData generate_dataset(const GenConfig& gen, const OracleConfig& oracle,
                           std::size_t count, std::uint64_t seed);

// Pixel count per class over all pseudo-label masks.
std::vector<std::uint64_t> pseudo_class_counts(const ShardData& data);

std::filesystem::path manifest_path(const std::filesystem::path& shard);
void write_manifest(const std::filesystem::path& shard, const GenConfig& gen,
                    const OracleConfig& oracle, std::uint64_t seed, const ShardData& data);

}  // namespace mtclip
