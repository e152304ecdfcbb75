#include <algorithm>
#include <cmath>
#include <numbers>

#include "mtclip/error.hpp"
#include "mtclip/rng.hpp"
#include "mtclip/synthdata.hpp"

namespace mtclip {

namespace {

constexpr std::array<const char*, kNumShapes> kShapeNames = {
    "circle", "square", "triangle", "diamond", "cross", "star", "hexagon", "ring"};
constexpr std::array<const char*, kNumColors> kColorNames = {
    "red", "green", "blue", "yellow", "purple", "orange"};

constexpr std::array<std::array<double, 3>, kNumColors> kPalette = {{
    {0.85, 0.15, 0.15},
    {0.15, 0.70, 0.20},
    {0.15, 0.30, 0.90},
    {0.90, 0.85, 0.15},
    {0.60, 0.20, 0.75},
    {0.95, 0.55, 0.10},
}};

// Disparity levels are spaced further apart than any in-object variation, so
// a nearer object is nearer at every pixel it shares with a farther one.
constexpr double kLevelLow = 0.25;
constexpr double kLevelStep = 0.13;
constexpr std::size_t kNumLevels = 6;
constexpr double kLevelJitter = 0.01;
constexpr double kMaxTiltDeg = 45.0;
// Pixels per unit of disparity when relating plane gradients to normals.
constexpr double kReliefScale = 4.0;

const std::array<double, 3> kLight = [] {
  const double n = std::sqrt(0.3 * 0.3 + 0.4 * 0.4 + 1.0);
  return std::array<double, 3>{-0.3 / n, -0.4 / n, 1.0 / n};
}();

double shade(const std::array<double, 3>& n) {
  const double lambert = n[0] * kLight[0] + n[1] * kLight[1] + n[2] * kLight[2];
  return 0.35 + 0.65 * std::max(0.0, lambert);
}

std::array<double, 3> background_albedo(std::size_t kind, std::size_t x, std::size_t y) {
  switch (kind % 4) {
    case 0: {  // horizontal stripes
      const double v = ((y / 4) % 2) ? 0.55 : 0.40;
      return {v, v, v * 0.9};
    }
    case 1: {  // checkerboard
      const double v = (((x / 8) + (y / 8)) % 2) ? 0.50 : 0.35;
      return {v * 0.9, v, v};
    }
    case 2: {  // diagonal ramp
      const double v = 0.30 + 0.30 * static_cast<double>((x + y) % 32) / 31.0;
      return {v, v * 0.95, v * 0.85};
    }
    default: {  // dots
      const bool dot = (x % 6 < 2) && (y % 6 < 2);
      const double v = dot ? 0.60 : 0.42;
      return {v * 0.85, v * 0.9, v};
    }
  }
}

std::array<double, 3> plane_normal(const ObjectSpec& o, std::size_t image_size) {
  const double k = kReliefScale * static_cast<double>(image_size);
  double n[3] = {-o.gx * k, -o.gy * k, 1.0};
  const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
  return {n[0] / len, n[1] / len, n[2] / len};
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::size_t sample_class(Rng& rng, const std::vector<double>& cdf) {
  const double u = uniform01(rng);
  for (std::size_t i = 0; i + 1 < cdf.size(); ++i)
    if (u < cdf[i]) return i;
  return cdf.size() - 1;
}

}  // namespace

const std::array<const char*, kNumShapes>& shape_names() { return kShapeNames; }
const std::array<const char*, kNumColors>& color_names() { return kColorNames; }

void GenConfig::validate() const {
  if (image_size < 16) throw ConfigError("field 'image_size': must be at least 16");
  if (num_backgrounds == 0) throw ConfigError("field 'num_backgrounds': must be positive");
  if (min_objects == 0 || min_objects > max_objects)
    throw ConfigError("field 'min_objects': must be in [1, max_objects]");
  if (max_objects > kNumLevels)
    throw ConfigError("field 'max_objects': at most " + std::to_string(kNumLevels));
  if (!(zipf_exponent >= 0.0)) throw ConfigError("field 'zipf_exponent': must be >= 0");
}

std::vector<double> GenConfig::class_probabilities() const {
  std::vector<double> p(kNumShapes, 1.0);
  if (skew == ClassSkew::kZipf)
    for (std::size_t k = 0; k < kNumShapes; ++k)
      p[k] = 1.0 / std::pow(static_cast<double>(k + 1), zipf_exponent);
  double z = 0.0;
  for (double v : p) z += v;
  for (double& v : p) v /= z;
  return p;
}

KeyValues GenConfig::to_kv() const {
  KeyValues kv;
  kv.set("gen.image_size", std::to_string(image_size));
  kv.set("gen.num_backgrounds", std::to_string(num_backgrounds));
  kv.set("gen.min_objects", std::to_string(min_objects));
  kv.set("gen.max_objects", std::to_string(max_objects));
  kv.set("gen.skew", skew == ClassSkew::kZipf ? "zipf" : "uniform");
  kv.set("gen.zipf_exponent", format_double(zipf_exponent));
  kv.set("gen.min_caption_area", std::to_string(min_caption_area));
  return kv;
}

GenConfig GenConfig::from_kv(const KeyValues& kv) {
  GenConfig c;
  c.image_size = kv.get_uint("gen.image_size", c.image_size);
  c.num_backgrounds = kv.get_uint("gen.num_backgrounds", c.num_backgrounds);
  c.min_objects = kv.get_uint("gen.min_objects", c.min_objects);
  c.max_objects = kv.get_uint("gen.max_objects", c.max_objects);
  const std::string skew = kv.get_string("gen.skew", "uniform");
  if (skew == "zipf") {
    c.skew = ClassSkew::kZipf;
  } else if (skew != "uniform") {
    throw ConfigError("field 'gen.skew': expected uniform or zipf, got '" + skew + "'");
  }
  c.zipf_exponent = kv.get_double("gen.zipf_exponent", c.zipf_exponent);
  c.min_caption_area = kv.get_uint("gen.min_caption_area", c.min_caption_area);
  c.validate();
  return c;
}

SceneSpec sample_scene(const GenConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, "scene"));
  const auto probs = config.class_probabilities();
  std::vector<double> cdf(probs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) cdf[i] = (acc += probs[i]);

  SceneSpec spec;
  spec.seed = seed;
  spec.background = uniform_index(rng, config.num_backgrounds);
  const std::size_t count =
      config.min_objects + uniform_index(rng, config.max_objects - config.min_objects + 1);

  // Distinct depth levels, ascending, so objects come out far to near.
  std::vector<std::size_t> levels(kNumLevels);
  for (std::size_t i = 0; i < kNumLevels; ++i) levels[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(levels[i], levels[i + uniform_index(rng, kNumLevels - i)]);
  }
  std::sort(levels.begin(), levels.begin() + static_cast<std::ptrdiff_t>(count));

  const double s = static_cast<double>(config.image_size);
  for (std::size_t i = 0; i < count; ++i) {
    ObjectSpec o;
    o.shape = static_cast<std::uint8_t>(sample_class(rng, cdf));
    o.color = static_cast<std::uint8_t>(uniform_index(rng, kNumColors));
    o.d0 = kLevelLow + kLevelStep * static_cast<double>(levels[i]) +
           kLevelJitter * (2.0 * uniform01(rng) - 1.0);
    // Nearer objects appear larger.
    const double nearness = (o.d0 - kLevelLow) / (kLevelStep * (kNumLevels - 1));
    o.radius = s * (0.08 + 0.09 * nearness + 0.02 * uniform01(rng));
    o.cx = o.radius + uniform01(rng) * (s - 1.0 - 2.0 * o.radius);
    o.cy = o.radius + uniform01(rng) * (s - 1.0 - 2.0 * o.radius);
    const double tilt = kMaxTiltDeg * uniform01(rng) * std::numbers::pi / 180.0;
    const double azimuth = 2.0 * std::numbers::pi * uniform01(rng);
    const double slope = std::tan(tilt) / (kReliefScale * s);
    o.gx = -slope * std::cos(azimuth);
    o.gy = -slope * std::sin(azimuth);
    spec.objects.push_back(o);
  }
  return spec;
}

bool covers(const ObjectSpec& o, double x, double y) {
  const double dx = x - o.cx, dy = y - o.cy;
  const double r = o.radius;
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (o.shape) {
    case 0:  // circle
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return std::max(ax, ay) <= 0.85 * r;
    case 2: {  // triangle, apex up
      if (dy < -r || dy > 0.8 * r) return false;
      return ax <= 0.5 * (dy + r);
    }
    case 3:  // diamond
      return ax + ay <= r;
    case 4:  // cross
      return (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r);
    case 5: {  // five-pointed star
      const double rho = std::sqrt(dx * dx + dy * dy);
      const double theta = std::atan2(dy, dx);
      return rho <= r * (0.62 + 0.38 * std::cos(5.0 * theta));
    }
    case 6:  // hexagon
      return ax <= 0.866 * r && 0.5 * ax + 0.866 * ay <= 0.866 * r;
    case 7: {  // ring
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
    default:
      throw ArgumentError("covers: unknown shape id " + std::to_string(o.shape));
  }
}

std::vector<int> owner_map(const SceneSpec& spec, std::size_t image_size) {
  std::vector<int> owner(image_size * image_size, -1);
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    const auto lo_y = static_cast<std::size_t>(std::max(0.0, std::floor(o.cy - o.radius)));
    const auto lo_x = static_cast<std::size_t>(std::max(0.0, std::floor(o.cx - o.radius)));
    const std::size_t hi_y = std::min<std::size_t>(
        image_size - 1, static_cast<std::size_t>(std::ceil(o.cy + o.radius)));
    const std::size_t hi_x = std::min<std::size_t>(
        image_size - 1, static_cast<std::size_t>(std::ceil(o.cx + o.radius)));
    for (std::size_t y = lo_y; y <= hi_y; ++y)
      for (std::size_t x = lo_x; x <= hi_x; ++x)
        if (covers(o, static_cast<double>(x), static_cast<double>(y)))
          owner[y * image_size + x] = static_cast<int>(i);
  }
  return owner;
}

Sample render_scene(const SceneSpec& spec, std::size_t image_size,
                    std::size_t min_caption_area) {
  const std::size_t n = image_size * image_size;
  const auto owner = owner_map(spec, image_size);
  Sample out;
  out.image_size = image_size;
  out.seed = spec.seed;
  out.image.resize(3 * n);
  out.gt.mask.resize(n);
  out.gt.disparity.resize(n);
  out.gt.normals.resize(3 * n);

  std::vector<std::array<double, 3>> normals;
  for (const auto& o : spec.objects) normals.push_back(plane_normal(o, image_size));
  const std::array<double, 3> flat = {0.0, 0.0, 1.0};

  std::vector<std::size_t> area(spec.objects.size(), 0);
  std::vector<double> sum_x(spec.objects.size(), 0.0), sum_y(spec.objects.size(), 0.0);
  for (std::size_t y = 0; y < image_size; ++y) {
    for (std::size_t x = 0; x < image_size; ++x) {
      const std::size_t p = y * image_size + x;
      const int k = owner[p];
      std::array<double, 3> albedo;
      const std::array<double, 3>* nrm = &flat;
      if (k < 0) {
        albedo = background_albedo(spec.background, x, y);
        out.gt.mask[p] = 0;
        out.gt.disparity[p] = kFarDisparity;
      } else {
        const auto& o = spec.objects[static_cast<std::size_t>(k)];
        albedo = kPalette[o.color];
        nrm = &normals[static_cast<std::size_t>(k)];
        out.gt.mask[p] = static_cast<std::uint8_t>(o.shape + 1);
        const double d = o.d0 + o.gx * (static_cast<double>(x) - o.cx) +
                         o.gy * (static_cast<double>(y) - o.cy);
        out.gt.disparity[p] = static_cast<float>(std::clamp(d, 0.0, 1.0));
        ++area[static_cast<std::size_t>(k)];
        sum_x[static_cast<std::size_t>(k)] += static_cast<double>(x);
        sum_y[static_cast<std::size_t>(k)] += static_cast<double>(y);
      }
      const double light = shade(*nrm);
      for (std::size_t c = 0; c < 3; ++c) {
        out.image[c * n + p] = to_byte(albedo[c] * light);
        out.gt.normals[c * n + p] = static_cast<float>((*nrm)[c]);
      }
    }
  }

  // Caption over visible objects, nearest first.
  std::vector<std::size_t> visible;
  for (std::size_t i = spec.objects.size(); i-- > 0;)
    if (area[i] >= min_caption_area) visible.push_back(i);
  auto phrase = [&](std::size_t i) {
    const auto& o = spec.objects[i];
    return std::string("a ") + kColorNames[o.color] + " " + kShapeNames[o.shape];
  };
  if (visible.empty()) {
    out.caption.clear();
  } else if (visible.size() == 1) {
    out.caption = phrase(visible[0]);
  } else {
    Rng rng(derive_seed(spec.seed, "caption"));
    const std::size_t a = uniform_index(rng, visible.size());
    std::size_t b = uniform_index(rng, visible.size() - 1);
    if (b >= a) ++b;
    const std::size_t ia = visible[a], ib = visible[b];
    const double dx = sum_x[ia] / static_cast<double>(area[ia]) -
                      sum_x[ib] / static_cast<double>(area[ib]);
    const double dy = sum_y[ia] / static_cast<double>(area[ia]) -
                      sum_y[ib] / static_cast<double>(area[ib]);
    const char* rel;
    if (std::abs(dx) >= std::abs(dy)) {
      rel = dx < 0.0 ? "left of" : "right of";
    } else {
      rel = dy < 0.0 ? "above" : "below";
    }
    out.caption = phrase(ia) + " " + rel + " " + phrase(ib);
  }
  return out;
}

}  // namespace mtclip
