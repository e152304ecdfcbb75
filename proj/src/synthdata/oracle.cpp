#include <algorithm>
#include <cmath>
#include <numbers>

#include "mtclip/error.hpp"
#include "mtclip/rng.hpp"
#include "mtclip/synthdata.hpp"

namespace mtclip {

void OracleConfig::validate() const {
  auto rate = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0))
      throw ConfigError(std::string("field '") + name + "': rate must be in [0,1]");
  };
  rate(seg_boundary_flip_rate, "seg_boundary_flip_rate");
  rate(seg_uniform_flip_rate, "seg_uniform_flip_rate");
  if (!(disparity_noise_sigma >= 0.0))
    throw ConfigError("field 'disparity_noise_sigma': must be >= 0");
  if (!(normal_jitter_deg >= 0.0))
    throw ConfigError("field 'normal_jitter_deg': must be >= 0");
}

KeyValues OracleConfig::to_kv() const {
  KeyValues kv;
  kv.set("oracle.seg_boundary_flip_rate", format_double(seg_boundary_flip_rate));
  kv.set("oracle.seg_uniform_flip_rate", format_double(seg_uniform_flip_rate));
  kv.set("oracle.disparity_noise_sigma", format_double(disparity_noise_sigma));
  kv.set("oracle.normal_jitter_deg", format_double(normal_jitter_deg));
  kv.set("oracle.seed", std::to_string(seed));
  return kv;
}

OracleConfig OracleConfig::from_kv(const KeyValues& kv) {
  OracleConfig c;
  c.seg_boundary_flip_rate = kv.get_double("oracle.seg_boundary_flip_rate", c.seg_boundary_flip_rate);
  c.seg_uniform_flip_rate = kv.get_double("oracle.seg_uniform_flip_rate", c.seg_uniform_flip_rate);
  c.disparity_noise_sigma = kv.get_double("oracle.disparity_noise_sigma", c.disparity_noise_sigma);
  c.normal_jitter_deg = kv.get_double("oracle.normal_jitter_deg", c.normal_jitter_deg);
  c.seed = kv.get_uint("oracle.seed", c.seed);
  c.validate();
  return c;
}

std::vector<std::uint8_t> boundary_band(const std::vector<std::uint8_t>& mask,
                                        std::size_t size, std::size_t radius) {
  std::vector<std::uint8_t> edge(mask.size(), 0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t p = y * size + x;
      if (x + 1 < size && mask[p + 1] != mask[p]) edge[p] = edge[p + 1] = 1;
      if (y + 1 < size && mask[p + size] != mask[p]) edge[p] = edge[p + size] = 1;
    }
  std::vector<std::uint8_t> band(mask.size(), 0);
  const auto r = static_cast<std::ptrdiff_t>(radius);
  const auto s = static_cast<std::ptrdiff_t>(size);
  for (std::ptrdiff_t y = 0; y < s; ++y)
    for (std::ptrdiff_t x = 0; x < s; ++x) {
      if (!edge[static_cast<std::size_t>(y * s + x)]) continue;
      for (std::ptrdiff_t yy = std::max<std::ptrdiff_t>(0, y - r); yy <= std::min(s - 1, y + r); ++yy)
        for (std::ptrdiff_t xx = std::max<std::ptrdiff_t>(0, x - r); xx <= std::min(s - 1, x + r); ++xx)
          band[static_cast<std::size_t>(yy * s + xx)] = 1;
    }
  return band;
}

PseudoLabelSet make_pseudo_labels(const Sample& sample, const OracleConfig& oracle,
                                  std::size_t num_classes) {
  oracle.validate();
  const std::size_t size = sample.image_size;
  const std::size_t n = size * size;
  PseudoLabelSet out = sample.gt;
  const std::uint64_t base = derive_seed(oracle.seed, sample.seed);

  if (oracle.seg_boundary_flip_rate > 0.0 || oracle.seg_uniform_flip_rate > 0.0) {
    Rng rng(derive_seed(base, "seg"));
    const auto band = boundary_band(sample.gt.mask, size, 2);
    for (std::size_t p = 0; p < n; ++p) {
      // Independent draws for the band and anywhere corruption.
      const double ub = uniform01(rng);
      const double uu = uniform01(rng);
      const std::size_t replacement = uniform_index(rng, num_classes);
      if ((band[p] && ub < oracle.seg_boundary_flip_rate) ||
          uu < oracle.seg_uniform_flip_rate) {
        out.mask[p] = static_cast<std::uint8_t>(replacement);
      }
    }
  }

  if (oracle.disparity_noise_sigma > 0.0) {
    Rng rng(derive_seed(base, "disparity"));
    for (std::size_t p = 0; p < n; ++p) {
      const double eps = oracle.disparity_noise_sigma * standard_normal(rng);
      const double d = static_cast<double>(sample.gt.disparity[p]) * (1.0 + eps);
      out.disparity[p] = static_cast<float>(std::clamp(d, 0.0, 1.0));
    }
  }

  if (oracle.normal_jitter_deg > 0.0) {
    Rng rng(derive_seed(base, "normals"));
    const double sigma = oracle.normal_jitter_deg * std::numbers::pi / 180.0;
    for (std::size_t p = 0; p < n; ++p) {
      const double v[3] = {sample.gt.normals[p], sample.gt.normals[n + p],
                           sample.gt.normals[2 * n + p]};
      // Orthonormal tangent basis at v, then a uniform axis in that plane.
      double t1[3];
      if (std::abs(v[2]) < 0.9) {
        t1[0] = -v[1]; t1[1] = v[0]; t1[2] = 0.0;
      } else {
        t1[0] = 0.0; t1[1] = -v[2]; t1[2] = v[1];
      }
      const double l1 = std::sqrt(t1[0] * t1[0] + t1[1] * t1[1] + t1[2] * t1[2]);
      for (double& c : t1) c /= l1;
      const double t2[3] = {v[1] * t1[2] - v[2] * t1[1], v[2] * t1[0] - v[0] * t1[2],
                            v[0] * t1[1] - v[1] * t1[0]};
      const double phi = 2.0 * std::numbers::pi * uniform01(rng);
      const double angle = sigma * standard_normal(rng);
      double axis[3];
      for (int c = 0; c < 3; ++c) axis[c] = std::cos(phi) * t1[c] + std::sin(phi) * t2[c];
      // Rodrigues with the axis orthogonal to v: v cos a + (axis x v) sin a.
      const double cx[3] = {axis[1] * v[2] - axis[2] * v[1], axis[2] * v[0] - axis[0] * v[2],
                            axis[0] * v[1] - axis[1] * v[0]};
      double r[3];
      for (int c = 0; c < 3; ++c) r[c] = v[c] * std::cos(angle) + cx[c] * std::sin(angle);
      const double len = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
      for (std::size_t c = 0; c < 3; ++c) out.normals[c * n + p] = static_cast<float>(r[c] / len);
    }
  }
  return out;
}

}  // namespace mtclip
