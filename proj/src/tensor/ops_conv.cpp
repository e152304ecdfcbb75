#include <Eigen/Core>
#include <algorithm>

#include "mtclip/error.hpp"
#include "mtclip/ops.hpp"

namespace mtclip::ops {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
using Eigen::Index;

struct ConvGeom {
  std::size_t channels, height, width, out_ch, k, stride, pad, out_h, out_w;

  std::size_t col_rows() const { return channels * k * k; }
  std::size_t col_cols() const { return out_h * out_w; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

void im2col(const double* img, const ConvGeom& g, double* cols) {
  const std::size_t ncols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols + ((c * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.height) &&
                                ix < static_cast<long>(g.width);
            row[oy * g.out_w + ox] =
                inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                             static_cast<std::size_t>(ix)]
                       : 0.0;
          }
        }
      }
}

void col2im_add(const double* cols, const ConvGeom& g, double* img) {
  const std::size_t ncols = g.col_cols();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols + ((c * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
}

void check_nchw(const Tensor& x, const char* op) {
  if (x.dim() != 4) {
    throw DimensionError(std::string(op) + ": expected [B x C x H x W], got " +
                         shape_str(x.shape()));
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t padding) {
  check_nchw(input, "conv2d");
  if (kernel.dim() != 4 || kernel.shape()[2] != kernel.shape()[3]) {
    throw DimensionError("conv2d: kernel must be [O x C x k x k], got " +
                         shape_str(kernel.shape()));
  }
  if (kernel.shape()[1] != input.shape()[1]) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) +
                         " has a different channel count than kernel " +
                         shape_str(kernel.shape()));
  }
  if (bias.defined() && (bias.dim() != 1 || bias.shape()[0] != kernel.shape()[0])) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) +
                         " does not match kernel " + shape_str(kernel.shape()));
  }
  ConvGeom g{};
  g.channels = input.shape()[1];
  g.height = input.shape()[2];
  g.width = input.shape()[3];
  g.out_ch = kernel.shape()[0];
  g.k = kernel.shape()[2];
  g.stride = stride;
  g.pad = padding;
  if (g.k % 2 == 0) throw ArgumentError("conv2d: kernel size must be odd");
  if (stride == 0) throw ArgumentError("conv2d: stride must be positive");
  if (g.height + 2 * g.pad < g.k || g.width + 2 * g.pad < g.k) {
    throw DimensionError("conv2d: kernel larger than padded input " +
                         shape_str(input.shape()));
  }
  g.out_h = (g.height + 2 * g.pad - g.k) / stride + 1;
  g.out_w = (g.width + 2 * g.pad - g.k) / stride + 1;

  const std::size_t batch = input.shape()[0];
  const std::size_t in_plane = g.channels * g.height * g.width;
  const std::size_t out_plane = g.out_ch * g.col_cols();
  std::vector<double> out(batch * out_plane);
  std::vector<double> cols(g.pointwise() ? 0 : g.col_rows() * g.col_cols());
  const auto& xv = input.node()->value;
  MapC w(kernel.node()->value.data(), static_cast<Index>(g.out_ch),
         static_cast<Index>(g.col_rows()));
  for (std::size_t b = 0; b < batch; ++b) {
    const double* src = xv.data() + b * in_plane;
    if (!g.pointwise()) {
      im2col(src, g, cols.data());
      src = cols.data();
    }
    Map y(out.data() + b * out_plane, static_cast<Index>(g.out_ch),
          static_cast<Index>(g.col_cols()));
    y.noalias() = w * MapC(src, static_cast<Index>(g.col_rows()),
                           static_cast<Index>(g.col_cols()));
    if (bias.defined()) {
      const auto bv = bias.data();
      for (std::size_t o = 0; o < g.out_ch; ++o) y.row(static_cast<Index>(o)).array() += bv[o];
    }
  }
  std::vector<Tensor> parents{input, kernel};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result(
      {batch, g.out_ch, g.out_h, g.out_w}, std::move(out), parents,
      [g, batch, in_plane, out_plane](Node& self) {
        Node& px = *self.parents[0];
        Node& pk = *self.parents[1];
        Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        std::vector<double> cols(g.pointwise() ? 0 : g.col_rows() * g.col_cols());
        std::vector<double> dcols(cols.size());
        MapC w(pk.value.data(), static_cast<Index>(g.out_ch), static_cast<Index>(g.col_rows()));
        for (std::size_t b = 0; b < batch; ++b) {
          MapC gy(self.grad.data() + b * out_plane, static_cast<Index>(g.out_ch),
                  static_cast<Index>(g.col_cols()));
          if (pk.requires_grad) {
            const double* src = px.value.data() + b * in_plane;
            if (!g.pointwise()) {
              im2col(src, g, cols.data());
              src = cols.data();
            }
            Map(pk.grad_buffer().data(), static_cast<Index>(g.out_ch),
                static_cast<Index>(g.col_rows()))
                .noalias() += gy * MapC(src, static_cast<Index>(g.col_rows()),
                                        static_cast<Index>(g.col_cols()))
                                       .transpose();
          }
          if (pb && pb->requires_grad) {
            auto& gb = pb->grad_buffer();
            const std::size_t cols = static_cast<std::size_t>(gy.cols());
            for (std::size_t o = 0; o < g.out_ch; ++o) {
              double acc = 0.0;
              for (std::size_t k = 0; k < cols; ++k) acc += gy(static_cast<Index>(o), static_cast<Index>(k));
              gb[o] += acc;
            }
          }
          if (px.requires_grad) {
            double* gx = px.grad_buffer().data() + b * in_plane;
            if (g.pointwise()) {
              Map(gx, static_cast<Index>(g.col_rows()), static_cast<Index>(g.col_cols()))
                  .noalias() += w.transpose() * gy;
            } else {
              Map(dcols.data(), static_cast<Index>(g.col_rows()),
                  static_cast<Index>(g.col_cols()))
                  .noalias() = w.transpose() * gy;
              col2im_add(dcols.data(), g, gx);
            }
          }
        }
      });
}

Tensor adaptive_avg_pool2d(const Tensor& input, std::size_t out_h,
                           std::size_t out_w) {
  check_nchw(input, "adaptive_avg_pool2d");
  if (out_h == 0 || out_w == 0) {
    throw ArgumentError("adaptive_avg_pool2d: output extent must be positive");
  }
  const std::size_t b = input.shape()[0], c = input.shape()[1];
  const std::size_t h = input.shape()[2], w = input.shape()[3];
  if (out_h > h || out_w > w) {
    throw ArgumentError("adaptive_avg_pool2d: output " + std::to_string(out_h) + "x" +
                        std::to_string(out_w) + " exceeds input " +
                        shape_str(input.shape()));
  }
  // Bin i covers [floor(i*h/out), floor((i+1)*h/out)); with out <= h the
  // bins are non-empty and partition the input.
  auto lo = [](std::size_t i, std::size_t in, std::size_t out) { return i * in / out; };
  auto hi = [](std::size_t i, std::size_t in, std::size_t out) {
    return (i + 1) * in / out;
  };
  const auto xv = input.data();
  std::vector<double> out(b * c * out_h * out_w);
  for (std::size_t p = 0; p < b * c; ++p)
    for (std::size_t oy = 0; oy < out_h; ++oy)
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
        const std::size_t x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
        // Shifted by the bin's first element so constant bins are exact.
        const double pivot = xv[(p * h + y0) * w + x0];
        double s = 0.0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t x = x0; x < x1; ++x) s += xv[(p * h + y) * w + x] - pivot;
        out[(p * out_h + oy) * out_w + ox] =
            pivot + s / static_cast<double>((y1 - y0) * (x1 - x0));
      }
  return Tensor::make_result(
      {b, c, out_h, out_w}, std::move(out), {input},
      [b, c, h, w, out_h, out_w, lo, hi](Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t p = 0; p < b * c; ++p)
          for (std::size_t oy = 0; oy < out_h; ++oy)
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const std::size_t y0 = lo(oy, h, out_h), y1 = hi(oy, h, out_h);
              const std::size_t x0 = lo(ox, w, out_w), x1 = hi(ox, w, out_w);
              const double g = self.grad[(p * out_h + oy) * out_w + ox] /
                               static_cast<double>((y1 - y0) * (x1 - x0));
              for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) gp[(p * h + y) * w + x] += g;
            }
      });
}

Tensor nearest_upsample(const Tensor& input, std::size_t out_h,
                        std::size_t out_w) {
  check_nchw(input, "nearest_upsample");
  const std::size_t b = input.shape()[0], c = input.shape()[1];
  const std::size_t h = input.shape()[2], w = input.shape()[3];
  if (out_h < h || out_w < w) {
    throw ArgumentError("nearest_upsample: output " + std::to_string(out_h) + "x" +
                        std::to_string(out_w) + " smaller than input " +
                        shape_str(input.shape()));
  }
  std::vector<std::size_t> src_y(out_h), src_x(out_w);
  for (std::size_t y = 0; y < out_h; ++y) src_y[y] = y * h / out_h;
  for (std::size_t x = 0; x < out_w; ++x) src_x[x] = x * w / out_w;
  const auto xv = input.data();
  std::vector<double> out(b * c * out_h * out_w);
  for (std::size_t p = 0; p < b * c; ++p)
    for (std::size_t y = 0; y < out_h; ++y)
      for (std::size_t x = 0; x < out_w; ++x)
        out[(p * out_h + y) * out_w + x] = xv[(p * h + src_y[y]) * w + src_x[x]];
  return Tensor::make_result(
      {b, c, out_h, out_w}, std::move(out), {input},
      [b, c, h, w, out_h, out_w, src_y = std::move(src_y), src_x = std::move(src_x)](Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t p = 0; p < b * c; ++p)
          for (std::size_t y = 0; y < out_h; ++y)
            for (std::size_t x = 0; x < out_w; ++x)
              gp[(p * h + src_y[y]) * w + src_x[x]] += self.grad[(p * out_h + y) * out_w + x];
      });
}

Tensor patchify(const Tensor& images, std::size_t patch) {
  check_nchw(images, "patchify");
  const std::size_t b = images.shape()[0], c = images.shape()[1];
  const std::size_t h = images.shape()[2], w = images.shape()[3];
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: " + shape_str(images.shape()) +
                         " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch;
  // [B, C, gh, p, gw, p] -> [B, gh, gw, C, p, p]
  Tensor x = reshape(images, {b, c, gh, patch, gw, patch});
  x = permute(x, {0, 2, 4, 1, 3, 5});
  return reshape(x, {b, gh * gw, c * patch * patch});
}

}  // namespace mtclip::ops
