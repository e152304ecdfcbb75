#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "mtclip/error.hpp"
#include "mtclip/ops.hpp"

namespace mtclip::ops {

namespace {

using detail::Node;

// Maps each output position to the flat offset of a broadcast operand.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia;  // empty => identity
  std::vector<std::size_t> ib;
  bool a_scalar = false;
  bool b_scalar = false;
};

std::vector<std::size_t> index_map(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t axis_in = in.size() - 1 - i;
    const std::size_t axis_out = rank - 1 - i;
    stride[axis_out] = in[axis_in] == 1 ? 0 : s;
    s *= in[axis_in];
  }
  std::vector<std::size_t> map(shape_numel(out));
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    map[flat] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++idx[axis];
      offset += stride[axis];
      if (idx[axis] < out[axis]) break;
      offset -= stride[axis] * idx[axis];
      idx[axis] = 0;
    }
  }
  return map;
}

Broadcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t ea = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t eb = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " +
                           shape_str(a) + " with " + shape_str(b));
    }
    bc.out[rank - 1 - i] = std::max(ea, eb);
  }
  bc.a_scalar = shape_numel(a) == 1;
  bc.b_scalar = shape_numel(b) == 1;
  if (!bc.a_scalar && a != bc.out) bc.ia = index_map(a, bc.out);
  if (!bc.b_scalar && b != bc.out) bc.ib = index_map(b, bc.out);
  return bc;
}

// f(a, b) -> value; da(a, b, y) and db(a, b, y) are local partials.
template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da,
              DB db) {
  auto bc = broadcast(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(bc.out);
  const auto av = a.data();
  const auto bv = b.data();
  auto pos_a = [a_scalar = bc.a_scalar, ia = bc.ia](std::size_t i) {
    return a_scalar ? 0 : (ia.empty() ? i : ia[i]);
  };
  auto pos_b = [b_scalar = bc.b_scalar, ib = bc.ib](std::size_t i) {
    return b_scalar ? 0 : (ib.empty() ? i : ib[i]);
  };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[pos_a(i)], bv[pos_b(i)]);
  return Tensor::make_result(
      bc.out, std::move(out), {a, b},
      [pos_a, pos_b, da, db, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const auto& g = self.grad;
        const auto& y = self.value;
        if (pa.requires_grad) {
          auto& ga = pa.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ia = pos_a(i), ib = pos_b(i);
            ga[ia] += g[i] * da(pa.value[ia], pb.value[ib], y[i]);
          }
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t ia = pos_a(i), ib = pos_b(i);
            gb[ib] += g[i] * db(pa.value[ia], pb.value[ib], y[i]);
          }
        }
      });
}

// f(x) -> value; df(x, y) -> local derivative.
template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      gp[i] += self.grad[i] * df(p.value[i], self.value[i]);
    }
  });
}

void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.dim()) {
    throw ArgumentError(std::string(op) + ": axis " + std::to_string(axis) +
                        " invalid for shape " + shape_str(x.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, [value](double v) { return v + value; },
      [](double, double) { return 1.0; });
}

Tensor square(const Tensor& x) {
  return unary(
      x, [](double v) { return v * v; },
      [](double v, double) { return 2.0 * v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor abs(const Tensor& x) {
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  const auto xv = x.data();
  auto th = std::make_shared<std::vector<double>>(xv.size());
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    const double t = std::tanh(c * (v + k * v * v * v));
    (*th)[i] = t;
    out[i] = 0.5 * v * (1.0 + t);
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [th](Node& self) {
    Node& p = *self.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const double v = p.value[i];
      const double t = (*th)[i];
      const double du = c * (1.0 + 3.0 * k * v * v);
      gp[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

Tensor acos_clamped(const Tensor& x) {
  return unary(
      x, [](double v) { return std::acos(std::clamp(v, -1.0, 1.0)); },
      [](double v, double) {
        if (v <= -1.0 || v >= 1.0) return 0.0;
        return -1.0 / std::sqrt(std::max(1.0 - v * v, 1e-24));
      });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({}, {s}, {x}, [](Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    const double g = self.grad[0];
    for (auto& v : gp) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ArgumentError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "sum_axis");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
    else if (keepdim) out_shape.push_back(1);
  }
  const auto xv = x.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += xv[(o * n + j) * inner + i];
  return Tensor::make_result(
      out_shape, std::move(out), {x}, [outer, inner, n](Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t j = 0; j < n; ++j)
            for (std::size_t i = 0; i < inner; ++i)
              gp[(o * n + j) * inner + i] += self.grad[o * inner + i];
      });
}

Tensor mean_axis(const Tensor& x, std::size_t axis, bool keepdim) {
  check_axis(x, axis, "mean_axis");
  return scale(sum_axis(x, axis, keepdim),
               1.0 / static_cast<double>(x.shape()[axis]));
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result(shape, std::move(out), {x}, [](Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const auto& s = x.shape();
  const std::size_t rank = s.size();
  if (order.size() != rank) {
    throw ArgumentError("permute: order rank mismatch for " + shape_str(s));
  }
  std::vector<bool> used(rank, false);
  for (auto o : order) {
    if (o >= rank || used[o]) throw ArgumentError("permute: invalid order");
    used[o] = true;
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  Shape out_shape(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = s[order[i]];
    stride[i] = in_stride[order[i]];
  }
  // Source offset of every output element.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t offset = 0;
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    src[flat] = offset;
    for (std::size_t axis = rank; axis-- > 0;) {
      ++idx[axis];
      offset += stride[axis];
      if (idx[axis] < out_shape[axis]) break;
      offset -= stride[axis] * idx[axis];
      idx[axis] = 0;
    }
  }
  const auto xv = x.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return Tensor::make_result(out_shape, std::move(out), {x},
                             [src = std::move(src)](Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < src.size(); ++i)
                                 gp[src[i]] += self.grad[i];
                             });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.dim() < 2) throw ArgumentError("transpose_last2 needs rank >= 2");
  std::vector<std::size_t> order(x.dim());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(x, order);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length) {
  check_axis(x, axis, "slice");
  const auto& s = x.shape();
  if (start + length > s[axis]) {
    throw ArgumentError("slice: range exceeds extent of " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape = s;
  out_shape[axis] = length;
  const auto xv = x.data();
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + (o * n + start) * inner, length * inner,
                out.begin() + o * length * inner);
  return Tensor::make_result(
      out_shape, std::move(out), {x},
      [outer, inner, n, start, length](Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < length * inner; ++i)
            gp[(o * n + start) * inner + i] += self.grad[o * length * inner + i];
      });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ArgumentError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  check_axis(parts[0], axis, "concat");
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      ok = i == axis || s[i] == s0[i];
    if (!ok) {
      throw DimensionError("concat: " + shape_str(s) + " incompatible with " +
                           shape_str(s0) + " along axis " +
                           std::to_string(axis));
    }
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.shape()[axis];
    offsets.push_back(at);
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + o * len * inner, len * inner,
                  out.begin() + (o * total + at) * inner);
    at += len;
  }
  return Tensor::make_result(
      out_shape, std::move(out), parts,
      [outer, inner, total, offsets, axis](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          Node& p = *self.parents[k];
          if (!p.requires_grad) continue;
          const std::size_t len = p.shape[axis];
          auto& gp = p.grad_buffer();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len * inner; ++i)
              gp[o * len * inner + i] +=
                  self.grad[(o * total + offsets[k]) * inner + i];
        }
      });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  if (x.dim() != 3 || index.size() != x.shape()[0]) {
    throw DimensionError("gather_rows: expected [B x T x D] with B indices, got " +
                         shape_str(x.shape()));
  }
  const std::size_t b = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
  std::vector<std::size_t> rows(index.begin(), index.end());
  for (auto r : rows) {
    if (r >= t) throw ArgumentError("gather_rows: index out of range");
  }
  const auto xv = x.data();
  std::vector<double> out(b * d);
  for (std::size_t i = 0; i < b; ++i)
    std::copy_n(xv.begin() + (i * t + rows[i]) * d, d, out.begin() + i * d);
  return Tensor::make_result({b, d}, std::move(out), {x},
                             [rows, t, d](Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < rows.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j)
                                   gp[(i * t + rows[i]) * d + j] +=
                                       self.grad[i * d + j];
                             });
}

}  // namespace mtclip::ops
