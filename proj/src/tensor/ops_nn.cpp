#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "mtclip/error.hpp"
#include "mtclip/ops.hpp"

namespace mtclip::ops {

namespace {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
using Eigen::Index;

MapC cmat(const std::vector<double>& v, std::size_t offset, std::size_t r,
          std::size_t c) {
  return MapC(v.data() + offset, static_cast<Index>(r), static_cast<Index>(c));
}
Map mmat(std::vector<double>& v, std::size_t offset, std::size_t r,
         std::size_t c) {
  return Map(v.data() + offset, static_cast<Index>(r), static_cast<Index>(c));
}

void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.dim()) {
    throw ArgumentError(std::string(op) + ": axis " + std::to_string(axis) +
                        " invalid for shape " + shape_str(x.shape()));
  }
}

struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  return bmm(a, b);
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  bool ok = sa.size() >= 2 && sa.size() == sb.size() &&
            sa[sa.size() - 1] == sb[sb.size() - 2];
  for (std::size_t i = 0; ok && i + 2 < sa.size(); ++i) ok = sa[i] == sb[i];
  if (!ok) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) +
                         " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n);
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < batch; ++i) {
    mmat(out, i * m * n, m, n).noalias() =
        cmat(av, i * m * k, m, k) * cmat(bv, i * k * n, k, n);
  }
  return Tensor::make_result(
      out_shape, std::move(out), {a, b}, [batch, m, k, n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        for (std::size_t i = 0; i < batch; ++i) {
          auto g = cmat(self.grad, i * m * n, m, n);
          if (pa.requires_grad) {
            mmat(pa.grad_buffer(), i * m * k, m, k).noalias() +=
                g * cmat(pb.value, i * k * n, k, n).transpose();
          }
          if (pb.requires_grad) {
            mmat(pb.grad_buffer(), i * k * n, k, n).noalias() +=
                cmat(pa.value, i * m * k, m, k).transpose() * g;
          }
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.dim() < 1 || weight.dim() != 2 || x.shape().back() != weight.shape()[0] ||
      (bias.defined() && (bias.dim() != 1 || bias.shape()[0] != weight.shape()[1]))) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + ", weight " +
                         shape_str(weight.shape()) +
                         (bias.defined() ? ", bias " + shape_str(bias.shape()) : ""));
  }
  const std::size_t in = weight.shape()[0], outd = weight.shape()[1];
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  std::vector<double> out(rows * outd);
  auto y = mmat(out, 0, rows, outd);
  y.noalias() = cmat(x.node()->value, 0, rows, in) *
                cmat(weight.node()->value, 0, in, outd);
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(bias.node()->value.data(),
                                            static_cast<Index>(outd));
    y.rowwise() += bv;
  }
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result(
      out_shape, std::move(out), parents, [rows, in, outd](Node& self) {
        auto g = cmat(self.grad, 0, rows, outd);
        Node& px = *self.parents[0];
        Node& pw = *self.parents[1];
        if (px.requires_grad) {
          mmat(px.grad_buffer(), 0, rows, in).noalias() +=
              g * cmat(pw.value, 0, in, outd).transpose();
        }
        if (pw.requires_grad) {
          mmat(pw.grad_buffer(), 0, in, outd).noalias() +=
              cmat(px.value, 0, rows, in).transpose() * g;
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          // Plain loop: Eigen's reductions vectorize by pointer alignment,
          // which would make the summation order vary between runs.
          double* gb = self.parents[2]->grad_buffer().data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < outd; ++j) gb[j] += self.grad[r * outd + j];
        }
      });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "softmax");
  const auto v = axis_view(x.shape(), axis);
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.n; ++j) mx = std::max(mx, xv[base + j * v.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const double e = std::exp(xv[base + j * v.inner] - mx);
        out[base + j * v.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < v.n; ++j) out[base + j * v.inner] /= z;
    }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [v](Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.n * v.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < v.n; ++j)
          dot += g[base + j * v.inner] * y[base + j * v.inner];
        for (std::size_t j = 0; j < v.n; ++j) {
          const std::size_t at = base + j * v.inner;
          gp[at] += y[at] * (g[at] - dot);
        }
      }
  });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  check_axis(x, axis, "log_softmax");
  const auto v = axis_view(x.shape(), axis);
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.n; ++j) mx = std::max(mx, xv[base + j * v.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) z += std::exp(xv[base + j * v.inner] - mx);
      const double lz = mx + std::log(z);
      for (std::size_t j = 0; j < v.n; ++j)
        out[base + j * v.inner] = xv[base + j * v.inner] - lz;
    }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [v](Node& self) {
    auto& gp = self.parents[0]->grad_buffer();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.n * v.inner + i;
        double gs = 0.0;
        for (std::size_t j = 0; j < v.n; ++j) gs += g[base + j * v.inner];
        for (std::size_t j = 0; j < v.n; ++j) {
          const std::size_t at = base + j * v.inner;
          gp[at] += g[at] - std::exp(y[at]) * gs;
        }
      }
  });
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::int32_t> labels,
                             std::int32_t ignore_id, std::size_t* counted) {
  if (logits.dim() < 2) {
    throw DimensionError("softmax_cross_entropy: logits need [N x C x ...], got " +
                         shape_str(logits.shape()));
  }
  const auto v = axis_view(logits.shape(), 1);
  if (labels.size() != v.outer * v.inner) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(logits.shape()));
  }
  const auto xv = logits.data();
  // Probabilities are kept for the backward pass.
  std::vector<double> prob(xv.size(), 0.0);
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::int32_t y = lab[o * v.inner + i];
      if (y == ignore_id) continue;
      if (y < 0 || static_cast<std::size_t>(y) >= v.n) {
        throw InputError("softmax_cross_entropy: label " + std::to_string(y) +
                         " outside [0, " + std::to_string(v.n) + ")");
      }
      const std::size_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v.n; ++j) mx = std::max(mx, xv[base + j * v.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const double e = std::exp(xv[base + j * v.inner] - mx);
        prob[base + j * v.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < v.n; ++j) prob[base + j * v.inner] /= z;
      total += -(xv[base + static_cast<std::size_t>(y) * v.inner] - mx - std::log(z));
      ++count;
    }
  if (counted) *counted = count;
  const double value = count ? total / static_cast<double>(count) : 0.0;
  return Tensor::make_result(
      {}, {value}, {logits},
      [v, count, ignore_id, lab = std::move(lab), prob = std::move(prob)](Node& self) {
        if (count == 0) return;
        auto& gp = self.parents[0]->grad_buffer();
        const double g = self.grad[0] / static_cast<double>(count);
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t i = 0; i < v.inner; ++i) {
            const std::int32_t y = lab[o * v.inner + i];
            if (y == ignore_id) continue;
            const std::size_t base = o * v.n * v.inner + i;
            for (std::size_t j = 0; j < v.n; ++j) {
              const std::size_t at = base + j * v.inner;
              gp[at] += g * (prob[at] - (static_cast<std::int32_t>(j) == y ? 1.0 : 0.0));
            }
          }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const std::size_t d = x.shape().empty() ? 0 : x.shape().back();
  if (d == 0 || gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + ", gain " +
                         shape_str(gain.shape()) + ", bias " +
                         shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        const auto& g = self.grad;
        if (pg.requires_grad) {
          auto& gg = pg.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (pb.requires_grad) {
          auto& gb = pb.grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (px.requires_grad) {
          auto& gx = px.grad_buffer();
          const auto& gain_v = pg.value;
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * gain_v[j];
              s1 += dh;
              s2 += dh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = g[r * d + j] * gain_v[j];
              gx[r * d + j] +=
                  inv_std[r] * (dh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
            }
          }
        }
      });
}

Tensor l2_normalize(const Tensor& x, std::size_t axis, double eps) {
  check_axis(x, axis, "l2_normalize");
  const auto v = axis_view(x.shape(), axis);
  const auto xv = x.data();
  std::vector<double> out(xv.size());
  std::vector<double> inv_norm(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double ss = 0.0;
      for (std::size_t j = 0; j < v.n; ++j) ss += xv[base + j * v.inner] * xv[base + j * v.inner];
      const double inv = 1.0 / std::sqrt(ss + eps);
      inv_norm[o * v.inner + i] = inv;
      for (std::size_t j = 0; j < v.n; ++j)
        out[base + j * v.inner] = xv[base + j * v.inner] * inv;
    }
  return Tensor::make_result(
      x.shape(), std::move(out), {x},
      [v, inv_norm = std::move(inv_norm)](Node& self) {
        auto& gp = self.parents[0]->grad_buffer();
        const auto& y = self.value;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t i = 0; i < v.inner; ++i) {
            const std::size_t base = o * v.n * v.inner + i;
            double dot = 0.0;
            for (std::size_t j = 0; j < v.n; ++j)
              dot += g[base + j * v.inner] * y[base + j * v.inner];
            const double inv = inv_norm[o * v.inner + i];
            for (std::size_t j = 0; j < v.n; ++j) {
              const std::size_t at = base + j * v.inner;
              gp[at] += inv * (g[at] - y[at] * dot);
            }
          }
      });
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids,
                 const Shape& id_shape) {
  if (table.dim() != 2 || shape_numel(id_shape) != ids.size()) {
    throw DimensionError("embedding: table " + shape_str(table.shape()) +
                         " with id shape " + shape_str(id_shape));
  }
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw InputError("embedding: token id " + std::to_string(ids[i]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  const auto tv = table.data();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(tv.begin() + rows[i] * d, d, out.begin() + i * d);
  Shape out_shape = id_shape;
  out_shape.push_back(d);
  return Tensor::make_result(out_shape, std::move(out), {table},
                             [rows = std::move(rows), d](Node& self) {
                               auto& gp = self.parents[0]->grad_buffer();
                               for (std::size_t i = 0; i < rows.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j)
                                   gp[rows[i] * d + j] += self.grad[i * d + j];
                             });
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k,
                                    const Tensor& v, bool causal) {
  if (q.dim() != 4 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const std::size_t groups = q.shape()[0] * q.shape()[1];
  const std::size_t t = q.shape()[2], d = q.shape()[3];
  const double inv = 1.0 / std::sqrt(static_cast<double>(d));
  const auto& qv = q.node()->value;
  const auto& kv = k.node()->value;
  const auto& vv = v.node()->value;
  // Attention probabilities are kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(groups * t * t);
  std::vector<double> out(groups * t * d);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t off = gi * t * d;
    auto p = mmat(*probs, gi * t * t, t, t);
    p.noalias() = inv * (cmat(qv, off, t, d) * cmat(kv, off, t, d).transpose());
    for (std::size_t i = 0; i < t; ++i) {
      const std::size_t valid = causal ? i + 1 : t;
      auto row = p.row(static_cast<Index>(i));
      const double mx = row.head(static_cast<Index>(valid)).maxCoeff();
      double z = 0.0;
      for (std::size_t j = 0; j < valid; ++j) {
        row(static_cast<Index>(j)) = std::exp(row(static_cast<Index>(j)) - mx);
        z += row(static_cast<Index>(j));
      }
      row.head(static_cast<Index>(valid)) /= z;
      for (std::size_t j = valid; j < t; ++j) row(static_cast<Index>(j)) = 0.0;
    }
    mmat(out, off, t, d).noalias() = p * cmat(vv, off, t, d);
  }
  return Tensor::make_result(
      q.shape(), std::move(out), {q, k, v}, [probs, groups, t, d, inv](Node& self) {
        Node& nq = *self.parents[0];
        Node& nk = *self.parents[1];
        Node& nv = *self.parents[2];
        RowMat dp(static_cast<Index>(t), static_cast<Index>(t));
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const std::size_t off = gi * t * d;
          auto p = cmat(*probs, gi * t * t, t, t);
          auto g = cmat(self.grad, off, t, d);
          if (nv.requires_grad) {
            mmat(nv.grad_buffer(), off, t, d).noalias() += p.transpose() * g;
          }
          if (!nq.requires_grad && !nk.requires_grad) continue;
          dp.noalias() = g * cmat(nv.value, off, t, d).transpose();
          for (Index i = 0; i < dp.rows(); ++i) {
            const double dot = dp.row(i).dot(p.row(i));
            dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix() * inv;
          }
          if (nq.requires_grad) {
            mmat(nq.grad_buffer(), off, t, d).noalias() += dp * cmat(nk.value, off, t, d);
          }
          if (nk.requires_grad) {
            mmat(nk.grad_buffer(), off, t, d).noalias() +=
                dp.transpose() * cmat(nq.value, off, t, d);
          }
        }
      });
}

}  // namespace mtclip::ops
