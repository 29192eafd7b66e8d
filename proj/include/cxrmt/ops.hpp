#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "cxrmt/tensor.hpp"

namespace cxrmt {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline void require_finite(const Tensor& t, const char* op) {
  for (double v : t.data())
    if (!std::isfinite(v)) throw NumericsError(std::string(op) + ": non-finite input value");
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
}

inline Tensor make_result(Shape shape, std::vector<double> values, OpKind kind,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->op = kind;
  if (!grad_enabled()) return Tensor(std::move(node));
  for (auto& in : inputs) {
    node->requires_grad = node->requires_grad || in.requires_grad();
    node->inputs.push_back(in.node());
  }
  if (node->requires_grad) node->backward_fn = std::move(backward_fn);
  return Tensor(std::move(node));
}

inline bool wants_grad(const Node& self, std::size_t i) { return self.inputs[i]->requires_grad; }

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t out_channels, kh, kw, stride, padding;
  std::size_t out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

// col is [C*KH*KW, B*Ho*Wo] row-major.
inline void im2col(std::span<const double> x, const ConvGeometry& g, std::vector<double>& col) {
  const std::size_t cols = g.batch * g.pixels();
  col.assign(g.patch() * cols, 0.0);
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col.data() + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* plane = x.data() + (b * g.channels + c) * g.height * g.width;
          double* dst = row + b * g.pixels();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = long(oy * g.stride + ky) - long(g.padding);
            if (iy < 0 || iy >= long(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = long(ox * g.stride + kx) - long(g.padding);
              if (ix < 0 || ix >= long(g.width)) continue;
              dst[oy * g.out_w + ox] = plane[iy * long(g.width) + ix];
            }
          }
        }
      }
}

inline void col2im_add(const std::vector<double>& col, const ConvGeometry& g, std::span<double> dx) {
  const std::size_t cols = g.batch * g.pixels();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col.data() + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* plane = dx.data() + (b * g.channels + c) * g.height * g.width;
          const double* src = row + b * g.pixels();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = long(oy * g.stride + ky) - long(g.padding);
            if (iy < 0 || iy >= long(g.height)) continue;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = long(ox * g.stride + kx) - long(g.padding);
              if (ix < 0 || ix >= long(g.width)) continue;
              plane[iy * long(g.width) + ix] += src[oy * g.out_w + ox];
            }
          }
        }
      }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// x [B,C,H,W], weight [O,C,KH,KW], bias [O] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dParams p = {}) {
  detail::require_rank(x, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d weight");
  if (weight.dim(1) != x.dim(1))
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels, got " + std::to_string(x.dim(1)));
  if (p.stride == 0) throw ShapeError("conv2d: stride must be positive");
  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0),
                         weight.dim(2), weight.dim(3), p.stride, p.padding, 0, 0};
  if (g.height + 2 * g.padding < g.kh || g.width + 2 * g.padding < g.kw)
    throw ShapeError("conv2d: kernel larger than padded input");
  g.out_h = (g.height + 2 * g.padding - g.kh) / g.stride + 1;
  g.out_w = (g.width + 2 * g.padding - g.kw) / g.stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.out_channels))
    throw ShapeError("conv2d: bias must be [" + std::to_string(g.out_channels) + "]");
  detail::require_finite(x, "conv2d");
  detail::require_finite(weight, "conv2d");
  if (has_bias) detail::require_finite(bias, "conv2d");

  const std::size_t cols = g.batch * g.pixels();
  std::vector<double> col;
  detail::im2col(x.data(), g, col);
  std::vector<double> prod(g.out_channels * cols);
  detail::MapMat(prod.data(), g.out_channels, cols).noalias() =
      detail::ConstMapMat(weight.data().data(), g.out_channels, g.patch()) *
      detail::ConstMapMat(col.data(), g.patch(), cols);

  std::vector<double> out(g.batch * g.out_channels * g.pixels());
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      const double add = has_bias ? bias[o] : 0.0;
      const double* src = prod.data() + o * cols + b * g.pixels();
      double* dst = out.data() + (b * g.out_channels + o) * g.pixels();
      for (std::size_t i = 0; i < g.pixels(); ++i) dst[i] = src[i] + add;
    }

  std::vector<Tensor> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::make_result(
      {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), OpKind::conv2d, inputs,
      [g, has_bias](Node& self) {
        const std::size_t cols = g.batch * g.pixels();
        std::vector<double> dout(g.out_channels * cols);
        for (std::size_t b = 0; b < g.batch; ++b)
          for (std::size_t o = 0; o < g.out_channels; ++o)
            std::copy_n(self.grad.data() + (b * g.out_channels + o) * g.pixels(), g.pixels(),
                        dout.data() + o * cols + b * g.pixels());
        detail::ConstMapMat dout_m(dout.data(), g.out_channels, cols);
        const Node& xn = *self.inputs[0];
        Node& wn = *self.inputs[1];
        if (wn.requires_grad) {
          std::vector<double> col;
          detail::im2col(xn.data, g, col);
          detail::MapMat(wn.grad.data(), g.out_channels, g.patch()).noalias() +=
              dout_m * detail::ConstMapMat(col.data(), g.patch(), cols).transpose();
        }
        if (self.inputs[0]->requires_grad) {
          std::vector<double> dcol(g.patch() * cols);
          detail::MapMat(dcol.data(), g.patch(), cols).noalias() =
              detail::ConstMapMat(wn.data.data(), g.out_channels, g.patch()).transpose() * dout_m;
          detail::col2im_add(dcol, g, self.inputs[0]->grad);
        }
        if (has_bias && self.inputs[2]->requires_grad) {
          auto& db = self.inputs[2]->grad;
          for (std::size_t o = 0; o < g.out_channels; ++o) db[o] += dout_m.row(o).sum();
        }
      });
}

// Running statistics of one batch-norm layer. momentum weights the old value.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

// x is [B,C] or [B,C,H,W]; gamma and beta are [C].
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         BatchNormState& state, bool training) {
  if (x.rank() != 2 && x.rank() != 4)
    throw ShapeError("batch_norm: expected rank 2 or 4, got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != channels || beta.numel() != channels)
    throw ShapeError("batch_norm: affine parameters must have " + std::to_string(channels) +
                     " entries");
  if (state.running_mean.size() != channels || state.running_var.size() != channels)
    throw ShapeError("batch_norm: running statistics sized for a different channel count");
  detail::require_finite(x, "batch_norm");
  detail::require_finite(gamma, "batch_norm");
  detail::require_finite(beta, "batch_norm");

  const std::size_t m = batch * spatial;
  std::vector<double> mean(channels), invstd(channels);
  const auto xd = x.data();
  auto at = [&](std::size_t b, std::size_t c) { return (b * channels + c) * spatial; };
  if (training) {
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < spatial; ++i) s += xd[at(b, c) + i];
      const double mu = s / double(m);
      double v = 0.0;
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t i = 0; i < spatial; ++i) {
          const double d = xd[at(b, c) + i] - mu;
          v += d * d;
        }
      const double var = v / double(m);
      mean[c] = mu;
      invstd[c] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = m > 1 ? v / double(m - 1) : var;
      state.running_mean[c] = state.momentum * state.running_mean[c] + (1.0 - state.momentum) * mu;
      state.running_var[c] =
          state.momentum * state.running_var[c] + (1.0 - state.momentum) * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mean[c] = state.running_mean[c];
      invstd[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }

  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < spatial; ++i) {
        const std::size_t k = at(b, c) + i;
        xhat[k] = (xd[k] - mean[c]) * invstd[c];
        out[k] = gamma[c] * xhat[k] + beta[c];
      }

  return detail::make_result(
      x.shape(), std::move(out), OpKind::batch_norm, {x, gamma, beta},
      [xhat = std::move(xhat), invstd, batch, channels, spatial, m, training](Node& self) {
        const auto& g = self.grad;
        const auto& gam = self.inputs[1]->data;
        auto at = [&](std::size_t b, std::size_t c) { return (b * channels + c) * spatial; };
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < spatial; ++i) {
              const std::size_t k = at(b, c) + i;
              sum_g += g[k];
              sum_gx += g[k] * xhat[k];
            }
          if (self.inputs[1]->requires_grad) self.inputs[1]->grad[c] += sum_gx;
          if (self.inputs[2]->requires_grad) self.inputs[2]->grad[c] += sum_g;
          if (!self.inputs[0]->requires_grad) continue;
          auto& dx = self.inputs[0]->grad;
          const double scale = gam[c] * invstd[c];
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < spatial; ++i) {
              const std::size_t k = at(b, c) + i;
              if (training)
                dx[k] += scale / double(m) * (double(m) * g[k] - sum_g - xhat[k] * sum_gx);
              else
                dx[k] += scale * g[k];
            }
        }
      });
}

inline Tensor relu(const Tensor& x) {
  detail::require_finite(x, "relu");
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  return detail::make_result(x.shape(), std::move(out), OpKind::relu, {x}, [](Node& self) {
    const auto& xd = self.inputs[0]->data;
    auto& dx = self.inputs[0]->grad;
    for (std::size_t i = 0; i < xd.size(); ++i)
      if (xd[i] > 0.0) dx[i] += self.grad[i];
  });
}

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  detail::require_finite(x, "sigmoid");
  std::vector<double> out(x.numel());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(xd[i]);
  return detail::make_result(x.shape(), std::move(out), OpKind::sigmoid, {x}, [](Node& self) {
    auto& dx = self.inputs[0]->grad;
    for (std::size_t i = 0; i < self.data.size(); ++i) {
      const double y = self.data[i];
      dx[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

// Non-overlapping k×k average pooling; trailing rows/columns are dropped.
inline Tensor avg_pool(const Tensor& x, std::size_t k) {
  detail::require_rank(x, 4, "avg_pool");
  if (k == 0 || x.dim(2) < k || x.dim(3) < k)
    throw ShapeError("avg_pool: window " + std::to_string(k) + " does not fit " +
                     shape_str(x.shape()));
  detail::require_finite(x, "avg_pool");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / k, ow = w / k;
  const double inv = 1.0 / double(k * k);
  std::vector<double> out(planes * oh * ow, 0.0);
  const auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = 0.0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx)
            s += xd[(p * h + oy * k + dy) * w + ox * k + dx];
        out[(p * oh + oy) * ow + ox] = s * inv;
      }
  return detail::make_result(
      {x.dim(0), x.dim(1), oh, ow}, std::move(out), OpKind::avg_pool, {x},
      [planes, h, w, oh, ow, k, inv](Node& self) {
        auto& gx = self.inputs[0]->grad;
        for (std::size_t p = 0; p < planes; ++p)
          for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const double g = self.grad[(p * oh + oy) * ow + ox] * inv;
              for (std::size_t dy = 0; dy < k; ++dy)
                for (std::size_t dx = 0; dx < k; ++dx) gx[(p * h + oy * k + dy) * w + ox * k + dx] += g;
            }
      });
}

// [B,C,H,W] -> [B,C]
inline Tensor global_avg_pool(const Tensor& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  detail::require_finite(x, "global_avg_pool");
  const std::size_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  std::vector<double> out(planes);
  const auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    double s = 0.0;
    for (std::size_t i = 0; i < area; ++i) s += xd[p * area + i];
    out[p] = s / double(area);
  }
  return detail::make_result({x.dim(0), x.dim(1)}, std::move(out), OpKind::global_avg_pool, {x},
                             [planes, area](Node& self) {
                               auto& gx = self.inputs[0]->grad;
                               for (std::size_t p = 0; p < planes; ++p) {
                                 const double g = self.grad[p] / double(area);
                                 for (std::size_t i = 0; i < area; ++i) gx[p * area + i] += g;
                               }
                             });
}

// Concatenate along dim 1 of rank-2 or rank-4 tensors that agree elsewhere.
inline Tensor channel_concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("channel_concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (ref.size() != 2 && ref.size() != 4) throw ShapeError("channel_concat: rank must be 2 or 4");
  std::size_t channels = 0;
  for (const auto& t : parts) {
    const Shape& s = t.shape();
    bool ok = s.size() == ref.size() && s[0] == ref[0];
    for (std::size_t d = 2; ok && d < s.size(); ++d) ok = s[d] == ref[d];
    if (!ok)
      throw ShapeError("channel_concat: incompatible shapes " + shape_str(ref) + " and " +
                       shape_str(s));
    detail::require_finite(t, "channel_concat");
    channels += s[1];
  }
  const std::size_t batch = ref[0];
  const std::size_t spatial = ref.size() == 4 ? ref[2] * ref[3] : 1;
  std::vector<double> out(batch * channels * spatial);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : parts) {
    offsets.push_back(off);
    const std::size_t c = t.dim(1);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(t.data().data() + b * c * spatial, c * spatial,
                  out.data() + (b * channels + off) * spatial);
    off += c;
  }
  Shape shape = ref;
  shape[1] = channels;
  return detail::make_result(
      shape, std::move(out), OpKind::channel_concat, std::vector<Tensor>(parts.begin(), parts.end()),
      [offsets, batch, channels, spatial](Node& self) {
        for (std::size_t j = 0; j < self.inputs.size(); ++j) {
          Node& in = *self.inputs[j];
          if (!in.requires_grad) continue;
          const std::size_t c = in.shape[1];
          for (std::size_t b = 0; b < batch; ++b) {
            const double* src = self.grad.data() + (b * channels + offsets[j]) * spatial;
            double* dst = in.grad.data() + b * c * spatial;
            for (std::size_t i = 0; i < c * spatial; ++i) dst[i] += src[i];
          }
        }
      });
}

inline Tensor channel_concat(std::initializer_list<Tensor> parts) {
  return channel_concat(std::span<const Tensor>(parts.begin(), parts.size()));
}

// x [B,in], weight [out,in], bias [out] -> [B,out]
inline Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(x, 2, "dense");
  detail::require_rank(weight, 2, "dense weight");
  if (weight.dim(1) != x.dim(1))
    throw ShapeError("dense: weight expects " + std::to_string(weight.dim(1)) + " features, got " +
                     std::to_string(x.dim(1)));
  if (bias.numel() != weight.dim(0)) throw ShapeError("dense: bias size mismatch");
  detail::require_finite(x, "dense");
  detail::require_finite(weight, "dense");
  detail::require_finite(bias, "dense");
  const std::size_t batch = x.dim(0), in = x.dim(1), outn = weight.dim(0);
  std::vector<double> out(batch * outn);
  detail::MapMat om(out.data(), batch, outn);
  om.noalias() = detail::ConstMapMat(x.data().data(), batch, in) *
                 detail::ConstMapMat(weight.data().data(), outn, in).transpose();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < outn; ++o) out[b * outn + o] += bias[o];
  return detail::make_result(
      {batch, outn}, std::move(out), OpKind::dense, {x, weight, bias},
      [batch, in, outn](Node& self) {
        detail::ConstMapMat g(self.grad.data(), batch, outn);
        if (self.inputs[0]->requires_grad)
          detail::MapMat(self.inputs[0]->grad.data(), batch, in).noalias() +=
              g * detail::ConstMapMat(self.inputs[1]->data.data(), outn, in);
        if (self.inputs[1]->requires_grad)
          detail::MapMat(self.inputs[1]->grad.data(), outn, in).noalias() +=
              g.transpose() * detail::ConstMapMat(self.inputs[0]->data.data(), batch, in);
        if (self.inputs[2]->requires_grad)
          for (std::size_t o = 0; o < outn; ++o) self.inputs[2]->grad[o] += g.col(o).sum();
      });
}

inline Tensor upsample_nearest(const Tensor& x, std::size_t factor) {
  detail::require_rank(x, 4, "upsample_nearest");
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
  detail::require_finite(x, "upsample_nearest");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<double> out(planes * oh * ow);
  const auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        out[(p * oh + y) * ow + xx] = xd[(p * h + y / factor) * w + xx / factor];
  return detail::make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out),
                             OpKind::upsample_nearest, {x},
                             [planes, h, w, oh, ow, factor](Node& self) {
                               auto& gx = self.inputs[0]->grad;
                               for (std::size_t p = 0; p < planes; ++p)
                                 for (std::size_t y = 0; y < oh; ++y)
                                   for (std::size_t xx = 0; xx < ow; ++xx)
                                     gx[(p * h + y / factor) * w + xx / factor] +=
                                         self.grad[(p * oh + y) * ow + xx];
                             });
}

namespace detail {

// Half-pixel-centre sampling taps along one axis.
struct LinearTap {
  std::size_t lo, hi;
  double w_hi;
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double ratio = double(in) / double(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (double(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, double(in - 1));
    const std::size_t lo = std::min<std::size_t>(std::size_t(std::floor(src)), in - 1);
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - double(lo)};
  }
  return taps;
}

}  // namespace detail

inline Tensor upsample_bilinear(const Tensor& x, std::size_t factor) {
  detail::require_rank(x, 4, "upsample_bilinear");
  if (factor == 0) throw ShapeError("upsample_bilinear: factor must be positive");
  detail::require_finite(x, "upsample_bilinear");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  auto ty = detail::linear_taps(h, oh), tx = detail::linear_taps(w, ow);
  std::vector<double> out(planes * oh * ow);
  const auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xd.data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const auto& a = ty[y];
        const auto& b = tx[xx];
        const double top = src[a.lo * w + b.lo] * (1 - b.w_hi) + src[a.lo * w + b.hi] * b.w_hi;
        const double bot = src[a.hi * w + b.lo] * (1 - b.w_hi) + src[a.hi * w + b.hi] * b.w_hi;
        out[(p * oh + y) * ow + xx] = top * (1 - a.w_hi) + bot * a.w_hi;
      }
  }
  return detail::make_result(
      {x.dim(0), x.dim(1), oh, ow}, std::move(out), OpKind::upsample_bilinear, {x},
      [planes, h, w, oh, ow, ty = std::move(ty), tx = std::move(tx)](Node& self) {
        auto& gx = self.inputs[0]->grad;
        for (std::size_t p = 0; p < planes; ++p) {
          double* dst = gx.data() + p * h * w;
          for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) {
              const double g = self.grad[(p * oh + y) * ow + xx];
              const auto& a = ty[y];
              const auto& b = tx[xx];
              dst[a.lo * w + b.lo] += g * (1 - a.w_hi) * (1 - b.w_hi);
              dst[a.lo * w + b.hi] += g * (1 - a.w_hi) * b.w_hi;
              dst[a.hi * w + b.lo] += g * a.w_hi * (1 - b.w_hi);
              dst[a.hi * w + b.hi] += g * a.w_hi * b.w_hi;
            }
        }
      });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  detail::require_finite(a, "add");
  detail::require_finite(b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), OpKind::add, {a, b}, [](Node& self) {
    for (int j = 0; j < 2; ++j)
      if (self.inputs[j]->requires_grad)
        for (std::size_t i = 0; i < self.grad.size(); ++i) self.inputs[j]->grad[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  detail::require_finite(a, "sub");
  detail::require_finite(b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), OpKind::sub, {a, b}, [](Node& self) {
    if (self.inputs[0]->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) self.inputs[0]->grad[i] += self.grad[i];
    if (self.inputs[1]->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) self.inputs[1]->grad[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  detail::require_finite(a, "mul");
  detail::require_finite(b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), OpKind::mul, {a, b}, [](Node& self) {
    const auto& ad = self.inputs[0]->data;
    const auto& bd = self.inputs[1]->data;
    if (self.inputs[0]->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) self.inputs[0]->grad[i] += self.grad[i] * bd[i];
    if (self.inputs[1]->requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) self.inputs[1]->grad[i] += self.grad[i] * ad[i];
  });
}

inline Tensor scale(const Tensor& x, double factor) {
  detail::require_finite(x, "scale");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return detail::make_result(x.shape(), std::move(out), OpKind::scale, {x}, [factor](Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) self.inputs[0]->grad[i] += self.grad[i] * factor;
  });
}

inline Tensor log(const Tensor& x) {
  detail::require_finite(x, "log");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(x[i] > 0.0)) throw NumericsError("log: non-positive input");
    out[i] = std::log(x[i]);
  }
  return detail::make_result(x.shape(), std::move(out), OpKind::log, {x}, [](Node& self) {
    const auto& xd = self.inputs[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) self.inputs[0]->grad[i] += self.grad[i] / xd[i];
  });
}

// Gradient passes where lo <= x <= hi.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ShapeError("clamp: empty range");
  detail::require_finite(x, "clamp");
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
  return detail::make_result(x.shape(), std::move(out), OpKind::clamp, {x}, [lo, hi](Node& self) {
    const auto& xd = self.inputs[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xd[i] >= lo && xd[i] <= hi) self.inputs[0]->grad[i] += self.grad[i];
  });
}

inline Tensor sum(const Tensor& x) {
  detail::require_finite(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return detail::make_result({1}, {s}, OpKind::sum, {x}, [](Node& self) {
    for (auto& g : self.inputs[0]->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  detail::require_finite(x, "mean");
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = double(x.numel());
  return detail::make_result({1}, {s / n}, OpKind::mean, {x}, [n](Node& self) {
    for (auto& g : self.inputs[0]->grad) g += self.grad[0] / n;
  });
}

// Uniform entry point over every op kind; used by generic tests and tools.
struct OpParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t window = 2;  // pooling window or upsample factor
  double factor = 1.0;     // scale
  double lo = 0.0, hi = 1.0;
  BatchNormState* bn = nullptr;
  bool training = true;
};

inline Tensor forward_op(OpKind kind, std::span<const Tensor> in, const OpParams& p = {}) {
  auto need = [&](std::size_t n) {
    if (in.size() < n)
      throw ShapeError(std::string(op_name(kind)) + ": needs " + std::to_string(n) + " inputs");
  };
  switch (kind) {
    case OpKind::conv2d:
      need(2);
      return conv2d(in[0], in[1], in.size() > 2 ? in[2] : Tensor{}, {p.stride, p.padding});
    case OpKind::batch_norm:
      need(3);
      if (!p.bn) throw ShapeError("batch_norm: missing running statistics");
      return batch_norm(in[0], in[1], in[2], *p.bn, p.training);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::sigmoid: need(1); return sigmoid(in[0]);
    case OpKind::avg_pool: need(1); return avg_pool(in[0], p.window);
    case OpKind::global_avg_pool: need(1); return global_avg_pool(in[0]);
    case OpKind::channel_concat: need(1); return channel_concat(in);
    case OpKind::dense: need(3); return dense(in[0], in[1], in[2]);
    case OpKind::upsample_nearest: need(1); return upsample_nearest(in[0], p.window);
    case OpKind::upsample_bilinear: need(1); return upsample_bilinear(in[0], p.window);
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::scale: need(1); return scale(in[0], p.factor);
    case OpKind::log: need(1); return log(in[0]);
    case OpKind::clamp: need(1); return clamp(in[0], p.lo, p.hi);
    case OpKind::sum: need(1); return sum(in[0]);
    case OpKind::mean: need(1); return mean(in[0]);
    case OpKind::leaf: break;
  }
  throw ShapeError("forward_op: leaf is not an operation");
}

}  // namespace cxrmt
