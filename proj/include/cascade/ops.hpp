#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <type_traits>
#include <numbers>
#include <span>
#include <vector>

#include "cascade/errors.hpp"
#include "cascade/random.hpp"
#include "cascade/tensor.hpp"

// Differentiable operations. Each op computes its forward value eagerly and,
// when a tape is active and some input requires a gradient, records a
// closure that propagates the output gradient into the inputs.
namespace cascade::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMat = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMat = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using Array = Eigen::Array<T, Eigen::Dynamic, 1>;

template <typename T>
ConstMapMat<T> view(const BasicTensor<T>& t, std::size_t rows, std::size_t cols) {
  return ConstMapMat<T>(t.data().data(), static_cast<Eigen::Index>(rows),
                        static_cast<Eigen::Index>(cols));
}

template <typename T>
MapMat<T> view(std::span<T> buf, std::size_t rows, std::size_t cols) {
  return MapMat<T>(buf.data(), static_cast<Eigen::Index>(rows),
                   static_cast<Eigen::Index>(cols));
}

template <typename T>
MapMat<T> view(Buffer<T>& buf, std::size_t rows, std::size_t cols) {
  return view(std::span<T>(buf), rows, cols);
}

template <typename... Ts>
bool recording(const Ts&... inputs) {
  return active_tape() != nullptr && (inputs.requires_grad() || ...);
}

template <typename T>
void record(const BasicTensor<T>& output, Tape::Backward fn) {
  active_tape()->record(output, std::move(fn));
}

template <typename T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()) + " differ");
  }
}

template <typename T>
std::size_t last_dim(const BasicTensor<T>& t) { return t.shape().back(); }
template <typename T>
std::size_t leading_rows(const BasicTensor<T>& t) { return t.size() / last_dim(t); }

template <typename T>
void accumulate(const BasicTensor<T>& target, std::span<const std::type_identity_t<T>> delta) {
  if (!target.requires_grad()) return;
  auto g = target.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

// Three-dimensional activations [batch, seq, width].
template <typename T>
void require_rank3(const BasicTensor<T>& t, const char* op) {
  if (t.rank() != 3) {
    throw DimensionError(std::string(op) + ": expected [batch x seq x width], got " +
                         shape_string(t.shape()));
  }
}

inline void require_mask(std::span<const std::uint8_t> mask, std::size_t batch,
                         std::size_t seq, const char* op) {
  if (mask.size() != batch * seq) {
    throw DimensionError(std::string(op) + ": mask has " + std::to_string(mask.size()) +
                         " entries for " + std::to_string(batch) + "x" +
                         std::to_string(seq) + " positions");
  }
}

}  // namespace detail

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  const bool rec = detail::recording(a, b);
  BasicTensor<T> y(a.shape(), std::move(out), rec);
  if (rec) {
    detail::record(y, [a, b, y]() mutable {
      detail::accumulate(a, y.grad());
      detail::accumulate(b, y.grad());
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  const bool rec = detail::recording(a, b);
  BasicTensor<T> y(a.shape(), std::move(out), rec);
  if (rec) {
    detail::record(y, [a, b, y]() mutable {
      const auto gy = y.grad();
      Buffer<T> delta(gy.size());
      if (a.requires_grad()) {
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = gy[i] * b.data()[i];
        detail::accumulate(a, delta);
      }
      if (b.requires_grad()) {
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = gy[i] * a.data()[i];
        detail::accumulate(b, delta);
      }
    });
  }
  return y;
}

/// Sum of all elements as a one-element tensor.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  double total = 0.0;
  for (T v : a.data()) total += v;
  const bool rec = detail::recording(a);
  BasicTensor<T> y({1}, {static_cast<T>(total)}, rec);
  if (rec) {
    detail::record(y, [a, y]() mutable {
      Buffer<T> delta(a.size(), y.grad()[0]);
      detail::accumulate(a, delta);
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_string(a.shape()) + " by " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(m * n);
  detail::view(out, m, n).noalias() = detail::view(a, m, k) * detail::view(b, k, n);
  const bool rec = detail::recording(a, b);
  BasicTensor<T> y({m, n}, std::move(out), rec);
  if (rec) {
    detail::record(y, [a, b, y, m, k, n]() mutable {
      detail::ConstMapMat<T> dy(y.grad().data(), static_cast<Eigen::Index>(m),
                             static_cast<Eigen::Index>(n));
      if (a.requires_grad()) {
        detail::view(a.grad_buffer(), m, k).noalias() +=
            dy * detail::view(b, k, n).transpose();
      }
      if (b.requires_grad()) {
        detail::view(b.grad_buffer(), k, n).noalias() +=
            detail::view(a, m, k).transpose() * dy;
      }
    });
  }
  return y;
}

/// Affine map over the last axis: y[..., o] = sum_i x[..., i] w[i, o] + bias[o].
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  if (weight.rank() != 2 || detail::last_dim(x) != weight.dim(0) || bias.rank() != 1 ||
      bias.dim(0) != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + ", weight " +
                         shape_string(weight.shape()) + ", bias " +
                         shape_string(bias.shape()));
  }
  const std::size_t rows = detail::leading_rows(x);
  const std::size_t in = weight.dim(0), out_dim = weight.dim(1);
  Buffer<T> out(rows * out_dim);
  auto ym = detail::view(out, rows, out_dim);
  ym.noalias() = detail::view(x, rows, in) * detail::view(weight, in, out_dim);
  ym.rowwise() += detail::view(bias, 1, out_dim).row(0);
  Shape shape = x.shape();
  shape.back() = out_dim;
  const bool rec = detail::recording(x, weight, bias);
  BasicTensor<T> y(std::move(shape), std::move(out), rec);
  if (rec) {
    detail::record(y, [x, weight, bias, y, rows, in, out_dim]() mutable {
      detail::ConstMapMat<T> dy(y.grad().data(), static_cast<Eigen::Index>(rows),
                             static_cast<Eigen::Index>(out_dim));
      if (x.requires_grad()) {
        detail::view(x.grad_buffer(), rows, in).noalias() +=
            dy * detail::view(weight, in, out_dim).transpose();
      }
      if (weight.requires_grad()) {
        detail::view(weight.grad_buffer(), in, out_dim).noalias() +=
            detail::view(x, rows, in).transpose() * dy;
      }
      if (bias.requires_grad()) {
        detail::view(bias.grad_buffer(), 1, out_dim).row(0) += dy.colwise().sum();
      }
    });
  }
  return y;
}

/// GELU, tanh approximation.
template <typename T>
BasicTensor<T> gelu(const BasicTensor<T>& x) {
  static constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T kA = T(0.044715);
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::Map<const detail::Array<T>> xs(x.data().data(), n);
  detail::Array<T> t = (kC * (xs + kA * xs.cube())).tanh();
  Buffer<T> out(x.size());
  Eigen::Map<detail::Array<T>>(out.data(), n) = T(0.5) * xs * (T(1) + t);
  const bool rec = detail::recording(x);
  BasicTensor<T> y(x.shape(), std::move(out), rec);
  if (rec) {
    detail::record(y, [x, y, t = std::move(t), n]() mutable {
      Eigen::Map<const detail::Array<T>> xs(x.data().data(), n);
      Eigen::Map<const detail::Array<T>> gy(y.grad().data(), n);
      Eigen::Map<detail::Array<T>> gx(x.grad_buffer().data(), n);
      const detail::Array<T> dt = (T(1) - t.square()) * kC * (T(1) + T(3) * kA * xs.square());
      gx += gy * (T(0.5) * (T(1) + t) + T(0.5) * xs * dt);
    });
  }
  return y;
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  const auto n = static_cast<Eigen::Index>(x.size());
  Buffer<T> out(x.size());
  Eigen::Map<detail::Array<T>>(out.data(), n) =
      Eigen::Map<const detail::Array<T>>(x.data().data(), n).tanh();
  const bool rec = detail::recording(x);
  BasicTensor<T> y(x.shape(), std::move(out), rec);
  if (rec) {
    detail::record(y, [x, y, n]() mutable {
      Eigen::Map<const detail::Array<T>> ys(y.data().data(), n);
      Eigen::Map<const detail::Array<T>> gy(y.grad().data(), n);
      Eigen::Map<detail::Array<T>>(x.grad_buffer().data(), n) += gy * (T(1) - ys.square());
    });
  }
  return y;
}

/// Layer normalisation over the last axis with affine gain and bias.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, const BasicTensor<T>& bias,
                         T eps = T(1e-5)) {
  const std::size_t width = detail::last_dim(x);
  if (gain.shape() != Shape{width} || bias.shape() != Shape{width}) {
    throw DimensionError("layer_norm: input " + shape_string(x.shape()) + ", gain " +
                         shape_string(gain.shape()) + ", bias " +
                         shape_string(bias.shape()));
  }
  if (!(eps > T(0))) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = detail::leading_rows(x);
  Buffer<T> out(x.size());
  Buffer<T> normed(x.size());
  Buffer<T> inv_std(rows);
  const auto xs = x.data();
  const auto gs = gain.data();
  const auto bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * width;
    double mean = 0.0;
    for (std::size_t j = 0; j < width; ++j) mean += row[j];
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(width);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<T>(is);
    for (std::size_t j = 0; j < width; ++j) {
      const T n = static_cast<T>((row[j] - mean) * is);
      normed[r * width + j] = n;
      out[r * width + j] = n * gs[j] + bs[j];
    }
  }
  const bool rec = detail::recording(x, gain, bias);
  BasicTensor<T> y(x.shape(), std::move(out), rec);
  if (rec) {
    detail::record(y, [x, gain, bias, y, normed = std::move(normed),
                    inv_std = std::move(inv_std), rows, width]() mutable {
      const auto gy = y.grad();
      const auto gs = gain.data();
      if (gain.requires_grad() || bias.requires_grad()) {
        std::vector<double> dg(width, 0.0), db(width, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < width; ++j) {
            dg[j] += static_cast<double>(gy[r * width + j]) * normed[r * width + j];
            db[j] += gy[r * width + j];
          }
        }
        Buffer<T> tmp(width);
        for (std::size_t j = 0; j < width; ++j) tmp[j] = static_cast<T>(dg[j]);
        detail::accumulate(gain, tmp);
        for (std::size_t j = 0; j < width; ++j) tmp[j] = static_cast<T>(db[j]);
        detail::accumulate(bias, tmp);
      }
      if (x.requires_grad()) {
        auto gx = x.grad_buffer();
        const double n = static_cast<double>(width);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_g = 0.0, sum_gn = 0.0;
          for (std::size_t j = 0; j < width; ++j) {
            const double g = static_cast<double>(gy[r * width + j]) * gs[j];
            sum_g += g;
            sum_gn += g * normed[r * width + j];
          }
          for (std::size_t j = 0; j < width; ++j) {
            const double g = static_cast<double>(gy[r * width + j]) * gs[j];
            gx[r * width + j] += static_cast<T>(
                inv_std[r] / n * (n * g - sum_g - normed[r * width + j] * sum_gn));
          }
        }
      }
    });
  }
  return y;
}

/// Softmax over the last axis, max-shifted.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x) {
  x.check_finite("softmax input");
  const std::size_t width = detail::last_dim(x);
  const std::size_t rows = detail::leading_rows(x);
  Buffer<T> out(x.size());
  const auto xs = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xs.data() + r * width;
    const T peak = *std::max_element(row, row + width);
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) total += std::exp(static_cast<double>(row[j] - peak));
    for (std::size_t j = 0; j < width; ++j) {
      out[r * width + j] =
          static_cast<T>(std::exp(static_cast<double>(row[j] - peak)) / total);
    }
  }
  const bool rec = detail::recording(x);
  BasicTensor<T> y(x.shape(), std::move(out), rec);
  if (rec) {
    detail::record(y, [x, y, rows, width]() mutable {
      const auto ys = y.data();
      const auto gy = y.grad();
      Buffer<T> delta(ys.size());
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < width; ++j) {
          dot += static_cast<double>(gy[r * width + j]) * ys[r * width + j];
        }
        for (std::size_t j = 0; j < width; ++j) {
          delta[r * width + j] =
              static_cast<T>(ys[r * width + j] * (gy[r * width + j] - dot));
        }
      }
      detail::accumulate(x, delta);
    });
  }
  return y;
}

/// Inverted dropout. Identity when not training or when rate is zero.
template <typename T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, bool training, Rng* rng) {
  if (!(rate >= T(0) && rate < T(1))) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == T(0)) return x;
  if (rng == nullptr) throw UsageError("dropout in training mode needs a generator");
  const T scale = T(1) / (T(1) - rate);
  Buffer<T> mask(x.size());
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng->uniform() < rate ? T(0) : scale;
    out[i] = x.data()[i] * mask[i];
  }
  const bool rec = detail::recording(x);
  BasicTensor<T> y(x.shape(), std::move(out), rec);
  if (rec) {
    detail::record(y, [x, y, mask = std::move(mask)]() mutable {
      const auto gy = y.grad();
      Buffer<T> delta(gy.size());
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = gy[i] * mask[i];
      detail::accumulate(x, delta);
    });
  }
  return y;
}

/// Mean two-class cross-entropy of logits [batch x 2] against 0/1 labels.
template <typename T>
BasicTensor<T> cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(1) != 2) {
    throw DimensionError("cross_entropy: expected [batch x 2] logits, got " +
                         shape_string(logits.shape()));
  }
  const std::size_t batch = logits.dim(0);
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(batch) + " rows");
  }
  for (int label : labels) {
    if (label != 0 && label != 1) {
      throw DataError("cross_entropy: label " + std::to_string(label) + " not in {0,1}");
    }
  }
  logits.check_finite("cross_entropy logits");
  const auto zs = logits.data();
  Buffer<T> probs(batch * 2);
  double total = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const double z0 = zs[2 * r], z1 = zs[2 * r + 1];
    const double peak = std::max(z0, z1);
    const double lse = peak + std::log(std::exp(z0 - peak) + std::exp(z1 - peak));
    total += lse - (labels[r] == 1 ? z1 : z0);
    probs[2 * r] = static_cast<T>(std::exp(z0 - lse));
    probs[2 * r + 1] = static_cast<T>(std::exp(z1 - lse));
  }
  const bool rec = detail::recording(logits);
  BasicTensor<T> y({1}, {static_cast<T>(total / static_cast<double>(batch))}, rec);
  if (rec) {
    std::vector<int> owned(labels.begin(), labels.end());
    detail::record(y, [logits, y, probs = std::move(probs), owned = std::move(owned),
                    batch]() mutable {
      const T scale = y.grad()[0] / static_cast<T>(batch);
      Buffer<T> delta(batch * 2);
      for (std::size_t r = 0; r < batch; ++r) {
        delta[2 * r] = scale * (probs[2 * r] - (owned[r] == 0 ? T(1) : T(0)));
        delta[2 * r + 1] = scale * (probs[2 * r + 1] - (owned[r] == 1 ? T(1) : T(0)));
      }
      detail::accumulate(logits, delta);
    });
  }
  return y;
}

/// Token plus learned absolute position embedding: ids [batch*seq] -> [batch x seq x width].
template <typename T>
BasicTensor<T> embed(std::span<const std::int32_t> ids, std::size_t batch, std::size_t seq,
                    const BasicTensor<T>& token_table, const BasicTensor<T>& position_table) {
  if (ids.size() != batch * seq) {
    throw DimensionError("embed: " + std::to_string(ids.size()) + " ids for " +
                         std::to_string(batch) + "x" + std::to_string(seq));
  }
  const std::size_t vocab = token_table.dim(0);
  const std::size_t width = token_table.dim(1);
  if (position_table.dim(1) != width) {
    throw DimensionError("embed: token and position tables differ in width");
  }
  if (seq > position_table.dim(0)) {
    throw DataError("embed: sequence length " + std::to_string(seq) +
                    " exceeds max_seq_len " + std::to_string(position_table.dim(0)));
  }
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DataError("embed: token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(vocab));
    }
  }
  Buffer<T> out(batch * seq * width);
  const auto tok = token_table.data();
  const auto pos = position_table.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < seq; ++p) {
      const std::size_t id = static_cast<std::size_t>(ids[b * seq + p]);
      T* dst = out.data() + (b * seq + p) * width;
      for (std::size_t j = 0; j < width; ++j) dst[j] = tok[id * width + j] + pos[p * width + j];
    }
  }
  const bool rec = detail::recording(token_table, position_table);
  BasicTensor<T> y({batch, seq, width}, std::move(out), rec);
  if (rec) {
    std::vector<std::int32_t> owned(ids.begin(), ids.end());
    detail::record(y, [token_table, position_table, y, owned = std::move(owned), batch, seq,
                    width]() mutable {
      const auto gy = y.grad();
      if (token_table.requires_grad()) {
        auto gt = token_table.grad_buffer();
        for (std::size_t r = 0; r < batch * seq; ++r) {
          const std::size_t id = static_cast<std::size_t>(owned[r]);
          for (std::size_t j = 0; j < width; ++j) gt[id * width + j] += gy[r * width + j];
        }
      }
      if (position_table.requires_grad()) {
        auto gp = position_table.grad_buffer();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t p = 0; p < seq; ++p) {
            for (std::size_t j = 0; j < width; ++j) {
              gp[p * width + j] += gy[(b * seq + p) * width + j];
            }
          }
        }
      }
    });
  }
  return y;
}

/// Multi-head scaled dot-product attention over [batch x seq x width] inputs.
/// Keys at masked (pad) positions receive zero weight. When `probs_out` is
/// given it receives the attention matrix laid out [batch][head][query][key].
template <typename T>
BasicTensor<T> attention(const BasicTensor<T>& q, const BasicTensor<T>& k, const BasicTensor<T>& v,
                        std::span<const std::uint8_t> mask, std::size_t heads,
                        Buffer<T>* probs_out = nullptr) {
  detail::require_rank3(q, "attention");
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  const std::size_t batch = q.dim(0), seq = q.dim(1), width = q.dim(2);
  detail::require_mask(mask, batch, seq, "attention");
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) +
                         " not divisible by head count " + std::to_string(heads));
  }
  const std::size_t hd = width / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(hd));
  const auto S = static_cast<Eigen::Index>(seq);
  const auto H = static_cast<Eigen::Index>(hd);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));

  Buffer<T> probs(batch * heads * seq * seq, T(0));
  Buffer<T> out(batch * seq * width, T(0));
  detail::RowMat<T> scores(S, S);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* valid = mask.data() + b * seq;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = b * seq * width + h * hd;
      detail::ConstStridedMat<T> qh(q.data().data() + base, S, H, stride);
      detail::ConstStridedMat<T> kh(k.data().data() + base, S, H, stride);
      detail::ConstStridedMat<T> vh(v.data().data() + base, S, H, stride);
      scores.noalias() = qh * kh.transpose();
      T* p = probs.data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        T peak = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (valid[j]) peak = std::max(peak, scores(i, j) * scale);
        }
        if (peak == -std::numeric_limits<T>::infinity()) continue;  // fully padded sequence
        double total = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          if (valid[j]) total += std::exp(static_cast<double>(scores(i, j) * scale - peak));
        }
        for (std::size_t j = 0; j < seq; ++j) {
          p[i * seq + j] =
              valid[j] ? static_cast<T>(
                             std::exp(static_cast<double>(scores(i, j) * scale - peak)) / total)
                       : T(0);
        }
      }
      detail::ConstMapMat<T> ph(p, S, S);
      detail::StridedMat<T> oh(out.data() + base, S, H, stride);
      oh.noalias() = ph * vh;
    }
  }
  if (probs_out != nullptr) *probs_out = probs;
  const bool rec = detail::recording(q, k, v);
  BasicTensor<T> y(q.shape(), std::move(out), rec);
  if (rec) {
    detail::record(y, [q, k, v, y, probs = std::move(probs), batch, seq, width, heads, hd,
                    scale]() mutable {
      const auto S = static_cast<Eigen::Index>(seq);
      const auto H = static_cast<Eigen::Index>(hd);
      const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(width));
      Buffer<T> dq(q.size(), T(0)), dk(k.size(), T(0)), dv(v.size(), T(0));
      detail::RowMat<T> dp(S, S), ds(S, S);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t base = b * seq * width + h * hd;
          detail::ConstStridedMat<T> qh(q.data().data() + base, S, H, stride);
          detail::ConstStridedMat<T> kh(k.data().data() + base, S, H, stride);
          detail::ConstStridedMat<T> vh(v.data().data() + base, S, H, stride);
          detail::ConstStridedMat<T> doh(y.grad().data() + base, S, H, stride);
          detail::ConstMapMat<T> ph(probs.data() + (b * heads + h) * seq * seq, S, S);
          detail::StridedMat<T> dqh(dq.data() + base, S, H, stride);
          detail::StridedMat<T> dkh(dk.data() + base, S, H, stride);
          detail::StridedMat<T> dvh(dv.data() + base, S, H, stride);
          dvh.noalias() += ph.transpose() * doh;
          dp.noalias() = doh * vh.transpose();
          for (Eigen::Index i = 0; i < S; ++i) {
            double dot = 0.0;
            for (Eigen::Index j = 0; j < S; ++j) dot += static_cast<double>(dp(i, j)) * ph(i, j);
            for (Eigen::Index j = 0; j < S; ++j) {
              ds(i, j) = static_cast<T>(ph(i, j) * (dp(i, j) - dot)) * scale;
            }
          }
          dqh.noalias() += ds * kh;
          dkh.noalias() += ds.transpose() * qh;
        }
      }
      detail::accumulate(q, dq);
      detail::accumulate(k, dk);
      detail::accumulate(v, dv);
    });
  }
  return y;
}

/// Mean over the valid (non-pad) positions of each sequence:
/// [batch x seq x width] -> [batch x width].
template <typename T>
BasicTensor<T> masked_mean(const BasicTensor<T>& x, std::span<const std::uint8_t> mask) {
  detail::require_rank3(x, "masked_mean");
  const std::size_t batch = x.dim(0), seq = x.dim(1), width = x.dim(2);
  detail::require_mask(mask, batch, seq, "masked_mean");
  Buffer<T> counts(batch);
  Buffer<T> out(batch * width);
  const auto xs = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t n = 0;
    std::vector<double> acc(width, 0.0);
    for (std::size_t p = 0; p < seq; ++p) {
      if (!mask[b * seq + p]) continue;
      ++n;
      for (std::size_t j = 0; j < width; ++j) acc[j] += xs[(b * seq + p) * width + j];
    }
    if (n == 0) {
      throw DataError("masked_mean: sequence " + std::to_string(b) + " has no valid token");
    }
    counts[b] = static_cast<T>(n);
    for (std::size_t j = 0; j < width; ++j) {
      out[b * width + j] = static_cast<T>(acc[j] / static_cast<double>(n));
    }
  }
  const bool rec = detail::recording(x);
  BasicTensor<T> y({batch, width}, std::move(out), rec);
  if (rec) {
    std::vector<std::uint8_t> owned(mask.begin(), mask.end());
    detail::record(y, [x, y, owned = std::move(owned), counts = std::move(counts), batch, seq,
                    width]() mutable {
      const auto gy = y.grad();
      Buffer<T> delta(x.size(), T(0));
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t p = 0; p < seq; ++p) {
          if (!owned[b * seq + p]) continue;
          for (std::size_t j = 0; j < width; ++j) {
            delta[(b * seq + p) * width + j] = gy[b * width + j] / counts[b];
          }
        }
      }
      detail::accumulate(x, delta);
    });
  }
  return y;
}

/// Encoding of the first position of every sequence: [batch x seq x width] -> [batch x width].
template <typename T>
BasicTensor<T> first_token(const BasicTensor<T>& x) {
  detail::require_rank3(x, "first_token");
  const std::size_t batch = x.dim(0), seq = x.dim(1), width = x.dim(2);
  Buffer<T> out(batch * width);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(x.data().data() + b * seq * width, width, out.data() + b * width);
  }
  const bool rec = detail::recording(x);
  BasicTensor<T> y({batch, width}, std::move(out), rec);
  if (rec) {
    detail::record(y, [x, y, batch, seq, width]() mutable {
      auto gx = x.grad_buffer();
      const auto gy = y.grad();
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t j = 0; j < width; ++j) gx[b * seq * width + j] += gy[b * width + j];
      }
    });
  }
  return y;
}

/// Gathers entries of the leading axis: [batch x ...] -> [rows.size() x ...].
template <typename T>
BasicTensor<T> select_rows(const BasicTensor<T>& x, std::span<const std::size_t> rows) {
  if (rows.empty()) throw UsageError("select_rows: empty selection");
  const std::size_t stride = x.size() / x.dim(0);
  Buffer<T> out(rows.size() * stride);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.dim(0)) {
      throw DimensionError("select_rows: row " + std::to_string(rows[r]) + " out of " +
                           std::to_string(x.dim(0)));
    }
    std::copy_n(x.data().data() + rows[r] * stride, stride, out.data() + r * stride);
  }
  Shape shape = x.shape();
  shape[0] = rows.size();
  const bool rec = detail::recording(x);
  BasicTensor<T> y(std::move(shape), std::move(out), rec);
  if (rec) {
    std::vector<std::size_t> owned(rows.begin(), rows.end());
    detail::record(y, [x, y, owned = std::move(owned), stride]() mutable {
      auto gx = x.grad_buffer();
      const auto gy = y.grad();
      for (std::size_t r = 0; r < owned.size(); ++r) {
        for (std::size_t j = 0; j < stride; ++j) gx[owned[r] * stride + j] += gy[r * stride + j];
      }
    });
  }
  return y;
}

}  // namespace cascade::ops
