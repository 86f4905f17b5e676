#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cascade/errors.hpp"
#include "cascade/ops.hpp"
#include "cascade/random.hpp"
#include "cascade/tensor.hpp"

namespace cascade {

/// Reserved token ids. Everything from kFirstRegular upward is vocabulary.
namespace tokens {
inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kCls = 1;
inline constexpr std::int32_t kSep = 2;
inline constexpr std::int32_t kFirstRegular = 3;
}  // namespace tokens

struct EncoderConfig {
  std::size_t n_layers = 12;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 64;
  std::size_t vocab_size = 1024;
  float dropout_rate = 0.1f;

  void validate() const {
    if (n_layers == 0) throw ConfigError("n_layers must be positive");
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
      throw ConfigError("d_model (" + std::to_string(d_model) +
                        ") must be a positive multiple of n_heads (" +
                        std::to_string(n_heads) + ")");
    }
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (max_seq_len < 3) throw ConfigError("max_seq_len must be at least 3");
    if (vocab_size <= static_cast<std::size_t>(tokens::kFirstRegular)) {
      throw ConfigError("vocab_size must exceed the reserved ids");
    }
    if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f)) {
      throw ConfigError("dropout_rate must lie in [0, 1)");
    }
  }
};

/// Padded batch of token sequences. mask[b * seq + p] is 1 for real tokens.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;

  static TokenBatch pack(const std::vector<std::vector<std::int32_t>>& sequences) {
    if (sequences.empty()) throw DataError("cannot pack an empty batch");
    TokenBatch out;
    out.batch = sequences.size();
    for (const auto& s : sequences) {
      if (s.empty()) throw DataError("cannot pack an empty sequence");
      out.seq = std::max(out.seq, s.size());
    }
    out.ids.assign(out.batch * out.seq, tokens::kPad);
    out.mask.assign(out.batch * out.seq, 0);
    for (std::size_t b = 0; b < out.batch; ++b) {
      for (std::size_t p = 0; p < sequences[b].size(); ++p) {
        out.ids[b * out.seq + p] = sequences[b][p];
        out.mask[b * out.seq + p] = 1;
      }
    }
    return out;
  }
};

/// Builds `[CLS] question [SEP] candidate`.
inline std::vector<std::int32_t> make_sequence(std::span<const std::int32_t> question,
                                               std::span<const std::int32_t> candidate,
                                               std::size_t max_seq_len) {
  const std::size_t length = question.size() + candidate.size() + 2;
  if (length > max_seq_len) {
    throw DataError("sequence of " + std::to_string(length) + " tokens exceeds max_seq_len " +
                    std::to_string(max_seq_len));
  }
  std::vector<std::int32_t> ids;
  ids.reserve(length);
  ids.push_back(tokens::kCls);
  ids.insert(ids.end(), question.begin(), question.end());
  ids.push_back(tokens::kSep);
  ids.insert(ids.end(), candidate.begin(), candidate.end());
  return ids;
}

/// Training switch plus the generator that feeds dropout masks.
struct ForwardMode {
  bool training = false;
  Rng* rng = nullptr;

  static ForwardMode eval() { return {}; }
  static ForwardMode train(Rng& rng) { return {true, &rng}; }
};

/// Hidden states H_0..H_n of one batch. Layers that were never computed (or
/// were discarded by select()) stay undefined.
template <typename T>
class BasicEncoderState {
 public:
  BasicEncoderState(std::size_t n_layers, std::size_t batch, std::size_t seq,
               std::vector<std::uint8_t> mask)
      : batch_(batch), seq_(seq), mask_(std::move(mask)), hidden_(n_layers + 1) {}

  std::size_t batch() const { return batch_; }
  std::size_t seq() const { return seq_; }
  std::size_t n_layers() const { return hidden_.size() - 1; }
  std::span<const std::uint8_t> mask() const { return mask_; }

  bool has_layer(std::size_t layer) const {
    return layer < hidden_.size() && hidden_[layer].defined();
  }
  const BasicTensor<T>& layer(std::size_t layer) const {
    if (!has_layer(layer)) {
      throw UsageError("hidden state for layer " + std::to_string(layer) +
                       " has not been computed");
    }
    return hidden_[layer];
  }
  void set_layer(std::size_t layer, BasicTensor<T> h) { hidden_.at(layer) = std::move(h); }

  /// Highest computed layer.
  std::size_t top_layer() const {
    for (std::size_t i = hidden_.size(); i-- > 0;) {
      if (hidden_[i].defined()) return i;
    }
    throw UsageError("encoder state holds no hidden layer");
  }

  /// Example-layer passes executed on this state so far.
  std::uint64_t layer_passes() const { return layer_passes_; }
  void add_layer_passes(std::uint64_t n) { layer_passes_ += n; }

  /// Keeps the listed batch rows of the top layer; the pass counter carries over.
  BasicEncoderState select(std::span<const std::size_t> rows) const {
    const std::size_t top = top_layer();
    std::vector<std::uint8_t> mask;
    mask.reserve(rows.size() * seq_);
    for (std::size_t r : rows) {
      mask.insert(mask.end(), mask_.begin() + static_cast<std::ptrdiff_t>(r * seq_),
                  mask_.begin() + static_cast<std::ptrdiff_t>((r + 1) * seq_));
    }
    BasicEncoderState out(n_layers(), rows.size(), seq_, std::move(mask));
    out.hidden_[top] = ops::select_rows(hidden_[top], rows);
    out.layer_passes_ = layer_passes_;
    return out;
  }

 private:
  std::size_t batch_;
  std::size_t seq_;
  std::vector<std::uint8_t> mask_;
  std::vector<BasicTensor<T>> hidden_;
  std::uint64_t layer_passes_ = 0;
};

template <typename T>
struct BlockParams {
  BasicTensor<T> query_w, query_b, key_w, key_b, value_w, value_b, output_w, output_b;
  BasicTensor<T> attn_norm_gain, attn_norm_bias;
  BasicTensor<T> ff_in_w, ff_in_b, ff_out_w, ff_out_b;
  BasicTensor<T> ff_norm_gain, ff_norm_bias;
};

namespace detail {

template <typename T>
BasicTensor<T> xavier(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  Buffer<T> w(in * out);
  for (T& v : w) v = static_cast<T>((2.0 * rng.uniform() - 1.0) * limit);
  return BasicTensor<T>({in, out}, std::move(w), true);
}

template <typename T>
BasicTensor<T> gaussian(Shape shape, double stddev, Rng& rng) {
  Buffer<T> w(shape_size(shape));
  for (T& v : w) v = static_cast<T>(rng.normal() * stddev);
  return BasicTensor<T>(std::move(shape), std::move(w), true);
}

template <typename T>
BasicTensor<T> filled(std::size_t n, T value) {
  return BasicTensor<T>({n}, Buffer<T>(n, value), true);
}

}  // namespace detail

/// Embedding layer followed by a stack of post-norm transformer blocks.
template <typename T>
class BasicEncoder {
 public:
  BasicEncoder(const EncoderConfig& config, Rng& init) : config_(config) {
    config_.validate();
    const std::size_t d = config_.d_model;
    token_embedding_ = detail::gaussian<T>({config_.vocab_size, d}, 0.02, init);
    position_embedding_ = detail::gaussian<T>({config_.max_seq_len, d}, 0.02, init);
    blocks_.reserve(config_.n_layers);
    // Residual branches start small so a deep post-norm stack begins close
    // to the identity map.
    const double residual_gain = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
    for (std::size_t i = 0; i < config_.n_layers; ++i) {
      BlockParams<T> p;
      p.query_w = detail::xavier<T>(d, d, init);
      p.query_b = detail::filled<T>(d, T(0));
      p.key_w = detail::xavier<T>(d, d, init);
      p.key_b = detail::filled<T>(d, T(0));
      p.value_w = detail::xavier<T>(d, d, init);
      p.value_b = detail::filled<T>(d, T(0));
      p.output_w = detail::xavier<T>(d, d, init, residual_gain);
      p.output_b = detail::filled<T>(d, T(0));
      p.attn_norm_gain = detail::filled<T>(d, T(1));
      p.attn_norm_bias = detail::filled<T>(d, T(0));
      p.ff_in_w = detail::xavier<T>(d, config_.d_ff, init);
      p.ff_in_b = detail::filled<T>(config_.d_ff, T(0));
      p.ff_out_w = detail::xavier<T>(config_.d_ff, d, init, residual_gain);
      p.ff_out_b = detail::filled<T>(d, T(0));
      p.ff_norm_gain = detail::filled<T>(d, T(1));
      p.ff_norm_bias = detail::filled<T>(d, T(0));
      blocks_.push_back(std::move(p));
    }
  }

  const EncoderConfig& config() const { return config_; }
  std::size_t n_layers() const { return config_.n_layers; }

  /// H_0: token plus position embedding, dropout in training mode.
  BasicEncoderState<T> embed(const TokenBatch& batch, ForwardMode mode) const {
    BasicEncoderState<T> state(config_.n_layers, batch.batch, batch.seq, batch.mask);
    BasicTensor<T> h = ops::embed(batch.ids, batch.batch, batch.seq, token_embedding_,
                          position_embedding_);
    state.set_layer(0, ops::dropout(h, config_.dropout_rate, mode.training, mode.rng));
    return state;
  }

  /// Runs blocks from_layer+1 .. to_layer on top of H_{from_layer}.
  void encode_to_layer(BasicEncoderState<T>& state, std::size_t from_layer, std::size_t to_layer,
                       ForwardMode mode) const {
    if (to_layer > config_.n_layers) {
      throw ConfigError("requested layer " + std::to_string(to_layer) + " of a " +
                        std::to_string(config_.n_layers) + "-layer encoder");
    }
    if (from_layer > to_layer) {
      throw UsageError("encode_to_layer: from_layer " + std::to_string(from_layer) +
                       " is above to_layer " + std::to_string(to_layer));
    }
    BasicTensor<T> h = state.layer(from_layer);
    for (std::size_t i = from_layer; i < to_layer; ++i) {
      h = transformer_block(h, state.mask(), blocks_[i], mode);
      state.set_layer(i + 1, h);
      state.add_layer_passes(state.batch());
    }
  }

  /// H' = LN(H + MHA(H)); H_out = LN(H' + FFN(H')).
  BasicTensor<T> transformer_block(const BasicTensor<T>& h, std::span<const std::uint8_t> mask,
                           const BlockParams<T>& p, ForwardMode mode,
                           Buffer<T>* attention_probs = nullptr) const {
    const double rate = config_.dropout_rate;
    BasicTensor<T> q = ops::linear(h, p.query_w, p.query_b);
    BasicTensor<T> k = ops::linear(h, p.key_w, p.key_b);
    BasicTensor<T> v = ops::linear(h, p.value_w, p.value_b);
    BasicTensor<T> ctx = ops::attention(q, k, v, mask, config_.n_heads, attention_probs);
    BasicTensor<T> attn = ops::dropout(ops::linear(ctx, p.output_w, p.output_b), rate,
                               mode.training, mode.rng);
    BasicTensor<T> mid = ops::layer_norm(ops::add(h, attn), p.attn_norm_gain, p.attn_norm_bias);
    BasicTensor<T> ff = ops::gelu(ops::linear(mid, p.ff_in_w, p.ff_in_b));
    ff = ops::dropout(ops::linear(ff, p.ff_out_w, p.ff_out_b), rate, mode.training, mode.rng);
    return ops::layer_norm(ops::add(mid, ff), p.ff_norm_gain, p.ff_norm_bias);
  }

  const BlockParams<T>& block(std::size_t i) const { return blocks_.at(i); }
  BlockParams<T>& block(std::size_t i) { return blocks_.at(i); }
  const BasicTensor<T>& token_embedding() const { return token_embedding_; }
  BasicTensor<T>& token_embedding() { return token_embedding_; }
  const BasicTensor<T>& position_embedding() const { return position_embedding_; }
  BasicTensor<T>& position_embedding() { return position_embedding_; }

  /// Calls fn(name, tensor) for every trainable tensor in a fixed order.
  template <typename Fn>
  void visit_parameters(Fn&& fn) {
    fn(std::string("embedding.token"), token_embedding_);
    fn(std::string("embedding.position"), position_embedding_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string prefix = "layer" + std::to_string(i + 1) + ".";
      BlockParams<T>& p = blocks_[i];
      fn(prefix + "attention.query.weight", p.query_w);
      fn(prefix + "attention.query.bias", p.query_b);
      fn(prefix + "attention.key.weight", p.key_w);
      fn(prefix + "attention.key.bias", p.key_b);
      fn(prefix + "attention.value.weight", p.value_w);
      fn(prefix + "attention.value.bias", p.value_b);
      fn(prefix + "attention.output.weight", p.output_w);
      fn(prefix + "attention.output.bias", p.output_b);
      fn(prefix + "attention.norm.gain", p.attn_norm_gain);
      fn(prefix + "attention.norm.bias", p.attn_norm_bias);
      fn(prefix + "ffn.in.weight", p.ff_in_w);
      fn(prefix + "ffn.in.bias", p.ff_in_b);
      fn(prefix + "ffn.out.weight", p.ff_out_w);
      fn(prefix + "ffn.out.bias", p.ff_out_b);
      fn(prefix + "ffn.norm.gain", p.ff_norm_gain);
      fn(prefix + "ffn.norm.bias", p.ff_norm_bias);
    }
  }

 private:
  EncoderConfig config_;
  BasicTensor<T> token_embedding_;
  BasicTensor<T> position_embedding_;
  std::vector<BlockParams<T>> blocks_;
};

using EncoderState = BasicEncoderState<float>;
using Encoder = BasicEncoder<float>;

}  // namespace cascade
