#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cascade/encoder.hpp"
#include "cascade/errors.hpp"
#include "cascade/ops.hpp"
#include "cascade/random.hpp"
#include "cascade/tensor.hpp"

namespace cascade {

enum class Pooling { kMean, kFirstToken };

inline std::string to_string(Pooling p) { return p == Pooling::kMean ? "mean" : "first"; }

inline Pooling parse_pooling(const std::string& s) {
  if (s == "mean") return Pooling::kMean;
  if (s == "first") return Pooling::kFirstToken;
  throw ConfigError("unknown pooling '" + s + "' (expected mean or first)");
}

/// Layer schedule and classifier-head shape. Stages are indexed from 0 in
/// code; stage s attaches its head after layer_schedule[s] blocks.
struct CascadeConfig {
  std::vector<std::size_t> layer_schedule{4, 6, 8, 10, 12};
  std::size_t head_hidden = 64;
  std::size_t head_depth = 3;
  /// Pooling used by the last stage; partial stages always use the mean.
  Pooling final_pooling = Pooling::kMean;

  std::size_t n_stages() const { return layer_schedule.size(); }

  /// Default schedule 4, 6, 8, ... with `stages` entries.
  static std::vector<std::size_t> default_schedule(std::size_t stages) {
    std::vector<std::size_t> rho;
    for (std::size_t i = 0; i < stages; ++i) rho.push_back(4 + 2 * i);
    return rho;
  }

  void validate(const EncoderConfig& encoder) const {
    if (layer_schedule.empty()) throw ConfigError("layer schedule is empty");
    for (std::size_t i = 0; i < layer_schedule.size(); ++i) {
      if (layer_schedule[i] == 0) throw ConfigError("layer schedule entries must be positive");
      if (i > 0 && layer_schedule[i] <= layer_schedule[i - 1]) {
        throw ConfigError("layer schedule must be strictly increasing");
      }
    }
    if (layer_schedule.back() != encoder.n_layers) {
      throw ConfigError("last scheduled layer " + std::to_string(layer_schedule.back()) +
                        " must equal encoder depth " + std::to_string(encoder.n_layers));
    }
    if (head_depth < 1) throw ConfigError("head_depth must be at least 1");
    if (head_depth > 1 && head_hidden == 0) throw ConfigError("head_hidden must be positive");
  }
};

/// Feed-forward scorer: (head_depth - 1) tanh layers of head_hidden units,
/// then a 2-logit projection. Dropout precedes every dense layer.
template <typename T>
struct ClassifierHead {
  std::vector<BasicTensor<T>> weights;
  std::vector<BasicTensor<T>> biases;

  ClassifierHead() = default;
  ClassifierHead(std::size_t input_dim, const CascadeConfig& cfg, Rng& init) {
    std::size_t in = input_dim;
    for (std::size_t j = 0; j + 1 < cfg.head_depth; ++j) {
      weights.push_back(detail::xavier<T>(in, cfg.head_hidden, init));
      biases.push_back(detail::filled<T>(cfg.head_hidden, T(0)));
      in = cfg.head_hidden;
    }
    weights.push_back(detail::xavier<T>(in, 2, init));
    biases.push_back(detail::filled<T>(2, T(0)));
  }

  BasicTensor<T> logits(const BasicTensor<T>& pooled, double dropout_rate, ForwardMode mode) const {
    BasicTensor<T> h = pooled;
    for (std::size_t j = 0; j < weights.size(); ++j) {
      h = ops::dropout(h, dropout_rate, mode.training, mode.rng);
      h = ops::linear(h, weights[j], biases[j]);
      if (j + 1 < weights.size()) h = ops::tanh(h);
    }
    return h;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t j = 0; j < weights.size(); ++j) n += weights[j].size() + biases[j].size();
    return n;
  }
};

/// One encoder shared by N rankers, each a classifier head over a partial
/// encoding. A monolithic model is the special case of a single stage.
template <typename T>
class BasicCascadeModel {
 public:
  BasicCascadeModel(const EncoderConfig& encoder_cfg, const CascadeConfig& cascade_cfg, Rng& init)
      : cascade_cfg_(cascade_cfg), encoder_(encoder_cfg, init) {
    cascade_cfg_.validate(encoder_cfg);
    heads_.reserve(cascade_cfg_.n_stages());
    for (std::size_t s = 0; s < cascade_cfg_.n_stages(); ++s) {
      heads_.emplace_back(encoder_cfg.d_model, cascade_cfg_, init);
    }
  }

  BasicCascadeModel(const BasicCascadeModel&) = delete;
  BasicCascadeModel& operator=(const BasicCascadeModel&) = delete;
  BasicCascadeModel(BasicCascadeModel&&) = default;
  BasicCascadeModel& operator=(BasicCascadeModel&&) = default;

  const EncoderConfig& encoder_config() const { return encoder_.config(); }
  const CascadeConfig& cascade_config() const { return cascade_cfg_; }
  const BasicEncoder<T>& encoder() const { return encoder_; }
  BasicEncoder<T>& encoder() { return encoder_; }
  std::size_t n_stages() const { return heads_.size(); }
  std::size_t stage_layer(std::size_t stage) const {
    check_stage(stage);
    return cascade_cfg_.layer_schedule[stage];
  }
  const ClassifierHead<T>& head(std::size_t stage) const { return heads_.at(stage); }
  ClassifierHead<T>& head(std::size_t stage) { return heads_.at(stage); }

  /// Stage whose head sits at `layer`, if any.
  std::optional<std::size_t> stage_at_layer(std::size_t layer) const {
    for (std::size_t s = 0; s < n_stages(); ++s) {
      if (cascade_cfg_.layer_schedule[s] == layer) return s;
    }
    return std::nullopt;
  }

  /// Classifier input for `stage`: mask-aware mean of H_rho (or the first
  /// token for a final stage configured that way).
  BasicTensor<T> pooled_input(const BasicEncoderState<T>& state, std::size_t stage) const {
    const BasicTensor<T>& h = state.layer(stage_layer(stage));
    if (stage + 1 == n_stages() && cascade_cfg_.final_pooling == Pooling::kFirstToken) {
      return ops::first_token(h);
    }
    return ops::masked_mean(h, state.mask());
  }

  BasicTensor<T> stage_logits(const BasicEncoderState<T>& state, std::size_t stage, ForwardMode mode) const {
    check_stage(stage);
    return heads_[stage].logits(pooled_input(state, stage), encoder_.config().dropout_rate,
                                mode);
  }

  /// Positive-class probability per example, eval mode.
  std::vector<T> stage_scores(const BasicEncoderState<T>& state, std::size_t stage) const {
    BasicTensor<T> probs = ops::softmax(stage_logits(state, stage, ForwardMode::eval()));
    std::vector<T> scores(probs.dim(0));
    for (std::size_t b = 0; b < scores.size(); ++b) scores[b] = probs.data()[2 * b + 1];
    return scores;
  }

  /// Encodes the full batch to the last layer once and scores every stage.
  std::vector<std::vector<T>> forward_all_stages(const TokenBatch& batch) const {
    BasicEncoderState<T> state = encoder_.embed(batch, ForwardMode::eval());
    std::vector<std::vector<T>> out;
    out.reserve(n_stages());
    std::size_t at = 0;
    for (std::size_t s = 0; s < n_stages(); ++s) {
      encoder_.encode_to_layer(state, at, stage_layer(s), ForwardMode::eval());
      at = stage_layer(s);
      out.push_back(stage_scores(state, s));
    }
    return out;
  }

  /// Every trainable tensor with a stable name, encoder first.
  template <typename Fn>
  void visit_parameters(Fn&& fn) {
    encoder_.visit_parameters(fn);
    for (std::size_t s = 0; s < heads_.size(); ++s) {
      const std::string prefix = "head" + std::to_string(s + 1) + ".dense";
      for (std::size_t j = 0; j < heads_[s].weights.size(); ++j) {
        fn(prefix + std::to_string(j + 1) + ".weight", heads_[s].weights[j]);
        fn(prefix + std::to_string(j + 1) + ".bias", heads_[s].biases[j]);
      }
    }
  }

  std::vector<BasicTensor<T>> parameters() {
    std::vector<BasicTensor<T>> out;
    visit_parameters([&](const std::string&, BasicTensor<T>& t) { out.push_back(t); });
    return out;
  }

  void zero_grad() {
    visit_parameters([](const std::string&, BasicTensor<T>& t) { t.zero_grad(); });
  }

 private:
  void check_stage(std::size_t stage) const {
    if (stage >= heads_.size()) {
      throw ConfigError("stage index " + std::to_string(stage) + " out of range for " +
                        std::to_string(heads_.size()) + " stages");
    }
  }

  CascadeConfig cascade_cfg_;
  BasicEncoder<T> encoder_;
  std::vector<ClassifierHead<T>> heads_;
};

using CascadeModel = BasicCascadeModel<float>;

}  // namespace cascade
