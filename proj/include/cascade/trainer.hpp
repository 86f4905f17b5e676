#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cascade/cascade.hpp"
#include "cascade/checkpoint.hpp"
#include "cascade/data.hpp"
#include "cascade/errors.hpp"
#include "cascade/metrics.hpp"
#include "cascade/ops.hpp"
#include "cascade/ranker.hpp"

namespace cascade::train {

struct TrainConfig {
  double peak_lr = 3e-4;
  /// 0 means a tenth of total_updates.
  std::size_t warmup_updates = 0;
  /// 0 means epochs * batches per epoch.
  std::size_t total_updates = 0;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  /// When positive, batches are filled up to this many tokens instead of
  /// batch_size examples.
  std::size_t batch_token_budget = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (batch_size == 0 && batch_token_budget == 0) throw ConfigError("batch size must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (total_updates != 0 && warmup_updates >= total_updates) {
      throw ConfigError("warmup_updates must be below total_updates");
    }
  }
};

/// Triangular schedule: linear ramp 0 -> peak over warmup, linear decay to 0
/// at total, 0 afterwards.
inline double lr_at(std::size_t update, double peak, std::size_t warmup, std::size_t total) {
  if (warmup >= total) throw ConfigError("warmup_updates must be below total_updates");
  if (update <= warmup) {
    return warmup == 0 ? peak : peak * static_cast<double>(update) / static_cast<double>(warmup);
  }
  if (update >= total) return 0.0;
  return peak * static_cast<double>(total - update) / static_cast<double>(total - warmup);
}

inline std::size_t sample_stage(Rng& rng, std::size_t n_stages) {
  if (n_stages == 0) throw ConfigError("no stage to sample");
  return static_cast<std::size_t>(rng.below(n_stages));
}

/// Adam with bias correction. Only parameters that received a gradient in
/// the current step are touched, moments included, so a head that was not
/// sampled keeps its exact values.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const Tensor& p : params_) {
      m_.push_back(Tensor::zeros(p.shape()));
      v_.push_back(Tensor::zeros(p.shape()));
      steps_.push_back(0);
    }
  }

  void clear_grads() {
    for (Tensor& p : params_) p.clear_grad();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad()) continue;
      const std::uint64_t t = ++steps_[i];
      const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
      auto w = p.mutable_data();
      const auto g = p.grad();
      auto m = m_[i].mutable_data();
      auto v = v_[i].mutable_data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j];
        const double mj = beta1_ * m[j] + (1.0 - beta1_) * gj;
        const double vj = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
        m[j] = static_cast<float>(mj);
        v[j] = static_cast<float>(vj);
        w[j] = static_cast<float>(w[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + eps_));
      }
    }
  }

  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  std::vector<std::uint64_t>& step_counts() { return steps_; }

 private:
  std::vector<Tensor> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::vector<std::uint64_t> steps_;
  double beta1_, beta2_, eps_;
};

struct TrainState {
  std::uint64_t updates = 0;
  std::size_t epochs_completed = 0;
  Rng dropout_rng;
  Rng stage_rng;
  std::vector<double> stage_loss_sum;
  std::vector<std::size_t> stage_loss_count;
  double best_dev_map = -1.0;

  explicit TrainState(std::uint64_t seed, std::size_t n_stages)
      : dropout_rng(Rng(seed).fork(1)),
        stage_rng(Rng(seed).fork(2)),
        stage_loss_sum(n_stages, 0.0),
        stage_loss_count(n_stages, 0) {}
};

/// One multi-task update: the loss of `stage` alone is back-propagated
/// through its head and every encoder layer below it, down to the embeddings.
class Trainer {
 public:
  Trainer(CascadeModel& model, TrainConfig cfg)
      : model_(model),
        cfg_(std::move(cfg)),
        adam_(model.parameters(), cfg_.beta1, cfg_.beta2, cfg_.adam_eps),
        state_(cfg_.seed, model.n_stages()) {
    cfg_.validate();
  }

  const TrainConfig& config() const { return cfg_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  Adam& optimizer() { return adam_; }

  /// Fixes total and warmup update counts for a run of `batches_per_epoch`.
  void plan(std::size_t batches_per_epoch) {
    if (cfg_.total_updates == 0) cfg_.total_updates = cfg_.epochs * batches_per_epoch;
    if (cfg_.warmup_updates == 0) cfg_.warmup_updates = std::max<std::size_t>(1, cfg_.total_updates / 10);
    cfg_.validate();
  }

  double learning_rate(std::size_t update) const {
    return lr_at(update, cfg_.peak_lr, cfg_.warmup_updates, cfg_.total_updates);
  }

  double train_step(std::span<const data::RankingExample> batch, std::size_t stage) {
    if (batch.empty()) throw UsageError("train_step on an empty batch");
    if (cfg_.total_updates == 0) plan(1);
    std::vector<int> labels;
    labels.reserve(batch.size());
    for (const auto& e : batch) labels.push_back(e.label);
    const TokenBatch tokens = data::make_batch(batch, model_.encoder_config().max_seq_len);

    adam_.clear_grads();
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      const ForwardMode mode = ForwardMode::train(state_.dropout_rng);
      EncoderState h = model_.encoder().embed(tokens, mode);
      // Layers above the sampled head cannot influence its loss.
      model_.encoder().encode_to_layer(h, 0, model_.stage_layer(stage), mode);
      loss = ops::cross_entropy(model_.stage_logits(h, stage, mode), labels);
    }
    tape.backward(loss);
    const float value = loss.item();
    if (!std::isfinite(value)) throw NumericError("training loss became non-finite");
    ++state_.updates;
    adam_.step(learning_rate(state_.updates));
    state_.stage_loss_sum[stage] += value;
    ++state_.stage_loss_count[stage];
    return value;
  }

 private:
  CascadeModel& model_;
  TrainConfig cfg_;
  Adam adam_;
  TrainState state_;
};

/// Splits the (shuffled) training examples into mini-batches.
inline std::vector<std::vector<data::RankingExample>> make_batches(
    const data::Dataset& ds, const TrainConfig& cfg, std::uint64_t epoch) {
  std::vector<const data::RankingExample*> pool;
  for (const auto& g : ds) {
    for (const auto& e : g.examples) pool.push_back(&e);
  }
  Rng rng = Rng(cfg.seed).fork(1000 + epoch);
  data::detail::shuffle(pool, rng);
  std::vector<std::vector<data::RankingExample>> batches;
  std::vector<data::RankingExample> current;
  std::size_t tokens = 0;
  for (const auto* e : pool) {
    const std::size_t len = e->question.size() + e->candidate.size() + 2;
    const bool full = cfg.batch_token_budget > 0
                          ? !current.empty() && tokens + len > cfg.batch_token_budget
                          : current.size() == cfg.batch_size;
    if (full) {
      batches.push_back(std::move(current));
      current.clear();
      tokens = 0;
    }
    current.push_back(*e);
    tokens += len;
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

/// Dev metrics of every stage ranking the full candidate list on its own.
inline std::vector<metrics::Summary> stage_metrics(const CascadeModel& model, const data::Dataset& ds,
                                                   std::size_t threads = 0) {
  const StageScoreCache cache = cache_stage_scores(model, ds, threads);
  std::vector<metrics::Summary> out;
  for (std::size_t s = 0; s < model.n_stages(); ++s) {
    std::vector<metrics::LabeledRanking> rankings;
    for (std::size_t g = 0; g < ds.size(); ++g) {
      const auto order = top_k(cache.scores[g][s], ds[g].size());
      rankings.push_back(labeled(ds[g], order));
    }
    out.push_back(metrics::aggregate(std::span<const metrics::LabeledRanking>(rankings)));
  }
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::uint64_t updates = 0;
  std::vector<metrics::Summary> dev;  // one per stage
};

inline std::string format_epoch(const EpochRecord& r) {
  char buf[64];
  std::string line = std::to_string(r.epoch) + '\t' + std::to_string(r.updates);
  std::snprintf(buf, sizeof buf, "\t%.6f", r.mean_loss);
  line += buf;
  for (const auto& s : r.dev) {
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\t%.6f\t%.6f", s.map, s.mrr, s.p_at_1, s.ndcg_at_10);
    line += buf;
  }
  return line;
}

inline std::string epoch_header(std::size_t n_stages) {
  std::string h = "epoch\tupdates\tloss";
  for (std::size_t s = 1; s <= n_stages; ++s) {
    const std::string p = "\tstage" + std::to_string(s) + "_";
    h += p + "map" + p + "mrr" + p + "p@1" + p + "ndcg@10";
  }
  return h;
}

// Optimizer state lives in checkpoints under these prefixes so training can
// resume exactly where it stopped.
inline checkpoint::Checkpoint capture_state(CascadeModel& model, Trainer& trainer) {
  const TrainState& st = trainer.state();
  std::map<std::string, std::string> meta{
      {"seed", std::to_string(trainer.config().seed)},
      {"updates", std::to_string(st.updates)},
      {"epochs_completed", std::to_string(st.epochs_completed)},
      {"dropout_rng_counter", std::to_string(st.dropout_rng.counter())},
      {"stage_rng_counter", std::to_string(st.stage_rng.counter())},
      {"best_dev_map", checkpoint::detail::float_text(static_cast<float>(st.best_dev_map))},
  };
  checkpoint::Checkpoint ck = checkpoint::capture(model, meta);
  std::size_t i = 0;
  auto& m = trainer.optimizer().first_moments();
  auto& v = trainer.optimizer().second_moments();
  auto& steps = trainer.optimizer().step_counts();
  model.visit_parameters([&](const std::string& name, Tensor&) {
    ck.tensors.emplace_back("optim.m." + name, m[i].detached_copy());
    ck.tensors.emplace_back("optim.v." + name, v[i].detached_copy());
    ck.metadata["optim.steps." + name] = std::to_string(steps[i]);
    ++i;
  });
  return ck;
}

inline void restore_state(const checkpoint::Checkpoint& ck, CascadeModel& model, Trainer& trainer) {
  TrainState& st = trainer.state();
  const auto meta = [&](const std::string& k) -> std::uint64_t {
    const auto it = ck.metadata.find(k);
    if (it == ck.metadata.end()) throw DataError("checkpoint lacks training metadata " + k);
    return std::stoull(it->second);
  };
  st.updates = meta("updates");
  st.epochs_completed = meta("epochs_completed");
  st.dropout_rng = Rng(st.dropout_rng.seed(), meta("dropout_rng_counter"));
  st.stage_rng = Rng(st.stage_rng.seed(), meta("stage_rng_counter"));
  if (auto it = ck.metadata.find("best_dev_map"); it != ck.metadata.end()) {
    st.best_dev_map = std::stod(it->second);
  }
  std::size_t i = 0;
  auto& m = trainer.optimizer().first_moments();
  auto& v = trainer.optimizer().second_moments();
  auto& steps = trainer.optimizer().step_counts();
  model.visit_parameters([&](const std::string& name, Tensor&) {
    const Tensor* mt = ck.find("optim.m." + name);
    const Tensor* vt = ck.find("optim.v." + name);
    if (mt == nullptr || vt == nullptr) throw DataError("checkpoint lacks optimizer state for " + name);
    std::copy(mt->data().begin(), mt->data().end(), m[i].mutable_data().begin());
    std::copy(vt->data().begin(), vt->data().end(), v[i].mutable_data().begin());
    steps[i] = meta("optim.steps." + name);
    ++i;
  });
}

struct TrainOptions {
  /// Directory receiving best.ckpt and last.ckpt; empty disables persistence.
  std::string checkpoint_dir;
  /// Called after every epoch (e.g. to append to a log).
  std::function<void(const EpochRecord&)> on_epoch;
  std::size_t eval_threads = 0;
};

/// Runs the remaining epochs of `trainer` (all of them for a fresh trainer).
inline std::vector<EpochRecord> run(CascadeModel& model, Trainer& trainer, const data::Dataset& train_set,
                                    const data::Dataset& dev_set, const TrainOptions& opts = {}) {
  if (train_set.empty()) throw DataError("training set is empty");
  std::size_t positives = 0;
  for (const auto& g : train_set) positives += g.positives();
  if (positives == 0) throw DataError("training set has no positive label");

  const std::size_t batches_per_epoch = make_batches(train_set, trainer.config(), 0).size();
  trainer.plan(batches_per_epoch);
  std::vector<EpochRecord> history;
  TrainState& st = trainer.state();
  for (std::size_t epoch = st.epochs_completed; epoch < trainer.config().epochs; ++epoch) {
    const auto batches = make_batches(train_set, trainer.config(), epoch);
    double loss_sum = 0.0;
    for (const auto& batch : batches) {
      loss_sum += trainer.train_step(batch, sample_stage(st.stage_rng, model.n_stages()));
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.updates = st.updates;
    rec.mean_loss = loss_sum / static_cast<double>(batches.size());
    if (!dev_set.empty()) rec.dev = stage_metrics(model, dev_set, opts.eval_threads);
    st.epochs_completed = epoch + 1;
    const bool improved = !rec.dev.empty() && rec.dev.back().map > st.best_dev_map;
    if (improved) st.best_dev_map = rec.dev.back().map;
    if (!opts.checkpoint_dir.empty()) {
      const auto ck = capture_state(model, trainer);
      checkpoint::save(opts.checkpoint_dir + "/last.ckpt", ck);
      if (improved || dev_set.empty()) checkpoint::save(opts.checkpoint_dir + "/best.ckpt", ck);
    }
    if (opts.on_epoch) opts.on_epoch(rec);
    history.push_back(std::move(rec));
  }
  return history;
}

}  // namespace cascade::train
