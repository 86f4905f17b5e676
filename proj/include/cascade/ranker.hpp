#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "cascade/cascade.hpp"
#include "cascade/data.hpp"
#include "cascade/errors.hpp"
#include "cascade/metrics.hpp"

namespace cascade {

/// Per-stage drop ratios for the first N-1 stages; the last stage only ranks.
class DropSchedule {
 public:
  DropSchedule() = default;
  explicit DropSchedule(std::vector<double> ratios) : ratios_(std::move(ratios)) {
    for (double a : ratios_) {
      if (!(a >= 0.0 && a < 1.0)) {
        throw ConfigError("drop ratio " + std::to_string(a) + " outside [0, 1)");
      }
    }
  }

  static DropSchedule uniform(double alpha, std::size_t n_stages) {
    return DropSchedule(std::vector<double>(n_stages > 0 ? n_stages - 1 : 0, alpha));
  }

  std::span<const double> ratios() const { return ratios_; }
  std::size_t size() const { return ratios_.size(); }
  double operator[](std::size_t i) const { return ratios_.at(i); }

  std::string to_string() const {
    std::string out;
    for (std::size_t i = 0; i < ratios_.size(); ++i) {
      if (i) out += ',';
      char buf[32];
      std::snprintf(buf, sizeof buf, "%g", ratios_[i]);
      out += buf;
    }
    return out;
  }

 private:
  std::vector<double> ratios_;
};

/// Candidates removed from a stage of k inputs: floor(alpha * k). The small
/// guard keeps products such as 0.29 * 100 from rounding down past an integer.
inline std::size_t drop_count(double alpha, std::size_t k) {
  return static_cast<std::size_t>(std::floor(alpha * static_cast<double>(k) + 1e-9));
}

inline std::size_t survivor_count(double alpha, std::size_t k) { return k - drop_count(alpha, k); }

/// k_0 .. k_{N-1}: candidates entering each stage.
inline std::vector<std::size_t> stage_input_sizes(std::size_t b0, const DropSchedule& schedule) {
  std::vector<std::size_t> k{b0};
  for (double a : schedule.ratios()) k.push_back(survivor_count(a, k.back()));
  return k;
}

/// Indices of the k best scores, best first; ties go to the lower index.
inline std::vector<std::size_t> top_k(std::span<const float> scores, std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(k, order.size()));
  return order;
}

struct StageRecord {
  std::size_t input_size = 0;
  std::size_t dropped = 0;
  std::vector<std::size_t> inputs;     // original candidate indices entering the stage
  std::vector<float> scores;           // stage score of each input, aligned with `inputs`
  std::vector<std::size_t> survivors;  // original indices kept, best first
};

struct StageTrace {
  std::vector<StageRecord> stages;
  std::uint64_t layer_passes = 0;  // instrumented example-layer count
};

struct RankResult {
  /// Original candidate indices, best first. Survivors of the last stage
  /// come first; dropped candidates follow, later stages first, each stage's
  /// drops ordered by that stage's score.
  std::vector<std::size_t> ranking;
  StageTrace trace;
};

/// Pruning pipeline shared by every engine. `score(stage)` returns scores for
/// the candidates currently alive (in the order of the previous `keep` call,
/// initially 0..n-1); `keep(positions)` narrows the alive set to those
/// positions.
inline RankResult prune_and_rank(
    std::size_t n_candidates, std::size_t n_stages, const DropSchedule& schedule,
    const std::function<std::vector<float>(std::size_t)>& score,
    const std::function<void(std::span<const std::size_t>)>& keep) {
  if (n_candidates == 0) throw DataError("cannot rank an empty question group");
  if (schedule.size() + 1 != n_stages) {
    throw ConfigError("drop schedule has " + std::to_string(schedule.size()) + " ratios for " +
                      std::to_string(n_stages) + " stages (expected " +
                      std::to_string(n_stages - 1) + ")");
  }
  RankResult result;
  std::vector<std::size_t> alive(n_candidates);
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  for (std::size_t s = 0; s < n_stages; ++s) {
    StageRecord rec;
    rec.inputs = alive;
    rec.input_size = alive.size();
    rec.scores = score(s);
    if (rec.scores.size() != alive.size()) {
      throw DimensionError("stage scorer returned " + std::to_string(rec.scores.size()) +
                           " scores for " + std::to_string(alive.size()) + " candidates");
    }
    const bool last = s + 1 == n_stages;
    const std::size_t k = last ? alive.size() : survivor_count(schedule[s], alive.size());
    rec.dropped = alive.size() - k;
    const std::vector<std::size_t> positions = top_k(rec.scores, k);
    for (std::size_t p : positions) rec.survivors.push_back(alive[p]);
    if (!last && rec.dropped > 0) {
      // Survivors continue in original-index order so the next stage sees a
      // deterministic batch layout.
      std::vector<std::size_t> kept(positions);
      std::sort(kept.begin(), kept.end());
      std::vector<std::size_t> next;
      next.reserve(kept.size());
      for (std::size_t p : kept) next.push_back(alive[p]);
      keep(kept);
      alive = std::move(next);
    }
    result.trace.stages.push_back(std::move(rec));
  }
  result.ranking = result.trace.stages.back().survivors;
  for (std::size_t s = n_stages - 1; s-- > 0;) {
    const StageRecord& rec = result.trace.stages[s];
    std::vector<char> survived(n_candidates, 0);
    for (std::size_t i : rec.survivors) survived[i] = 1;
    std::vector<std::size_t> dropped_pos;
    for (std::size_t p = 0; p < rec.inputs.size(); ++p) {
      if (!survived[rec.inputs[p]]) dropped_pos.push_back(p);
    }
    std::stable_sort(dropped_pos.begin(), dropped_pos.end(), [&](std::size_t a, std::size_t b) {
      return rec.scores[a] > rec.scores[b];
    });
    for (std::size_t p : dropped_pos) result.ranking.push_back(rec.inputs[p]);
  }
  return result;
}

/// Cascaded inference over one question group: encode once, score at each
/// scheduled layer, drop floor(alpha * k) lowest, continue only survivors.
inline RankResult cascade_infer(const data::QuestionGroup& group, const CascadeModel& model,
                                const DropSchedule& schedule) {
  if (group.examples.empty()) throw DataError("cannot rank an empty question group");
  const TokenBatch batch = data::make_batch(group, model.encoder_config().max_seq_len);
  const Encoder& enc = model.encoder();
  EncoderState state = enc.embed(batch, ForwardMode::eval());
  std::size_t at = 0;
  RankResult r = prune_and_rank(
      group.size(), model.n_stages(), schedule,
      [&](std::size_t s) {
        enc.encode_to_layer(state, at, model.stage_layer(s), ForwardMode::eval());
        at = model.stage_layer(s);
        return model.stage_scores(state, s);
      },
      [&](std::span<const std::size_t> positions) { state = state.select(positions); });
  r.trace.layer_passes = state.layer_passes();
  return r;
}

/// Sequential reranking: stage s re-encodes its survivors from scratch with
/// an independent model of depth layer_schedule[s].
inline RankResult sequential_rerank(const data::QuestionGroup& group,
                                    std::span<const CascadeModel* const> models,
                                    std::span<const std::size_t> layer_schedule,
                                    const DropSchedule& schedule) {
  if (group.examples.empty()) throw DataError("cannot rank an empty question group");
  if (models.size() != layer_schedule.size()) {
    throw ConfigError("sequential reranking needs " + std::to_string(layer_schedule.size()) +
                      " models, got " + std::to_string(models.size()));
  }
  for (std::size_t s = 0; s < models.size(); ++s) {
    if (models[s] == nullptr || models[s]->encoder_config().n_layers != layer_schedule[s]) {
      throw ConfigError("reranker " + std::to_string(s + 1) + " must have " +
                        std::to_string(layer_schedule[s]) + " layers");
    }
  }
  std::vector<std::size_t> alive(group.size());
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  std::uint64_t passes = 0;
  RankResult r = prune_and_rank(
      group.size(), models.size(), schedule,
      [&](std::size_t s) {
        const CascadeModel& m = *models[s];
        std::vector<data::RankingExample> subset;
        subset.reserve(alive.size());
        for (std::size_t i : alive) subset.push_back(group.examples[i]);
        const TokenBatch batch = data::make_batch(subset, m.encoder_config().max_seq_len);
        EncoderState state = m.encoder().embed(batch, ForwardMode::eval());
        m.encoder().encode_to_layer(state, 0, m.encoder_config().n_layers, ForwardMode::eval());
        passes += state.layer_passes();
        return m.stage_scores(state, m.n_stages() - 1);
      },
      [&](std::span<const std::size_t> positions) {
        std::vector<std::size_t> next;
        for (std::size_t p : positions) next.push_back(alive[p]);
        alive = std::move(next);
      });
  r.trace.layer_passes = passes;
  return r;
}

/// Scores every candidate with the depth-`layers` classifier and sorts.
inline RankResult monolithic_rank(const data::QuestionGroup& group, const CascadeModel& model,
                                  std::size_t layers) {
  if (group.examples.empty()) throw DataError("cannot rank an empty question group");
  const auto stage = model.stage_at_layer(layers);
  if (!stage) {
    throw ConfigError("model has no classifier at layer " + std::to_string(layers));
  }
  const TokenBatch batch = data::make_batch(group, model.encoder_config().max_seq_len);
  EncoderState state = model.encoder().embed(batch, ForwardMode::eval());
  model.encoder().encode_to_layer(state, 0, layers, ForwardMode::eval());
  RankResult r = prune_and_rank(
      group.size(), 1, DropSchedule{}, [&](std::size_t) { return model.stage_scores(state, *stage); },
      [](std::span<const std::size_t>) {});
  r.trace.layer_passes = state.layer_passes();
  return r;
}

// ---------------------------------------------------------------------------
// Analytical cost model. The unit is one example passing one encoder layer.

struct CostReport {
  std::size_t initial_batch = 0;
  std::size_t full_depth = 0;
  std::vector<std::size_t> layer_batch_sizes;  // b_1 .. b_L (cascade reports only)
  std::uint64_t layer_passes = 0;              // sum of b_j
  double relative_cost = 1.0;                  // 1.0 = full-depth monolithic on the same batch
  double average_batch_size = 0.0;
  std::optional<std::size_t> memory_ceiling;
  bool fits_ceiling = true;
  std::optional<double> throughput_gain;  // b0 / ceiling when the batch fits

  /// Relative change versus the monolithic baseline, e.g. -0.51 for -51%.
  double cost_change() const { return relative_cost - 1.0; }
};

inline CostReport relative_cost_monolithic(std::size_t layers, std::size_t full_depth = 12,
                                           std::size_t b0 = 1) {
  if (layers < 1 || layers > full_depth) {
    throw ConfigError("monolithic depth " + std::to_string(layers) + " outside [1, " +
                      std::to_string(full_depth) + "]");
  }
  CostReport r;
  r.initial_batch = b0;
  r.full_depth = full_depth;
  r.layer_batch_sizes.assign(full_depth, 0);
  std::fill_n(r.layer_batch_sizes.begin(), layers, b0);
  r.layer_passes = static_cast<std::uint64_t>(layers) * b0;
  r.relative_cost = static_cast<double>(layers) / static_cast<double>(full_depth);
  r.average_batch_size = static_cast<double>(r.layer_passes) / static_cast<double>(full_depth);
  return r;
}

inline void check_layer_schedule(std::span<const std::size_t> layer_schedule) {
  if (layer_schedule.empty()) throw ConfigError("layer schedule is empty");
  for (std::size_t i = 1; i < layer_schedule.size(); ++i) {
    if (layer_schedule[i] <= layer_schedule[i - 1]) {
      throw ConfigError("layer schedule must be strictly increasing");
    }
  }
}

/// Cascade cost for explicit stage input sizes k_0..k_{N-1}. Layers up to
/// rho(0) see k_0; layers in (rho(s-1), rho(s)] see k_s.
inline CostReport cascade_cost_from_sizes(std::span<const std::size_t> stage_sizes,
                                          std::span<const std::size_t> layer_schedule) {
  check_layer_schedule(layer_schedule);
  if (stage_sizes.size() != layer_schedule.size()) {
    throw ConfigError("need one stage size per scheduled layer");
  }
  if (stage_sizes.empty() || stage_sizes[0] == 0) throw ConfigError("initial batch must be positive");
  CostReport r;
  r.initial_batch = stage_sizes[0];
  r.full_depth = layer_schedule.back();
  std::size_t stage = 0;
  for (std::size_t layer = 1; layer <= r.full_depth; ++layer) {
    while (layer > layer_schedule[stage]) ++stage;
    r.layer_batch_sizes.push_back(stage_sizes[stage]);
    r.layer_passes += stage_sizes[stage];
  }
  const double L = static_cast<double>(r.full_depth);
  r.relative_cost = static_cast<double>(r.layer_passes) / (L * static_cast<double>(r.initial_batch));
  r.average_batch_size = static_cast<double>(r.layer_passes) / L;
  return r;
}

inline CostReport relative_cost_cascade(std::size_t b0, const DropSchedule& schedule,
                                        std::span<const std::size_t> layer_schedule) {
  if (b0 == 0) throw ConfigError("initial batch must be positive");
  if (schedule.size() + 1 != layer_schedule.size()) {
    throw ConfigError("drop schedule length does not match the layer schedule");
  }
  const auto sizes = stage_input_sizes(b0, schedule);
  return cascade_cost_from_sizes(sizes, layer_schedule);
}

/// Sequential reranking re-encodes stage s inputs through rho(s) layers.
inline CostReport relative_cost_sequential(std::size_t b0, const DropSchedule& schedule,
                                           std::span<const std::size_t> layer_schedule) {
  check_layer_schedule(layer_schedule);
  if (b0 == 0) throw ConfigError("initial batch must be positive");
  if (schedule.size() + 1 != layer_schedule.size()) {
    throw ConfigError("drop schedule length does not match the layer schedule");
  }
  const auto sizes = stage_input_sizes(b0, schedule);
  CostReport r;
  r.initial_batch = b0;
  r.full_depth = layer_schedule.back();
  for (std::size_t s = 0; s < sizes.size(); ++s) r.layer_passes += layer_schedule[s] * sizes[s];
  const double L = static_cast<double>(r.full_depth);
  r.relative_cost = static_cast<double>(r.layer_passes) / (L * static_cast<double>(b0));
  r.average_batch_size = static_cast<double>(r.layer_passes) / L;
  return r;
}

/// Marks whether the report's average batch fits under a monolithic memory
/// ceiling and, if so, the throughput gain b0 / ceiling.
inline CostReport with_ceiling(CostReport r, std::size_t ceiling) {
  if (ceiling == 0) throw ConfigError("memory ceiling must be positive");
  r.memory_ceiling = ceiling;
  r.fits_ceiling = r.average_batch_size <= static_cast<double>(ceiling) + 1e-12;
  if (r.fits_ceiling) {
    r.throughput_gain = static_cast<double>(r.initial_batch) / static_cast<double>(ceiling);
  } else {
    r.throughput_gain.reset();
  }
  return r;
}

struct FeasibleBatch {
  std::size_t initial_batch = 0;
  double throughput_gain = 1.0;
};

/// Largest b0 whose cascade average batch size stays within `ceiling`.
inline FeasibleBatch max_feasible_batch(std::size_t ceiling, const DropSchedule& schedule,
                                        std::span<const std::size_t> layer_schedule) {
  if (ceiling == 0) throw ConfigError("memory ceiling must be positive");
  check_layer_schedule(layer_schedule);
  // The average never drops below b0 * rho(0) / L, which bounds the search.
  const std::size_t bound = ceiling * layer_schedule.back() / layer_schedule.front() + 1;
  std::size_t best = ceiling;
  for (std::size_t b0 = ceiling; b0 <= bound; ++b0) {
    if (relative_cost_cascade(b0, schedule, layer_schedule).average_batch_size <=
        static_cast<double>(ceiling) + 1e-12) {
      best = b0;
    }
  }
  return {best, static_cast<double>(best) / static_cast<double>(ceiling)};
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation.

namespace detail {

/// Runs fn(i) for i in [0, n) over a few worker threads.
inline void parallel_for(std::size_t n, std::size_t threads,
                         const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          if (!failed.exchange(true)) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

struct Evaluation {
  metrics::Summary summary;
  std::vector<RankResult> results;   // one per question group
  std::uint64_t layer_passes = 0;    // instrumented total over the dataset
  std::uint64_t full_depth_passes = 0;  // monolithic full-depth cost of the same data
  double relative_cost() const {
    return static_cast<double>(layer_passes) / static_cast<double>(full_depth_passes);
  }
};

inline metrics::LabeledRanking labeled(const data::QuestionGroup& g,
                                       std::span<const std::size_t> ranking) {
  metrics::LabeledRanking r;
  r.labels.reserve(ranking.size());
  for (std::size_t i : ranking) r.labels.push_back(g.examples[i].label);
  return r;
}

inline Evaluation evaluate_with(const data::Dataset& ds, std::size_t full_depth,
                                const std::function<RankResult(const data::QuestionGroup&)>& rank,
                                std::size_t threads = 0) {
  if (ds.empty()) throw DataError("cannot evaluate an empty dataset");
  Evaluation ev;
  ev.results.resize(ds.size());
  detail::parallel_for(ds.size(), threads, [&](std::size_t i) { ev.results[i] = rank(ds[i]); });
  std::vector<metrics::LabeledRanking> rankings;
  rankings.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    rankings.push_back(labeled(ds[i], ev.results[i].ranking));
    ev.layer_passes += ev.results[i].trace.layer_passes;
    ev.full_depth_passes += static_cast<std::uint64_t>(full_depth) * ds[i].size();
  }
  ev.summary = metrics::aggregate(std::span<const metrics::LabeledRanking>(rankings));
  return ev;
}

inline Evaluation evaluate_cascade(const CascadeModel& model, const data::Dataset& ds,
                                   const DropSchedule& schedule, std::size_t threads = 0) {
  return evaluate_with(
      ds, model.encoder_config().n_layers,
      [&](const data::QuestionGroup& g) { return cascade_infer(g, model, schedule); }, threads);
}

inline Evaluation evaluate_monolithic(const CascadeModel& model, const data::Dataset& ds,
                                      std::size_t layers, std::size_t threads = 0) {
  return evaluate_with(
      ds, model.encoder_config().n_layers,
      [&](const data::QuestionGroup& g) { return monolithic_rank(g, model, layers); }, threads);
}

inline Evaluation evaluate_sequential(std::span<const CascadeModel* const> models,
                                      std::span<const std::size_t> layer_schedule,
                                      const data::Dataset& ds, const DropSchedule& schedule,
                                      std::size_t threads = 0) {
  return evaluate_with(
      ds, layer_schedule.back(),
      [&](const data::QuestionGroup& g) {
        return sequential_rerank(g, models, layer_schedule, schedule);
      },
      threads);
}

/// Per-stage scores of every group from one unpruned pass; stage scores do
/// not depend on which other candidates were pruned, so any schedule can be
/// replayed on them.
struct StageScoreCache {
  std::vector<std::vector<std::vector<float>>> scores;  // [group][stage][candidate]
};

inline StageScoreCache cache_stage_scores(const CascadeModel& model, const data::Dataset& ds,
                                          std::size_t threads = 0) {
  StageScoreCache cache;
  cache.scores.resize(ds.size());
  detail::parallel_for(ds.size(), threads, [&](std::size_t i) {
    cache.scores[i] =
        model.forward_all_stages(data::make_batch(ds[i], model.encoder_config().max_seq_len));
  });
  return cache;
}

/// Replays cascade pruning on cached scores. Layer passes are counted from
/// the pruning arithmetic, matching what cascade_infer would execute.
inline RankResult replay_cascade(std::span<const std::vector<float>> stage_scores,
                                 std::span<const std::size_t> layer_schedule,
                                 const DropSchedule& schedule) {
  const std::size_t n = stage_scores.front().size();
  std::vector<std::size_t> alive(n);
  std::iota(alive.begin(), alive.end(), std::size_t{0});
  RankResult r = prune_and_rank(
      n, stage_scores.size(), schedule,
      [&](std::size_t s) {
        std::vector<float> out;
        out.reserve(alive.size());
        for (std::size_t i : alive) out.push_back(stage_scores[s][i]);
        return out;
      },
      [&](std::span<const std::size_t> positions) {
        std::vector<std::size_t> next;
        for (std::size_t p : positions) next.push_back(alive[p]);
        alive = std::move(next);
      });
  std::vector<std::size_t> sizes;
  for (const auto& st : r.trace.stages) sizes.push_back(st.input_size);
  r.trace.layer_passes = cascade_cost_from_sizes(sizes, layer_schedule).layer_passes;
  return r;
}

struct GridRecord {
  DropSchedule schedule;
  metrics::Summary summary;
  double relative_cost = 1.0;
};

/// Evaluates every schedule in ratio_grid^(N-1) on `ds`; records sorted by
/// relative cost ascending (ties keep enumeration order).
inline std::vector<GridRecord> grid_search(const CascadeModel& model, const data::Dataset& ds,
                                           std::span<const double> ratio_grid,
                                           std::size_t threads = 0) {
  if (ratio_grid.empty()) throw UsageError("grid search needs at least one drop ratio");
  for (double a : ratio_grid) {
    if (!(a >= 0.0 && a < 1.0)) throw ConfigError("grid ratio outside [0, 1)");
  }
  if (ds.empty()) throw DataError("grid search needs a non-empty dataset");
  const StageScoreCache cache = cache_stage_scores(model, ds, threads);
  const std::vector<std::size_t>& rho = model.cascade_config().layer_schedule;
  const std::size_t dims = model.n_stages() - 1;
  std::size_t total = 1;
  for (std::size_t d = 0; d < dims; ++d) total *= ratio_grid.size();

  std::vector<GridRecord> records(total);
  detail::parallel_for(total, threads, [&](std::size_t idx) {
    std::vector<double> ratios(dims);
    std::size_t rest = idx;
    for (std::size_t d = dims; d-- > 0;) {
      ratios[d] = ratio_grid[rest % ratio_grid.size()];
      rest /= ratio_grid.size();
    }
    const DropSchedule schedule(ratios);
    std::vector<metrics::LabeledRanking> rankings;
    std::uint64_t passes = 0, full = 0;
    for (std::size_t g = 0; g < ds.size(); ++g) {
      const RankResult r = replay_cascade(cache.scores[g], rho, schedule);
      rankings.push_back(labeled(ds[g], r.ranking));
      passes += r.trace.layer_passes;
      full += static_cast<std::uint64_t>(rho.back()) * ds[g].size();
    }
    records[idx] = {schedule, metrics::aggregate(std::span<const metrics::LabeledRanking>(rankings)),
                    static_cast<double>(passes) / static_cast<double>(full)};
  });
  std::stable_sort(records.begin(), records.end(), [](const GridRecord& a, const GridRecord& b) {
    return a.relative_cost < b.relative_cost;
  });
  return records;
}

}  // namespace cascade
