// Command-line front end: data generation, training, evaluation, inference,
// the analytical cost model and the drop-ratio grid search.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cascade/checkpoint.hpp"
#include "cascade/config.hpp"
#include "cascade/data.hpp"
#include "cascade/errors.hpp"
#include "cascade/ranker.hpp"
#include "cascade/trainer.hpp"

namespace fs = std::filesystem;
using cascade::Settings;

namespace {

// Defaults per subcommand. Keys double as long flag names (with '-' for '_')
// and as config-file keys.
const std::map<std::string, std::map<std::string, std::string>> kDefaults = {
    {"gen-data",
     {{"out_dir", "data"},
      {"seed", "13"},
      {"questions", "200"},
      {"candidates", "32"},
      {"positives", "4"},
      {"vocab", "1024"},
      {"noise", "0.2"},
      {"topics", "4"},
      {"topic_size", "4"},
      {"min_shared", "2"},
      {"question_filler", "4"},
      {"candidate_len", "8"},
      {"train_fraction", "0.8"},
      {"dev_fraction", "0.1"},
      {"test_fraction", "0.1"},
      {"split_seed", "7"},
      {"gzip", "0"}}},
    {"train",
     {{"out_dir", "run"},
      {"seed", "1"},
      {"init_seed", "42"},
      {"train", "data/train.tsv"},
      {"dev", "data/dev.tsv"},
      {"mode", "cascade"},
      {"layers", "12"},
      {"schedule", "auto"},
      {"d_model", "64"},
      {"heads", "4"},
      {"d_ff", "256"},
      {"max_seq_len", "64"},
      {"vocab", "1024"},
      {"dropout", "0.1"},
      {"head_hidden", "64"},
      {"head_depth", "3"},
      {"final_pooling", "mean"},
      {"epochs", "20"},
      {"lr", "3e-4"},
      {"warmup", "0"},
      {"batch", "32"},
      {"token_budget", "0"},
      {"resume", ""},
      {"threads", "0"}}},
    {"evaluate",
     {{"out_dir", "eval"},
      {"seed", "1"},
      {"checkpoint", "run/best.ckpt"},
      {"data", "data/dev.tsv"},
      {"mode", "cascade"},
      {"alpha", "0.3"},
      {"batch", "128"},
      {"threads", "0"}}},
    {"infer",
     {{"out_dir", "infer"},
      {"seed", "1"},
      {"checkpoint", "run/best.ckpt"},
      {"data", "data/test.tsv"},
      {"alpha", "0.3"},
      {"threads", "0"}}},
    {"cost",
     {{"out_dir", ""},
      {"seed", "1"},
      {"mode", "auto"},
      {"alpha", "0.3"},
      {"batch", "128"},
      {"ceiling", "0"},
      {"layers", "12"},
      {"schedule", "4,6,8,10,12"},
      {"sizes", ""}}},
    {"grid-search",
     {{"out_dir", "grid"},
      {"seed", "1"},
      {"checkpoint", "run/best.ckpt"},
      {"data", "data/dev.tsv"},
      {"grid", "0.1,0.2,0.3,0.4,0.5,0.6"},
      {"threads", "0"}}},
};

// Stage sizes of the reference throughput example. They differ slightly from
// what the floor rule gives (see README).
const std::vector<std::size_t> kReferenceExampleSizes{128, 90, 63, 44, 28};

std::string flag_name(std::string key) {
  for (char& c : key)
    if (c == '_') c = '-';
  return key;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw cascade::UsageError("cannot write " + path.string());
  out << text;
}

fs::path prepare_out_dir(const Settings& s) {
  const fs::path dir = s.str("out_dir");
  if (dir.empty()) return dir;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw cascade::UsageError("cannot create output directory " + dir.string());
  write_text(dir / "config.txt", s.dump());
  return dir;
}

cascade::DropSchedule parse_schedule(const Settings& s, std::size_t n_stages) {
  const std::vector<double> alphas = s.reals("alpha");
  for (double a : alphas) {
    if (!(a >= 0.0 && a < 1.0)) {
      throw cascade::ConfigError("drop ratio " + fmt("%g", a) + " outside [0, 1)");
    }
  }
  if (alphas.size() == 1) return cascade::DropSchedule::uniform(alphas[0], n_stages);
  if (alphas.size() + 1 == n_stages) return cascade::DropSchedule(alphas);
  throw cascade::ConfigError("--alpha takes one value or one per pruning stage (" +
                             std::to_string(n_stages - 1) + "), got " +
                             std::to_string(alphas.size()));
}

cascade::data::Dataset load_data(const std::string& path, const cascade::CascadeModel& model) {
  auto ds = cascade::data::read_tsv(path);
  cascade::data::validate_for_model(ds, model.encoder_config().vocab_size,
                                    model.encoder_config().max_seq_len);
  return ds;
}

std::string summary_line(const cascade::metrics::Summary& m) {
  return fmt("%.6f", m.map) + '\t' + fmt("%.6f", m.ndcg_at_10) + '\t' + fmt("%.6f", m.p_at_1) +
         '\t' + fmt("%.6f", m.mrr);
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Settings& s) {
  namespace data = cascade::data;
  data::SyntheticConfig cfg;
  cfg.n_questions = s.size("questions");
  cfg.cands_per_q = s.size("candidates");
  cfg.positives_per_q = s.size("positives");
  cfg.vocab_size = s.size("vocab");
  cfg.noise = s.real("noise");
  cfg.seed = s.u64("seed");
  cfg.n_topics = s.size("topics");
  cfg.topic_size = s.size("topic_size");
  cfg.min_shared = s.size("min_shared");
  cfg.question_filler = s.size("question_filler");
  cfg.candidate_len = s.size("candidate_len");
  const auto ds = data::generate_synthetic(cfg);
  const auto parts = data::split(ds, s.real("train_fraction"), s.real("dev_fraction"),
                                 s.real("test_fraction"), s.u64("split_seed"));
  const fs::path dir = prepare_out_dir(s);
  const std::string ext = s.u64("gzip") ? ".tsv.gz" : ".tsv";
  std::string stats = "split\tquestions\tmean_candidates\tmean_positives\n";
  for (const auto& [name, part] : {std::pair{"train", &parts.train}, std::pair{"dev", &parts.dev},
                                   std::pair{"test", &parts.test}}) {
    if (!part->empty()) data::write_tsv((dir / (std::string(name) + ext)).string(), *part);
    const auto st = data::stats(*part);
    stats += std::string(name) + '\t' + std::to_string(st.questions) + '\t' +
             fmt("%.4f", st.mean_candidates) + '\t' + fmt("%.4f", st.mean_positives) + '\n';
  }
  write_text(dir / "stats.tsv", stats);
  std::cout << stats;
  return 0;
}

int cmd_train(const Settings& s) {
  namespace train = cascade::train;
  const fs::path dir = prepare_out_dir(s);

  std::unique_ptr<cascade::CascadeModel> model;
  std::optional<cascade::checkpoint::Checkpoint> resume;
  if (!s.str("resume").empty()) {
    resume = cascade::checkpoint::load(s.str("resume"));
    model = std::make_unique<cascade::CascadeModel>(cascade::checkpoint::restore(*resume));
  } else {
    cascade::EncoderConfig enc;
    enc.n_layers = s.size("layers");
    enc.d_model = s.size("d_model");
    enc.n_heads = s.size("heads");
    enc.d_ff = s.size("d_ff");
    enc.max_seq_len = s.size("max_seq_len");
    enc.vocab_size = s.size("vocab");
    enc.dropout_rate = static_cast<float>(s.real("dropout"));
    enc.validate();
    cascade::CascadeConfig cc;
    const std::string& mode = s.str("mode");
    if (s.str("schedule") != "auto") {
      cc.layer_schedule = s.sizes("schedule");
    } else if (mode == "monolithic") {
      cc.layer_schedule = {enc.n_layers};
    } else if (mode == "cascade") {
      // Heads every two layers from layer 4, as in the 12-layer default.
      cc.layer_schedule.clear();
      for (std::size_t l = 4; l < enc.n_layers; l += 2) cc.layer_schedule.push_back(l);
      cc.layer_schedule.push_back(enc.n_layers);
    } else {
      throw cascade::ConfigError("train --mode must be cascade or monolithic, got '" + mode + "'");
    }
    cc.head_hidden = s.size("head_hidden");
    cc.head_depth = s.size("head_depth");
    cc.final_pooling = cascade::parse_pooling(s.str("final_pooling"));
    cascade::Rng init(s.u64("init_seed"));
    model = std::make_unique<cascade::CascadeModel>(enc, cc, init);
  }

  train::TrainConfig tc;
  tc.seed = s.u64("seed");
  tc.epochs = s.size("epochs");
  tc.peak_lr = s.real("lr");
  tc.warmup_updates = s.size("warmup");
  tc.batch_size = s.size("batch");
  tc.batch_token_budget = s.size("token_budget");
  tc.validate();

  const auto train_set = load_data(s.str("train"), *model);
  cascade::data::Dataset dev_set;
  if (!s.str("dev").empty()) dev_set = load_data(s.str("dev"), *model);

  train::Trainer trainer(*model, tc);
  if (resume) train::restore_state(*resume, *model, trainer);

  const fs::path log_path = dir / "train_log.tsv";
  std::ofstream log;
  if (resume && fs::exists(log_path)) {
    log.open(log_path, std::ios::app);
  } else {
    log.open(log_path);
    log << train::epoch_header(model->n_stages()) << '\n';
  }
  if (!log) throw cascade::UsageError("cannot write " + log_path.string());

  const auto start = std::chrono::steady_clock::now();
  train::TrainOptions opts;
  opts.checkpoint_dir = dir.string();
  opts.eval_threads = s.size("threads");
  opts.on_epoch = [&](const train::EpochRecord& r) {
    log << train::format_epoch(r) << '\n';
    log.flush();
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "epoch " << r.epoch << "  loss " << fmt("%.4f", r.mean_loss);
    for (std::size_t st = 0; st < r.dev.size(); ++st) {
      std::cerr << "  s" << st + 1 << " " << fmt("%.3f", r.dev[st].map) << "/"
                << fmt("%.3f", r.dev[st].p_at_1);
    }
    std::cerr << "  (" << fmt("%.0f", secs) << "s)\n";
  };
  train::run(*model, trainer, train_set, dev_set, opts);
  std::cout << "updates\t" << trainer.state().updates << "\nbest_dev_map\t"
            << fmt("%.6f", trainer.state().best_dev_map) << '\n';
  return 0;
}

int cmd_evaluate(const Settings& s) {
  const std::vector<std::string> paths = Settings::split(s.str("checkpoint"));
  const std::string& mode = s.str("mode");
  const std::size_t b0 = s.size("batch");
  if (b0 == 0) throw cascade::ConfigError("--batch must be positive");
  const std::size_t threads = s.size("threads");

  cascade::Evaluation ev;
  cascade::CostReport nominal;
  std::string schedule_text = "-";
  if (mode == "sr") {
    if (paths.size() != 5) {
      throw cascade::UsageError("--mode sr needs 5 checkpoints (one per reranker depth), got " +
                                std::to_string(paths.size()));
    }
    std::vector<cascade::CascadeModel> models;
    for (const auto& p : paths) models.push_back(cascade::checkpoint::load_model(p));
    std::vector<const cascade::CascadeModel*> ptrs;
    std::vector<std::size_t> rho;
    for (const auto& m : models) {
      ptrs.push_back(&m);
      rho.push_back(m.encoder_config().n_layers);
    }
    cascade::check_layer_schedule(rho);
    const auto schedule = parse_schedule(s, rho.size());
    schedule_text = schedule.to_string();
    const auto ds = load_data(s.str("data"), models.back());
    ev = cascade::evaluate_sequential(ptrs, rho, ds, schedule, threads);
    nominal = cascade::relative_cost_sequential(b0, schedule, rho);
  } else {
    if (paths.size() != 1) throw cascade::UsageError("--mode " + mode + " takes one checkpoint");
    const auto model = cascade::checkpoint::load_model(paths[0]);
    const auto ds = load_data(s.str("data"), model);
    const std::size_t depth = model.encoder_config().n_layers;
    if (mode == "cascade") {
      const auto schedule = parse_schedule(s, model.n_stages());
      schedule_text = schedule.to_string();
      ev = cascade::evaluate_cascade(model, ds, schedule, threads);
      nominal = cascade::relative_cost_cascade(b0, schedule, model.cascade_config().layer_schedule);
    } else if (mode.rfind("monolithic-", 0) == 0) {
      std::size_t layers = 0;
      try {
        layers = std::stoul(mode.substr(11));
      } catch (const std::exception&) {
        throw cascade::UsageError("bad mode '" + mode + "' (expected monolithic-L)");
      }
      ev = cascade::evaluate_monolithic(model, ds, layers, threads);
      nominal = cascade::relative_cost_monolithic(layers, depth, b0);
    } else {
      throw cascade::UsageError("unknown --mode '" + mode + "' (cascade, sr or monolithic-L)");
    }
  }
  const fs::path dir = prepare_out_dir(s);
  std::string out = "mode\tschedule\tMAP\tnDCG@10\tP@1\tMRR\tmeasured_relative_cost\t"
                    "nominal_relative_cost\tnominal_batch\tquestions\tskipped\n";
  out += mode + '\t' + schedule_text + '\t' + summary_line(ev.summary) + '\t' +
         fmt("%.6f", ev.relative_cost()) + '\t' + fmt("%.6f", nominal.relative_cost) + '\t' +
         std::to_string(b0) + '\t' + std::to_string(ev.summary.evaluated) + '\t' +
         std::to_string(ev.summary.skipped) + '\n';
  if (!dir.empty()) write_text(dir / "metrics.tsv", out);
  std::cout << out;
  std::cout << "cost change at b0=" << b0 << ": " << fmt("%+.1f%%", nominal.cost_change() * 100.0)
            << '\n';
  return 0;
}

int cmd_infer(const Settings& s) {
  const auto model = cascade::checkpoint::load_model(s.str("checkpoint"));
  const auto ds = load_data(s.str("data"), model);
  const auto schedule = parse_schedule(s, model.n_stages());
  const auto ev = cascade::evaluate_cascade(model, ds, schedule, s.size("threads"));
  std::string out = "question_id\trank\tcandidate\tlabel\tlast_stage\tscore\n";
  for (std::size_t g = 0; g < ds.size(); ++g) {
    const auto& trace = ev.results[g].trace;
    // Deepest stage each candidate reached and its score there.
    std::vector<std::size_t> stage_of(ds[g].size(), 0);
    std::vector<float> score_of(ds[g].size(), 0.0f);
    for (std::size_t st = 0; st < trace.stages.size(); ++st) {
      const auto& rec = trace.stages[st];
      for (std::size_t p = 0; p < rec.inputs.size(); ++p) {
        stage_of[rec.inputs[p]] = st + 1;
        score_of[rec.inputs[p]] = rec.scores[p];
      }
    }
    const auto& ranking = ev.results[g].ranking;
    for (std::size_t r = 0; r < ranking.size(); ++r) {
      const std::size_t c = ranking[r];
      out += ds[g].question_id + '\t' + std::to_string(r + 1) + '\t' + std::to_string(c) + '\t' +
             std::to_string(ds[g].examples[c].label) + '\t' + std::to_string(stage_of[c]) + '\t' +
             fmt("%.6f", score_of[c]) + '\n';
    }
  }
  const fs::path dir = prepare_out_dir(s);
  if (!dir.empty()) {
    write_text(dir / "rankings.tsv", out);
  } else {
    std::cout << out;
  }
  std::cout << "MAP\tnDCG@10\tP@1\tMRR\n" << summary_line(ev.summary) << '\n';
  return 0;
}

int cmd_cost(const Settings& s) {
  const std::size_t b0 = s.size("batch");
  const std::size_t ceiling = s.size("ceiling");
  const auto rho = s.sizes("schedule");
  cascade::check_layer_schedule(rho);
  // A depth below the full stack selects the monolithic model unless a mode
  // is given.
  std::string mode = s.str("mode");
  if (mode == "auto") mode = s.size("layers") < rho.back() ? "monolithic" : "cascade";

  cascade::CostReport r;
  std::optional<cascade::DropSchedule> schedule;
  if (!s.str("sizes").empty()) {
    r = cascade::cascade_cost_from_sizes(s.sizes("sizes"), rho);
  } else if (mode == "monolithic") {
    r = cascade::relative_cost_monolithic(s.size("layers"), rho.back(), b0);
  } else if (mode == "cascade" || mode == "sr") {
    schedule = parse_schedule(s, rho.size());
    r = mode == "cascade" ? cascade::relative_cost_cascade(b0, *schedule, rho)
                          : cascade::relative_cost_sequential(b0, *schedule, rho);
  } else {
    throw cascade::UsageError("cost --mode must be auto, cascade, sr or monolithic");
  }
  if (ceiling > 0) r = cascade::with_ceiling(r, ceiling);

  std::string out;
  out += "mode\t" + (s.str("sizes").empty() ? mode : std::string("cascade (explicit sizes)")) + '\n';
  out += "initial_batch\t" + std::to_string(r.initial_batch) + '\n';
  if (schedule) out += "drop_ratios\t" + schedule->to_string() + '\n';
  if (mode != "sr" && !r.layer_batch_sizes.empty()) {
    out += "layer_batch_sizes\t" + join(r.layer_batch_sizes) + '\n';
  }
  if (schedule) out += "stage_input_sizes\t" + join(cascade::stage_input_sizes(b0, *schedule)) + '\n';
  out += "layer_passes\t" + std::to_string(r.layer_passes) + '\n';
  out += "relative_cost\t" + fmt("%.4f", r.relative_cost) + '\n';
  out += "cost_change\t" + fmt("%+.1f%%", r.cost_change() * 100.0) + '\n';
  out += "average_batch\t" + fmt("%.1f", r.average_batch_size) + '\n';
  if (ceiling > 0) {
    out += "ceiling\t" + std::to_string(ceiling) + '\n';
    out += "fits_ceiling\t" + std::string(r.fits_ceiling ? "yes" : "no") + '\n';
    if (r.throughput_gain) out += "throughput_gain\t" + fmt("%.2f", *r.throughput_gain) + '\n';
    if (schedule && mode == "cascade") {
      const auto fb = cascade::max_feasible_batch(ceiling, *schedule, rho);
      out += "max_feasible_batch\t" + std::to_string(fb.initial_batch) + '\n';
      out += "max_throughput_gain\t" + fmt("%.2f", fb.throughput_gain) + '\n';
    }
  }
  // The reference example uses slightly different stage sizes than the floor
  // rule; report both when the inputs match it.
  if (schedule && mode == "cascade" && b0 == 128 && rho == std::vector<std::size_t>{4, 6, 8, 10, 12} &&
      schedule->ratios().size() == 4 &&
      std::all_of(schedule->ratios().begin(), schedule->ratios().end(),
                  [](double a) { return a == 0.3; })) {
    auto ref = cascade::cascade_cost_from_sizes(kReferenceExampleSizes, rho);
    if (ceiling > 0) ref = cascade::with_ceiling(ref, ceiling);
    out += "reference_example_sizes\t" + join(kReferenceExampleSizes) + '\n';
    out += "reference_example_average_batch\t" + fmt("%.1f", ref.average_batch_size) + '\n';
    if (ref.throughput_gain) {
      out += "reference_example_gain\t" + fmt("%.2f", *ref.throughput_gain) + '\n';
    }
  }
  const fs::path dir = prepare_out_dir(s);
  if (!dir.empty()) write_text(dir / "cost.tsv", out);
  std::cout << out;
  return 0;
}

int cmd_grid_search(const Settings& s) {
  const auto model = cascade::checkpoint::load_model(s.str("checkpoint"));
  const auto ds = load_data(s.str("data"), model);
  const auto grid = s.reals("grid");
  const auto records = cascade::grid_search(model, ds, grid, s.size("threads"));
  std::string out;
  for (std::size_t k = 1; k < model.n_stages(); ++k) out += "alpha_p" + std::to_string(k) + '\t';
  out += "relative_cost\tMAP\tnDCG@10\tP@1\tMRR\n";
  for (const auto& r : records) {
    for (double a : r.schedule.ratios()) out += fmt("%g", a) + '\t';
    out += fmt("%.6f", r.relative_cost) + '\t' + summary_line(r.summary) + '\n';
  }
  const fs::path dir = prepare_out_dir(s);
  if (!dir.empty()) {
    write_text(dir / "grid.tsv", out);
    std::cout << records.size() << " configurations written to " << (dir / "grid.tsv").string()
              << '\n';
  } else {
    std::cout << out;
  }
  return 0;
}

using Handler = int (*)(const Settings&);

const std::map<std::string, std::pair<std::string, Handler>> kCommands = {
    {"gen-data", {"generate a synthetic corpus and its train/dev/test split", cmd_gen_data}},
    {"train", {"train a cascade (or monolithic) model", cmd_train}},
    {"evaluate", {"rank a dataset and report metrics with relative cost", cmd_evaluate}},
    {"infer", {"write cascaded rankings for a dataset", cmd_infer}},
    {"cost", {"analytical cost and throughput model", cmd_cost}},
    {"grid-search", {"evaluate every per-stage drop-ratio combination", cmd_grid_search}},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cascaded answer-ranking toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, std::map<std::string, std::vector<std::string>>> given;

  for (const auto& [name, entry] : kCommands) {
    CLI::App* sub = app.add_subcommand(name, entry.first);
    sub->add_option("--config", config_path, "flat key = value settings file");
    for (const auto& [key, value] : kDefaults.at(name)) {
      const bool repeatable = key == "alpha" || key == "checkpoint";
      auto* opt = sub->add_option("--" + flag_name(key), given[name][key],
                                  repeatable ? "repeatable; default " + value : "default " + value);
      if (!repeatable) opt->expected(1);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    for (const auto& [name, entry] : kCommands) {
      CLI::App* sub = app.get_subcommand(name);
      if (!sub->parsed()) continue;
      Settings settings(kDefaults.at(name));
      if (!config_path.empty()) settings.overlay(Settings::load(config_path), config_path);
      for (const auto& [key, values] : given[name]) {
        if (sub->get_option("--" + flag_name(key))->count() == 0) continue;
        std::string joined;
        for (std::size_t i = 0; i < values.size(); ++i) joined += (i ? "," : "") + values[i];
        settings.set(key, joined);
      }
      return entry.second(settings);
    }
  } catch (const cascade::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cascade::exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
  return 2;
}
