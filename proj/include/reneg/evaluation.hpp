#pragma once

// Closed-loop evaluation: time-to-termination from seeded start poses, and
// multi-run comparisons of trained models.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "reneg/dataset.hpp"
#include "reneg/errors.hpp"
#include "reneg/losses.hpp"
#include "reneg/nnet.hpp"
#include "reneg/sim.hpp"
#include "reneg/training.hpp"

namespace reneg::eval {

using PolicyFn = std::function<double(const sim::Observation&)>;

inline PolicyFn pnet_policy(const nn::Mlp& pnet) {
  return [&pnet](const sim::Observation& o) { return std::clamp(pnet.forward(o.to_vector()), -1.0, 1.0); };
}

inline PolicyFn fnet_policy(const nn::Mlp& fnet, std::vector<double> grid = loss::default_grid()) {
  return [&fnet, grid = std::move(grid)](const sim::Observation& o) {
    return loss::fnet_infer(fnet, o.to_vector(), grid);
  };
}

struct EvalConfig {
  int trials = 8;
  double max_time = 180.0;  // s; trials still on the road are censored here
  std::uint64_t seed = 0;
  double offset_range = 1.0;   // m, start offset drawn from [-r, r]
  double heading_range = 0.1;  // rad
  bool mirrored = false;       // evaluate on the reflected track from reflected starts
  sim::SimConfig sim;

  void validate() const {
    if (trials < 1) throw InvalidArgument("trials must be >= 1");
    if (!(max_time > 0.0)) throw InvalidArgument("max_time must be positive");
  }
};

struct StartPose {
  double s = 0.0;
  double lateral = 0.0;
  double heading = 0.0;
};

inline std::vector<StartPose> start_poses(const sim::TrackSpec& track, const EvalConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> s_dist(0.0, track.length());
  std::uniform_real_distribution<double> off_dist(-cfg.offset_range, cfg.offset_range);
  std::uniform_real_distribution<double> head_dist(-cfg.heading_range, cfg.heading_range);
  std::vector<StartPose> out(static_cast<std::size_t>(cfg.trials));
  for (auto& p : out) {
    p.s = s_dist(rng);
    p.lateral = off_dist(rng);
    p.heading = head_dist(rng);
  }
  return out;
}

struct TrialOutcome {
  double time = 0.0;
  bool censored = false;
};

/// Drives `policy` from `start` until all four wheels are off the road or
/// `max_time` elapses. Optionally records the visited states.
inline TrialOutcome run_trial(const PolicyFn& policy, const sim::TrackSpec& track, sim::CarState state,
                              const sim::SimConfig& cfg, double max_time,
                              std::vector<sim::CarState>* trajectory = nullptr) {
  constexpr double kSlack = 1e-9;
  if (trajectory) trajectory->push_back(state);
  while (state.t < max_time - kSlack) {
    const double steer = policy(sim::observe(state, track, cfg));
    if (!std::isfinite(steer)) throw SimDiverged("policy produced a non-finite steering command");
    state = sim::step(state, sim::Action{steer}, track, cfg);
    if (trajectory) trajectory->push_back(state);
    if (sim::is_terminated(state, track, cfg.car)) return {state.t, false};
  }
  return {max_time, true};
}

struct EvalResult {
  std::string model;
  std::uint64_t seed = 0;
  std::vector<double> times;
  std::vector<bool> censored;
  double mean = 0.0;
  double stddev = 0.0;
  double min = 0.0;
  double max = 0.0;

  double spread_up() const { return max - mean; }
  double spread_down() const { return mean - min; }
  std::size_t censored_count() const { return static_cast<std::size_t>(std::count(censored.begin(), censored.end(), true)); }

  nlohmann::json to_json() const {
    return {{"model", model},   {"seed", seed},       {"times", times},
            {"censored", censored}, {"mean", mean},   {"stddev", stddev},
            {"min", min},       {"max", max},         {"spread_up", spread_up()},
            {"spread_down", spread_down()}};
  }
};

inline void summarize(EvalResult& r) {
  const auto n = static_cast<double>(r.times.size());
  if (r.times.empty()) return;
  double sum = 0.0;
  for (double t : r.times) sum += t;
  r.mean = sum / n;
  double ss = 0.0;
  for (double t : r.times) ss += (t - r.mean) * (t - r.mean);
  r.stddev = r.times.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
  r.min = *std::min_element(r.times.begin(), r.times.end());
  r.max = *std::max_element(r.times.begin(), r.times.end());
}

inline EvalResult evaluate(const PolicyFn& policy, const sim::TrackSpec& track, const EvalConfig& cfg,
                           const std::string& model = "policy") {
  cfg.validate();
  EvalResult r;
  r.model = model;
  r.seed = cfg.seed;
  const sim::TrackSpec driven = cfg.mirrored ? sim::mirror(track) : track;
  for (const StartPose& p : start_poses(track, cfg)) {
    const double sign = cfg.mirrored ? -1.0 : 1.0;
    const sim::CarState start = sim::start_state(driven, p.s, sign * p.lateral, sign * p.heading, cfg.sim);
    const TrialOutcome o = run_trial(policy, driven, start, cfg.sim, cfg.max_time);
    r.times.push_back(o.time);
    r.censored.push_back(o.censored);
  }
  summarize(r);
  return r;
}

// -- comparisons ------------------------------------------------------------------------

struct ModelSpec {
  std::string name;
  train::TrainConfig train;
  bool fnet_policy = false;  // drive by maximizing the feedback network
};

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {"scalar",   "scalar-a0",   "scalar-th", "bc",       "mse-positive",
                                                 "exponential", "inverse", "absolute",  "fnet",     "fnet-policy"};
  return names;
}

/// Named training recipes on top of `base` (which supplies lr, epochs, batch, seed).
inline ModelSpec model_preset(const std::string& name, const train::TrainConfig& base) {
  ModelSpec m{name, base, false};
  auto& l = m.train.loss;
  l.threshold = false;
  l.alpha = 1.0;
  if (name == "scalar") {
    l.kind = loss::LossKind::scalar;
  } else if (name == "scalar-a0") {
    l.kind = loss::LossKind::scalar;
    l.alpha = 0.0;
  } else if (name == "scalar-th") {
    l.kind = loss::LossKind::scalar;
    l.threshold = true;
  } else if (name == "bc") {
    l.kind = loss::LossKind::scalar;
    l.threshold = true;
    l.alpha = 0.0;
  } else if (name == "mse-positive") {
    l.kind = loss::LossKind::mse_positive;
  } else if (name == "exponential") {
    l.kind = loss::LossKind::exponential;
    l.alpha = 0.1;  // does not converge with full-strength negatives
  } else if (name == "inverse") {
    l.kind = loss::LossKind::inverse;
  } else if (name == "absolute") {
    l.kind = loss::LossKind::absolute;
  } else if (name == "fnet") {
    l.kind = loss::LossKind::fnet;
  } else if (name == "fnet-policy") {
    m.fnet_policy = true;
  } else {
    throw InvalidArgument("unknown model preset '" + name + "'");
  }
  return m;
}

struct CompareConfig {
  int runs = 3;
  std::uint64_t seed = 0;  // run r uses seed + r for init, shuffling and start poses
  EvalConfig eval;
  train::TrainConfig fnet_train;  // used by fnet-loss and fnet-policy models
};

struct ModelSummary {
  std::string name;
  std::vector<EvalResult> runs;
  std::vector<train::TrainReport> reports;
  double mean = 0.0;      // mean over runs of per-run means
  double min_mean = 0.0;
  double max_mean = 0.0;
  double stddev = 0.0;    // over per-run means

  nlohmann::json to_json() const {
    nlohmann::json j = {{"name", name}, {"mean", mean}, {"min_mean", min_mean}, {"max_mean", max_mean},
                        {"stddev", stddev}};
    j["runs"] = nlohmann::json::array();
    for (const auto& r : runs) j["runs"].push_back(r.to_json());
    j["train_reports"] = nlohmann::json::array();
    for (const auto& r : reports) j["train_reports"].push_back(r.to_json());
    return j;
  }
};

inline void summarize(ModelSummary& m) {
  EvalResult means;
  for (const auto& r : m.runs) means.times.push_back(r.mean);
  summarize(means);
  m.mean = means.mean;
  m.min_mean = means.min;
  m.max_mean = means.max;
  m.stddev = means.stddev;
}

/// Published time-to-failure figures from the original lane-following
/// study (image input, different course and car). Listed for orientation
/// only; absolute seconds are not comparable with this simulator.
inline const std::vector<std::pair<std::string, std::string>>& reference_values() {
  static const std::vector<std::pair<std::string, std::string>> refs = {
      {"scalar alpha=1 vs BC (tuned lr)", "113.42 s vs 72.33 s"},
      {"scalar / exponential / fnet at lr 1e-6", "6.625 s / 4 s / 1 s"},
      {"scalar alpha=1, lr 1e-6 / 5e-6 / 1e-5", "6.625 s / 80.75 s / 128 s"},
      {"scalar alpha=0, lr 1e-6 / 5e-6 / 1e-5", "22.625 s / 54 s / 40 s"},
      {"scalar alpha=1 thresholded, lr 1e-6", "28.875 s"},
  };
  return refs;
}

struct ComparisonReport {
  std::vector<ModelSummary> models;  // ranked by mean time, best first
  CompareConfig config;

  std::string table() const {
    std::ostringstream os;
    char line[200];
    std::snprintf(line, sizeof line, "%-4s %-28s %10s %10s %10s %10s  %s\n", "rank", "model", "mean_s", "min_s",
                  "max_s", "sd_s", "censored");
    os << line;
    int rank = 1;
    for (const auto& m : models) {
      std::size_t cens = 0, total = 0;
      for (const auto& r : m.runs) {
        cens += r.censored_count();
        total += r.times.size();
      }
      std::snprintf(line, sizeof line, "%-4d %-28s %10.3f %10.3f %10.3f %10.3f  %zu/%zu\n", rank++, m.name.c_str(),
                    m.mean, m.min_mean, m.max_mean, m.stddev, cens, total);
      os << line;
    }
    os << "\nreference values (original image-based study, not comparable in absolute terms):\n";
    for (const auto& [k, v] : reference_values()) os << "  " << k << ": " << v << "\n";
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["runs"] = config.runs;
    j["trials"] = config.eval.trials;
    j["max_time"] = config.eval.max_time;
    j["seed"] = config.seed;
    j["models"] = nlohmann::json::array();
    for (const auto& m : models) j["models"].push_back(m.to_json());
    j["reference"] = nlohmann::json::object();
    for (const auto& [k, v] : reference_values()) j["reference"][k] = v;
    return j;
  }
};

inline void rank(std::vector<ModelSummary>& models) {
  std::stable_sort(models.begin(), models.end(),
                   [](const ModelSummary& a, const ModelSummary& b) { return a.mean > b.mean; });
}

/// Trains and evaluates every model `runs` times. Run r shares its seeds
/// across models so that differences come from the objective alone.
inline ComparisonReport compare(const std::vector<ModelSpec>& specs, const data::Dataset& train_set,
                                const data::Dataset& val_set, const sim::TrackSpec& track,
                                const CompareConfig& cfg) {
  if (cfg.runs < 1) throw InvalidArgument("runs must be >= 1");
  if (specs.empty()) throw InvalidArgument("nothing to compare");
  ComparisonReport report;
  report.config = cfg;
  for (const auto& spec : specs) {
    ModelSummary m;
    m.name = spec.name;
    const bool needs_fnet = spec.fnet_policy || spec.train.loss.kind == loss::LossKind::fnet;
    for (int r = 0; r < cfg.runs; ++r) {
      const std::uint64_t run_seed = cfg.seed + static_cast<std::uint64_t>(r);
      EvalConfig ec = cfg.eval;
      ec.seed = cfg.eval.seed + static_cast<std::uint64_t>(r);

      std::optional<train::TrainResult> fnet;
      if (needs_fnet) {
        train::TrainConfig fc = cfg.fnet_train;
        fc.seed = run_seed;
        fnet = train::train_fnet(train_set, val_set, fc, run_seed);
      }
      if (spec.fnet_policy) {
        m.runs.push_back(evaluate(fnet_policy(fnet->params), track, ec, spec.name));
        m.reports.push_back(fnet->report);
        continue;
      }
      train::TrainConfig tc = spec.train;
      tc.seed = run_seed;
      const auto trained =
          train::train_policy(train_set, val_set, tc, run_seed, fnet ? &fnet->params : nullptr);
      m.runs.push_back(evaluate(pnet_policy(trained.params), track, ec, spec.name));
      m.reports.push_back(trained.report);
    }
    summarize(m);
    report.models.push_back(std::move(m));
  }
  rank(report.models);
  return report;
}

struct SweepPoint {
  double learning_rate = 0.0;
  ModelSummary summary;
};

/// Evaluates one model recipe at each learning rate; the best mean first.
inline std::vector<SweepPoint> lr_sweep(const ModelSpec& base, const std::vector<double>& rates,
                                        const data::Dataset& train_set, const data::Dataset& val_set,
                                        const sim::TrackSpec& track, const CompareConfig& cfg) {
  std::vector<SweepPoint> out;
  for (double lr : rates) {
    ModelSpec spec = base;
    spec.train.learning_rate = lr;
    char name[64];
    std::snprintf(name, sizeof name, "%s@%g", base.name.c_str(), lr);
    spec.name = name;
    auto rep = compare({spec}, train_set, val_set, track, cfg);
    out.push_back({lr, std::move(rep.models.front())});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const SweepPoint& a, const SweepPoint& b) { return a.summary.mean > b.summary.mean; });
  return out;
}

}  // namespace reneg::eval
