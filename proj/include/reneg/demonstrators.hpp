#pragma once

// Scripted demonstrators for the three data-collection regimes (optimal
// centerline driving, sine-wave swerving, lane changes) and the episode
// recorder that samples (observation, action) pairs at a fixed rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "reneg/errors.hpp"
#include "reneg/sim.hpp"

namespace reneg::demo {

using sim::Action;
using sim::Observation;

enum class Regime { optimal, swerve_left, swerve_right, lane_change_left, lane_change_right, human };

inline std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::optimal: return "optimal";
    case Regime::swerve_left: return "swerve_left";
    case Regime::swerve_right: return "swerve_right";
    case Regime::lane_change_left: return "lane_change_left";
    case Regime::lane_change_right: return "lane_change_right";
    case Regime::human: return "human";
  }
  return "optimal";
}

inline Regime regime_from_string(std::string_view s) {
  for (Regime r : {Regime::optimal, Regime::swerve_left, Regime::swerve_right, Regime::lane_change_left,
                   Regime::lane_change_right, Regime::human}) {
    if (to_string(r) == s) return r;
  }
  throw InvalidArgument("unknown regime '" + std::string(s) + "'");
}

inline Regime mirror(Regime r) {
  switch (r) {
    case Regime::swerve_left: return Regime::swerve_right;
    case Regime::swerve_right: return Regime::swerve_left;
    case Regime::lane_change_left: return Regime::lane_change_right;
    case Regime::lane_change_right: return Regime::lane_change_left;
    default: return r;
  }
}

struct PdGains {
  double kp = 0.4;
  double kd = 1.2;
  // Linearised curvature feed-forward: wheelbase / theta_max for the default car.
  double kff = 2.5 / sim::deg_to_rad(50.0);
};

struct SwerveParams {
  double mid = 1.2;     // m
  double amp = 0.8;     // m
  double period = 8.0;  // s
};

struct LaneChangeParams {
  double side_offset = 2.0;  // m
  double ramp = 3.0;         // s, each direction
  double hold_side = 8.0;    // s
  double hold_center = 6.0;  // s

  double cycle() const { return 2.0 * ramp + hold_side + hold_center; }
};

struct DemoConfig {
  PdGains gains;
  SwerveParams swerve;
  LaneChangeParams lane_change;
};

enum class Side { left, right };

inline double side_sign(Side s) { return s == Side::left ? 1.0 : -1.0; }

/// PD tracker toward a target lateral offset, with curvature feed-forward.
inline Action track_offset(const Observation& obs, double target, const PdGains& g) {
  const double k0 = obs.curvature_ahead.empty() ? 0.0 : obs.curvature_ahead.front();
  const double steer = -g.kp * (obs.lateral_offset - target) - g.kd * obs.heading_error + g.kff * k0;
  return {std::clamp(steer, -1.0, 1.0)};
}

inline Action optimal_policy(const Observation& obs, const PdGains& g = {}) { return track_offset(obs, 0.0, g); }

inline double swerve_target(double t, Side side, const SwerveParams& p) {
  return side_sign(side) * (p.mid + p.amp * std::sin(sim::kTwoPi * t / p.period));
}

inline Action swerve_policy(const Observation& obs, double t, Side side, const DemoConfig& cfg = {}) {
  return track_offset(obs, swerve_target(t, side, cfg.swerve), cfg.gains);
}

/// Target offset of the lane-change cycle: ramp out, hold at the side, ramp back, hold at center.
inline double lane_change_target(double t, Side side, const LaneChangeParams& p) {
  auto smooth = [](double u) { return 0.5 * (1.0 - std::cos(sim::kPi * u)); };
  double tau = std::fmod(t, p.cycle());
  if (tau < 0.0) tau += p.cycle();
  const double peak = side_sign(side) * p.side_offset;
  if (tau < p.ramp) return peak * smooth(tau / p.ramp);
  tau -= p.ramp;
  if (tau < p.hold_side) return peak;
  tau -= p.hold_side;
  if (tau < p.ramp) return peak * (1.0 - smooth(tau / p.ramp));
  return 0.0;
}

inline bool in_center_hold(double t, const LaneChangeParams& p) {
  double tau = std::fmod(t, p.cycle());
  return tau >= 2.0 * p.ramp + p.hold_side;
}

inline Action lane_change_policy(const Observation& obs, double t, Side side, const DemoConfig& cfg = {}) {
  return track_offset(obs, lane_change_target(t, side, cfg.lane_change), cfg.gains);
}

/// A driving policy: (observation, episode time) -> action.
using Policy = std::function<Action(const Observation&, double)>;

inline Policy make_policy(Regime regime, const DemoConfig& cfg = {}) {
  switch (regime) {
    case Regime::optimal:
      return [g = cfg.gains](const Observation& o, double) { return optimal_policy(o, g); };
    case Regime::swerve_left:
    case Regime::swerve_right: {
      const Side side = regime == Regime::swerve_left ? Side::left : Side::right;
      return [cfg, side](const Observation& o, double t) { return swerve_policy(o, t, side, cfg); };
    }
    case Regime::lane_change_left:
    case Regime::lane_change_right: {
      const Side side = regime == Regime::lane_change_left ? Side::left : Side::right;
      return [cfg, side](const Observation& o, double t) { return lane_change_policy(o, t, side, cfg); };
    }
    case Regime::human: break;
  }
  throw InvalidArgument("no scripted policy for regime " + std::string(to_string(regime)));
}

// -- recording -----------------------------------------------------------------

struct DemoEntry {
  double t = 0.0;  // s since episode start
  Observation observation;
  Action theta;
  Regime regime = Regime::optimal;
  std::int64_t episode = 0;
  bool restart = false;  // first entry after a restart-on-termination

  friend bool operator==(const DemoEntry&, const DemoEntry&) = default;
};

struct DemoLog {
  std::vector<DemoEntry> entries;
  double sample_rate = 2.0;
  std::uint64_t seed = 0;

  friend bool operator==(const DemoLog&, const DemoLog&) = default;
};

enum class OnTermination { fail, restart };

struct RecordOptions {
  sim::SimConfig sim;
  Regime regime = Regime::optimal;
  std::int64_t episode = 0;
  OnTermination on_termination = OnTermination::fail;
};

namespace detail {

inline sim::CarState random_start(const sim::TrackSpec& track, const sim::SimConfig& cfg, std::mt19937_64& rng,
                                  bool perturb) {
  std::uniform_real_distribution<double> s_dist(0.0, track.length());
  const double s = s_dist(rng);
  double lateral = 0.0;
  double heading = 0.0;
  if (perturb) {
    lateral = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    heading = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  }
  return sim::start_state(track, s, lateral, heading, cfg);
}

}  // namespace detail

/// Simulates `policy` for `duration` seconds and samples it at `sample_rate` Hz.
/// The episode starts on the centerline at an arc length drawn from `seed`.
/// Leaving the road raises SimDiverged unless restarts were requested, in
/// which case a new episode begins from a perturbed on-road pose.
inline DemoLog record(const Policy& policy, const sim::TrackSpec& track, double duration, double sample_rate,
                      std::uint64_t seed, const RecordOptions& opt = {}) {
  if (!(duration > 0.0)) throw InvalidArgument("duration must be positive");
  if (!(sample_rate > 0.0)) throw InvalidArgument("sample rate must be positive");

  std::mt19937_64 rng(seed);
  DemoLog log;
  log.sample_rate = sample_rate;
  log.seed = seed;

  const double interval = 1.0 / sample_rate;
  const double dt = opt.sim.dt;
  constexpr double kSlack = 1e-9;

  sim::CarState state = detail::random_start(track, opt.sim, rng, false);
  std::int64_t episode = opt.episode;
  bool restarted = false;
  double elapsed = 0.0;         // wall time across episodes
  double next_sample = 0.0;     // episode time of the next sample

  while (elapsed < duration - kSlack) {
    const Observation obs = sim::observe(state, track, opt.sim);
    const Action act = policy(obs, state.t);
    if (state.t + kSlack >= next_sample) {
      log.entries.push_back({state.t, obs, act, opt.regime, episode, restarted});
      restarted = false;
      next_sample += interval;
    }
    state = sim::step(state, act, track, opt.sim, dt);
    elapsed += dt;
    if (sim::is_terminated(state, track, opt.sim.car)) {
      if (opt.on_termination == OnTermination::fail) {
        throw SimDiverged("policy for regime " + std::string(to_string(opt.regime)) + " left the road at t=" +
                          std::to_string(state.t) + " s");
      }
      state = detail::random_start(track, opt.sim, rng, true);
      ++episode;
      restarted = true;
      next_sample = 0.0;
    }
  }
  return log;
}

/// One regime's share of a collection budget.
struct BudgetItem {
  Regime regime;
  double duration;  // s
};

/// 20 minutes of optimal driving and 10 minutes of each suboptimal regime.
inline std::vector<BudgetItem> default_budget() {
  return {{Regime::optimal, 1200.0},
          {Regime::swerve_left, 600.0},
          {Regime::swerve_right, 600.0},
          {Regime::lane_change_left, 600.0},
          {Regime::lane_change_right, 600.0}};
}

/// Records every budget item as its own episode (episode id = item index,
/// seed = base seed + index) and concatenates the logs.
inline DemoLog collect(const sim::TrackSpec& track, const std::vector<BudgetItem>& budget, double sample_rate,
                       std::uint64_t seed, const DemoConfig& demo = {}, const sim::SimConfig& sim_cfg = {}) {
  DemoLog all;
  all.sample_rate = sample_rate;
  all.seed = seed;
  std::int64_t episode = 0;
  for (std::size_t i = 0; i < budget.size(); ++i) {
    RecordOptions opt;
    opt.sim = sim_cfg;
    opt.regime = budget[i].regime;
    opt.episode = episode;
    DemoLog part = record(make_policy(budget[i].regime, demo), track, budget[i].duration, sample_rate, seed + i, opt);
    if (!part.entries.empty()) episode = part.entries.back().episode + 1;
    all.entries.insert(all.entries.end(), part.entries.begin(), part.entries.end());
  }
  return all;
}

}  // namespace reneg::demo
