#pragma once

// Backseat-driver labeling: a critic signals a steering differential c for
// each demonstrated action theta; corrections are normalized over the whole
// labeling batch and mapped to a feedback value in [-1, 1].

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "reneg/dataset.hpp"
#include "reneg/demonstrators.hpp"
#include "reneg/errors.hpp"

namespace reneg::backseat {

struct FeedbackParams {
  double theta_max_deg = 50.0;
  double epsilon = 5.0 / 50.0;  // 5 degrees of tolerance at theta_max = 50

  static FeedbackParams for_theta_max(double theta_max_deg) { return {theta_max_deg, 5.0 / theta_max_deg}; }
};

enum class CorrectionSource { oracle, human };

/// One raw critic signal. Positive means "steer more to the left".
struct Correction {
  double c_raw = 0.0;
  CorrectionSource source = CorrectionSource::human;
  double t = 0.0;  // episode time it refers to
  std::int64_t episode = 0;
};

/// Largest |c| in the batch; the divisor used by normalize_corrections.
inline double max_abs(std::span<const double> cs) {
  double m = 0.0;
  for (double c : cs) m = std::max(m, std::abs(c));
  return m;
}

/// Divides every correction by the largest magnitude in the batch. An
/// all-zero batch stays all zero.
inline std::vector<double> normalize_corrections(std::span<const double> cs) {
  if (cs.empty()) throw EmptyBatch("cannot normalize an empty correction batch");
  const double m = max_abs(cs);
  std::vector<double> out(cs.begin(), cs.end());
  if (m == 0.0) {
    std::fill(out.begin(), out.end(), 0.0);
    return out;
  }
  for (double& c : out) c /= m;
  return out;
}

/// Same-direction (or within-tolerance) corrections give 1 - |c|, opposing
/// corrections give -|c|. Zero counts as agreeing with either sign.
inline double feedback(double c, double theta, const FeedbackParams& p = {}) {
  const double mag = std::abs(c);
  const bool same_direction = (c >= 0.0 && theta >= 0.0) || (c <= 0.0 && theta <= 0.0);
  if (same_direction || mag <= p.epsilon) return 1.0 - mag;
  return -mag;
}

/// Synthetic critic: how far the demonstrated command is from the scripted
/// optimal tracker's command.
inline double oracle_critic(const sim::Observation& obs, sim::Action theta_demo, const demo::PdGains& gains = {}) {
  return std::clamp(demo::optimal_policy(obs, gains).steer - theta_demo.steer, -1.0, 1.0);
}

struct LabelResult {
  data::Dataset dataset;
  std::size_t dropped = 0;  // log entries without any aligned correction
};

namespace detail {

inline data::Dataset build(const demo::DemoLog& log, const std::vector<std::size_t>& kept,
                           const std::vector<double>& c_raw, const FeedbackParams& params) {
  data::Dataset ds;
  ds.provenance.seed = log.seed;
  if (kept.empty()) return ds;
  ds.normalizer = max_abs(c_raw);
  const std::vector<double> c = normalize_corrections(c_raw);
  ds.samples.reserve(kept.size());
  for (std::size_t k = 0; k < kept.size(); ++k) {
    const auto& e = log.entries[kept[k]];
    data::Sample s;
    s.observation = e.observation;
    s.theta = e.theta.steer;
    s.c = c[k];
    s.f = feedback(c[k], s.theta, params);
    s.regime = e.regime;
    s.episode = e.episode;
    s.t = e.t;
    s.pair = static_cast<std::int64_t>(kept[k]);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace detail

/// Labels every entry with the oracle critic.
inline LabelResult label_with_oracle(const demo::DemoLog& log, const FeedbackParams& params = {},
                                     const demo::PdGains& gains = {}) {
  std::vector<std::size_t> kept(log.entries.size());
  std::vector<double> c_raw(log.entries.size());
  for (std::size_t i = 0; i < log.entries.size(); ++i) {
    kept[i] = i;
    c_raw[i] = oracle_critic(log.entries[i].observation, log.entries[i].theta, gains);
  }
  return {detail::build(log, kept, c_raw, params), 0};
}

/// Labels entries from a human correction stream. A correction belongs to
/// the latest entry of its episode at or before its timestamp, provided it
/// falls inside that entry's sample interval; corrections sharing an entry
/// are averaged. Entries left without corrections are dropped and counted
/// (or raise AlignmentGap when `strict`).
inline LabelResult label_with_corrections(const demo::DemoLog& log, std::span<const Correction> corrections,
                                          const FeedbackParams& params = {}, bool strict = false) {
  const double interval = 1.0 / log.sample_rate;
  constexpr double kSlack = 1e-9;

  std::map<std::int64_t, std::vector<std::size_t>> by_episode;
  for (std::size_t i = 0; i < log.entries.size(); ++i) by_episode[log.entries[i].episode].push_back(i);

  std::vector<double> sum(log.entries.size(), 0.0);
  std::vector<std::size_t> count(log.entries.size(), 0);
  for (const Correction& c : corrections) {
    const auto ep = by_episode.find(c.episode);
    if (ep == by_episode.end()) continue;
    const auto& idx = ep->second;
    auto it = std::upper_bound(idx.begin(), idx.end(), c.t + kSlack,
                               [&](double t, std::size_t i) { return t < log.entries[i].t; });
    if (it == idx.begin()) continue;
    const std::size_t entry = *std::prev(it);
    if (c.t - log.entries[entry].t >= interval - kSlack) continue;
    sum[entry] += c.c_raw;
    ++count[entry];
  }

  std::vector<std::size_t> kept;
  std::vector<double> c_raw;
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < log.entries.size(); ++i) {
    if (count[i] == 0) {
      ++dropped;
      continue;
    }
    kept.push_back(i);
    c_raw.push_back(sum[i] / static_cast<double>(count[i]));
  }
  if (strict && dropped > 0) {
    throw AlignmentGap(std::to_string(dropped) + " log entries have no aligned correction");
  }
  return {detail::build(log, kept, c_raw, params), dropped};
}

}  // namespace reneg::backseat
