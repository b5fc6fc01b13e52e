#pragma once

// Mini-batch SGD for the policy network (any loss) and the feedback network
// (supervised feedback regression), with per-epoch metrics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "reneg/dataset.hpp"
#include "reneg/errors.hpp"
#include "reneg/losses.hpp"
#include "reneg/nnet.hpp"

namespace reneg::train {

using data::Dataset;
using loss::LossConfig;
using loss::LossKind;

struct TrainConfig {
  std::size_t batch_size = 100;
  int epochs = 5;
  double learning_rate = 1e-6;
  std::uint64_t seed = 0;  // shuffling
  LossConfig loss;
  bool shuffle = true;
  std::vector<std::size_t> hidden = nn::default_hidden();
  bool bias_free = false;
  double max_continuity_gap = 1.0;  // s; consecutive frames further apart are not paired

  void validate() const {
    if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
    if (epochs < 1) throw InvalidArgument("epochs must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
      throw InvalidArgument("learning rate must be finite and non-negative");
    }
    loss.validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"shuffle", c.shuffle},
          {"hidden", c.hidden},
          {"bias_free", c.bias_free},
          {"loss",
           {{"kind", loss::to_string(c.loss.kind)},
            {"threshold", c.loss.threshold},
            {"alpha", c.loss.alpha},
            {"delta_min", c.loss.delta_min},
            {"d_max", c.loss.d_max},
            {"continuity_lambda", c.loss.continuity_lambda}}}};
}

/// 64-bit FNV-1a of a string, as 16 hex digits.
inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash(const nlohmann::json& j) { return fnv1a_hex(j.dump()); }

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double cloning_error = NAN;  // degrees; NaN when not applicable
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  double wall_seconds = 0.0;
  std::string config_hash;

  std::string table() const {
    std::ostringstream os;
    os << "epoch  train_loss      val_loss        cloning_error_deg\n";
    for (const auto& e : epochs) {
      char line[128];
      std::snprintf(line, sizeof line, "%5d  %-14.6g  %-14.6g  %.4f\n", e.epoch, e.train_loss, e.val_loss,
                    e.cloning_error);
      os << line;
    }
    char tail[64];
    std::snprintf(tail, sizeof tail, "wall time %.2f s\n", wall_seconds);
    os << tail;
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["config_hash"] = config_hash;
    j["wall_seconds"] = wall_seconds;
    j["epochs"] = nlohmann::json::array();
    for (const auto& e : epochs) {
      nlohmann::json row = {{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}};
      row["cloning_error"] = std::isfinite(e.cloning_error) ? nlohmann::json(e.cloning_error) : nlohmann::json();
      j["epochs"].push_back(std::move(row));
    }
    return j;
  }
};

struct TrainResult {
  nn::Mlp params;
  TrainReport report;
};

/// 50 x mean |theta - prediction| over samples with positive feedback:
/// the mean steering error in degrees at a 50 degree lock.
inline double cloning_error(const nn::Mlp& pnet, const Dataset& val) {
  double total = 0.0;
  std::size_t n = 0;
  nn::Tape tape;
  for (const auto& s : val.samples) {
    if (!(s.f > 0.0)) continue;
    total += std::abs(s.theta - pnet.forward(s.observation.to_vector(), tape));
    ++n;
  }
  if (n == 0) throw NoPositiveData("cloning error needs at least one sample with positive feedback");
  return 50.0 * total / static_cast<double>(n);
}

namespace detail {

struct Prepared {
  std::vector<double> input;
  double theta = 0.0;
  double f = 0.0;       // transformed feedback
  long partner = -1;    // index of the next consecutive frame, if any
};

inline std::vector<Prepared> prepare(const Dataset& ds, const TrainConfig& cfg, bool with_partners) {
  std::vector<Prepared> out(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    out[i].input = s.observation.to_vector();
    out[i].theta = s.theta;
    out[i].f = data::apply_feedback_transform(s.f, cfg.loss.threshold, cfg.loss.alpha);
  }
  if (!with_partners) return out;
  // Consecutive frames: same episode, regime and mirror side, next timestamp.
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  auto key = [&](std::size_t i) {
    const auto& s = ds.samples[i];
    return std::make_tuple(s.episode, static_cast<int>(s.regime), s.mirrored, s.t);
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  for (std::size_t k = 0; k + 1 < order.size(); ++k) {
    const auto& a = ds.samples[order[k]];
    const auto& b = ds.samples[order[k + 1]];
    if (a.episode == b.episode && a.regime == b.regime && a.mirrored == b.mirrored && b.t > a.t &&
        b.t - a.t <= cfg.max_continuity_gap) {
      out[order[k]].partner = static_cast<long>(order[k + 1]);
    }
  }
  return out;
}

inline nn::LossFn policy_loss_fn(const Prepared& p, const LossConfig& cfg, const nn::Mlp* fnet) {
  if (cfg.kind == LossKind::fnet) {
    std::span<const double> obs(p.input);
    return [fnet, obs](double y) { return loss::fnet_policy_loss(*fnet, obs, y); };
  }
  return [&cfg, theta = p.theta, f = p.f](double y) { return loss::evaluate(cfg, f, theta, y); };
}

inline double mean_policy_loss(const nn::Mlp& net, const std::vector<Prepared>& data, const LossConfig& cfg,
                               const nn::Mlp* fnet) {
  if (data.empty()) return NAN;
  double total = 0.0;
  nn::Tape tape;
  for (const auto& p : data) {
    const double y = net.forward(p.input, tape);
    total += policy_loss_fn(p, cfg, fnet)(y).value;
  }
  return total / static_cast<double>(data.size());
}

inline void sgd_step(nn::Mlp& net, const std::vector<double>& grad, double lr) {
  auto p = net.params();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * grad[i];
}

inline std::vector<std::size_t> epoch_order(std::size_t n, bool shuffle, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) std::shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace detail

/// Gradient of the mean training objective over one batch (loss term plus
/// the continuity penalty for batch samples that have a consecutive frame).
inline nn::GradResult policy_batch_gradient(const nn::Mlp& net, const std::vector<detail::Prepared>& data,
                                            std::span<const std::size_t> batch, const TrainConfig& cfg,
                                            const nn::Mlp* fnet = nullptr) {
  std::vector<nn::BatchItem> items;
  items.reserve(batch.size());
  for (std::size_t idx : batch) items.push_back({data[idx].input, detail::policy_loss_fn(data[idx], cfg.loss, fnet)});
  nn::GradResult g = nn::grad(net, items);

  const double lambda = cfg.loss.continuity_lambda;
  if (lambda > 0.0) {
    const double n = static_cast<double>(batch.size());
    nn::Tape ta, tb;
    for (std::size_t idx : batch) {
      if (data[idx].partner < 0) continue;
      const auto& next = data[static_cast<std::size_t>(data[idx].partner)];
      const double ya = net.forward(data[idx].input, ta);
      const double yb = net.forward(next.input, tb);
      const auto cv = loss::continuity_penalty(ya, yb, lambda);
      g.loss += cv.value / n;
      net.backward(ta, cv.grad_current / n, g.grad);
      net.backward(tb, cv.grad_next / n, g.grad);
    }
  }
  return g;
}

/// Trains a policy network. The feedback transform is applied once to the
/// whole training set; batches follow a seeded shuffle each epoch.
inline TrainResult train_policy(const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                                std::uint64_t init_seed, const nn::Mlp* fnet = nullptr) {
  cfg.validate();
  if (train.empty()) throw InvalidArgument("training set is empty");
  if (cfg.loss.kind == LossKind::fnet && fnet == nullptr) {
    throw InvalidArgument("fnet loss requires a trained feedback network");
  }
  const auto started = std::chrono::steady_clock::now();
  const std::size_t obs_size = train.samples.front().observation.size();
  nn::Mlp net = nn::init_pnet(obs_size, init_seed, cfg.hidden, cfg.bias_free);

  const auto train_data = detail::prepare(train, cfg, cfg.loss.continuity_lambda > 0.0);
  const auto val_data = detail::prepare(val, cfg, false);
  const bool has_val_positive =
      std::any_of(val.samples.begin(), val.samples.end(), [](const data::Sample& s) { return s.f > 0.0; });

  TrainReport report;
  nlohmann::json cj = to_json(cfg);
  cj["init_seed"] = init_seed;
  report.config_hash = config_hash(cj);

  std::mt19937_64 rng(cfg.seed);
  std::size_t batch_index = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = detail::epoch_order(train_data.size(), cfg.shuffle, rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      nn::GradResult g;
      try {
        g = policy_batch_gradient(net, train_data, std::span(order).subspan(start, len), cfg, fnet);
      } catch (const NonFiniteLoss& e) {
        throw NonFiniteLoss(std::string(e.what()) + " (batch " + std::to_string(batch_index) + ")");
      }
      detail::sgd_step(net, g.grad, cfg.learning_rate);
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = detail::mean_policy_loss(net, train_data, cfg.loss, fnet);
    m.val_loss = detail::mean_policy_loss(net, val_data, cfg.loss, fnet);
    if (has_val_positive) m.cloning_error = cloning_error(net, val);
    report.epochs.push_back(m);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {std::move(net), std::move(report)};
}

namespace detail {

inline std::vector<nn::BatchItem> fnet_items(const Dataset& ds) {
  std::vector<nn::BatchItem> items;
  items.reserve(ds.size());
  for (const auto& s : ds.samples) {
    items.push_back({loss::fnet_input(s.observation.to_vector(), s.theta),
                     [target = s.f](double y) {
                       const double d = y - target;
                       return nn::LossValue{d * d, 2.0 * d};
                     }});
  }
  return items;
}

}  // namespace detail

/// Regresses (observation, steer) -> feedback with mean squared error.
inline TrainResult train_fnet(const Dataset& train, const Dataset& val, const TrainConfig& cfg,
                              std::uint64_t init_seed) {
  cfg.validate();
  if (train.empty()) throw InvalidArgument("training set is empty");
  const auto started = std::chrono::steady_clock::now();
  const std::size_t obs_size = train.samples.front().observation.size();
  nn::Mlp net = nn::init_fnet(obs_size, init_seed, cfg.hidden);

  const auto train_items = detail::fnet_items(train);
  const auto val_items = detail::fnet_items(val);

  TrainReport report;
  nlohmann::json cj = to_json(cfg);
  cj["init_seed"] = init_seed;
  cj["net"] = "fnet";
  report.config_hash = config_hash(cj);

  std::mt19937_64 rng(cfg.seed);
  std::vector<nn::BatchItem> batch;
  std::size_t batch_index = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = detail::epoch_order(train_items.size(), cfg.shuffle, rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      batch.clear();
      for (std::size_t k = start; k < start + len; ++k) batch.push_back(train_items[order[k]]);
      nn::GradResult g;
      try {
        g = nn::grad(net, batch);
      } catch (const NonFiniteLoss& e) {
        throw NonFiniteLoss(std::string(e.what()) + " (batch " + std::to_string(batch_index) + ")");
      }
      detail::sgd_step(net, g.grad, cfg.learning_rate);
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = nn::mean_loss(net, train_items);
    m.val_loss = val_items.empty() ? NAN : nn::mean_loss(net, val_items);
    report.epochs.push_back(m);
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {std::move(net), std::move(report)};
}

}  // namespace reneg::train
