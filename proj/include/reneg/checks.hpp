#pragma once

// Randomized end-to-end gradient checks: loss composed with a policy network,
// analytic backprop against central differences.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "reneg/losses.hpp"
#include "reneg/nnet.hpp"

namespace reneg::checks {

struct GradCheckCase {
  double f = 0.0;
  double theta = 0.0;
  double theta_hat = 0.0;
  double rel_error = 0.0;
};

struct GradCheckResult {
  loss::LossKind kind = loss::LossKind::scalar;
  std::size_t configs = 0;
  double max_rel_error = 0.0;
  GradCheckCase worst;

  nlohmann::json to_json() const {
    return {{"loss", loss::to_string(kind)},
            {"configs", configs},
            {"max_rel_error", max_rel_error},
            {"worst", {{"f", worst.f}, {"theta", worst.theta}, {"theta_hat", worst.theta_hat}}}};
  }
};

/// Max-norm relative error between two gradient vectors.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
  }
  return scale == 0.0 ? diff : diff / scale;
}

/// Each configuration draws a small tanh net, an input, f with |f| >= 0.05 and
/// a demonstrated angle placed so that D = |theta - theta_hat| lies in
/// [0.1, 1.5], clear of every clamp. The fnet kind instead draws a random
/// feedback network and differentiates through it.
inline GradCheckResult gradient_check(loss::LossKind kind, std::size_t configs, std::uint64_t seed,
                                      double h = 1e-6) {
  if (configs == 0) throw InvalidArgument("configs must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::uniform_real_distribution<double> dist(0.1, 1.5);
  constexpr std::size_t kObs = 8;

  GradCheckResult out;
  out.kind = kind;
  out.configs = configs;
  loss::LossConfig lc;
  lc.kind = kind;

  for (std::size_t c = 0; c < configs; ++c) {
    const auto net = nn::init(nn::NetKind::pnet, {kObs, 6, 4, 1}, rng());
    std::vector<double> x(kObs);
    for (double& v : x) v = unit(rng);
    const double theta_hat = net.forward(x);
    const double f = (unit(rng) < 0.0 ? -1.0 : 1.0) * mag(rng);
    double theta = 0.0;
    for (;;) {
      const double d = dist(rng);
      const double sgn = unit(rng) < 0.0 ? -1.0 : 1.0;
      theta = theta_hat + sgn * d;
      if (std::abs(theta) <= 1.0) break;
      theta = theta_hat - sgn * d;
      if (std::abs(theta) <= 1.0) break;
    }

    nn::Mlp fnet;
    nn::LossFn fn;
    if (kind == loss::LossKind::fnet) {
      fnet = nn::init(nn::NetKind::fnet, {kObs + 1, 6, 1}, rng());
      fn = [&fnet, x](double y) { return loss::fnet_policy_loss(fnet, x, y); };
    } else {
      fn = [lc, f, theta](double y) { return loss::evaluate(lc, f, theta, y); };
    }
    const std::vector<nn::BatchItem> batch{{x, fn}};
    const auto analytic = nn::grad(net, batch).grad;
    std::vector<double> numeric(net.num_params());
    nn::Mlp probe = net;
    for (std::size_t i = 0; i < net.num_params(); ++i) {
      const double p0 = probe.params()[i];
      probe.params()[i] = p0 + h;
      const double up = nn::mean_loss(probe, batch);
      probe.params()[i] = p0 - h;
      const double down = nn::mean_loss(probe, batch);
      probe.params()[i] = p0;
      numeric[i] = (up - down) / (2.0 * h);
    }
    const double err = relative_error(analytic, numeric);
    if (err >= out.max_rel_error) {
      out.max_rel_error = err;
      out.worst = {f, theta, theta_hat, err};
    }
  }
  return out;
}

}  // namespace reneg::checks
