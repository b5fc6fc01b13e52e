#pragma once

// Regression-with-negative-examples losses. Every loss takes the (already
// transformed) feedback f, the demonstrated steer theta and the predicted
// steer theta_hat, and returns the loss value with d loss / d theta_hat.
// D denotes |theta - theta_hat|.
//
// |f| can be read as a certainty, 1 / (2 sigma^2), of a Gaussian centred on
// the demonstrated action; sigma itself never appears in the computation.

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "reneg/errors.hpp"
#include "reneg/nnet.hpp"

namespace reneg::loss {

using nn::LossValue;

enum class LossKind { scalar, exponential, fnet, inverse, absolute, mse_positive };

inline std::string_view to_string(LossKind k) {
  switch (k) {
    case LossKind::scalar: return "scalar";
    case LossKind::exponential: return "exponential";
    case LossKind::fnet: return "fnet";
    case LossKind::inverse: return "inverse";
    case LossKind::absolute: return "absolute";
    case LossKind::mse_positive: return "mse-positive";
  }
  return "scalar";
}

inline LossKind loss_kind_from_string(std::string_view s) {
  for (LossKind k : {LossKind::scalar, LossKind::exponential, LossKind::fnet, LossKind::inverse,
                     LossKind::absolute, LossKind::mse_positive}) {
    if (to_string(k) == s) return k;
  }
  throw InvalidArgument("unknown loss kind '" + std::string(s) + "'");
}

struct LossConfig {
  LossKind kind = LossKind::scalar;
  bool threshold = false;
  double alpha = 1.0;
  double delta_min = 1e-2;  // lower clamp on D (exponential, inverse)
  double d_max = 2.0;       // upper clamp on D
  double continuity_lambda = 0.0;

  void validate() const {
    if (!(alpha >= 0.0)) throw InvalidArgument("alpha must be >= 0");
    if (!(delta_min > 0.0 && delta_min < 1.0 && d_max > 1.0)) {
      throw InvalidArgument("loss clamps must satisfy 0 < delta_min < 1 < d_max");
    }
    if (!(continuity_lambda >= 0.0)) throw InvalidArgument("continuity lambda must be >= 0");
  }
};

namespace detail {
inline double direction(double theta, double theta_hat) {
  return theta_hat > theta ? 1.0 : (theta_hat < theta ? -1.0 : 0.0);
}
}  // namespace detail

/// f * (theta - theta_hat)^2
inline LossValue scalar_loss(double f, double theta, double theta_hat) {
  const double d = theta - theta_hat;
  return {f * (d * d), 2.0 * f * (theta_hat - theta)};
}

/// (theta - theta_hat)^2
inline LossValue mse_loss(double theta, double theta_hat) {
  const double d = theta - theta_hat;
  return {d * d, 2.0 * (theta_hat - theta)};
}

/// Behavioral-cloning reference objective: MSE on positive feedback, inert otherwise.
inline LossValue mse_positive_loss(double f, double theta, double theta_hat) {
  if (!(f > 0.0)) return {0.0, 0.0};
  return mse_loss(theta, theta_hat);
}

/// D^(2f) with D clamped to [delta_min, d_max]; zero gradient in the clamped
/// region. f = 0 gives the constant 1.
inline LossValue exponential_loss(double f, double theta, double theta_hat, double delta_min = 1e-2,
                                  double d_max = 2.0) {
  if (f == 0.0) return {1.0, 0.0};
  const double dist = std::abs(theta - theta_hat);
  const double dc = std::clamp(dist, delta_min, d_max);
  const double value = std::pow(dc, 2.0 * f);
  double grad = 0.0;
  if (dist > delta_min && dist < d_max) {
    grad = 2.0 * f * std::pow(dc, 2.0 * f - 1.0) * detail::direction(theta, theta_hat);
  }
  return {value, grad};
}

/// |f| * D^(2 sign f), clamped like the exponential loss; f = 0 is inert.
inline LossValue inverse_loss(double f, double theta, double theta_hat, double delta_min = 1e-2,
                              double d_max = 2.0) {
  if (f == 0.0) return {0.0, 0.0};
  const double s = f > 0.0 ? 1.0 : -1.0;
  const double mag = std::abs(f);
  const double dist = std::abs(theta - theta_hat);
  const double dc = std::clamp(dist, delta_min, d_max);
  const double value = mag * std::pow(dc, 2.0 * s);
  double grad = 0.0;
  if (dist > delta_min && dist < d_max) {
    grad = mag * 2.0 * s * std::pow(dc, 2.0 * s - 1.0) * detail::direction(theta, theta_hat);
  }
  return {value, grad};
}

/// f * D; zero gradient at D = 0.
inline LossValue absolute_loss(double f, double theta, double theta_hat) {
  return {f * std::abs(theta - theta_hat), f * detail::direction(theta, theta_hat)};
}

/// Dispatch for the closed-form losses (everything except fnet).
inline LossValue evaluate(const LossConfig& cfg, double f, double theta, double theta_hat) {
  switch (cfg.kind) {
    case LossKind::scalar: return scalar_loss(f, theta, theta_hat);
    case LossKind::exponential: return exponential_loss(f, theta, theta_hat, cfg.delta_min, cfg.d_max);
    case LossKind::inverse: return inverse_loss(f, theta, theta_hat, cfg.delta_min, cfg.d_max);
    case LossKind::absolute: return absolute_loss(f, theta, theta_hat);
    case LossKind::mse_positive: return mse_positive_loss(f, theta, theta_hat);
    case LossKind::fnet: break;
  }
  throw InvalidArgument("fnet loss needs a feedback network");
}

// -- feedback network as loss / policy ---------------------------------------------

inline std::vector<double> fnet_input(std::span<const double> obs, double theta) {
  std::vector<double> in(obs.begin(), obs.end());
  in.push_back(theta);
  return in;
}

/// -FNet(obs, theta_hat) and its derivative through the steer input.
inline LossValue fnet_policy_loss(const nn::Mlp& fnet, std::span<const double> obs, double theta_hat) {
  if (fnet.kind() != nn::NetKind::fnet) throw ShapeMismatch("fnet_policy_loss needs a feedback network");
  if (obs.size() + 1 != fnet.input_size()) throw ShapeMismatch("observation width does not match the FNet");
  nn::Tape tape;
  const std::vector<double> in = fnet_input(obs, theta_hat);
  const double y = fnet.forward(in, tape);
  std::vector<double> g(in.size());
  fnet.backward_input(tape, -1.0, g);
  return {-y, g.back()};
}

/// 41 evenly spaced steer values from -1 to 1 (step 0.05).
inline std::vector<double> default_grid() {
  std::vector<double> g;
  for (int k = -20; k <= 20; ++k) g.push_back(k / 20.0);
  return g;
}

/// Grid steer with the highest predicted feedback; ties go to the smallest
/// |a|, then to the smaller a.
inline double fnet_infer(const nn::Mlp& fnet, std::span<const double> obs, std::span<const double> grid) {
  if (grid.empty()) throw InvalidArgument("inference grid is empty");
  std::vector<double> in(obs.begin(), obs.end());
  in.push_back(0.0);
  nn::Tape tape;
  double best_a = grid.front();
  double best_v = -INFINITY;
  for (double a : grid) {
    in.back() = a;
    const double v = fnet.forward(in, tape);
    const bool better = v > best_v || (v == best_v && (std::abs(a) < std::abs(best_a) ||
                                                       (std::abs(a) == std::abs(best_a) && a < best_a)));
    if (better) {
      best_v = v;
      best_a = a;
    }
  }
  return best_a;
}

// -- continuity regularizer ------------------------------------------------------------

struct ContinuityValue {
  double value = 0.0;
  double grad_current = 0.0;
  double grad_next = 0.0;
};

/// lambda * (theta_hat_t - theta_hat_next)^2 for consecutive frames.
inline ContinuityValue continuity_penalty(double theta_hat_t, double theta_hat_next, double lambda) {
  if (lambda == 0.0) return {};
  const double d = theta_hat_t - theta_hat_next;
  return {lambda * d * d, 2.0 * lambda * d, -2.0 * lambda * d};
}

// -- loss-property verification ---------------------------------------------------------

struct PropertyGrid {
  std::vector<double> f_values;
  std::vector<double> d_values;

  /// f in {+-0.05, ..., +-1}, D in {0.025, 0.075, ..., 1.975}: stays off
  /// f = 0, D = 1 and the clamp boundaries.
  static PropertyGrid standard() {
    PropertyGrid g;
    for (int k = 1; k <= 20; ++k) {
      g.f_values.push_back(-k / 20.0);
      g.f_values.push_back(k / 20.0);
    }
    std::sort(g.f_values.begin(), g.f_values.end());
    for (int k = 0; k < 40; ++k) g.d_values.push_back(0.025 + 0.05 * k);
    return g;
  }
};

struct PropertyCell {
  double f = 0.0;
  double d = 0.0;
  double measured = 0.0;  // derivative value that violated the property
};

struct PropertyOutcome {
  std::size_t checked = 0;
  std::vector<PropertyCell> counterexamples;
  bool pass() const { return counterexamples.empty(); }
};

inline constexpr std::array<const char*, 4> kPropertyNames = {
    "P1 dL/dD >= 0 (f > 0)", "P2 dL/dD <= 0 (f < 0)", "P3 d|L|/df signed like f", "P4 d2L/dD2 >= 0"};

struct PropertyReport {
  LossKind kind = LossKind::scalar;
  std::array<PropertyOutcome, 4> properties;

  bool pass(int p) const { return properties[static_cast<std::size_t>(p - 1)].pass(); }

  std::string table() const {
    std::ostringstream os;
    os << "loss " << to_string(kind) << "\n";
    os << "  property                      checked  failed  first counterexample\n";
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& p = properties[i];
      char line[160];
      std::snprintf(line, sizeof line, "  %-28s %8zu %7zu  ", kPropertyNames[i], p.checked, p.counterexamples.size());
      os << line;
      if (p.pass()) {
        os << "PASS";
      } else {
        const auto& c = p.counterexamples.front();
        std::snprintf(line, sizeof line, "FAIL f=%+.3f D=%.3f value=%.4g", c.f, c.d, c.measured);
        os << line;
      }
      os << "\n";
    }
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["loss"] = to_string(kind);
    for (std::size_t i = 0; i < 4; ++i) {
      nlohmann::json p;
      p["name"] = kPropertyNames[i];
      p["pass"] = properties[i].pass();
      p["checked"] = properties[i].checked;
      p["failed"] = properties[i].counterexamples.size();
      nlohmann::json cells = nlohmann::json::array();
      for (const auto& c : properties[i].counterexamples) cells.push_back({c.f, c.d, c.measured});
      p["counterexamples"] = std::move(cells);
      j["properties"].push_back(std::move(p));
    }
    return j;
  }
};

/// Checks the four loss properties cell by cell. First derivatives in D are
/// analytic; d|L|/df and d2L/dD2 use central differences.
inline PropertyReport check_properties(LossKind kind, const PropertyGrid& grid = PropertyGrid::standard(),
                                       const LossConfig& base = {}) {
  if (kind == LossKind::fnet || kind == LossKind::mse_positive) {
    throw InvalidArgument("property checks cover the closed-form losses only");
  }
  LossConfig cfg = base;
  cfg.kind = kind;
  auto at = [&](double f, double d) { return evaluate(cfg, f, 0.0, d); };
  constexpr double kStepF = 1e-6;
  constexpr double kStepD = 1e-5;
  constexpr double kCurvatureSlack = 1e-7;

  PropertyReport report;
  report.kind = kind;
  for (double f : grid.f_values) {
    if (f == 0.0) continue;
    for (double d : grid.d_values) {
      const double dl_dd = at(f, d).grad;
      auto record = [&](std::size_t p, bool ok, double measured) {
        ++report.properties[p].checked;
        if (!ok) report.properties[p].counterexamples.push_back({f, d, measured});
      };
      if (f > 0.0) record(0, dl_dd >= 0.0, dl_dd);
      if (f < 0.0) record(1, dl_dd <= 0.0, dl_dd);

      const double dabs_df =
          (std::abs(at(f + kStepF, d).value) - std::abs(at(f - kStepF, d).value)) / (2.0 * kStepF);
      record(2, f > 0.0 ? dabs_df > 0.0 : dabs_df < 0.0, dabs_df);

      const double d2 = (at(f, d + kStepD).grad - at(f, d - kStepD).grad) / (2.0 * kStepD);
      record(3, d2 >= -kCurvatureSlack, d2);
    }
  }
  return report;
}

}  // namespace reneg::loss
