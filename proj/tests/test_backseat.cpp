#include <catch_amalgamated.hpp>

#include "reneg/backseat.hpp"

using namespace reneg;
using namespace reneg::backseat;
using Catch::Approx;

namespace {

// Line-by-line transcription of the labeling procedure; zero agrees with any sign.
double reference_feedback(double c, double theta, double eps) {
  auto sgn = [](double v) { return v > 0 ? 1 : (v < 0 ? -1 : 0); };
  const bool signs_match = sgn(c) == sgn(theta) || sgn(c) == 0 || sgn(theta) == 0;
  if (signs_match || std::abs(c) <= eps) return 1.0 - std::abs(c);
  return -std::abs(c);
}

demo::DemoLog tiny_log() {
  demo::DemoLog log;
  log.sample_rate = 2.0;
  for (int i = 0; i < 4; ++i) {
    demo::DemoEntry e;
    e.t = 0.5 * i;
    e.observation = sim::Observation{0.0, 0.0, {0.0}, 0.0};
    e.theta.steer = 0.2;
    log.entries.push_back(e);
  }
  return log;
}

}  // namespace

TEST_CASE("normalization divides by the largest magnitude", "[backseat]") {
  const std::vector<double> a{0.2, -0.8, 0.4};
  CHECK(normalize_corrections(a) == std::vector<double>{0.25, -1.0, 0.5});
  CHECK(normalize_corrections(std::vector<double>{0.0, 0.0, 0.0}) == std::vector<double>{0.0, 0.0, 0.0});
  CHECK(normalize_corrections(std::vector<double>{-0.3}) == std::vector<double>{-1.0});
  CHECK_THROWS_AS(normalize_corrections(std::vector<double>{}), EmptyBatch);
}

TEST_CASE("feedback examples", "[backseat]") {
  const FeedbackParams p;
  CHECK(p.epsilon == Approx(0.1));
  CHECK(feedback(0.0, 0.5, p) == 1.0);
  CHECK(feedback(0.4, 0.5, p) == Approx(0.6));
  CHECK(feedback(-0.4, 0.5, p) == -0.4);
  CHECK(feedback(-0.1, 0.5, p) == Approx(0.9));
  CHECK(feedback(-0.1000001, 0.5, p) == Approx(-0.1000001));
  CHECK(FeedbackParams::for_theta_max(25.0).epsilon == Approx(0.2));
}

TEST_CASE("feedback matches the transcribed procedure on the unit grid", "[backseat]") {
  const FeedbackParams p;
  for (int i = -20; i <= 20; ++i) {
    for (int j = -20; j <= 20; ++j) {
      const double c = i / 20.0, theta = j / 20.0;
      CHECK(feedback(c, theta, p) == reference_feedback(c, theta, 0.1));
    }
  }
}

TEST_CASE("feedback invariants", "[backseat]") {
  const FeedbackParams p;
  for (int i = -40; i <= 40; ++i) {
    for (int j = -20; j <= 20; ++j) {
      const double c = i / 40.0, theta = j / 20.0;
      const double f = feedback(c, theta, p);
      CHECK(f >= -1.0);
      CHECK(f <= 1.0);
      CHECK((f == 1.0) == (c == 0.0));
      CHECK(feedback(-c, -theta, p) == f);
      // Larger |c| with the same sign configuration never raises f.
      if (i > 0 && i < 40) CHECK(feedback((i + 1) / 40.0, theta, p) <= f);
      if (i < 0 && i > -40) CHECK(feedback((i - 1) / 40.0, theta, p) <= f);
    }
  }
}

TEST_CASE("oracle critic", "[backseat]") {
  sim::Observation zero{0.0, 0.0, {0.0, 0.0, 0.0, 0.0, 0.0}, 0.0};
  CHECK(oracle_critic(zero, {0.3}) == Approx(-0.3));
  sim::Observation o{0.5, 0.1, {0.02, 0.0, 0.0, 0.0, 0.0}, 0.5 / 3.5};
  CHECK(oracle_critic(o, demo::optimal_policy(o)) == 0.0);
  CHECK(oracle_critic(o, {-1.0}) <= 1.0);
}

TEST_CASE("oracle labeling of scripted logs", "[backseat]") {
  const auto t = sim::default_track();
  const auto opt = demo::record(demo::make_policy(demo::Regime::optimal), t, 120.0, 2.0, 2);
  const auto labeled = label_with_oracle(opt);
  REQUIRE(labeled.dataset.size() == opt.entries.size());
  for (const auto& s : labeled.dataset.samples) CHECK(s.f == 1.0);
  CHECK(labeled.dataset.normalizer == 0.0);

  const auto swerve = demo::record(demo::make_policy(demo::Regime::swerve_left), t, 16.0, 2.0, 2);
  const auto ls = label_with_oracle(swerve);
  bool pos = false, neg = false;
  double max_c = 0.0;
  for (const auto& s : ls.dataset.samples) {
    pos = pos || s.f > 0.0;
    neg = neg || s.f < 0.0;
    max_c = std::max(max_c, std::abs(s.c));
    CHECK(s.f == reference_feedback(s.c, s.theta, 0.1));
  }
  CHECK(pos);
  CHECK(neg);
  CHECK(max_c == 1.0);

  CHECK(label_with_oracle(demo::DemoLog{}).dataset.empty());
}

TEST_CASE("labeling normalizes over the whole batch before feedback", "[backseat]") {
  auto log = tiny_log();
  std::vector<Correction> cs = {{0.1, CorrectionSource::human, 0.0, 0},
                                {-0.4, CorrectionSource::human, 0.5, 0},
                                {0.05, CorrectionSource::human, 1.0, 0},
                                {0.2, CorrectionSource::human, 1.5, 0}};
  const auto r = label_with_corrections(log, cs);
  REQUIRE(r.dataset.size() == 4);
  CHECK(r.dropped == 0);
  CHECK(r.dataset.normalizer == 0.4);
  const std::vector<double> expect_c{0.25, -1.0, 0.125, 0.5};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(r.dataset.samples[i].c == expect_c[i]);
    CHECK(r.dataset.samples[i].f == reference_feedback(expect_c[i], 0.2, 0.1));
  }
}

TEST_CASE("human corrections are aligned, averaged and gaps counted", "[backseat]") {
  auto log = tiny_log();
  std::vector<Correction> cs = {
      {0.2, CorrectionSource::human, 0.05, 0},  {0.4, CorrectionSource::human, 0.45, 0},  // entry 0, mean 0.3
      {-0.6, CorrectionSource::human, 1.0, 0},                                               // entry 2
      {0.9, CorrectionSource::human, 1.0, 7},                                                // other episode
      {0.5, CorrectionSource::human, -0.2, 0},                                               // before the log
  };
  const auto r = label_with_corrections(log, cs);
  REQUIRE(r.dataset.size() == 2);
  CHECK(r.dropped == 2);
  CHECK(r.dataset.samples[0].t == 0.0);
  CHECK(r.dataset.samples[0].c == Approx(0.5));
  CHECK(r.dataset.samples[1].t == 1.0);
  CHECK(r.dataset.samples[1].c == -1.0);
  CHECK_THROWS_AS(label_with_corrections(log, cs, {}, true), AlignmentGap);

  const auto empty = label_with_corrections(log, {});
  CHECK(empty.dataset.empty());
  CHECK(empty.dropped == 4);
}
