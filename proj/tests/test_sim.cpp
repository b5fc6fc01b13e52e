#include <catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "reneg/sim.hpp"

using namespace reneg;
using namespace reneg::sim;
using Catch::Approx;

namespace {

CarState on_straight(const TrackSpec& t, double lateral = 0.0, double heading = 0.0) {
  return start_state(t, 100.0, lateral, heading, SimConfig{});
}

}  // namespace

TEST_CASE("track closure and validation", "[sim]") {
  REQUIRE_NOTHROW(default_track());
  REQUIRE_THROWS_AS(TrackSpec("open", 3.5, {TrackPiece::straight(10.0)}), InvalidTrack);
  REQUIRE_THROWS_AS(TrackSpec("bad", 0.0, straight_track().pieces()), InvalidTrack);
  REQUIRE_THROWS_AS(TrackSpec("bad", 3.5, {TrackPiece::straight(-1.0)}), InvalidTrack);

  const auto t = default_track();
  CHECK(t.length() >= 400.0);
  int tight = 0;
  for (const auto& p : t.pieces()) {
    if (std::abs(p.curvature) > 0.02) {
      CHECK(std::abs(p.curvature) == Approx(0.05));
      ++tight;
    }
  }
  CHECK(tight == 1);
  CHECK(t.road_half_width() == 3.5);
}

TEST_CASE("zero steer on a straight keeps offset and heading", "[sim]") {
  const auto t = straight_track();
  SimConfig cfg;
  for (double lat : {0.0, 1.0, -2.0}) {
    CarState s = on_straight(t, lat);
    const auto o0 = observe(s, t, cfg);
    for (int i = 0; i < 100; ++i) s = step(s, {0.0}, t, cfg);
    const auto o1 = observe(s, t, cfg);
    CHECK(o1.lateral_offset == Approx(o0.lateral_offset).margin(1e-12));
    CHECK(o1.heading_error == 0.0);
    CHECK(s.t == Approx(5.0));
  }
}

TEST_CASE("held full lock traces the bicycle turning circle", "[sim]") {
  const auto t = straight_track();
  SimConfig cfg;
  const double radius = 2.0977490779431998;  // wheelbase / tan(50 deg)
  CarState s = on_straight(t);
  // Centre lies one radius to the left of the initial heading.
  const double cx = s.x - radius * std::sin(s.heading);
  const double cy = s.y + radius * std::cos(s.heading);
  const double period = 2.0 * kPi * radius / cfg.speed;
  double worst = 0.0;
  while (s.t < period) {
    s = step(s, {1.0}, t, cfg);
    worst = std::max(worst, std::abs(std::hypot(s.x - cx, s.y - cy) - radius));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("step is mirror symmetric", "[sim]") {
  const auto t = default_track();
  const auto m = mirror(t);
  SimConfig cfg;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int k = 0; k < 50; ++k) {
    const double s0 = (u(rng) + 1.0) * 300.0;
    const CarState a = start_state(t, s0, u(rng), 0.1 * u(rng), cfg);
    const CarState b = mirror(a);
    const double steer = u(rng);
    const CarState na = step(a, {steer}, t, cfg);
    const CarState nb = step(b, {-steer}, m, cfg);
    CHECK(nb.x == na.x);
    CHECK(nb.y == -na.y);
    CHECK(nb.heading == Approx(-na.heading).margin(1e-15));
  }
}

TEST_CASE("observation geometry", "[sim]") {
  const auto t = straight_track();
  SimConfig cfg;
  const auto zero = observe(on_straight(t), t, cfg);
  CHECK(zero.lateral_offset == 0.0);
  CHECK(zero.heading_error == 0.0);
  for (double k : zero.curvature_ahead) CHECK(k == 0.0);
  CHECK(zero.to_vector().size() == cfg.observation_size());

  const auto left = observe(on_straight(t, 1.0), t, cfg);
  CHECK(left.lateral_offset == Approx(1.0).margin(1e-12));
  CHECK(left.heading_error == 0.0);
  CHECK(left.normalized_offset == Approx(1.0 / 3.5));
  for (double k : left.curvature_ahead) CHECK(k == 0.0);

  // Lookahead reaches into the arc at the end of the straight.
  const auto near_end = observe(start_state(t, 985.0, 0.0, 0.0, cfg), t, cfg);
  CHECK(near_end.curvature_ahead[0] == 0.0);
  CHECK(near_end.curvature_ahead[2] == 0.0);
  CHECK(near_end.curvature_ahead[3] == Approx(0.01));
  CHECK(near_end.curvature_ahead[4] == Approx(0.01));
}

TEST_CASE("observation round trips through the flat vector", "[sim]") {
  Observation o{0.3, -0.1, {0.0, 0.01, 0.02, -0.05, 0.0}, 0.3 / 3.5};
  CHECK(Observation::from_vector(o.to_vector()) == o);
  CHECK_THROWS_AS(Observation::from_vector({1.0, 2.0}), ShapeMismatch);
}

TEST_CASE("observe commutes with mirroring", "[sim]") {
  const auto t = default_track();
  const auto m = mirror(t);
  SimConfig cfg;
  for (double s0 : {5.0, 150.0, 300.0, 420.0, 600.0}) {
    const CarState a = start_state(t, s0, 0.7, 0.05, cfg);
    const auto oa = observe(a, t, cfg);
    const auto ob = observe(mirror(a), m, cfg);
    const auto ma = mirror(oa);
    CHECK(ob.lateral_offset == Approx(ma.lateral_offset).margin(1e-12));
    CHECK(ob.heading_error == Approx(ma.heading_error).margin(1e-12));
    for (std::size_t i = 0; i < ob.curvature_ahead.size(); ++i) {
      CHECK(ob.curvature_ahead[i] == ma.curvature_ahead[i]);
    }
  }
}

TEST_CASE("observe is invariant to rigid motion of track and car", "[sim]") {
  const auto t = default_track();
  const Pose2 origin{40.0, -12.0, 0.8};
  const TrackSpec moved("moved", t.road_half_width(), t.pieces(), origin);
  SimConfig cfg;
  const double c = std::cos(origin.heading), s = std::sin(origin.heading);
  for (double s0 : {10.0, 250.0, 400.0}) {
    const CarState a = start_state(t, s0, -0.8, 0.07, cfg);
    CarState b = a;
    b.x = origin.x + c * a.x - s * a.y;
    b.y = origin.y + s * a.x + c * a.y;
    b.heading = wrap_angle(a.heading + origin.heading);
    const auto oa = observe(a, t, cfg);
    const auto ob = observe(b, moved, cfg);
    CHECK(ob.lateral_offset == Approx(oa.lateral_offset).margin(1e-9));
    CHECK(ob.heading_error == Approx(oa.heading_error).margin(1e-9));
    CHECK(ob.curvature_ahead == oa.curvature_ahead);
  }
}

TEST_CASE("termination requires all four wheels off the road", "[sim]") {
  const auto t = straight_track();
  const CarGeometry car;
  CHECK_FALSE(is_terminated(on_straight(t), t, car));
  // Inner wheels exactly on the edge.
  CHECK_FALSE(is_terminated(on_straight(t, 3.5 + car.half_width), t, car));
  CHECK_FALSE(is_terminated(on_straight(t, -(3.5 + car.half_width)), t, car));
  CHECK(is_terminated(on_straight(t, 3.5 + car.half_width + 0.01), t, car));
  CHECK(is_terminated(on_straight(t, -(3.5 + car.half_width + 0.01)), t, car));
  // Three wheels off, one on.
  CHECK_FALSE(is_terminated(on_straight(t, 3.5 + car.half_width - 0.01), t, car));
}

TEST_CASE("termination is monotone when driving straight off the road", "[sim]") {
  const auto t = straight_track();
  SimConfig cfg;
  CarState s = on_straight(t, 0.0, 0.3);
  bool seen = false;
  for (int i = 0; i < 200; ++i) {
    s = step(s, {0.0}, t, cfg);
    const bool term = is_terminated(s, t, cfg.car);
    if (seen) CHECK(term);
    seen = seen || term;
  }
  CHECK(seen);
}

TEST_CASE("mirror is an exact involution", "[sim]") {
  Observation o{1.0, 0.2, {0.01, 0.0, -0.02, 0.05, 0.0}, 1.0 / 3.5};
  const auto m = mirror(o);
  CHECK(m.lateral_offset == -1.0);
  CHECK(m.heading_error == -0.2);
  CHECK(mirror(m) == o);
  CHECK(mirror(Observation{0.0, 0.0, {0.0, 0.0}, 0.0}).lateral_offset == 0.0);

  const auto t = default_track();
  const CarState s = start_state(t, 123.0, 0.4, -0.03, SimConfig{});
  CHECK(mirror(mirror(s)) == s);
  const auto mt = mirror(mirror(t));
  CHECK(mt.pieces() == t.pieces());
}

TEST_CASE("episodes are deterministic and mirror symmetric", "[sim]") {
  const auto t = default_track();
  const auto m = mirror(t);
  SimConfig cfg;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  std::vector<double> actions(400);
  for (double& a : actions) a = u(rng);

  auto run = [&](const TrackSpec& track, double sign) {
    CarState s = start_state(track, 50.0, 0.0, 0.0, cfg);
    std::vector<CarState> out{s};
    for (double a : actions) out.push_back(s = step(s, {sign * a}, track, cfg));
    return out;
  };
  const auto a = run(t, 1.0);
  CHECK(run(t, 1.0) == a);
  const auto b = run(m, -1.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(b[i].x == Approx(a[i].x).margin(1e-9));
    CHECK(b[i].y == Approx(-a[i].y).margin(1e-9));
    CHECK(b[i].heading == Approx(-a[i].heading).margin(1e-9));
  }
}

TEST_CASE("projection picks the nearest point and breaks ties by arc length", "[sim]") {
  const auto t = straight_track(1000.0, 3.5);
  // Centre of the first semicircle is equidistant from the whole arc.
  const Pose2 arc_start = t.pose_at(1000.0);
  const double r = 100.0;
  const auto p = t.project(arc_start.x, arc_start.y + r);
  CHECK(p.s == Approx(1000.0));
  CHECK(p.distance == Approx(r));

  const auto q = t.project(500.0, 2.0);
  CHECK(q.s == Approx(500.0));
  CHECK(q.lateral == Approx(2.0));
  const auto w = t.project(500.0, -2.0);
  CHECK(w.lateral == Approx(-2.0));
}

TEST_CASE("track files round trip and report bad lines", "[sim]") {
  const auto t = default_track();
  std::istringstream in(format_track(t));
  const auto back = parse_track(in);
  CHECK(back.pieces() == t.pieces());
  CHECK(back.road_half_width() == t.road_half_width());
  CHECK(back.name() == "default");

  std::istringstream bad("HALFWIDTH 3.5\nSTRAIGHT 10\nCURVE 3 4\n");
  try {
    parse_track(bad);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.line() == 3);
  }
  std::istringstream no_width("# nothing\nSTRAIGHT 10\n");
  CHECK_THROWS_AS(parse_track(no_width), FormatError);
  std::istringstream open("HALFWIDTH 3\nSTRAIGHT 10\n");
  CHECK_THROWS_AS(parse_track(open), InvalidTrack);
}

TEST_CASE("the shipped default track file is the built-in course", "[sim]") {
  const auto t = load_track(std::string(RENEG_SOURCE_DIR) + "/tracks/default.track");
  CHECK(t.pieces() == default_track().pieces());
  CHECK(t.road_half_width() == default_track().road_half_width());
  CHECK(t.name() == "default");
}
