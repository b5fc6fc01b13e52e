#pragma once

// Deterministic 2D kinematic car-on-track simulator.
//
// Conventions used everywhere in the library:
//   * world frame is right-handed, headings are counter-clockwise from +x;
//   * positive lateral offset, positive curvature and positive steer all mean
//     "left" (counter-clockwise);
//   * mirroring reflects the world about the x-axis, which negates every
//     left/right quantity and leaves arc length and time untouched.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "reneg/errors.hpp"

namespace reneg::sim {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Wraps an angle to (-pi, pi].
inline double wrap_angle(double a) {
  a = std::remainder(a, kTwoPi);
  if (a <= -kPi) a += kTwoPi;
  return a;
}

inline double deg_to_rad(double deg) { return deg * (kPi / 180.0); }

struct Pose2 {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;

  friend bool operator==(const Pose2&, const Pose2&) = default;
};

enum class PieceKind { Straight, Arc };

struct TrackPiece {
  PieceKind kind = PieceKind::Straight;
  double length = 0.0;     // m
  double curvature = 0.0;  // 1/m, positive turns left; always 0 for straights

  static TrackPiece straight(double length) { return {PieceKind::Straight, length, 0.0}; }
  static TrackPiece arc(double length, double curvature) { return {PieceKind::Arc, length, curvature}; }

  friend bool operator==(const TrackPiece&, const TrackPiece&) = default;
};

/// Nearest-centerline-point query result.
struct Projection {
  double s = 0.0;          // arc length of the foot point, in [0, length)
  double lateral = 0.0;    // signed distance, positive = left of the tangent
  double distance = 0.0;   // unsigned distance
  double tangent = 0.0;    // centerline heading at the foot point (unwrapped)
  double curvature = 0.0;  // centerline curvature at the foot point
};

/// Closed-loop track made of straights and circular arcs chained head to tail.
class TrackSpec {
 public:
  static constexpr double kClosureTolerance = 1e-9;

  TrackSpec() = default;

  TrackSpec(std::string name, double road_half_width, std::vector<TrackPiece> pieces, Pose2 origin = {})
      : name_(std::move(name)), road_half_width_(road_half_width), pieces_(std::move(pieces)), origin_(origin) {
    if (!(road_half_width_ > 0.0) || !std::isfinite(road_half_width_)) {
      throw InvalidTrack("road half-width must be positive");
    }
    if (pieces_.empty()) throw InvalidTrack("track has no pieces");
    for (const auto& p : pieces_) {
      if (!(p.length > 0.0) || !std::isfinite(p.length) || !std::isfinite(p.curvature)) {
        throw InvalidTrack("piece length must be positive and finite");
      }
      if (p.kind == PieceKind::Straight && p.curvature != 0.0) {
        throw InvalidTrack("straight piece with non-zero curvature");
      }
    }
    build_frames();
    const Pose2 end = end_pose();
    if (std::hypot(end.x - origin_.x, end.y - origin_.y) > kClosureTolerance) {
      std::ostringstream msg;
      msg << "track '" << name_ << "' is not closed: end point misses start by "
          << std::hypot(end.x - origin_.x, end.y - origin_.y) << " m";
      throw InvalidTrack(msg.str());
    }
  }

  const std::string& name() const noexcept { return name_; }
  double road_half_width() const noexcept { return road_half_width_; }
  const std::vector<TrackPiece>& pieces() const noexcept { return pieces_; }
  const Pose2& origin() const noexcept { return origin_; }
  double length() const noexcept { return length_; }

  /// Curvature of the centerline at arc length `s` (taken modulo the lap length).
  double curvature_at(double s) const { return pieces_[piece_index(wrap_s(s))].curvature; }

  /// Centerline pose at arc length `s` (modulo the lap length).
  Pose2 pose_at(double s) const {
    s = wrap_s(s);
    const std::size_t i = piece_index(s);
    return point_on_piece(i, s - frames_[i].s0);
  }

  /// Nearest centerline point; equidistant candidates resolve to the smallest arc length.
  Projection project(double px, double py) const {
    Projection best;
    best.distance = INFINITY;
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      const double t = nearest_local(i, px, py);
      const Pose2 q = point_on_piece(i, t);
      const double dx = px - q.x;
      const double dy = py - q.y;
      const double dist = std::hypot(dx, dy);
      if (dist < best.distance) {
        const double cross = std::cos(q.heading) * dy - std::sin(q.heading) * dx;
        best.s = frames_[i].s0 + t;
        best.distance = dist;
        best.lateral = std::copysign(dist, cross);
        best.tangent = q.heading;
        best.curvature = pieces_[i].curvature;
      }
    }
    if (best.s >= length_) best.s -= length_;
    return best;
  }

  friend bool operator==(const TrackSpec& a, const TrackSpec& b) {
    return a.name_ == b.name_ && a.road_half_width_ == b.road_half_width_ && a.pieces_ == b.pieces_ &&
           a.origin_ == b.origin_;
  }

 private:
  struct Frame {
    Pose2 start;
    double s0 = 0.0;
  };

  static bool is_curved(const TrackPiece& p) { return p.curvature != 0.0; }

  void build_frames() {
    frames_.clear();
    frames_.reserve(pieces_.size());
    Pose2 pose = origin_;
    double s = 0.0;
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      frames_.push_back({pose, s});
      pose = point_on_piece(i, pieces_[i].length);
      s += pieces_[i].length;
    }
    length_ = s;
  }

  Pose2 end_pose() const { return point_on_piece(pieces_.size() - 1, pieces_.back().length); }

  double wrap_s(double s) const {
    s = std::fmod(s, length_);
    if (s < 0.0) s += length_;
    if (s >= length_) s = 0.0;
    return s;
  }

  std::size_t piece_index(double s) const {
    auto it = std::upper_bound(frames_.begin(), frames_.end(), s,
                               [](double value, const Frame& f) { return value < f.s0; });
    return static_cast<std::size_t>(std::distance(frames_.begin(), it)) - 1;
  }

  Pose2 point_on_piece(std::size_t i, double t) const {
    const Pose2& p0 = frames_[i].start;
    const TrackPiece& piece = pieces_[i];
    if (!is_curved(piece)) {
      return {p0.x + t * std::cos(p0.heading), p0.y + t * std::sin(p0.heading), p0.heading};
    }
    const double r = 1.0 / piece.curvature;
    const double cx = p0.x + r * -std::sin(p0.heading);
    const double cy = p0.y + r * std::cos(p0.heading);
    const double h = p0.heading + piece.curvature * t;
    return {cx + r * std::sin(h), cy + r * -std::cos(h), h};
  }

  double nearest_local(std::size_t i, double px, double py) const {
    const Pose2& p0 = frames_[i].start;
    const TrackPiece& piece = pieces_[i];
    if (!is_curved(piece)) {
      const double along = (px - p0.x) * std::cos(p0.heading) + (py - p0.y) * std::sin(p0.heading);
      return std::clamp(along, 0.0, piece.length);
    }
    const double r = 1.0 / piece.curvature;
    const double vx = px - (p0.x + r * -std::sin(p0.heading));
    const double vy = py - (p0.y + r * std::cos(p0.heading));
    if (vx == 0.0 && vy == 0.0) return 0.0;
    double sweep;
    if (piece.curvature > 0.0) {
      sweep = std::atan2(vx, -vy) - p0.heading;
    } else {
      sweep = p0.heading - std::atan2(-vx, vy);
    }
    sweep = std::fmod(sweep, kTwoPi);
    if (sweep < 0.0) sweep += kTwoPi;
    const double t = sweep / std::abs(piece.curvature);
    if (t <= piece.length) return t;
    // Outside the arc's angular range: the nearer endpoint wins, start on ties.
    const Pose2 a = point_on_piece(i, 0.0);
    const Pose2 b = point_on_piece(i, piece.length);
    const double da = std::hypot(px - a.x, py - a.y);
    const double db = std::hypot(px - b.x, py - b.y);
    return db < da ? piece.length : 0.0;
  }

  std::string name_;
  double road_half_width_ = 0.0;
  std::vector<TrackPiece> pieces_;
  Pose2 origin_;
  std::vector<Frame> frames_;
  double length_ = 0.0;
};

struct CarGeometry {
  double half_width = 0.9;   // m, lateral half-distance between wheel contact points
  double half_length = 2.1;  // m, longitudinal half-distance between wheel contact points
};

/// Vehicle and integration parameters.
struct SimConfig {
  double speed = 8.0;          // m/s, constant per episode
  double wheelbase = 2.5;      // m
  double dt = 0.05;            // s
  double theta_max_deg = 50.0; // physical wheel angle at |steer| = 1
  CarGeometry car;
  std::vector<double> lookahead = {2.0, 5.0, 10.0, 20.0, 40.0};  // m

  double theta_max_rad() const { return deg_to_rad(theta_max_deg); }
  std::size_t observation_size() const { return lookahead.size() + 3; }
};

struct CarState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;  // (-pi, pi]
  double speed = 8.0;
  double t = 0.0;
  double s_along = 0.0;

  friend bool operator==(const CarState&, const CarState&) = default;
};

/// Normalized steering command in [-1, 1]; physical wheel angle is steer * theta_max.
struct Action {
  double steer = 0.0;

  friend bool operator==(const Action&, const Action&) = default;
};

struct Observation {
  double lateral_offset = 0.0;  // m, positive = left
  double heading_error = 0.0;   // rad, relative to the centerline tangent
  std::vector<double> curvature_ahead;
  double normalized_offset = 0.0;  // lateral_offset / road_half_width

  /// Flat layout: [offset, heading_error, curvature_ahead..., normalized_offset].
  std::vector<double> to_vector() const {
    std::vector<double> v;
    v.reserve(curvature_ahead.size() + 3);
    v.push_back(lateral_offset);
    v.push_back(heading_error);
    v.insert(v.end(), curvature_ahead.begin(), curvature_ahead.end());
    v.push_back(normalized_offset);
    return v;
  }

  static Observation from_vector(const std::vector<double>& v) {
    if (v.size() < 3) throw ShapeMismatch("observation vector needs at least 3 entries");
    Observation o;
    o.lateral_offset = v.front();
    o.heading_error = v[1];
    o.curvature_ahead.assign(v.begin() + 2, v.end() - 1);
    o.normalized_offset = v.back();
    return o;
  }

  std::size_t size() const { return curvature_ahead.size() + 3; }

  friend bool operator==(const Observation&, const Observation&) = default;
};

inline CarState start_state(const TrackSpec& track, double s, double lateral, double heading_offset,
                            const SimConfig& cfg) {
  const Pose2 c = track.pose_at(s);
  CarState st;
  st.x = c.x - lateral * std::sin(c.heading);
  st.y = c.y + lateral * std::cos(c.heading);
  st.heading = wrap_angle(c.heading + heading_offset);
  st.speed = cfg.speed;
  st.t = 0.0;
  st.s_along = track.project(st.x, st.y).s;
  return st;
}

/// Advances the kinematic bicycle by `dt` holding the steering command.
/// The constant-yaw-rate motion is integrated exactly, so a held command
/// traces a circle of radius wheelbase / tan(steer * theta_max).
inline CarState step(const CarState& state, Action action, const TrackSpec& track, const SimConfig& cfg,
                     double dt) {
  const double steer = std::clamp(action.steer, -1.0, 1.0);
  const double yaw_rate = state.speed / cfg.wheelbase * std::tan(steer * cfg.theta_max_rad());
  const double half_turn = 0.5 * yaw_rate * dt;
  const double sinc = half_turn == 0.0 ? 1.0 : std::sin(half_turn) / half_turn;
  const double chord = state.speed * dt * sinc;
  const double mid_heading = state.heading + half_turn;

  CarState next = state;
  next.x = state.x + chord * std::cos(mid_heading);
  next.y = state.y + chord * std::sin(mid_heading);
  next.heading = wrap_angle(state.heading + yaw_rate * dt);
  next.t = state.t + dt;
  next.s_along = track.project(next.x, next.y).s;
  return next;
}

inline CarState step(const CarState& state, Action action, const TrackSpec& track, const SimConfig& cfg) {
  return step(state, action, track, cfg, cfg.dt);
}

inline Observation observe(const CarState& state, const TrackSpec& track, const SimConfig& cfg) {
  const Projection p = track.project(state.x, state.y);
  Observation o;
  o.lateral_offset = p.lateral;
  o.heading_error = wrap_angle(state.heading - p.tangent);
  o.curvature_ahead.reserve(cfg.lookahead.size());
  for (double d : cfg.lookahead) o.curvature_ahead.push_back(track.curvature_at(p.s + d));
  o.normalized_offset = p.lateral / track.road_half_width();
  return o;
}

/// Wheel contact points (front-left, front-right, rear-left, rear-right).
inline std::array<std::pair<double, double>, 4> wheel_points(const CarState& state, const CarGeometry& car) {
  const double c = std::cos(state.heading);
  const double s = std::sin(state.heading);
  std::array<std::pair<double, double>, 4> out;
  const double longi[4] = {car.half_length, car.half_length, -car.half_length, -car.half_length};
  const double lat[4] = {car.half_width, -car.half_width, car.half_width, -car.half_width};
  for (int i = 0; i < 4; ++i) {
    out[i] = {state.x + longi[i] * c - lat[i] * s, state.y + longi[i] * s + lat[i] * c};
  }
  return out;
}

/// Sub-nanometre slack so a wheel placed on the edge by construction stays on-road.
inline constexpr double kEdgeTolerance = 1e-9;

/// True iff every wheel contact point is strictly outside the road surface.
/// The road edge itself counts as road.
inline bool is_terminated(const CarState& state, const TrackSpec& track, const CarGeometry& car) {
  for (const auto& [wx, wy] : wheel_points(state, car)) {
    if (track.project(wx, wy).distance <= track.road_half_width() + kEdgeTolerance) return false;
  }
  return true;
}

// -- mirroring --------------------------------------------------------------

inline Observation mirror(const Observation& o) {
  Observation m;
  m.lateral_offset = -o.lateral_offset;
  m.heading_error = -o.heading_error;
  m.curvature_ahead.reserve(o.curvature_ahead.size());
  for (double k : o.curvature_ahead) m.curvature_ahead.push_back(-k);
  m.normalized_offset = -o.normalized_offset;
  return m;
}

inline CarState mirror(const CarState& s) {
  CarState m = s;
  m.y = -s.y;
  m.heading = wrap_angle(-s.heading);
  return m;
}

inline Pose2 mirror(const Pose2& p) { return {p.x, -p.y, -p.heading}; }

inline TrackSpec mirror(const TrackSpec& t) {
  std::vector<TrackPiece> pieces = t.pieces();
  for (auto& p : pieces) {
    if (p.kind == PieceKind::Arc) p.curvature = -p.curvature;
  }
  return TrackSpec(t.name(), t.road_half_width(), std::move(pieces), mirror(t.origin()));
}

inline Action mirror(Action a) { return {-a.steer}; }

// -- default course -----------------------------------------------------------

/// Closed loop (~717 m) with straights, gentle arcs (|k| <= 0.02), an S-bend
/// and one tight arc (k = 0.05).
inline TrackSpec default_track() {
  constexpr double kGentle = 0.02;
  constexpr double kTight = 0.05;
  constexpr double kBend = 0.01;
  constexpr double kBendAngle = 0.3;
  const double quarter = kPi / 2.0;
  const double bend_r = 1.0 / kBend;
  const double bend_along = 2.0 * bend_r * std::sin(kBendAngle);
  const double bend_shift = 2.0 * bend_r * (1.0 - std::cos(kBendAngle));
  const double r_gentle = 1.0 / kGentle;
  const double r_tight = 1.0 / kTight;

  const double east = 100.0;
  const double north_a = 10.0;
  const double north_b = 60.0;
  const double west = east + r_gentle - bend_shift - r_tight - r_gentle + r_gentle;
  const double south = r_gentle + north_a + bend_along + north_b + r_tight - r_gentle - r_gentle;

  std::vector<TrackPiece> pieces = {
      TrackPiece::straight(east),
      TrackPiece::arc(quarter * r_gentle, kGentle),
      TrackPiece::straight(north_a),
      TrackPiece::arc(kBendAngle * bend_r, kBend),
      TrackPiece::arc(kBendAngle * bend_r, -kBend),
      TrackPiece::straight(north_b),
      TrackPiece::arc(quarter * r_tight, kTight),
      TrackPiece::straight(west),
      TrackPiece::arc(quarter * r_gentle, kGentle),
      TrackPiece::straight(south),
      TrackPiece::arc(quarter * r_gentle, kGentle),
  };
  return TrackSpec("default", 3.5, std::move(pieces));
}

/// Long straight used by unit tests: a 2 km stadium whose straights dominate.
inline TrackSpec straight_track(double straight_length = 1000.0, double half_width = 3.5) {
  const double r = 100.0;
  std::vector<TrackPiece> pieces = {
      TrackPiece::straight(straight_length),
      TrackPiece::arc(kPi * r, 1.0 / r),
      TrackPiece::straight(straight_length),
      TrackPiece::arc(kPi * r, 1.0 / r),
  };
  return TrackSpec("straight", half_width, std::move(pieces));
}

// -- track files ----------------------------------------------------------------
//
//   # comment
//   NAME <identifier>                 (optional)
//   HALFWIDTH <m>                     (required, once)
//   ORIGIN <x> <y> <heading_rad>      (optional, defaults to 0 0 0)
//   STRAIGHT <length_m>
//   ARC <length_m> <curvature_per_m>

inline TrackSpec parse_track(std::istream& in, const std::string& default_name = "track") {
  std::string name = default_name;
  double half_width = -1.0;
  Pose2 origin;
  std::vector<TrackPiece> pieces;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string keyword;
    if (!(ls >> keyword)) continue;
    auto read = [&](double& v) {
      if (!(ls >> v)) throw FormatError(line_no, "expected a number after " + keyword);
    };
    if (keyword == "NAME") {
      if (!(ls >> name)) throw FormatError(line_no, "NAME needs an identifier");
    } else if (keyword == "HALFWIDTH") {
      read(half_width);
    } else if (keyword == "ORIGIN") {
      read(origin.x);
      read(origin.y);
      read(origin.heading);
    } else if (keyword == "STRAIGHT") {
      double len;
      read(len);
      pieces.push_back(TrackPiece::straight(len));
    } else if (keyword == "ARC") {
      double len, k;
      read(len);
      read(k);
      pieces.push_back(TrackPiece::arc(len, k));
    } else {
      throw FormatError(line_no, "unknown keyword '" + keyword + "'");
    }
    std::string extra;
    if (ls >> extra) throw FormatError(line_no, "trailing token '" + extra + "'");
  }
  if (half_width < 0.0) throw FormatError(line_no, "missing HALFWIDTH");
  return TrackSpec(name, half_width, std::move(pieces), origin);
}

inline TrackSpec load_track(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open track file " + path);
  return parse_track(in);
}

inline std::string format_track(const TrackSpec& t) {
  char buf[128];
  std::string out;
  out += "NAME " + t.name() + "\n";
  std::snprintf(buf, sizeof buf, "HALFWIDTH %.17g\n", t.road_half_width());
  out += buf;
  if (!(t.origin() == Pose2{})) {
    std::snprintf(buf, sizeof buf, "ORIGIN %.17g %.17g %.17g\n", t.origin().x, t.origin().y, t.origin().heading);
    out += buf;
  }
  for (const auto& p : t.pieces()) {
    if (p.kind == PieceKind::Straight) {
      std::snprintf(buf, sizeof buf, "STRAIGHT %.17g\n", p.length);
    } else {
      std::snprintf(buf, sizeof buf, "ARC %.17g %.17g\n", p.length, p.curvature);
    }
    out += buf;
  }
  return out;
}

inline void save_track(const TrackSpec& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write track file " + path);
  out << format_track(t);
}

}  // namespace reneg::sim
