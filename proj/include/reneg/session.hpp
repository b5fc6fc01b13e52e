#pragma once

// Session service core: a transport-free state machine per connection.
// The transport (server.hpp) feeds it decoded messages and clock ticks and
// writes back whatever it returns.

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "reneg/backseat.hpp"
#include "reneg/dataset.hpp"
#include "reneg/demonstrators.hpp"
#include "reneg/errors.hpp"
#include "reneg/evaluation.hpp"
#include "reneg/nnet.hpp"
#include "reneg/sim.hpp"

namespace reneg::session {

using json = nlohmann::json;

inline constexpr int kProtocolVersion = 1;

enum class Mode { drive, backseat, watch };
enum class Clock { realtime, lockstep };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::drive: return "drive";
    case Mode::backseat: return "backseat";
    case Mode::watch: return "watch";
  }
  return "?";
}

inline Mode mode_from_string(const std::string& s) {
  if (s == "drive") return Mode::drive;
  if (s == "backseat") return Mode::backseat;
  if (s == "watch") return Mode::watch;
  throw ProtocolError("unknown mode '" + s + "'");
}

// -- traces -----------------------------------------------------------------------
//
// A trace is the start pose plus the steering command applied at every tick.
// Re-simulating it reproduces every frame bit for bit.

struct Trace {
  sim::TrackSpec track = sim::default_track();
  sim::CarState start;
  double label_rate = 2.0;
  demo::Regime regime = demo::Regime::human;
  std::vector<double> steer;

  friend bool operator==(const Trace& a, const Trace& b) {
    return sim::format_track(a.track) == sim::format_track(b.track) && a.start == b.start &&
           a.label_rate == b.label_rate && a.regime == b.regime && a.steer == b.steer;
  }
};

inline json to_json(const sim::CarState& s) {
  return {{"x", s.x}, {"y", s.y}, {"heading", s.heading}, {"speed", s.speed}, {"t", s.t}, {"s_along", s.s_along}};
}

inline sim::CarState car_state_from_json(const json& j) {
  sim::CarState s;
  s.x = j.at("x").get<double>();
  s.y = j.at("y").get<double>();
  s.heading = j.at("heading").get<double>();
  s.speed = j.at("speed").get<double>();
  s.t = j.at("t").get<double>();
  s.s_along = j.at("s_along").get<double>();
  return s;
}

inline std::string serialize(const Trace& tr) {
  json j = {{"kind", "trace"},
            {"schema_version", data::kSchemaVersion},
            {"track", sim::format_track(tr.track)},
            {"start", to_json(tr.start)},
            {"label_rate", tr.label_rate},
            {"regime", demo::to_string(tr.regime)},
            {"steer", tr.steer}};
  return j.dump() + "\n";
}

inline Trace parse_trace(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(1, std::string("trace is not valid JSON: ") + e.what());
  }
  if (j.value("kind", "") != "trace") throw FormatError(1, "not a trace file");
  if (j.value("schema_version", -1) != data::kSchemaVersion) {
    throw VersionError("unsupported trace schema_version " + j.value("schema_version", json(-1)).dump());
  }
  Trace tr;
  try {
    std::istringstream track_text(j.at("track").get<std::string>());
    tr.track = sim::parse_track(track_text);
    tr.start = car_state_from_json(j.at("start"));
    tr.label_rate = j.at("label_rate").get<double>();
    tr.regime = demo::regime_from_string(j.at("regime").get<std::string>());
    tr.steer = j.at("steer").get<std::vector<double>>();
  } catch (const json::exception& e) {
    throw FormatError(1, std::string("bad trace field: ") + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(1, e.what());
  }
  return tr;
}

inline void save(const Trace& tr, const std::string& path) { data::detail::write_atomically(path, serialize(tr)); }

inline Trace load_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_trace(ss.str());
}

/// Drives a scripted regime for `duration` seconds (or until it leaves the road).
inline Trace scripted_trace(demo::Regime regime, const sim::TrackSpec& track, const sim::CarState& start,
                            double duration, const sim::SimConfig& cfg = {}) {
  const auto policy = demo::make_policy(regime);
  Trace tr;
  tr.track = track;
  tr.start = start;
  tr.regime = regime;
  sim::CarState s = start;
  constexpr double kSlack = 1e-9;
  while (s.t < duration - kSlack) {
    const double a = policy(sim::observe(s, track, cfg), s.t).steer;
    tr.steer.push_back(a);
    s = sim::step(s, {a}, track, cfg);
    if (sim::is_terminated(s, track, cfg.car)) break;
  }
  return tr;
}

// -- sessions ---------------------------------------------------------------------

struct ServiceConfig {
  std::string data_dir = ".";  // commits land here; replay sources are resolved here
  double max_duration = 3600.0;
  backseat::FeedbackParams feedback;
  sim::SimConfig sim;
};

struct CommitResult {
  std::size_t samples = 0;
  std::size_t dropped = 0;
  std::array<std::size_t, 10> histogram{};  // f over [-1, 1] in 10 bins
  std::vector<std::string> files;
};

inline std::array<std::size_t, 10> feedback_histogram(const data::Dataset& ds) {
  std::array<std::size_t, 10> h{};
  for (const auto& s : ds.samples) {
    auto bin = static_cast<long>(std::floor((s.f + 1.0) * 5.0));
    h[static_cast<std::size_t>(std::clamp(bin, 0L, 9L))]++;
  }
  return h;
}

class Session {
 public:
  /// `start` is a validated start_session message.
  Session(std::string id, const json& start, const ServiceConfig& svc) : id_(std::move(id)), svc_(svc) {
    mode_ = mode_from_string(start.value("mode", "drive"));
    const std::string clock = start.value("clock", "realtime");
    if (clock == "realtime") {
      clock_ = Clock::realtime;
    } else if (clock == "lockstep") {
      clock_ = Clock::lockstep;
    } else {
      throw ProtocolError("unknown clock '" + clock + "'");
    }
    label_rate_ = start.value("label_rate", 2.0);
    if (!(label_rate_ > 0.0)) throw ProtocolError("label_rate must be positive");
    duration_ = std::min(start.value("duration", mode_ == Mode::drive ? 600.0 : 60.0), svc_.max_duration);
    if (!(duration_ > 0.0)) throw ProtocolError("duration must be positive");

    if (mode_ == Mode::backseat && start.contains("trace")) {
      trace_ = load_trace(resolve(start.at("trace").get<std::string>()));
    } else {
      trace_.track = track_by_name(start.value("track", "default"));
      const json pose = start.value("start", json::object());
      trace_.start = sim::start_state(trace_.track, pose.value("s", 0.0), pose.value("lateral", 0.0),
                                      pose.value("heading", 0.0), svc_.sim);
      trace_.label_rate = label_rate_;
      if (mode_ == Mode::backseat) {
        const auto regime = demo::regime_from_string(start.value("regime", "optimal"));
        if (regime == demo::Regime::human) throw ProtocolError("backseat replay of a human drive needs a trace");
        trace_ = scripted_trace(regime, trace_.track, trace_.start, duration_, svc_.sim);
        trace_.label_rate = label_rate_;
      }
    }
    if (mode_ == Mode::backseat) {
      label_rate_ = trace_.label_rate;
      if (!start.contains("duration")) duration_ = static_cast<double>(trace_.steer.size()) * svc_.sim.dt + 1.0;
      if (trace_.steer.empty()) throw ProtocolError("replay source is empty");
    }
    label_every_ = std::max<std::uint64_t>(1, static_cast<std::uint64_t>(std::llround(1.0 / (label_rate_ * svc_.sim.dt))));
    if (mode_ == Mode::watch) {
      if (start.contains("params")) {
        pnet_ = std::make_shared<nn::Mlp>(nn::load(resolve(start.at("params").get<std::string>())));
        if (pnet_->input_size() != svc_.sim.observation_size()) throw ProtocolError("params do not fit observations");
        watch_policy_ = eval::pnet_policy(*pnet_);
      } else {
        const auto scripted = demo::make_policy(demo::regime_from_string(start.value("regime", "optimal")));
        watch_policy_ = [scripted, this](const sim::Observation& o) { return scripted(o, state_.t).steer; };
      }
    }
    state_ = trace_.start;
    log_.sample_rate = label_rate_;
  }

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  const std::string& id() const { return id_; }
  Mode mode() const { return mode_; }
  Clock clock() const { return clock_; }
  bool finished() const { return finished_; }
  std::uint64_t ticks() const { return tick_; }
  const sim::CarState& state() const { return state_; }
  const demo::DemoLog& log() const { return log_; }
  const Trace& trace() const { return trace_; }
  const std::vector<backseat::Correction>& corrections() const { return corrections_; }

  json describe() const {
    return {{"type", "start_session"},
            {"session", id_},
            {"mode", to_string(mode_)},
            {"clock", clock_ == Clock::realtime ? "realtime" : "lockstep"},
            {"dt", svc_.sim.dt},
            {"label_rate", label_rate_},
            {"duration", duration_},
            {"observation_size", svc_.sim.observation_size()},
            {"track", sim::format_track(trace_.track)},
            {"half_width", trace_.track.road_half_width()}};
  }

  /// Applies one client message. Inputs take effect at the next tick.
  /// Returns replies (a lockstep input also yields the frame it advanced).
  std::vector<json> handle(const json& msg) {
    const std::string type = msg.at("type").get<std::string>();
    std::vector<json> out;
    if (type == "control") {
      if (msg.contains("steer")) {
        if (mode_ != Mode::drive) throw ProtocolError("control.steer is only accepted in drive mode");
        pending_steer_ = number(msg, "steer");
      }
      if (clock_ == Clock::lockstep) push_tick(out);
    } else if (type == "correction") {
      if (mode_ != Mode::backseat) throw ProtocolError("corrections are only accepted in backseat mode");
      pending_c_ = number(msg, "c_raw");
      if (clock_ == Clock::lockstep) push_tick(out);
    } else if (type == "commit") {
      const auto r = commit(msg.value("name", ""));
      // Clients see names inside the data directory, never server paths.
      json names = json::array();
      for (const auto& f : r.files) names.push_back(std::filesystem::path(f).filename().string());
      out.push_back({{"type", "commit"},
                     {"session", id_},
                     {"samples", r.samples},
                     {"dropped", r.dropped},
                     {"histogram", r.histogram},
                     {"files", names}});
    } else {
      throw ProtocolError("unexpected message type '" + type + "' inside a session");
    }
    return out;
  }

  /// Advances one frame. Returns nothing once the session has finished.
  std::optional<json> tick() {
    if (finished_) return std::nullopt;
    const sim::Observation obs = sim::observe(state_, trace_.track, svc_.sim);
    double steer = 0.0;
    switch (mode_) {
      case Mode::drive: steer = pending_steer_; break;
      case Mode::backseat: steer = trace_.steer[tick_]; break;
      case Mode::watch: steer = watch_policy_(obs); break;
    }
    if (!std::isfinite(steer)) throw SimDiverged("non-finite steering command");
    steer = std::clamp(steer, -1.0, 1.0);

    std::optional<double> c;
    if (pending_c_) {
      c = *pending_c_;
      corrections_.push_back({*pending_c_, backseat::CorrectionSource::human, state_.t, 0});
      pending_c_.reset();
    }
    if (tick_ % label_every_ == 0) {
      log_.entries.push_back({state_.t, obs, {steer}, trace_.regime, 0, false});
    }
    if (mode_ == Mode::drive) trace_.steer.push_back(steer);

    json frame = {{"type", "frame"},
                  {"session", id_},
                  {"tick", tick_},
                  {"t", state_.t},
                  {"pose", {{"x", state_.x}, {"y", state_.y}, {"heading", state_.heading}}},
                  {"observation", obs.to_vector()},
                  {"theta", steer},
                  {"c", c ? json(*c) : json(nullptr)}};

    state_ = sim::step(state_, {steer}, trace_.track, svc_.sim);
    ++tick_;
    const bool off_road = sim::is_terminated(state_, trace_.track, svc_.sim.car);
    const bool out_of_trace = mode_ == Mode::backseat && tick_ >= trace_.steer.size();
    constexpr double kSlack = 1e-9;
    finished_ = off_road || out_of_trace || state_.t >= duration_ - kSlack;
    frame["terminated"] = off_road;
    frame["done"] = finished_;
    return frame;
  }

  CommitResult commit(const std::string& requested_name) {
    static const std::regex kName("[A-Za-z0-9_-]{1,64}");
    std::string stem = requested_name.empty() ? "session-" + id_ + "-" + std::to_string(commits_) : requested_name;
    if (!std::regex_match(stem, kName)) throw ProtocolError("commit name must match [A-Za-z0-9_-]{1,64}");
    ++commits_;
    const auto base = std::filesystem::path(svc_.data_dir);
    CommitResult r;
    data::Dataset ds;
    switch (mode_) {
      case Mode::drive: {
        // The demonstration itself, its replayable trace, and oracle labels.
        const auto log_path = (base / (stem + ".log.jsonl")).string();
        const auto trace_path = (base / (stem + ".trace.json")).string();
        data::save(log_, log_path);
        save(trace_, trace_path);
        r.files = {log_path, trace_path};
        ds = backseat::label_with_oracle(log_, svc_.feedback).dataset;
        break;
      }
      case Mode::backseat: {
        const auto labeled = backseat::label_with_corrections(log_, corrections_, svc_.feedback);
        ds = labeled.dataset;
        r.dropped = labeled.dropped;
        break;
      }
      case Mode::watch: throw ProtocolError("watch sessions have nothing to commit");
    }
    const auto ds_path = (base / (stem + ".dataset.jsonl")).string();
    data::save(ds, ds_path);
    r.files.push_back(ds_path);
    r.samples = ds.size();
    r.histogram = feedback_histogram(ds);
    return r;
  }

 private:
  static double number(const json& msg, const char* key) {
    if (!msg.contains(key) || !msg.at(key).is_number()) throw ProtocolError(std::string(key) + " must be a number");
    const double v = msg.at(key).get<double>();
    if (!std::isfinite(v)) throw ProtocolError(std::string(key) + " must be finite");
    return std::clamp(v, -1.0, 1.0);
  }

  sim::TrackSpec track_by_name(const std::string& name) const {
    if (name == "default") return sim::default_track();
    if (name == "straight") return sim::straight_track();
    return sim::load_track(resolve(name));
  }

  std::string resolve(const std::string& name) const {
    static const std::regex kSafe("[A-Za-z0-9_.-]+");
    if (!std::regex_match(name, kSafe) || name.find("..") != std::string::npos) {
      throw ProtocolError("file names must be plain names inside the data directory");
    }
    return (std::filesystem::path(svc_.data_dir) / name).string();
  }

  void push_tick(std::vector<json>& out) {
    if (auto f = tick()) out.push_back(std::move(*f));
  }

  std::string id_;
  ServiceConfig svc_;
  Mode mode_ = Mode::drive;
  Clock clock_ = Clock::realtime;
  double label_rate_ = 2.0;
  std::uint64_t label_every_ = 10;
  double duration_ = 600.0;
  Trace trace_;
  std::shared_ptr<nn::Mlp> pnet_;
  eval::PolicyFn watch_policy_;
  sim::CarState state_;
  std::uint64_t tick_ = 0;
  bool finished_ = false;
  double pending_steer_ = 0.0;
  std::optional<double> pending_c_;
  std::vector<backseat::Correction> corrections_;
  demo::DemoLog log_;
  int commits_ = 0;
};

// -- connections ------------------------------------------------------------------

/// Protocol state for one client: hello, then start_session, then session
/// traffic until bye. Any violation produces an `error` reply and closes.
class Connection {
 public:
  Connection(ServiceConfig svc, std::function<std::string()> next_id)
      : svc_(std::move(svc)), next_id_(std::move(next_id)) {}

  bool closed() const { return closed_; }
  Session* session() { return session_.get(); }
  bool ticking() const { return session_ && session_->clock() == Clock::realtime && !session_->finished(); }

  std::vector<json> receive(const json& msg) {
    if (closed_) return {};
    try {
      return dispatch(msg);
    } catch (const Error& e) {
      return fail(e.code(), e.what());
    } catch (const json::exception& e) {
      return fail("ProtocolError", e.what());
    }
  }

  /// Realtime clock pulse from the transport.
  std::vector<json> tick() {
    if (closed_ || !ticking()) return {};
    try {
      if (auto f = session_->tick()) return {std::move(*f)};
    } catch (const Error& e) {
      return fail(e.code(), e.what());
    }
    return {};
  }

  /// For transport-level failures (bad framing and the like).
  std::vector<json> fail(const std::string& code, const std::string& message) {
    closed_ = true;
    return {{{"type", "error"}, {"code", code}, {"message", message}}};
  }

 private:
  std::vector<json> dispatch(const json& msg) {
    if (!msg.is_object() || !msg.contains("type") || !msg.at("type").is_string()) {
      throw ProtocolError("every message must be an object with a string 'type'");
    }
    const std::string type = msg.at("type").get<std::string>();
    if (type == "bye") {
      closed_ = true;
      return {{{"type", "bye"}}};
    }
    if (!greeted_) {
      if (type != "hello") throw ProtocolError("expected hello, got " + type);
      const int version = msg.value("version", -1);
      if (version != kProtocolVersion) {
        throw VersionError("protocol version " + std::to_string(version) + " is not supported (server speaks " +
                           std::to_string(kProtocolVersion) + ")");
      }
      greeted_ = true;
      return {{{"type", "hello"}, {"version", kProtocolVersion}, {"server", "reneg"}}};
    }
    if (!session_) {
      if (type != "start_session") throw ProtocolError("expected start_session, got " + type);
      session_ = std::make_unique<Session>(next_id_(), msg, svc_);
      return {session_->describe()};
    }
    if (type == "hello" || type == "start_session") throw ProtocolError(type + " is not allowed inside a session");
    return session_->handle(msg);
  }

  ServiceConfig svc_;
  std::function<std::string()> next_id_;
  std::unique_ptr<Session> session_;
  bool greeted_ = false;
  bool closed_ = false;
};

// -- framing --------------------------------------------------------------------------
//
// Stream transport: "<decimal byte length>\n<json text>" per message.

inline constexpr std::size_t kMaxMessageBytes = 1 << 20;

inline std::string encode(const json& msg) {
  const std::string body = msg.dump();
  return std::to_string(body.size()) + "\n" + body;
}

class Decoder {
 public:
  /// Appends bytes and returns every complete message. Throws ProtocolError
  /// on a malformed length or body.
  std::vector<json> feed(std::string_view bytes) {
    buf_.append(bytes);
    std::vector<json> out;
    for (;;) {
      const auto nl = buf_.find('\n');
      if (nl == std::string::npos) {
        if (buf_.size() > 20) throw ProtocolError("length prefix too long");
        break;
      }
      if (nl == 0 || nl > 20 || buf_.find_first_not_of("0123456789") < nl) {
        throw ProtocolError("malformed length prefix");
      }
      const std::size_t len = std::stoull(buf_.substr(0, nl));
      if (len > kMaxMessageBytes) throw ProtocolError("message exceeds " + std::to_string(kMaxMessageBytes) + " bytes");
      if (buf_.size() < nl + 1 + len) break;
      const std::string body = buf_.substr(nl + 1, len);
      buf_.erase(0, nl + 1 + len);
      try {
        out.push_back(json::parse(body));
      } catch (const json::parse_error& e) {
        throw ProtocolError(std::string("message is not valid JSON: ") + e.what());
      }
    }
    return out;
  }

  const std::string& pending() const { return buf_; }

 private:
  std::string buf_;
};

}  // namespace reneg::session
