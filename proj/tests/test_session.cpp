#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "reneg/server.hpp"

using namespace reneg;
using namespace reneg::session;
using Catch::Approx;

namespace {

std::string fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("reneg_session_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

ServiceConfig service(const std::string& dir) {
  ServiceConfig s;
  s.data_dir = dir;
  return s;
}

json start_msg(const std::string& mode, json extra = json::object()) {
  json m = {{"type", "start_session"}, {"mode", mode}, {"clock", "lockstep"}};
  m.update(extra);
  return m;
}

json control(double steer) { return {{"type", "control"}, {"steer", steer}}; }
json correction(double c) { return {{"type", "correction"}, {"c_raw", c}}; }

// The parts of a frame that must survive replay unchanged.
json view(const json& frame) {
  return {frame.at("t"), frame.at("pose"), frame.at("observation"), frame.at("theta")};
}

double wavy(std::size_t k) { return 0.02 * std::sin(0.05 * static_cast<double>(k)); }

// Lane keeping from the previous frame plus a wobble, so long drives stay on the road.
double steer_from(const json& prev, std::size_t k) {
  if (prev.is_null()) return wavy(k);
  const auto& o = prev.at("observation");
  return wavy(k) - 0.1 * o[0].get<double>() - 0.8 * o[1].get<double>() + std::atan(2.5 * o[2].get<double>());
}

// Drives `n` lockstep ticks and returns every frame.
std::vector<json> drive_frames(Session& s, std::size_t n, double bias = 0.0) {
  std::vector<json> frames;
  json prev;
  for (std::size_t k = 0; k < n; ++k) {
    prev = s.handle(control(bias + steer_from(prev, k))).at(0);
    frames.push_back(prev);
  }
  return frames;
}

}  // namespace

TEST_CASE("drive straight with zero steer keeps the offset at zero", "[session]") {
  const auto dir = fresh_dir("straight");
  Session s("1", start_msg("drive", {{"track", "straight"}, {"start", {{"s", 10.0}}}}), service(dir));
  for (int i = 0; i < 400; ++i) {
    const auto out = s.handle(control(0.0));
    REQUIRE(out.size() == 1);
    CHECK(out[0]["observation"][0].get<double>() == Approx(0.0).margin(1e-12));
    CHECK(out[0]["tick"] == i);
  }
  CHECK_FALSE(s.finished());
  CHECK(s.log().entries.size() == 40);
}

TEST_CASE("inputs apply at the next tick", "[session]") {
  Session s("1", start_msg("drive", {{"clock", "realtime"}}), service(fresh_dir("timing")));
  CHECK(s.handle(control(0.5)).empty());  // realtime: no frame until the clock ticks
  CHECK(s.handle(control(-0.25)).empty());
  const auto f = s.tick();
  REQUIRE(f);
  CHECK((*f)["theta"] == -0.25);
  CHECK((*f)["t"] == 0.0);
  CHECK((*f)["tick"] == 0);
  CHECK(s.handle(json{{"type", "control"}}).empty());  // clock pulse keeps the held steer
  CHECK((*s.tick())["theta"] == -0.25);
}

TEST_CASE("backseat replay of the optimal driver with zero corrections", "[session]") {
  const auto dir = fresh_dir("backseat");
  Session s("7", start_msg("backseat", {{"regime", "optimal"}, {"duration", 30.0}}), service(dir));
  std::size_t frames = 0;
  while (!s.finished()) {
    const auto out = s.handle(correction(0.0));
    REQUIRE(out.size() == 1);
    ++frames;
  }
  CHECK(frames == 600);
  const auto reply = s.handle({{"type", "commit"}, {"name", "opt"}});
  REQUIRE(reply.size() == 1);
  CHECK(reply[0]["samples"] == 60);
  CHECK(reply[0]["dropped"] == 0);
  CHECK(reply[0]["histogram"][9] == 60);
  const auto ds = data::load(dir + "/opt.dataset.jsonl");
  REQUIRE(ds.size() == 60);
  for (const auto& smp : ds.samples) CHECK(smp.f == 1.0);
  CHECK(ds.samples.front().regime == demo::Regime::optimal);
}

TEST_CASE("backseat corrections are averaged per labeling interval", "[session]") {
  const auto dir = fresh_dir("average");
  Session s("1", start_msg("backseat", {{"regime", "swerve_left"}, {"duration", 5.0}}), service(dir));
  std::size_t k = 0;
  while (!s.finished()) {
    // First interval: 0.2 then 0.4, second interval: nothing, then -0.6 throughout.
    if (k < 10) {
      s.handle(correction(k < 5 ? 0.2 : 0.4));
    } else if (k < 20) {
      s.handle(json{{"type", "control"}});
    } else {
      s.handle(correction(-0.6));
    }
    ++k;
  }
  const auto r = s.commit("avg");
  CHECK(r.samples == 9);
  CHECK(r.dropped == 1);
  const auto ds = data::load(dir + "/avg.dataset.jsonl");
  CHECK(ds.normalizer == Approx(0.6));
  CHECK(ds.samples[0].c == Approx(0.5));
  CHECK(ds.samples[1].c == Approx(-1.0));
  CHECK(ds.samples[1].t == Approx(1.0));
}

TEST_CASE("empty commits", "[session]") {
  const auto dir = fresh_dir("empty");
  Session drive("1", start_msg("drive"), service(dir));
  CHECK(drive.commit("nothing").samples == 0);
  CHECK(data::load(dir + "/nothing.dataset.jsonl").empty());
  Session back("2", start_msg("backseat", {{"duration", 2.0}}), service(dir));
  while (!back.finished()) back.tick();
  const auto r = back.commit("");
  CHECK(r.samples == 0);
  CHECK(r.dropped == 4);
  CHECK(std::filesystem::exists(dir + "/session-2-0.dataset.jsonl"));
}

TEST_CASE("a recorded drive replays bit-exactly as a backseat session", "[session]") {
  const auto dir = fresh_dir("replay");
  Session drive("1", start_msg("drive", {{"start", {{"s", 120.0}, {"lateral", 0.4}, {"heading", -0.03}}}}),
                service(dir));
  std::vector<json> recorded;
  for (const auto& f : drive_frames(drive, 600)) recorded.push_back(view(f));
  const auto committed = drive.commit("lap");
  CHECK(committed.samples == 60);
  CHECK(committed.files.size() == 3);
  CHECK(load_trace(dir + "/lap.trace.json") == drive.trace());
  CHECK(data::load_log(dir + "/lap.log.jsonl") == drive.log());

  Session replay("2", start_msg("backseat", {{"trace", "lap.trace.json"}}), service(dir));
  std::vector<json> replayed;
  while (!replay.finished()) replayed.push_back(view(replay.tick().value()));
  REQUIRE(replayed.size() == recorded.size());
  for (std::size_t k = 0; k < recorded.size(); ++k) {
    CHECK(replayed[k].dump() == recorded[k].dump());
  }
  CHECK(replay.log().entries.size() == drive.log().entries.size());
  for (std::size_t i = 0; i < replay.log().entries.size(); ++i) {
    CHECK(replay.log().entries[i].observation == drive.log().entries[i].observation);
  }

  // The committed drive also carries oracle labels that reload losslessly.
  const auto ds = data::load(dir + "/lap.dataset.jsonl");
  CHECK(ds.size() == 60);
  CHECK(ds == backseat::label_with_oracle(drive.log()).dataset);
}

TEST_CASE("sessions are isolated", "[session]") {
  const auto dir = fresh_dir("isolated");
  auto run_alone = [&](const json& start, double base) {
    Session s("x", start, service(dir));
    std::vector<json> out;
    for (const auto& f : drive_frames(s, 200, base)) out.push_back(view(f));
    return out;
  };
  const auto a_start = start_msg("drive", {{"start", {{"s", 10.0}}}});
  const auto b_start = start_msg("drive", {{"start", {{"s", 300.0}, {"lateral", -0.5}}}});
  const auto a_alone = run_alone(a_start, 0.01);
  const auto b_alone = run_alone(b_start, -0.01);

  Session a("a", a_start, service(dir)), b("b", b_start, service(dir));
  json pa, pb;
  for (std::size_t k = 0; k < 200; ++k) {
    pa = a.handle(control(0.01 + steer_from(pa, k))).at(0);
    pb = b.handle(control(-0.01 + steer_from(pb, k))).at(0);
    CHECK(view(pa).dump() == a_alone[k].dump());
    CHECK(view(pb).dump() == b_alone[k].dump());
  }
}

TEST_CASE("watch mode drives a policy", "[session]") {
  const auto dir = fresh_dir("watch");
  Session scripted("1", start_msg("watch", {{"duration", 3.0}}), service(dir));
  std::size_t n = 0;
  while (scripted.tick()) ++n;
  CHECK(n == 60);
  CHECK_THROWS_AS(scripted.commit("x"), ProtocolError);

  nn::save(nn::init_pnet(8, 3, {6}), dir + "/p.params");
  Session net("2", start_msg("watch", {{"params", "p.params"}, {"duration", 1.0}}), service(dir));
  const auto f = net.handle(json{{"type", "control"}});
  REQUIRE(f.size() == 1);
  CHECK(std::abs(f[0]["theta"].get<double>()) < 1.0);
}

TEST_CASE("protocol state machine", "[session]") {
  const auto dir = fresh_dir("protocol");
  std::uint64_t ids = 0;
  auto conn = [&] { return Connection(service(dir), [&] { return std::to_string(++ids); }); };
  auto err_code = [](const std::vector<json>& out) {
    REQUIRE(out.size() == 1);
    CHECK(out[0]["type"] == "error");
    return out[0]["code"].get<std::string>();
  };

  {
    auto c = conn();
    const auto hello = c.receive({{"type", "hello"}, {"version", 1}, {"client", "test"}});
    CHECK(hello.at(0) == json{{"type", "hello"}, {"version", 1}, {"server", "reneg"}});
    const auto started = c.receive(start_msg("drive", {{"track", "straight"}}));
    CHECK(started.at(0)["type"] == "start_session");
    CHECK(started.at(0)["session"] == "1");
    CHECK(started.at(0)["observation_size"] == 8);
    CHECK(c.receive(control(0.0)).at(0)["type"] == "frame");
    CHECK(c.receive({{"type", "bye"}}).at(0)["type"] == "bye");
    CHECK(c.closed());
    CHECK(c.receive(control(0.0)).empty());
  }
  {
    auto c = conn();
    CHECK(err_code(c.receive(control(0.0))) == "ProtocolError");
    CHECK(c.closed());
  }
  {
    auto c = conn();
    CHECK(err_code(c.receive({{"type", "hello"}, {"version", 2}})) == "VersionError");
  }
  {
    auto c = conn();
    c.receive({{"type", "hello"}, {"version", 1}});
    CHECK(err_code(c.receive(control(0.0))) == "ProtocolError");
  }
  auto in_session = [&](const json& start, const json& msg) {
    auto c = conn();
    c.receive({{"type", "hello"}, {"version", 1}});
    auto s = c.receive(start);
    if (s.at(0)["type"] == "error") return s;
    return c.receive(msg);
  };
  CHECK(err_code(in_session(start_msg("drive"), correction(0.1))) == "ProtocolError");
  CHECK(err_code(in_session(start_msg("backseat"), control(0.1))) == "ProtocolError");
  CHECK(err_code(in_session(start_msg("drive"), json{{"type", "control"}, {"steer", "left"}})) == "ProtocolError");
  CHECK(err_code(in_session(start_msg("drive"), json{{"type", "teleport"}})) == "ProtocolError");
  CHECK(err_code(in_session(start_msg("drive"), json{{"type", "hello"}, {"version", 1}})) == "ProtocolError");
  CHECK(err_code(in_session(start_msg("drive"), json{{"type", "commit"}, {"name", "../escape"}})) ==
        "ProtocolError");
  CHECK(err_code(in_session(start_msg("watch"), json{{"type", "commit"}})) == "ProtocolError");
  CHECK(err_code(in_session(start_msg("flying"), control(0.0))) == "ProtocolError");
  CHECK(err_code(in_session(start_msg("backseat", {{"trace", "../../etc/passwd"}}), control(0.0))) ==
        "ProtocolError");
  CHECK(err_code(in_session(start_msg("backseat", {{"trace", "missing.trace.json"}}), control(0.0))) == "IoError");
  CHECK(err_code(conn().receive(json::array({1, 2}))) == "ProtocolError");
}

TEST_CASE("stream framing", "[session]") {
  const json a = {{"type", "hello"}, {"version", 1}};
  const json b = {{"type", "control"}, {"steer", -0.125}};
  CHECK(encode(a) == "28\n{\"type\":\"hello\",\"version\":1}");
  const std::string wire = encode(a) + encode(b);
  Decoder d;
  std::vector<json> got;
  for (char ch : wire) {
    for (auto& m : d.feed(std::string(1, ch))) got.push_back(m);
  }
  REQUIRE(got.size() == 2);
  CHECK(got[0] == a);
  CHECK(got[1] == b);
  CHECK(d.pending().empty());

  Decoder bad;
  CHECK_THROWS_AS(bad.feed("x2\n{}"), ProtocolError);
  Decoder huge;
  CHECK_THROWS_AS(huge.feed("99999999\n"), ProtocolError);
  Decoder garbage;
  CHECK_THROWS_AS(garbage.feed("3\nabc"), ProtocolError);
}

TEST_CASE("websocket helpers", "[session]") {
  CHECK(server::websocket_accept("dGhlIHNhbXBsZSBub25jZQ==") == "s3pPLMBiTxaQ9kYGzzhZRbK+xOo=");
  server::WsDecoder d(true);
  const std::array<unsigned char, 4> mask{0x37, 0xfa, 0x21, 0x3d};
  for (std::size_t n : {0UL, 5UL, 125UL, 126UL, 70000UL}) {
    const std::string payload(n, 'q');
    const auto msgs = d.feed(server::ws_frame(payload, server::WsOpcode::text, mask));
    REQUIRE(msgs.size() == 1);
    CHECK(msgs[0].payload == payload);
  }
  // RFC 6455 single-frame masked "Hello".
  const std::string hello("\x81\x85\x37\xfa\x21\x3d\x7f\x9f\x4d\x51\x58", 11);
  CHECK(d.feed(hello).at(0).payload == "Hello");
  server::WsDecoder strict(true);
  CHECK_THROWS_AS(strict.feed(server::ws_frame("x")), ProtocolError);
}

TEST_CASE("socket round trip", "[session]") {
  const auto dir = fresh_dir("socket");
  server::Server srv(service(dir), 0);
  srv.start();
  REQUIRE(srv.port() != 0);

  {
    server::Server clash(service(dir), srv.port());
    CHECK_THROWS_AS(clash.start(), IoError);
  }

  server::Client a("127.0.0.1", srv.port()), b("127.0.0.1", srv.port());
  for (auto* c : {&a, &b}) {
    c->send({{"type", "hello"}, {"version", 1}});
    CHECK(c->receive()->at("type") == "hello");
  }
  a.send(start_msg("drive", {{"track", "straight"}}));
  b.send(start_msg("backseat", {{"duration", 2.0}}));
  const auto sa = a.receive();
  const auto sb = b.receive();
  CHECK(sa->at("session") != sb->at("session"));
  for (int i = 0; i < 40; ++i) {
    a.send(control(0.0));
    b.send(correction(0.0));
    const auto fa = a.receive();
    const auto fb = b.receive();
    REQUIRE(fa);
    REQUIRE(fb);
    CHECK(fa->at("session") == sa->at("session"));
    CHECK(fb->at("session") == sb->at("session"));
    CHECK(fa->at("observation")[0].get<double>() == Approx(0.0).margin(1e-12));
  }
  b.send({{"type", "commit"}, {"name", "sock"}});
  const auto committed = b.receive_type("commit");
  REQUIRE(committed);
  CHECK(committed->at("samples") == 4);
  CHECK(data::load(dir + "/sock.dataset.jsonl").size() == 4);
  a.send({{"type", "bye"}});
  CHECK(a.receive_type("bye"));

  // Realtime clock: frames arrive without input.
  server::Client rt("127.0.0.1", srv.port());
  rt.send({{"type", "hello"}, {"version", 1}});
  rt.receive();
  rt.send({{"type", "start_session"}, {"mode", "watch"}, {"clock", "realtime"}, {"duration", 0.5}});
  rt.receive();
  std::size_t frames = 0;
  bool done = false;
  while (auto f = rt.receive(3000)) {
    ++frames;
    if (f->at("done").get<bool>()) {
      done = true;
      break;
    }
  }
  CHECK(done);
  CHECK(frames == 10);

  // Bad framing closes with an error.
  server::Client bad("127.0.0.1", srv.port());
  bad.send_raw("nonsense\n");
  const auto err = bad.receive();
  REQUIRE(err);
  CHECK(err->at("type") == "error");
  CHECK_FALSE(bad.receive(500));
  srv.stop();
}

TEST_CASE("websocket clients are upgraded", "[session]") {
  server::Server srv(service(fresh_dir("ws")), 0);
  srv.start();
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(srv.port());
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  server::detail::send_all(fd, "GET / HTTP/1.1\r\nHost: x\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
                               "Sec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\nSec-WebSocket-Version: 13\r\n\r\n");
  std::string buf;
  while (buf.find("\r\n\r\n") == std::string::npos) buf += server::detail::recv_some(fd);
  CHECK(buf.rfind("HTTP/1.1 101", 0) == 0);
  CHECK(buf.find("Sec-WebSocket-Accept: s3pPLMBiTxaQ9kYGzzhZRbK+xOo=") != std::string::npos);
  std::string rest = buf.substr(buf.find("\r\n\r\n") + 4);

  const std::array<unsigned char, 4> mask{1, 2, 3, 4};
  server::detail::send_all(fd, server::ws_frame(R"({"type":"hello","version":1})", server::WsOpcode::text, mask));
  server::WsDecoder d(false);
  std::vector<server::WsMessage> got = d.feed(rest);
  while (got.empty()) got = d.feed(server::detail::recv_some(fd));
  CHECK(json::parse(got[0].payload) == json{{"type", "hello"}, {"version", 1}, {"server", "reneg"}});
  server::detail::send_all(fd, server::ws_frame("", server::WsOpcode::close, mask));
  ::close(fd);
  srv.stop();
}

namespace {

// Equal up to floating-point noise in numbers; everything else exact.
bool same_message(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    const double x = a.get<double>(), y = b.get<double>();
    return std::abs(x - y) <= 1e-12 * std::max(1.0, std::abs(y));
  }
  if (a.type() != b.type()) return false;
  if (a.is_object()) {
    if (a.size() != b.size()) return false;
    for (auto it = a.begin(); it != a.end(); ++it) {
      if (!b.contains(it.key()) || !same_message(it.value(), b.at(it.key()))) return false;
    }
    return true;
  }
  if (a.is_array()) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!same_message(a[i], b[i])) return false;
    }
    return true;
  }
  return a == b;
}

std::vector<json> read_transcript(const std::string& name) {
  std::ifstream in(std::string(RENEG_SOURCE_DIR) + "/docs/protocol/" + name);
  REQUIRE(in);
  std::vector<json> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) lines.push_back(json::parse(line));
  }
  return lines;
}

}  // namespace

TEST_CASE("golden transcripts replay against the service", "[session]") {
  const std::set<std::string> server_types = {"hello", "start_session", "frame", "commit", "error", "bye"};
  const std::set<std::string> client_types = {"hello", "start_session", "control", "correction", "commit", "bye"};
  for (const char* name : {"drive.jsonl", "backseat.jsonl", "version_mismatch.jsonl", "wrong_mode.jsonl"}) {
    INFO(name);
    const auto lines = read_transcript(name);
    REQUIRE_FALSE(lines.empty());
    int ids = 0;
    Connection conn(service(fresh_dir("golden")), [&] { return "s" + std::to_string(++ids); });
    std::vector<json> expected, produced;
    for (const auto& l : lines) {
      const auto& msg = l.at("msg");
      if (l.at("from") == "client") {
        CHECK(client_types.count(msg.at("type").get<std::string>()) == 1);
        for (auto& r : conn.receive(msg)) produced.push_back(std::move(r));
      } else {
        CHECK(server_types.count(msg.at("type").get<std::string>()) == 1);
        expected.push_back(msg);
      }
    }
    REQUIRE(produced.size() == expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) {
      INFO(expected[i].dump());
      CHECK(same_message(produced[i], expected[i]));
    }
  }
}

TEST_CASE("golden drive transcript matches straight-line kinematics", "[session]") {
  // 8 m/s for 0.05 s per tick along the x axis; two 2 Hz samples, both f = 1.
  std::size_t frames = 0;
  for (const auto& l : read_transcript("drive.jsonl")) {
    if (l.at("from") != "server") continue;
    const auto& m = l.at("msg");
    if (m.at("type") == "frame") {
      const double tick = m.at("tick").get<double>();
      CHECK(m.at("pose").at("x").get<double>() == Approx(0.4 * tick).margin(1e-12));
      CHECK(m.at("pose").at("y").get<double>() == 0.0);
      CHECK(m.at("t").get<double>() == Approx(0.05 * tick).margin(1e-12));
      ++frames;
    } else if (m.at("type") == "commit") {
      CHECK(m.at("samples") == 2);
      CHECK(m.at("histogram").back() == 2);
    }
  }
  CHECK(frames == 12);
}
