#pragma once

// TCP transport for the session service. Each connection speaks either the
// length-prefixed stream framing or, if it opens with an HTTP "GET", a
// WebSocket carrying one JSON message per text frame (for browser clients).

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <openssl/evp.h>
#include <openssl/sha.h>

#include <atomic>
#include <chrono>
#include <cstring>
#include <list>
#include <mutex>
#include <thread>

#include "reneg/session.hpp"

namespace reneg::server {

using session::json;

// -- WebSocket pieces -------------------------------------------------------------------

inline std::string websocket_accept(const std::string& key) {
  const std::string in = key + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11";
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(in.data()), in.size(), digest);
  unsigned char out[4 * ((SHA_DIGEST_LENGTH + 2) / 3) + 1];
  const int n = EVP_EncodeBlock(out, digest, SHA_DIGEST_LENGTH);
  return std::string(reinterpret_cast<char*>(out), static_cast<std::size_t>(n));
}

enum class WsOpcode : unsigned char { text = 0x1, close = 0x8, ping = 0x9, pong = 0xA };

inline std::string ws_frame(std::string_view payload, WsOpcode op = WsOpcode::text,
                            std::optional<std::array<unsigned char, 4>> mask = std::nullopt) {
  std::string f;
  f.push_back(static_cast<char>(0x80 | static_cast<unsigned char>(op)));
  const unsigned char mbit = mask ? 0x80 : 0x00;
  const std::uint64_t n = payload.size();
  if (n < 126) {
    f.push_back(static_cast<char>(mbit | n));
  } else if (n <= 0xFFFF) {
    f.push_back(static_cast<char>(mbit | 126));
    f.push_back(static_cast<char>((n >> 8) & 0xFF));
    f.push_back(static_cast<char>(n & 0xFF));
  } else {
    f.push_back(static_cast<char>(mbit | 127));
    for (int i = 7; i >= 0; --i) f.push_back(static_cast<char>((n >> (8 * i)) & 0xFF));
  }
  if (mask) {
    for (unsigned char b : *mask) f.push_back(static_cast<char>(b));
    for (std::size_t i = 0; i < payload.size(); ++i) {
      f.push_back(static_cast<char>(static_cast<unsigned char>(payload[i]) ^ (*mask)[i % 4]));
    }
  } else {
    f.append(payload);
  }
  return f;
}

struct WsMessage {
  WsOpcode op;
  std::string payload;
};

class WsDecoder {
 public:
  explicit WsDecoder(bool require_mask) : require_mask_(require_mask) {}

  std::vector<WsMessage> feed(std::string_view bytes) {
    buf_.append(bytes);
    std::vector<WsMessage> out;
    for (;;) {
      if (buf_.size() < 2) break;
      const auto b0 = static_cast<unsigned char>(buf_[0]);
      const auto b1 = static_cast<unsigned char>(buf_[1]);
      if (!(b0 & 0x80)) throw ProtocolError("fragmented WebSocket messages are not supported");
      const unsigned char op = b0 & 0x0F;
      if (op != 0x1 && op != 0x8 && op != 0x9 && op != 0xA) {
        throw ProtocolError("unsupported WebSocket opcode " + std::to_string(op));
      }
      const bool masked = b1 & 0x80;
      if (require_mask_ && !masked) throw ProtocolError("client WebSocket frames must be masked");
      std::size_t pos = 2;
      std::uint64_t n = b1 & 0x7F;
      if (n == 126) {
        if (buf_.size() < 4) break;
        n = (static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[2])) << 8) |
            static_cast<unsigned char>(buf_[3]);
        pos = 4;
      } else if (n == 127) {
        if (buf_.size() < 10) break;
        n = 0;
        for (int i = 0; i < 8; ++i) n = (n << 8) | static_cast<unsigned char>(buf_[2 + i]);
        pos = 10;
      }
      if (n > session::kMaxMessageBytes) throw ProtocolError("WebSocket frame too large");
      const std::size_t mask_at = pos;
      if (masked) pos += 4;
      if (buf_.size() < pos + n) break;
      std::string payload = buf_.substr(pos, n);
      if (masked) {
        for (std::size_t i = 0; i < payload.size(); ++i) {
          payload[i] = static_cast<char>(static_cast<unsigned char>(payload[i]) ^
                                         static_cast<unsigned char>(buf_[mask_at + i % 4]));
        }
      }
      buf_.erase(0, pos + n);
      out.push_back({static_cast<WsOpcode>(op), std::move(payload)});
    }
    return out;
  }

 private:
  bool require_mask_;
  std::string buf_;
};

// -- sockets ------------------------------------------------------------------------------

namespace detail {

inline void send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n <= 0) {
      if (n < 0 && errno == EINTR) continue;
      throw IoError(std::string("send failed: ") + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

/// Reads what is available; empty string means the peer closed.
inline std::string recv_some(int fd) {
  char buf[65536];
  for (;;) {
    const ssize_t n = ::recv(fd, buf, sizeof buf, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n < 0) throw IoError(std::string("recv failed: ") + std::strerror(errno));
    return std::string(buf, static_cast<std::size_t>(n));
  }
}

inline std::string header_value(const std::string& request, const std::string& name) {
  std::istringstream in(request);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto colon = line.find(':');
    if (colon == std::string::npos) continue;
    std::string key = line.substr(0, colon);
    std::transform(key.begin(), key.end(), key.begin(), [](unsigned char c) { return std::tolower(c); });
    if (key == name) {
      const auto start = line.find_first_not_of(' ', colon + 1);
      return start == std::string::npos ? "" : line.substr(start);
    }
  }
  return "";
}

}  // namespace detail

/// Serves one connection until it closes or `stop` is raised.
inline void serve_connection(int fd, session::Connection& conn, const std::atomic<bool>& stop,
                             double tick_seconds) {
  using clock = std::chrono::steady_clock;
  enum class Wire { unknown, stream, websocket } wire = Wire::unknown;
  std::string prefix;
  session::Decoder stream;
  WsDecoder ws(true);
  const auto period = std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(tick_seconds));
  auto next_tick = clock::now() + period;
  bool was_ticking = false;

  auto send_msgs = [&](const std::vector<json>& msgs) {
    for (const auto& m : msgs) {
      detail::send_all(fd, wire == Wire::websocket ? ws_frame(m.dump()) : session::encode(m));
    }
  };
  auto handle = [&](const json& msg) { send_msgs(conn.receive(msg)); };

  try {
    while (!stop.load() && !conn.closed()) {
      const bool ticking = conn.ticking();
      if (ticking && !was_ticking) next_tick = clock::now() + period;
      was_ticking = ticking;
      int timeout_ms = 200;
      if (ticking) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(next_tick - clock::now()).count();
        timeout_ms = static_cast<int>(std::clamp<long long>(left, 0, 200));
      }
      pollfd p{fd, POLLIN, 0};
      const int ready = ::poll(&p, 1, timeout_ms);
      if (ready < 0 && errno != EINTR) break;
      if (ready > 0) {
        const std::string bytes = detail::recv_some(fd);
        if (bytes.empty()) break;
        if (wire == Wire::unknown) {
          prefix += bytes;
          if (prefix.size() < 4 && std::string_view("GET ").substr(0, prefix.size()) == prefix) continue;
          if (prefix.rfind("GET ", 0) == 0) {
            const auto end = prefix.find("\r\n\r\n");
            if (end == std::string::npos) {
              if (prefix.size() > 16384) throw ProtocolError("HTTP request header too large");
              continue;
            }
            const std::string key = detail::header_value(prefix.substr(0, end), "sec-websocket-key");
            if (key.empty()) {
              detail::send_all(fd, "HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
              break;
            }
            detail::send_all(fd, "HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\nConnection: Upgrade\r\n"
                                 "Sec-WebSocket-Accept: " + websocket_accept(key) + "\r\n\r\n");
            wire = Wire::websocket;
            const std::string rest = prefix.substr(end + 4);
            prefix.clear();
            if (rest.empty()) continue;
            for (auto& m : ws.feed(rest)) {
              if (m.op == WsOpcode::text) handle(json::parse(m.payload));
            }
            continue;
          }
          wire = Wire::stream;
          for (const auto& m : stream.feed(prefix)) handle(m);
          prefix.clear();
        } else if (wire == Wire::stream) {
          for (const auto& m : stream.feed(bytes)) handle(m);
        } else {
          for (auto& m : ws.feed(bytes)) {
            if (m.op == WsOpcode::text) {
              json msg;
              try {
                msg = json::parse(m.payload);
              } catch (const json::parse_error& e) {
                throw ProtocolError(std::string("message is not valid JSON: ") + e.what());
              }
              handle(msg);
            } else if (m.op == WsOpcode::ping) {
              detail::send_all(fd, ws_frame(m.payload, WsOpcode::pong));
            } else if (m.op == WsOpcode::close) {
              detail::send_all(fd, ws_frame("", WsOpcode::close));
              ::close(fd);
              return;
            }
          }
        }
      }
      if (conn.ticking() && clock::now() >= next_tick) {
        // Inputs that arrived before this point apply now; later ones wait a tick.
        send_msgs(conn.tick());
        next_tick += period;
      }
    }
  } catch (const std::exception& e) {
    const auto* err = dynamic_cast<const Error*>(&e);
    try {
      if (wire == Wire::unknown) wire = Wire::stream;
      send_msgs(conn.fail(err ? err->code() : "ProtocolError", e.what()));
    } catch (const std::exception&) {
    }
  }
  if (wire == Wire::websocket) {
    try {
      detail::send_all(fd, ws_frame("", WsOpcode::close));
    } catch (const Error&) {
    }
  }
  ::shutdown(fd, SHUT_RDWR);
  ::close(fd);
}

class Server {
 public:
  explicit Server(session::ServiceConfig svc, std::uint16_t port = 0, std::string bind_address = "127.0.0.1")
      : svc_(std::move(svc)), requested_port_(port), bind_(std::move(bind_address)) {}

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;
  ~Server() { stop(); }

  /// Binds and starts accepting. Port 0 picks a free port; see port().
  void start() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw IoError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(requested_port_);
    if (::inet_pton(AF_INET, bind_.c_str(), &addr.sin_addr) != 1) throw InvalidArgument("bad bind address " + bind_);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
      const std::string why = std::strerror(errno);
      ::close(listen_fd_);
      listen_fd_ = -1;
      throw IoError("cannot bind port " + std::to_string(requested_port_) + ": " + why);
    }
    ::listen(listen_fd_, 16);
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  std::uint16_t port() const { return port_; }

  void stop() {
    if (stop_.exchange(true)) return;
    if (listen_fd_ >= 0) ::shutdown(listen_fd_, SHUT_RDWR);
    if (acceptor_.joinable()) acceptor_.join();
    if (listen_fd_ >= 0) ::close(listen_fd_);
    std::lock_guard lock(mu_);
    for (auto& t : workers_) {
      if (t.joinable()) t.join();
    }
  }

  /// Blocks until stop() is called from elsewhere.
  void wait() {
    if (acceptor_.joinable()) acceptor_.join();
  }

 private:
  void accept_loop() {
    while (!stop_.load()) {
      pollfd p{listen_fd_, POLLIN, 0};
      if (::poll(&p, 1, 200) <= 0) continue;
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lock(mu_);
      workers_.emplace_back([this, fd] {
        session::Connection conn(svc_, [this] { return std::to_string(++next_id_); });
        serve_connection(fd, conn, stop_, svc_.sim.dt);
      });
    }
  }

  session::ServiceConfig svc_;
  std::uint16_t requested_port_;
  std::uint16_t port_ = 0;
  std::string bind_;
  int listen_fd_ = -1;
  std::atomic<bool> stop_{false};
  std::atomic<std::uint64_t> next_id_{0};
  std::thread acceptor_;
  std::mutex mu_;
  std::list<std::thread> workers_;
};

/// Blocking client for the stream framing (scripted clients and tests).
class Client {
 public:
  Client(const std::string& host, std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw IoError(std::string("socket: ") + std::strerror(errno));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) throw InvalidArgument("bad host " + host);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
      const std::string why = std::strerror(errno);
      ::close(fd_);
      throw IoError("cannot connect to " + host + ":" + std::to_string(port) + ": " + why);
    }
  }
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;
  ~Client() {
    if (fd_ >= 0) ::close(fd_);
  }

  void send(const json& msg) { detail::send_all(fd_, session::encode(msg)); }
  void send_raw(std::string_view bytes) { detail::send_all(fd_, bytes); }

  /// Next message, or nothing if none arrives within `timeout_ms` or the server closed.
  std::optional<json> receive(int timeout_ms = 5000) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
    for (;;) {
      if (!queue_.empty()) {
        json m = std::move(queue_.front());
        queue_.erase(queue_.begin());
        return m;
      }
      if (eof_) return std::nullopt;
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return std::nullopt;
      pollfd p{fd_, POLLIN, 0};
      if (::poll(&p, 1, static_cast<int>(left.count())) <= 0) continue;
      const std::string bytes = detail::recv_some(fd_);
      if (bytes.empty()) {
        eof_ = true;
        continue;
      }
      for (auto& m : decoder_.feed(bytes)) queue_.push_back(std::move(m));
    }
  }

  /// Skips frames until a message of `type` arrives.
  std::optional<json> receive_type(const std::string& type, int timeout_ms = 5000) {
    while (auto m = receive(timeout_ms)) {
      const std::string t = m->value("type", "");
      if (t == type || t == "error") return m;
    }
    return std::nullopt;
  }

 private:
  int fd_ = -1;
  bool eof_ = false;
  session::Decoder decoder_;
  std::vector<json> queue_;
};

}  // namespace reneg::server
