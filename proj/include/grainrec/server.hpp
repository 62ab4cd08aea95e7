// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "grainrec/serving.hpp"

namespace grainrec {

inline constexpr const char* kVersion = "0.1.0";

/// Lock-free latency histogram with ~1% relative resolution. Quantiles report
/// the upper edge of the bucket holding the requested rank.
class LatencyHistogram {
 public:
  static constexpr std::size_t kBuckets = 2048;

  void record(std::int64_t micros) {
    buckets_[bucket_of(micros)].fetch_add(1, std::memory_order_relaxed);
    count_.fetch_add(1, std::memory_order_relaxed);
  }

  std::uint64_t count() const { return count_.load(std::memory_order_relaxed); }

  double quantile(double q) const {
    std::array<std::uint64_t, kBuckets> snap;
    std::uint64_t total = 0;
    for (std::size_t i = 0; i < kBuckets; ++i) total += (snap[i] = buckets_[i].load(std::memory_order_relaxed));
    if (total == 0) return 0;
    const auto rank = static_cast<std::uint64_t>(std::ceil(q * static_cast<double>(total)));
    std::uint64_t seen = 0;
    for (std::size_t i = 0; i < kBuckets; ++i) {
      seen += snap[i];
      if (seen >= std::max<std::uint64_t>(rank, 1)) return upper_edge(i);
    }
    return upper_edge(kBuckets - 1);
  }

 private:
  static constexpr double kGrowth = 1.01;

  static std::size_t bucket_of(std::int64_t micros) {
    if (micros <= 0) return 0;
    const auto b = static_cast<std::size_t>(std::log(static_cast<double>(micros) + 1.0) / std::log(kGrowth));
    return std::min(b, kBuckets - 1);
  }
  static double upper_edge(std::size_t b) { return std::pow(kGrowth, static_cast<double>(b + 1)) - 1.0; }

  std::array<std::atomic<std::uint64_t>, kBuckets> buckets_{};
  std::atomic<std::uint64_t> count_{0};
};

enum class Protocol { http, raw };

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::size_t workers = 1;
  Protocol protocol = Protocol::http;
};

/// Request handling shared by both transports.
class RecommendService {
 public:
  explicit RecommendService(std::shared_ptr<const Recommender> rec)
      : rec_(std::move(rec)), started_(std::chrono::steady_clock::now()) {}

  /// Returns (status, JSON body). Never throws.
  std::pair<int, std::string> recommend(const std::string& body) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto req = InferenceRequest::parse(body);
      auto res = rec_->infer(req);
      res.latency_us = elapsed_us(t0);
      latency_.record(res.latency_us);
      return {200, res.to_json().dump()};
    } catch (const ProtocolError& e) {
      errors_.fetch_add(1, std::memory_order_relaxed);
      return {400, nlohmann::json{{"error", e.what()}, {"kind", "protocol"}}.dump()};
    } catch (const std::exception& e) {
      errors_.fetch_add(1, std::memory_order_relaxed);
      return {500, nlohmann::json{{"error", e.what()}, {"kind", "internal"}}.dump()};
    }
  }

  std::string health() const {
    return nlohmann::json{{"status", "ok"},
                          {"version", kVersion},
                          {"vocab_hash", std::to_string(rec_->vocab_hash())},
                          {"uptime_s", uptime_s()}}
        .dump();
  }

  std::string stats() const {
    const double up = uptime_s();
    const auto n = latency_.count();
    return nlohmann::json{{"requests", n},
                          {"errors", errors_.load(std::memory_order_relaxed)},
                          {"p50_us", latency_.quantile(0.50)},
                          {"p95_us", latency_.quantile(0.95)},
                          {"p99_us", latency_.quantile(0.99)},
                          {"throughput_rps", up > 0 ? static_cast<double>(n) / up : 0.0},
                          {"uptime_s", up}}
        .dump();
  }

  const LatencyHistogram& latency() const noexcept { return latency_; }

 private:
  static std::int64_t elapsed_us(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - t0).count();
  }
  double uptime_s() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
  }

  std::shared_ptr<const Recommender> rec_;
  std::chrono::steady_clock::time_point started_;
  LatencyHistogram latency_;
  std::atomic<std::uint64_t> errors_{0};
};

/// HTTP (POST /recommend, GET /stats, GET /health) or length-prefixed raw TCP
/// front end. Each request runs start to finish on one of `workers` threads;
/// the model is shared read-only.
///
/// Raw framing: u32 little-endian byte length, then a JSON body, both ways.
/// A request body of {"op":"stats"} or {"op":"health"} returns those reports.
class Server {
 public:
  Server(std::shared_ptr<const Recommender> rec, ServerOptions opts)
      : service_(std::make_shared<RecommendService>(std::move(rec))), opts_(std::move(opts)) {
    if (opts_.workers < 1) throw ConfigError("workers must be >= 1");
  }
  ~Server() { stop(); }
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds and starts serving in background threads; returns the bound port.
  int start() {
    if (opts_.protocol == Protocol::http) return start_http();
    return start_raw();
  }

  void stop() {
    if (http_) http_->stop();
    stopping_ = true;
    if (listen_fd_ >= 0) {
      ::shutdown(listen_fd_, SHUT_RDWR);
      ::close(listen_fd_);
      listen_fd_ = -1;
    }
    for (auto& t : threads_)
      if (t.joinable()) t.join();
    threads_.clear();
  }

  /// Blocks until the server stops.
  void wait() {
    for (auto& t : threads_)
      if (t.joinable()) t.join();
  }

  int port() const noexcept { return port_; }
  RecommendService& service() noexcept { return *service_; }

 private:
  int start_http() {
    http_ = std::make_unique<httplib::Server>();
    const std::size_t workers = opts_.workers;
    http_->new_task_queue = [workers] { return new httplib::ThreadPool(workers); };
    http_->set_tcp_nodelay(true);  // small JSON replies otherwise stall on delayed ACKs
    // httplib's default adds SO_REUSEPORT, which lets a second server share a busy port silently.
    http_->set_socket_options([](auto sock) {
      int one = 1;
      ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    });
    auto svc = service_;
    http_->Post("/recommend", [svc](const httplib::Request& req, httplib::Response& res) {
      auto [status, body] = svc->recommend(req.body);
      res.status = status;
      res.set_content(body, "application/json");
    });
    http_->Get("/stats", [svc](const httplib::Request&, httplib::Response& res) {
      res.set_content(svc->stats(), "application/json");
    });
    http_->Get("/health", [svc](const httplib::Request&, httplib::Response& res) {
      res.set_content(svc->health(), "application/json");
    });
    if (opts_.port == 0) {
      port_ = http_->bind_to_any_port(opts_.host);
    } else {
      port_ = http_->bind_to_port(opts_.host, opts_.port) ? opts_.port : -1;
    }
    if (port_ < 0) throw IoError("cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
    threads_.emplace_back([this] { http_->listen_after_bind(); });
    http_->wait_until_ready();
    return port_;
  }

  int start_raw() {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw IoError("socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(opts_.port));
    if (::inet_pton(AF_INET, opts_.host.c_str(), &addr.sin_addr) != 1) throw IoError("bad bind address " + opts_.host);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 128) != 0) {
      ::close(listen_fd_);
      listen_fd_ = -1;
      throw IoError("cannot bind " + opts_.host + ":" + std::to_string(opts_.port));
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    for (std::size_t w = 0; w < opts_.workers; ++w) threads_.emplace_back([this] { raw_worker(); });
    return port_;
  }

  static bool read_all(int fd, void* buf, std::size_t n) {
    auto* p = static_cast<char*>(buf);
    while (n > 0) {
      const ssize_t r = ::recv(fd, p, n, 0);
      if (r <= 0) return false;
      p += r;
      n -= static_cast<std::size_t>(r);
    }
    return true;
  }
  static bool write_all(int fd, const void* buf, std::size_t n) {
    const auto* p = static_cast<const char*>(buf);
    while (n > 0) {
      const ssize_t r = ::send(fd, p, n, MSG_NOSIGNAL);
      if (r <= 0) return false;
      p += r;
      n -= static_cast<std::size_t>(r);
    }
    return true;
  }
  static bool write_frame(int fd, const std::string& body) {
    const auto n = static_cast<std::uint32_t>(body.size());
    const unsigned char h[4] = {static_cast<unsigned char>(n & 0xff), static_cast<unsigned char>((n >> 8) & 0xff),
                                static_cast<unsigned char>((n >> 16) & 0xff), static_cast<unsigned char>((n >> 24) & 0xff)};
    return write_all(fd, h, 4) && write_all(fd, body.data(), body.size());
  }

  void raw_worker() {
    constexpr std::uint32_t kMaxFrame = 1u << 20;
    while (!stopping_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (stopping_) return;
        continue;
      }
      int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      for (;;) {
        unsigned char h[4];
        if (!read_all(fd, h, 4)) break;
        const std::uint32_t n = h[0] | (h[1] << 8) | (h[2] << 16) | (static_cast<std::uint32_t>(h[3]) << 24);
        if (n > kMaxFrame) {
          write_frame(fd, nlohmann::json{{"error", "frame too large"}, {"kind", "protocol"}}.dump());
          break;
        }
        std::string body(n, '\0');
        if (!read_all(fd, body.data(), n)) break;
        std::string reply;
        auto j = nlohmann::json::parse(body, nullptr, false);
        if (!j.is_discarded() && j.is_object() && j.contains("op") && j["op"] == "stats") {
          reply = service_->stats();
        } else if (!j.is_discarded() && j.is_object() && j.contains("op") && j["op"] == "health") {
          reply = service_->health();
        } else {
          reply = service_->recommend(body).second;
        }
        if (!write_frame(fd, reply)) break;
      }
      ::close(fd);
    }
  }

  std::shared_ptr<RecommendService> service_;
  ServerOptions opts_;
  std::unique_ptr<httplib::Server> http_;
  std::vector<std::thread> threads_;
  std::atomic<bool> stopping_{false};
  int listen_fd_ = -1;
  int port_ = -1;
};

/// Minimal blocking client for the raw protocol.
class RawClient {
 public:
  RawClient(const std::string& host, int port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    ::inet_pton(AF_INET, host.c_str(), &addr.sin_addr);
    if (fd_ < 0 || ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw IoError("cannot connect to " + host + ":" + std::to_string(port));
    }
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  }
  ~RawClient() {
    if (fd_ >= 0) ::close(fd_);
  }
  RawClient(const RawClient&) = delete;
  RawClient& operator=(const RawClient&) = delete;

  std::string call(const std::string& body) {
    const auto n = static_cast<std::uint32_t>(body.size());
    const unsigned char h[4] = {static_cast<unsigned char>(n & 0xff), static_cast<unsigned char>((n >> 8) & 0xff),
                                static_cast<unsigned char>((n >> 16) & 0xff), static_cast<unsigned char>((n >> 24) & 0xff)};
    if (!send_all(h, 4) || !send_all(body.data(), body.size())) throw IoError("raw protocol send failed");
    unsigned char rh[4];
    if (!recv_all(rh, 4)) throw IoError("raw protocol receive failed");
    const std::uint32_t m = rh[0] | (rh[1] << 8) | (rh[2] << 16) | (static_cast<std::uint32_t>(rh[3]) << 24);
    std::string out(m, '\0');
    if (!recv_all(out.data(), m)) throw IoError("raw protocol receive failed");
    return out;
  }

 private:
  bool send_all(const void* buf, std::size_t n) {
    const auto* p = static_cast<const char*>(buf);
    while (n > 0) {
      const ssize_t r = ::send(fd_, p, n, MSG_NOSIGNAL);
      if (r <= 0) return false;
      p += r;
      n -= static_cast<std::size_t>(r);
    }
    return true;
  }
  bool recv_all(void* buf, std::size_t n) {
    auto* p = static_cast<char*>(buf);
    while (n > 0) {
      const ssize_t r = ::recv(fd_, p, n, 0);
      if (r <= 0) return false;
      p += r;
      n -= static_cast<std::size_t>(r);
    }
    return true;
  }

  int fd_ = -1;
};

}  // namespace grainrec
