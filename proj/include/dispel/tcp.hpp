#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <queue>
#include <string>
#include <thread>
#include <vector>

#include "dispel/transport.hpp"

namespace dispel {

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;

  // "host:port"; throws ConfigError.
  static Endpoint parse(std::string_view s);
  std::string str() const { return host + ":" + std::to_string(port); }
  bool operator==(const Endpoint&) const = default;
};

// Comma-separated endpoints.
std::vector<Endpoint> parse_endpoints(std::string_view list);

struct TcpOptions {
  std::chrono::milliseconds reconnect_initial{50};
  std::chrono::milliseconds reconnect_max{2000};
  // Above this many queued bytes for one peer, send() reports Backpressure.
  std::size_t send_queue_limit = 512u << 20;
};

// Blocking connect with a deadline; returns the socket or -1.
int tcp_connect(const Endpoint& ep, std::chrono::milliseconds timeout);
// Writes the whole buffer; false on error.
bool write_all(int fd, ByteView data);

// Replicas talk over one outbound connection per peer. Inbound frames from
// every connection, clients included, land in one intake queue that run()
// drains on the caller's thread together with timers and posted callbacks.
class TcpTransport : public Transport {
 public:
  TcpTransport(ReplicaId self, std::vector<Endpoint> peers, TcpOptions opts = {});
  ~TcpTransport() override;

  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  // Binds peers[self]; throws TransportError. Outbound connections start here too.
  void listen();
  // Event loop; returns after stop().
  void run(EventHandler& handler);
  // Safe from any thread. Frames sent after this are dropped.
  void stop();
  bool stopped() const { return stop_.load(); }
  // Runs fn on the event loop thread. Safe from any thread.
  void post(std::function<void()> fn);

  ReplicaId self() const override { return self_; }
  std::size_t size() const override { return peers_.size(); }
  Time now() const override;
  // `to` may also be a client id handed out for an inbound client connection.
  SendStatus send(ReplicaId to, EnvelopePtr env) override;
  SendStatus broadcast(EnvelopePtr env) override;
  void schedule(Duration delay, TimerTag tag) override;
  double tx_rate_sample() override;

  std::size_t connected_peers() const;
  std::uint64_t frames_in() const { return frames_in_.load(); }
  std::uint64_t bytes_out() const { return bytes_out_.load(); }

 private:
  struct Peer;
  struct Conn;

  void accept_loop();
  void read_loop(std::shared_ptr<Conn> conn);
  void write_loop(Peer& peer);
  void push_intake(Envelope env);

  ReplicaId self_;
  std::vector<Endpoint> peers_;
  TcpOptions opts_;
  std::chrono::steady_clock::time_point start_;

  std::atomic<bool> stop_{false};
  int listen_fd_ = -1;
  std::thread acceptor_;
  std::vector<std::unique_ptr<Peer>> out_;

  std::mutex conns_mu_;
  std::vector<std::shared_ptr<Conn>> conns_;
  std::map<ReplicaId, std::shared_ptr<Conn>> clients_;
  ReplicaId next_client_ = kFirstClientId;

  std::mutex intake_mu_;
  std::condition_variable intake_cv_;
  std::deque<Envelope> intake_;
  std::deque<std::function<void()>> posted_;

  struct TimerEntry {
    std::chrono::steady_clock::time_point at;
    std::uint64_t seq;
    TimerTag tag;
    bool operator>(const TimerEntry& o) const { return at != o.at ? at > o.at : seq > o.seq; }
  };
  std::priority_queue<TimerEntry, std::vector<TimerEntry>, std::greater<>> timers_;
  std::uint64_t timer_seq_ = 0;

  std::atomic<std::uint64_t> bytes_out_{0};
  std::atomic<std::uint64_t> frames_in_{0};
  std::uint64_t sampled_bytes_ = 0;
  std::chrono::steady_clock::time_point sampled_at_;
};

// Minimal client side: one connection per replica, frames in both directions.
class TcpClient {
 public:
  explicit TcpClient(std::vector<Endpoint> replicas);
  ~TcpClient();

  // Connects to every replica, retrying until `timeout`; throws TransportError.
  void connect(std::chrono::milliseconds timeout);
  // CLIENT_TX with epoch 0.
  bool submit(std::size_t replica, const Transaction& tx);
  bool send(std::size_t replica, const Envelope& env);
  // Next inbound envelope from `replica` within `timeout`.
  std::optional<Envelope> receive(std::size_t replica, std::chrono::milliseconds timeout);
  std::size_t size() const { return eps_.size(); }

 private:
  std::vector<Endpoint> eps_;
  std::vector<int> fds_;
  std::vector<FrameReader> readers_;
};

}  // namespace dispel
