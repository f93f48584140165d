#include "dispel/tcp.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>

namespace dispel {

namespace {

using Clock = std::chrono::steady_clock;

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

void close_fd(int& fd) {
  if (fd >= 0) {
    ::shutdown(fd, SHUT_RDWR);
    ::close(fd);
    fd = -1;
  }
}

bool resolve(const Endpoint& ep, sockaddr_in& out) {
  std::memset(&out, 0, sizeof out);
  out.sin_family = AF_INET;
  out.sin_port = htons(ep.port);
  if (::inet_pton(AF_INET, ep.host.c_str(), &out.sin_addr) == 1) return true;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) return false;
  out.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return true;
}

}  // namespace

Endpoint Endpoint::parse(std::string_view s) {
  auto colon = s.rfind(':');
  if (colon == std::string_view::npos || colon == 0) throw ConfigError("endpoint needs host:port: " + std::string(s));
  auto port_s = s.substr(colon + 1);
  unsigned port = 0;
  auto [p, ec] = std::from_chars(port_s.data(), port_s.data() + port_s.size(), port);
  if (ec != std::errc{} || p != port_s.data() + port_s.size() || port == 0 || port > 65535)
    throw ConfigError("bad port in endpoint: " + std::string(s));
  return Endpoint{std::string(s.substr(0, colon)), static_cast<std::uint16_t>(port)};
}

std::vector<Endpoint> parse_endpoints(std::string_view list) {
  std::vector<Endpoint> out;
  while (!list.empty()) {
    auto comma = list.find(',');
    auto item = list.substr(0, comma);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    if (!item.empty()) out.push_back(Endpoint::parse(item));
    if (comma == std::string_view::npos) break;
    list.remove_prefix(comma + 1);
  }
  if (out.empty()) throw ConfigError("empty endpoint list");
  return out;
}

int tcp_connect(const Endpoint& ep, std::chrono::milliseconds timeout) {
  sockaddr_in addr{};
  if (!resolve(ep, addr)) return -1;
  int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC | SOCK_NONBLOCK, 0);
  if (fd < 0) return -1;
  int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
  if (rc != 0 && errno != EINPROGRESS) {
    ::close(fd);
    return -1;
  }
  if (rc != 0) {
    pollfd p{fd, POLLOUT, 0};
    int err = 0;
    socklen_t len = sizeof err;
    if (::poll(&p, 1, static_cast<int>(timeout.count())) != 1 ||
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len) != 0 || err != 0) {
      ::close(fd);
      return -1;
    }
  }
  ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) & ~O_NONBLOCK);
  set_nodelay(fd);
  return fd;
}

bool write_all(int fd, ByteView data) {
  std::size_t off = 0;
  while (off < data.size()) {
    ssize_t w = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    off += static_cast<std::size_t>(w);
  }
  return true;
}

// Outbound side of one replica link.
struct TcpTransport::Peer {
  ReplicaId id = 0;
  std::mutex mu;
  std::condition_variable cv;
  std::deque<EnvelopePtr> queue;
  std::size_t queued_bytes = 0;
  int fd = -1;
  std::atomic<bool> connected{false};
  std::thread thread;
};

// Inbound connection; clients also receive replies on it.
struct TcpTransport::Conn {
  int fd = -1;
  std::mutex write_mu;
  std::optional<ReplicaId> bound;
  bool client = false;
  std::thread thread;
};

TcpTransport::TcpTransport(ReplicaId self, std::vector<Endpoint> peers, TcpOptions opts)
    : self_(self), peers_(std::move(peers)), opts_(opts), start_(Clock::now()), sampled_at_(start_) {
  if (self_ >= peers_.size()) throw ConfigError("replica id outside the peer list");
}

TcpTransport::~TcpTransport() {
  stop();
  int lfd = std::exchange(listen_fd_, -1);
  if (lfd >= 0) {
    ::shutdown(lfd, SHUT_RDWR);
    ::close(lfd);
  }
  if (acceptor_.joinable()) acceptor_.join();
  for (auto& p : out_) {
    {
      std::lock_guard lk(p->mu);
      if (p->fd >= 0) ::shutdown(p->fd, SHUT_RDWR);
    }
    p->cv.notify_all();
    if (p->thread.joinable()) p->thread.join();
    close_fd(p->fd);
  }
  std::vector<std::shared_ptr<Conn>> conns;
  {
    std::lock_guard lk(conns_mu_);
    conns = conns_;
  }
  for (auto& c : conns) {
    if (c->fd >= 0) ::shutdown(c->fd, SHUT_RDWR);
  }
  for (auto& c : conns) {
    if (c->thread.joinable()) c->thread.join();
    close_fd(c->fd);
  }
}

void TcpTransport::listen() {
  sockaddr_in addr{};
  if (!resolve(peers_[self_], addr)) throw TransportError("cannot resolve " + peers_[self_].str());
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
  if (listen_fd_ < 0) throw TransportError("socket failed");
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 64) != 0) {
    std::string err = std::strerror(errno);
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw TransportError("cannot listen on " + peers_[self_].str() + ": " + err);
  }
  acceptor_ = std::thread([this] { accept_loop(); });
  for (ReplicaId i = 0; i < peers_.size(); ++i) {
    auto p = std::make_unique<Peer>();
    p->id = i;
    out_.push_back(std::move(p));
  }
  for (auto& p : out_) {
    if (p->id == self_) continue;
    Peer& ref = *p;
    p->thread = std::thread([this, &ref] { write_loop(ref); });
  }
}

void TcpTransport::accept_loop() {
  while (!stop_) {
    int fd = ::accept4(listen_fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) {
      if (errno == EINTR || errno == ECONNABORTED) continue;
      return;
    }
    set_nodelay(fd);
    auto conn = std::make_shared<Conn>();
    conn->fd = fd;
    std::lock_guard lk(conns_mu_);
    if (stop_) {
      close_fd(conn->fd);
      return;
    }
    conns_.push_back(conn);
    conn->thread = std::thread([this, conn] { read_loop(conn); });
  }
}

void TcpTransport::read_loop(std::shared_ptr<Conn> conn) {
  FrameReader reader;
  std::vector<std::uint8_t> buf(64 * 1024);
  while (!stop_) {
    ssize_t r = ::recv(conn->fd, buf.data(), buf.size(), 0);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) break;
    reader.feed(ByteView(buf.data(), static_cast<std::size_t>(r)));
    try {
      while (auto env = reader.next()) {
        if (!conn->bound) {
          if (env->sender == kClientSender) {
            std::lock_guard lk(conns_mu_);
            conn->client = true;
            conn->bound = next_client_++;
            clients_[*conn->bound] = conn;
          } else if (env->sender < peers_.size() && env->sender != self_) {
            conn->bound = env->sender;
          } else {
            goto done;
          }
        }
        // A connection speaks for one sender only.
        if (conn->client) {
          if (env->sender != kClientSender) goto done;
          env->sender = *conn->bound;
        } else if (env->sender != *conn->bound) {
          goto done;
        }
        frames_in_.fetch_add(1, std::memory_order_relaxed);
        push_intake(std::move(*env));
      }
    } catch (const FrameError&) {
      break;
    }
  }
done:
  if (conn->client) {
    std::lock_guard lk(conns_mu_);
    clients_.erase(*conn->bound);
  }
  ::shutdown(conn->fd, SHUT_RDWR);
}

void TcpTransport::write_loop(Peer& peer) {
  auto backoff = opts_.reconnect_initial;
  Bytes out;
  std::vector<EnvelopePtr> inflight;
  while (!stop_) {
    if (peer.fd < 0) {
      int fd = tcp_connect(peers_[peer.id], std::chrono::milliseconds(500));
      if (fd < 0) {
        std::unique_lock lk(peer.mu);
        peer.cv.wait_for(lk, backoff, [&] { return stop_.load(); });
        backoff = std::min(backoff * 2, opts_.reconnect_max);
        continue;
      }
      {
        std::lock_guard lk(peer.mu);
        peer.fd = fd;
      }
      peer.connected = true;
      backoff = opts_.reconnect_initial;
    }
    if (inflight.empty()) {
      std::unique_lock lk(peer.mu);
      peer.cv.wait(lk, [&] { return stop_ || !peer.queue.empty(); });
      if (stop_) break;
      std::size_t bytes = 0;
      while (!peer.queue.empty() && bytes < (1u << 20)) {
        bytes += frame_size(*peer.queue.front());
        inflight.push_back(std::move(peer.queue.front()));
        peer.queue.pop_front();
      }
    }
    out.clear();
    for (auto& env : inflight) {
      Bytes f = encode_frame(*env);
      out.insert(out.end(), f.begin(), f.end());
    }
    if (!write_all(peer.fd, out)) {
      // Resend the whole chunk over a fresh connection.
      peer.connected = false;
      std::lock_guard lk(peer.mu);
      close_fd(peer.fd);
      continue;
    }
    bytes_out_.fetch_add(out.size(), std::memory_order_relaxed);
    std::lock_guard lk(peer.mu);
    for (auto& env : inflight) peer.queued_bytes -= frame_size(*env);
    inflight.clear();
  }
  peer.connected = false;
}

void TcpTransport::push_intake(Envelope env) {
  {
    std::lock_guard lk(intake_mu_);
    intake_.push_back(std::move(env));
  }
  intake_cv_.notify_one();
}

void TcpTransport::post(std::function<void()> fn) {
  {
    std::lock_guard lk(intake_mu_);
    posted_.push_back(std::move(fn));
  }
  intake_cv_.notify_one();
}

void TcpTransport::stop() {
  {
    std::lock_guard lk(intake_mu_);
    stop_ = true;
  }
  intake_cv_.notify_all();
  for (auto& p : out_) {
    { std::lock_guard lk(p->mu); }
    p->cv.notify_all();
  }
}

Time TcpTransport::now() const { return std::chrono::duration_cast<Time>(Clock::now() - start_); }

SendStatus TcpTransport::send(ReplicaId to, EnvelopePtr env) {
  if (stop_) return SendStatus::Queued;
  if (to == self_) {
    push_intake(*env);
    return SendStatus::Queued;
  }
  if (to >= kFirstClientId) {
    std::shared_ptr<Conn> c;
    {
      std::lock_guard lk(conns_mu_);
      auto it = clients_.find(to);
      if (it == clients_.end()) throw UnknownPeer("no client " + std::to_string(to));
      c = it->second;
    }
    Bytes f = encode_frame(*env);
    std::lock_guard lk(c->write_mu);
    if (write_all(c->fd, f)) bytes_out_.fetch_add(f.size(), std::memory_order_relaxed);
    return SendStatus::Queued;
  }
  if (to >= peers_.size() || out_.empty()) throw UnknownPeer("no replica " + std::to_string(to));
  Peer& p = *out_[to];
  std::size_t queued;
  {
    std::lock_guard lk(p.mu);
    p.queued_bytes += frame_size(*env);
    queued = p.queued_bytes;
    p.queue.push_back(std::move(env));
  }
  p.cv.notify_one();
  return queued > opts_.send_queue_limit ? SendStatus::Backpressure : SendStatus::Queued;
}

SendStatus TcpTransport::broadcast(EnvelopePtr env) {
  SendStatus st = SendStatus::Queued;
  for (ReplicaId i = 0; i < peers_.size(); ++i) {
    if (send(i, env) == SendStatus::Backpressure) st = SendStatus::Backpressure;
  }
  return st;
}

void TcpTransport::schedule(Duration delay, TimerTag tag) {
  timers_.push(TimerEntry{Clock::now() + delay, timer_seq_++, tag});
}

double TcpTransport::tx_rate_sample() {
  auto t = Clock::now();
  std::uint64_t b = bytes_out_.load(std::memory_order_relaxed);
  double secs = std::chrono::duration<double>(t - sampled_at_).count();
  double rate = secs > 0 ? static_cast<double>(b - sampled_bytes_) / secs : 0.0;
  sampled_bytes_ = b;
  sampled_at_ = t;
  return rate;
}

std::size_t TcpTransport::connected_peers() const {
  std::size_t c = 0;
  for (auto& p : out_) c += p->connected ? 1 : 0;
  return c;
}

void TcpTransport::run(EventHandler& handler) {
  handler.on_start();
  std::deque<Envelope> batch;
  std::deque<std::function<void()>> fns;
  while (!stop_) {
    auto t = Clock::now();
    while (!timers_.empty() && timers_.top().at <= t && !stop_) {
      TimerTag tag = timers_.top().tag;
      timers_.pop();
      handler.on_timer(tag);
    }
    {
      std::unique_lock lk(intake_mu_);
      if (intake_.empty() && posted_.empty() && !stop_) {
        if (timers_.empty()) {
          intake_cv_.wait_for(lk, std::chrono::milliseconds(100));
        } else {
          intake_cv_.wait_until(lk, timers_.top().at);
        }
      }
      // Bounded slices keep timers from starving under a flood.
      for (std::size_t i = 0; i < 1024 && !intake_.empty(); ++i) {
        batch.push_back(std::move(intake_.front()));
        intake_.pop_front();
      }
      fns.swap(posted_);
    }
    for (auto& fn : fns) {
      if (stop_) break;
      fn();
    }
    fns.clear();
    for (auto& env : batch) {
      if (stop_) break;
      handler.on_envelope(env);
    }
    batch.clear();
  }
}

// Client ---------------------------------------------------------------------

TcpClient::TcpClient(std::vector<Endpoint> replicas)
    : eps_(std::move(replicas)), fds_(eps_.size(), -1), readers_(eps_.size()) {}

TcpClient::~TcpClient() {
  for (auto& fd : fds_) close_fd(fd);
}

void TcpClient::connect(std::chrono::milliseconds timeout) {
  auto deadline = Clock::now() + timeout;
  for (std::size_t i = 0; i < eps_.size(); ++i) {
    while (fds_[i] < 0) {
      fds_[i] = tcp_connect(eps_[i], std::chrono::milliseconds(500));
      if (fds_[i] >= 0) break;
      if (Clock::now() >= deadline) throw TransportError("cannot reach " + eps_[i].str());
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
  }
}

bool TcpClient::send(std::size_t replica, const Envelope& env) {
  if (replica >= fds_.size() || fds_[replica] < 0) return false;
  Envelope e = env;
  e.sender = kClientSender;
  if (!write_all(fds_[replica], encode_frame(e))) {
    close_fd(fds_[replica]);
    return false;
  }
  return true;
}

bool TcpClient::submit(std::size_t replica, const Transaction& tx) {
  return send(replica, Envelope{EpochId{0}, MsgKind::ClientTx, kClientSender, tx.payload()});
}

std::optional<Envelope> TcpClient::receive(std::size_t replica, std::chrono::milliseconds timeout) {
  if (replica >= fds_.size() || fds_[replica] < 0) return std::nullopt;
  auto deadline = Clock::now() + timeout;
  std::vector<std::uint8_t> buf(64 * 1024);
  while (true) {
    if (auto env = readers_[replica].next()) return env;
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
    if (left.count() <= 0) return std::nullopt;
    pollfd p{fds_[replica], POLLIN, 0};
    if (::poll(&p, 1, static_cast<int>(left.count())) != 1) return std::nullopt;
    ssize_t r = ::recv(fds_[replica], buf.data(), buf.size(), 0);
    if (r <= 0) {
      close_fd(fds_[replica]);
      return std::nullopt;
    }
    readers_[replica].feed(ByteView(buf.data(), static_cast<std::size_t>(r)));
  }
}

}  // namespace dispel
