#include "fedft/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <map>
#include <mutex>

#include "fedft/byte_io.hpp"
#include "fedft/error.hpp"

namespace fedft {

// ---------------------------------------------------------------------------
// Framing

namespace {

void put_blob(ByteWriter& w, const std::vector<std::uint8_t>& blob) {
  w.put<std::uint64_t>(blob.size());
  w.put_bytes(blob);
}

std::vector<std::uint8_t> get_blob(ByteReader<ProtocolError>& r) {
  const auto n = r.get<std::uint64_t>();
  if (n > r.remaining()) throw ProtocolError("frame: blob length exceeds payload");
  const auto bytes = r.get_bytes(static_cast<std::size_t>(n));
  return {bytes.begin(), bytes.end()};
}

Message decode_payload(MessageType type, std::span<const std::uint8_t> payload) {
  ByteReader<ProtocolError> r(payload, "frame payload");
  Message m;
  switch (type) {
    case MessageType::kHello:
      m = Hello{r.get<std::uint32_t>()};
      break;
    case MessageType::kGlobalParams: {
      GlobalParams g;
      g.round = r.get<std::uint32_t>();
      g.blob = get_blob(r);
      m = std::move(g);
      break;
    }
    case MessageType::kClientUpdate: {
      ClientUpdateMsg u;
      u.round = r.get<std::uint32_t>();
      u.num_samples = r.get<std::uint64_t>();
      u.blob = get_blob(r);
      u.local_loss = r.get<float>();
      u.local_time_ms = r.get<std::uint64_t>();
      m = std::move(u);
      break;
    }
    case MessageType::kEvalRequest:
      m = EvalRequest{r.get<std::uint32_t>()};
      break;
    case MessageType::kShutdown:
      m = Shutdown{};
      break;
  }
  if (r.remaining() != 0) {
    throw ProtocolError("frame: " + std::to_string(r.remaining()) + " unexpected trailing payload bytes");
  }
  return m;
}

}  // namespace

std::string message_name(const Message& m) {
  static const char* const names[] = {"Hello", "GlobalParams", "ClientUpdate", "EvalRequest",
                                      "Shutdown"};
  return names[m.index()];
}

std::vector<std::uint8_t> encode_message(const Message& m) {
  std::vector<std::uint8_t> payload;
  ByteWriter w(payload);
  MessageType type{};
  std::visit(
      [&](const auto& msg) {
        using T = std::decay_t<decltype(msg)>;
        if constexpr (std::is_same_v<T, Hello>) {
          type = MessageType::kHello;
          w.put<std::uint32_t>(msg.client_id);
        } else if constexpr (std::is_same_v<T, GlobalParams>) {
          type = MessageType::kGlobalParams;
          w.put<std::uint32_t>(msg.round);
          put_blob(w, msg.blob);
        } else if constexpr (std::is_same_v<T, ClientUpdateMsg>) {
          type = MessageType::kClientUpdate;
          w.put<std::uint32_t>(msg.round);
          w.put<std::uint64_t>(msg.num_samples);
          put_blob(w, msg.blob);
          w.put<float>(msg.local_loss);
          w.put<std::uint64_t>(msg.local_time_ms);
        } else if constexpr (std::is_same_v<T, EvalRequest>) {
          type = MessageType::kEvalRequest;
          w.put<std::uint32_t>(msg.round);
        } else {
          type = MessageType::kShutdown;
        }
      },
      m);
  if (payload.size() > kMaxFramePayload) throw ProtocolError("frame: payload exceeds 256 MiB");

  std::vector<std::uint8_t> frame;
  frame.reserve(kFrameHeaderSize + payload.size());
  const auto len = static_cast<std::uint32_t>(payload.size());
  frame.push_back(static_cast<std::uint8_t>(len >> 24));
  frame.push_back(static_cast<std::uint8_t>(len >> 16));
  frame.push_back(static_cast<std::uint8_t>(len >> 8));
  frame.push_back(static_cast<std::uint8_t>(len));
  frame.push_back(static_cast<std::uint8_t>(type));
  frame.insert(frame.end(), payload.begin(), payload.end());
  return frame;
}

DecodeResult decode_message(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kFrameHeaderSize) return NeedMoreData{};
  const std::uint32_t len = (std::uint32_t{bytes[0]} << 24) | (std::uint32_t{bytes[1]} << 16) |
                            (std::uint32_t{bytes[2]} << 8) | std::uint32_t{bytes[3]};
  const std::uint8_t type = bytes[4];
  if (type < 1 || type > 5) throw ProtocolError("frame: unknown message type " + std::to_string(type));
  if (len > kMaxFramePayload) {
    throw ProtocolError("frame: payload length " + std::to_string(len) + " exceeds 256 MiB cap");
  }
  if (bytes.size() - kFrameHeaderSize < len) return NeedMoreData{};
  return Decoded{decode_payload(static_cast<MessageType>(type), bytes.subspan(kFrameHeaderSize, len)),
                 kFrameHeaderSize + len};
}

void FrameBuffer::append(std::span<const std::uint8_t> bytes) {
  if (start_ > 0 && start_ >= buffer_.size() / 2) {
    buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(start_));
    start_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Message> FrameBuffer::next() {
  auto result = decode_message(std::span<const std::uint8_t>(buffer_).subspan(start_));
  if (std::holds_alternative<NeedMoreData>(result)) return std::nullopt;
  auto& decoded = std::get<Decoded>(result);
  start_ += decoded.consumed;
  return std::move(decoded.message);
}

// ---------------------------------------------------------------------------
// Loopback carrier. Messages still travel as encoded frames so both carriers
// exercise the same codec.

namespace {

struct BytePipe {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::uint8_t> bytes;
  bool closed = false;
};

class LoopbackChannel final : public Channel {
 public:
  LoopbackChannel(std::shared_ptr<BytePipe> in, std::shared_ptr<BytePipe> out)
      : in_(std::move(in)), out_(std::move(out)) {}
  ~LoopbackChannel() override { close(); }

  void send(const Message& m) override {
    const auto frame = encode_message(m);
    std::lock_guard lock(out_->mu);
    if (out_->closed) throw TransportError("loopback: connection reset by peer");
    out_->bytes.insert(out_->bytes.end(), frame.begin(), frame.end());
    out_->cv.notify_all();
  }

  Message receive(Timeout timeout) override {
    while (true) {
      if (auto m = frames_.next()) return std::move(*m);
      std::vector<std::uint8_t> chunk;
      {
        std::unique_lock lock(in_->mu);
        auto ready = [&] { return !in_->bytes.empty() || in_->closed; };
        if (timeout.count() < 0) {
          in_->cv.wait(lock, ready);
        } else if (!in_->cv.wait_for(lock, timeout, ready)) {
          throw TransportError("loopback: receive timed out");
        }
        if (in_->bytes.empty()) throw TransportError("loopback: connection closed by peer");
        chunk.assign(in_->bytes.begin(), in_->bytes.end());
        in_->bytes.clear();
      }
      frames_.append(chunk);
    }
  }

  void close() override {
    for (auto* pipe : {in_.get(), out_.get()}) {
      std::lock_guard lock(pipe->mu);
      pipe->closed = true;
      pipe->cv.notify_all();
    }
  }

 private:
  std::shared_ptr<BytePipe> in_;
  std::shared_ptr<BytePipe> out_;
  FrameBuffer frames_;
};

struct LoopbackPort {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<std::unique_ptr<Channel>> pending;
  bool closed = false;
};

std::mutex& registry_mutex() {
  static std::mutex mu;
  return mu;
}

std::map<std::string, std::shared_ptr<LoopbackPort>>& registry() {
  static std::map<std::string, std::shared_ptr<LoopbackPort>> ports;
  return ports;
}

class LoopbackListener final : public Listener {
 public:
  LoopbackListener(std::string name, std::shared_ptr<LoopbackPort> port)
      : name_(std::move(name)), port_(std::move(port)) {}
  ~LoopbackListener() override { close(); }

  std::unique_ptr<Channel> accept(Timeout timeout) override {
    std::unique_lock lock(port_->mu);
    auto ready = [&] { return !port_->pending.empty() || port_->closed; };
    if (timeout.count() < 0) {
      port_->cv.wait(lock, ready);
    } else if (!port_->cv.wait_for(lock, timeout, ready)) {
      throw TransportError("loopback: accept timed out on inproc://" + name_);
    }
    if (port_->pending.empty()) throw TransportError("loopback: listener inproc://" + name_ + " closed");
    auto ch = std::move(port_->pending.front());
    port_->pending.pop_front();
    return ch;
  }

  void close() override {
    {
      std::lock_guard reg(registry_mutex());
      auto it = registry().find(name_);
      if (it != registry().end() && it->second == port_) registry().erase(it);
    }
    std::lock_guard lock(port_->mu);
    port_->closed = true;
    port_->pending.clear();
    port_->cv.notify_all();
  }

  std::string endpoint() const override { return "inproc://" + name_; }

 private:
  std::string name_;
  std::shared_ptr<LoopbackPort> port_;
};

}  // namespace

std::unique_ptr<Listener> serve_loopback(const std::string& name) {
  auto port = std::make_shared<LoopbackPort>();
  std::lock_guard reg(registry_mutex());
  if (!registry().emplace(name, port).second) {
    throw TransportError("loopback: inproc://" + name + " already in use");
  }
  return std::make_unique<LoopbackListener>(name, std::move(port));
}

std::unique_ptr<Channel> connect_loopback(const std::string& name) {
  std::shared_ptr<LoopbackPort> port;
  {
    std::lock_guard reg(registry_mutex());
    auto it = registry().find(name);
    if (it == registry().end()) throw TransportError("loopback: connection refused: inproc://" + name);
    port = it->second;
  }
  auto to_server = std::make_shared<BytePipe>();
  auto to_client = std::make_shared<BytePipe>();
  std::lock_guard lock(port->mu);
  if (port->closed) throw TransportError("loopback: connection refused: inproc://" + name);
  port->pending.push_back(std::make_unique<LoopbackChannel>(to_server, to_client));
  port->cv.notify_all();
  return std::make_unique<LoopbackChannel>(to_client, to_server);
}

// ---------------------------------------------------------------------------
// TCP carrier

namespace {

std::string errno_text() { return std::strerror(errno); }

class Socket {
 public:
  explicit Socket(int fd = -1) : fd_(fd) {}
  ~Socket() { reset(); }
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  int get() const { return fd_; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_;
};

/// Returns false on timeout.
bool wait_readable(int fd, Timeout timeout) {
  pollfd p{fd, POLLIN, 0};
  while (true) {
    const int rc = ::poll(&p, 1, timeout.count() < 0 ? -1 : static_cast<int>(timeout.count()));
    if (rc > 0) return true;
    if (rc == 0) return false;
    if (errno != EINTR) throw TransportError("tcp: poll failed: " + errno_text());
  }
}

class TcpChannel final : public Channel {
 public:
  explicit TcpChannel(Socket s) : sock_(std::move(s)) {
    int one = 1;
    ::setsockopt(sock_.get(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }

  void send(const Message& m) override {
    if (sock_.get() < 0) throw TransportError("tcp: channel closed");
    const auto frame = encode_message(m);
    std::size_t sent = 0;
    while (sent < frame.size()) {
      const auto n = ::send(sock_.get(), frame.data() + sent, frame.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError("tcp: send failed: " + errno_text());
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  Message receive(Timeout timeout) override {
    std::uint8_t buf[64 * 1024];
    while (true) {
      if (auto m = frames_.next()) return std::move(*m);
      if (sock_.get() < 0) throw TransportError("tcp: channel closed");
      if (!wait_readable(sock_.get(), timeout)) throw TransportError("tcp: receive timed out");
      const auto n = ::recv(sock_.get(), buf, sizeof(buf), 0);
      if (n == 0) throw TransportError("tcp: connection closed by peer");
      if (n < 0) {
        if (errno == EINTR) continue;
        throw TransportError("tcp: recv failed: " + errno_text());
      }
      frames_.append({buf, static_cast<std::size_t>(n)});
    }
  }

  void close() override { sock_.reset(); }

 private:
  Socket sock_;
  FrameBuffer frames_;
};

class TcpListener final : public Listener {
 public:
  TcpListener(Socket s, std::string endpoint) : sock_(std::move(s)), endpoint_(std::move(endpoint)) {}

  std::unique_ptr<Channel> accept(Timeout timeout) override {
    if (sock_.get() < 0) throw TransportError("tcp: listener closed");
    if (!wait_readable(sock_.get(), timeout)) {
      throw TransportError("tcp: no client connected to " + endpoint_ + " before timeout");
    }
    const int fd = ::accept(sock_.get(), nullptr, nullptr);
    if (fd < 0) throw TransportError("tcp: accept failed: " + errno_text());
    return std::make_unique<TcpChannel>(Socket(fd));
  }

  void close() override { sock_.reset(); }
  std::string endpoint() const override { return endpoint_; }

 private:
  Socket sock_;
  std::string endpoint_;
};

struct AddrInfoDeleter {
  void operator()(addrinfo* p) const { ::freeaddrinfo(p); }
};

std::unique_ptr<addrinfo, AddrInfoDeleter> resolve(const std::string& host, std::uint16_t port,
                                                   bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const auto port_str = std::to_string(port);
  const int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), port_str.c_str(), &hints, &res);
  if (rc != 0) throw TransportError("tcp: cannot resolve " + host + ": " + ::gai_strerror(rc));
  return std::unique_ptr<addrinfo, AddrInfoDeleter>(res);
}

}  // namespace

std::pair<std::string, std::uint16_t> parse_host_port(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos) throw ConfigError("endpoint '" + s + "' is not host:port");
  const auto host = s.substr(0, colon);
  const auto port_str = s.substr(colon + 1);
  unsigned long port = 0;
  try {
    std::size_t used = 0;
    port = std::stoul(port_str, &used);
    if (used != port_str.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ConfigError("endpoint '" + s + "' has an invalid port");
  }
  if (port > 65535) throw ConfigError("endpoint '" + s + "' port out of range");
  return {host, static_cast<std::uint16_t>(port)};
}

std::unique_ptr<Listener> serve_tcp(const std::string& host, std::uint16_t port) {
  auto addr = resolve(host, port, true);
  Socket s(::socket(addr->ai_family, addr->ai_socktype, addr->ai_protocol));
  if (s.get() < 0) throw TransportError("tcp: socket failed: " + errno_text());
  int one = 1;
  ::setsockopt(s.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  if (::bind(s.get(), addr->ai_addr, addr->ai_addrlen) != 0) {
    throw TransportError("tcp: bind " + host + ":" + std::to_string(port) + " failed: " + errno_text());
  }
  if (::listen(s.get(), 64) != 0) throw TransportError("tcp: listen failed: " + errno_text());
  sockaddr_in bound{};
  socklen_t len = sizeof(bound);
  ::getsockname(s.get(), reinterpret_cast<sockaddr*>(&bound), &len);
  const std::string shown_host = host.empty() || host == "0.0.0.0" ? "127.0.0.1" : host;
  return std::make_unique<TcpListener>(std::move(s),
                                       shown_host + ":" + std::to_string(ntohs(bound.sin_port)));
}

std::unique_ptr<Channel> connect_tcp(const std::string& host, std::uint16_t port) {
  auto addr = resolve(host, port, false);
  Socket s(::socket(addr->ai_family, addr->ai_socktype, addr->ai_protocol));
  if (s.get() < 0) throw TransportError("tcp: socket failed: " + errno_text());
  while (::connect(s.get(), addr->ai_addr, addr->ai_addrlen) != 0) {
    if (errno == EINTR) continue;
    throw TransportError("tcp: connect to " + host + ":" + std::to_string(port) +
                         " failed: " + errno_text());
  }
  return std::make_unique<TcpChannel>(std::move(s));
}

namespace {

constexpr std::string_view kInproc = "inproc://";
constexpr std::string_view kTcp = "tcp://";

}  // namespace

std::unique_ptr<Listener> serve(const std::string& endpoint) {
  if (endpoint.starts_with(kInproc)) return serve_loopback(endpoint.substr(kInproc.size()));
  const auto rest = endpoint.starts_with(kTcp) ? endpoint.substr(kTcp.size()) : endpoint;
  const auto [host, port] = parse_host_port(rest);
  return serve_tcp(host, port);
}

std::unique_ptr<Channel> connect(const std::string& endpoint) {
  if (endpoint.starts_with(kInproc)) return connect_loopback(endpoint.substr(kInproc.size()));
  const auto rest = endpoint.starts_with(kTcp) ? endpoint.substr(kTcp.size()) : endpoint;
  const auto [host, port] = parse_host_port(rest);
  return connect_tcp(host, port);
}

}  // namespace fedft
