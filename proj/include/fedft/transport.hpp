#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace fedft {

struct Hello {
  std::uint32_t client_id = 0;
  bool operator==(const Hello&) const = default;
};

/// Full global model ("FFTP" blob) for the given round.
struct GlobalParams {
  std::uint32_t round = 0;
  std::vector<std::uint8_t> blob;
  bool operator==(const GlobalParams&) const = default;
};

/// Trainable tensors after local fine-tuning. Replies to EvalRequest reuse
/// this message with an empty tensor set and the evaluation loss.
struct ClientUpdateMsg {
  std::uint32_t round = 0;
  std::uint64_t num_samples = 0;
  std::vector<std::uint8_t> blob;
  float local_loss = 0.0f;
  std::uint64_t local_time_ms = 0;
  bool operator==(const ClientUpdateMsg&) const = default;
};

/// Asks the client to score the global model it received for `round` on its
/// local shard.
struct EvalRequest {
  std::uint32_t round = 0;
  bool operator==(const EvalRequest&) const = default;
};

struct Shutdown {
  bool operator==(const Shutdown&) const = default;
};

using Message = std::variant<Hello, GlobalParams, ClientUpdateMsg, EvalRequest, Shutdown>;

enum class MessageType : std::uint8_t {
  kHello = 1,
  kGlobalParams = 2,
  kClientUpdate = 3,
  kEvalRequest = 4,
  kShutdown = 5,
};

inline constexpr std::size_t kFrameHeaderSize = 5;
inline constexpr std::uint32_t kMaxFramePayload = 256u << 20;

std::string message_name(const Message& m);

/// Frame: u32 big-endian payload length, u8 type, payload. Payload integers
/// are little-endian; blobs carry a u64 length prefix.
std::vector<std::uint8_t> encode_message(const Message& m);

struct NeedMoreData {};
struct Decoded {
  Message message;
  std::size_t consumed = 0;
};
using DecodeResult = std::variant<NeedMoreData, Decoded>;

/// Decodes the first frame in `bytes`, leaving the rest for the next call.
/// Throws ProtocolError on unknown types, oversized frames or payloads that
/// do not match their type.
DecodeResult decode_message(std::span<const std::uint8_t> bytes);

/// Reassembles frames from arbitrarily fragmented input.
class FrameBuffer {
 public:
  void append(std::span<const std::uint8_t> bytes);
  /// Next complete message, if one is buffered.
  std::optional<Message> next();
  std::size_t buffered() const { return buffer_.size() - start_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t start_ = 0;
};

using Timeout = std::chrono::milliseconds;
inline constexpr Timeout kNoTimeout{-1};

/// Ordered, reliable, message-preserving duplex channel. One writer and one
/// reader at a time.
class Channel {
 public:
  virtual ~Channel() = default;
  virtual void send(const Message& m) = 0;
  /// Blocks until a message arrives. Throws TransportError when the peer
  /// has closed or the timeout expires.
  virtual Message receive(Timeout timeout = kNoTimeout) = 0;
  virtual void close() = 0;
};

class Listener {
 public:
  virtual ~Listener() = default;
  /// Throws TransportError on timeout or when closed.
  virtual std::unique_ptr<Channel> accept(Timeout timeout = kNoTimeout) = 0;
  virtual void close() = 0;
  /// Endpoint string a client can pass to connect().
  virtual std::string endpoint() const = 0;
};

/// Endpoints: "inproc://NAME" selects the in-process loopback carrier;
/// "HOST:PORT" or "tcp://HOST:PORT" selects TCP (port 0 picks a free port).
std::unique_ptr<Listener> serve(const std::string& endpoint);
std::unique_ptr<Channel> connect(const std::string& endpoint);

std::unique_ptr<Listener> serve_loopback(const std::string& name);
std::unique_ptr<Channel> connect_loopback(const std::string& name);
std::unique_ptr<Listener> serve_tcp(const std::string& host, std::uint16_t port);
std::unique_ptr<Channel> connect_tcp(const std::string& host, std::uint16_t port);

/// Splits "host:port"; throws ConfigError on malformed input.
std::pair<std::string, std::uint16_t> parse_host_port(const std::string& s);

}  // namespace fedft
