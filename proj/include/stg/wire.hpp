#pragma once

// Length-prefixed JSON over TCP: 4-byte big-endian payload length, then the
// UTF-8 JSON document. Payloads are capped at 64 MiB.

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "stg/common.hpp"
#include "stg/linalg.hpp"

namespace stg {

using Json = nlohmann::json;

inline constexpr std::size_t kMaxWirePayload = 64ull * 1024 * 1024;

// Owning socket fd; move-only.
class Socket {
  public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    ~Socket();
    Socket(Socket&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    Socket& operator=(Socket&& o) noexcept;
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;

    int fd() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    void close();

  private:
    int fd_ = -1;
};

class Listener {
  public:
    // Binds 127.0.0.1; port 0 picks an ephemeral port.
    static Listener bind_local(std::uint16_t port);
    std::uint16_t port() const { return port_; }
    // nullopt on timeout; timeout_ms < 0 blocks.
    std::optional<Socket> accept(int timeout_ms);

  private:
    Socket sock_;
    std::uint16_t port_ = 0;
};

Socket connect_local(const std::string& host, std::uint16_t port, int timeout_ms = 2000);

enum class RecvStatus { ok, timeout, closed };

void send_message(Socket& s, const Json& j);
// Throws ProtocolError on oversize or malformed payloads.
RecvStatus recv_message(Socket& s, Json& out, int timeout_ms);

// Sends a request and waits for one reply; throws ProtocolError on timeout
// or a closed connection.
Json request(Socket& s, const Json& req, int timeout_ms = 10000);

Json make_msg(const std::string& type);
Json error_reply(const std::string& code, const std::string& detail);

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

// JSON <-> Eigen vector helpers used by every role.
Json vec_to_json(const VectorXd& v);
VectorXd vec_from_json(const Json& j);

}  // namespace stg
