#include "stg/wire.hpp"

#include <algorithm>

#include <arpa/inet.h>
#include <cerrno>
#include <cstring>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace stg {

Socket::~Socket() { close(); }

Socket& Socket::operator=(Socket&& o) noexcept {
    if (this != &o) {
        close();
        fd_ = o.fd_;
        o.fd_ = -1;
    }
    return *this;
}

void Socket::close() {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

namespace {

void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

// poll for readability; true when ready, false on timeout.
bool wait_readable(int fd, int timeout_ms) {
    struct pollfd pfd{fd, POLLIN, 0};
    for (;;) {
        const int r = ::poll(&pfd, 1, timeout_ms);
        if (r > 0) return true;
        if (r == 0) return false;
        if (errno != EINTR) throw ProtocolError("poll failed");
    }
}

void write_all(int fd, const void* data, std::size_t n) {
    const char* p = static_cast<const char*>(data);
    while (n > 0) {
        const ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
        if (w < 0) {
            if (errno == EINTR) continue;
            throw ProtocolError("send failed: " + std::string(std::strerror(errno)));
        }
        p += w;
        n -= static_cast<std::size_t>(w);
    }
}

// Reads exactly n bytes; RecvStatus::closed on clean EOF before any byte.
RecvStatus read_exact(int fd, void* data, std::size_t n, int timeout_ms, bool any_read) {
    char* p = static_cast<char*>(data);
    std::size_t got = 0;
    while (got < n) {
        // Once a frame has started, wait out stragglers even if the caller
        // only polled; a partial frame is never surfaced as a timeout.
        const int t = (got > 0 || any_read) ? std::max(timeout_ms, 5000) : timeout_ms;
        if (!wait_readable(fd, t)) {
            if (got == 0 && !any_read) return RecvStatus::timeout;
            throw ProtocolError("timed out mid-message");
        }
        const ssize_t r = ::read(fd, p + got, n - got);
        if (r < 0) {
            if (errno == EINTR) continue;
            throw ProtocolError("read failed: " + std::string(std::strerror(errno)));
        }
        if (r == 0) {
            if (got == 0 && !any_read) return RecvStatus::closed;
            throw ProtocolError("connection closed mid-message");
        }
        got += static_cast<std::size_t>(r);
    }
    return RecvStatus::ok;
}

}  // namespace

Listener Listener::bind_local(std::uint16_t port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw ProtocolError("socket() failed");
    Socket sock(fd);
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
        throw ProtocolError("bind failed on port " + std::to_string(port));
    if (::listen(fd, 64) != 0) throw ProtocolError("listen failed");
    socklen_t len = sizeof(addr);
    if (::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len) != 0)
        throw ProtocolError("getsockname failed");
    Listener l;
    l.sock_ = std::move(sock);
    l.port_ = ntohs(addr.sin_port);
    return l;
}

std::optional<Socket> Listener::accept(int timeout_ms) {
    if (!wait_readable(sock_.fd(), timeout_ms)) return std::nullopt;
    const int fd = ::accept(sock_.fd(), nullptr, nullptr);
    if (fd < 0) {
        if (errno == EINTR || errno == EAGAIN) return std::nullopt;
        throw ProtocolError("accept failed");
    }
    set_nodelay(fd);
    return Socket(fd);
}

Socket connect_local(const std::string& host, std::uint16_t port, int timeout_ms) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) throw ProtocolError("socket() failed");
    Socket sock(fd);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
        throw ProtocolError("bad address: " + host);
    (void)timeout_ms;  // loopback connects complete or fail immediately
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
        throw ProtocolError("connect to " + host + ":" + std::to_string(port) + " failed: " +
                            std::strerror(errno));
    set_nodelay(fd);
    return sock;
}

void send_message(Socket& s, const Json& j) {
    const std::string payload = j.dump();
    if (payload.size() > kMaxWirePayload) throw ProtocolError("payload exceeds 64 MiB");
    unsigned char hdr[4];
    const std::uint32_t n = static_cast<std::uint32_t>(payload.size());
    hdr[0] = static_cast<unsigned char>(n >> 24);
    hdr[1] = static_cast<unsigned char>(n >> 16);
    hdr[2] = static_cast<unsigned char>(n >> 8);
    hdr[3] = static_cast<unsigned char>(n);
    write_all(s.fd(), hdr, 4);
    write_all(s.fd(), payload.data(), payload.size());
}

RecvStatus recv_message(Socket& s, Json& out, int timeout_ms) {
    unsigned char hdr[4];
    const RecvStatus st = read_exact(s.fd(), hdr, 4, timeout_ms, false);
    if (st != RecvStatus::ok) return st;
    const std::uint32_t n = (static_cast<std::uint32_t>(hdr[0]) << 24) |
                            (static_cast<std::uint32_t>(hdr[1]) << 16) |
                            (static_cast<std::uint32_t>(hdr[2]) << 8) |
                            static_cast<std::uint32_t>(hdr[3]);
    if (n > kMaxWirePayload) throw ProtocolError("announced payload exceeds 64 MiB");
    std::string payload(n, '\0');
    if (n > 0) read_exact(s.fd(), payload.data(), n, timeout_ms, true);
    try {
        out = Json::parse(payload);
    } catch (const Json::parse_error& e) {
        throw ProtocolError(std::string("malformed JSON payload: ") + e.what());
    }
    if (!out.is_object() || !out.contains("type") || !out["type"].is_string())
        throw ProtocolError("message lacks a string \"type\" field");
    return RecvStatus::ok;
}

Json request(Socket& s, const Json& req, int timeout_ms) {
    send_message(s, req);
    Json reply;
    const RecvStatus st = recv_message(s, reply, timeout_ms);
    if (st == RecvStatus::timeout) throw ProtocolError("request timed out");
    if (st == RecvStatus::closed) throw ProtocolError("connection closed awaiting reply");
    return reply;
}

Json make_msg(const std::string& type) { return Json{{"type", type}}; }

Json error_reply(const std::string& code, const std::string& detail) {
    return Json{{"type", "error"}, {"code", code}, {"detail", detail}};
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
}
}  // namespace

std::string base64_encode(const std::string& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    while (i + 3 <= bytes.size()) {
        const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                                (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                                static_cast<unsigned char>(bytes[i + 2]);
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += kB64[(v >> 6) & 63];
        out += kB64[v & 63];
        i += 3;
    }
    const std::size_t rem = bytes.size() - i;
    if (rem == 1) {
        const std::uint32_t v = static_cast<unsigned char>(bytes[i]) << 16;
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += "==";
    } else if (rem == 2) {
        const std::uint32_t v = (static_cast<unsigned char>(bytes[i]) << 16) |
                                (static_cast<unsigned char>(bytes[i + 1]) << 8);
        out += kB64[(v >> 18) & 63];
        out += kB64[(v >> 12) & 63];
        out += kB64[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

std::string base64_decode(const std::string& text) {
    if (text.size() % 4 != 0) throw FormatError("base64: length not a multiple of 4");
    std::string out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int vals[4];
        int pad = 0;
        for (int k = 0; k < 4; ++k) {
            const char c = text[i + k];
            if (c == '=') {
                vals[k] = 0;
                ++pad;
            } else {
                vals[k] = b64_value(c);
                if (vals[k] < 0 || pad > 0) throw FormatError("base64: invalid character");
            }
        }
        const std::uint32_t v = (static_cast<std::uint32_t>(vals[0]) << 18) |
                                (static_cast<std::uint32_t>(vals[1]) << 12) |
                                (static_cast<std::uint32_t>(vals[2]) << 6) |
                                static_cast<std::uint32_t>(vals[3]);
        out += static_cast<char>((v >> 16) & 0xff);
        if (pad < 2) out += static_cast<char>((v >> 8) & 0xff);
        if (pad < 1) out += static_cast<char>(v & 0xff);
    }
    return out;
}

Json vec_to_json(const VectorXd& v) {
    Json arr = Json::array();
    for (int i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

VectorXd vec_from_json(const Json& j) {
    if (!j.is_array()) throw ProtocolError("expected a JSON array of numbers");
    VectorXd v(static_cast<int>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw ProtocolError("expected a JSON array of numbers");
        v[static_cast<int>(i)] = j[i].get<double>();
    }
    return v;
}

}  // namespace stg
