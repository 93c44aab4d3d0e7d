#pragma once

// Byte-stream transports for the wire protocol: TCP, unix sockets and a
// subprocess speaking the protocol on its stdio.
//
// Addresses:
//   mock:PATH        in-process MockEndpoint from a JSON spec
//   tcp:HOST:PORT    (or bare HOST:PORT)
//   unix:PATH
//   stdio:COMMAND    run COMMAND under /bin/sh, talk over its stdin/stdout

#include <atomic>
#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include "uprobe/errors.hpp"
#include "uprobe/gateway.hpp"

namespace uprobe {

inline constexpr const char* kEndpointEnv = "UPROBE_MODEL_ENDPOINT";

namespace detail {

inline std::string errno_text(const std::string& what) { return what + ": " + std::strerror(errno); }

inline void ignore_sigpipe() {
    static const bool once = [] {
        std::signal(SIGPIPE, SIG_IGN);
        return true;
    }();
    (void)once;
}

}  // namespace detail

// Newline-delimited channel over a read fd and a write fd (possibly the same).
class LineChannel {
public:
    LineChannel(int read_fd, int write_fd, pid_t child = -1) : rfd_(read_fd), wfd_(write_fd), child_(child) {
        detail::ignore_sigpipe();
    }
    LineChannel(const LineChannel&) = delete;
    LineChannel& operator=(const LineChannel&) = delete;

    ~LineChannel() {
        if (wfd_ >= 0 && wfd_ != rfd_) ::close(wfd_);
        if (rfd_ >= 0) ::close(rfd_);
        if (child_ > 0) {
            int status = 0;
            ::waitpid(child_, &status, 0);
        }
    }

    void send_line(const std::string& line) {
        std::string out = line;
        out.push_back('\n');
        std::size_t off = 0;
        while (off < out.size()) {
            const ssize_t n = ::write(wfd_, out.data() + off, out.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw EndpointError(EndpointError::Reason::transport, detail::errno_text("write failed"));
            }
            off += static_cast<std::size_t>(n);
        }
    }

    // Throws EndpointError(timeout) when no full line arrives in time and
    // EndpointError(transport) on EOF or read errors.
    std::string recv_line(std::chrono::milliseconds timeout) {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        for (;;) {
            if (const auto nl = buf_.find('\n'); nl != std::string::npos) {
                std::string line = buf_.substr(0, nl);
                buf_.erase(0, nl + 1);
                if (!line.empty() && line.back() == '\r') line.pop_back();
                return line;
            }
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline -
                                                                                    std::chrono::steady_clock::now());
            if (left.count() <= 0) throw EndpointError(EndpointError::Reason::timeout, "no reply before timeout");
            pollfd p{rfd_, POLLIN, 0};
            const int r = ::poll(&p, 1, static_cast<int>(left.count()));
            if (r < 0) {
                if (errno == EINTR) continue;
                throw EndpointError(EndpointError::Reason::transport, detail::errno_text("poll failed"));
            }
            if (r == 0) continue;
            char chunk[4096];
            const ssize_t n = ::read(rfd_, chunk, sizeof chunk);
            if (n < 0) {
                if (errno == EINTR || errno == EAGAIN) continue;
                throw EndpointError(EndpointError::Reason::transport, detail::errno_text("read failed"));
            }
            if (n == 0) throw EndpointError(EndpointError::Reason::transport, "connection closed by peer");
            buf_.append(chunk, static_cast<std::size_t>(n));
        }
    }

private:
    int rfd_;
    int wfd_;
    pid_t child_;
    std::string buf_;
};

inline std::unique_ptr<LineChannel> connect_tcp(const std::string& host, const std::string& port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
        throw EndpointError(EndpointError::Reason::transport,
                            "cannot resolve " + host + ":" + port + ": " + ::gai_strerror(rc));
    }
    int fd = -1;
    for (addrinfo* a = res; a; a = a->ai_next) {
        fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw EndpointError(EndpointError::Reason::transport, detail::errno_text("cannot connect to " + host + ":" + port));
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    return std::make_unique<LineChannel>(fd, fd);
}

inline sockaddr_un unix_address(const std::string& path) {
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    if (path.size() >= sizeof addr.sun_path) throw ConfigError("unix socket path too long: " + path);
    std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
    return addr;
}

inline std::unique_ptr<LineChannel> connect_unix(const std::string& path) {
    const auto addr = unix_address(path);
    const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd < 0) throw EndpointError(EndpointError::Reason::transport, detail::errno_text("socket failed"));
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
        ::close(fd);
        throw EndpointError(EndpointError::Reason::transport, detail::errno_text("cannot connect to unix:" + path));
    }
    return std::make_unique<LineChannel>(fd, fd);
}

inline std::unique_ptr<LineChannel> spawn_stdio(const std::string& command) {
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0) throw EndpointError(EndpointError::Reason::transport, detail::errno_text("pipe failed"));
    if (::pipe(from_child) != 0) {
        ::close(to_child[0]);
        ::close(to_child[1]);
        throw EndpointError(EndpointError::Reason::transport, detail::errno_text("pipe failed"));
    }
    const pid_t pid = ::fork();
    if (pid < 0) throw EndpointError(EndpointError::Reason::transport, detail::errno_text("fork failed"));
    if (pid == 0) {
        ::dup2(to_child[0], STDIN_FILENO);
        ::dup2(from_child[1], STDOUT_FILENO);
        ::close(to_child[0]);
        ::close(to_child[1]);
        ::close(from_child[0]);
        ::close(from_child[1]);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    ::fcntl(to_child[1], F_SETFD, FD_CLOEXEC);
    ::fcntl(from_child[0], F_SETFD, FD_CLOEXEC);
    return std::make_unique<LineChannel>(from_child[0], to_child[1], pid);
}

using Connector = std::function<std::unique_ptr<LineChannel>()>;

// Wire-protocol client. Strictly one request in flight; replies carrying an
// older id are discarded. A timeout reconnects and retries once.
class RemoteEndpoint final : public ModelEndpoint {
public:
    RemoteEndpoint(Connector connect, EndpointInfo info,
                   std::chrono::milliseconds timeout = std::chrono::milliseconds(30000))
        : ModelEndpoint(std::move(info)), connect_(std::move(connect)), timeout_(timeout) {}

    std::uint64_t requests_sent() const { return next_id_; }

protected:
    Distribution query(std::span<const TokenId> tokens, std::size_t top_k) override {
        wire::Request req;
        req.tokens.assign(tokens.begin(), tokens.end());
        req.top_k = top_k;
        for (int attempt = 0;; ++attempt) {
            try {
                if (!channel_) channel_ = connect_();
                req.id = next_id_++;
                return exchange(req);
            } catch (const EndpointError& e) {
                if (e.reason() != EndpointError::Reason::timeout || attempt > 0) throw;
                channel_.reset();
            }
        }
    }

private:
    Distribution exchange(const wire::Request& req) {
        channel_->send_line(wire::encode_request(req));
        for (;;) {
            const auto reply = wire::decode_reply(channel_->recv_line(timeout_));
            if (reply.id < req.id) continue;
            if (reply.id > req.id) {
                throw EndpointError(EndpointError::Reason::malformed_reply,
                                    "reply id " + std::to_string(reply.id) + " was never requested");
            }
            if (reply.error) throw EndpointError(EndpointError::Reason::server_error, *reply.error);
            if (reply.dist->top_entries().size() > req.top_k) {
                throw EndpointError(EndpointError::Reason::inconsistent_reply, "reply has more than top_k entries");
            }
            return *reply.dist;
        }
    }

    Connector connect_;
    std::chrono::milliseconds timeout_;
    std::unique_ptr<LineChannel> channel_;
    std::uint64_t next_id_ = 0;
};

struct EndpointAddress {
    enum class Kind { mock, tcp, unix_socket, stdio } kind = Kind::tcp;
    std::string target;  // path, command, or host
    std::string port;
};

inline EndpointAddress parse_endpoint_address(const std::string& address) {
    auto after = [&](std::size_t n) { return address.substr(n); };
    auto split_host = [](const std::string& hp, EndpointAddress& a) {
        const auto colon = hp.rfind(':');
        if (colon == std::string::npos || colon == 0 || colon + 1 == hp.size()) {
            throw ConfigError("endpoint address needs HOST:PORT, got '" + hp + "'");
        }
        a.target = hp.substr(0, colon);
        a.port = hp.substr(colon + 1);
        if (a.port.find_first_not_of("0123456789") != std::string::npos) {
            throw ConfigError("endpoint port is not a number: '" + a.port + "'");
        }
    };
    EndpointAddress a;
    if (address.rfind("mock:", 0) == 0) {
        a.kind = EndpointAddress::Kind::mock;
        a.target = after(5);
    } else if (address.rfind("unix:", 0) == 0) {
        a.kind = EndpointAddress::Kind::unix_socket;
        a.target = after(5);
    } else if (address.rfind("stdio:", 0) == 0) {
        a.kind = EndpointAddress::Kind::stdio;
        a.target = after(6);
    } else if (address.rfind("tcp:", 0) == 0) {
        split_host(after(4), a);
    } else {
        split_host(address, a);
    }
    if (a.target.empty()) throw ConfigError("empty endpoint address '" + address + "'");
    return a;
}

// Falls back to $UPROBE_MODEL_ENDPOINT when `address` is empty. Mock specs
// carry their own vocabulary; remote endpoints take it from `info`.
inline std::unique_ptr<ModelEndpoint> open_endpoint(std::string address, const std::optional<EndpointInfo>& info,
                                                    std::chrono::milliseconds timeout = std::chrono::milliseconds(30000)) {
    if (address.empty()) {
        if (const char* env = std::getenv(kEndpointEnv)) address = env;
    }
    if (address.empty()) throw ConfigError(std::string("no endpoint given and ") + kEndpointEnv + " is unset");
    const auto a = parse_endpoint_address(address);
    if (a.kind == EndpointAddress::Kind::mock) return std::make_unique<MockEndpoint>(load_mock_spec(a.target));
    if (!info) throw ConfigError("remote endpoint '" + address + "' needs a vocabulary size");
    Connector c;
    switch (a.kind) {
        case EndpointAddress::Kind::tcp: c = [a] { return connect_tcp(a.target, a.port); }; break;
        case EndpointAddress::Kind::unix_socket: c = [a] { return connect_unix(a.target); }; break;
        default: c = [a] { return spawn_stdio(a.target); }; break;
    }
    return std::make_unique<RemoteEndpoint>(std::move(c), *info, timeout);
}

// --- server side --------------------------------------------------------------

// Serves one connection until EOF. Lines are answered in order.
inline void serve_stream(ModelEndpoint& endpoint, int read_fd, int write_fd) {
    detail::ignore_sigpipe();
    std::string buf;
    char chunk[4096];
    auto write_all = [&](const std::string& s) {
        std::size_t off = 0;
        while (off < s.size()) {
            const ssize_t n = ::write(write_fd, s.data() + off, s.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                return false;
            }
            off += static_cast<std::size_t>(n);
        }
        return true;
    };
    for (;;) {
        const ssize_t n = ::read(read_fd, chunk, sizeof chunk);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) return;
        buf.append(chunk, static_cast<std::size_t>(n));
        std::size_t nl;
        while ((nl = buf.find('\n')) != std::string::npos) {
            std::string line = buf.substr(0, nl);
            buf.erase(0, nl + 1);
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (!write_all(wire::handle_line(endpoint, line) + "\n")) return;
        }
    }
}

// Listening socket; each accepted connection is served on its own thread.
// The endpoint must tolerate concurrent queries (MockEndpoint does).
class SocketServer {
public:
    static SocketServer tcp(const std::string& host, std::uint16_t port) {
        const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw IoError(detail::errno_text("socket failed"));
        int one = 1;
        ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(port);
        addrinfo hints{};
        hints.ai_family = AF_INET;
        addrinfo* res = nullptr;
        if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || !res) {
            ::close(fd);
            throw ConfigError("cannot resolve listen host " + host);
        }
        addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
        ::freeaddrinfo(res);
        if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 16) != 0) {
            const auto msg = detail::errno_text("cannot listen on " + host + ":" + std::to_string(port));
            ::close(fd);
            throw IoError(msg);
        }
        socklen_t len = sizeof addr;
        ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
        return SocketServer(fd, ntohs(addr.sin_port));
    }

    static SocketServer unix_socket(const std::string& path) {
        const auto addr = unix_address(path);
        const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
        if (fd < 0) throw IoError(detail::errno_text("socket failed"));
        ::unlink(path.c_str());
        if (::bind(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd, 16) != 0) {
            const auto msg = detail::errno_text("cannot listen on unix:" + path);
            ::close(fd);
            throw IoError(msg);
        }
        return SocketServer(fd, 0);
    }

    SocketServer(SocketServer&& o) noexcept : fd_(std::exchange(o.fd_, -1)), port_(o.port_) {}
    SocketServer(const SocketServer&) = delete;
    ~SocketServer() { close(); }

    std::uint16_t port() const { return port_; }

    void close() {
        if (fd_ >= 0) {
            ::shutdown(fd_, SHUT_RDWR);
            ::close(fd_);
            fd_ = -1;
        }
    }

    // Accepts until `stop` is set or `max_connections` have been served
    // (0 = unlimited). Joins all connection threads before returning.
    void run(ModelEndpoint& endpoint, const std::atomic<bool>& stop, std::size_t max_connections = 0) {
        std::vector<std::thread> workers;
        std::size_t served = 0;
        while (!stop.load() && (max_connections == 0 || served < max_connections)) {
            pollfd p{fd_, POLLIN, 0};
            const int r = ::poll(&p, 1, 100);
            if (r <= 0) continue;
            const int conn = ::accept(fd_, nullptr, nullptr);
            if (conn < 0) continue;
            ++served;
            workers.emplace_back([&endpoint, conn] {
                serve_stream(endpoint, conn, conn);
                ::close(conn);
            });
        }
        for (auto& w : workers) w.join();
    }

private:
    SocketServer(int fd, std::uint16_t port) : fd_(fd), port_(port) {}
    int fd_;
    std::uint16_t port_;
};

}  // namespace uprobe
