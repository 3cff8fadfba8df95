#pragma once

// Entity lifecycle host: a TCP node serving the wire protocol. Entities are
// submitted as programs (instrumented at load if needed), driven by a single
// scheduler thread, and migrated with a two-step commit: the source discards
// its VM only after the destination acknowledges a successful restore, and
// any earlier failure rolls the entity back to a runnable state.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <mutex>
#include <thread>

#include "mvm/image.hpp"
#include "mvm/instrument.hpp"
#include "mvm/wire.hpp"

namespace mvm {

inline constexpr uint32_t kMaxWireFrame = 256u * 1024 * 1024;

class Socket {
  public:
    Socket() = default;
    explicit Socket(int fd) : fd_(fd) {}
    Socket(Socket &&o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
    Socket &operator=(Socket &&o) noexcept {
        close();
        fd_ = o.fd_;
        o.fd_ = -1;
        return *this;
    }
    Socket(const Socket &) = delete;
    Socket &operator=(const Socket &) = delete;
    ~Socket() { close(); }

    int fd() const { return fd_; }
    bool valid() const { return fd_ >= 0; }
    void close() {
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

    bool write_all(const void *data, size_t n) {
        const auto *p = static_cast<const uint8_t *>(data);
        while (n > 0) {
            ssize_t w = ::send(fd_, p, n, MSG_NOSIGNAL);
            if (w <= 0) return false;
            p += w;
            n -= static_cast<size_t>(w);
        }
        return true;
    }

    /// 1 = filled, 0 = clean EOF before any byte, -1 = error / short read.
    int read_exact(void *data, size_t n) {
        auto *p = static_cast<uint8_t *>(data);
        size_t got = 0;
        while (got < n) {
            ssize_t r = ::recv(fd_, p + got, n - got, 0);
            if (r == 0) return got == 0 ? 0 : -1;
            if (r < 0) return -1;
            got += static_cast<size_t>(r);
        }
        return 1;
    }

  private:
    int fd_ = -1;
};

inline Result<Socket> connect_to(const std::string &host, uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo *res = nullptr;
    if (getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res)
        return make_error(errc::DestinationUnreachable, "cannot resolve " + host);
    int fd = -1;
    for (addrinfo *ai = res; ai; ai = ai->ai_next) {
        fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    freeaddrinfo(res);
    if (fd < 0)
        return make_error(errc::DestinationUnreachable, host + ":" + std::to_string(port) + " refused the connection");
    int one = 1;
    setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    return Socket{fd};
}

/// Reads one frame body (kind + payload). Empty vector = clean EOF;
/// "ConnectionClosed" = drop, "MalformedFrame" = unusable length prefix.
inline Result<std::optional<std::vector<uint8_t>>> read_frame(Socket &s) {
    uint8_t len_le[4];
    int r = s.read_exact(len_le, 4);
    if (r == 0) return std::optional<std::vector<uint8_t>>{};
    if (r < 0) return make_error("ConnectionClosed", "connection dropped mid-frame");
    uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(len_le[i]) << (8 * i);
    if (len == 0 || len > kMaxWireFrame)
        return make_error(errc::MalformedFrame, "frame length " + std::to_string(len));
    std::vector<uint8_t> body(len);
    if (s.read_exact(body.data(), len) != 1)
        return make_error("ConnectionClosed", "connection dropped mid-frame");
    return std::optional<std::vector<uint8_t>>{std::move(body)};
}

inline Result<WireMessage> request(Socket &s, const WireMessage &msg) {
    auto frame = encode_frame(msg);
    if (!s.write_all(frame.data(), frame.size()))
        return make_error(errc::DestinationUnreachable, "send failed");
    auto resp = read_frame(s);
    if (!resp) return resp.error();
    if (!resp.value()) return make_error(errc::DestinationUnreachable, "peer closed the connection");
    return decode_frame_body(*resp.value());
}

enum class ShellState : uint8_t { loaded, running, suspended, migrating_out, imported, done, failed };

inline std::string_view shell_state_name(ShellState s) {
    switch (s) {
    case ShellState::loaded: return "LOADED";
    case ShellState::running: return "RUNNING";
    case ShellState::suspended: return "SUSPENDED";
    case ShellState::migrating_out: return "MIGRATING_OUT";
    case ShellState::imported: return "IMPORTED";
    case ShellState::done: return "DONE";
    case ShellState::failed: return "FAILED";
    }
    return "?";
}

struct NodeConfig {
    std::string host = "127.0.0.1";
    uint16_t port = 0; // 0 = ephemeral
    bool auto_resume = true;
    uint32_t quantum = 10;
};

class NodeServer {
  public:
    explicit NodeServer(NodeConfig config) : config_(std::move(config)) {}
    ~NodeServer() { stop(); }

    Result<void> start() {
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) return make_error("BindFailure", "cannot create socket");
        int one = 1;
        setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_port = htons(config_.port);
        if (inet_pton(AF_INET, config_.host.c_str(), &addr.sin_addr) != 1)
            addr.sin_addr.s_addr = htonl(INADDR_ANY);
        if (::bind(fd, reinterpret_cast<sockaddr *>(&addr), sizeof(addr)) != 0) {
            ::close(fd);
            return make_error("BindFailure", "cannot bind " + config_.host + ":" + std::to_string(config_.port));
        }
        if (::listen(fd, 16) != 0) {
            ::close(fd);
            return make_error("BindFailure", "listen failed");
        }
        socklen_t alen = sizeof(addr);
        getsockname(fd, reinterpret_cast<sockaddr *>(&addr), &alen);
        bound_port_ = ntohs(addr.sin_port);
        listener_ = Socket{fd};
        running_ = true;
        accept_thread_ = std::thread([this] { accept_loop(); });
        driver_thread_ = std::thread([this] { driver_loop(); });
        return {};
    }

    void stop() {
        if (!running_.exchange(false)) return;
        ::shutdown(listener_.fd(), SHUT_RDWR);
        listener_.close();
        {
            std::lock_guard lk(conn_mu_);
            for (int fd : conn_fds_) ::shutdown(fd, SHUT_RDWR);
        }
        if (accept_thread_.joinable()) accept_thread_.join();
        if (driver_thread_.joinable()) driver_thread_.join();
        for (auto &t : conn_threads_)
            if (t.joinable()) t.join();
    }

    uint16_t port() const { return bound_port_; }

  private:
    struct Entity {
        ShellState state = ShellState::loaded;
        Program program;
        std::optional<Vm> vm;
        std::vector<Value> output; // survives VM discard
    };

    void accept_loop() {
        while (running_) {
            int fd = ::accept(listener_.fd(), nullptr, nullptr);
            if (fd < 0) break;
            {
                std::lock_guard lk(conn_mu_);
                conn_fds_.push_back(fd);
                conn_threads_.emplace_back([this, fd] { connection_loop(fd); });
            }
        }
    }

    void connection_loop(int fd) {
        {
            Socket sock{fd};
            while (running_) {
                auto frame = read_frame(sock);
                if (!frame) {
                    // a lying length prefix gets one ERROR before the close;
                    // a dropped connection gets nothing
                    if (frame.error().code == std::string(errc::MalformedFrame)) {
                        auto out = encode_frame(wire_error(frame.error()));
                        sock.write_all(out.data(), out.size());
                    }
                    break;
                }
                if (!frame.value()) break; // clean EOF
                WireMessage resp;
                bool resumed_after_ok = false;
                auto msg = decode_frame_body(*frame.value());
                if (!msg) {
                    Error e = msg.error();
                    if (e.code != std::string(errc::UnknownKind)) e.code = std::string(errc::MalformedFrame);
                    resp = wire_error(e);
                } else {
                    resp = process(msg.value(), resumed_after_ok);
                }
                auto out = encode_frame(resp);
                if (!sock.write_all(out.data(), out.size())) break;
                if (resumed_after_ok) apply_auto_resume(msg.value().entity_id);
            }
            std::lock_guard lk(conn_mu_);
            conn_fds_.erase(std::remove(conn_fds_.begin(), conn_fds_.end(), fd), conn_fds_.end());
        } // socket closes after the fd leaves the shutdown list
    }

    WireMessage process(const WireMessage &msg, bool &resume_after_reply) {
        switch (msg.kind) {
        case MsgKind::submit: return handle_submit(msg);
        case MsgKind::control: return handle_control(msg);
        case MsgKind::migrate: return handle_migrate(msg);
        case MsgKind::transfer: return handle_transfer(msg, resume_after_reply);
        case MsgKind::status_req: return handle_status();
        case MsgKind::output_req: return handle_output(msg);
        default: return wire_error(make_error(errc::UnknownKind, "node does not accept this message kind"));
        }
    }

    WireMessage handle_submit(const WireMessage &msg) {
        auto decoded = decode_program(msg.program_bytes);
        if (!decoded) return wire_error(decoded.error());
        Program program = decoded.take();
        if (!program.instrumented()) {
            auto instr = instrument_program(program); // verifies first
            if (!instr) return wire_error(instr.error());
            program = std::move(instr.value().program);
        } else {
            VerificationReport report = verify(program);
            if (!report.accepted()) return wire_error(make_error(errc::VerificationFailed, report.summary()));
        }
        std::lock_guard lk(mu_);
        std::string id = "e" + std::to_string(++entity_counter_);
        Entity e;
        e.state = ShellState::loaded;
        e.program = std::move(program);
        entities_.emplace(id, std::move(e));
        WireMessage resp;
        resp.kind = MsgKind::submit_ok;
        resp.entity_id = id;
        return resp;
    }

    WireMessage handle_control(const WireMessage &msg) {
        std::lock_guard lk(mu_);
        auto it = entities_.find(msg.entity_id);
        if (it == entities_.end())
            return wire_error(make_error(errc::UnknownEntity, "no entity '" + msg.entity_id + "'"));
        Entity &e = it->second;
        auto bad = [&] {
            return wire_error(make_error(errc::InvalidTransition,
                                         std::string(control_action_name(msg.action)) + " from " +
                                             std::string(shell_state_name(e.state))));
        };
        switch (msg.action) {
        case ControlAction::start: {
            if (e.state != ShellState::loaded) return bad();
            auto vm = Vm::load(e.program, VmOptions{config_.quantum});
            if (!vm) return wire_error(vm.error());
            e.vm.emplace(vm.take());
            e.state = ShellState::running;
            break;
        }
        case ControlAction::stop:
            if (e.state != ShellState::loaded && e.state != ShellState::running &&
                e.state != ShellState::suspended && e.state != ShellState::imported)
                return bad();
            finish_entity(e, ShellState::done);
            break;
        case ControlAction::suspend: {
            if (e.state != ShellState::running || !e.vm) return bad();
            if (auto v = e.vm->suspend(); !v) return wire_error(v.error());
            e.state = ShellState::suspended; // threads drain at their next checkpoints
            break;
        }
        case ControlAction::resume: {
            if ((e.state != ShellState::suspended && e.state != ShellState::imported) || !e.vm) return bad();
            if (auto v = e.vm->resume(); !v) return wire_error(v.error());
            e.state = ShellState::running;
            break;
        }
        }
        WireMessage resp;
        resp.kind = MsgKind::control_ok;
        return resp;
    }

    WireMessage handle_migrate(const WireMessage &msg) {
        std::vector<uint8_t> program_bytes, image_bytes;
        ShellState prior;
        {
            std::lock_guard lk(mu_);
            auto it = entities_.find(msg.entity_id);
            if (it == entities_.end())
                return wire_error(make_error(errc::UnknownEntity, "no entity '" + msg.entity_id + "'"));
            Entity &e = it->second;
            if ((e.state != ShellState::running && e.state != ShellState::suspended) || !e.vm)
                return wire_error(make_error(errc::InvalidTransition,
                                             "migrate from " + std::string(shell_state_name(e.state))));
            prior = e.state;
            if (e.state == ShellState::running) {
                if (auto v = e.vm->suspend(); !v) return wire_error(v.error());
                e.state = ShellState::suspended;
            }
            // drain every thread to a capturable park state
            uint64_t guard = 0;
            while (!e.vm->all_parked()) {
                StepOutcome o = e.vm->step();
                if (o == StepOutcome::all_done || o == StepOutcome::trapped) {
                    finish_entity(e, o == StepOutcome::trapped ? ShellState::failed : ShellState::done);
                    return wire_error(make_error(errc::InvalidTransition, "entity finished while draining"));
                }
                if (++guard > (1u << 24))
                    return wire_error(make_error("DrainTimeout", "threads did not reach checkpoints"));
            }
            auto img = capture(*e.vm, msg.entity_id);
            if (!img) return wire_error(img.error());
            auto prog = encode_program(e.program);
            if (!prog) return wire_error(prog.error());
            program_bytes = prog.take();
            image_bytes = encode_image(img.value());
            e.state = ShellState::migrating_out;
        }

        // network phase, off the node lock
        auto finish_failure = [&](Error err) {
            std::lock_guard lk(mu_);
            Entity &e = entities_.at(msg.entity_id);
            if (prior == ShellState::running) {
                e.vm->resume();
                e.state = ShellState::running;
            } else {
                e.state = ShellState::suspended;
            }
            return wire_error(std::move(err));
        };
        auto sock = connect_to(msg.host, msg.port);
        if (!sock) return finish_failure(sock.error());
        WireMessage transfer;
        transfer.kind = MsgKind::transfer;
        transfer.entity_id = msg.entity_id;
        transfer.program_bytes = std::move(program_bytes);
        transfer.image_bytes = std::move(image_bytes);
        auto resp = request(sock.value(), transfer);
        if (!resp) return finish_failure(resp.error());
        if (resp.value().kind != MsgKind::transfer_ok)
            return finish_failure(make_error(errc::TransferRejected, resp.value().error_code + ": " +
                                                                         resp.value().error_message));
        {
            // exactly-one-active-copy: drop the VM only after TRANSFER_OK
            std::lock_guard lk(mu_);
            Entity &e = entities_.at(msg.entity_id);
            finish_entity(e, ShellState::done);
        }
        WireMessage ok;
        ok.kind = MsgKind::control_ok;
        return ok;
    }

    WireMessage handle_transfer(const WireMessage &msg, bool &resume_after_reply) {
        auto program = decode_program(msg.program_bytes);
        if (!program) return wire_error(program.error());
        auto img = decode_image(msg.image_bytes);
        if (!img) return wire_error(img.error());
        auto vm = restore(program.value(), img.value(), VmOptions{config_.quantum});
        if (!vm) return wire_error(vm.error());
        {
            std::lock_guard lk(mu_);
            if (entities_.count(msg.entity_id))
                return wire_error(make_error(errc::DuplicateEntity, "entity '" + msg.entity_id + "' already exists"));
            Entity e;
            e.state = ShellState::imported;
            e.program = program.take();
            e.vm.emplace(vm.take());
            entities_.emplace(msg.entity_id, std::move(e));
        }
        resume_after_reply = config_.auto_resume;
        WireMessage ok;
        ok.kind = MsgKind::transfer_ok;
        return ok;
    }

    void apply_auto_resume(const std::string &entity_id) {
        std::lock_guard lk(mu_);
        auto it = entities_.find(entity_id);
        if (it == entities_.end() || it->second.state != ShellState::imported) return;
        it->second.vm->resume();
        it->second.state = ShellState::running;
    }

    WireMessage handle_status() {
        std::lock_guard lk(mu_);
        WireMessage resp;
        resp.kind = MsgKind::status_resp;
        for (const auto &[id, e] : entities_)
            resp.entities.push_back(EntityStatus{id, std::string(shell_state_name(e.state))});
        return resp;
    }

    WireMessage handle_output(const WireMessage &msg) {
        std::lock_guard lk(mu_);
        auto it = entities_.find(msg.entity_id);
        if (it == entities_.end())
            return wire_error(make_error(errc::UnknownEntity, "no entity '" + msg.entity_id + "'"));
        WireMessage resp;
        resp.kind = MsgKind::output_resp;
        resp.values = it->second.vm ? it->second.vm->output_trace() : it->second.output;
        return resp;
    }

    void finish_entity(Entity &e, ShellState state) {
        if (e.vm) e.output = e.vm->output_trace();
        e.vm.reset();
        e.state = state;
    }

    void driver_loop() {
        while (running_) {
            bool progressed = false;
            {
                std::lock_guard lk(mu_);
                for (auto &[id, e] : entities_) {
                    if (!e.vm) continue;
                    bool drain = e.state == ShellState::suspended && !e.vm->all_parked();
                    if (e.state != ShellState::running && !drain) continue;
                    StepOutcome outcome = StepOutcome::all_parked;
                    for (int i = 0; i < 64; ++i) {
                        outcome = e.vm->step();
                        if (outcome != StepOutcome::progressed) break;
                        progressed = true;
                    }
                    if (outcome == StepOutcome::all_done) finish_entity(e, ShellState::done);
                    if (outcome == StepOutcome::trapped) finish_entity(e, ShellState::failed);
                }
            }
            if (!progressed) std::this_thread::sleep_for(std::chrono::microseconds(500));
        }
    }

    NodeConfig config_;
    Socket listener_;
    uint16_t bound_port_ = 0;
    std::atomic<bool> running_{false};
    std::thread accept_thread_;
    std::thread driver_thread_;
    std::mutex conn_mu_;
    std::vector<int> conn_fds_;
    std::vector<std::thread> conn_threads_;
    std::mutex mu_;
    std::map<std::string, Entity> entities_;
    uint64_t entity_counter_ = 0;
};

} // namespace mvm
