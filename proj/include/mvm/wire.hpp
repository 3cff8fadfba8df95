#pragma once

// Node wire protocol: u32 LE length prefix counting the rest of the frame
// (one kind byte plus the payload), then per-kind fields using the same
// integer/string encoding rules as the program format. One request/response
// pair per frame; connections are reusable.

#include "mvm/bytes.hpp"

namespace mvm {

enum class MsgKind : uint8_t {
    submit = 1,
    submit_ok = 2,
    control = 3,
    control_ok = 4,
    migrate = 5,
    transfer = 6,
    transfer_ok = 7,
    status_req = 8,
    status_resp = 9,
    output_req = 10,
    output_resp = 11,
    error = 255,
};

enum class ControlAction : uint8_t { start = 0, stop = 1, suspend = 2, resume = 3 };

inline std::string_view control_action_name(ControlAction a) {
    switch (a) {
    case ControlAction::start: return "start";
    case ControlAction::stop: return "stop";
    case ControlAction::suspend: return "suspend";
    case ControlAction::resume: return "resume";
    }
    return "?";
}

struct EntityStatus {
    std::string entity_id;
    std::string state;
};

struct WireMessage {
    MsgKind kind = MsgKind::error;
    std::string entity_id;
    ControlAction action = ControlAction::start;
    std::string host;
    uint16_t port = 0;
    std::vector<uint8_t> program_bytes;
    std::vector<uint8_t> image_bytes;
    std::vector<EntityStatus> entities;
    std::vector<Value> values;
    std::string error_code;
    std::string error_message;
};

inline WireMessage wire_error(const Error &e) {
    WireMessage m;
    m.kind = MsgKind::error;
    m.error_code = e.code;
    m.error_message = e.message;
    return m;
}

/// Whole frame including the length prefix.
inline std::vector<uint8_t> encode_frame(const WireMessage &m) {
    ByteWriter w;
    w.u8(static_cast<uint8_t>(m.kind));
    switch (m.kind) {
    case MsgKind::submit:
        w.u32(static_cast<uint32_t>(m.program_bytes.size()));
        w.raw(m.program_bytes.data(), m.program_bytes.size());
        break;
    case MsgKind::submit_ok: w.str(m.entity_id); break;
    case MsgKind::control:
        w.str(m.entity_id);
        w.u8(static_cast<uint8_t>(m.action));
        break;
    case MsgKind::control_ok:
    case MsgKind::transfer_ok:
    case MsgKind::status_req: break;
    case MsgKind::migrate:
        w.str(m.entity_id);
        w.str(m.host);
        w.u16(m.port);
        break;
    case MsgKind::transfer:
        w.str(m.entity_id);
        w.u32(static_cast<uint32_t>(m.program_bytes.size()));
        w.raw(m.program_bytes.data(), m.program_bytes.size());
        w.u32(static_cast<uint32_t>(m.image_bytes.size()));
        w.raw(m.image_bytes.data(), m.image_bytes.size());
        break;
    case MsgKind::status_resp:
        w.u32(static_cast<uint32_t>(m.entities.size()));
        for (const auto &e : m.entities) {
            w.str(e.entity_id);
            w.str(e.state);
        }
        break;
    case MsgKind::output_req: w.str(m.entity_id); break;
    case MsgKind::output_resp:
        w.u32(static_cast<uint32_t>(m.values.size()));
        for (const auto &v : m.values) w.value(v);
        break;
    case MsgKind::error:
        w.str(m.error_code);
        w.str(m.error_message);
        break;
    }
    ByteWriter framed;
    framed.u32(static_cast<uint32_t>(w.size()));
    framed.raw(w.bytes().data(), w.size());
    return framed.take();
}

/// Parses one frame body (kind byte + payload, no length prefix).
inline Result<WireMessage> decode_frame_body(const std::vector<uint8_t> &body) {
    ByteReader r(body);
    auto kind = r.u8();
    if (!kind) return kind.error();
    WireMessage m;
    switch (static_cast<MsgKind>(kind.value())) {
    case MsgKind::submit:
    case MsgKind::submit_ok:
    case MsgKind::control:
    case MsgKind::control_ok:
    case MsgKind::migrate:
    case MsgKind::transfer:
    case MsgKind::transfer_ok:
    case MsgKind::status_req:
    case MsgKind::status_resp:
    case MsgKind::output_req:
    case MsgKind::output_resp:
    case MsgKind::error: m.kind = static_cast<MsgKind>(kind.value()); break;
    default: return make_error(errc::UnknownKind, "unknown message kind " + std::to_string(kind.value()));
    }
    auto read_blob = [&](std::vector<uint8_t> &out) -> Result<void> {
        auto n = r.u32();
        if (!n) return n.error();
        auto b = r.blob(n.value());
        if (!b) return b.error();
        out = b.take();
        return {};
    };
    switch (m.kind) {
    case MsgKind::submit:
        if (auto v = read_blob(m.program_bytes); !v) return v.error();
        break;
    case MsgKind::submit_ok:
    case MsgKind::output_req: {
        auto id = r.str();
        if (!id) return id.error();
        m.entity_id = id.take();
        break;
    }
    case MsgKind::control: {
        auto id = r.str();
        if (!id) return id.error();
        m.entity_id = id.take();
        auto a = r.u8();
        if (!a) return a.error();
        if (a.value() > 3) return make_error(errc::BadEncoding, "bad control action");
        m.action = static_cast<ControlAction>(a.value());
        break;
    }
    case MsgKind::migrate: {
        auto id = r.str();
        if (!id) return id.error();
        m.entity_id = id.take();
        auto host = r.str();
        if (!host) return host.error();
        m.host = host.take();
        auto port = r.u16();
        if (!port) return port.error();
        m.port = port.value();
        break;
    }
    case MsgKind::transfer: {
        auto id = r.str();
        if (!id) return id.error();
        m.entity_id = id.take();
        if (auto v = read_blob(m.program_bytes); !v) return v.error();
        if (auto v = read_blob(m.image_bytes); !v) return v.error();
        break;
    }
    case MsgKind::status_resp: {
        auto n = r.u32();
        if (!n) return n.error();
        for (uint32_t i = 0; i < n.value(); ++i) {
            auto id = r.str();
            if (!id) return id.error();
            auto st = r.str();
            if (!st) return st.error();
            m.entities.push_back(EntityStatus{id.take(), st.take()});
        }
        break;
    }
    case MsgKind::output_resp: {
        auto n = r.u32();
        if (!n) return n.error();
        for (uint32_t i = 0; i < n.value(); ++i) {
            auto v = r.value();
            if (!v) return v.error();
            m.values.push_back(v.take());
        }
        break;
    }
    case MsgKind::error: {
        auto code = r.str();
        if (!code) return code.error();
        m.error_code = code.take();
        auto msg = r.str();
        if (!msg) return msg.error();
        m.error_message = msg.take();
        break;
    }
    default: break;
    }
    if (!r.at_end()) return make_error(errc::MalformedFrame, "frame length does not match payload");
    return m;
}

} // namespace mvm
