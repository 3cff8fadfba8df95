#pragma once

// Binary program format "MVMP": magic, u16 version, entry method, then the
// class / global / method sections with u32 counts. Integers little-endian,
// strings u16-length-prefixed UTF-8, and a trailing 32-byte SHA-256 over
// everything before it. Encoding is canonical: decode-then-re-encode is
// byte-identical.

#include <algorithm>

#include "mvm/bytes.hpp"
#include "mvm/isa.hpp"
#include "mvm/sha256.hpp"

namespace mvm {

inline constexpr std::array<uint8_t, 4> kProgramMagic = {'M', 'V', 'M', 'P'};

namespace detail {

inline void encode_instruction(ByteWriter &w, const Instruction &ins) {
    w.u8(static_cast<uint8_t>(ins.op));
    switch (ins.op) {
    case Opcode::CONST: w.value(ins.imm); break;
    case Opcode::LOAD:
    case Opcode::STORE:
    case Opcode::JMP:
    case Opcode::JMPIF:
    case Opcode::SLEEP:
    case Opcode::PRINT:
    case Opcode::APCSET:
    case Opcode::MENTER:
    case Opcode::MEXIT:
    case Opcode::MWAIT:
    case Opcode::MNOTIFY:
    case Opcode::MNOTIFYALL:
    case Opcode::MINVOKE_ENTER:
    case Opcode::MINVOKE_EXIT:
    case Opcode::MINVOKE_WAIT:
    case Opcode::MINVOKE_NOTIFY:
    case Opcode::MINVOKE_NOTIFYALL: w.u32(ins.a); break;
    case Opcode::INVOKE:
    case Opcode::SPAWN:
        w.str(ins.sym);
        w.u8(ins.ret ? 1 : 0);
        if (ins.ret) w.u32(*ins.ret);
        w.u32(static_cast<uint32_t>(ins.args.size()));
        for (uint32_t arg : ins.args) w.u32(arg);
        break;
    case Opcode::RETURN:
        w.u8(ins.ret ? 1 : 0);
        if (ins.ret) w.u32(*ins.ret);
        break;
    case Opcode::NEWOBJ:
        w.str(ins.sym);
        w.u32(ins.b);
        break;
    case Opcode::GETFIELD:
    case Opcode::PUTFIELD:
        w.u32(ins.a);
        w.str(ins.sym);
        w.u32(ins.b);
        break;
    case Opcode::GETGLOBAL:
    case Opcode::PUTGLOBAL:
        w.str(ins.sym);
        w.u32(ins.b);
        break;
    case Opcode::DISPATCH:
        w.u32(static_cast<uint32_t>(ins.args.size()));
        for (uint32_t t : ins.args) w.u32(t);
        break;
    default: break; // ADD..OR, NOT, CHECKPOINT, APCINIT: no operands
    }
}

inline Result<Instruction> decode_instruction(ByteReader &r) {
    auto opb = r.u8();
    if (!opb) return opb.error();
    if (opb.value() < kFirstOpcode || opb.value() > kLastOpcode)
        return make_error(errc::BadEncoding, "bad opcode byte " + std::to_string(opb.value()));
    Instruction ins;
    ins.op = static_cast<Opcode>(opb.value());
    auto need_u32 = [&](uint32_t &out) -> Result<void> {
        auto v = r.u32();
        if (!v) return v.error();
        out = v.value();
        return {};
    };
    switch (ins.op) {
    case Opcode::CONST: {
        auto v = r.value();
        if (!v) return v.error();
        ins.imm = v.take();
        break;
    }
    case Opcode::LOAD:
    case Opcode::STORE:
    case Opcode::JMP:
    case Opcode::JMPIF:
    case Opcode::SLEEP:
    case Opcode::PRINT:
    case Opcode::APCSET:
    case Opcode::MENTER:
    case Opcode::MEXIT:
    case Opcode::MWAIT:
    case Opcode::MNOTIFY:
    case Opcode::MNOTIFYALL:
    case Opcode::MINVOKE_ENTER:
    case Opcode::MINVOKE_EXIT:
    case Opcode::MINVOKE_WAIT:
    case Opcode::MINVOKE_NOTIFY:
    case Opcode::MINVOKE_NOTIFYALL:
        if (auto v = need_u32(ins.a); !v) return v.error();
        break;
    case Opcode::INVOKE:
    case Opcode::SPAWN: {
        auto name = r.str();
        if (!name) return name.error();
        ins.sym = name.take();
        auto has_ret = r.u8();
        if (!has_ret) return has_ret.error();
        if (has_ret.value() > 1) return make_error(errc::BadEncoding, "bad optional flag");
        if (has_ret.value()) {
            uint32_t dst = 0;
            if (auto v = need_u32(dst); !v) return v.error();
            ins.ret = dst;
        }
        auto argc = r.u32();
        if (!argc) return argc.error();
        if (argc.value() > r.remaining()) return make_error(errc::Truncated, "argument list exceeds payload");
        for (uint32_t i = 0; i < argc.value(); ++i) {
            uint32_t arg = 0;
            if (auto v = need_u32(arg); !v) return v.error();
            ins.args.push_back(arg);
        }
        break;
    }
    case Opcode::RETURN: {
        auto has_ret = r.u8();
        if (!has_ret) return has_ret.error();
        if (has_ret.value() > 1) return make_error(errc::BadEncoding, "bad optional flag");
        if (has_ret.value()) {
            uint32_t src = 0;
            if (auto v = need_u32(src); !v) return v.error();
            ins.ret = src;
        }
        break;
    }
    case Opcode::NEWOBJ: {
        auto name = r.str();
        if (!name) return name.error();
        ins.sym = name.take();
        if (auto v = need_u32(ins.b); !v) return v.error();
        break;
    }
    case Opcode::GETFIELD:
    case Opcode::PUTFIELD: {
        if (auto v = need_u32(ins.a); !v) return v.error();
        auto name = r.str();
        if (!name) return name.error();
        ins.sym = name.take();
        if (auto v = need_u32(ins.b); !v) return v.error();
        break;
    }
    case Opcode::GETGLOBAL:
    case Opcode::PUTGLOBAL: {
        auto name = r.str();
        if (!name) return name.error();
        ins.sym = name.take();
        if (auto v = need_u32(ins.b); !v) return v.error();
        break;
    }
    case Opcode::DISPATCH: {
        auto count = r.u32();
        if (!count) return count.error();
        if (count.value() > r.remaining()) return make_error(errc::Truncated, "dispatch table exceeds payload");
        for (uint32_t i = 0; i < count.value(); ++i) {
            uint32_t t = 0;
            if (auto v = need_u32(t); !v) return v.error();
            ins.args.push_back(t);
        }
        break;
    }
    default: break;
    }
    return ins;
}

inline void encode_method(ByteWriter &w, const MethodDef &m) {
    w.str(m.name);
    w.u32(m.param_count);
    w.u32(m.local_count);
    w.u8(m.instrumented ? 1 : 0);
    w.u32(static_cast<uint32_t>(m.code.size()));
    for (const auto &ins : m.code) encode_instruction(w, ins);
    if (m.instrumented) {
        w.u32(static_cast<uint32_t>(m.invoke_table.size()));
        for (uint32_t pc : m.invoke_table) w.u32(pc);
    }
}

inline Result<void> validate_program_shape(const Program &p) {
    if (p.methods.empty() || p.entry_method.empty())
        return make_error(errc::NoEntryMethod, "program has no entry method");
    const MethodDef *entry = p.find_method(p.entry_method);
    if (!entry) return make_error(errc::NoEntryMethod, "entry method '" + p.entry_method + "' not defined");
    if (entry->param_count != 0)
        return make_error(errc::NoEntryMethod, "entry method must take no parameters");
    for (const auto &[name, m] : p.methods) {
        if (m.name != name) return make_error(errc::BadEncoding, "method key/name mismatch for '" + name + "'");
        if (m.local_count < m.param_count)
            return make_error(errc::BadEncoding, "method '" + name + "' declares fewer locals than parameters");
        if (!m.instrumented && !m.invoke_table.empty())
            return make_error(errc::BadEncoding, "method '" + name + "' carries an invoke table without the flag");
    }
    if (!std::is_sorted(p.globals.begin(), p.globals.end()) ||
        std::adjacent_find(p.globals.begin(), p.globals.end()) != p.globals.end())
        return make_error(errc::BadEncoding, "global list not sorted/unique");
    return {};
}

} // namespace detail

/// Serializes everything except the trailing hash.
inline std::vector<uint8_t> encode_program_body(const Program &p) {
    ByteWriter w;
    w.raw(kProgramMagic.data(), kProgramMagic.size());
    w.u16(p.format_version);
    w.str(p.entry_method);
    w.u32(static_cast<uint32_t>(p.classes.size()));
    for (const auto &[name, fields] : p.classes) {
        w.str(name);
        w.u32(static_cast<uint32_t>(fields.size()));
        for (const auto &f : fields) w.str(f);
    }
    w.u32(static_cast<uint32_t>(p.globals.size()));
    for (const auto &g : p.globals) w.str(g);
    w.u32(static_cast<uint32_t>(p.methods.size()));
    for (const auto &[_, m] : p.methods) detail::encode_method(w, m);
    return w.take();
}

/// Recomputes and stores the content hash; call after any mutation.
inline void refresh_content_hash(Program &p) {
    p.content_hash = sha256(encode_program_body(p));
}

inline Result<std::vector<uint8_t>> encode_program(const Program &p) {
    if (auto v = detail::validate_program_shape(p); !v) return v.error();
    auto body = encode_program_body(p);
    auto digest = sha256(body);
    body.insert(body.end(), digest.begin(), digest.end());
    return body;
}

inline Result<Program> decode_program(const std::vector<uint8_t> &bytes) {
    ByteReader r(bytes);
    auto magic = r.blob(4);
    if (!magic) return magic.error();
    if (!std::equal(magic.value().begin(), magic.value().end(), kProgramMagic.begin()))
        return make_error(errc::BadMagic, "not an MVMP program");
    auto version = r.u16();
    if (!version) return version.error();
    if (version.value() != kProgramFormatVersion)
        return make_error(errc::UnsupportedVersion, "program format version " + std::to_string(version.value()));
    Program p;
    p.format_version = version.value();
    auto entry = r.str();
    if (!entry) return entry.error();
    p.entry_method = entry.take();

    auto class_count = r.u32();
    if (!class_count) return class_count.error();
    for (uint32_t i = 0; i < class_count.value(); ++i) {
        auto name = r.str();
        if (!name) return name.error();
        auto field_count = r.u32();
        if (!field_count) return field_count.error();
        if (field_count.value() > r.remaining()) return make_error(errc::Truncated, "field list exceeds payload");
        std::vector<std::string> fields;
        for (uint32_t j = 0; j < field_count.value(); ++j) {
            auto f = r.str();
            if (!f) return f.error();
            fields.push_back(f.take());
        }
        if (!p.classes.emplace(name.take(), std::move(fields)).second)
            return make_error(errc::BadEncoding, "duplicate class");
    }

    auto global_count = r.u32();
    if (!global_count) return global_count.error();
    for (uint32_t i = 0; i < global_count.value(); ++i) {
        auto g = r.str();
        if (!g) return g.error();
        p.globals.push_back(g.take());
    }

    auto method_count = r.u32();
    if (!method_count) return method_count.error();
    for (uint32_t i = 0; i < method_count.value(); ++i) {
        MethodDef m;
        auto name = r.str();
        if (!name) return name.error();
        m.name = name.take();
        auto pcount = r.u32();
        if (!pcount) return pcount.error();
        m.param_count = pcount.value();
        auto lcount = r.u32();
        if (!lcount) return lcount.error();
        m.local_count = lcount.value();
        auto flag = r.u8();
        if (!flag) return flag.error();
        if (flag.value() > 1) return make_error(errc::BadEncoding, "bad instrumented flag");
        m.instrumented = flag.value() == 1;
        auto code_len = r.u32();
        if (!code_len) return code_len.error();
        if (code_len.value() > r.remaining()) return make_error(errc::Truncated, "code exceeds payload");
        for (uint32_t pc = 0; pc < code_len.value(); ++pc) {
            auto ins = detail::decode_instruction(r);
            if (!ins) return ins.error();
            m.code.push_back(ins.take());
        }
        if (m.instrumented) {
            auto table_len = r.u32();
            if (!table_len) return table_len.error();
            if (table_len.value() > r.remaining()) return make_error(errc::Truncated, "invoke table exceeds payload");
            for (uint32_t j = 0; j < table_len.value(); ++j) {
                auto pc = r.u32();
                if (!pc) return pc.error();
                m.invoke_table.push_back(pc.value());
            }
        }
        std::string key = m.name;
        if (!p.methods.emplace(std::move(key), std::move(m)).second)
            return make_error(errc::BadEncoding, "duplicate method");
    }

    auto stored_hash = r.blob(32);
    if (!stored_hash) return stored_hash.error();
    if (!r.at_end()) return make_error(errc::TrailingBytes, "bytes after content hash");
    auto computed = sha256(bytes.data(), bytes.size() - 32);
    if (!std::equal(computed.begin(), computed.end(), stored_hash.value().begin()))
        return make_error(errc::HashMismatch, "content hash does not match payload");
    std::copy(computed.begin(), computed.end(), p.content_hash.begin());
    if (auto v = detail::validate_program_shape(p); !v) return v.error();
    return p;
}

} // namespace mvm
