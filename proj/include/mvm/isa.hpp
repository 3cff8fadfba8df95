#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mvm/value.hpp"

namespace mvm {

// Opcode numbering is part of the binary program format; do not reorder.
enum class Opcode : uint8_t {
    CONST = 1,
    LOAD,
    STORE,
    ADD,
    SUB,
    MUL,
    DIV,
    MOD,
    EQ,
    LT,
    LE,
    NOT,
    AND,
    OR,
    JMP,
    JMPIF,
    INVOKE,
    RETURN,
    NEWOBJ,
    GETFIELD,
    PUTFIELD,
    GETGLOBAL,
    PUTGLOBAL,
    MENTER,
    MEXIT,
    MWAIT,
    MNOTIFY,
    MNOTIFYALL,
    SLEEP,
    SPAWN,
    PRINT,
    // instrumented-only
    CHECKPOINT,
    APCINIT,
    APCSET,
    DISPATCH,
    MINVOKE_ENTER,
    MINVOKE_EXIT,
    MINVOKE_WAIT,
    MINVOKE_NOTIFY,
    MINVOKE_NOTIFYALL,
};

inline constexpr uint8_t kFirstOpcode = static_cast<uint8_t>(Opcode::CONST);
inline constexpr uint8_t kLastOpcode = static_cast<uint8_t>(Opcode::MINVOKE_NOTIFYALL);

inline std::string_view opcode_name(Opcode op) {
    switch (op) {
    case Opcode::CONST: return "CONST";
    case Opcode::LOAD: return "LOAD";
    case Opcode::STORE: return "STORE";
    case Opcode::ADD: return "ADD";
    case Opcode::SUB: return "SUB";
    case Opcode::MUL: return "MUL";
    case Opcode::DIV: return "DIV";
    case Opcode::MOD: return "MOD";
    case Opcode::EQ: return "EQ";
    case Opcode::LT: return "LT";
    case Opcode::LE: return "LE";
    case Opcode::NOT: return "NOT";
    case Opcode::AND: return "AND";
    case Opcode::OR: return "OR";
    case Opcode::JMP: return "JMP";
    case Opcode::JMPIF: return "JMPIF";
    case Opcode::INVOKE: return "INVOKE";
    case Opcode::RETURN: return "RETURN";
    case Opcode::NEWOBJ: return "NEWOBJ";
    case Opcode::GETFIELD: return "GETFIELD";
    case Opcode::PUTFIELD: return "PUTFIELD";
    case Opcode::GETGLOBAL: return "GETGLOBAL";
    case Opcode::PUTGLOBAL: return "PUTGLOBAL";
    case Opcode::MENTER: return "MENTER";
    case Opcode::MEXIT: return "MEXIT";
    case Opcode::MWAIT: return "MWAIT";
    case Opcode::MNOTIFY: return "MNOTIFY";
    case Opcode::MNOTIFYALL: return "MNOTIFYALL";
    case Opcode::SLEEP: return "SLEEP";
    case Opcode::SPAWN: return "SPAWN";
    case Opcode::PRINT: return "PRINT";
    case Opcode::CHECKPOINT: return "CHECKPOINT";
    case Opcode::APCINIT: return "APCINIT";
    case Opcode::APCSET: return "APCSET";
    case Opcode::DISPATCH: return "DISPATCH";
    case Opcode::MINVOKE_ENTER: return "MINVOKE_ENTER";
    case Opcode::MINVOKE_EXIT: return "MINVOKE_EXIT";
    case Opcode::MINVOKE_WAIT: return "MINVOKE_WAIT";
    case Opcode::MINVOKE_NOTIFY: return "MINVOKE_NOTIFY";
    case Opcode::MINVOKE_NOTIFYALL: return "MINVOKE_NOTIFYALL";
    }
    return "?";
}

/// Instrumented-only opcodes may appear only in methods flagged instrumented.
inline bool is_instrumented_only(Opcode op) { return op >= Opcode::CHECKPOINT; }

/// The uninstrumented monitor family, rewritten to MINVOKE_* by the
/// instrumentation pass.
inline bool is_monitor_source(Opcode op) { return op >= Opcode::MENTER && op <= Opcode::MNOTIFYALL; }

inline bool is_monitor_invoke(Opcode op) { return op >= Opcode::MINVOKE_ENTER && op <= Opcode::MINVOKE_NOTIFYALL; }

/// Invoke-class: the only instructions at which a thread may park, numbered
/// by the instrumentation pass into the invoke table.
inline bool is_invoke_class(Opcode op) {
    return op == Opcode::INVOKE || op == Opcode::SPAWN || op == Opcode::SLEEP || op == Opcode::CHECKPOINT ||
           is_monitor_invoke(op);
}

/// Instructions counted as V by the instrumentation report: the original
/// opcodes that are (or become) invoke-class after rewriting.
inline bool is_invoke_class_source(Opcode op) {
    return op == Opcode::INVOKE || op == Opcode::SPAWN || op == Opcode::SLEEP || is_monitor_source(op);
}

/// Operand stack effect {pops, pushes}. Everything except the arithmetic /
/// branch group is stack-neutral: arguments and results travel via locals.
inline std::pair<int, int> stack_effect(Opcode op) {
    switch (op) {
    case Opcode::CONST:
    case Opcode::LOAD: return {0, 1};
    case Opcode::STORE:
    case Opcode::JMPIF: return {1, 0};
    case Opcode::ADD:
    case Opcode::SUB:
    case Opcode::MUL:
    case Opcode::DIV:
    case Opcode::MOD:
    case Opcode::EQ:
    case Opcode::LT:
    case Opcode::LE:
    case Opcode::AND:
    case Opcode::OR: return {2, 1};
    case Opcode::NOT: return {1, 1};
    default: return {0, 0};
    }
}

/// One bytecode instruction. Operand fields are shared across opcodes:
///   a      — local index (LOAD/STORE/SLEEP/PRINT/monitor obj), jump target
///            (JMP/JMPIF), or APC value (APCSET)
///   b      — destination/source local (NEWOBJ/GETFIELD/PUTFIELD/globals)
///   sym    — method, class, field, or global name
///   args   — INVOKE/SPAWN argument locals, or DISPATCH target table
///   ret    — INVOKE/SPAWN destination local, or RETURN value local
///   imm    — CONST literal
struct Instruction {
    Opcode op = Opcode::RETURN;
    Value imm;
    uint32_t a = 0;
    uint32_t b = 0;
    std::string sym;
    std::vector<uint32_t> args;
    std::optional<uint32_t> ret;

    friend bool operator==(const Instruction &, const Instruction &) = default;
};

inline Instruction make_instr(Opcode op) {
    Instruction i;
    i.op = op;
    return i;
}

struct MethodDef {
    std::string name;
    uint32_t param_count = 0;
    uint32_t local_count = 0;
    bool instrumented = false;
    std::vector<Instruction> code;
    /// Present iff instrumented: pcs of invoke-class instructions in code
    /// order; index = invocation number used by APC dispatch.
    std::vector<uint32_t> invoke_table;

    friend bool operator==(const MethodDef &, const MethodDef &) = default;
};

inline constexpr uint16_t kProgramFormatVersion = 1;
inline constexpr std::string_view kEntryMethodName = "main";
/// pc of the entry checkpoint in every instrumented method; DISPATCH falls
/// through here when apc < 0.
inline constexpr uint32_t kEntryCheckpointPc = 2;

struct Program {
    uint16_t format_version = kProgramFormatVersion;
    std::map<std::string, std::vector<std::string>> classes; // name -> ordered field list
    std::vector<std::string> globals;                        // sorted, unique
    std::map<std::string, MethodDef> methods;
    std::string entry_method;
    std::array<uint8_t, 32> content_hash{};

    const MethodDef *find_method(const std::string &name) const {
        auto it = methods.find(name);
        return it == methods.end() ? nullptr : &it->second;
    }
    bool instrumented() const {
        for (const auto &[_, m] : methods)
            if (!m.instrumented) return false;
        return !methods.empty();
    }

    friend bool operator==(const Program &, const Program &) = default;
};

} // namespace mvm
