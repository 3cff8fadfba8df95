#pragma once

// Static verifier: forward dataflow assigns every reachable pc a unique
// operand-stack depth (merges must agree), then enforces the capture
// precondition — depth 0 at every position where a thread may park, at every
// dispatch target, at back-edge targets, and at returns. Programs with
// irreducible control flow are rejected here so the loop analysis can assume
// natural loops.

#include <deque>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "mvm/cfg.hpp"
#include "mvm/isa.hpp"

namespace mvm {

namespace rule {
inline constexpr std::string_view NonEmptyStackAtInvoke = "NonEmptyStackAtInvoke";
inline constexpr std::string_view NonEmptyStackAtReturn = "NonEmptyStackAtReturn";
inline constexpr std::string_view NonEmptyStackAtLoopHeader = "NonEmptyStackAtLoopHeader";
inline constexpr std::string_view NonEmptyStackAtDispatchTarget = "NonEmptyStackAtDispatchTarget";
inline constexpr std::string_view StackUnderflow = "StackUnderflow";
inline constexpr std::string_view DepthMismatch = "DepthMismatch";
inline constexpr std::string_view InvalidJumpTarget = "InvalidJumpTarget";
inline constexpr std::string_view FallsOffEnd = "FallsOffEnd";
inline constexpr std::string_view LocalOutOfRange = "LocalOutOfRange";
inline constexpr std::string_view IrreducibleLoop = "IrreducibleLoop";
inline constexpr std::string_view InstrumentedOnlyOpcode = "InstrumentedOnlyOpcode";
inline constexpr std::string_view BadPrologue = "BadPrologue";
inline constexpr std::string_view InvokeTableMismatch = "InvokeTableMismatch";
inline constexpr std::string_view ApcSetOutOfRange = "ApcSetOutOfRange";
} // namespace rule

struct Violation {
    std::string method;
    uint32_t pc = 0;
    std::string rule;
    std::string message;
};

struct MethodVerification {
    /// Static stack depth per pc; nullopt = unreachable.
    std::vector<std::optional<int>> depth;
    int max_depth = 0;
};

struct VerificationReport {
    std::map<std::string, MethodVerification> methods;
    std::vector<Violation> violations;
    bool accepted() const { return violations.empty(); }

    std::string summary() const {
        if (accepted()) return "accepted";
        std::string out;
        for (const auto &v : violations)
            out += v.method + ":" + std::to_string(v.pc) + ": " + v.rule + ": " + v.message + "\n";
        return out;
    }
};

namespace detail {

/// Local slots referenced by an instruction; APCSET's operand is an apc value,
/// not a local.
inline std::vector<uint32_t> referenced_locals(const Instruction &ins) {
    switch (ins.op) {
    case Opcode::LOAD:
    case Opcode::STORE:
    case Opcode::SLEEP:
    case Opcode::PRINT:
    case Opcode::MENTER:
    case Opcode::MEXIT:
    case Opcode::MWAIT:
    case Opcode::MNOTIFY:
    case Opcode::MNOTIFYALL:
    case Opcode::MINVOKE_ENTER:
    case Opcode::MINVOKE_EXIT:
    case Opcode::MINVOKE_WAIT:
    case Opcode::MINVOKE_NOTIFY:
    case Opcode::MINVOKE_NOTIFYALL: return {ins.a};
    case Opcode::GETFIELD:
    case Opcode::PUTFIELD: return {ins.a, ins.b};
    case Opcode::GETGLOBAL:
    case Opcode::PUTGLOBAL:
    case Opcode::NEWOBJ: return {ins.b};
    case Opcode::INVOKE:
    case Opcode::SPAWN: {
        auto v = ins.args;
        if (ins.ret) v.push_back(*ins.ret);
        return v;
    }
    case Opcode::RETURN: return ins.ret ? std::vector<uint32_t>{*ins.ret} : std::vector<uint32_t>{};
    default: return {};
    }
}

inline void verify_method(const MethodDef &m, VerificationReport &report) {
    auto &mv = report.methods[m.name];
    auto n = static_cast<uint32_t>(m.code.size());
    mv.depth.assign(n, std::nullopt);
    auto violate = [&](uint32_t pc, std::string_view r, std::string msg) {
        report.violations.push_back(Violation{m.name, pc, std::string(r), std::move(msg)});
    };

    if (n == 0) {
        violate(0, rule::FallsOffEnd, "method has no instructions");
        return;
    }

    bool structurally_ok = true;
    for (uint32_t pc = 0; pc < n; ++pc) {
        const auto &ins = m.code[pc];
        if (!m.instrumented && is_instrumented_only(ins.op)) {
            violate(pc, rule::InstrumentedOnlyOpcode,
                    std::string(opcode_name(ins.op)) + " outside an instrumented method");
            structurally_ok = false;
        }
        for (uint32_t slot : referenced_locals(ins))
            if (slot >= m.local_count) {
                violate(pc, rule::LocalOutOfRange,
                        "local " + std::to_string(slot) + " out of range (localCount " +
                            std::to_string(m.local_count) + ")");
                structurally_ok = false;
            }
        if (ins.op == Opcode::JMP || ins.op == Opcode::JMPIF) {
            if (ins.a >= n) {
                violate(pc, rule::InvalidJumpTarget, "jump to " + std::to_string(ins.a));
                structurally_ok = false;
            }
        }
        if (ins.op == Opcode::DISPATCH) {
            for (uint32_t t : ins.args)
                if (t >= n) {
                    violate(pc, rule::InvalidJumpTarget, "dispatch target " + std::to_string(t));
                    structurally_ok = false;
                }
        }
    }

    if (m.instrumented) {
        if (n < 4 || m.code[0].op != Opcode::APCINIT || m.code[1].op != Opcode::DISPATCH ||
            m.code[2].op != Opcode::CHECKPOINT) {
            violate(0, rule::BadPrologue, "instrumented method must begin APCINIT, DISPATCH, CHECKPOINT");
            structurally_ok = false;
        }
        std::vector<uint32_t> derived;
        for (uint32_t pc = 0; pc < n; ++pc)
            if (is_invoke_class(m.code[pc].op)) derived.push_back(pc);
        if (m.invoke_table != derived) {
            violate(0, rule::InvokeTableMismatch, "invoke table does not list the invoke-class pcs");
            structurally_ok = false;
        }
        if (structurally_ok && m.code[1].args != m.invoke_table) {
            violate(1, rule::InvokeTableMismatch, "DISPATCH table differs from the invoke table");
            structurally_ok = false;
        }
        for (uint32_t pc = 0; pc < n; ++pc)
            if (m.code[pc].op == Opcode::APCSET && m.code[pc].a > m.invoke_table.size())
                violate(pc, rule::ApcSetOutOfRange, "APCSET " + std::to_string(m.code[pc].a));
        if (m.local_count < m.param_count + 1) {
            violate(0, rule::BadPrologue, "instrumented method lacks the reserved APC local");
            structurally_ok = false;
        }
    }

    if (!structurally_ok) return; // dataflow needs valid targets

    // forward dataflow
    std::deque<uint32_t> worklist;
    std::set<uint32_t> mismatch_reported;
    mv.depth[0] = 0;
    worklist.push_back(0);
    while (!worklist.empty()) {
        uint32_t pc = worklist.front();
        worklist.pop_front();
        const auto &ins = m.code[pc];
        int d = *mv.depth[pc];
        auto [pops, pushes] = stack_effect(ins.op);
        if (d < pops) {
            violate(pc, rule::StackUnderflow,
                    "depth " + std::to_string(d) + " but " + std::string(opcode_name(ins.op)) + " pops " +
                        std::to_string(pops));
            continue;
        }
        int out = d - pops + pushes;
        mv.max_depth = std::max(mv.max_depth, std::max(d, out));
        for (uint32_t s : instruction_successors(m, pc)) {
            if (s >= n) {
                violate(pc, rule::FallsOffEnd, "execution falls past the last instruction");
                continue;
            }
            if (!mv.depth[s]) {
                mv.depth[s] = out;
                worklist.push_back(s);
            } else if (*mv.depth[s] != out && mismatch_reported.insert(s).second) {
                violate(s, rule::DepthMismatch,
                        "stack depth " + std::to_string(*mv.depth[s]) + " vs " + std::to_string(out) +
                            " at merge point");
            }
        }
    }

    // positional depth rules
    for (uint32_t pc = 0; pc < n; ++pc) {
        if (!mv.depth[pc]) continue;
        const auto &ins = m.code[pc];
        int d = *mv.depth[pc];
        if ((is_invoke_class(ins.op) || is_monitor_source(ins.op)) && d != 0)
            violate(pc, rule::NonEmptyStackAtInvoke,
                    "stack depth " + std::to_string(d) + " at " + std::string(opcode_name(ins.op)));
        if (ins.op == Opcode::RETURN && d != 0)
            violate(pc, rule::NonEmptyStackAtReturn, "stack depth " + std::to_string(d) + " at RETURN");
        if (ins.op == Opcode::DISPATCH)
            for (uint32_t t : ins.args)
                if (mv.depth[t] && *mv.depth[t] != 0 && !is_invoke_class(m.code[t].op))
                    violate(pc, rule::NonEmptyStackAtDispatchTarget,
                            "dispatch target " + std::to_string(t) + " has depth " + std::to_string(*mv.depth[t]));
    }

    Cfg cfg = build_cfg(m);
    if (cfg.irreducible_edge) {
        auto [src, dst] = *cfg.irreducible_edge;
        violate(src, rule::IrreducibleLoop,
                "edge to " + std::to_string(dst) + " re-enters a loop whose header does not dominate it");
    }
    for (auto [src, header] : cfg.back_edges)
        if (mv.depth[header] && *mv.depth[header] != 0)
            violate(header, rule::NonEmptyStackAtLoopHeader,
                    "stack depth " + std::to_string(*mv.depth[header]) + " at back-edge target");
}

} // namespace detail

/// Never traps: all findings are carried in the report.
inline VerificationReport verify(const Program &p) {
    VerificationReport report;
    for (const auto &[_, m] : p.methods) detail::verify_method(m, report);
    return report;
}

} // namespace mvm
