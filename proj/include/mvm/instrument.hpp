#pragma once

// Load-time transformation: rewrites monitor opcodes to mobile-monitor
// invocations, inserts a checkpoint at the method start and at every
// innermost-loop header, numbers the invoke-class instructions, threads the
// APC through APCSET stores, prepends the APCINIT/DISPATCH prologue, and
// relocates every branch. Exact size identity per method:
//   countAfter - countBefore = 4 + 2*L + V
// where L = innermost-loop headers checkpointed and V = original
// invoke-class instructions.

#include <json.hpp>

#include "mvm/loops.hpp"
#include "mvm/program_codec.hpp"
#include "mvm/verifier.hpp"

namespace mvm {

struct MethodInstrumentation {
    std::string name;
    uint32_t count_before = 0;
    uint32_t count_after = 0;
    uint32_t innermost_headers = 0; // L
    uint32_t invoke_class_count = 0; // V
    uint32_t delta() const { return count_after - count_before; }
};

struct InstrumentationReport {
    std::vector<MethodInstrumentation> methods;
    uint64_t total_before = 0;
    uint64_t total_after = 0;
    uint64_t total_delta() const { return total_after - total_before; }
    double overhead_pct() const {
        return total_before == 0 ? 0.0 : 100.0 * static_cast<double>(total_delta()) / static_cast<double>(total_before);
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["methods"] = nlohmann::ordered_json::array();
        for (const auto &m : methods) {
            j["methods"].push_back({{"name", m.name},
                                    {"countBefore", m.count_before},
                                    {"countAfter", m.count_after},
                                    {"innermostLoopHeaders", m.innermost_headers},
                                    {"invokeClassCount", m.invoke_class_count},
                                    {"delta", m.delta()}});
        }
        j["totalBefore"] = total_before;
        j["totalAfter"] = total_after;
        j["totalDelta"] = total_delta();
        j["overheadPct"] = overhead_pct();
        return j;
    }
};

namespace detail {

inline Opcode rewrite_monitor(Opcode op) {
    switch (op) {
    case Opcode::MENTER: return Opcode::MINVOKE_ENTER;
    case Opcode::MEXIT: return Opcode::MINVOKE_EXIT;
    case Opcode::MWAIT: return Opcode::MINVOKE_WAIT;
    case Opcode::MNOTIFY: return Opcode::MINVOKE_NOTIFY;
    case Opcode::MNOTIFYALL: return Opcode::MINVOKE_NOTIFYALL;
    default: return op;
    }
}

} // namespace detail

inline Result<MethodDef> instrument_method(const MethodDef &m, const LoopAnalysis &loops) {
    if (m.instrumented)
        return make_error(errc::AlreadyInstrumented, "method '" + m.name + "' is already instrumented");
    std::set<uint32_t> headers(loops.checkpoint_headers.begin(), loops.checkpoint_headers.end());

    MethodDef out;
    out.name = m.name;
    out.param_count = m.param_count;
    out.local_count = m.local_count + 1; // reserved APC cell at local_count-1
    out.instrumented = true;

    auto &code = out.code;
    code.push_back(make_instr(Opcode::APCINIT));
    code.push_back(make_instr(Opcode::DISPATCH)); // table patched below
    code.push_back(make_instr(Opcode::CHECKPOINT));
    code.push_back(make_instr(Opcode::APCSET)); // operands patched below

    auto n = static_cast<uint32_t>(m.code.size());
    std::vector<uint32_t> new_pos(n, 0), header_pos(n, 0);
    for (uint32_t pc = 0; pc < n; ++pc) {
        if (headers.count(pc)) {
            header_pos[pc] = static_cast<uint32_t>(code.size());
            code.push_back(make_instr(Opcode::CHECKPOINT));
            code.push_back(make_instr(Opcode::APCSET));
        }
        new_pos[pc] = static_cast<uint32_t>(code.size());
        Instruction ins = m.code[pc];
        ins.op = detail::rewrite_monitor(ins.op);
        code.push_back(std::move(ins));
        if (is_invoke_class(code.back().op)) code.push_back(make_instr(Opcode::APCSET));
    }

    // relocate branches; a jump to a checkpointed header lands on the
    // checkpoint so the execution check runs before any loop body code
    auto map_target = [&](uint32_t t) { return headers.count(t) ? header_pos[t] : new_pos[t]; };
    for (auto &ins : code)
        if (ins.op == Opcode::JMP || ins.op == Opcode::JMPIF) ins.a = map_target(ins.a);

    for (uint32_t pc = 0; pc < code.size(); ++pc)
        if (is_invoke_class(code[pc].op)) out.invoke_table.push_back(pc);
    uint32_t k = 0;
    for (uint32_t pc = 0; pc < code.size(); ++pc)
        if (is_invoke_class(code[pc].op)) code[pc + 1].a = ++k;
    code[1].args = out.invoke_table;
    return out;
}

struct InstrumentedProgram {
    Program program;
    InstrumentationReport report;
};

inline Result<InstrumentedProgram> instrument_program(const Program &p) {
    for (const auto &[name, m] : p.methods)
        if (m.instrumented)
            return make_error(errc::AlreadyInstrumented, "method '" + name + "' is already instrumented");
    VerificationReport vr = verify(p);
    if (!vr.accepted())
        return make_error(errc::VerificationFailed, vr.summary());

    InstrumentedProgram out;
    out.program = p;
    for (auto &[name, m] : out.program.methods) {
        LoopAnalysis loops = analyze_loops(m);
        MethodInstrumentation row;
        row.name = name;
        row.count_before = static_cast<uint32_t>(m.code.size());
        row.innermost_headers = static_cast<uint32_t>(loops.checkpoint_headers.size());
        for (const auto &ins : m.code)
            if (is_invoke_class_source(ins.op)) ++row.invoke_class_count;
        auto instr = instrument_method(m, loops);
        if (!instr) return instr.error();
        m = instr.take();
        row.count_after = static_cast<uint32_t>(m.code.size());
        out.report.methods.push_back(row);
        out.report.total_before += row.count_before;
        out.report.total_after += row.count_after;
    }
    refresh_content_hash(out.program);
    return out;
}

} // namespace mvm
