#pragma once

// Shared fixtures for the suite: corpus loading, run/suspend/migrate
// shorthand, and a brute-force loop oracle kept independent of the cfg/loops
// implementation (dominance by node removal, successors recomputed by hand).

#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "mvm/mvm.hpp"

#ifndef MVM_CORPUS_DIR
#define MVM_CORPUS_DIR "corpus"
#endif

namespace testutil {

inline std::string corpus_path(const std::string &name) { return std::string(MVM_CORPUS_DIR) + "/" + name; }

inline std::string read_text(const std::string &path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline mvm::Program load_corpus(const std::string &name) {
    auto parsed = mvm::parse_assembly(read_text(corpus_path(name)));
    if (!parsed.ok()) {
        std::string msg = "parse of " + name + " failed:";
        for (const auto &d : parsed.diagnostics) msg += " " + d.code;
        throw std::runtime_error(msg);
    }
    return std::move(*parsed.program);
}

inline const std::vector<std::string> &corpus_names() {
    static const std::vector<std::string> names = {
        "hello.mvasm",          "counter.mvasm",          "matmul.mvasm",
        "ladder.mvasm",         "sleeper.mvasm",          "monitors.mvasm",
        "producer_consumer.mvasm", "notify_handoff.mvasm", "notifyall_fanout.mvasm",
        "alloc_chain.mvasm",    "spawn_ids.mvasm"};
    return names;
}

inline mvm::Program instrumented(const mvm::Program &p) {
    auto r = mvm::instrument_program(p);
    if (!r) throw std::runtime_error("instrumentation failed: " + r.error().message);
    return std::move(r.value().program);
}

inline mvm::Vm run_to_done(const mvm::Program &p, mvm::VmOptions opts = {}) {
    auto vm = mvm::Vm::load(p, opts);
    if (!vm) throw std::runtime_error("load failed: " + vm.error().message);
    vm.value().run();
    return vm.take();
}

/// Runs with the execution flag armed to flip at the k-th checkpoint and
/// drains every thread to a park.
inline mvm::Result<mvm::Vm> suspend_at_checkpoint(const mvm::Program &p, uint64_t k, mvm::VmOptions opts = {}) {
    auto vm = mvm::Vm::load(p, opts);
    if (!vm) return vm.error();
    vm.value().arm_suspend_at_checkpoint(k);
    mvm::StepOutcome o = vm.value().run();
    if (o != mvm::StepOutcome::all_parked)
        return mvm::make_error("NoSuchCheckpoint", "run finished before checkpoint " + std::to_string(k));
    return vm.take();
}

/// capture -> encode -> decode -> restore, as a migration would.
inline mvm::Result<mvm::Vm> migrate_cycle(const mvm::Program &p, const mvm::Vm &parked, mvm::VmOptions opts = {}) {
    auto img = mvm::capture(parked, "test");
    if (!img) return img.error();
    auto decoded = mvm::decode_image(mvm::encode_image(img.value()));
    if (!decoded) return decoded.error();
    return mvm::restore(p, decoded.value(), opts);
}

// --- independent loop oracle ------------------------------------------------

inline std::vector<uint32_t> oracle_successors(const mvm::MethodDef &m, uint32_t pc) {
    const auto &ins = m.code[pc];
    using mvm::Opcode;
    if (ins.op == Opcode::RETURN) return {};
    if (ins.op == Opcode::JMP) return {ins.a};
    if (ins.op == Opcode::JMPIF) return {pc + 1, ins.a};
    if (ins.op == Opcode::DISPATCH) return {pc + 1};
    return {pc + 1};
}

inline std::set<uint32_t> oracle_reachable(const mvm::MethodDef &m, uint32_t from, std::optional<uint32_t> removed) {
    std::set<uint32_t> seen;
    std::vector<uint32_t> stack;
    if (!removed || from != *removed) {
        stack.push_back(from);
        seen.insert(from);
    }
    while (!stack.empty()) {
        uint32_t pc = stack.back();
        stack.pop_back();
        for (uint32_t s : oracle_successors(m, pc)) {
            if (s >= m.code.size()) continue;
            if (removed && s == *removed) continue;
            if (seen.insert(s).second) stack.push_back(s);
        }
    }
    return seen;
}

/// a dominates b iff removing a makes b unreachable from the entry.
inline bool oracle_dominates(const mvm::MethodDef &m, uint32_t a, uint32_t b) {
    if (a == b) return true;
    if (a == 0) return true;
    return !oracle_reachable(m, 0, a).count(b);
}

struct OracleLoops {
    std::set<std::pair<uint32_t, uint32_t>> back_edges; // (src, header)
    std::set<uint32_t> innermost_headers;
};

inline OracleLoops oracle_loops(const mvm::MethodDef &m) {
    OracleLoops out;
    auto reach = oracle_reachable(m, 0, std::nullopt);
    for (uint32_t pc : reach)
        for (uint32_t s : oracle_successors(m, pc))
            if (s < m.code.size() && oracle_dominates(m, s, pc)) out.back_edges.insert({pc, s});

    std::set<uint32_t> headers;
    for (auto [src, hdr] : out.back_edges) headers.insert(hdr);
    // natural loop body: header plus everything reaching the back-edge source
    // without passing through the header
    for (auto [src, hdr] : out.back_edges) {
        std::set<uint32_t> body{hdr, src};
        for (uint32_t pc : reach) {
            if (pc == hdr) continue;
            auto reached = oracle_reachable(m, pc, hdr);
            if (reached.count(src)) body.insert(pc);
        }
        bool innermost = true;
        for (uint32_t h : headers)
            if (h != hdr && body.count(h)) innermost = false;
        if (innermost) out.innermost_headers.insert(hdr);
    }
    return out;
}

inline uint32_t oracle_invoke_class_count(const mvm::MethodDef &m) {
    uint32_t v = 0;
    for (const auto &ins : m.code)
        if (mvm::is_invoke_class_source(ins.op)) ++v;
    return v;
}

} // namespace testutil
