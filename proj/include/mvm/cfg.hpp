#pragma once

#include <algorithm>
#include <optional>
#include <vector>

#include "mvm/isa.hpp"

namespace mvm {

/// Successor pcs of the instruction at pc, ignoring range validity. DISPATCH
/// edges exist only to re-enter a restored frame mid-method; dominance and
/// loop structure are defined over the original flow, so they can be left
/// out (the depth dataflow keeps them).
inline std::vector<uint32_t> instruction_successors(const MethodDef &m, uint32_t pc,
                                                    bool include_dispatch_targets = true) {
    const Instruction &ins = m.code[pc];
    switch (ins.op) {
    case Opcode::RETURN: return {};
    case Opcode::JMP: return {ins.a};
    case Opcode::JMPIF: return {pc + 1, ins.a};
    case Opcode::DISPATCH: {
        std::vector<uint32_t> s{pc + 1};
        if (include_dispatch_targets) s.insert(s.end(), ins.args.begin(), ins.args.end());
        return s;
    }
    default: return {pc + 1};
    }
}

struct Cfg {
    std::vector<std::vector<uint32_t>> succ;
    std::vector<bool> reachable;
    /// Immediate dominator per reachable pc; entry maps to itself.
    std::vector<std::optional<uint32_t>> idom;
    /// Edges (src, header) whose header dominates the source.
    std::vector<std::pair<uint32_t, uint32_t>> back_edges;
    /// A retreating edge whose target does not dominate its source exists.
    std::optional<std::pair<uint32_t, uint32_t>> irreducible_edge;

    bool dominates(uint32_t a, uint32_t b) const {
        // walks the idom chain from b up to the entry
        uint32_t n = b;
        while (true) {
            if (n == a) return true;
            if (!idom[n] || *idom[n] == n) return n == a;
            n = *idom[n];
        }
    }
};

/// Builds successor lists, reachability, dominator tree, back edges, and the
/// reducibility witness over the original flow (no dispatch edges). All
/// targets must already be range-valid.
inline Cfg build_cfg(const MethodDef &m) {
    Cfg cfg;
    auto n = static_cast<uint32_t>(m.code.size());
    cfg.succ.resize(n);
    cfg.reachable.assign(n, false);
    cfg.idom.assign(n, std::nullopt);
    if (n == 0) return cfg;
    for (uint32_t pc = 0; pc < n; ++pc) {
        for (uint32_t s : instruction_successors(m, pc, false))
            if (s < n) cfg.succ[pc].push_back(s); // a falling-off-end pc has no edge here
    }

    // reverse postorder over reachable nodes (iterative DFS)
    std::vector<uint32_t> postorder;
    std::vector<uint8_t> color(n, 0); // 0 white, 1 gray, 2 black
    struct DfsFrame {
        uint32_t pc;
        size_t next_succ;
    };
    std::vector<DfsFrame> stack{{0, 0}};
    color[0] = 1;
    cfg.reachable[0] = true;
    std::vector<std::pair<uint32_t, uint32_t>> retreating;
    while (!stack.empty()) {
        auto &top = stack.back();
        if (top.next_succ < cfg.succ[top.pc].size()) {
            uint32_t s = cfg.succ[top.pc][top.next_succ++];
            if (color[s] == 0) {
                color[s] = 1;
                cfg.reachable[s] = true;
                stack.push_back({s, 0});
            } else if (color[s] == 1) {
                retreating.emplace_back(top.pc, s);
            }
        } else {
            color[top.pc] = 2;
            postorder.push_back(top.pc);
            stack.pop_back();
        }
    }

    std::vector<uint32_t> rpo(postorder.rbegin(), postorder.rend());
    std::vector<uint32_t> rpo_index(n, 0);
    for (uint32_t i = 0; i < rpo.size(); ++i) rpo_index[rpo[i]] = i;

    std::vector<std::vector<uint32_t>> preds(n);
    for (uint32_t pc = 0; pc < n; ++pc) {
        if (!cfg.reachable[pc]) continue;
        for (uint32_t s : cfg.succ[pc])
            if (cfg.reachable[s]) preds[s].push_back(pc);
    }

    // Cooper-Harvey-Kennedy iterative dominators
    cfg.idom[0] = 0;
    auto intersect = [&](uint32_t a, uint32_t b) {
        while (a != b) {
            while (rpo_index[a] > rpo_index[b]) a = *cfg.idom[a];
            while (rpo_index[b] > rpo_index[a]) b = *cfg.idom[b];
        }
        return a;
    };
    bool changed = true;
    while (changed) {
        changed = false;
        for (uint32_t node : rpo) {
            if (node == 0) continue;
            std::optional<uint32_t> new_idom;
            for (uint32_t p : preds[node]) {
                if (!cfg.idom[p]) continue;
                new_idom = new_idom ? intersect(*new_idom, p) : p;
            }
            if (new_idom && cfg.idom[node] != new_idom) {
                cfg.idom[node] = new_idom;
                changed = true;
            }
        }
    }

    for (auto [src, dst] : retreating) {
        if (cfg.dominates(dst, src))
            cfg.back_edges.emplace_back(src, dst);
        else if (!cfg.irreducible_edge)
            cfg.irreducible_edge = std::make_pair(src, dst);
    }
    std::sort(cfg.back_edges.begin(), cfg.back_edges.end(),
              [](auto &a, auto &b) { return a.second != b.second ? a.second < b.second : a.first < b.first; });
    return cfg;
}

} // namespace mvm
