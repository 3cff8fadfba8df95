#pragma once

// Natural-loop detection for checkpoint placement. Back edges come from the
// dominator tree; a loop is innermost iff its body contains no other loop's
// header. Requires verified input (the verifier rejects irreducible CFGs).

#include <set>

#include "mvm/cfg.hpp"

namespace mvm {

struct NaturalLoop {
    uint32_t src = 0;    // back-edge source
    uint32_t header = 0; // back-edge target; dominates src
    std::set<uint32_t> body;
    bool innermost = false;
};

struct LoopAnalysis {
    std::vector<std::pair<uint32_t, uint32_t>> edges; // full CFG edge list
    std::vector<NaturalLoop> loops;                   // ordered by (header, src)
    /// Distinct headers of innermost loops, ascending; each receives a
    /// checkpoint during instrumentation.
    std::vector<uint32_t> checkpoint_headers;
};

inline LoopAnalysis analyze_loops(const MethodDef &m) {
    LoopAnalysis out;
    Cfg cfg = build_cfg(m);
    auto n = static_cast<uint32_t>(m.code.size());
    for (uint32_t pc = 0; pc < n; ++pc)
        for (uint32_t s : cfg.succ[pc]) out.edges.emplace_back(pc, s);

    std::vector<std::vector<uint32_t>> preds(n);
    for (auto [src, dst] : out.edges)
        if (src < n && dst < n) preds[dst].push_back(src);

    for (auto [src, header] : cfg.back_edges) {
        NaturalLoop loop;
        loop.src = src;
        loop.header = header;
        loop.body = {header, src};
        // backward closure from src, not crossing the header
        std::vector<uint32_t> stack{src};
        while (!stack.empty()) {
            uint32_t node = stack.back();
            stack.pop_back();
            if (node == header) continue;
            for (uint32_t p : preds[node])
                if (loop.body.insert(p).second) stack.push_back(p);
        }
        out.loops.push_back(std::move(loop));
    }

    std::set<uint32_t> headers;
    for (const auto &l : out.loops) headers.insert(l.header);
    for (auto &l : out.loops) {
        l.innermost = true;
        for (uint32_t h : headers)
            if (h != l.header && l.body.count(h)) l.innermost = false;
    }
    std::set<uint32_t> cp;
    for (const auto &l : out.loops)
        if (l.innermost) cp.insert(l.header);
    out.checkpoint_headers.assign(cp.begin(), cp.end());
    return out;
}

} // namespace mvm
