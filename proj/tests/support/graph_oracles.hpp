#pragma once

#include <map>
#include <set>
#include <vector>

#include "advasm/cfg.hpp"
#include "advasm/rng.hpp"

// Test-only reference implementations the fast dominator code is checked
// against, plus a generator for random standalone CFGs.

namespace advasm::testing {

inline std::set<int> reachable_nodes(const ControlFlowGraph& cfg) {
  std::set<int> out;
  for (int b = 0; b < static_cast<int>(cfg.blocks.size()); ++b) {
    if (!cfg.unreachable.count(b)) out.insert(b);
  }
  return out;
}

// Iterative dataflow fixpoint: Dom(entry) = {entry};
// Dom(v) = {v} ∪ ⋂ Dom(p) over reachable predecessors p.
inline std::map<int, std::set<int>> dataflow_dominators(const ControlFlowGraph& cfg) {
  const std::set<int> reach = reachable_nodes(cfg);
  auto preds = cfg.predecessors();

  std::map<int, std::set<int>> dom;
  for (int v : reach) dom[v] = reach;
  dom[cfg.entry] = {cfg.entry};

  bool changed = true;
  while (changed) {
    changed = false;
    for (int v : reach) {
      if (v == cfg.entry) continue;
      std::set<int> next = reach;
      bool any = false;
      for (int p : preds[static_cast<std::size_t>(v)]) {
        if (!reach.count(p)) continue;
        any = true;
        std::set<int> merged;
        std::set_intersection(next.begin(), next.end(), dom[p].begin(), dom[p].end(),
                              std::inserter(merged, merged.begin()));
        next = std::move(merged);
      }
      if (!any) next.clear();
      next.insert(v);
      if (next != dom[v]) {
        dom[v] = std::move(next);
        changed = true;
      }
    }
  }
  return dom;
}

inline std::map<int, std::set<int>> lt_dominator_sets(const ControlFlowGraph& cfg) {
  std::vector<int> idom = immediate_dominators(cfg);
  std::map<int, std::set<int>> dom;
  for (int v : reachable_nodes(cfg)) {
    std::set<int> chain;
    for (int b = v;; b = idom[static_cast<std::size_t>(b)]) {
      chain.insert(b);
      if (b == cfg.entry) break;
    }
    dom[v] = std::move(chain);
  }
  return dom;
}

inline std::set<int> dataflow_dominate_nodes(const ControlFlowGraph& cfg) {
  auto dom = dataflow_dominators(cfg);
  const std::set<int> reach = reachable_nodes(cfg);
  std::set<int> result;
  bool first = true;
  for (int e : cfg.exits) {
    if (!reach.count(e)) continue;
    if (first) {
      result = dom[e];
      first = false;
    } else {
      std::set<int> merged;
      std::set_intersection(result.begin(), result.end(), dom[e].begin(), dom[e].end(),
                            std::inserter(merged, merged.begin()));
      result = std::move(merged);
    }
  }
  return result;
}

// Exhaustive enumeration on acyclic graphs: a node is obligatory iff it
// appears on every entry-to-exit path.
inline std::set<int> all_paths_dominate_nodes(const ControlFlowGraph& cfg) {
  auto succ = cfg.successors();
  const std::set<int> reach = reachable_nodes(cfg);

  std::set<int> result = reach;
  bool saw_path = false;
  std::vector<int> path = {cfg.entry};

  struct Frame { int node; std::size_t next; };
  std::vector<Frame> stack = {{cfg.entry, 0}};
  while (!stack.empty()) {
    Frame& fr = stack.back();
    const auto& out = succ[static_cast<std::size_t>(fr.node)];
    if (out.empty()) {
      if (cfg.exits.count(fr.node)) {
        std::set<int> on_path(path.begin(), path.end());
        std::set<int> merged;
        std::set_intersection(result.begin(), result.end(), on_path.begin(),
                              on_path.end(), std::inserter(merged, merged.begin()));
        result = std::move(merged);
        saw_path = true;
      }
      stack.pop_back();
      path.pop_back();
      continue;
    }
    if (fr.next < out.size()) {
      int w = out[fr.next++];
      stack.push_back({w, 0});
      path.push_back(w);
    } else {
      stack.pop_back();
      path.pop_back();
    }
  }
  return saw_path ? result : std::set<int>{};
}

// Random standalone CFG: n blocks with synthetic one-instruction ranges.
// Exits are the sink nodes. When `acyclic`, edges only go forward.
inline ControlFlowGraph random_cfg(SplitMix64& rng, int max_blocks, bool acyclic) {
  for (;;) {
    const int n = 2 + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(max_blocks - 1)));
    ControlFlowGraph cfg;
    cfg.block_of.assign(static_cast<std::size_t>(n), 0);
    for (int i = 0; i < n; ++i) {
      BasicBlock b;
      b.id = i;
      b.start = static_cast<std::size_t>(i);
      b.end = static_cast<std::size_t>(i) + 1;
      cfg.blocks.push_back(b);
      cfg.block_of[static_cast<std::size_t>(i)] = i;
    }
    for (int v = 0; v < n; ++v) {
      const int out_degree = static_cast<int>(rng.bounded(3));  // 0..2
      for (int e = 0; e < out_degree; ++e) {
        int t;
        if (acyclic) {
          if (v + 1 >= n) continue;
          t = v + 1 + static_cast<int>(rng.bounded(static_cast<std::uint64_t>(n - v - 1)));
        } else {
          t = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(n)));
        }
        cfg.edges.emplace(v, t);
      }
    }

    auto succ = cfg.successors();
    for (int v = 0; v < n; ++v) {
      if (succ[static_cast<std::size_t>(v)].empty()) cfg.exits.insert(v);
    }

    std::vector<bool> seen(static_cast<std::size_t>(n), false);
    std::vector<int> stack = {0};
    seen[0] = true;
    while (!stack.empty()) {
      int v = stack.back();
      stack.pop_back();
      for (int t : succ[static_cast<std::size_t>(v)]) {
        if (!seen[static_cast<std::size_t>(t)]) {
          seen[static_cast<std::size_t>(t)] = true;
          stack.push_back(t);
        }
      }
    }
    for (int v = 0; v < n; ++v) {
      if (!seen[static_cast<std::size_t>(v)]) cfg.unreachable.insert(v);
    }

    bool has_reachable_exit = false;
    for (int e : cfg.exits) {
      if (seen[static_cast<std::size_t>(e)]) has_reachable_exit = true;
    }
    if (has_reachable_exit) return cfg;
  }
}

}  // namespace advasm::testing
