#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "advasm/asm_core.hpp"

// Control-flow analysis. Basic blocks partition the instruction list; a
// control-transfer instruction only ever ends a block. Obligatory blocks --
// the ones that dominate every exit, i.e. lie on every entry-to-exit path --
// are where insertions are guaranteed to affect any path through the
// function. Immediate dominators come from the Lengauer-Tarjan algorithm
// (simple eval/link variant); tests cross-check it against an iterative
// dataflow fixpoint and, on acyclic graphs, exhaustive path enumeration.

namespace advasm {

struct CfgError : std::runtime_error {
  enum class Kind { no_exit, empty_candidates };
  Kind kind;
  explicit CfgError(Kind k, const std::string& why)
      : std::runtime_error(why), kind(k) {}
};

struct BasicBlock {
  int id = 0;
  std::size_t start = 0;  // first instruction index
  std::size_t end = 0;    // one past the last
  std::optional<std::string> entry_label;
};

struct ControlFlowGraph {
  std::vector<BasicBlock> blocks;           // ids are indices, layout order
  std::set<std::pair<int, int>> edges;
  int entry = 0;
  std::set<int> exits;                      // ret blocks and successor-less blocks
  std::set<int> unreachable;                // retained, excluded from analysis
  std::vector<int> block_of;                // instruction index -> block id

  std::vector<std::vector<int>> successors() const {
    std::vector<std::vector<int>> succ(blocks.size());
    for (const auto& [a, b] : edges) succ[static_cast<std::size_t>(a)].push_back(b);
    return succ;
  }
  std::vector<std::vector<int>> predecessors() const {
    std::vector<std::vector<int>> pred(blocks.size());
    for (const auto& [a, b] : edges) pred[static_cast<std::size_t>(b)].push_back(a);
    return pred;
  }
};

inline ControlFlowGraph build_cfg(const Function& fn) {
  validate_function(fn);
  const std::size_t n = fn.instructions.size();

  std::vector<bool> leader(n, false);
  leader[0] = true;
  for (const auto& [label, idx] : fn.labels) leader[idx] = true;
  for (std::size_t i = 0; i < n; ++i) {
    if (is_control_transfer(fn.instructions[i].op) && i + 1 < n) leader[i + 1] = true;
  }

  ControlFlowGraph cfg;
  cfg.block_of.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (leader[i]) {
      BasicBlock b;
      b.id = static_cast<int>(cfg.blocks.size());
      b.start = i;
      cfg.blocks.push_back(b);
    }
    cfg.blocks.back().end = i + 1;
    cfg.block_of[i] = cfg.blocks.back().id;
  }
  for (const auto& [label, idx] : fn.labels) {
    BasicBlock& b = cfg.blocks[static_cast<std::size_t>(cfg.block_of[idx])];
    if (b.start == idx && !b.entry_label) b.entry_label = label;
  }

  for (const BasicBlock& b : cfg.blocks) {
    const Instruction& last = fn.instructions[b.end - 1];
    const bool has_next = b.end < n;
    switch (last.op) {
      case Opcode::jmp:
        cfg.edges.emplace(b.id, cfg.block_of[fn.labels.at(last.operands[0].label_)]);
        break;
      case Opcode::je: case Opcode::jne: case Opcode::jl:
      case Opcode::jle: case Opcode::jg: case Opcode::jge:
        cfg.edges.emplace(b.id, cfg.block_of[fn.labels.at(last.operands[0].label_)]);
        if (has_next) cfg.edges.emplace(b.id, b.id + 1);
        break;
      case Opcode::ret:
        break;
      case Opcode::call:
        // Non-escaping transfer: control resumes at the next block.
        if (has_next) cfg.edges.emplace(b.id, b.id + 1);
        break;
      default:
        if (has_next) cfg.edges.emplace(b.id, b.id + 1);
        break;
    }
  }

  auto succ = cfg.successors();
  for (const BasicBlock& b : cfg.blocks) {
    const Instruction& last = fn.instructions[b.end - 1];
    if (last.op == Opcode::ret || succ[static_cast<std::size_t>(b.id)].empty()) {
      cfg.exits.insert(b.id);
    }
  }

  std::vector<bool> seen(cfg.blocks.size(), false);
  std::vector<int> stack = {cfg.entry};
  seen[static_cast<std::size_t>(cfg.entry)] = true;
  while (!stack.empty()) {
    int b = stack.back();
    stack.pop_back();
    for (int t : succ[static_cast<std::size_t>(b)]) {
      if (!seen[static_cast<std::size_t>(t)]) {
        seen[static_cast<std::size_t>(t)] = true;
        stack.push_back(t);
      }
    }
  }
  for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
    if (!seen[b]) cfg.unreachable.insert(static_cast<int>(b));
  }
  return cfg;
}

// Immediate dominators over the subgraph reachable from entry.
// Lengauer-Tarjan with path-compressing eval/link. idom[entry] == entry;
// unreachable nodes get -1.
inline std::vector<int> immediate_dominators(const ControlFlowGraph& cfg) {
  const int n = static_cast<int>(cfg.blocks.size());
  auto succ = cfg.successors();

  std::vector<int> dfnum(static_cast<std::size_t>(n), -1);
  std::vector<int> vertex;             // dfs number -> node
  std::vector<int> parent(static_cast<std::size_t>(n), -1);
  vertex.reserve(static_cast<std::size_t>(n));

  // Iterative DFS matching the recursive numbering order.
  {
    std::vector<std::pair<int, std::size_t>> stack;
    dfnum[static_cast<std::size_t>(cfg.entry)] = 0;
    vertex.push_back(cfg.entry);
    stack.emplace_back(cfg.entry, 0);
    while (!stack.empty()) {
      auto& [v, i] = stack.back();
      if (i < succ[static_cast<std::size_t>(v)].size()) {
        int w = succ[static_cast<std::size_t>(v)][i++];
        if (dfnum[static_cast<std::size_t>(w)] < 0) {
          dfnum[static_cast<std::size_t>(w)] = static_cast<int>(vertex.size());
          vertex.push_back(w);
          parent[static_cast<std::size_t>(w)] = v;
          stack.emplace_back(w, 0);
        }
      } else {
        stack.pop_back();
      }
    }
  }

  const int m = static_cast<int>(vertex.size());
  std::vector<int> semi(static_cast<std::size_t>(n), -1);
  std::vector<int> idom(static_cast<std::size_t>(n), -1);
  std::vector<int> ancestor(static_cast<std::size_t>(n), -1);
  std::vector<int> label(static_cast<std::size_t>(n), 0);
  std::vector<std::vector<int>> bucket(static_cast<std::size_t>(n));
  for (int v = 0; v < n; ++v) {
    semi[static_cast<std::size_t>(v)] = dfnum[static_cast<std::size_t>(v)];
    label[static_cast<std::size_t>(v)] = v;
  }

  auto pred = cfg.predecessors();

  // eval with iterative path compression.
  auto compress = [&](int v) {
    std::vector<int> path;
    while (ancestor[static_cast<std::size_t>(ancestor[static_cast<std::size_t>(v)])] != -1) {
      path.push_back(v);
      v = ancestor[static_cast<std::size_t>(v)];
    }
    for (auto it = path.rbegin(); it != path.rend(); ++it) {
      int u = *it;
      int a = ancestor[static_cast<std::size_t>(u)];
      if (semi[static_cast<std::size_t>(label[static_cast<std::size_t>(a)])] <
          semi[static_cast<std::size_t>(label[static_cast<std::size_t>(u)])]) {
        label[static_cast<std::size_t>(u)] = label[static_cast<std::size_t>(a)];
      }
      ancestor[static_cast<std::size_t>(u)] = ancestor[static_cast<std::size_t>(a)];
    }
  };
  auto eval = [&](int v) {
    if (ancestor[static_cast<std::size_t>(v)] == -1) return v;
    compress(v);
    return label[static_cast<std::size_t>(v)];
  };

  for (int i = m - 1; i >= 1; --i) {
    int w = vertex[static_cast<std::size_t>(i)];
    for (int v : pred[static_cast<std::size_t>(w)]) {
      if (dfnum[static_cast<std::size_t>(v)] < 0) continue;  // unreachable pred
      int u = eval(v);
      if (semi[static_cast<std::size_t>(u)] < semi[static_cast<std::size_t>(w)]) {
        semi[static_cast<std::size_t>(w)] = semi[static_cast<std::size_t>(u)];
      }
    }
    bucket[static_cast<std::size_t>(vertex[static_cast<std::size_t>(
               semi[static_cast<std::size_t>(w)])])]
        .push_back(w);
    int p = parent[static_cast<std::size_t>(w)];
    ancestor[static_cast<std::size_t>(w)] = p;
    for (int v : bucket[static_cast<std::size_t>(p)]) {
      int u = eval(v);
      idom[static_cast<std::size_t>(v)] =
          semi[static_cast<std::size_t>(u)] < semi[static_cast<std::size_t>(v)] ? u : p;
    }
    bucket[static_cast<std::size_t>(p)].clear();
  }
  for (int i = 1; i < m; ++i) {
    int w = vertex[static_cast<std::size_t>(i)];
    if (idom[static_cast<std::size_t>(w)] !=
        vertex[static_cast<std::size_t>(semi[static_cast<std::size_t>(w)])]) {
      idom[static_cast<std::size_t>(w)] =
          idom[static_cast<std::size_t>(idom[static_cast<std::size_t>(w)])];
    }
  }
  idom[static_cast<std::size_t>(cfg.entry)] = cfg.entry;
  return idom;
}

// Blocks that dominate every reachable exit: exactly the blocks on every
// entry-to-exit path. Always contains the entry block.
inline std::set<int> dominate_nodes(const ControlFlowGraph& cfg) {
  std::vector<int> idom = immediate_dominators(cfg);
  std::vector<int> exits;
  for (int e : cfg.exits) {
    if (!cfg.unreachable.count(e)) exits.push_back(e);
  }
  if (exits.empty()) {
    throw CfgError(CfgError::Kind::no_exit, "no exit block reachable from entry");
  }
  auto chain = [&](int e) {
    std::set<int> out;
    for (int b = e;; b = idom[static_cast<std::size_t>(b)]) {
      out.insert(b);
      if (b == cfg.entry) break;
    }
    return out;
  };
  std::set<int> result = chain(exits.front());
  for (std::size_t i = 1; i < exits.size(); ++i) {
    std::set<int> next = chain(exits[i]);
    std::set<int> merged;
    std::set_intersection(result.begin(), result.end(), next.begin(), next.end(),
                          std::inserter(merged, merged.begin()));
    result = std::move(merged);
  }
  return result;
}

// True when inserting after this instruction is structurally safe.
inline bool insertable_position(const Function& fn, const ControlFlowGraph& cfg,
                                std::size_t index) {
  const BasicBlock& b = cfg.blocks[static_cast<std::size_t>(cfg.block_of[index])];
  if (index == b.end - 1) return false;  // block terminator
  const Opcode op = fn.instructions[index].op;
  return !is_control_transfer(op) && !is_exception(op);
}

// Instruction indices inside obligatory blocks where an insertion lands on
// every execution path: dominate-node blocks minus block terminators and
// exception-raising instructions.
inline std::vector<std::size_t> vulnerable_candidates(const Function& fn,
                                                      const ControlFlowGraph& cfg) {
  std::set<int> dom = dominate_nodes(cfg);
  std::vector<std::size_t> out;
  for (int b : dom) {
    const BasicBlock& blk = cfg.blocks[static_cast<std::size_t>(b)];
    for (std::size_t i = blk.start; i < blk.end; ++i) {
      if (insertable_position(fn, cfg, i)) out.push_back(i);
    }
  }
  if (out.empty()) {
    throw CfgError(CfgError::Kind::empty_candidates,
                   "no insertable instruction in any obligatory block");
  }
  return out;
}

inline std::string cfg_to_dot(const ControlFlowGraph& cfg,
                              const std::string& name = "cfg") {
  std::string out = "digraph " + name + " {\n  node [shape=box];\n";
  for (const BasicBlock& b : cfg.blocks) {
    out += "  b" + std::to_string(b.id) + " [label=\"B" + std::to_string(b.id) +
           " [" + std::to_string(b.start) + "," + std::to_string(b.end) + ")";
    if (b.entry_label) out += " " + *b.entry_label;
    if (cfg.unreachable.count(b.id)) out += " (unreachable)";
    out += "\"];\n";
  }
  for (const auto& [a, b] : cfg.edges) {
    out += "  b" + std::to_string(a) + " -> b" + std::to_string(b) + ";\n";
  }
  out += "}\n";
  return out;
}

}  // namespace advasm
