#include <catch2/catch_amalgamated.hpp>

#include "advasm/asm_text.hpp"
#include "advasm/cfg.hpp"
#include "support/fixtures.hpp"
#include "support/graph_oracles.hpp"

using namespace advasm;
using namespace advasm::testing;

namespace {

std::set<int> block_ids_of_labels(const Function& f, const ControlFlowGraph& cfg,
                                  std::initializer_list<const char*> labels) {
  std::set<int> out;
  for (const char* l : labels) out.insert(cfg.block_of[f.labels.at(l)]);
  return out;
}

}  // namespace

TEST_CASE("straight-line function is a single exit block") {
  Function f = parse_function(kStraightLineText);
  ControlFlowGraph cfg = build_cfg(f);
  REQUIRE(cfg.blocks.size() == 1);
  CHECK(cfg.edges.empty());
  CHECK(cfg.exits == std::set<int>{0});
  CHECK(cfg.unreachable.empty());
  CHECK(dominate_nodes(cfg) == std::set<int>{0});
}

TEST_CASE("diamond fixture: 6 blocks, 7 edges, obligatory blocks L1 and L4") {
  Function f = parse_function(kDiamondText);
  ControlFlowGraph cfg = build_cfg(f);
  REQUIRE(cfg.blocks.size() == 6);
  CHECK(cfg.edges.size() == 7);
  const std::set<std::pair<int, int>> expected = {
      {0, 1}, {0, 2}, {1, 2}, {1, 3}, {2, 3}, {3, 4}, {3, 5}};
  CHECK(cfg.edges == expected);
  CHECK(cfg.exits == std::set<int>({4, 5}));
  CHECK(cfg.unreachable.empty());
  CHECK(dominate_nodes(cfg) == block_ids_of_labels(f, cfg, {"L1", "L4"}));
}

TEST_CASE("loop fixture keeps its back edge") {
  Function f = parse_function(kLoopText);
  ControlFlowGraph cfg = build_cfg(f);
  REQUIRE(cfg.blocks.size() == 3);
  const std::set<std::pair<int, int>> expected = {{0, 1}, {1, 1}, {1, 2}};
  CHECK(cfg.edges == expected);
  CHECK(dominate_nodes(cfg) == std::set<int>({0, 1, 2}));
}

TEST_CASE("two disjoint returning branches leave only the entry obligatory") {
  Function f = parse_function(
      "fn forked:\n"
      "  cmp rax, 0\n"
      "  je .L2\n"
      "  mov rbx, 1\n"
      "  ret\n"
      "L2:\n"
      "  mov rbx, 2\n"
      "  ret\n");
  ControlFlowGraph cfg = build_cfg(f);
  REQUIRE(cfg.blocks.size() == 3);
  CHECK(dominate_nodes(cfg) == std::set<int>{0});
}

TEST_CASE("call ends a block with a plain fallthrough edge") {
  Function f = parse_function(
      "fn caller:\n"
      "  mov rax, 1\n"
      "  call .helper\n"
      "  mov rbx, 2\n"
      "  ret\n"
      "helper:\n"
      "  ret\n");
  ControlFlowGraph cfg = build_cfg(f);
  REQUIRE(cfg.blocks.size() == 3);
  CHECK(cfg.edges == std::set<std::pair<int, int>>{{0, 1}});
  // Control-transfer instructions appear only as block terminators.
  for (const BasicBlock& b : cfg.blocks) {
    for (std::size_t i = b.start; i + 1 < b.end; ++i) {
      CHECK_FALSE(is_control_transfer(f.instructions[i].op));
    }
  }
}

TEST_CASE("unreachable blocks are retained but excluded") {
  Function f = parse_function(
      "fn dead:\n"
      "  mov rcx, 7\n"
      "  jmp .L2\n"
      "orphan:\n"
      "  mov rax, 1\n"
      "L2:\n"
      "  mov rdx, 2\n"
      "  ret\n");
  ControlFlowGraph cfg = build_cfg(f);
  REQUIRE(cfg.blocks.size() == 3);
  CHECK(cfg.unreachable == std::set<int>{1});
  CHECK(dominate_nodes(cfg) == std::set<int>({0, 2}));
  // The orphan block's instruction is not a candidate.
  auto vul = vulnerable_candidates(f, cfg);
  CHECK(vul == std::vector<std::size_t>({0, 3}));
  for (std::size_t idx : vul) CHECK(cfg.block_of[idx] != 1);
}

TEST_CASE("vulnerable candidates exclude terminators and exception instructions") {
  SECTION("single block keeps everything but the ret") {
    Function f = parse_function(kStraightLineText);
    auto vul = vulnerable_candidates(f, build_cfg(f));
    CHECK(vul == std::vector<std::size_t>({0, 1}));
  }
  SECTION("syscall and int are never candidates") {
    Function f = parse_function(
        "fn sys:\n"
        "  mov rax, 60\n"
        "  syscall\n"
        "  int 3\n"
        "  mov rbx, 1\n"
        "  ret\n");
    auto vul = vulnerable_candidates(f, build_cfg(f));
    CHECK(vul == std::vector<std::size_t>({0, 3}));
  }
  SECTION("jmp-only function has no candidates") {
    Function f = parse_function(
        "fn empty:\n"
        "  jmp .L\n"
        "L:\n"
        "  ret\n");
    CHECK_THROWS_AS(vulnerable_candidates(f, build_cfg(f)), CfgError);
  }
  SECTION("diamond candidates live in L1 and L4 only") {
    Function f = parse_function(kDiamondText);
    ControlFlowGraph cfg = build_cfg(f);
    auto vul = vulnerable_candidates(f, cfg);
    CHECK(vul == std::vector<std::size_t>({0, 6}));
  }
}

TEST_CASE("function without any ret still has flow-off-the-end exits") {
  Function f = parse_function(
      "fn drifts:\n"
      "  mov rax, 1\n"
      "  mov rbx, 2\n");
  ControlFlowGraph cfg = build_cfg(f);
  CHECK(cfg.exits == std::set<int>{0});
  CHECK_NOTHROW(dominate_nodes(cfg));
}

TEST_CASE("infinite self-loop has no exit") {
  Function f = parse_function(
      "fn spin:\n"
      "L:\n"
      "  jmp .L\n");
  ControlFlowGraph cfg = build_cfg(f);
  CHECK_THROWS_AS(dominate_nodes(cfg), CfgError);
}

TEST_CASE("lengauer-tarjan matches the dataflow fixpoint on random graphs") {
  SplitMix64 rng(0xD0D0ULL);
  for (int iter = 0; iter < 500; ++iter) {
    ControlFlowGraph cfg = random_cfg(rng, 12, false);
    INFO("iteration " << iter);
    REQUIRE(lt_dominator_sets(cfg) == dataflow_dominators(cfg));
    REQUIRE(dominate_nodes(cfg) == dataflow_dominate_nodes(cfg));
  }
}

TEST_CASE("dominate nodes match exhaustive path enumeration on acyclic graphs") {
  SplitMix64 rng(0xACDCULL);
  for (int iter = 0; iter < 200; ++iter) {
    ControlFlowGraph cfg = random_cfg(rng, 9, true);
    INFO("iteration " << iter);
    REQUIRE(dominate_nodes(cfg) == all_paths_dominate_nodes(cfg));
  }
}

TEST_CASE("insertion after a candidate preserves the block and edge structure") {
  for (const char* text : {kDiamondText, kLoopText, kStraightLineText}) {
    Function f = parse_function(text);
    ControlFlowGraph before = build_cfg(f);
    for (std::size_t idx : vulnerable_candidates(f, before)) {
      Function g = splice_after(f, idx, {ins0(Opcode::nop), ins0(Opcode::nop)});
      ControlFlowGraph after = build_cfg(g);
      REQUIRE(after.blocks.size() == before.blocks.size());
      REQUIRE(after.edges == before.edges);
      REQUIRE(after.exits == before.exits);
      REQUIRE(after.unreachable == before.unreachable);
    }
  }
}

TEST_CASE("dot dump names every block and edge") {
  Function f = parse_function(kDiamondText);
  std::string dot = cfg_to_dot(build_cfg(f), "diamond");
  CHECK(dot.find("digraph diamond") != std::string::npos);
  CHECK(dot.find("b0") != std::string::npos);
  CHECK(dot.find("b5") != std::string::npos);
  CHECK(dot.find("b0 -> b1") != std::string::npos);
  CHECK(dot.find("L4") != std::string::npos);
}
