#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <string>
#include <vector>

#include "advasm/asm_text.hpp"
#include "advasm/cfg.hpp"
#include "advasm/correct.hpp"
#include "advasm/emulate.hpp"
#include "advasm/rng.hpp"
#include "support/fixtures.hpp"
#include "support/instr_gen.hpp"

using namespace advasm;
using namespace advasm::testing;

namespace {

// Parse a single instruction out of a one-line function body.
Instruction I(const std::string& text) {
  Function f = parse_function("fn t:\n  " + text + "\n  ret\n");
  return f.instructions[0];
}

std::vector<std::string> rendered(const std::vector<Instruction>& seq) {
  std::vector<std::string> out;
  out.reserve(seq.size());
  for (const Instruction& i : seq) out.push_back(render_instruction(i));
  return out;
}

using Renders = std::vector<std::string>;

// A plan is neutral when a function running just the corrected sequence is
// observationally equivalent to an empty function.
bool plan_neutral(const CorrectionPlan& plan, int trials = 8) {
  Function f;
  f.name = "plan";
  f.instructions = plan.sequence();
  f.instructions.push_back(ins0(Opcode::ret));
  Function g;
  g.name = "plan";
  g.instructions.push_back(ins0(Opcode::ret));
  return check_equivalence(f, g, trials, 0xC0FFEEull).equivalent;
}

CorrectionPlan plan_of(const std::string& text,
                       CorrectionStrategy strategy = CorrectionStrategy::spill_restore) {
  CorrectionContext ctx;
  return build_correction(I(text), strategy, ctx);
}

std::set<SideEffectCategory> cats_of(const std::string& text) {
  return classify_side_effects(I(text));
}

}  // namespace

TEST_CASE("side effects classify into the three categories") {
  using C = SideEffectCategory;
  const std::set<C> none;
  CHECK(cats_of("nop") == none);
  CHECK(cats_of("mov rbx, rcx") == std::set<C>{C::common_register});
  CHECK(cats_of("lea rbx, [rax+8]") == std::set<C>{C::common_register});
  CHECK(cats_of("cmp rax, 0") == std::set<C>{C::eflag_register});
  CHECK(cats_of("mov [rax], rbx") == std::set<C>{C::memory_corruption});
  CHECK(cats_of("add rdx, [rax+3]") ==
        std::set<C>({C::common_register, C::eflag_register, C::memory_corruption}));
  CHECK(cats_of("test [rax], 5") ==
        std::set<C>({C::eflag_register, C::memory_corruption}));

  SECTION("implicit stack traffic is not memory corruption") {
    // push/pop move rsp (a register effect) but their stack slot access is
    // balanced by construction, so only an explicit operand counts as memory.
    CHECK(cats_of("push rbx") == std::set<C>{C::common_register});
    CHECK(cats_of("pop rbx") == std::set<C>{C::common_register});
    CHECK(cats_of("pushfq") == std::set<C>{C::common_register});
    CHECK(cats_of("popfq") == std::set<C>({C::common_register, C::eflag_register}));
    CHECK(cats_of("push [rax+8]") ==
          std::set<C>({C::common_register, C::memory_corruption}));
  }
}

TEST_CASE("correctable filter admits exactly the fixable instructions") {
  SECTION("plain register and memory instructions are correctable") {
    CHECK(correctable(I("nop")));
    CHECK(correctable(I("mov rbx, rcx")));
    CHECK(correctable(I("add [rbx], 7")));
    CHECK(correctable(I("cmp rsp, 0")));      // rsp read, not written
    CHECK(correctable(I("mov [rax], rsp")));  // rsp as stored value only
  }
  SECTION("the four stack ops are correctable, even on rsp itself") {
    CHECK(correctable(I("push rsp")));
    CHECK(correctable(I("pop rsp")));
    CHECK(correctable(I("pushfq")));
    CHECK(correctable(I("popfq")));
    CHECK(correctable(I("push [rax]")));
  }
  SECTION("other rsp writers have no sound spill sequence") {
    CHECK_FALSE(correctable(I("mov rsp, 5")));
    CHECK_FALSE(correctable(I("lea rsp, [rax]")));
    CHECK_FALSE(correctable(I("add rsp, 8")));
  }
  SECTION("rsp-relative memory operands cannot be redirected") {
    CHECK_FALSE(correctable(I("mov [rsp+8], rax")));
    CHECK_FALSE(correctable(I("mov rax, [rsp]")));
    CHECK_FALSE(correctable(I("push [rsp]")));
    CHECK_FALSE(correctable(I("cmp rbx, [rax+rsp*2]")));
  }
  SECTION("control transfers and exception raisers are excluded") {
    CHECK_FALSE(correctable(ins1(Opcode::jmp, Operand::label("x"))));
    CHECK_FALSE(correctable(ins1(Opcode::je, Operand::label("x"))));
    CHECK_FALSE(correctable(ins1(Opcode::call, Operand::label("ext"))));
    CHECK_FALSE(correctable(ins0(Opcode::ret)));
    CHECK_FALSE(correctable(ins0(Opcode::syscall)));
    CHECK_FALSE(correctable(ins1(Opcode::int_, Operand::imm(3))));
  }
  SECTION("building a correction for an uncorrectable instruction throws") {
    CorrectionContext ctx;
    CHECK_THROWS_AS(build_correction(I("mov rsp, 5"), CorrectionStrategy::spill_restore, ctx),
                    Uncorrectable);
    CHECK_THROWS_AS(build_correction(I("mov rax, [rsp]"), CorrectionStrategy::inverse_op, ctx),
                    Uncorrectable);
  }
}

TEST_CASE("register spill wraps a register-writing instruction") {
  CorrectionPlan plan = plan_of("mov rbx, rcx");
  CHECK(rendered(plan.prologue) == Renders{"push rbx"});
  CHECK(render_instruction(plan.core) == "mov rbx, rcx");
  CHECK(rendered(plan.epilogue) == Renders{"pop rbx"});
  CHECK(plan.fix_count() == 2);
  CHECK(plan_neutral(plan));

  SECTION("an effect-free core needs no fixes") {
    CorrectionPlan none = plan_of("nop");
    CHECK(none.prologue.empty());
    CHECK(none.epilogue.empty());
    CHECK(none.fix_count() == 0);
    CHECK(plan_neutral(none));
  }
  SECTION("origin marks distinguish the inserted core from its fixes") {
    CHECK(plan.core.origin == Origin::adversarial);
    for (const Instruction& i : plan.prologue) CHECK(i.origin == Origin::fix);
    for (const Instruction& i : plan.epilogue) CHECK(i.origin == Origin::fix);
  }
}

TEST_CASE("memory read corrections redirect into the read-only zone") {
  CorrectionContext ctx;
  CorrectionPlan plan = build_correction(I("add rdx, [rax+3]"),
                                         CorrectionStrategy::spill_restore, ctx);
  // Frozen shape: flags saved, written then addressing registers spilled in
  // declaration order, base pointed at slot - disp so the access lands at
  // 0x10000020, everything restored in reverse.
  CHECK(rendered(plan.sequence()) ==
        Renders({"pushfq", "push rdx", "push rax", "mov rax, 268435485",
                 "add rdx, [rax+3]", "pop rax", "pop rdx", "popfq"}));
  CHECK(plan.fix_count() == 7);
  CHECK(ctx.ro_cursor == kZoneCursorStride);
  CHECK(ctx.rw_cursor == 0);
  CHECK(plan_neutral(plan, 16));

  SECTION("the redirected read stays inside the read-only zone") {
    Function f;
    f.name = "plan";
    f.instructions = plan.sequence();
    f.instructions.push_back(ins0(Opcode::ret));
    ExecutionResult r = execute(f, init_machine(11), 256);
    REQUIRE(r.halted());
    for (std::uint64_t a : r.write_set) {
      // Only stack spill traffic: the read itself must not write anywhere.
      CHECK(a >= kStackBase);
      CHECK(a < kStackBase + kStackSize);
    }
  }
}

TEST_CASE("memory write corrections redirect into the read-write zone") {
  CorrectionContext ctx;
  CorrectionPlan plan = build_correction(I("mov [rbx+16], rcx"),
                                         CorrectionStrategy::spill_restore, ctx);
  CHECK(rendered(plan.sequence()) ==
        Renders({"push rbx", "mov rbx, 536870928", "mov [rbx+16], rcx", "pop rbx"}));
  CHECK(ctx.rw_cursor == kZoneCursorStride);
  CHECK(ctx.ro_cursor == 0);
  CHECK(plan_neutral(plan));

  Function f;
  f.name = "plan";
  f.instructions = plan.sequence();
  f.instructions.push_back(ins0(Opcode::ret));
  ExecutionResult r = execute(f, init_machine(23), 256);
  REQUIRE(r.halted());
  std::set<std::uint64_t> zone_writes;
  for (std::uint64_t a : r.write_set) {
    const bool stack = a >= kStackBase && a < kStackBase + kStackSize;
    if (!stack) {
      CHECK(in_rw_zone(a));
      zone_writes.insert(a);
    }
  }
  // The store's full qword lands at the claimed slot, 0x20000020.
  const std::set<std::uint64_t> expected = {536870944, 536870945, 536870946, 536870947,
                                            536870948, 536870949, 536870950, 536870951};
  CHECK(zone_writes == expected);

  SECTION("read-modify-write operands count as writes") {
    CorrectionContext c2;
    CorrectionPlan rmw = build_correction(I("add [rbx+16], rcx"),
                                          CorrectionStrategy::spill_restore, c2);
    CHECK(rendered(rmw.prologue) == Renders({"pushfq", "push rbx", "mov rbx, 536870928"}));
    CHECK(c2.rw_cursor == kZoneCursorStride);
    CHECK(c2.ro_cursor == 0);
    CHECK(plan_neutral(rmw));
  }
}

TEST_CASE("redirection handles every addressing shape") {
  SECTION("base == index uses a floor-divided shared value") {
    CorrectionPlan plan = plan_of("mov rbx, [rax+rax*2+5]");
    // floor((0x10000020 - 5) / 3) = 89478494; 3v + 5 = 0x1000001F, one shy of
    // the slot target and comfortably inside the zone.
    CHECK(rendered(plan.prologue) ==
          Renders({"push rbx", "push rax", "mov rax, 89478494"}));
    CHECK(rendered(plan.epilogue) == Renders({"pop rax", "pop rbx"}));
    CHECK(plan_neutral(plan));
  }
  SECTION("index-only operands divide by the scale") {
    CorrectionPlan plan = plan_of("mov rbx, [rcx*8+16]");
    // floor((0x10000020 - 16) / 8) = 33554434; 8v + 16 is the target exactly.
    CHECK(rendered(plan.prologue) ==
          Renders({"push rbx", "push rcx", "mov rcx, 33554434"}));
    CHECK(rendered(plan.epilogue) == Renders({"pop rcx", "pop rbx"}));
    CHECK(plan_neutral(plan));
  }
  SECTION("distinct base and index zero the index") {
    CorrectionPlan plan = plan_of("mov rbx, [rdx+rcx*4+8]");
    CHECK(rendered(plan.prologue) ==
          Renders({"push rbx", "push rdx", "push rcx", "mov rcx, 0",
                   "mov rdx, 268435480"}));
    CHECK(rendered(plan.epilogue) == Renders({"pop rcx", "pop rdx", "pop rbx"}));
    CHECK(plan_neutral(plan));
  }
  SECTION("negative displacements aim above the slot") {
    CorrectionPlan plan = plan_of("cmp rbx, [rax-100]");
    CHECK(rendered(plan.prologue) ==
          Renders({"pushfq", "push rax", "mov rax, 268435588"}));
    CHECK(rendered(plan.epilogue) == Renders({"pop rax", "popfq"}));
    CHECK(plan_neutral(plan));
  }
}

TEST_CASE("zone cursors rotate by the stride and wrap at the zone size") {
  CorrectionContext ctx;
  CorrectionPlan first = build_correction(I("mov rdx, [rax]"),
                                          CorrectionStrategy::spill_restore, ctx);
  CorrectionPlan second = build_correction(I("mov rdx, [rax]"),
                                           CorrectionStrategy::spill_restore, ctx);
  CHECK(rendered(first.prologue).back() == "mov rax, 268435488");
  CHECK(rendered(second.prologue).back() == "mov rax, 268435552");  // +64
  CHECK(ctx.ro_cursor == 2 * kZoneCursorStride);

  SECTION("the final slot wraps back to the zone start") {
    CorrectionContext tail;
    tail.ro_cursor = kRoZoneSize - kZoneCursorStride;
    CorrectionPlan plan = build_correction(I("mov rdx, [rax]"),
                                           CorrectionStrategy::spill_restore, tail);
    CHECK(rendered(plan.prologue).back() == "mov rax, 268500960");
    CHECK(tail.ro_cursor == 0);
    CHECK(plan_neutral(plan));
  }
  SECTION("read and write cursors advance independently") {
    CorrectionContext both;
    build_correction(I("mov rdx, [rax]"), CorrectionStrategy::spill_restore, both);
    build_correction(I("mov [rax], rdx"), CorrectionStrategy::spill_restore, both);
    CHECK(both.ro_cursor == kZoneCursorStride);
    CHECK(both.rw_cursor == kZoneCursorStride);
  }
}

TEST_CASE("stack ops are corrected by complementary stack templates") {
  SECTION("push: epilogue releases the slot without touching flags") {
    CorrectionPlan plan = plan_of("push rbx");
    CHECK(plan.prologue.empty());
    CHECK(rendered(plan.epilogue) == Renders{"lea rsp, [rsp+8]"});
    CHECK(plan_neutral(plan));
    CHECK(plan_neutral(plan_of("push 42")));
    CHECK(plan_neutral(plan_of("push rsp")));
  }
  SECTION("push from memory also redirects its read") {
    CorrectionPlan plan = plan_of("push [rax+8]");
    CHECK(rendered(plan.sequence()) ==
          Renders({"push rax", "mov rax, 268435480", "push [rax+8]",
                   "lea rsp, [rsp+8]", "pop rax"}));
    CHECK(plan_neutral(plan));
  }
  SECTION("pop: prologue pushes the value the core will reload") {
    CorrectionPlan plan = plan_of("pop rbx");
    CHECK(rendered(plan.prologue) == Renders{"push rbx"});
    CHECK(plan.epilogue.empty());
    CHECK(plan_neutral(plan));
    CHECK(plan_neutral(plan_of("pop rsp")));
  }
  SECTION("pushfq and popfq mirror the register templates") {
    CorrectionPlan pf = plan_of("pushfq");
    CHECK(pf.prologue.empty());
    CHECK(rendered(pf.epilogue) == Renders{"lea rsp, [rsp+8]"});
    CHECK(plan_neutral(pf));

    CorrectionPlan qf = plan_of("popfq");
    CHECK(rendered(qf.prologue) == Renders{"pushfq"});
    CHECK(qf.epilogue.empty());
    CHECK(plan_neutral(qf));
  }
}

TEST_CASE("inverse corrections undo the core arithmetically") {
  SECTION("add is undone by sub inside a flag bracket") {
    CorrectionPlan plan = plan_of("add rbx, 5", CorrectionStrategy::inverse_op);
    CHECK(rendered(plan.prologue) == Renders{"pushfq"});
    CHECK(rendered(plan.epilogue) == Renders({"sub rbx, 5", "popfq"}));
    CHECK(plan.fix_count() == 3);
    CHECK(plan_neutral(plan, 16));
  }
  SECTION("xor is its own inverse") {
    CorrectionPlan plan = plan_of("xor r8, r9", CorrectionStrategy::inverse_op);
    CHECK(rendered(plan.epilogue) == Renders({"xor r8, r9", "popfq"}));
    CHECK(plan_neutral(plan));
  }
  SECTION("memory sources are redirected and re-read by the inverse") {
    CorrectionPlan plan = plan_of("sub rdx, [rax+8]", CorrectionStrategy::inverse_op);
    CHECK(rendered(plan.sequence()) ==
          Renders({"pushfq", "push rax", "mov rax, 268435480", "sub rdx, [rax+8]",
                   "add rdx, [rax+8]", "pop rax", "popfq"}));
    CHECK(plan_neutral(plan, 16));
  }
  SECTION("ineligible cores are rejected") {
    CorrectionContext ctx;
    CHECK_THROWS_AS(build_correction(I("add [rax], rbx"), CorrectionStrategy::inverse_op, ctx),
                    Uncorrectable);
    CHECK_THROWS_AS(build_correction(I("add rax, rax"), CorrectionStrategy::inverse_op, ctx),
                    Uncorrectable);
    CHECK_THROWS_AS(build_correction(I("add rdx, [rdx+8]"), CorrectionStrategy::inverse_op, ctx),
                    Uncorrectable);
    CHECK_THROWS_AS(build_correction(I("mov rbx, rcx"), CorrectionStrategy::inverse_op, ctx),
                    Uncorrectable);
    CHECK_THROWS_AS(build_correction(I("imul rbx, 3"), CorrectionStrategy::inverse_op, ctx),
                    Uncorrectable);
    // Rejections never claim a redirection slot.
    CHECK(ctx.ro_cursor == 0);
    CHECK(ctx.rw_cursor == 0);
  }
}

TEST_CASE("fix sequences balance their own stack traffic") {
  SplitMix64 rng(0xBA1A4CEull);
  int checked = 0;
  for (int n = 0; n < 400; ++n) {
    Instruction ins = random_plain_instruction(rng, /*correctable_only=*/true);
    const bool stack_op = ins.op == Opcode::push || ins.op == Opcode::pop ||
                          ins.op == Opcode::pushfq || ins.op == Opcode::popfq;
    if (stack_op) continue;  // templates are asymmetric by design
    CorrectionContext ctx;
    CorrectionPlan plan = build_correction(ins, CorrectionStrategy::spill_restore, ctx);
    auto count = [](const std::vector<Instruction>& seq, Opcode op) {
      std::size_t c = 0;
      for (const Instruction& i : seq) c += i.op == op;
      return c;
    };
    REQUIRE(count(plan.prologue, Opcode::push) == count(plan.epilogue, Opcode::pop));
    REQUIRE(count(plan.prologue, Opcode::pushfq) == count(plan.epilogue, Opcode::popfq));
    REQUIRE(count(plan.epilogue, Opcode::push) == 0);
    REQUIRE(count(plan.prologue, Opcode::pop) == 0);
    ++checked;
  }
  REQUIRE(checked > 250);
}

TEST_CASE("applying a correction shifts labels and preserves the cfg") {
  Function f = parse_function(kDiamondText);
  ControlFlowGraph before = build_cfg(f);

  CorrectionContext ctx;
  CorrectionPlan plan = build_correction(I("mov rbx, rcx"),
                                         CorrectionStrategy::spill_restore, ctx);
  Function g = apply_correction(f, 0, plan);

  REQUIRE(g.instructions.size() == f.instructions.size() + 3);
  CHECK(g.instructions[1] == I("push rbx"));
  CHECK(g.instructions[2] == I("mov rbx, rcx"));
  CHECK(g.instructions[2].origin == Origin::adversarial);
  CHECK(g.instructions[3] == I("pop rbx"));

  // Labels at or before the insertion point stay put; the rest shift.
  CHECK(g.labels.at("L1") == 0);
  CHECK(g.labels.at("L2") == f.labels.at("L2") + 3);
  CHECK(g.labels.at("L4") == f.labels.at("L4") + 3);

  ControlFlowGraph after = build_cfg(g);
  CHECK(after.blocks.size() == before.blocks.size());
  CHECK(after.edges == before.edges);
  CHECK(after.entry == before.entry);
  CHECK(after.exits == before.exits);
  CHECK(after.unreachable == before.unreachable);

  SECTION("the corrected function renders and reparses unchanged") {
    Function back = parse_function(render_function(g));
    CHECK(back == g);
  }
  SECTION("correction leaves the function observationally intact") {
    EquivalenceVerdict v = check_equivalence(f, g, 24);
    CHECK(v.equivalent);
  }
}

TEST_CASE("spill corrections are neutral across random correctable cores") {
  SplitMix64 rng(0x5EED5ull);
  for (int n = 0; n < 1000; ++n) {
    Instruction ins = random_plain_instruction(rng, /*correctable_only=*/true);
    CorrectionContext ctx;
    CorrectionPlan plan = build_correction(ins, CorrectionStrategy::spill_restore, ctx);
    const bool ok = plan_neutral(plan, 3);
    if (!ok) {
      CAPTURE(n, render_instruction(ins));
      REQUIRE(ok);
    }
  }
}

TEST_CASE("inverse corrections are neutral across eligible cores") {
  SplitMix64 rng(0x1517ull);
  int built = 0;
  for (int n = 0; n < 300; ++n) {
    const Opcode ops[3] = {Opcode::add, Opcode::sub, Opcode::xor_};
    const Opcode op = ops[rng.bounded(3)];
    const Register dest = random_reg(rng, /*allow_rsp=*/false);
    Operand src = rng.bounded(2) == 0
                      ? Operand::imm(rng.range(-512, 512))
                      : Operand::reg(random_reg(rng, /*allow_rsp=*/false));
    if (src.is_reg() && src.reg_ == dest) continue;
    CorrectionContext ctx;
    CorrectionPlan plan =
        build_correction(ins2(op, Operand::reg(dest), src), CorrectionStrategy::inverse_op, ctx);
    const bool ok = plan_neutral(plan, 2);
    if (!ok) {
      CAPTURE(n, render_instruction(plan.core));
      REQUIRE(ok);
    }
    ++built;
  }
  REQUIRE(built > 200);
}
