#pragma once

#include <vector>

#include "advasm/asm_core.hpp"
#include "advasm/rng.hpp"

// Random-but-valid instruction generation for property tests.

namespace advasm::testing {

inline Register random_reg(SplitMix64& rng, bool allow_rsp) {
  for (;;) {
    auto r = static_cast<Register>(rng.bounded(kRegisterCount));
    if (allow_rsp || r != Register::rsp) return r;
  }
}

inline MemRef random_mem(SplitMix64& rng, bool allow_rsp) {
  MemRef m;
  const std::uint8_t scales[4] = {1, 2, 4, 8};
  if (rng.bounded(8) == 0) {
    // index-only form
    m.index = random_reg(rng, allow_rsp);
    m.scale = scales[rng.bounded(4)];
  } else {
    m.base = random_reg(rng, allow_rsp);
    if (rng.bounded(3) == 0) {
      m.index = random_reg(rng, allow_rsp);
      m.scale = scales[rng.bounded(4)];
    }
  }
  switch (rng.bounded(4)) {
    case 0: m.disp = 0; break;
    case 1: m.disp = static_cast<std::int32_t>(rng.range(-128, 127)); break;
    case 2: m.disp = static_cast<std::int32_t>(rng.range(-65536, 65536)); break;
    default: m.disp = static_cast<std::int32_t>(rng.range(INT32_MIN, INT32_MAX)); break;
  }
  return m;
}

inline Operand random_rhs(SplitMix64& rng, bool allow_rsp, bool allow_mem) {
  switch (rng.bounded(allow_mem ? 3 : 2)) {
    case 0: return Operand::reg(random_reg(rng, allow_rsp));
    case 1: return Operand::imm(rng.range(-1024, 1024));
    default: return Operand::mem(random_mem(rng, allow_rsp));
  }
}

// Any valid non-control-transfer, non-exception instruction.
// With `correctable_only`, avoids rsp as an explicit destination or as part
// of an explicit memory operand, matching what the attack may insert.
inline Instruction random_plain_instruction(SplitMix64& rng, bool correctable_only) {
  const bool rsp_ok = !correctable_only;
  const Opcode kPlain[] = {
      Opcode::mov, Opcode::lea, Opcode::add, Opcode::sub, Opcode::xor_,
      Opcode::and_, Opcode::or_, Opcode::imul, Opcode::cmp, Opcode::test,
      Opcode::push, Opcode::pop, Opcode::pushfq, Opcode::popfq, Opcode::nop};
  const Opcode op = kPlain[rng.bounded(std::size(kPlain))];
  switch (op) {
    case Opcode::mov: case Opcode::add: case Opcode::sub: case Opcode::xor_:
    case Opcode::and_: case Opcode::or_: {
      if (rng.bounded(4) == 0) {
        // memory destination; source register or immediate
        Operand dst = Operand::mem(random_mem(rng, rsp_ok));
        return ins2(op, dst, random_rhs(rng, rsp_ok, false));
      }
      Operand dst = Operand::reg(random_reg(rng, rsp_ok));
      return ins2(op, dst, random_rhs(rng, rsp_ok, true));
    }
    case Opcode::lea:
      return ins2(op, Operand::reg(random_reg(rng, rsp_ok)),
                  Operand::mem(random_mem(rng, rsp_ok)));
    case Opcode::imul:
      return ins2(op, Operand::reg(random_reg(rng, rsp_ok)),
                  random_rhs(rng, rsp_ok, true));
    case Opcode::cmp: case Opcode::test: {
      if (rng.bounded(4) == 0) {
        return ins2(op, Operand::mem(random_mem(rng, rsp_ok)),
                    random_rhs(rng, rsp_ok, false));
      }
      return ins2(op, Operand::reg(random_reg(rng, true)),
                  random_rhs(rng, rsp_ok, true));
    }
    case Opcode::push:
      switch (rng.bounded(3)) {
        case 0: return ins1(op, Operand::imm(rng.range(-1024, 1024)));
        case 1: return ins1(op, Operand::mem(random_mem(rng, rsp_ok)));
        default: return ins1(op, Operand::reg(random_reg(rng, true)));
      }
    case Opcode::pop:
      return ins1(op, Operand::reg(random_reg(rng, true)));
    default:
      return ins0(op);  // pushfq, popfq, nop
  }
}

}  // namespace advasm::testing
