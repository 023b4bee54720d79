#pragma once

// Semantic side-effect correction: wraps an inserted instruction in fix
// instructions so that registers, flags, and memory are observably untouched.
// Register effects are spilled/restored (or inverted), flag effects bracketed
// by pushfq/popfq, and memory operands repointed into the bumper zones.

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "advasm/asm_core.hpp"
#include "advasm/emulate.hpp"

namespace advasm {

enum class SideEffectCategory { common_register, eflag_register, memory_corruption };

enum class CorrectionStrategy { spill_restore, inverse_op };

struct Uncorrectable : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Zone layout handed to report emitters so external tooling can replay runs.
struct BumperZones {
  std::uint64_t ro_base = kRoZoneBase;
  std::uint64_t ro_size = kRoZoneSize;
  std::uint64_t rw_base = kRwZoneBase;
  std::uint64_t rw_size = kRwZoneSize;
};

// Rotating redirection cursors, one per zone: each corrected memory access
// claims the current offset and advances by a fixed stride, wrapping at the
// zone size, so repeated corrections spread deterministically over the zone.
struct CorrectionContext {
  std::uint64_t ro_cursor = 0;  // byte offset into the read-only zone
  std::uint64_t rw_cursor = 0;  // byte offset into the read-write zone
};

inline constexpr std::uint64_t kZoneCursorStride = 64;
// Headroom below the slot target: scaled-index redirection may land the
// effective address up to (1 + max scale) bytes short of the target.
inline constexpr std::uint64_t kZoneSlotMargin = 32;

inline std::set<SideEffectCategory> classify_side_effects(const Instruction& i) {
  std::set<SideEffectCategory> cats;
  const SideEffectSet fx = instruction_side_effects(i);
  if (fx.regs_written != 0) cats.insert(SideEffectCategory::common_register);
  if (fx.flags_written != 0) cats.insert(SideEffectCategory::eflag_register);
  // Only explicit memory operands corrupt: implicit stack traffic (push/pop)
  // is balanced by the stack templates, not a stray access to fix.
  const bool explicit_read = fx.mem_read.has_value() && !fx.mem_read_implicit;
  const bool explicit_write = fx.mem_written.has_value() && !fx.mem_written_implicit;
  if (explicit_read || explicit_write) {
    cats.insert(SideEffectCategory::memory_corruption);
  }
  return cats;
}

// An instruction the corrector can neutralize. Control transfers and
// exception-raisers are excluded upstream; rsp writers other than the four
// stack ops and rsp-relative memory operands have no sound spill sequence.
inline bool correctable(const Instruction& i) {
  if (is_control_transfer(i.op) || is_exception(i.op)) return false;
  const bool stack_op = i.op == Opcode::push || i.op == Opcode::pop ||
                        i.op == Opcode::pushfq || i.op == Opcode::popfq;
  if (!stack_op) {
    const SideEffectSet fx = instruction_side_effects(i);
    if ((fx.regs_written & reg_bit(Register::rsp)) != 0) return false;
  }
  if (const Operand* m = i.memory_operand()) {
    if (m->mem_.uses(Register::rsp)) return false;
  }
  return true;
}

struct CorrectionPlan {
  std::vector<Instruction> prologue;
  Instruction core;
  std::vector<Instruction> epilogue;

  std::vector<Instruction> sequence() const {
    std::vector<Instruction> out = prologue;
    out.push_back(core);
    out.insert(out.end(), epilogue.begin(), epilogue.end());
    return out;
  }
  std::size_t fix_count() const { return prologue.size() + epilogue.size(); }
};

namespace detail {

inline std::int64_t floor_div(std::int64_t num, std::int64_t den) {
  std::int64_t q = num / den;
  if ((num % den) != 0 && ((num < 0) != (den < 0))) --q;
  return q;
}

inline Instruction fix(Instruction ins) {
  ins.origin = Origin::fix;
  return ins;
}

inline Instruction fix_push(Register r) { return fix(ins1(Opcode::push, Operand::reg(r))); }
inline Instruction fix_pop(Register r) { return fix(ins1(Opcode::pop, Operand::reg(r))); }
inline Instruction fix_pushfq() { return fix(ins0(Opcode::pushfq)); }
inline Instruction fix_popfq() { return fix(ins0(Opcode::popfq)); }
inline Instruction fix_mov_imm(Register r, std::int64_t v) {
  return fix(ins2(Opcode::mov, Operand::reg(r), Operand::imm(v)));
}
// Flag-free stack release: undoes one push without disturbing EFLAGS.
inline Instruction fix_drop_qword() {
  MemRef m;
  m.base = Register::rsp;
  m.disp = 8;
  return fix(ins2(Opcode::lea, Operand::reg(Register::rsp), Operand::mem(m)));
}

// Claim the next redirection slot in the chosen zone and advance its cursor.
inline std::uint64_t take_slot(CorrectionContext& ctx, bool writes) {
  std::uint64_t& cur = writes ? ctx.rw_cursor : ctx.ro_cursor;
  const std::uint64_t base = writes ? kRwZoneBase : kRoZoneBase;
  const std::uint64_t size = writes ? kRwZoneSize : kRoZoneSize;
  const std::uint64_t target = base + cur + kZoneSlotMargin;
  cur = (cur + kZoneCursorStride) % size;
  return target;
}

// Register assignments that land base + index*scale + disp on (or within a
// scale remainder below) the slot target. Spilled registers and setter movs
// are appended in a fixed order.
inline void plan_redirect(const MemRef& m, std::uint64_t target,
                          std::vector<Register>& spills, std::vector<Instruction>& setters) {
  const std::int64_t T = static_cast<std::int64_t>(target);
  const std::int64_t d = m.disp;
  if (m.base && m.index) {
    if (*m.base == *m.index) {
      spills.push_back(*m.base);
      const std::int64_t v = floor_div(T - d, 1 + static_cast<std::int64_t>(m.scale));
      setters.push_back(fix_mov_imm(*m.base, v));
    } else {
      spills.push_back(*m.base);
      spills.push_back(*m.index);
      setters.push_back(fix_mov_imm(*m.index, 0));
      setters.push_back(fix_mov_imm(*m.base, T - d));
    }
  } else if (m.base) {
    spills.push_back(*m.base);
    setters.push_back(fix_mov_imm(*m.base, T - d));
  } else {
    spills.push_back(*m.index);
    const std::int64_t v = floor_div(T - d, static_cast<std::int64_t>(m.scale));
    setters.push_back(fix_mov_imm(*m.index, v));
  }
}

inline Opcode inverse_opcode(Opcode op) {
  switch (op) {
    case Opcode::add: return Opcode::sub;
    case Opcode::sub: return Opcode::add;
    case Opcode::xor_: return Opcode::xor_;
    default: throw Uncorrectable(std::string("no inverse for ") + opcode_name(op));
  }
}

}  // namespace detail

inline CorrectionPlan build_correction(const Instruction& i, CorrectionStrategy strategy,
                                       CorrectionContext& ctx) {
  using namespace detail;
  if (!correctable(i)) {
    throw Uncorrectable(std::string("uncorrectable instruction: ") + opcode_name(i.op));
  }

  CorrectionPlan plan;
  plan.core = i;
  plan.core.origin = Origin::adversarial;
  const SideEffectSet fx = instruction_side_effects(i);

  // Inverse eligibility is decided before any redirect slot is claimed, so a
  // rejected attempt never advances the zone cursors.
  if (strategy == CorrectionStrategy::inverse_op) {
    const bool invertible_op =
        i.op == Opcode::add || i.op == Opcode::sub || i.op == Opcode::xor_;
    if (!invertible_op || !i.operands[0].is_reg()) {
      throw Uncorrectable("inverse correction requires add/sub/xor with a register destination");
    }
    const Register dest = i.operands[0].reg_;
    const Operand& src = i.operands[1];
    const bool src_uses_dest = (src.is_reg() && src.reg_ == dest) ||
                               (src.is_mem() && src.mem_.uses(dest));
    if (src_uses_dest) {
      throw Uncorrectable("inverse correction requires the destination outside the source");
    }
  }

  // Memory redirection, shared by both strategies: reads are repointed into
  // the read-only zone, anything that writes into the read-write zone.
  std::vector<Register> redirect_spills;
  std::vector<Instruction> setters;
  if (const Operand* mem = i.memory_operand()) {
    // Zone choice keys off the explicit operand: a push's implicit stack
    // write must not force its read-only source into the writable zone.
    const bool writes = fx.mem_written.has_value() && !fx.mem_written_implicit;
    const std::uint64_t target = take_slot(ctx, writes);
    plan_redirect(mem->mem_, target, redirect_spills, setters);
  }

  if (strategy == CorrectionStrategy::inverse_op) {
    plan.prologue.push_back(fix_pushfq());
    for (Register r : redirect_spills) plan.prologue.push_back(fix_push(r));
    for (Instruction& s : setters) plan.prologue.push_back(std::move(s));
    // Inverse first, while any redirected registers still hold zone targets.
    plan.epilogue.push_back(fix(ins2(inverse_opcode(i.op), i.operands[0], i.operands[1])));
    for (auto it = redirect_spills.rbegin(); it != redirect_spills.rend(); ++it) {
      plan.epilogue.push_back(fix_pop(*it));
    }
    plan.epilogue.push_back(fix_popfq());
    return plan;
  }

  // Spill/restore. The four stack ops are corrected by complementary stack
  // templates; their own rsp adjustment is undone with a flag-free lea, and
  // a pop core reloads the value its prologue push just spilled.
  switch (i.op) {
    case Opcode::push:
      for (Register r : redirect_spills) plan.prologue.push_back(fix_push(r));
      for (Instruction& s : setters) plan.prologue.push_back(std::move(s));
      plan.epilogue.push_back(fix_drop_qword());
      for (auto it = redirect_spills.rbegin(); it != redirect_spills.rend(); ++it) {
        plan.epilogue.push_back(fix_pop(*it));
      }
      return plan;
    case Opcode::pop:
      plan.prologue.push_back(fix_push(i.operands[0].reg_));
      return plan;
    case Opcode::pushfq:
      plan.epilogue.push_back(fix_drop_qword());
      return plan;
    case Opcode::popfq:
      plan.prologue.push_back(fix_pushfq());
      return plan;
    default:
      break;
  }

  const bool wrap_flags = fx.flags_written != 0;
  std::vector<Register> spills;
  for (int r = 0; r < kRegisterCount; ++r) {
    const auto reg = static_cast<Register>(r);
    if ((fx.regs_written & reg_bit(reg)) != 0) spills.push_back(reg);
  }
  for (Register r : redirect_spills) {
    if ((fx.regs_written & reg_bit(r)) == 0) spills.push_back(r);
  }

  if (wrap_flags) plan.prologue.push_back(fix_pushfq());
  for (Register r : spills) plan.prologue.push_back(fix_push(r));
  for (Instruction& s : setters) plan.prologue.push_back(std::move(s));
  for (auto it = spills.rbegin(); it != spills.rend(); ++it) {
    plan.epilogue.push_back(fix_pop(*it));
  }
  if (wrap_flags) plan.epilogue.push_back(fix_popfq());
  return plan;
}

inline Function apply_correction(const Function& f, std::size_t insert_index,
                                 const CorrectionPlan& plan) {
  return splice_after(f, insert_index, plan.sequence());
}

}  // namespace advasm
