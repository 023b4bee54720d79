#pragma once

// Deterministic interpreter for the instruction subset. Serves as the
// functionality oracle: differential equivalence between a function and its
// modified variant is decided by running both from identical seeded states
// under a total-memory read rule and comparing observable results.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "advasm/asm_core.hpp"
#include "advasm/asm_text.hpp"
#include "advasm/rng.hpp"

namespace advasm {

// Bumper zones: redirected reads land in a zero-filled read-only region,
// redirected writes in a zero-filled scratch region. The corrector and the
// machine share these constants.
inline constexpr std::uint64_t kRoZoneBase = 0x10000000ull;
inline constexpr std::uint64_t kRoZoneSize = 65536ull;
inline constexpr std::uint64_t kRwZoneBase = 0x20000000ull;
inline constexpr std::uint64_t kRwZoneSize = 65536ull;

inline constexpr std::uint64_t kStackBase = 0x7FFF0000ull;
inline constexpr std::uint64_t kStackSize = 65536ull;
inline constexpr std::uint64_t kInitialRsp = kStackBase + kStackSize - 128;  // 0x7FFFFF80

inline constexpr std::size_t kDefaultMaxSteps = 100000;
inline constexpr int kDefaultEquivalenceTrials = 100;

inline constexpr bool in_ro_zone(std::uint64_t a) {
  return a >= kRoZoneBase && a < kRoZoneBase + kRoZoneSize;
}
inline constexpr bool in_rw_zone(std::uint64_t a) {
  return a >= kRwZoneBase && a < kRwZoneBase + kRwZoneSize;
}
inline constexpr bool in_bumper_zone(std::uint64_t a) { return in_ro_zone(a) || in_rw_zone(a); }

struct MachineState {
  std::array<std::uint64_t, 16> gprs{};
  FlagSet flags;
  std::unordered_map<std::uint64_t, std::uint8_t> memory;  // written-byte overlay
  std::uint64_t trial_seed = 0;
  std::size_t step_count = 0;

  std::uint64_t reg(Register r) const { return gprs[static_cast<std::size_t>(r)]; }
  void set_reg(Register r, std::uint64_t v) { gprs[static_cast<std::size_t>(r)] = v; }

  // Total-memory rule: written bytes read back; bumper-zone bytes default to
  // zero; everything else yields a deterministic hash of (address, seed).
  std::uint8_t read_byte(std::uint64_t addr) const {
    auto it = memory.find(addr);
    if (it != memory.end()) return it->second;
    if (in_bumper_zone(addr)) return 0;
    return static_cast<std::uint8_t>(mix64(addr, trial_seed));
  }

  std::uint64_t read_qword(std::uint64_t addr) const {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
      v = (v << 8) | read_byte(addr + static_cast<std::uint64_t>(i));
    }
    return v;
  }
};

// Seeded initial state: every GPR except rsp is drawn from the generator,
// rsp sits 128 bytes below the stack top, flags are clear.
inline MachineState init_machine(std::uint64_t seed) {
  MachineState s;
  s.trial_seed = seed;
  SplitMix64 gen(seed);
  for (int i = 0; i < kRegisterCount; ++i) {
    const auto r = static_cast<Register>(i);
    s.gprs[static_cast<std::size_t>(i)] = (r == Register::rsp) ? kInitialRsp : gen.next();
  }
  return s;
}

enum class FaultKind { ro_zone_write, step_limit, unmapped_jump };

inline const char* fault_name(FaultKind k) {
  switch (k) {
    case FaultKind::ro_zone_write: return "RoZoneWrite";
    case FaultKind::step_limit: return "StepLimit";
    case FaultKind::unmapped_jump: return "UnmappedJump";
  }
  return "?";
}

struct ExecutionResult {
  std::optional<FaultKind> fault;      // empty = ran a ret at call depth 0
  std::size_t fault_index = 0;         // instruction index, valid when faulted
  MachineState state;                  // final (halt) or at-fault state
  std::set<std::uint64_t> write_set;   // every byte address written

  bool halted() const { return !fault.has_value(); }
};

struct TraceStep {
  std::size_t step;
  std::size_t index;
  std::string text;     // rendered instruction
  std::string changes;  // "rax=0x2a [0x7fffff78]=0x1 flags=..."
};

namespace detail {

inline bool parity_even(std::uint64_t r) {
  std::uint8_t b = static_cast<std::uint8_t>(r);
  b ^= static_cast<std::uint8_t>(b >> 4);
  b ^= static_cast<std::uint8_t>(b >> 2);
  b ^= static_cast<std::uint8_t>(b >> 1);
  return (b & 1) == 0;
}

inline void common_result_flags(FlagSet& fl, std::uint64_t r) {
  fl.zf = r == 0;
  fl.sf = (r >> 63) & 1;
  fl.pf = parity_even(r);
}

inline void add_flags(FlagSet& fl, std::uint64_t a, std::uint64_t b, std::uint64_t r) {
  fl.cf = r < a;
  fl.of = ((~(a ^ b) & (a ^ r)) >> 63) & 1;
  fl.af = ((a ^ b ^ r) >> 4) & 1;
  common_result_flags(fl, r);
}

inline void sub_flags(FlagSet& fl, std::uint64_t a, std::uint64_t b, std::uint64_t r) {
  fl.cf = a < b;
  fl.of = (((a ^ b) & (a ^ r)) >> 63) & 1;
  fl.af = ((a ^ b ^ r) >> 4) & 1;
  common_result_flags(fl, r);
}

// and/or/xor/test: carry and overflow cleared, af untouched.
inline void logic_flags(FlagSet& fl, std::uint64_t r) {
  fl.cf = false;
  fl.of = false;
  common_result_flags(fl, r);
}

inline std::uint64_t encode_rflags(const FlagSet& fl) {
  return (fl.cf ? 1ull : 0ull) | (1ull << 1) | (static_cast<std::uint64_t>(fl.pf) << 2) |
         (static_cast<std::uint64_t>(fl.af) << 4) | (static_cast<std::uint64_t>(fl.zf) << 6) |
         (static_cast<std::uint64_t>(fl.sf) << 7) | (static_cast<std::uint64_t>(fl.of) << 11);
}

inline FlagSet decode_rflags(std::uint64_t v) {
  FlagSet fl;
  fl.cf = v & 1;
  fl.pf = (v >> 2) & 1;
  fl.af = (v >> 4) & 1;
  fl.zf = (v >> 6) & 1;
  fl.sf = (v >> 7) & 1;
  fl.of = (v >> 11) & 1;
  return fl;
}

inline bool condition_holds(Opcode op, const FlagSet& fl) {
  switch (op) {
    case Opcode::je: return fl.zf;
    case Opcode::jne: return !fl.zf;
    case Opcode::jl: return fl.sf != fl.of;
    case Opcode::jle: return fl.zf || fl.sf != fl.of;
    case Opcode::jg: return !fl.zf && fl.sf == fl.of;
    case Opcode::jge: return fl.sf == fl.of;
    default: return false;
  }
}

}  // namespace detail

inline ExecutionResult execute(const Function& f, MachineState s,
                               std::size_t max_steps = kDefaultMaxSteps,
                               std::vector<TraceStep>* trace = nullptr) {
  using namespace detail;
  ExecutionResult res;
  const std::size_t n = f.instructions.size();
  std::vector<std::size_t> call_stack;  // shadow return indices for intra calls
  std::uint64_t summary_ordinal = 0;    // external-call / syscall draw counter
  std::size_t pc = 0;
  std::vector<std::pair<std::uint64_t, std::uint64_t>> step_writes;  // qword log for trace

  auto finish = [&](std::optional<FaultKind> k, std::size_t at) {
    res.fault = k;
    res.fault_index = at;
    res.state = std::move(s);
    return res;
  };

  auto effective_addr = [&](const MemRef& m) {
    std::uint64_t a = static_cast<std::uint64_t>(static_cast<std::int64_t>(m.disp));
    if (m.base) a += s.reg(*m.base);
    if (m.index) a += s.reg(*m.index) * m.scale;
    return a;
  };

  auto write_qword = [&](std::uint64_t addr, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      if (in_ro_zone(addr + static_cast<std::uint64_t>(i))) return false;
    }
    for (int i = 0; i < 8; ++i) {
      const std::uint64_t a = addr + static_cast<std::uint64_t>(i);
      s.memory[a] = static_cast<std::uint8_t>(v >> (8 * i));
      res.write_set.insert(a);
    }
    if (trace) step_writes.emplace_back(addr, v);
    return true;
  };

  auto read_operand = [&](const Operand& o) -> std::uint64_t {
    switch (o.kind) {
      case Operand::Kind::reg: return s.reg(o.reg_);
      case Operand::Kind::imm: return static_cast<std::uint64_t>(o.imm_);
      case Operand::Kind::mem: return s.read_qword(effective_addr(o.mem_));
      case Operand::Kind::label: break;
    }
    return 0;  // labels are never read as values
  };

  // Deterministic clobber value for summarized external effects; identical
  // for both sides of a differential trial at the same call ordinal.
  auto summary_value = [&](const std::string& name, std::uint64_t ordinal, int slot) {
    return mix64(mix64(hash_str(name), s.trial_seed), mix64(ordinal, static_cast<std::uint64_t>(slot)));
  };

  for (;;) {
    if (pc >= n) return finish(FaultKind::unmapped_jump, n);
    if (s.step_count >= max_steps) return finish(FaultKind::step_limit, pc);
    const Instruction& ins = f.instructions[pc];
    ++s.step_count;

    std::array<std::uint64_t, 16> pre_gprs{};
    FlagSet pre_flags;
    if (trace) {
      pre_gprs = s.gprs;
      pre_flags = s.flags;
      step_writes.clear();
    }

    std::size_t next_pc = pc + 1;
    bool halt = false;

    switch (ins.op) {
      case Opcode::mov: {
        const std::uint64_t v = read_operand(ins.operands[1]);
        const Operand& dst = ins.operands[0];
        if (dst.is_reg()) {
          s.set_reg(dst.reg_, v);
        } else if (!write_qword(effective_addr(dst.mem_), v)) {
          return finish(FaultKind::ro_zone_write, pc);
        }
        break;
      }
      case Opcode::lea:
        s.set_reg(ins.operands[0].reg_, effective_addr(ins.operands[1].mem_));
        break;
      case Opcode::add:
      case Opcode::sub:
      case Opcode::xor_:
      case Opcode::and_:
      case Opcode::or_: {
        const Operand& dst = ins.operands[0];
        const std::uint64_t a = read_operand(dst);
        const std::uint64_t b = read_operand(ins.operands[1]);
        std::uint64_t r = 0;
        switch (ins.op) {
          case Opcode::add: r = a + b; add_flags(s.flags, a, b, r); break;
          case Opcode::sub: r = a - b; sub_flags(s.flags, a, b, r); break;
          case Opcode::xor_: r = a ^ b; logic_flags(s.flags, r); break;
          case Opcode::and_: r = a & b; logic_flags(s.flags, r); break;
          default: r = a | b; logic_flags(s.flags, r); break;
        }
        if (dst.is_reg()) {
          s.set_reg(dst.reg_, r);
        } else if (!write_qword(effective_addr(dst.mem_), r)) {
          return finish(FaultKind::ro_zone_write, pc);
        }
        break;
      }
      case Opcode::imul: {
        const std::uint64_t a = s.reg(ins.operands[0].reg_);
        const std::uint64_t b = read_operand(ins.operands[1]);
        const __int128 p = static_cast<__int128>(static_cast<std::int64_t>(a)) *
                           static_cast<__int128>(static_cast<std::int64_t>(b));
        const std::uint64_t r = static_cast<std::uint64_t>(p);
        const bool overflow = p != static_cast<__int128>(static_cast<std::int64_t>(r));
        s.flags.cf = overflow;
        s.flags.of = overflow;
        s.flags.af = false;  // architecturally undefined; pinned for determinism
        common_result_flags(s.flags, r);
        s.set_reg(ins.operands[0].reg_, r);
        break;
      }
      case Opcode::cmp: {
        const std::uint64_t a = read_operand(ins.operands[0]);
        const std::uint64_t b = read_operand(ins.operands[1]);
        sub_flags(s.flags, a, b, a - b);
        break;
      }
      case Opcode::test: {
        const std::uint64_t a = read_operand(ins.operands[0]);
        const std::uint64_t b = read_operand(ins.operands[1]);
        logic_flags(s.flags, a & b);
        break;
      }
      case Opcode::push: {
        const std::uint64_t v = read_operand(ins.operands[0]);
        s.set_reg(Register::rsp, s.reg(Register::rsp) - 8);
        if (!write_qword(s.reg(Register::rsp), v)) return finish(FaultKind::ro_zone_write, pc);
        break;
      }
      case Opcode::pop: {
        const std::uint64_t v = s.read_qword(s.reg(Register::rsp));
        s.set_reg(Register::rsp, s.reg(Register::rsp) + 8);
        s.set_reg(ins.operands[0].reg_, v);  // written last so pop rsp loads v
        break;
      }
      case Opcode::pushfq: {
        s.set_reg(Register::rsp, s.reg(Register::rsp) - 8);
        if (!write_qword(s.reg(Register::rsp), encode_rflags(s.flags))) {
          return finish(FaultKind::ro_zone_write, pc);
        }
        break;
      }
      case Opcode::popfq: {
        s.flags = decode_rflags(s.read_qword(s.reg(Register::rsp)));
        s.set_reg(Register::rsp, s.reg(Register::rsp) + 8);
        break;
      }
      case Opcode::nop:
        break;
      case Opcode::jmp:
        next_pc = f.labels.at(ins.operands[0].label_);
        break;
      case Opcode::je:
      case Opcode::jne:
      case Opcode::jl:
      case Opcode::jle:
      case Opcode::jg:
      case Opcode::jge:
        if (condition_holds(ins.op, s.flags)) next_pc = f.labels.at(ins.operands[0].label_);
        break;
      case Opcode::call: {
        const std::string& callee = ins.operands[0].label_;
        auto it = f.labels.find(callee);
        if (it != f.labels.end()) {
          call_stack.push_back(pc + 1);
          s.set_reg(Register::rsp, s.reg(Register::rsp) - 8);
          if (!write_qword(s.reg(Register::rsp), static_cast<std::uint64_t>(pc + 1))) {
            return finish(FaultKind::ro_zone_write, pc);
          }
          next_pc = it->second;
        } else {
          // External call: fixed caller-saved clobber summary, flags cleared.
          static constexpr Register kClobbered[] = {Register::rax, Register::rcx, Register::rdx,
                                                    Register::rsi, Register::rdi, Register::r8,
                                                    Register::r9,  Register::r10, Register::r11};
          int slot = 0;
          for (Register r : kClobbered) s.set_reg(r, summary_value(callee, summary_ordinal, slot++));
          s.flags = FlagSet{};
          ++summary_ordinal;
        }
        break;
      }
      case Opcode::ret:
        if (call_stack.empty()) {
          halt = true;  // function-level return: halt without touching rsp
        } else {
          next_pc = call_stack.back();
          call_stack.pop_back();
          s.set_reg(Register::rsp, s.reg(Register::rsp) + 8);
        }
        break;
      case Opcode::syscall: {
        int slot = 0;
        for (Register r : {Register::rax, Register::rcx, Register::r11}) {
          s.set_reg(r, summary_value("syscall", summary_ordinal, slot++));
        }
        ++summary_ordinal;
        break;
      }
      case Opcode::int_:
        break;  // modeled as a breakpoint no-op
    }

    if (trace) {
      std::string changes;
      for (int i = 0; i < kRegisterCount; ++i) {
        if (s.gprs[static_cast<std::size_t>(i)] != pre_gprs[static_cast<std::size_t>(i)]) {
          char buf[40];
          std::snprintf(buf, sizeof buf, "=0x%llx ",
                        static_cast<unsigned long long>(s.gprs[static_cast<std::size_t>(i)]));
          changes += std::string(reg_name(static_cast<Register>(i))) + buf;
        }
      }
      for (const auto& [addr, v] : step_writes) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "[0x%llx]=0x%llx ", static_cast<unsigned long long>(addr),
                      static_cast<unsigned long long>(v));
        changes += buf;
      }
      if (!(s.flags == pre_flags)) {
        changes += "flags=";
        const FlagSet& fl = s.flags;
        changes += fl.cf ? 'C' : '-';
        changes += fl.pf ? 'P' : '-';
        changes += fl.af ? 'A' : '-';
        changes += fl.zf ? 'Z' : '-';
        changes += fl.sf ? 'S' : '-';
        changes += fl.of ? 'O' : '-';
      }
      if (!changes.empty() && changes.back() == ' ') changes.pop_back();
      trace->push_back({s.step_count, pc, render_instruction(f.instructions[pc]), changes});
    }

    if (halt) return finish(std::nullopt, pc);
    pc = next_pc;
  }
}

struct Divergence {
  std::uint64_t trial_seed = 0;
  std::string location;  // register name, "[0xADDR]", or "fault:Kind@index in f|g"
  std::uint64_t value_f = 0;
  std::uint64_t value_g = 0;
};

struct EquivalenceVerdict {
  bool equivalent = false;
  int trials = 0;  // trials actually run
  std::optional<Divergence> first_divergence;
};

// Differential functionality check: both functions run from identical seeded
// states per trial; observables are all 16 GPRs plus the union write-set
// restricted to bytes outside the bumper zones and at-or-above the lower of
// the two final stack pointers. Flags are not part of the exit contract.
inline EquivalenceVerdict check_equivalence(const Function& f, const Function& g,
                                            int trials = kDefaultEquivalenceTrials,
                                            std::uint64_t seed = 0,
                                            std::size_t max_steps = kDefaultMaxSteps) {
  EquivalenceVerdict verdict;
  for (int t = 0; t < trials; ++t) {
    verdict.trials = t + 1;
    const std::uint64_t trial_seed = seed ^ static_cast<std::uint64_t>(t);
    const MachineState init = init_machine(trial_seed);
    const ExecutionResult rf = execute(f, init, max_steps);
    const ExecutionResult rg = execute(g, init, max_steps);

    if (!rf.halted() || !rg.halted()) {
      Divergence d;
      d.trial_seed = trial_seed;
      const ExecutionResult& bad = rf.halted() ? rg : rf;
      d.location = std::string("fault:") + fault_name(*bad.fault) + "@" +
                   std::to_string(bad.fault_index) + " in " + (rf.halted() ? "g" : "f");
      verdict.first_divergence = d;
      return verdict;
    }

    for (int i = 0; i < kRegisterCount; ++i) {
      const std::uint64_t vf = rf.state.gprs[static_cast<std::size_t>(i)];
      const std::uint64_t vg = rg.state.gprs[static_cast<std::size_t>(i)];
      if (vf != vg) {
        verdict.first_divergence = {trial_seed, reg_name(static_cast<Register>(i)), vf, vg};
        return verdict;
      }
    }

    const std::uint64_t min_rsp = std::min(rf.state.reg(Register::rsp), rg.state.reg(Register::rsp));
    std::set<std::uint64_t> addrs;
    for (const auto& ws : {rf.write_set, rg.write_set}) {
      for (std::uint64_t a : ws) {
        if (!in_bumper_zone(a) && a >= min_rsp) addrs.insert(a);
      }
    }
    for (std::uint64_t a : addrs) {
      const std::uint8_t bf = rf.state.read_byte(a);
      const std::uint8_t bg = rg.state.read_byte(a);
      if (bf != bg) {
        char loc[32];
        std::snprintf(loc, sizeof loc, "[0x%llx]", static_cast<unsigned long long>(a));
        verdict.first_divergence = {trial_seed, loc, bf, bg};
        return verdict;
      }
    }
  }
  verdict.equivalent = true;
  return verdict;
}

}  // namespace advasm
