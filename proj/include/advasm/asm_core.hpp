#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

// Core assembly model: a small x86-64 subset (16 GPRs, six status flags,
// 26 opcodes, Intel operand order). Instructions are immutable value types;
// everything downstream (CFG analysis, the emulator, the attack) works on
// these. The side-effect summary computed here is the contract the emulator
// is tested against: an instruction may only ever change what its summary
// declares.

namespace advasm {

// ---------------------------------------------------------------------------
// Registers and flags

enum class Register : std::uint8_t {
  rax, rbx, rcx, rdx, rsi, rdi, rbp, rsp,
  r8, r9, r10, r11, r12, r13, r14, r15,
};

inline constexpr int kRegisterCount = 16;

inline const char* reg_name(Register r) {
  static const char* kNames[kRegisterCount] = {
      "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
      "r8",  "r9",  "r10", "r11", "r12", "r13", "r14", "r15"};
  return kNames[static_cast<int>(r)];
}

inline std::optional<Register> reg_from_name(const std::string& s) {
  for (int i = 0; i < kRegisterCount; ++i) {
    if (s == reg_name(static_cast<Register>(i))) return static_cast<Register>(i);
  }
  return std::nullopt;
}

using RegMask = std::uint16_t;

inline constexpr RegMask reg_bit(Register r) {
  return static_cast<RegMask>(1u << static_cast<int>(r));
}

// Status flags. af is the auxiliary (nibble) carry.
enum FlagBit : std::uint8_t {
  kCF = 1 << 0,
  kPF = 1 << 1,
  kAF = 1 << 2,
  kZF = 1 << 3,
  kSF = 1 << 4,
  kOF = 1 << 5,
};

using FlagMask = std::uint8_t;

inline constexpr FlagMask kAllFlags = kCF | kPF | kAF | kZF | kSF | kOF;
// Logic ops (xor/and/or/test) clear cf/of and leave af untouched.
inline constexpr FlagMask kLogicFlags = kCF | kPF | kZF | kSF | kOF;

struct FlagSet {
  bool cf = false, pf = false, af = false, zf = false, sf = false, of = false;

  bool operator==(const FlagSet&) const = default;

  FlagMask mask() const {
    return static_cast<FlagMask>((cf ? kCF : 0) | (pf ? kPF : 0) |
                                 (af ? kAF : 0) | (zf ? kZF : 0) |
                                 (sf ? kSF : 0) | (of ? kOF : 0));
  }
};

inline const char* flag_name(FlagBit b) {
  switch (b) {
    case kCF: return "cf";
    case kPF: return "pf";
    case kAF: return "af";
    case kZF: return "zf";
    case kSF: return "sf";
    case kOF: return "of";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Opcodes

enum class Opcode : std::uint8_t {
  mov, lea, add, sub, xor_, and_, or_, imul, cmp, test,
  push, pop, pushfq, popfq, nop,
  jmp, je, jne, jl, jle, jg, jge,
  call, ret, syscall, int_,
};

inline constexpr int kOpcodeCount = 26;

inline const char* opcode_name(Opcode op) {
  static const char* kNames[kOpcodeCount] = {
      "mov", "lea", "add", "sub", "xor", "and", "or", "imul", "cmp", "test",
      "push", "pop", "pushfq", "popfq", "nop",
      "jmp", "je", "jne", "jl", "jle", "jg", "jge",
      "call", "ret", "syscall", "int"};
  return kNames[static_cast<int>(op)];
}

inline std::optional<Opcode> opcode_from_name(const std::string& s) {
  for (int i = 0; i < kOpcodeCount; ++i) {
    if (s == opcode_name(static_cast<Opcode>(i))) return static_cast<Opcode>(i);
  }
  return std::nullopt;
}

inline bool is_conditional_jump(Opcode op) {
  switch (op) {
    case Opcode::je: case Opcode::jne: case Opcode::jl:
    case Opcode::jle: case Opcode::jg: case Opcode::jge:
      return true;
    default:
      return false;
  }
}

// Transfers control: jumps, call, ret.
inline bool is_control_transfer(Opcode op) {
  return op == Opcode::jmp || is_conditional_jump(op) || op == Opcode::call ||
         op == Opcode::ret;
}

// May raise: never inserted, never a vulnerable position.
inline bool is_exception(Opcode op) {
  return op == Opcode::syscall || op == Opcode::int_;
}

inline int opcode_arity(Opcode op) {
  switch (op) {
    case Opcode::mov: case Opcode::lea: case Opcode::add: case Opcode::sub:
    case Opcode::xor_: case Opcode::and_: case Opcode::or_: case Opcode::imul:
    case Opcode::cmp: case Opcode::test:
      return 2;
    case Opcode::push: case Opcode::pop: case Opcode::int_:
    case Opcode::jmp: case Opcode::je: case Opcode::jne: case Opcode::jl:
    case Opcode::jle: case Opcode::jg: case Opcode::jge: case Opcode::call:
      return 1;
    default:
      return 0;
  }
}

// ---------------------------------------------------------------------------
// Operands

// [base + index*scale + disp]; at least one of base/index present,
// scale in {1,2,4,8}, disp a signed 32-bit offset.
struct MemRef {
  std::optional<Register> base;
  std::optional<Register> index;
  std::uint8_t scale = 1;
  std::int32_t disp = 0;

  bool operator==(const MemRef&) const = default;

  bool uses(Register r) const { return base == r || index == r; }
};

struct Operand {
  enum class Kind : std::uint8_t { reg, imm, mem, label };

  Kind kind = Kind::imm;
  Register reg_ = Register::rax;
  std::int64_t imm_ = 0;
  MemRef mem_;
  std::string label_;

  static Operand reg(Register r) {
    Operand o;
    o.kind = Kind::reg;
    o.reg_ = r;
    return o;
  }
  static Operand imm(std::int64_t v) {
    Operand o;
    o.kind = Kind::imm;
    o.imm_ = v;
    return o;
  }
  static Operand mem(MemRef m) {
    Operand o;
    o.kind = Kind::mem;
    o.mem_ = m;
    return o;
  }
  static Operand label(std::string name) {
    Operand o;
    o.kind = Kind::label;
    o.label_ = std::move(name);
    return o;
  }

  bool is_reg() const { return kind == Kind::reg; }
  bool is_imm() const { return kind == Kind::imm; }
  bool is_mem() const { return kind == Kind::mem; }
  bool is_label() const { return kind == Kind::label; }

  bool operator==(const Operand& o) const {
    if (kind != o.kind) return false;
    switch (kind) {
      case Kind::reg: return reg_ == o.reg_;
      case Kind::imm: return imm_ == o.imm_;
      case Kind::mem: return mem_ == o.mem_;
      case Kind::label: return label_ == o.label_;
    }
    return false;
  }
};

// ---------------------------------------------------------------------------
// Instructions

// Where an instruction came from. Metadata only: it is not rendered and does
// not participate in structural equality.
enum class Origin : std::uint8_t { source, adversarial, fix };

// Checks operand count and kinds for an opcode. Returns false and fills
// `why` on rejection.
inline bool valid_instruction_form(Opcode op, const std::vector<Operand>& ops,
                                   std::string* why = nullptr) {
  auto fail = [&](const std::string& reason) {
    if (why) *why = reason;
    return false;
  };
  const int arity = opcode_arity(op);
  if (static_cast<int>(ops.size()) != arity) {
    return fail(std::string(opcode_name(op)) + " takes " +
                std::to_string(arity) + " operand(s)");
  }
  int mem_count = 0;
  for (const Operand& o : ops) {
    if (o.is_mem()) {
      ++mem_count;
      if (!o.mem_.base && !o.mem_.index) return fail("memory operand without base or index");
      if (o.mem_.scale != 1 && o.mem_.scale != 2 && o.mem_.scale != 4 &&
          o.mem_.scale != 8) {
        return fail("scale must be 1, 2, 4 or 8");
      }
    }
  }
  if (mem_count > 1) return fail("at most one memory operand");

  switch (op) {
    case Opcode::mov: case Opcode::add: case Opcode::sub: case Opcode::xor_:
    case Opcode::and_: case Opcode::or_:
      if (!ops[0].is_reg() && !ops[0].is_mem()) return fail("destination must be a register or memory");
      if (ops[1].is_label()) return fail("label operand only valid in control transfers");
      break;
    case Opcode::lea:
      if (!ops[0].is_reg()) return fail("lea destination must be a register");
      if (!ops[1].is_mem()) return fail("lea source must be a memory operand");
      break;
    case Opcode::imul:
      if (!ops[0].is_reg()) return fail("imul destination must be a register");
      if (ops[1].is_label()) return fail("label operand only valid in control transfers");
      break;
    case Opcode::cmp: case Opcode::test:
      if (!ops[0].is_reg() && !ops[0].is_mem()) return fail("first operand must be a register or memory");
      if (ops[1].is_label()) return fail("label operand only valid in control transfers");
      break;
    case Opcode::push:
      if (ops[0].is_label()) return fail("label operand only valid in control transfers");
      break;
    case Opcode::pop:
      if (!ops[0].is_reg()) return fail("pop operand must be a register");
      break;
    case Opcode::int_:
      if (!ops[0].is_imm()) return fail("int operand must be an immediate");
      break;
    case Opcode::jmp: case Opcode::je: case Opcode::jne: case Opcode::jl:
    case Opcode::jle: case Opcode::jg: case Opcode::jge: case Opcode::call:
      if (!ops[0].is_label()) return fail("jump target must be a label");
      break;
    default:
      break;  // zero-operand opcodes
  }
  return true;
}

struct Instruction {
  Opcode op = Opcode::nop;
  std::vector<Operand> operands;
  Origin origin = Origin::source;

  Instruction() = default;

  Instruction(Opcode o, std::vector<Operand> ops, Origin org = Origin::source)
      : op(o), operands(std::move(ops)), origin(org) {
    std::string why;
    if (!valid_instruction_form(op, operands, &why)) {
      throw std::invalid_argument("invalid instruction: " + why);
    }
  }

  // Structural equality; origin is metadata and intentionally excluded.
  bool operator==(const Instruction& o) const {
    return op == o.op && operands == o.operands;
  }

  const Operand* memory_operand() const {
    for (const Operand& o : operands) {
      if (o.is_mem()) return &o;
    }
    return nullptr;
  }
};

// Convenience builders used throughout tests and the corrector.
inline Instruction ins0(Opcode op, Origin org = Origin::source) {
  return Instruction(op, {}, org);
}
inline Instruction ins1(Opcode op, Operand a, Origin org = Origin::source) {
  return Instruction(op, {std::move(a)}, org);
}
inline Instruction ins2(Opcode op, Operand a, Operand b,
                        Origin org = Origin::source) {
  return Instruction(op, {std::move(a), std::move(b)}, org);
}

// ---------------------------------------------------------------------------
// Functions

// A named instruction list plus label bindings. Labels bind to instruction
// indices; several labels may share an index.
struct Function {
  std::string name;
  std::vector<Instruction> instructions;
  std::map<std::string, std::size_t> labels;

  std::size_t size() const { return instructions.size(); }

  bool operator==(const Function& o) const {
    return name == o.name && instructions == o.instructions && labels == o.labels;
  }
};

inline void validate_function(const Function& f) {
  if (f.instructions.empty()) {
    throw std::invalid_argument("function '" + f.name + "' has no instructions");
  }
  for (const auto& [label, idx] : f.labels) {
    if (idx >= f.instructions.size()) {
      throw std::invalid_argument("label '" + label + "' binds past the end of '" +
                                  f.name + "'");
    }
  }
  for (const Instruction& ins : f.instructions) {
    if (ins.op == Opcode::call) continue;  // unresolved callees are external calls
    for (const Operand& o : ins.operands) {
      if (o.is_label() && !f.labels.count(o.label_)) {
        throw std::invalid_argument("unresolved label '" + o.label_ + "' in '" +
                                    f.name + "'");
      }
    }
  }
}

// Returns a copy of f with `seq` spliced in immediately after instruction
// `index`. Label bindings past the insertion point shift right, so jump
// targets keep naming the instruction they named before.
inline Function splice_after(const Function& f, std::size_t index,
                             const std::vector<Instruction>& seq) {
  if (index >= f.instructions.size()) {
    throw std::out_of_range("splice_after: index out of range");
  }
  Function out;
  out.name = f.name;
  out.instructions.reserve(f.instructions.size() + seq.size());
  out.instructions.assign(f.instructions.begin(),
                          f.instructions.begin() + static_cast<std::ptrdiff_t>(index) + 1);
  out.instructions.insert(out.instructions.end(), seq.begin(), seq.end());
  out.instructions.insert(out.instructions.end(),
                          f.instructions.begin() + static_cast<std::ptrdiff_t>(index) + 1,
                          f.instructions.end());
  for (const auto& [label, idx] : f.labels) {
    out.labels[label] = idx > index ? idx + seq.size() : idx;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Side-effect summaries

struct SideEffectSet {
  RegMask regs_written = 0;
  FlagMask flags_written = 0;
  // Flags written with architecturally unspecified values (imul); the
  // emulator assigns them deterministically but equality checks must not
  // rely on them.
  FlagMask flags_undefined = 0;
  std::optional<MemRef> mem_read;
  std::optional<MemRef> mem_written;
  // True when the access is the implicit stack access of
  // push/pop/pushfq/popfq/call/ret rather than an explicit operand.
  bool mem_read_implicit = false;
  bool mem_written_implicit = false;
  bool may_fault = false;

  bool writes(Register r) const { return regs_written & reg_bit(r); }
  bool writes_flags() const { return flags_written != 0; }
  const std::optional<MemRef>& explicit_read() const {
    static const std::optional<MemRef> kNone;
    return mem_read_implicit ? kNone : mem_read;
  }
  const std::optional<MemRef>& explicit_write() const {
    static const std::optional<MemRef> kNone;
    return mem_written_implicit ? kNone : mem_written;
  }
};

inline MemRef stack_slot(std::int32_t disp) {
  MemRef m;
  m.base = Register::rsp;
  m.disp = disp;
  return m;
}

// Summarizes what `ins` may change: registers, flags, memory. The emulator's
// behaviour is property-tested to stay within this summary.
inline SideEffectSet instruction_side_effects(const Instruction& ins) {
  SideEffectSet s;
  auto write_reg = [&](Register r) { s.regs_written |= reg_bit(r); };
  auto read_operand_mem = [&](const Operand& o) {
    if (o.is_mem()) s.mem_read = o.mem_;
  };

  const auto& ops = ins.operands;
  switch (ins.op) {
    case Opcode::mov:
      if (ops[0].is_reg()) write_reg(ops[0].reg_);
      else s.mem_written = ops[0].mem_;
      read_operand_mem(ops[1]);
      break;
    case Opcode::lea:
      // Address computation only: no memory access despite the operand.
      write_reg(ops[0].reg_);
      break;
    case Opcode::add:
    case Opcode::sub:
      s.flags_written = kAllFlags;
      if (ops[0].is_reg()) write_reg(ops[0].reg_);
      else { s.mem_read = ops[0].mem_; s.mem_written = ops[0].mem_; }
      read_operand_mem(ops[1]);
      break;
    case Opcode::xor_:
    case Opcode::and_:
    case Opcode::or_:
      s.flags_written = kLogicFlags;
      if (ops[0].is_reg()) write_reg(ops[0].reg_);
      else { s.mem_read = ops[0].mem_; s.mem_written = ops[0].mem_; }
      read_operand_mem(ops[1]);
      break;
    case Opcode::imul:
      s.flags_written = kAllFlags;
      s.flags_undefined = kPF | kAF | kZF | kSF;
      write_reg(ops[0].reg_);
      read_operand_mem(ops[1]);
      break;
    case Opcode::cmp:
      s.flags_written = kAllFlags;
      read_operand_mem(ops[0]);
      read_operand_mem(ops[1]);
      break;
    case Opcode::test:
      s.flags_written = kLogicFlags;
      read_operand_mem(ops[0]);
      read_operand_mem(ops[1]);
      break;
    case Opcode::push:
      write_reg(Register::rsp);
      read_operand_mem(ops[0]);
      s.mem_written = stack_slot(-8);
      s.mem_written_implicit = true;
      break;
    case Opcode::pop:
      write_reg(ops[0].reg_);
      write_reg(Register::rsp);
      s.mem_read = stack_slot(0);
      s.mem_read_implicit = true;
      break;
    case Opcode::pushfq:
      write_reg(Register::rsp);
      s.mem_written = stack_slot(-8);
      s.mem_written_implicit = true;
      break;
    case Opcode::popfq:
      write_reg(Register::rsp);
      s.flags_written = kAllFlags;
      s.mem_read = stack_slot(0);
      s.mem_read_implicit = true;
      break;
    case Opcode::call:
      // Intra-function: pushes a return marker. External: summarized clobber
      // of the caller-saved registers. Declare the union.
      write_reg(Register::rsp);
      write_reg(Register::rax);
      write_reg(Register::rcx);
      write_reg(Register::rdx);
      write_reg(Register::rsi);
      write_reg(Register::rdi);
      write_reg(Register::r8);
      write_reg(Register::r9);
      write_reg(Register::r10);
      write_reg(Register::r11);
      s.mem_written = stack_slot(-8);
      s.mem_written_implicit = true;
      break;
    case Opcode::ret:
      write_reg(Register::rsp);
      s.mem_read = stack_slot(0);
      s.mem_read_implicit = true;
      break;
    case Opcode::syscall:
      write_reg(Register::rax);
      write_reg(Register::rcx);
      write_reg(Register::r11);
      break;
    case Opcode::nop:
    case Opcode::jmp: case Opcode::je: case Opcode::jne: case Opcode::jl:
    case Opcode::jle: case Opcode::jg: case Opcode::jge:
    case Opcode::int_:
      break;
  }
  s.may_fault = s.mem_read.has_value() || s.mem_written.has_value();
  return s;
}

}  // namespace advasm
