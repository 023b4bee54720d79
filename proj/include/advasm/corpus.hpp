#pragma once

// Deterministic synthetic function corpus, standing in for a compiled binary
// benchmark at desk scale. Functions come in clusters that share one block
// skeleton and one concrete body; within a cluster, member r differs from
// its mates in exactly one graded way, mirroring alignment padding
// differences across builds of the same program:
//
//   * a contiguous run of (5 + r) `nop`s at a fixed early slot of the entry
//     block. Run lengths are unique within a cluster, so every embedding
//     model separates cluster mates; the run sits inside the 32-opcode
//     window any sampled walk from the entry reaches; and one rank step is
//     one inserted instruction -- the exact displacement the insertion loop
//     produces;
//   * a compensating tail of (size - 1 - r) alternating pushfq/popfq
//     instructions in a late bypassable block, so cluster mates all have the
//     same length and an off-axis insertion cannot climb the ranking by
//     norm inflation alone. The tail is flag save/restore chatter because
//     those opcodes never appear in an entry block, so no mined candidate
//     can move a function along the tail's own axes;
//   * light per-member resampling of body operands (never opcodes) at slots
//     beyond walk reach -- register-allocation-style churn that leaves every
//     opcode count identical across cluster mates.
//
// Candidate hygiene is the load-bearing design rule. The attack harvests
// insertion candidates from entry blocks of a function's least-similar pool
// mates and keeps whatever shifts the ranking when probed with repeated
// copies. The corpus is shaped so the only opcode that can pass that test
// is the `nop` the padding ladder is built from:
//
//   * every cluster owns a private body opcode no other cluster uses, and
//     entry blocks are composed of private ops and nops only. A harvested
//     candidate is therefore either `nop` or an opcode the probed function
//     has zero count of -- and a zero-count probe has zero inner-product
//     gain against the victim's own cluster, so no amount of it can reorder
//     in-cluster ranks, whatever the norm drift along the padding ladder;
//   * the rest of the body is backbone (mov) plus two universal helpers
//     (lea, cmp) that soak up enough weight mass to keep the private below
//     half the body. None of them ever appears in an entry block, so none
//     is ever harvested;
//   * bodies fill exact per-opcode quotas (largest-remainder rounding of
//     the cluster weights), arranged with no opcode adjacent to itself, and
//     skeleton lengths come in three fixed tiers. Same-tier clusters agree
//     exactly on every shared axis, cross-tier count gaps stay well below
//     the private-axis separation, and -- with no same-opcode adjacency
//     anywhere -- the self-pair and self-gram axes a repeated-copy probe
//     excites are empty across the whole pool, under every model.
//
// The layout discipline concentrates insertions where they are measurable:
// the entry block holds five body slots plus the padding run, every middle
// block is bypassable (its predecessor jumps over it), and the exit block
// is a bare `ret` -- so the obligatory insertable positions are exactly the
// entry block. The graded run structure is what makes ranking attacks on
// the pool meaningful: every non-apex member has in-pool neighbours
// displaced along a direction instruction insertion can actually produce.
// Apex members (the longest few runs in their cluster) have no such
// neighbours and resist attack, which keeps success rates below 100% for
// honest reporting.
//
// Generated code obeys one hard discipline: rsp is never an instruction
// destination and never dereferenced outside [rsp + disp]. Together with
// forward-only jumps this makes every generated function fault-free and
// halting under the emulator -- an unbalanced stack is harmless, since a
// frame-depth-zero `ret` halts without reading it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "advasm/asm_core.hpp"
#include "advasm/asm_text.hpp"
#include "advasm/cfg.hpp"
#include "advasm/emulate.hpp"
#include "advasm/oracle.hpp"
#include "advasm/rng.hpp"

namespace advasm {

struct GenerationRetryExceeded : std::runtime_error {
  explicit GenerationRetryExceeded(const std::string& what) : std::runtime_error(what) {}
};

struct CorpusSpec {
  std::size_t count = 200;
  std::size_t min_length = 40;   // instructions per function, inclusive
  std::size_t max_length = 120;
  std::size_t min_blocks = 2;    // basic blocks per function
  std::size_t max_blocks = 6;
  std::map<Opcode, double> opcode_weights;  // empty = default body mix
  std::uint64_t seed = 42;
};

// Body-instruction mix used when the spec does not override it. Control
// transfers are structural (block terminators), never weighted body slots.
// The backbone (mov) and helpers (lea, cmp) carry half the mass so that no
// single remaining opcode can exceed half of any cluster's body.
inline const std::map<Opcode, double>& default_opcode_weights() {
  static const std::map<Opcode, double> w = {
      {Opcode::mov, 0.24},  {Opcode::lea, 0.12},  {Opcode::cmp, 0.11},
      {Opcode::nop, 0.04},  {Opcode::add, 0.08},  {Opcode::sub, 0.07},
      {Opcode::xor_, 0.06}, {Opcode::and_, 0.05}, {Opcode::or_, 0.05},
      {Opcode::imul, 0.06}, {Opcode::test, 0.05}, {Opcode::push, 0.04},
      {Opcode::pop, 0.03},
  };
  return w;
}

inline void validate_corpus_spec(const CorpusSpec& spec) {
  if (spec.count < 1) throw std::invalid_argument("count must be at least 1");
  if (spec.min_length < 3) throw std::invalid_argument("min_length must be at least 3");
  if (spec.max_length < spec.min_length) {
    throw std::invalid_argument("max_length must be at least min_length");
  }
  if (spec.min_blocks < 1) throw std::invalid_argument("min_blocks must be at least 1");
  if (spec.max_blocks < spec.min_blocks) {
    throw std::invalid_argument("max_blocks must be at least min_blocks");
  }
  for (const auto& [op, weight] : spec.opcode_weights) {
    if (weight <= 0.0) throw std::invalid_argument("opcode weights must be positive");
    if (is_control_transfer(op) || is_exception(op)) {
      throw std::invalid_argument(std::string("weighted opcode may not transfer control: ") +
                                  opcode_name(op));
    }
  }
}

namespace corpus_detail {

// Cluster size is capped so the longest padding run still ends inside a
// 32-opcode walk window with body tokens to spare: entry prefix (3) plus
// kPadBase + rank <= 31 for every rank keeps walk windows of cluster mates
// pairwise distinct.
inline constexpr std::size_t kClusterTarget = 24;  // nominal members per cluster
inline constexpr std::size_t kEntryBody = 5;       // entry body slots (before padding)
inline constexpr std::size_t kPadAnchor = 2;       // padding run goes after this entry slot
inline constexpr std::size_t kPadBase = 5;         // run length at rank 0; +1 per rank
inline constexpr std::size_t kWindowReach = 34;    // slots below this stay member-invariant
inline constexpr std::size_t kLengthReserve = 38;  // skeleton headroom for pad + tail
// Skeleton lengths are quantized to a few fixed tiers instead of drawn
// uniformly. Clusters on the same tier get identical body budgets, hence --
// with exact opcode quotas -- identical counts on every shared axis.
inline constexpr std::size_t kLengthTiers = 3;
inline constexpr double kJitterShare = 0.10;    // late body slots resampled per member
inline constexpr double kCondProb = 0.7;        // conditional terminators in 2-block layouts
inline constexpr int kDedupRounds = 50;
inline constexpr int kMemberAttempts = 8;

// Opcodes every cluster keeps. The backbone and helpers never appear in
// entry blocks, so they are never harvested as candidates; they exist to
// carry shared body mass and keep each cluster's private opcode arrangeable.
inline bool is_shared_body_op(Opcode op) {
  return op == Opcode::mov || op == Opcode::nop || op == Opcode::lea || op == Opcode::cmp;
}

struct Weights {
  std::vector<std::pair<Opcode, double>> entries;
  double total = 0.0;
};

inline Weights weight_table(const std::map<Opcode, double>& w) {
  Weights out;
  for (const auto& [op, weight] : w) {
    out.entries.emplace_back(op, weight);
    out.total += weight;
  }
  return out;
}

inline Opcode draw_opcode(SplitMix64& rng, const Weights& w) {
  double x = rng.unit() * w.total;
  for (const auto& [op, weight] : w.entries) {
    x -= weight;
    if (x < 0.0) return op;
  }
  return w.entries.back().first;
}

// Exact per-opcode quota for `count` slots: floor of each proportional
// share, remainders distributed largest-fraction-first. Deterministic, so
// every cluster on the same slot budget has identical shared-axis counts.
inline std::map<Opcode, std::size_t> exact_quota(const Weights& w, std::size_t count) {
  std::map<Opcode, std::size_t> quota;
  std::vector<std::pair<double, Opcode>> frac;
  std::size_t assigned = 0;
  for (const auto& [op, weight] : w.entries) {
    const double exact = weight / w.total * static_cast<double>(count);
    const auto share = std::min(count, static_cast<std::size_t>(exact));
    quota[op] = share;
    assigned += share;
    frac.emplace_back(exact - static_cast<double>(share), op);
  }
  std::stable_sort(frac.begin(), frac.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < count; i = (i + 1) % frac.size(), ++assigned) {
    quota[frac[i].second] += 1;
  }
  return quota;
}

// Shuffle, then repair adjacent repeats by swapping with a compatible slot.
// Succeeds whenever no opcode exceeds half the sequence; narrower mixes keep
// their repeats (such specs have no cluster geometry left to protect).
inline void no_repeat_arrange(std::vector<Opcode>& seq, SplitMix64& rng) {
  for (std::size_t i = seq.size(); i-- > 1;) {
    std::swap(seq[i], seq[rng.bounded(i + 1)]);
  }
  for (int pass = 0; pass < 400; ++pass) {
    std::size_t bad = seq.size();
    for (std::size_t i = 1; i < seq.size(); ++i) {
      if (seq[i] == seq[i - 1]) {
        bad = i;
        break;
      }
    }
    if (bad == seq.size()) return;
    bool fixed = false;
    for (std::size_t step = 1; step < seq.size() && !fixed; ++step) {
      const std::size_t j = (bad + step) % seq.size();
      if (seq[j] == seq[bad]) continue;
      const bool bad_ok =
          seq[j] != seq[bad - 1] &&
          (bad + 1 >= seq.size() || j == bad + 1 || seq[j] != seq[bad + 1]);
      const bool j_ok = (j == 0 || j - 1 == bad || seq[j - 1] != seq[bad]) &&
                        (j + 1 >= seq.size() || j + 1 == bad || seq[j + 1] != seq[bad]);
      if (bad_ok && j_ok) {
        std::swap(seq[bad], seq[j]);
        fixed = true;
      }
    }
    if (!fixed) return;  // unrepairable mix: keep the repeat
  }
}

// Any GPR except rsp: the generator never writes the stack pointer outside
// push/pop, so generated code cannot relocate the stack or fault.
inline Register body_reg(SplitMix64& rng) {
  for (;;) {
    const auto r = static_cast<Register>(rng.bounded(kRegisterCount));
    if (r != Register::rsp) return r;
  }
}

inline Operand stack_slot(SplitMix64& rng) {
  MemRef m;
  m.base = Register::rsp;
  m.disp = static_cast<std::int32_t>(8 * rng.bounded(12));
  return Operand::mem(m);
}

// One weighted body instruction. Memory traffic is rsp-relative only.
inline Instruction body_instruction(Opcode op, SplitMix64& rng) {
  const Operand dst = Operand::reg(body_reg(rng));
  switch (op) {
    case Opcode::mov:
      switch (rng.bounded(4)) {
        case 0: return ins2(op, dst, Operand::imm(rng.range(0, 999)));
        case 1: return ins2(op, dst, Operand::reg(body_reg(rng)));
        case 2: return ins2(op, dst, stack_slot(rng));
        default: return ins2(op, stack_slot(rng), Operand::reg(body_reg(rng)));
      }
    case Opcode::lea: {
      MemRef m;
      m.base = body_reg(rng);
      if (rng.bounded(2) == 0) {
        m.index = body_reg(rng);
        m.scale = static_cast<std::uint8_t>(1u << rng.bounded(4));
      }
      m.disp = static_cast<std::int32_t>(rng.range(-64, 64));
      return ins2(op, dst, Operand::mem(m));
    }
    case Opcode::imul:
      return rng.bounded(2) == 0 ? ins2(op, dst, Operand::reg(body_reg(rng)))
                                 : ins2(op, dst, Operand::imm(rng.range(2, 9)));
    case Opcode::cmp:
    case Opcode::test:
      return rng.bounded(2) == 0 ? ins2(op, dst, Operand::reg(body_reg(rng)))
                                 : ins2(op, dst, Operand::imm(rng.range(-64, 64)));
    case Opcode::push:
    case Opcode::pop:
      return ins1(op, dst);
    case Opcode::pushfq:
    case Opcode::popfq:
    case Opcode::nop:
      return ins0(op);
    case Opcode::add:
    case Opcode::sub:
    case Opcode::xor_:
    case Opcode::and_:
    case Opcode::or_:
      switch (rng.bounded(3)) {
        case 0: return ins2(op, dst, Operand::reg(body_reg(rng)));
        case 1: return ins2(op, dst, Operand::imm(rng.range(-256, 256)));
        default: return ins2(op, dst, stack_slot(rng));
      }
    default:
      return ins0(Opcode::nop);
  }
}

struct BlockShape {
  std::size_t body = 0;        // non-terminator slots
  bool cond = false;           // ends in a conditional jump (else falls through)
  Opcode jump = Opcode::je;
  std::size_t target = 0;      // jump target block, always forward
};

struct SkeletonShape {
  std::size_t length = 0;      // total instructions including terminators and ret
  std::vector<BlockShape> blocks;
};

// Layout discipline: a five-slot entry, bypassable middle blocks carrying the
// body mass (each predecessor's conditional jump skips over its successor),
// and a bare-ret exit. Obligatory blocks are then entry + exit, and the exit
// has no insertable slot, so probes and insertions land in the entry -- where
// the padding run lives and where every sampled walk starts.
inline SkeletonShape make_shape(SplitMix64& rng, const CorpusSpec& spec, std::size_t s) {
  static const std::array<Opcode, 6> kCondOps = {Opcode::je,  Opcode::jne, Opcode::jl,
                                                 Opcode::jle, Opcode::jg,  Opcode::jge};
  SkeletonShape shape;
  shape.length = s;

  // Feasibility: entry body + two slots per middle block + terminators + ret.
  std::size_t hi = std::min(spec.max_blocks,
                            std::max<std::size_t>(1, (s - kEntryBody + 2) / 3));
  std::size_t lo = std::min(std::max<std::size_t>(spec.min_blocks, 4), hi);
  const std::size_t blocks = lo + rng.bounded(hi - lo + 1);
  shape.blocks.resize(blocks);

  std::size_t conds = 0;
  for (std::size_t i = 0; i + 1 < blocks; ++i) {
    const bool cond = blocks >= 3 || rng.unit() < kCondProb;
    if (cond) {
      shape.blocks[i].cond = true;
      shape.blocks[i].jump = kCondOps[rng.bounded(kCondOps.size())];
      shape.blocks[i].target = std::min(i + 2, blocks - 1);
      ++conds;
    }
  }

  const std::size_t body_total = shape.length - 1 - conds;
  if (blocks == 1) {
    shape.blocks[0].body = body_total;
    return shape;
  }
  shape.blocks[blocks - 1].body = 0;  // bare-ret exit
  const std::size_t mids = blocks - 2;
  const std::size_t entry =
      std::min<std::size_t>(kEntryBody, body_total > 2 * mids ? body_total - 2 * mids : 1);
  shape.blocks[0].body = entry;
  for (std::size_t i = 0; i < mids; ++i) shape.blocks[1 + i].body = 2;
  std::size_t left = body_total - entry - 2 * mids;
  if (mids > 0) {
    for (std::size_t i = 0; left > 0; i = (i + 1) % mids, --left) {
      shape.blocks[1 + i].body += 1;  // spill into bypassable middle blocks
    }
  } else {
    shape.blocks[0].body += left;
  }
  return shape;
}

// Padding-run length of the cluster member at a given rank. Totals are
// unique within a cluster, so embeddings never tie, and one rank step is one
// inserted instruction -- the exact displacement the insertion loop produces.
inline std::size_t pad_length(std::size_t rank) { return kPadBase + rank; }

struct ClusterPlan {
  Weights weights;                               // backbone + helpers + private op
  Opcode priv = Opcode::mov;                     // this cluster's exclusive opcode
  SkeletonShape shape;                           // shared skeleton
  std::vector<std::vector<Instruction>> bodies;  // shared concrete body
  std::vector<Instruction> filler;               // length-equalizing tail, shared prefix
  std::size_t index = 0;                         // cluster id
  std::size_t size = 0;                          // members in this cluster
};

// Empty string = valid; otherwise the reason the member must be rebuilt.
inline std::string member_defect(const Function& fn, const CorpusSpec& spec) {
  if (fn.size() < spec.min_length || fn.size() > spec.max_length) return "length out of range";
  if (!(parse_function(render_function(fn)) == fn)) return "render round-trip mismatch";
  try {
    const ControlFlowGraph cfg = build_cfg(fn);
    vulnerable_candidates(fn, cfg);
  } catch (const CfgError& e) {
    return std::string("cfg: ") + e.what();
  }
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    if (!execute(fn, init_machine(seed)).halted()) return "does not halt";
  }
  return {};
}

inline Function build_member(const std::string& id, const ClusterPlan& plan, std::size_t rank,
                             const CorpusSpec& spec, SplitMix64 rng) {
  const SkeletonShape& shape = plan.shape;
  const std::size_t blocks = shape.blocks.size();
  std::size_t room = spec.max_length - shape.length;

  const std::size_t entry_body = shape.blocks[0].body;
  const std::size_t anchor = std::min(kPadAnchor, entry_body - 1);
  const std::size_t pad = std::min(pad_length(rank), room);
  room -= pad;
  const std::size_t tail = plan.size - 1 - rank;  // equalizes member length
  const std::size_t filler = std::min(std::min(tail, plan.filler.size()), room);

  // The tail host is the last bypassable middle block; layouts without one
  // fall back to the entry.
  const std::size_t tail_block = blocks >= 3 ? blocks - 2 : 0;

  Function fn;
  fn.name = id;
  std::vector<std::size_t> late_base;  // body slots past every walk window
  for (std::size_t b = 0; b < blocks; ++b) {
    if (b > 0) fn.labels["L" + std::to_string(b)] = fn.instructions.size();
    for (std::size_t s = 0; s < shape.blocks[b].body; ++s) {
      if (fn.instructions.size() >= kWindowReach) late_base.push_back(fn.instructions.size());
      fn.instructions.push_back(plan.bodies[b][s]);
      if (b == 0 && s == anchor) {
        fn.instructions.insert(fn.instructions.end(), pad, ins0(Opcode::nop));
      }
    }
    if (b == tail_block) {
      for (std::size_t i = 0; i < filler; ++i) {
        if (fn.instructions.size() >= kWindowReach) late_base.push_back(fn.instructions.size());
        fn.instructions.push_back(plan.filler[i]);
      }
    }
    if (shape.blocks[b].cond) {
      fn.instructions.push_back(
          ins1(shape.blocks[b].jump, Operand::label("L" + std::to_string(shape.blocks[b].target))));
    }
  }
  fn.instructions.push_back(ins0(Opcode::ret));

  // Per-member jitter: redraw operands under the same opcode, at slots no
  // walk window reaches, so opcode counts stay flat across cluster mates.
  const auto jitters =
      static_cast<std::size_t>(kJitterShare * static_cast<double>(late_base.size()) + 0.5);
  for (std::size_t t = 0; t < jitters && !late_base.empty(); ++t) {
    const std::size_t at = late_base[rng.bounded(late_base.size())];
    fn.instructions[at] = body_instruction(fn.instructions[at].op, rng);
  }

  for (Instruction& ins : fn.instructions) ins.origin = Origin::source;
  return fn;
}

inline std::string direction_signature(const std::vector<double>& v) {
  double n2 = 0.0;
  for (double x : v) n2 += x * x;
  const double inv = 1.0 / std::sqrt(n2);
  std::string out;
  char buf[32];
  for (double x : v) {
    std::snprintf(buf, sizeof buf, "%.9e,", x * inv);
    out += buf;
  }
  return out;
}

// Separation nudge: resample one non-nop body slot, preferring slots beyond
// walk reach so cluster geometry survives the mutation.
inline void mutate_member(Function& fn, const Weights& weights, SplitMix64 rng) {
  const auto fair_game = [](Opcode op) {
    return !is_control_transfer(op) && !is_exception(op) && op != Opcode::nop &&
           op != Opcode::pushfq && op != Opcode::popfq;  // tail stays untouched
  };
  std::vector<std::size_t> eligible;
  for (std::size_t i = kWindowReach; i < fn.size(); ++i) {
    if (fair_game(fn.instructions[i].op)) eligible.push_back(i);
  }
  if (eligible.empty()) {
    for (std::size_t i = 1; i < fn.size(); ++i) {
      if (fair_game(fn.instructions[i].op)) eligible.push_back(i);
    }
  }
  for (int tries = 0; tries < 100 && !eligible.empty(); ++tries) {
    const std::size_t at = eligible[rng.bounded(eligible.size())];
    const Opcode op = draw_opcode(rng, weights);
    if (op == Opcode::nop || op == fn.instructions[at].op) continue;
    fn.instructions[at] = body_instruction(op, rng);
    return;
  }
  throw GenerationRetryExceeded("cannot perturb function " + fn.name +
                                ": opcode mix too narrow to separate embeddings");
}

}  // namespace corpus_detail

inline FunctionPool generate_corpus(const CorpusSpec& spec) {
  using namespace corpus_detail;
  validate_corpus_spec(spec);

  const Weights base =
      weight_table(spec.opcode_weights.empty() ? default_opcode_weights() : spec.opcode_weights);
  std::vector<Opcode> menu;  // private-opcode pool: everything non-shared
  for (const auto& [op, weight] : base.entries) {
    if (!is_shared_body_op(op)) menu.push_back(op);
  }

  constexpr std::uint64_t kClusSalt = 0x434c5553;  // skeleton + body + weights
  constexpr std::uint64_t kMembSalt = 0x4d454d42;  // per-member jitter
  constexpr std::uint64_t kMutaSalt = 0x4d555441;  // separation mutations

  const std::size_t n_clusters =
      std::max<std::size_t>(1, (spec.count + kClusterTarget - 1) / kClusterTarget);
  std::vector<std::size_t> sizes(n_clusters, spec.count / n_clusters);
  for (std::size_t c = 0; c < spec.count % n_clusters; ++c) sizes[c] += 1;

  const std::size_t skel_lo = spec.min_length;
  const std::size_t skel_hi = spec.max_length > spec.min_length + kLengthReserve
                                  ? spec.max_length - kLengthReserve
                                  : spec.min_length;

  std::vector<ClusterPlan> plans(n_clusters);
  for (std::size_t c = 0; c < n_clusters; ++c) {
    SplitMix64 crng(mix64(mix64(spec.seed, kClusSalt), c));
    ClusterPlan& plan = plans[c];
    plan.index = c;
    plan.size = sizes[c];

    // Cluster vocabulary: the shared backbone and helpers, plus one private
    // opcode that absorbs the weight mass of every other non-shared op. The
    // private is the only harvestable body opcode, and it is exclusive to
    // this cluster (corpora large enough to exhaust the menu cycle it, and
    // accept weaker cluster separation).
    plan.priv = menu.empty() ? Opcode::mov : menu[c % menu.size()];
    plan.weights.entries.clear();
    plan.weights.total = 0.0;
    double priv_weight = 0.0;
    for (const auto& [op, weight] : base.entries) {
      if (op == plan.priv || !is_shared_body_op(op)) {
        priv_weight += weight;
      } else {
        plan.weights.entries.emplace_back(op, weight);
        plan.weights.total += weight;
      }
    }
    if (priv_weight > 0.0) {
      plan.weights.entries.emplace_back(plan.priv, priv_weight);
      plan.weights.total += priv_weight;
    }

    const std::size_t skel =
        skel_lo + (skel_hi - skel_lo) * (c % kLengthTiers) / (kLengthTiers - 1);
    plan.shape = make_shape(crng, spec, skel);
    std::size_t body_total = 0;
    for (const BlockShape& b : plan.shape.blocks) body_total += b.body;
    std::map<Opcode, std::size_t> quota = exact_quota(plan.weights, body_total);

    // Entry pattern: alternating private / nop, carved out of the quota.
    // Everything the attack can harvest comes from entry blocks, so this
    // pins the candidate universe to {private opcodes, nop} by construction.
    const std::size_t entry_slots =
        std::min<std::size_t>(kEntryBody, plan.shape.blocks[0].body);
    std::vector<Opcode> pattern;
    for (std::size_t i = 0; i < entry_slots; ++i) {
      pattern.push_back(i % 2 == 0 ? plan.priv : Opcode::nop);
    }
    for (const Opcode op : pattern) {
      if (quota[op] > 0) {
        quota[op] -= 1;
        continue;
      }
      auto fattest = quota.begin();  // steal the slot from the largest share
      for (auto it = quota.begin(); it != quota.end(); ++it) {
        if (it->second > fattest->second) fattest = it;
      }
      if (fattest->second > 0) fattest->second -= 1;
    }
    std::vector<Opcode> rest;
    rest.reserve(body_total - pattern.size());
    for (const auto& [op, n] : quota) rest.insert(rest.end(), n, op);
    no_repeat_arrange(rest, crng);

    std::size_t slot = 0;
    for (std::size_t b = 0; b < plan.shape.blocks.size(); ++b) {
      std::vector<Instruction> body;
      body.reserve(plan.shape.blocks[b].body);
      for (std::size_t s = 0; s < plan.shape.blocks[b].body; ++s) {
        if (b == 0 && s < pattern.size()) {
          body.push_back(body_instruction(pattern[s], crng));
        } else {
          body.push_back(body_instruction(rest[slot++], crng));
        }
      }
      plan.bodies.push_back(std::move(body));
    }

    // Length-equalizing tail: member r keeps the first (size - 1 - r)
    // instructions, so mates share a nested prefix. Alternating save/restore
    // of flags starting with the save keeps stack depth bounded by one slot
    // for every prefix length, repeats no opcode back-to-back, and -- since
    // these opcodes never occur in an entry block -- lies on axes no mined
    // candidate can move along.
    for (std::size_t i = 0; i + 1 < plan.size; ++i) {
      plan.filler.push_back(ins0(i % 2 == 0 ? Opcode::pushfq : Opcode::popfq));
    }
  }

  std::vector<Function> fns;
  fns.reserve(spec.count);
  std::size_t cluster = 0;
  std::size_t rank = 0;
  for (std::size_t idx = 0; idx < spec.count; ++idx, ++rank) {
    while (rank >= plans[cluster].size) {
      ++cluster;
      rank = 0;
    }
    char name[16];
    std::snprintf(name, sizeof name, "fn_%04zu", idx);
    std::string defect;
    bool built = false;
    for (int attempt = 0; attempt < kMemberAttempts && !built; ++attempt) {
      SplitMix64 mrng(mix64(mix64(mix64(spec.seed, kMembSalt), idx),
                            static_cast<std::uint64_t>(attempt)));
      Function fn = build_member(name, plans[cluster], rank, spec, mrng);
      defect = member_defect(fn, spec);
      if (defect.empty()) {
        fns.push_back(std::move(fn));
        built = true;
      }
    }
    if (!built) {
      throw GenerationRetryExceeded(std::string(name) + ": " + defect);
    }
  }

  // Separation pass: every function must be distinguishable under every
  // model, i.e. no two pool embeddings may share a direction, or ties would
  // make self-retrieval ambiguous. Clashing members get body slots resampled
  // until all three embedding spaces separate.
  std::array<std::unique_ptr<SimilarityOracle>, 3> models = {
      make_oracle("bag"), make_oracle("bigram"), make_oracle("walk")};
  std::vector<std::size_t> cluster_of(fns.size());
  for (std::size_t c = 0, next = 0; c < n_clusters; ++c) {
    for (std::size_t m = 0; m < plans[c].size && next < fns.size(); ++m) cluster_of[next++] = c;
  }
  for (int round = 0;; ++round) {
    std::set<std::size_t> clashed;
    for (const auto& model : models) {
      std::map<std::string, std::size_t> seen;
      for (std::size_t i = 0; i < fns.size(); ++i) {
        const std::string sig = direction_signature(model->embed(fns[i]));
        if (!seen.emplace(sig, i).second) clashed.insert(i);
      }
    }
    if (clashed.empty()) break;
    if (round + 1 >= kDedupRounds) {
      throw GenerationRetryExceeded("indistinguishable functions persist after " +
                                    std::to_string(kDedupRounds) + " separation rounds");
    }
    for (std::size_t i : clashed) {
      SplitMix64 mrng(mix64(mix64(mix64(spec.seed, kMutaSalt), i),
                            static_cast<std::uint64_t>(round)));
      mutate_member(fns[i], plans[cluster_of[i]].weights, mrng);
      const std::string defect = member_defect(fns[i], spec);
      if (!defect.empty()) {
        throw GenerationRetryExceeded(fns[i].name + " after separation: " + defect);
      }
    }
  }

  return FunctionPool(std::move(fns));
}

}  // namespace advasm
