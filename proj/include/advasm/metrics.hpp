#pragma once

// Evaluation harness over attack outcomes: recognition before/after, length
// overhead, corruption per inserted instruction, dynamic execution overhead,
// independent re-verification of success postconditions, cross-model transfer
// of adversarial functions, and component ablations of the attack loop.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "advasm/asm_core.hpp"
#include "advasm/asm_text.hpp"
#include "advasm/attack.hpp"
#include "advasm/cfg.hpp"
#include "advasm/correct.hpp"
#include "advasm/emulate.hpp"
#include "advasm/oracle.hpp"
#include "advasm/rng.hpp"

namespace advasm {

struct PerFunctionRow {
  std::string id;
  AttackStatus status = AttackStatus::NoCandidates;
  std::size_t gt_rank_before = 0;
  std::size_t gt_rank_after = 0;
  std::size_t inserted = 0;   // cores plus fixes that shipped
  std::uint64_t queries = 0;  // oracle queries charged to this function
};

struct MetricsReport {
  double oa = 0.0;                // % originals retrieved in the top-k
  double aa = 0.0;                // % attacked functions still retrieved
  double iir = 0.0;               // inserted / original instructions, %
  double cr = 0.0;                // (oa - aa) / iir, kept at full precision
  double dynamic_overhead = 0.0;  // mean % extra executed steps on successes
  std::vector<PerFunctionRow> per_function;
};

inline double round2(double x) { return std::round(x * 100.0) / 100.0; }

// Distance between x and the next representable double; the identity
// cr * iir == oa - aa must hold at least this tightly.
inline double ulp_gap(double x) {
  return std::nextafter(std::abs(x), std::numeric_limits<double>::infinity()) - std::abs(x);
}

// Corruption bought per inserted instruction. oa, aa, and iir arrive already
// rounded for display; cr itself stays full precision so the product
// reproduces oa - aa exactly. A zero iir means no insertion shipped, which
// also means no rank moved, so zero corruption is the true value.
inline double cr_from(double oa, double aa, double iir) {
  return iir == 0.0 ? 0.0 : (oa - aa) / iir;
}

// Mean percentage of extra steps the rewritten function executes relative to
// the original, across seeded machines. Insertions never remove executed
// instructions, so this is nonnegative.
inline double step_overhead_percent(const Function& f, const Function& adv,
                                    std::size_t trials = 10) {
  double total = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto steps_f = static_cast<double>(execute(f, init_machine(t)).state.step_count);
    const auto steps_adv = static_cast<double>(execute(adv, init_machine(t)).state.step_count);
    total += 100.0 * (steps_adv - steps_f) / steps_f;
  }
  return total / static_cast<double>(trials);
}

// Rate a batch of outcomes against the pool they were attacked in. A failed
// attack ships the original function, which the ranker still retrieves, so
// failures count as recognized and drag the averages toward no-op.
inline MetricsReport compute_metrics(const std::map<std::string, AttackOutcome>& outcomes,
                                     const FunctionPool& pool, const SimilarityOracle& oracle,
                                     std::size_t k) {
  if (outcomes.empty()) throw std::invalid_argument("no outcomes to rate");
  MetricsReport r;
  std::size_t recog_before = 0;
  std::size_t recog_after = 0;
  std::size_t successes = 0;
  std::size_t inserted_total = 0;
  std::size_t length_total = 0;
  double overhead_total = 0.0;

  for (const auto& [id, outcome] : outcomes) {
    const Function* f = pool.find(id);
    if (f == nullptr) {
      throw std::invalid_argument("outcome names a function missing from the pool: " + id);
    }
    PerFunctionRow row;
    row.id = id;
    row.status = outcome.status;
    row.inserted = outcome.inserted_instruction_count;
    row.queries = outcome.oracle_queries;
    row.gt_rank_before = oracle.gt_rank(*f, pool, id);
    length_total += f->size();

    if (outcome.status == AttackStatus::Success) {
      if (!outcome.adversarial) {
        throw std::invalid_argument(id + ": success outcome without adversarial function");
      }
      row.gt_rank_after = oracle.gt_rank(*outcome.adversarial, pool, id);
      inserted_total += outcome.inserted_instruction_count;
      overhead_total += step_overhead_percent(*f, *outcome.adversarial);
      ++successes;
    } else {
      row.gt_rank_after = outcome.final_gt_rank;
    }

    if (row.gt_rank_before <= k) ++recog_before;
    const bool recognized =
        outcome.status != AttackStatus::Success || row.gt_rank_after <= k;
    if (recognized) ++recog_after;
    r.per_function.push_back(std::move(row));
  }

  const auto n = static_cast<double>(outcomes.size());
  r.oa = round2(100.0 * static_cast<double>(recog_before) / n);
  r.aa = round2(100.0 * static_cast<double>(recog_after) / n);
  r.iir = round2(100.0 * static_cast<double>(inserted_total) / static_cast<double>(length_total));
  r.cr = cr_from(r.oa, r.aa, r.iir);
  r.dynamic_overhead =
      successes == 0 ? 0.0 : round2(overhead_total / static_cast<double>(successes));
  return r;
}

// Structural identity of two CFGs: same block layout, labels, edges, entry,
// exits, and unreachable set. Blocks are compared positionally, which is
// exact because both graphs are built in instruction order.
inline bool cfg_isomorphic(const ControlFlowGraph& a, const ControlFlowGraph& b) {
  if (a.blocks.size() != b.blocks.size()) return false;
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    if (a.blocks[i].entry_label != b.blocks[i].entry_label) return false;
  }
  return a.edges == b.edges && a.entry == b.entry && a.exits == b.exits &&
         a.unreachable == b.unreachable;
}

// Internal-consistency audit of a report against the outcomes it claims to
// summarize. Returns human-readable violations; empty means clean.
inline std::vector<std::string> validate_report(const MetricsReport& r,
                                                const std::map<std::string, AttackOutcome>& outcomes,
                                                const FunctionPool& pool, std::size_t k) {
  std::vector<std::string> bad;
  const auto pct_ok = [](double x) { return x >= 0.0 && x <= 100.0; };
  if (!pct_ok(r.oa)) bad.push_back("oa outside [0, 100]");
  if (!pct_ok(r.aa)) bad.push_back("aa outside [0, 100]");
  if (r.iir < 0.0) bad.push_back("iir negative");
  if (r.dynamic_overhead < 0.0) bad.push_back("dynamic overhead negative");

  const double lhs = r.cr * r.iir;
  const double rhs = r.oa - r.aa;
  if (std::abs(lhs - rhs) > ulp_gap(std::max(std::abs(lhs), std::abs(rhs)))) {
    bad.push_back("cr * iir does not reproduce oa - aa");
  }

  if (r.per_function.size() != outcomes.size()) {
    bad.push_back("per-function row count does not match outcome count");
    return bad;
  }
  std::size_t recog_before = 0;
  std::size_t recog_after = 0;
  std::size_t inserted_total = 0;
  std::size_t length_total = 0;
  for (const PerFunctionRow& row : r.per_function) {
    const auto it = outcomes.find(row.id);
    if (it == outcomes.end()) {
      bad.push_back(row.id + ": row without outcome");
      continue;
    }
    const AttackOutcome& outcome = it->second;
    if (row.status != outcome.status) bad.push_back(row.id + ": status mismatch");
    if (row.inserted != outcome.inserted_instruction_count) {
      bad.push_back(row.id + ": inserted count mismatch");
    }
    if (row.queries != outcome.oracle_queries) bad.push_back(row.id + ": query count mismatch");
    const Function* f = pool.find(row.id);
    if (f == nullptr) {
      bad.push_back(row.id + ": missing from pool");
      continue;
    }
    length_total += f->size();
    if (outcome.status == AttackStatus::Success) {
      if (!outcome.adversarial) {
        bad.push_back(row.id + ": success without adversarial function");
        continue;
      }
      if (outcome.adversarial->size() != f->size() + row.inserted) {
        bad.push_back(row.id + ": length delta does not match inserted count");
      }
      inserted_total += row.inserted;
    }
    if (row.gt_rank_before <= k) ++recog_before;
    if (outcome.status != AttackStatus::Success || row.gt_rank_after <= k) ++recog_after;
  }
  const auto n = static_cast<double>(r.per_function.size());
  if (round2(100.0 * static_cast<double>(recog_before) / n) != r.oa) {
    bad.push_back("oa does not match its rows");
  }
  if (round2(100.0 * static_cast<double>(recog_after) / n) != r.aa) {
    bad.push_back("aa does not match its rows");
  }
  if (length_total != 0 &&
      round2(100.0 * static_cast<double>(inserted_total) / static_cast<double>(length_total)) !=
          r.iir) {
    bad.push_back("iir does not match its rows");
  }
  return bad;
}

// Re-verify every success against the contract the attack claims to satisfy:
// evasion at k, length similarity at epsilon, untouched control flow, exact
// length accounting, and behavioral equivalence under fresh trials.
inline std::vector<std::string> verify_success_postconditions(
    const std::map<std::string, AttackOutcome>& outcomes, const FunctionPool& pool,
    const SimilarityOracle& oracle, std::size_t k, double epsilon, int trials = 100) {
  std::vector<std::string> bad;
  for (const auto& [id, outcome] : outcomes) {
    if (outcome.status != AttackStatus::Success) continue;
    const Function* f = pool.find(id);
    if (f == nullptr) {
      bad.push_back(id + ": missing from pool");
      continue;
    }
    if (!outcome.adversarial) {
      bad.push_back(id + ": success without adversarial function");
      continue;
    }
    const Function& adv = *outcome.adversarial;
    if (oracle.gt_rank(adv, pool, id) <= k) bad.push_back(id + ": still retrieved in the top-k");
    if (length_similarity(*f, adv) < epsilon) {
      bad.push_back(id + ": length similarity below epsilon");
    }
    if (!cfg_isomorphic(build_cfg(*f), build_cfg(adv))) bad.push_back(id + ": control flow changed");
    if (adv.size() != f->size() + outcome.inserted_instruction_count) {
      bad.push_back(id + ": length delta does not match inserted count");
    }
    if (!check_equivalence(*f, adv, trials).equivalent) bad.push_back(id + ": behavior diverges");
  }
  return bad;
}

// ---------------------------------------------------------------------------
// Cross-model transfer

struct TransferMatrix {
  std::vector<std::string> models;          // row = producing model, col = evaluating model
  std::vector<std::vector<double>> cells;   // % of the row's functions that evade the column
};

// Adversarial functions labeled with the pool id they must hide.
using AdversarialSet = std::vector<std::pair<std::string, Function>>;

inline TransferMatrix transferability(const std::map<std::string, AdversarialSet>& adv_sets,
                                      const std::map<std::string, const SimilarityOracle*>& models,
                                      const FunctionPool& pool, std::size_t k) {
  if (models.size() < 2) {
    throw std::invalid_argument("transfer comparison needs at least two models");
  }
  for (const auto& [name, oracle] : models) {
    if (oracle == nullptr) throw std::invalid_argument("null model: " + name);
  }
  for (const auto& [name, set] : adv_sets) {
    if (models.count(name) == 0) {
      throw std::invalid_argument("adversarial set for unknown model: " + name);
    }
  }
  TransferMatrix m;
  for (const auto& [name, oracle] : models) m.models.push_back(name);
  for (const std::string& src : m.models) {
    std::vector<double> row;
    const auto it = adv_sets.find(src);
    for (const std::string& dst : m.models) {
      if (it == adv_sets.end() || it->second.empty()) {
        row.push_back(0.0);
        continue;
      }
      const SimilarityOracle& oracle = *models.at(dst);
      std::size_t evaded = 0;
      for (const auto& [id, adv] : it->second) {
        if (oracle.gt_rank(adv, pool, id) > k) ++evaded;
      }
      row.push_back(round2(100.0 * static_cast<double>(evaded) /
                           static_cast<double>(it->second.size())));
    }
    m.cells.push_back(std::move(row));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Ablations

enum class AblationMode {
  FullPipeline,        // mined candidates, obligatory-block positions
  RandomPositions,     // mined candidates, any structurally insertable index
  RandomInstructions,  // unscored uniform candidates, obligatory-block positions
};

inline const char* ablation_mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::FullPipeline: return "full";
    case AblationMode::RandomPositions: return "random-positions";
    case AblationMode::RandomInstructions: return "random-instructions";
  }
  return "?";
}

inline AblationMode ablation_mode_from_name(const std::string& name) {
  if (name == "full") return AblationMode::FullPipeline;
  if (name == "random-positions") return AblationMode::RandomPositions;
  if (name == "random-instructions") return AblationMode::RandomInstructions;
  throw std::invalid_argument("unknown ablation mode: " + name);
}

namespace metrics_detail {

inline Register nonsp_reg(SplitMix64& rng) {
  for (;;) {
    const auto r = static_cast<Register>(rng.bounded(kRegisterCount));
    if (r != Register::rsp) return r;
  }
}

inline Operand plain_mem(SplitMix64& rng) {
  MemRef m;
  m.base = nonsp_reg(rng);
  m.disp = static_cast<std::int32_t>(rng.range(-64, 64));
  return Operand::mem(m);
}

// One instruction drawn uniformly from the shapes mining could ever harvest.
inline Instruction uniform_instruction(SplitMix64& rng) {
  static constexpr std::array<Opcode, 13> kMenu = {
      Opcode::mov,  Opcode::lea, Opcode::add,  Opcode::sub,  Opcode::xor_, Opcode::and_,
      Opcode::or_,  Opcode::imul, Opcode::cmp, Opcode::test, Opcode::push, Opcode::pop,
      Opcode::nop,
  };
  const Opcode op = kMenu[rng.bounded(kMenu.size())];
  const Operand dst = Operand::reg(nonsp_reg(rng));
  switch (op) {
    case Opcode::mov:
      switch (rng.bounded(4)) {
        case 0: return ins2(op, dst, Operand::imm(rng.range(-999, 999)));
        case 1: return ins2(op, dst, Operand::reg(nonsp_reg(rng)));
        case 2: return ins2(op, dst, plain_mem(rng));
        default: return ins2(op, plain_mem(rng), Operand::reg(nonsp_reg(rng)));
      }
    case Opcode::lea: {
      MemRef m;
      m.base = nonsp_reg(rng);
      if (rng.bounded(2) == 0) {
        m.index = nonsp_reg(rng);
        m.scale = static_cast<std::uint8_t>(1u << rng.bounded(4));
      }
      m.disp = static_cast<std::int32_t>(rng.range(-64, 64));
      return ins2(op, dst, Operand::mem(m));
    }
    case Opcode::imul:
      return rng.bounded(2) == 0 ? ins2(op, dst, Operand::reg(nonsp_reg(rng)))
                                 : ins2(op, dst, Operand::imm(rng.range(2, 9)));
    case Opcode::cmp:
    case Opcode::test:
      switch (rng.bounded(3)) {
        case 0: return ins2(op, dst, Operand::reg(nonsp_reg(rng)));
        case 1: return ins2(op, dst, Operand::imm(rng.range(-256, 256)));
        default: return ins2(op, dst, plain_mem(rng));
      }
    case Opcode::push:
    case Opcode::pop:
      return ins1(op, dst);
    case Opcode::nop:
      return ins0(op);
    default:  // add/sub/xor/and/or
      switch (rng.bounded(4)) {
        case 0: return ins2(op, dst, Operand::reg(nonsp_reg(rng)));
        case 1: return ins2(op, dst, Operand::imm(rng.range(-256, 256)));
        case 2: return ins2(op, dst, plain_mem(rng));
        default: return ins2(op, plain_mem(rng), Operand::reg(nonsp_reg(rng)));
      }
  }
}

}  // namespace metrics_detail

// Unscored candidate source: uniform over the instruction space instead of
// mined from dissimilar pool functions, never shown to the oracle. Keeps the
// mining cap and the correctability filter so only the scoring signal is
// ablated.
inline std::vector<CandidateInstruction> sample_random_candidates(const Function& f,
                                                                  const AttackConfig& config) {
  SplitMix64 rng(mix64(config.seed, 0x554e53434f524544ull));  // "UNSCORED"
  std::vector<CandidateInstruction> out;
  std::set<std::string> seen;
  const std::size_t attempts = 64 * config.num_candidates;
  for (std::size_t t = 0; t < attempts && out.size() < config.num_candidates; ++t) {
    const Instruction ins = metrics_detail::uniform_instruction(rng);
    if (!correctable(ins)) continue;
    if (!seen.insert(render_instruction(ins)).second) continue;
    out.push_back({ins, 0, f.name});
  }
  return out;
}

// Attack the whole pool with one component knocked out, then rate the run.
inline MetricsReport run_ablation(const FunctionPool& pool, const SimilarityOracle& oracle,
                                  const AttackConfig& config, AblationMode mode,
                                  std::map<std::string, AttackOutcome>* outcomes_out = nullptr) {
  PositionProvider positions;
  CandidateProvider candidates;
  if (mode == AblationMode::RandomPositions) {
    positions = [](const Function& fn, const ControlFlowGraph& cfg) {
      return all_insertable_positions(fn, cfg);
    };
  } else if (mode == AblationMode::RandomInstructions) {
    candidates = [](const Function& fn, const SimilarityOracle&, const FunctionPool&,
                    const AttackConfig& c) { return sample_random_candidates(fn, c); };
  }
  std::map<std::string, AttackOutcome> outcomes =
      attack_all(pool, oracle, config, positions, candidates);
  MetricsReport report = compute_metrics(outcomes, pool, oracle, config.k);
  if (outcomes_out != nullptr) *outcomes_out = std::move(outcomes);
  return report;
}

}  // namespace advasm
