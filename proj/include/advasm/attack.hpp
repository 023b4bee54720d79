#pragma once

// Black-box insertion attack. Candidate instructions are mined from the pool
// functions least similar to the target, scored by how far an uncorrected
// probe insertion pushes the target's ground-truth rank, then inserted with
// full semantic correction until the ground truth leaves the top-k or a
// budget gives out.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "advasm/asm_core.hpp"
#include "advasm/cfg.hpp"
#include "advasm/correct.hpp"
#include "advasm/emulate.hpp"
#include "advasm/oracle.hpp"
#include "advasm/rng.hpp"

namespace advasm {

struct AttackConfig {
  std::size_t k = 5;                 // attack succeeds once gt leaves the top-k
  double epsilon = 0.8;              // minimum final length similarity
  std::size_t num_candidates = 200;  // mining cap
  std::size_t inverse_m = 10;        // least-similar functions mined
  double probe_copy_factor = 0.2;    // probe copies and budget, as fraction of len(f)
  std::int64_t score_threshold = 5;  // candidate kept when probe score exceeds this
  CorrectionStrategy strategy = CorrectionStrategy::spill_restore;
  std::uint64_t seed = 42;
};

inline void validate_config(const AttackConfig& c) {
  if (!(c.epsilon > 0.0 && c.epsilon <= 1.0)) {
    throw std::invalid_argument("epsilon must be in (0, 1]");
  }
  if (c.k < 1) throw std::invalid_argument("k must be at least 1");
  if (c.num_candidates < 1) throw std::invalid_argument("num_candidates must be at least 1");
  if (!(c.probe_copy_factor > 0.0)) {
    throw std::invalid_argument("probe_copy_factor must be positive");
  }
}

// Total insertion budget (adversarial cores plus their fixes). Keeping the
// grown function within this bound keeps length similarity at or above
// 1 - probe_copy_factor.
inline std::size_t max_insertions(const Function& f, const AttackConfig& c) {
  return static_cast<std::size_t>(c.probe_copy_factor * static_cast<double>(f.size()));
}

// Probe width: how many uncorrected copies a scoring probe inserts.
inline std::size_t probe_copies(const Function& f, const AttackConfig& c) {
  const auto n = static_cast<std::size_t>(c.probe_copy_factor * static_cast<double>(f.size()));
  return n == 0 ? 1 : n;
}

struct CandidateInstruction {
  Instruction instruction;
  std::int64_t score = 0;
  std::string source_function;
};

enum class AttackStatus {
  Success,
  NoCandidates,
  BudgetExceeded,
  SimilarityViolated,
  EquivalenceFailed,
};

inline const char* attack_status_name(AttackStatus s) {
  switch (s) {
    case AttackStatus::Success: return "Success";
    case AttackStatus::NoCandidates: return "NoCandidates";
    case AttackStatus::BudgetExceeded: return "BudgetExceeded";
    case AttackStatus::SimilarityViolated: return "SimilarityViolated";
    case AttackStatus::EquivalenceFailed: return "EquivalenceFailed";
  }
  return "?";
}

struct AttackOutcome {
  AttackStatus status = AttackStatus::NoCandidates;
  std::optional<Function> adversarial;      // present exactly on Success
  std::size_t inserted_instruction_count = 0;  // cores plus fixes
  std::size_t iterations = 0;
  std::uint64_t oracle_queries = 0;         // oracle query_count delta
  std::size_t final_gt_rank = 0;
};

// Order-preserving removal of everything the attack may never insert raw:
// jumps, calls, returns, and exception raisers.
inline std::vector<Instruction> filter_control_transfer(const std::vector<Instruction>& instrs) {
  std::vector<Instruction> out;
  out.reserve(instrs.size());
  for (const Instruction& i : instrs) {
    if (is_control_transfer(i.op) || is_exception(i.op)) continue;
    out.push_back(i);
  }
  return out;
}

// Pluggable position source: where insertions (and scoring probes) may land.
// Empty means the default obligatory-block filter; the ablation harness swaps
// in wider position sets.
using PositionProvider =
    std::function<std::vector<std::size_t>(const Function&, const ControlFlowGraph&)>;

// Pluggable candidate source replacing the mining pass wholesale; empty means
// mine_candidates. Used by the unscored-sampling ablation.
using CandidateProvider = std::function<std::vector<CandidateInstruction>(
    const Function&, const SimilarityOracle&, const FunctionPool&, const AttackConfig&)>;

// Every structurally insertable index, obligatory blocks or not.
inline std::vector<std::size_t> all_insertable_positions(const Function& f,
                                                         const ControlFlowGraph& cfg) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (insertable_position(f, cfg, i)) out.push_back(i);
  }
  if (out.empty()) {
    throw CfgError(CfgError::Kind::empty_candidates, "no insertable instruction");
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> insertion_positions(const Function& f,
                                                    const ControlFlowGraph& cfg,
                                                    const PositionProvider& provider) {
  return provider ? provider(f, cfg) : vulnerable_candidates(f, cfg);
}

}  // namespace detail

// f with n copies of ins spliced after index. Probes built this way are only
// ever shown to the oracle, never executed.
inline Function insert_copies(const Function& f, std::size_t index, const Instruction& ins,
                              std::size_t n) {
  std::vector<Instruction> seq(n, ins);
  for (Instruction& s : seq) s.origin = Origin::adversarial;
  return splice_after(f, index, seq);
}

// Rank shift caused by probing cand at vul_index: gt rank of the probe minus
// the gt rank of f itself. baseline_rank short-circuits the second query when
// the caller already knows it (mining computes it once per pass).
inline std::int64_t score_adversarial_instruction(
    const Function& f, std::size_t vul_index, const Instruction& cand,
    const SimilarityOracle& oracle, const FunctionPool& pool, const AttackConfig& config,
    std::optional<std::size_t> baseline_rank = std::nullopt) {
  const std::size_t base =
      baseline_rank ? *baseline_rank : oracle.gt_rank(f, pool, f.name);
  const Function probe = insert_copies(f, vul_index, cand, probe_copies(f, config));
  const std::size_t probed = oracle.gt_rank(probe, pool, f.name);
  return static_cast<std::int64_t>(probed) - static_cast<std::int64_t>(base);
}

// Mine candidate instructions from the inverse_m least-similar pool functions:
// every insertable instruction of their obligatory blocks is probed (deduped
// structurally first), and those whose probe score clears the threshold are
// kept, capped at num_candidates.
inline std::vector<CandidateInstruction> mine_candidates(const Function& f,
                                                         const SimilarityOracle& oracle,
                                                         const FunctionPool& pool,
                                                         const AttackConfig& config,
                                                         const PositionProvider& positions = {}) {
  validate_config(config);
  const ControlFlowGraph cfg = build_cfg(f);
  const std::vector<std::size_t> vul = detail::insertion_positions(f, cfg, positions);
  SplitMix64 rng(config.seed);
  const std::size_t probe_pos = vul[rng.bounded(vul.size())];
  const std::size_t baseline = oracle.gt_rank(f, pool, f.name);

  std::vector<CandidateInstruction> out;
  std::set<std::string> probed;  // structural dedup across source functions
  const std::size_t m = std::min(config.inverse_m, pool.size());
  for (const RankEntry& least : oracle.rank_least(f, pool, m)) {
    const Function* src = pool.find(least.id);
    std::vector<std::size_t> src_vul;
    try {
      src_vul = detail::insertion_positions(*src, build_cfg(*src), positions);
    } catch (const CfgError&) {
      continue;  // nothing insertable in this source's obligatory blocks
    }
    for (std::size_t p : src_vul) {
      const Instruction& ins = src->instructions[p];
      if (!correctable(ins)) continue;
      if (!probed.insert(render_instruction(ins)).second) continue;
      const std::int64_t score =
          score_adversarial_instruction(f, probe_pos, ins, oracle, pool, config, baseline);
      if (score > config.score_threshold) {
        out.push_back({ins, score, least.id});
        if (out.size() >= config.num_candidates) return out;
      }
    }
  }
  return out;
}

// The full insertion loop. f must be its own ground truth in the pool (keyed
// by f.name).
inline AttackOutcome run_attack(const Function& f, const SimilarityOracle& oracle,
                                const FunctionPool& pool, const AttackConfig& config,
                                const PositionProvider& position_source = {},
                                const CandidateProvider& candidate_source = {}) {
  validate_config(config);
  const std::uint64_t q0 = oracle.query_count();
  AttackOutcome outcome;

  const std::vector<CandidateInstruction> candidates =
      candidate_source ? candidate_source(f, oracle, pool, config)
                       : mine_candidates(f, oracle, pool, config, position_source);
  if (candidates.empty()) {
    outcome.status = AttackStatus::NoCandidates;
    outcome.final_gt_rank = oracle.gt_rank(f, pool, f.name);
    outcome.oracle_queries = oracle.query_count() - q0;
    return outcome;
  }

  // Insertion points are the target's own vulnerable positions, tracked
  // through every splice so they keep naming the original instructions.
  std::vector<std::size_t> positions =
      detail::insertion_positions(f, build_cfg(f), position_source);
  const std::size_t budget = max_insertions(f, config);
  const std::size_t max_iterations = 10 * f.size();
  SplitMix64 rng(config.seed);
  CorrectionContext ctx;
  Function adv = f;
  std::size_t inserted = 0;

  for (;;) {
    const std::size_t gt = oracle.gt_rank(adv, pool, f.name);
    if (gt > config.k) {
      outcome.final_gt_rank = gt;
      const double sim = length_similarity(f, adv);
      if (sim < config.epsilon) {
        outcome.status = AttackStatus::SimilarityViolated;
      } else if (!check_equivalence(f, adv).equivalent) {
        outcome.status = AttackStatus::EquivalenceFailed;
      } else {
        outcome.status = AttackStatus::Success;
        outcome.adversarial = adv;
      }
      break;
    }
    if (outcome.iterations >= max_iterations) {
      // Iteration budget spent without dislodging the ground truth.
      outcome.status = AttackStatus::BudgetExceeded;
      outcome.final_gt_rank = gt;
      break;
    }
    ++outcome.iterations;

    const std::size_t at = positions[rng.bounded(positions.size())];
    const CandidateInstruction& cand = candidates[rng.bounded(candidates.size())];
    CorrectionPlan plan;
    try {
      plan = build_correction(cand.instruction, config.strategy, ctx);
    } catch (const Uncorrectable&) {
      // Inverse-ineligible core; the spill strategy corrects anything mined.
      plan = build_correction(cand.instruction, CorrectionStrategy::spill_restore, ctx);
    }
    const std::size_t grow = plan.sequence().size();
    if (inserted + grow > budget) {
      outcome.status = AttackStatus::BudgetExceeded;
      outcome.final_gt_rank = gt;
      break;
    }
    adv = apply_correction(adv, at, plan);
    inserted += grow;
    for (std::size_t& p : positions) {
      if (p > at) p += grow;
    }
  }

  outcome.inserted_instruction_count = inserted;
  outcome.oracle_queries = oracle.query_count() - q0;
  return outcome;
}

// Attack every pool function with a per-function seed derived from the
// configured seed and the function id. The pool is warmed first so each
// outcome's query accounting covers only its own probes.
inline std::map<std::string, AttackOutcome> attack_all(const FunctionPool& pool,
                                                       const SimilarityOracle& oracle,
                                                       const AttackConfig& config,
                                                       const PositionProvider& position_source = {},
                                                       const CandidateProvider& candidate_source = {}) {
  validate_config(config);
  oracle.warm_pool(pool);
  std::map<std::string, AttackOutcome> out;
  for (const auto& [id, fn] : pool.entries()) {
    AttackConfig local = config;
    local.seed = config.seed ^ hash_str(id);
    out.emplace(id, run_attack(fn, oracle, pool, local, position_source, candidate_source));
  }
  return out;
}

}  // namespace advasm
