// advasm: generate synthetic function pools, run insertion attacks against
// opcode-statistics retrieval models, rate the outcomes, measure cross-model
// transfer, run component ablations, and trace the emulator.
//
// Exit codes: 0 on success, 2 when reporting detects an invariant violation,
// 1 on any other error.

#include <cstdint>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "advasm/asm_text.hpp"
#include "advasm/attack.hpp"
#include "advasm/corpus.hpp"
#include "advasm/emulate.hpp"
#include "advasm/io.hpp"
#include "advasm/metrics.hpp"
#include "advasm/oracle.hpp"

namespace {

using namespace advasm;

// Write to the path when given, stdout otherwise.
void emit(const std::string& path, const std::string& text) {
  if (path.empty()) {
    std::cout << text;
  } else {
    write_file(path, text);
  }
}

int report_violations(const std::vector<std::string>& violations, const char* stage) {
  if (violations.empty()) return 0;
  for (const std::string& v : violations) {
    std::cerr << "advasm: " << stage << ": " << v << "\n";
  }
  return 2;
}

struct AttackFlags {
  std::string pool_path;
  std::string model = "bag";
  std::string function;
  std::string outcomes_path;
  std::string summary_path;
  bool verify = false;
  AttackConfig config;
  std::string strategy = "spill-restore";
};

void add_config_options(CLI::App* cmd, AttackFlags& f) {
  cmd->add_option("--pool", f.pool_path, "Function pool (JSONL)")->required();
  cmd->add_option("--model", f.model, "Retrieval model")
      ->check(CLI::IsMember({"bag", "bigram", "walk"}));
  cmd->add_option("--k", f.config.k, "Top-k evasion threshold");
  cmd->add_option("--epsilon", f.config.epsilon, "Minimum final length similarity");
  cmd->add_option("--num-candidates", f.config.num_candidates, "Mining cap");
  cmd->add_option("--inverse-m", f.config.inverse_m, "Least-similar functions mined");
  cmd->add_option("--probe-copy-factor", f.config.probe_copy_factor,
                  "Probe width and insertion budget as a fraction of the length");
  cmd->add_option("--score-threshold", f.config.score_threshold,
                  "Keep candidates whose probe rank shift exceeds this");
  cmd->add_option("--strategy", f.strategy, "Semantic correction strategy")
      ->check(CLI::IsMember({"spill-restore", "inverse-op"}));
  cmd->add_option("--seed", f.config.seed, "Deterministic run seed");
  cmd->add_option("--outcomes", f.outcomes_path, "Write per-function outcomes (JSONL)");
  cmd->add_option("--summary", f.summary_path, "Write the run summary (JSON; default stdout)");
  cmd->add_flag("--verify", f.verify, "Re-verify success postconditions (slow)");
}

AttackConfig resolve_config(const AttackFlags& f) {
  AttackConfig c = f.config;
  c.strategy = f.strategy == "inverse-op" ? CorrectionStrategy::inverse_op
                                          : CorrectionStrategy::spill_restore;
  return c;
}

// Shared tail of attack/ablate/metrics: consistency-check the report, then
// write the requested artifacts.
int finish_report(const MetricsReport& report, const std::map<std::string, AttackOutcome>& outcomes,
                  const FunctionPool& pool, const SimilarityOracle& oracle, const AttackFlags& f,
                  const AttackConfig& config) {
  int rc = report_violations(validate_report(report, outcomes, pool, config.k), "report");
  if (f.verify) {
    const auto bad =
        verify_success_postconditions(outcomes, pool, oracle, config.k, config.epsilon);
    const int vrc = report_violations(bad, "verify");
    rc = rc == 0 ? vrc : rc;
  }
  if (!f.outcomes_path.empty()) {
    write_file(f.outcomes_path, outcomes_to_jsonl(report, outcomes));
  }
  emit(f.summary_path, summary_to_json(report, f.model, config, pool.size()));
  return rc;
}

int run_gen_corpus(const CorpusSpec& spec, const std::string& out_path) {
  const FunctionPool pool = generate_corpus(spec);
  emit(out_path, pool_to_jsonl(pool));
  return 0;
}

int run_attack_cmd(const AttackFlags& f) {
  const FunctionPool pool = pool_from_jsonl(read_file(f.pool_path));
  const std::unique_ptr<SimilarityOracle> oracle = make_oracle(f.model);
  const AttackConfig config = resolve_config(f);

  std::map<std::string, AttackOutcome> outcomes;
  if (f.function.empty()) {
    outcomes = attack_all(pool, *oracle, config);
  } else {
    const Function* fn = pool.find(f.function);
    if (fn == nullptr) throw std::runtime_error("function not in pool: " + f.function);
    oracle->warm_pool(pool);  // batch-equivalent query accounting
    AttackConfig local = config;
    local.seed = config.seed ^ hash_str(f.function);
    outcomes.emplace(f.function, run_attack(*fn, *oracle, pool, local));
  }

  const MetricsReport report = compute_metrics(outcomes, pool, *oracle, config.k);
  return finish_report(report, outcomes, pool, *oracle, f, config);
}

int run_metrics_cmd(const AttackFlags& f, const std::string& outcomes_path) {
  const FunctionPool pool = pool_from_jsonl(read_file(f.pool_path));
  const std::unique_ptr<SimilarityOracle> oracle = make_oracle(f.model);
  const AttackConfig config = resolve_config(f);
  const std::map<std::string, AttackOutcome> outcomes = outcomes_from_jsonl(read_file(outcomes_path));
  const MetricsReport report = compute_metrics(outcomes, pool, *oracle, config.k);
  return finish_report(report, outcomes, pool, *oracle, f, config);
}

int run_ablate_cmd(const AttackFlags& f, const std::string& mode_name) {
  const FunctionPool pool = pool_from_jsonl(read_file(f.pool_path));
  const std::unique_ptr<SimilarityOracle> oracle = make_oracle(f.model);
  const AttackConfig config = resolve_config(f);
  std::map<std::string, AttackOutcome> outcomes;
  const MetricsReport report =
      run_ablation(pool, *oracle, config, ablation_mode_from_name(mode_name), &outcomes);
  return finish_report(report, outcomes, pool, *oracle, f, config);
}

int run_transfer_cmd(const std::string& pool_path, const std::vector<std::string>& adv_args,
                     const std::string& models_arg, std::size_t k, const std::string& out_path) {
  const FunctionPool pool = pool_from_jsonl(read_file(pool_path));

  std::vector<std::unique_ptr<SimilarityOracle>> owned;
  std::map<std::string, const SimilarityOracle*> models;
  std::istringstream names(models_arg);
  std::string name;
  while (std::getline(names, name, ',')) {
    if (name.empty()) continue;
    owned.push_back(make_oracle(name));
    models[name] = owned.back().get();
  }

  std::map<std::string, AdversarialSet> sets;
  for (const std::string& arg : adv_args) {
    const std::size_t eq = arg.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("--adv expects MODEL=OUTCOMES_PATH, got: " + arg);
    }
    const std::string model = arg.substr(0, eq);
    AdversarialSet set;
    for (const auto& [id, outcome] : outcomes_from_jsonl(read_file(arg.substr(eq + 1)))) {
      if (outcome.status == AttackStatus::Success && outcome.adversarial) {
        set.emplace_back(id, *outcome.adversarial);
      }
    }
    sets[model] = std::move(set);
  }

  emit(out_path, transfer_to_json(transferability(sets, models, pool, k)));
  return 0;
}

int run_emulate_cmd(const std::string& pool_path, const std::string& asm_path,
                    const std::string& function, const std::string& vs, int trials) {
  Function fn;
  FunctionPool pool;
  if (!asm_path.empty()) {
    fn = parse_function(read_file(asm_path));
  } else {
    pool = pool_from_jsonl(read_file(pool_path));
    const Function* found = pool.find(function);
    if (found == nullptr) throw std::runtime_error("function not in pool: " + function);
    fn = *found;
  }

  if (!vs.empty()) {
    const Function* other = pool.find(vs);
    if (other == nullptr) throw std::runtime_error("function not in pool: " + vs);
    const EquivalenceVerdict verdict = check_equivalence(fn, *other, trials);
    nlohmann::json j;
    if (verdict.first_divergence) {
      const Divergence& d = *verdict.first_divergence;
      j["divergence"] = {{"location", d.location},
                         {"trial_seed", d.trial_seed},
                         {"value_f", d.value_f},
                         {"value_g", d.value_g}};
    }
    j["equivalent"] = verdict.equivalent;
    j["trials"] = verdict.trials;
    std::cout << j.dump(2) << "\n";
    return 0;
  }

  for (int t = 0; t < trials; ++t) {
    const ExecutionResult res = execute(fn, init_machine(static_cast<std::uint64_t>(t)));
    nlohmann::json j;
    j["fault"] = res.halted() ? nlohmann::json() : nlohmann::json(fault_name(*res.fault));
    j["steps"] = res.state.step_count;
    j["trial"] = t;
    std::cout << j.dump() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial rewriting and evaluation for function-retrieval models"};
  app.require_subcommand(1);
  int rc = 0;

  // gen-corpus
  CorpusSpec spec;
  std::string corpus_out;
  CLI::App* gen = app.add_subcommand("gen-corpus", "Generate a synthetic function pool");
  gen->add_option("--out", corpus_out, "Output path (JSONL; default stdout)");
  gen->add_option("--count", spec.count, "Number of functions");
  gen->add_option("--min-length", spec.min_length, "Minimum instructions per function");
  gen->add_option("--max-length", spec.max_length, "Maximum instructions per function");
  gen->add_option("--min-blocks", spec.min_blocks, "Minimum basic blocks");
  gen->add_option("--max-blocks", spec.max_blocks, "Maximum basic blocks");
  gen->add_option("--seed", spec.seed, "Deterministic generation seed");
  gen->callback([&] { rc = run_gen_corpus(spec, corpus_out); });

  // attack
  AttackFlags atk;
  CLI::App* attack = app.add_subcommand("attack", "Attack pool functions until they evade");
  add_config_options(attack, atk);
  attack->add_option("--function", atk.function, "Attack one function instead of the whole pool");
  attack->callback([&] { rc = run_attack_cmd(atk); });

  // metrics
  AttackFlags met;
  std::string met_outcomes;
  CLI::App* metrics = app.add_subcommand("metrics", "Recompute and audit a saved outcome table");
  add_config_options(metrics, met);
  metrics->get_option("--outcomes")->description("Outcome table to rate (JSONL)")->required();
  metrics->callback([&] {
    met_outcomes = met.outcomes_path;
    met.outcomes_path.clear();  // input here, not an artifact to rewrite
    rc = run_metrics_cmd(met, met_outcomes);
  });

  // transfer
  std::string tr_pool, tr_models = "bag,bigram,walk", tr_out;
  std::vector<std::string> tr_adv;
  std::size_t tr_k = 5;
  CLI::App* transfer = app.add_subcommand("transfer", "Rate adversarial sets across models");
  transfer->add_option("--pool", tr_pool, "Function pool (JSONL)")->required();
  transfer->add_option("--adv", tr_adv, "MODEL=OUTCOMES_PATH with that model's successes")
      ->take_all();
  transfer->add_option("--models", tr_models, "Comma-separated evaluating models");
  transfer->add_option("--k", tr_k, "Top-k evasion threshold");
  transfer->add_option("--out", tr_out, "Output path (JSON; default stdout)");
  transfer->callback([&] { rc = run_transfer_cmd(tr_pool, tr_adv, tr_models, tr_k, tr_out); });

  // ablate
  AttackFlags abl;
  std::string abl_mode = "full";
  CLI::App* ablate = app.add_subcommand("ablate", "Attack with one pipeline stage knocked out");
  add_config_options(ablate, abl);
  ablate->add_option("--mode", abl_mode, "Pipeline variant")
      ->check(CLI::IsMember({"full", "random-positions", "random-instructions"}));
  ablate->callback([&] { rc = run_ablate_cmd(abl, abl_mode); });

  // emulate
  std::string em_pool, em_asm, em_fn, em_vs;
  int em_trials = 10;
  CLI::App* emulate = app.add_subcommand("emulate", "Trace seeded runs of one function");
  emulate->add_option("--pool", em_pool, "Function pool (JSONL)");
  emulate->add_option("--asm", em_asm, "Single-function listing instead of a pool");
  emulate->add_option("--function", em_fn, "Function id within the pool");
  emulate->add_option("--vs", em_vs, "Check behavioral equivalence against this pool function");
  emulate->add_option("--trials", em_trials, "Seeded machine states to run");
  emulate->callback([&] { rc = run_emulate_cmd(em_pool, em_asm, em_fn, em_vs, em_trials); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "advasm: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
