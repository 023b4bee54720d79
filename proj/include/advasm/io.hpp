#pragma once

// Interchange formats: JSONL function pools and outcome tables, JSON run
// summaries and transfer matrices. Objects serialize with alphabetical keys
// and pools iterate in id order, so equal data produces byte-equal files --
// the whole pipeline's determinism contract rests on that.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "advasm/asm_core.hpp"
#include "advasm/asm_text.hpp"
#include "advasm/attack.hpp"
#include "advasm/metrics.hpp"
#include "advasm/oracle.hpp"

namespace advasm {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed: " + path);
}

// One {"asm", "id"} object per line, in pool order.
inline std::string pool_to_jsonl(const FunctionPool& pool) {
  std::string out;
  for (const auto& [id, fn] : pool.entries()) {
    nlohmann::json j;
    j["asm"] = render_function(fn);
    j["id"] = id;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline FunctionPool pool_from_jsonl(const std::string& text) {
  std::vector<Function> fns;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    const auto id = j.at("id").get<std::string>();
    Function fn = parse_function(j.at("asm").get<std::string>());
    if (fn.name != id) {
      throw std::runtime_error("pool line " + std::to_string(lineno) + ": id \"" + id +
                               "\" does not match function name \"" + fn.name + "\"");
    }
    fns.push_back(std::move(fn));
  }
  return FunctionPool(std::move(fns));
}

inline AttackStatus attack_status_from_name(const std::string& name) {
  for (const AttackStatus s :
       {AttackStatus::Success, AttackStatus::NoCandidates, AttackStatus::BudgetExceeded,
        AttackStatus::SimilarityViolated, AttackStatus::EquivalenceFailed}) {
    if (name == attack_status_name(s)) return s;
  }
  throw std::invalid_argument("unknown attack status: " + name);
}

// One object per attacked function, in id order. The adversarial listing is
// present exactly on success.
inline std::string outcomes_to_jsonl(const MetricsReport& report,
                                     const std::map<std::string, AttackOutcome>& outcomes) {
  std::string out;
  for (const PerFunctionRow& row : report.per_function) {
    const auto it = outcomes.find(row.id);
    if (it == outcomes.end()) throw std::invalid_argument("row without outcome: " + row.id);
    nlohmann::json j;
    if (it->second.adversarial) j["adversarial"] = render_function(*it->second.adversarial);
    j["gt_rank_after"] = row.gt_rank_after;
    j["gt_rank_before"] = row.gt_rank_before;
    j["id"] = row.id;
    j["inserted"] = row.inserted;
    j["queries"] = row.queries;
    j["status"] = attack_status_name(row.status);
    out += j.dump();
    out += '\n';
  }
  return out;
}

// Reload for re-verification. Loop-iteration counts are not part of the
// interchange format and come back zero; nothing downstream reads them.
inline std::map<std::string, AttackOutcome> outcomes_from_jsonl(const std::string& text) {
  std::map<std::string, AttackOutcome> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    AttackOutcome o;
    o.status = attack_status_from_name(j.at("status").get<std::string>());
    if (j.contains("adversarial")) {
      o.adversarial = parse_function(j.at("adversarial").get<std::string>());
    }
    if (o.status == AttackStatus::Success && !o.adversarial) {
      throw std::runtime_error("outcome line " + std::to_string(lineno) +
                               ": success without adversarial listing");
    }
    o.inserted_instruction_count = j.at("inserted").get<std::size_t>();
    o.oracle_queries = j.at("queries").get<std::uint64_t>();
    o.final_gt_rank = j.at("gt_rank_after").get<std::size_t>();
    if (!out.emplace(j.at("id").get<std::string>(), std::move(o)).second) {
      throw std::runtime_error("outcome line " + std::to_string(lineno) + ": duplicate id");
    }
  }
  return out;
}

// Run summary consumed by scripts and the regression suite; exactly these
// keys, two-space indent, trailing newline.
inline std::string summary_to_json(const MetricsReport& r, const std::string& model,
                                   const AttackConfig& config, std::size_t n_functions) {
  nlohmann::json j;
  j["aa"] = r.aa;
  j["cr"] = r.cr;
  j["dynamic_overhead"] = r.dynamic_overhead;
  j["epsilon"] = config.epsilon;
  j["iir"] = r.iir;
  j["k"] = config.k;
  j["model"] = model;
  j["n_functions"] = n_functions;
  j["oa"] = r.oa;
  j["seed"] = config.seed;
  return j.dump(2) + "\n";
}

inline std::string transfer_to_json(const TransferMatrix& m) {
  nlohmann::json j;
  j["cells"] = m.cells;
  j["models"] = m.models;
  return j.dump(2) + "\n";
}

}  // namespace advasm
