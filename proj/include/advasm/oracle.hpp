#pragma once

// Black-box similarity interface: function pool, ranking queries, the
// length-based similarity bound, and three built-in embedding models
// (bag-of-opcodes, in-block opcode bigrams, seeded CFG random walks).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "advasm/asm_core.hpp"
#include "advasm/cfg.hpp"
#include "advasm/rng.hpp"

namespace advasm {

struct OracleError : std::runtime_error {
  enum class Kind {
    pool_too_small,        // requested more entries than the pool holds
    unknown_ground_truth,  // gt_rank target id absent from the pool
  };
  Kind kind;
  OracleError(Kind k, const std::string& what) : std::runtime_error(what), kind(k) {}
};

// Ordered, effectively-immutable collection of named functions. Every entry
// is its own ground truth for ranking queries. Each mutation bumps the pool
// token so oracle-side embedding caches can never serve stale vectors.
class FunctionPool {
 public:
  FunctionPool() : token_(next_token()) {}

  explicit FunctionPool(std::vector<Function> fns) : token_(next_token()) {
    for (auto& f : fns) add(std::move(f));
  }

  void add(Function f) {
    validate_function(f);
    const std::string id = f.name;
    if (!entries_.emplace(id, std::move(f)).second) {
      throw std::invalid_argument("duplicate pool id: " + id);
    }
    token_ = next_token();
  }

  const Function* find(const std::string& id) const {
    auto it = entries_.find(id);
    return it == entries_.end() ? nullptr : &it->second;
  }

  bool contains(const std::string& id) const { return entries_.count(id) != 0; }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Function>& entries() const { return entries_; }
  std::uint64_t token() const { return token_; }

 private:
  static std::uint64_t next_token() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::map<std::string, Function> entries_;  // ascending id = tie-break order
  std::uint64_t token_;
};

struct RankEntry {
  std::string id;
  double score;
  bool operator==(const RankEntry& o) const { return id == o.id && score == o.score; }
};
using RankResult = std::vector<RankEntry>;

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("embedding dimension mismatch");
  if (a == b) {
    for (double v : a) {
      if (v != 0.0) return 1.0;  // identical non-zero vectors: exact 1
    }
    return 0.0;
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

// sim(f, f_adv) = 1 - (len_adv - len)/len, evaluated as a single correctly
// rounded division so that a function grown by exactly 20% compares equal to
// the 0.8 threshold instead of falling a ulp short of it.
inline double length_similarity(const Function& f, const Function& f_adv) {
  const double lf = static_cast<double>(f.instructions.size());
  const double ladv = static_cast<double>(f_adv.instructions.size());
  if (lf < 1.0) throw std::invalid_argument("length_similarity: empty baseline function");
  return (2.0 * lf - ladv) / lf;
}

// Deterministic embedding oracle. Pool-member embeddings are memoized per
// (pool token, id); query_count advances once per actual embedding
// computation, so cache hits are free and the per-call delta equals the
// number of vectors really computed.
class SimilarityOracle {
 public:
  explicit SimilarityOracle(std::string model_id) : model_id_(std::move(model_id)) {}
  virtual ~SimilarityOracle() = default;

  const std::string& model_id() const { return model_id_; }
  std::uint64_t query_count() const { return query_count_.load(std::memory_order_relaxed); }

  // Embedding of an arbitrary (non-pool) function; always computes.
  std::vector<double> embed(const Function& f) const {
    query_count_.fetch_add(1, std::memory_order_relaxed);
    return compute_embedding(f);
  }

  double score(const Function& a, const Function& b) const {
    return cosine_similarity(embed(a), embed(b));
  }

  // Full pool ordering: score descending, then id ascending.
  RankResult full_ranking(const Function& query, const FunctionPool& pool) const {
    const std::vector<double> q = embed(query);
    RankResult all;
    all.reserve(pool.size());
    for (const auto& [id, fn] : pool.entries()) {
      all.push_back({id, cosine_similarity(q, pool_embedding(pool, id, fn))});
    }
    std::sort(all.begin(), all.end(), [](const RankEntry& x, const RankEntry& y) {
      if (x.score != y.score) return x.score > y.score;
      return x.id < y.id;
    });
    return all;
  }

  RankResult rank(const Function& query, const FunctionPool& pool, std::size_t k) const {
    require_pool(k, pool, "rank");
    RankResult all = full_ranking(query, pool);
    all.resize(k);
    return all;
  }

  // Bottom-m entries in ascending score order; reversing it reproduces the
  // tail of full_ranking exactly, tie-breaks included.
  RankResult rank_least(const Function& query, const FunctionPool& pool, std::size_t m) const {
    require_pool(m, pool, "rank_least");
    RankResult all = full_ranking(query, pool);
    RankResult out(all.end() - static_cast<std::ptrdiff_t>(m), all.end());
    std::reverse(out.begin(), out.end());
    return out;
  }

  // 1-based position of the ground-truth id in the full ordering.
  std::size_t gt_rank(const Function& query, const FunctionPool& pool, const std::string& gt) const {
    if (!pool.contains(gt)) {
      throw OracleError(OracleError::Kind::unknown_ground_truth, "unknown ground truth: " + gt);
    }
    const RankResult all = full_ranking(query, pool);
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (all[i].id == gt) return i + 1;
    }
    throw std::logic_error("ground truth vanished from ranking");  // unreachable
  }

  // Precompute every pool embedding so later queries cost exactly one
  // embedding each; used before opening a measurement window.
  void warm_pool(const FunctionPool& pool) const {
    for (const auto& [id, fn] : pool.entries()) pool_embedding(pool, id, fn);
  }

 protected:
  virtual std::vector<double> compute_embedding(const Function& f) const = 0;

 private:
  static void require_pool(std::size_t n, const FunctionPool& pool, const char* op) {
    if (n == 0) throw std::invalid_argument(std::string(op) + ": requested size must be positive");
    if (n > pool.size()) {
      throw OracleError(OracleError::Kind::pool_too_small,
                        std::string(op) + ": requested " + std::to_string(n) + " of " +
                            std::to_string(pool.size()) + " pool entries");
    }
  }

  const std::vector<double>& pool_embedding(const FunctionPool& pool, const std::string& id,
                                            const Function& fn) const {
    const std::pair<std::uint64_t, std::string> key{pool.token(), id};
    {
      std::lock_guard<std::mutex> lock(cache_mutex_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    std::vector<double> v = embed(fn);  // counted; computed outside the lock
    std::lock_guard<std::mutex> lock(cache_mutex_);
    return cache_.emplace(key, std::move(v)).first->second;  // std::map: stable refs
  }

  std::string model_id_;
  mutable std::atomic<std::uint64_t> query_count_{0};
  mutable std::mutex cache_mutex_;
  mutable std::map<std::pair<std::uint64_t, std::string>, std::vector<double>> cache_;
};

// Model 1: opcode term-frequency vector, one dimension per opcode.
class BagOfOpcodesOracle final : public SimilarityOracle {
 public:
  BagOfOpcodesOracle() : SimilarityOracle("bag") {}

 protected:
  std::vector<double> compute_embedding(const Function& f) const override {
    std::vector<double> v(static_cast<std::size_t>(kOpcodeCount), 0.0);
    for (const Instruction& ins : f.instructions) {
      v[static_cast<std::size_t>(ins.op)] += 1.0;
    }
    return v;
  }
};

// Model 2: frequencies of consecutive opcode pairs within basic blocks, with
// a block-start sentinel, so block boundaries (and therefore instruction
// order) are observable.
class OpcodeBigramOracle final : public SimilarityOracle {
 public:
  OpcodeBigramOracle() : SimilarityOracle("bigram") {}

  static constexpr int kSentinel = kOpcodeCount;           // virtual block-start token
  static constexpr int kAlphabet = kOpcodeCount + 1;       // 27
  static constexpr int kDim = kAlphabet * kAlphabet;       // 729

 protected:
  std::vector<double> compute_embedding(const Function& f) const override {
    std::vector<double> v(static_cast<std::size_t>(kDim), 0.0);
    const ControlFlowGraph cfg = build_cfg(f);
    for (const BasicBlock& b : cfg.blocks) {
      int prev = kSentinel;
      for (std::size_t i = b.start; i < b.end; ++i) {
        const int cur = static_cast<int>(f.instructions[i].op);
        v[static_cast<std::size_t>(prev * kAlphabet + cur)] += 1.0;
        prev = cur;
      }
    }
    return v;
  }
};

// Model 3: seeded random walks over the CFG from the entry block; opcode
// 3-grams along each walk are hashed into a fixed-width vector. Mimics
// sampling-based embedding models and reacts to both instruction content and
// graph structure.
class RandomWalkOracle final : public SimilarityOracle {
 public:
  RandomWalkOracle() : SimilarityOracle("walk") {}

  static constexpr int kWalks = 16;
  static constexpr std::size_t kWalkLength = 32;  // opcode budget per walk
  static constexpr std::size_t kDim = 1024;
  static constexpr std::uint64_t kWalkSeed = 0x57414c4b53454544ull;

 protected:
  std::vector<double> compute_embedding(const Function& f) const override {
    std::vector<double> v(kDim, 0.0);
    const ControlFlowGraph cfg = build_cfg(f);
    const auto succ = cfg.successors();
    for (int w = 0; w < kWalks; ++w) {
      SplitMix64 rng(mix64(kWalkSeed, static_cast<std::uint64_t>(w)));
      std::vector<int> tokens;
      int block = cfg.entry;
      while (tokens.size() < kWalkLength) {
        const BasicBlock& b = cfg.blocks[static_cast<std::size_t>(block)];
        for (std::size_t i = b.start; i < b.end && tokens.size() < kWalkLength; ++i) {
          tokens.push_back(static_cast<int>(f.instructions[i].op));
        }
        const auto& nexts = succ[static_cast<std::size_t>(block)];  // ascending ids
        if (nexts.empty() || tokens.size() >= kWalkLength) break;
        block = nexts[rng.bounded(nexts.size())];
      }
      if (tokens.size() >= 3) {
        for (std::size_t i = 0; i + 3 <= tokens.size(); ++i) {
          std::uint64_t h = mix64(mix64(static_cast<std::uint64_t>(tokens[i] + 1),
                                        static_cast<std::uint64_t>(tokens[i + 1] + 1)),
                                  static_cast<std::uint64_t>(tokens[i + 2] + 1));
          v[h % kDim] += 1.0;
        }
      } else {
        std::uint64_t h = 0x9e3779b97f4a7c15ull;  // short walk: hash it whole
        for (int t : tokens) h = mix64(h, static_cast<std::uint64_t>(t + 1));
        v[h % kDim] += 1.0;
      }
    }
    return v;
  }
};

inline std::unique_ptr<SimilarityOracle> make_oracle(const std::string& model) {
  if (model == "bag") return std::make_unique<BagOfOpcodesOracle>();
  if (model == "bigram") return std::make_unique<OpcodeBigramOracle>();
  if (model == "walk") return std::make_unique<RandomWalkOracle>();
  throw std::invalid_argument("unknown model: " + model + " (expected bag, bigram, or walk)");
}

}  // namespace advasm
