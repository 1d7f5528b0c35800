#pragma once

// Labeled bracket scoring (evalb conventions), paired bootstrap significance
// and relative error change.

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "spanparse/error.hpp"
#include "spanparse/treebank.hpp"

namespace spanparse {

// Per-sentence bracket counts.
struct MatchCounts {
  std::size_t matched = 0;
  std::size_t gold = 0;
  std::size_t predicted = 0;

  MatchCounts& operator+=(const MatchCounts& o) {
    matched += o.matched;
    gold += o.gold;
    predicted += o.predicted;
    return *this;
  }
  bool exact() const noexcept { return matched == gold && matched == predicted; }
};

struct PrfPercent {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Corpus scores from summed counts. Two empty bracket sets agree perfectly.
inline PrfPercent prf(const MatchCounts& c) {
  PrfPercent r;
  if (c.gold == 0 && c.predicted == 0) return {100.0, 100.0, 100.0};
  if (c.predicted) r.precision = 100.0 * static_cast<double>(c.matched) / static_cast<double>(c.predicted);
  if (c.gold) r.recall = 100.0 * static_cast<double>(c.matched) / static_cast<double>(c.gold);
  if (r.precision + r.recall > 0.0) r.f1 = 2.0 * r.precision * r.recall / (r.precision + r.recall);
  return r;
}

struct EvalReport {
  MatchCounts totals;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double exact_match = 0.0;
  std::vector<MatchCounts> sentences;
};

inline const std::set<std::string>& default_ignore_labels() {
  static const std::set<std::string> labels{"TOP", "ROOT", "VROOT", "S1"};
  return labels;
}

using Bracket = std::tuple<std::size_t, std::size_t, Label>;

namespace detail {

inline std::size_t brackets_of(const Tree& t, std::size_t start, const std::set<std::string>& ignore,
                               std::vector<Bracket>& out) {
  if (t.is_leaf()) return start + 1;
  std::size_t end = start;
  for (const Tree& c : t.children) end = brackets_of(c, end, ignore, out);
  if (!ignore.count(t.label)) out.emplace_back(start, end, t.label);
  return end;
}

}  // namespace detail

// Phrasal brackets of a tree after expanding collapsed unary labels;
// preterminals and ignored labels are excluded.
inline std::vector<Bracket> brackets(const Tree& t, const std::set<std::string>& ignore = default_ignore_labels()) {
  std::vector<Bracket> out;
  detail::brackets_of(expand_unaries(t), 0, ignore, out);
  return out;
}

// Multiset intersection of bracket lists.
inline MatchCounts match_brackets(const std::vector<Bracket>& gold, const std::vector<Bracket>& pred) {
  std::multiset<Bracket> pool(gold.begin(), gold.end());
  MatchCounts c{0, gold.size(), pred.size()};
  for (const Bracket& b : pred)
    if (auto it = pool.find(b); it != pool.end()) {
      pool.erase(it);
      ++c.matched;
    }
  return c;
}

inline EvalReport report_from_counts(std::vector<MatchCounts> sentences) {
  EvalReport r;
  std::size_t exact = 0;
  for (const auto& c : sentences) {
    r.totals += c;
    exact += c.exact() ? 1 : 0;
  }
  const PrfPercent s = prf(r.totals);
  r.precision = s.precision;
  r.recall = s.recall;
  r.f1 = s.f1;
  r.exact_match = sentences.empty() ? 0.0 : 100.0 * static_cast<double>(exact) / static_cast<double>(sentences.size());
  r.sentences = std::move(sentences);
  return r;
}

inline EvalReport labeled_prf(const std::vector<Tree>& gold, const std::vector<Tree>& pred,
                              const std::set<std::string>& ignore = default_ignore_labels()) {
  if (gold.size() != pred.size())
    throw FormatError("SentenceCountMismatch",
                      std::to_string(gold.size()) + " gold vs " + std::to_string(pred.size()) + " predicted trees");
  std::vector<MatchCounts> per;
  per.reserve(gold.size());
  for (std::size_t k = 0; k < gold.size(); ++k) {
    if (leaf_count(gold[k]) != leaf_count(pred[k]))
      throw FormatError("TokenCountMismatch", "sentence " + std::to_string(k) + ": " +
                                                  std::to_string(leaf_count(gold[k])) + " vs " +
                                                  std::to_string(leaf_count(pred[k])) + " tokens");
    per.push_back(match_brackets(brackets(gold[k], ignore), brackets(pred[k], ignore)));
  }
  return report_from_counts(std::move(per));
}

inline EvalReport labeled_prf(const Treebank& gold, const Treebank& pred,
                              const std::set<std::string>& ignore = default_ignore_labels()) {
  std::vector<Tree> g, p;
  for (const auto& [id, t] : gold.entries) g.push_back(t);
  for (const auto& [id, t] : pred.entries) p.push_back(t);
  return labeled_prf(g, p, ignore);
}

struct BootstrapResult {
  double p_value = 1.0;
  std::size_t resamples = 0;
  double delta = 0.0;  // F1(A) - F1(B), percent
};

// Paired bootstrap over sentences. p is the fraction of resamples whose F1
// difference exceeds the observed one by at least the observed one
// (delta* - delta >= delta); ties count toward p. Resample r draws from its
// own generator seeded by (seed, r), so results do not depend on evaluation
// order.
inline BootstrapResult bootstrap_from_counts(const std::vector<MatchCounts>& a, const std::vector<MatchCounts>& b,
                                             std::size_t resamples, std::uint64_t seed) {
  if (a.size() != b.size())
    throw FormatError("SentenceCountMismatch", std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (resamples == 0) throw Error("InvalidArgument", "resamples must be >= 1");
  auto total_f1 = [](const std::vector<MatchCounts>& v) {
    MatchCounts t;
    for (const auto& c : v) t += c;
    return prf(t).f1;
  };
  BootstrapResult r;
  r.resamples = resamples;
  r.delta = total_f1(a) - total_f1(b);
  const std::size_t n = a.size();
  if (n == 0) return r;
  std::size_t hits = 0;
  for (std::size_t k = 0; k < resamples; ++k) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    MatchCounts ta, tb;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t idx = pick(rng);
      ta += a[idx];
      tb += b[idx];
    }
    const double d = prf(ta).f1 - prf(tb).f1;
    if (d - r.delta >= r.delta) ++hits;
  }
  r.p_value = static_cast<double>(hits) / static_cast<double>(resamples);
  return r;
}

inline BootstrapResult bootstrap_significance(const std::vector<Tree>& gold, const std::vector<Tree>& pred_a,
                                              const std::vector<Tree>& pred_b, std::size_t resamples,
                                              std::uint64_t seed,
                                              const std::set<std::string>& ignore = default_ignore_labels()) {
  const EvalReport a = labeled_prf(gold, pred_a, ignore);
  const EvalReport b = labeled_prf(gold, pred_b, ignore);
  return bootstrap_from_counts(a.sentences, b.sentences, resamples, seed);
}

// Percent change in error rate (100 - F1) going from base to new.
inline double relative_error_delta(double f1_base, double f1_new) {
  if (f1_base >= 100.0) throw Error("DegenerateBase", "base F1 of 100 has no error to compare against");
  if (f1_base < 0.0 || f1_new < 0.0 || f1_new > 100.0)
    throw Error("InvalidArgument", "F1 values must be percentages");
  return ((100.0 - f1_new) - (100.0 - f1_base)) / (100.0 - f1_base) * 100.0;
}

}  // namespace spanparse
