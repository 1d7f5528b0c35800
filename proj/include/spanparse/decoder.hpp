#pragma once

// Exact argmax over binary labeled bracketings of a ScoreChart.
//
// best(i,j) = max_l s(i,j,l) + [j-i>1] * max_{i<k<j} (best(i,k) + best(k,j))
//
// The label max includes the empty label everywhere except the root span
// (0,n). Ties go to the lowest label index, then the lowest split point.

#include <cstddef>
#include <limits>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "spanparse/error.hpp"
#include "spanparse/scorer.hpp"
#include "spanparse/treebank.hpp"

namespace spanparse {

struct DecodeResult {
  // All 2n-1 spans of the binary tree in preorder, empty-labeled ones included.
  SpanSet spans;
  double score = 0.0;

  // Only the non-empty spans: the collapsed tree's span set.
  SpanSet labeled_spans() const {
    SpanSet out;
    out.length = spans.length;
    for (const auto& s : spans.spans)
      if (!is_empty_label(s.label)) out.spans.push_back(s);
    return out;
  }

  Tree to_tree(const std::vector<Tree>& leaf_nodes) const { return spans_to_tree(spans, leaf_nodes); }
};

struct DecoderOptions {
  std::size_t max_length = 300;
};

namespace detail {

inline void check_decodable(const ScoreChart& chart, const DecoderOptions& opts) {
  if (chart.length() == 0) throw Error("EmptyChart", "chart has no spans");
  if (chart.length() > opts.max_length)
    throw Error("SentenceTooLong", std::to_string(chart.length()) + " > " + std::to_string(opts.max_length));
  if (chart.label_count() < 2) throw Error("NoLabels", "root span needs a non-empty label");
}

}  // namespace detail

inline DecodeResult cky_decode(const ScoreChart& chart, const LabelVocab& vocab, const DecoderOptions& opts = {}) {
  detail::check_decodable(chart, opts);
  const std::size_t n = chart.length(), L = chart.label_count();
  const std::size_t cells = span_count(n);
  std::vector<double> best(cells);
  std::vector<std::size_t> best_label(cells), best_split(cells, 0);
  for (std::size_t width = 1; width <= n; ++width)
    for (std::size_t i = 0; i + width <= n; ++i) {
      const std::size_t j = i + width;
      const std::size_t cell = span_index(i, j, n);
      std::size_t label = (i == 0 && j == n) ? 1 : 0;
      double label_score = chart(i, j, label);
      for (std::size_t l = label + 1; l < L; ++l)
        if (chart(i, j, l) > label_score) {
          label_score = chart(i, j, l);
          label = l;
        }
      best_label[cell] = label;
      if (width == 1) {
        best[cell] = label_score;
        continue;
      }
      std::size_t split = i + 1;
      double split_score = best[span_index(i, split, n)] + best[span_index(split, j, n)];
      for (std::size_t k = i + 2; k < j; ++k) {
        const double v = best[span_index(i, k, n)] + best[span_index(k, j, n)];
        if (v > split_score) {
          split_score = v;
          split = k;
        }
      }
      best_split[cell] = split;
      best[cell] = label_score + split_score;
    }
  DecodeResult out;
  out.spans.length = n;
  out.score = best[span_index(0, n, n)];
  auto emit = [&](auto&& self, std::size_t i, std::size_t j) -> void {
    const std::size_t cell = span_index(i, j, n);
    out.spans.spans.push_back({i, j, vocab.label(best_label[cell])});
    if (j - i > 1) {
      self(self, i, best_split[cell]);
      self(self, best_split[cell], j);
    }
  };
  emit(emit, 0, n);
  return out;
}

// Counters reported by the brute-force decoder.
struct BruteForceStats {
  std::size_t bracketings = 0;
  std::size_t label_assignments = 0;
};

namespace detail {

struct BinaryNode {
  std::size_t start, end;
  int left = -1, right = -1;
};

// Every binary bracketing of [i, j), ordered by root split, then left
// subtree, then right subtree. Nodes are stored in preorder.
inline std::vector<std::vector<BinaryNode>> bracketings(std::size_t i, std::size_t j) {
  if (j - i == 1) return {{BinaryNode{i, j}}};
  std::vector<std::vector<BinaryNode>> all;
  for (std::size_t k = i + 1; k < j; ++k) {
    const auto lefts = bracketings(i, k);
    const auto rights = bracketings(k, j);
    for (const auto& l : lefts)
      for (const auto& r : rights) {
        std::vector<BinaryNode> t;
        t.reserve(1 + l.size() + r.size());
        t.push_back({i, j, 1, static_cast<int>(1 + l.size())});
        for (BinaryNode nd : l) {
          if (nd.left >= 0) {
            nd.left += 1;
            nd.right += 1;
          }
          t.push_back(nd);
        }
        for (BinaryNode nd : r) {
          if (nd.left >= 0) {
            nd.left += static_cast<int>(1 + l.size());
            nd.right += static_cast<int>(1 + l.size());
          }
          t.push_back(nd);
        }
        all.push_back(std::move(t));
      }
  }
  return all;
}

inline double binary_tree_score(const ScoreChart& chart, const std::vector<BinaryNode>& t,
                                const std::vector<std::size_t>& labels, int node = 0) {
  const BinaryNode& nd = t[node];
  const double cell = chart(nd.start, nd.end, labels[node]);
  if (nd.left < 0) return cell;
  return cell + (binary_tree_score(chart, t, labels, nd.left) + binary_tree_score(chart, t, labels, nd.right));
}

}  // namespace detail

// Enumerates every binary bracketing and every label assignment (per-span
// label maximization once the assignment space exceeds 2^16 per bracketing).
inline DecodeResult brute_force_decode(const ScoreChart& chart, const LabelVocab& vocab,
                                       BruteForceStats* stats = nullptr) {
  const std::size_t n = chart.length(), L = chart.label_count();
  if (n > 8) throw Error("SentenceTooLong", "brute force supports n <= 8, got " + std::to_string(n));
  detail::check_decodable(chart, {});
  const auto all = detail::bracketings(0, n);
  const std::size_t nodes = 2 * n - 1;
  double space = static_cast<double>(L - 1);
  for (std::size_t k = 1; k < nodes; ++k) space *= static_cast<double>(L);
  const bool exhaustive = space <= 65536.0;

  BruteForceStats local;
  double best_score = -std::numeric_limits<double>::infinity();
  const std::vector<detail::BinaryNode>* best_tree = nullptr;
  std::vector<std::size_t> best_labels;
  for (const auto& t : all) {
    ++local.bracketings;
    std::vector<std::size_t> labels(nodes, 0);
    labels[0] = 1;
    if (exhaustive) {
      while (true) {
        ++local.label_assignments;
        const double s = detail::binary_tree_score(chart, t, labels);
        if (s > best_score) {
          best_score = s;
          best_tree = &t;
          best_labels = labels;
        }
        // Odometer, root most significant.
        std::size_t pos = nodes;
        while (pos-- > 0) {
          if (++labels[pos] < L) break;
          labels[pos] = pos == 0 ? 1 : 0;
        }
        if (pos == static_cast<std::size_t>(-1)) break;
      }
    } else {
      for (std::size_t k = 0; k < nodes; ++k) {
        std::size_t lo = k == 0 ? 1 : 0;
        for (std::size_t l = lo + 1; l < L; ++l)
          if (chart(t[k].start, t[k].end, l) > chart(t[k].start, t[k].end, labels[k])) labels[k] = l;
        local.label_assignments += L - lo;
      }
      const double s = detail::binary_tree_score(chart, t, labels);
      if (s > best_score) {
        best_score = s;
        best_tree = &t;
        best_labels = labels;
      }
    }
  }
  if (stats) *stats = local;
  DecodeResult out;
  out.spans.length = n;
  out.score = best_score;
  for (std::size_t k = 0; k < nodes; ++k)
    out.spans.spans.push_back({(*best_tree)[k].start, (*best_tree)[k].end, vocab.label(best_labels[k])});
  return out;
}

// Chart plus unit Hamming cost: +1 on every non-empty label not in gold for
// that span, and +1 on the empty label of spans that carry a gold label.
inline ScoreChart augment_with_hamming(const ScoreChart& chart, const SpanSet& gold, const LabelVocab& vocab) {
  const std::size_t n = chart.length();
  if (gold.length != n)
    throw Error("LengthMismatch", "gold length " + std::to_string(gold.length) + " vs chart " + std::to_string(n));
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> gold_cells;
  std::set<std::pair<std::size_t, std::size_t>> gold_brackets;
  for (const auto& s : gold.spans) {
    if (!(s.start < s.end && s.end <= n))
      throw Error("IndexOutOfRange", "gold span (" + std::to_string(s.start) + "," + std::to_string(s.end) + ")");
    if (is_empty_label(s.label)) continue;
    gold_brackets.emplace(s.start, s.end);
    if (vocab.contains(s.label)) gold_cells.emplace(s.start, s.end, vocab.index(s.label));
  }
  ScoreChart aug = chart;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j <= n; ++j) {
      if (gold_brackets.count({i, j})) aug.at(i, j, 0) += 1.0;
      for (std::size_t l = 1; l < chart.label_count(); ++l)
        if (!gold_cells.count({i, j, l})) aug.at(i, j, l) += 1.0;
    }
  return aug;
}

// Hamming cost of a predicted binary tree against gold, matching the
// augmentation above.
inline std::size_t hamming_cost(const SpanSet& predicted, const SpanSet& gold) {
  std::multiset<std::tuple<std::size_t, std::size_t, Label>> gold_cells;
  std::set<std::pair<std::size_t, std::size_t>> gold_brackets;
  for (const auto& s : gold.spans)
    if (!is_empty_label(s.label)) {
      gold_cells.emplace(s.start, s.end, s.label);
      gold_brackets.emplace(s.start, s.end);
    }
  std::size_t cost = 0;
  for (const auto& s : predicted.spans) {
    if (is_empty_label(s.label))
      cost += gold_brackets.count({s.start, s.end});
    else
      cost += gold_cells.count({s.start, s.end, s.label}) ? 0 : 1;
  }
  return cost;
}

// Argmax of s + Hamming cost; the returned score is the augmented score.
inline DecodeResult loss_augmented_decode(const ScoreChart& chart, const SpanSet& gold, const LabelVocab& vocab,
                                          const DecoderOptions& opts = {}) {
  return cky_decode(augment_with_hamming(chart, gold, vocab), vocab, opts);
}

}  // namespace spanparse
