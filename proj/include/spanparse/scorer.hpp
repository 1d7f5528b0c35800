#pragma once

// Per-span label scores s(i, j, l): span vectors from fencepost differences,
// one two-layer MLP head per language, and chart averaging for ensembles.

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "spanparse/autodiff.hpp"
#include "spanparse/encoder.hpp"
#include "spanparse/error.hpp"
#include "spanparse/treebank.hpp"

namespace spanparse {

// Spans (i, j), 0 <= i < j <= n, are stored row-major by i then j.
inline std::size_t span_count(std::size_t n) noexcept { return n * (n + 1) / 2; }

inline std::size_t span_index(std::size_t i, std::size_t j, std::size_t n) noexcept {
  // Rows 0..i-1 hold n, n-1, ..., n-i+1 spans.
  return i * n - i * (i - 1) / 2 + (j - i - 1);
}

// Dense table of scores; the empty-label column (index 0) is always 0.
class ScoreChart {
 public:
  ScoreChart() = default;
  ScoreChart(std::size_t n, std::size_t labels) : n_(n), labels_(labels), scores_(span_count(n) * labels, 0.0) {}

  std::size_t length() const noexcept { return n_; }
  std::size_t label_count() const noexcept { return labels_; }

  double operator()(std::size_t i, std::size_t j, std::size_t l) const {
    return scores_[span_index(i, j, n_) * labels_ + l];
  }
  double& at(std::size_t i, std::size_t j, std::size_t l) {
    if (!(i < j && j <= n_ && l < labels_))
      throw Error("IndexOutOfRange", "chart cell (" + std::to_string(i) + "," + std::to_string(j) + "," +
                                         std::to_string(l) + ")");
    return scores_[span_index(i, j, n_) * labels_ + l];
  }

  // Sets every empty-label cell to exactly +0.0.
  void clear_empty_column() {
    for (std::size_t s = 0; s < span_count(n_); ++s) scores_[s * labels_] = 0.0;
  }

  const std::vector<double>& raw() const noexcept { return scores_; }
  std::vector<double>& raw() noexcept { return scores_; }

  friend bool operator==(const ScoreChart&, const ScoreChart&) = default;

 private:
  std::size_t n_ = 0;
  std::size_t labels_ = 0;
  std::vector<double> scores_;
};

// Label inventory for one head; index 0 is the empty label.
class LabelVocab {
 public:
  LabelVocab() { labels_.push_back(kEmptyLabel); index_.emplace(kEmptyLabel, 0); }
  explicit LabelVocab(const std::vector<Label>& labels) : LabelVocab() {
    for (const Label& l : labels) add(l);
  }

  std::size_t add(const Label& l) {
    auto [it, inserted] = index_.try_emplace(l, labels_.size());
    if (inserted) labels_.push_back(l);
    return it->second;
  }
  std::size_t index(const Label& l) const {
    auto it = index_.find(l);
    if (it == index_.end()) throw Error("UnknownLabel", "label '" + l + "' not in vocabulary");
    return it->second;
  }
  bool contains(const Label& l) const { return index_.count(l) != 0; }
  const Label& label(std::size_t i) const { return labels_.at(i); }
  std::size_t size() const noexcept { return labels_.size(); }
  const std::vector<Label>& labels() const noexcept { return labels_; }

  friend bool operator==(const LabelVocab& a, const LabelVocab& b) { return a.labels_ == b.labels_; }

 private:
  std::vector<Label> labels_;
  std::unordered_map<Label, std::size_t> index_;
};

struct LanguageHead {
  std::string language;
  LabelVocab labels;
  ad::Parameter w1, b1, w2, b2;

  LanguageHead() = default;
  LanguageHead(std::string lang, LabelVocab vocab, std::size_t d_model, std::size_t d_hidden, Rng& rng)
      : language(std::move(lang)),
        labels(std::move(vocab)),
        w1(detail::xavier(d_model, d_hidden, rng)),
        b1(detail::filled({d_hidden}, 0.0)),
        w2(detail::xavier(d_hidden, labels.size(), rng)),
        b2(detail::filled({labels.size()}, 0.0)) {}

  std::size_t d_model() const { return w1.value.shape.at(0); }
  std::size_t d_hidden() const { return w1.value.shape.at(1); }
  std::size_t parameter_count() const { return w1.value.size() + b1.value.size() + w2.value.size() + b2.value.size(); }

  template <typename F>
  void for_each_parameter(F&& f) {
    const std::string p = "head." + language + ".";
    f(p + "w1", w1);
    f(p + "b1", b1);
    f(p + "w2", w2);
    f(p + "b2", b2);
  }
};

// v(i, j) = [f_j - f_i ; b_i - b_j], where f and b are the first and second
// halves of the fencepost rows.
inline std::vector<double> span_vector(const ad::Tensor& repr, std::size_t i, std::size_t j) {
  const std::size_t rows = repr.rows(), d = repr.cols(), h = d / 2;
  if (!(i < j && j < rows)) throw Error("IndexOutOfRange", "span (" + std::to_string(i) + "," + std::to_string(j) + ")");
  std::vector<double> v(d);
  for (std::size_t c = 0; c < h; ++c) {
    v[c] = repr.at(j, c) - repr.at(i, c);
    v[h + c] = repr.at(i, h + c) - repr.at(j, h + c);
  }
  return v;
}

// Differentiable scores for all spans: (span_count(n) x |labels|), with the
// empty-label column multiplied by zero.
inline ad::Var score_spans(ad::Tape& tape, ad::Var repr, LanguageHead& head) {
  const ad::Tensor& R = repr.value();
  const std::size_t d = R.cols();
  if (R.rank() != 2 || R.rows() < 2) throw ShapeMismatch("score_chart", ad::shape_str(R.shape), "(n+1, d) with n >= 1");
  if (head.d_model() != d) throw ShapeMismatch("score_chart", std::to_string(d), std::to_string(head.d_model()));
  const std::size_t n = R.rows() - 1, h = d / 2;
  std::vector<std::size_t> starts, ends;
  starts.reserve(span_count(n));
  ends.reserve(span_count(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j <= n; ++j) {
      starts.push_back(i);
      ends.push_back(j);
    }
  ad::Var fwd = ad::slice(repr, 0, h);
  ad::Var bwd = ad::slice(repr, h, d - h);
  ad::Var v = ad::concat({ad::sub(ad::gather_rows(fwd, ends), ad::gather_rows(fwd, starts)),
                          ad::sub(ad::gather_rows(bwd, starts), ad::gather_rows(bwd, ends))});
  ad::Var hidden = ad::relu(ad::add(ad::matmul(v, tape.param(head.w1)), tape.param(head.b1)));
  ad::Var scores = ad::add(ad::matmul(hidden, tape.param(head.w2)), tape.param(head.b2));
  ad::Tensor mask({head.labels.size()}, 1.0);
  mask.data[0] = 0.0;
  return ad::mul(scores, tape.constant(std::move(mask)));
}

inline ScoreChart chart_from_scores(const ad::Tensor& scores, std::size_t n) {
  const std::size_t labels = scores.cols();
  if (scores.rows() != span_count(n)) throw ShapeMismatch("chart", ad::shape_str(scores.shape), "span_count(n) rows");
  ScoreChart chart(n, labels);
  chart.raw() = scores.data;
  chart.clear_empty_column();
  return chart;
}

// Inference-only scoring of a boundary representation.
inline ScoreChart score_chart(const ad::Tensor& repr, LanguageHead& head) {
  ad::Tape tape(false);
  ad::Var s = score_spans(tape, tape.constant(repr), head);
  return chart_from_scores(s.value(), repr.rows() - 1);
}

namespace detail {

struct SpanNode {
  std::size_t start, end;
  double cell;
  std::vector<std::size_t> children;
};

}  // namespace detail

// s(T) as the sum of the chart cells of T's spans. Spans are nested and each
// node contributes cell + (child_1 + child_2 + ...), the same association the
// chart decoder uses, so binary trees reproduce decoder scores bit-for-bit.
inline double tree_score(const ScoreChart& chart, const SpanSet& tree, const LabelVocab& vocab) {
  const std::size_t n = chart.length();
  if (tree.spans.empty()) return 0.0;
  std::vector<std::size_t> order(tree.spans.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = tree.spans[a];
    const auto& y = tree.spans[b];
    return x.start != y.start ? x.start < y.start : x.end > y.end;
  });
  std::vector<detail::SpanNode> nodes;
  nodes.reserve(order.size());
  for (std::size_t k : order) {
    const auto& s = tree.spans[k];
    if (!(s.start < s.end && s.end <= n))
      throw Error("IndexOutOfRange", "span (" + std::to_string(s.start) + "," + std::to_string(s.end) + ")");
    const double cell = is_empty_label(s.label) ? 0.0 : chart(s.start, s.end, vocab.index(s.label));
    nodes.push_back({s.start, s.end, cell, {}});
  }
  // Parent links via a stack of open spans.
  std::vector<std::size_t> roots, stack;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    while (!stack.empty() && !(nodes[k].start >= nodes[stack.back()].start && nodes[k].end <= nodes[stack.back()].end))
      stack.pop_back();
    (stack.empty() ? roots : nodes[stack.back()].children).push_back(k);
    stack.push_back(k);
  }
  auto eval = [&](auto&& self, std::size_t k) -> double {
    const auto& node = nodes[k];
    if (node.children.empty()) return node.cell;
    double inner = self(self, node.children[0]);
    for (std::size_t c = 1; c < node.children.size(); ++c) inner += self(self, node.children[c]);
    return node.cell + inner;
  };
  double total = eval(eval, roots[0]);
  for (std::size_t r = 1; r < roots.size(); ++r) total += eval(eval, roots[r]);
  return total;
}

// Cellwise mean as a running average, so k identical charts average to the
// same chart exactly.
inline ScoreChart ensemble_chart(const std::vector<ScoreChart>& charts) {
  if (charts.empty()) throw Error("EmptyEnsemble", "no charts to average");
  ScoreChart mean = charts[0];
  for (std::size_t k = 1; k < charts.size(); ++k) {
    const ScoreChart& c = charts[k];
    if (c.length() != mean.length())
      throw Error("LengthMismatch", std::to_string(c.length()) + " vs " + std::to_string(mean.length()));
    if (c.label_count() != mean.label_count())
      throw Error("VocabMismatch", std::to_string(c.label_count()) + " vs " + std::to_string(mean.label_count()) + " labels");
    const double weight = 1.0 / static_cast<double>(k + 1);
    auto& m = mean.raw();
    const auto& x = c.raw();
    for (std::size_t i = 0; i < m.size(); ++i) m[i] += (x[i] - m[i]) * weight;
  }
  mean.clear_empty_column();
  return mean;
}

// Debug dump: one "i j label score" line per non-empty cell.
inline void dump_chart(std::ostream& out, const ScoreChart& chart, const LabelVocab& vocab) {
  const std::size_t n = chart.length();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j <= n; ++j)
      for (std::size_t l = 1; l < chart.label_count(); ++l)
        out << i << ' ' << j << ' ' << vocab.label(l) << ' ' << chart(i, j, l) << '\n';
}

}  // namespace spanparse
