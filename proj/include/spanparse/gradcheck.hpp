#pragma once

// Central finite-difference checks of the autodiff ops and of the full
// encode -> score -> margin loss pipeline.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "spanparse/autodiff.hpp"
#include "spanparse/encoder.hpp"
#include "spanparse/scorer.hpp"
#include "spanparse/training.hpp"

namespace spanparse::gradcheck {

// The 1e-5 floor sits above the roundoff of a central difference with
// h = 1e-5 on losses of magnitude ~10 (about 1e-10 absolute), so exactly-zero
// gradients are not reported as failures.
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
  return std::abs(analytic - numeric) / denom;
}

struct CheckResult {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t draws = 0;
  std::size_t coordinates = 0;
  std::size_t skipped = 0;  // coordinates straddling a decode switch

  bool passed(double tol = 1e-4) const { return max_relative_error < tol; }
};

// Builds a scalar from input leaves on a tape.
using ScalarFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;
using InputFactory = std::function<std::vector<ad::Tensor>(Rng&)>;

inline ad::Tensor random_tensor(ad::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  ad::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.data) v = d(rng);
  return t;
}

// Values bounded away from zero (keeps relu off its kink).
inline ad::Tensor random_nonzero(ad::Shape shape, Rng& rng) {
  ad::Tensor t = random_tensor(std::move(shape), rng, 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.data)
    if (sign(rng)) v = -v;
  return t;
}

inline CheckResult check_function(const std::string& name, const InputFactory& make_inputs, const ScalarFn& f,
                                  std::size_t draws, std::uint64_t seed, double h = 1e-5) {
  CheckResult r{name};
  Rng rng(seed);
  for (std::size_t d = 0; d < draws; ++d) {
    std::vector<ad::Tensor> inputs = make_inputs(rng);
    auto eval = [&](const std::vector<ad::Tensor>& xs) {
      ad::Tape tape(false);
      std::vector<ad::Var> vars;
      for (const auto& x : xs) vars.push_back(tape.input(x, false));
      return f(tape, vars).value().item();
    };
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.input(x));
    tape.backward(f(tape, vars));
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      const ad::Tensor g = tape.grad(vars[k]);
      for (std::size_t i = 0; i < inputs[k].size(); ++i) {
        const double orig = inputs[k].data[i];
        inputs[k].data[i] = orig + h;
        const double up = eval(inputs);
        inputs[k].data[i] = orig - h;
        const double down = eval(inputs);
        inputs[k].data[i] = orig;
        r.max_relative_error = std::max(r.max_relative_error, relative_error(g.data[i], (up - down) / (2 * h)));
        ++r.coordinates;
      }
    }
    ++r.draws;
  }
  return r;
}

// Weighted sum against a fixed random tensor so every output element matters.
inline ad::Var probe(ad::Var y, std::uint64_t salt) {
  Rng rng(salt);
  return ad::sum(ad::mul(y, y.tape->constant(random_tensor(y.shape(), rng))));
}

inline std::vector<CheckResult> check_ops(std::size_t draws = 50, std::uint64_t seed = 7) {
  using ad::Tensor;
  using ad::Var;
  std::vector<CheckResult> out;
  auto shapes = [](std::vector<ad::Shape> s, bool nonzero = false) -> InputFactory {
    return [s, nonzero](Rng& rng) {
      std::vector<Tensor> v;
      for (const auto& sh : s) v.push_back(nonzero ? random_nonzero(sh, rng) : random_tensor(sh, rng));
      return v;
    };
  };
  out.push_back(check_function("matmul", shapes({{3, 4}, {4, 2}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::matmul(x[0], x[1]), 1); },
                               draws, seed));
  out.push_back(check_function("add", shapes({{3, 4}, {4}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::add(x[0], x[1]), 2); }, draws,
                               seed + 1));
  out.push_back(check_function("sub", shapes({{3, 4}, {3, 4}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::sub(x[0], x[1]), 3); }, draws,
                               seed + 2));
  out.push_back(check_function("mul", shapes({{2, 3}, {3}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::mul(x[0], x[1]), 4); }, draws,
                               seed + 3));
  out.push_back(check_function("relu", shapes({{3, 5}}, true),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::relu(x[0]), 5); }, draws,
                               seed + 4));
  out.push_back(check_function("layer_norm", shapes({{3, 6}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::layer_norm(x[0]), 6); }, draws,
                               seed + 5));
  out.push_back(check_function("softmax", shapes({{3, 5}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::softmax(x[0]), 7); }, draws,
                               seed + 6));
  out.push_back(check_function(
      "embedding_lookup", shapes({{5, 3}}),
      [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::embedding_lookup(x[0], {4, 0, 4, 2}), 8); }, draws,
      seed + 7));
  out.push_back(check_function(
      "concat", shapes({{2, 3}, {2, 2}}),
      [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::concat({x[0], x[1], x[0]}), 9); }, draws, seed + 8));
  out.push_back(check_function(
      "concat_rows", shapes({{2, 3}, {1, 3}}),
      [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::concat_rows({x[0], x[1]}), 10); }, draws, seed + 9));
  out.push_back(check_function("slice", shapes({{3, 6}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::slice(x[0], 1, 3), 11); },
                               draws, seed + 10));
  out.push_back(check_function(
      "select_cols", shapes({{3, 6}}),
      [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::select_cols(x[0], {5, 0, 2, 2}), 12); }, draws,
      seed + 11));
  out.push_back(check_function("scale", shapes({{2, 3}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::scale(x[0], -1.7), 13); },
                               draws, seed + 12));
  out.push_back(check_function("add_scalar", shapes({{2, 3}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::add_scalar(x[0], 0.3), 14); },
                               draws, seed + 13));
  out.push_back(check_function(
      "dropout", shapes({{3, 4}}),
      [](ad::Tape&, const std::vector<Var>& x) {
        ad::Tensor mask({3, 4}, 2.0);
        for (std::size_t i = 0; i < mask.size(); i += 3) mask.data[i] = 0.0;
        return probe(ad::dropout(x[0], mask), 15);
      },
      draws, seed + 14));
  out.push_back(check_function("transpose", shapes({{2, 5}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return probe(ad::transpose(x[0]), 16); },
                               draws, seed + 15));
  out.push_back(check_function("sum", shapes({{4}}),
                               [](ad::Tape&, const std::vector<Var>& x) { return ad::sum(x[0]); }, draws, seed + 16));
  out.push_back(check_function(
      "weighted_pick", shapes({{3, 3}}),
      [](ad::Tape&, const std::vector<Var>& x) { return ad::weighted_pick(x[0], {0, 4, 8, 4}, {1.0, -2.0, 0.5, 1.0}); },
      draws, seed + 17));
  return out;
}

// Random binary-ish gold tree over n words, labels drawn from 1..L-1.
inline SpanSet random_gold(std::size_t n, std::size_t labels, const LabelVocab& vocab, Rng& rng) {
  SpanSet s;
  s.length = n;
  std::uniform_int_distribution<std::size_t> lab(1, labels - 1);
  std::bernoulli_distribution keep(0.6);
  auto rec = [&](auto&& self, std::size_t i, std::size_t j, bool root) -> void {
    if (root || keep(rng)) s.spans.push_back({i, j, vocab.label(lab(rng))});
    if (j - i < 2) return;
    std::uniform_int_distribution<std::size_t> split(i + 1, j - 1);
    const std::size_t k = split(rng);
    self(self, i, k, false);
    self(self, k, j, false);
  };
  rec(rec, 0, n, true);
  return s;
}

// Finite differences on every parameter of a small parser for the margin
// loss of random sentences. Coordinates whose perturbation changes the
// loss-augmented argmax are skipped (the loss is not differentiable there).
inline CheckResult check_pipeline(std::size_t draws = 50, std::uint64_t seed = 11, double h = 1e-5) {
  CheckResult r{"encode_score_margin_loss"};
  ModelConfig cfg;
  cfg.encoder.num_layers = 2;
  cfg.encoder.d_model = 8;
  cfg.encoder.num_heads = 2;
  cfg.encoder.d_ff = 6;
  cfg.encoder.dropout = 0.0;
  cfg.encoder.max_len = 8;
  cfg.d_hidden = 5;
  Vocabulary words;
  for (const char* w : {"a", "b", "c", "d", "e"}) words.add(w);
  const LabelVocab labels({"S", "NP", "VP"});
  Rng rng(seed);
  for (std::size_t d = 0; d < draws; ++d) {
    Parser model(cfg, words, {{"xx", labels}}, seed * 1000 + d);
    std::uniform_int_distribution<std::size_t> len(1, 5), wid(0, words.size() - 1);
    const std::size_t n = len(rng);
    std::vector<std::size_t> ids(n);
    for (auto& id : ids) id = wid(rng);
    const SpanSet gold = random_gold(n, labels.size(), labels, rng);

    auto run = [&](ad::Tape& tape) {
      ad::Var repr = model.encoder().encode(tape, ids, nullptr);
      ad::Var scores = score_spans(tape, repr, model.head("xx"));
      return margin_loss(scores, gold, labels);
    };
    for (ad::Parameter* p : model.parameters()) p->zero_grad();
    {
      ad::Tape tape;
      MarginLoss ml = run(tape);
      tape.backward(ml.loss);
    }
    for (ad::Parameter* p : model.parameters()) {
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double orig = p->value.data[i];
        p->value.data[i] = orig + h;
        ad::Tape up_tape(false);
        MarginLoss up = run(up_tape);
        p->value.data[i] = orig - h;
        ad::Tape down_tape(false);
        MarginLoss down = run(down_tape);
        p->value.data[i] = orig;
        if (up.rival.spans.spans != down.rival.spans.spans) {
          ++r.skipped;
          continue;
        }
        const double numeric = (up.loss.value().item() - down.loss.value().item()) / (2 * h);
        r.max_relative_error = std::max(r.max_relative_error, relative_error(p->grad.data[i], numeric));
        ++r.coordinates;
      }
    }
    ++r.draws;
  }
  return r;
}

}  // namespace spanparse::gradcheck
