// One PASS/FAIL line per acceptance criterion; exits nonzero on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include <boost/math/special_functions/gamma.hpp>

#include "spanparse/cli.hpp"
#include "spanparse/decoder.hpp"
#include "spanparse/evaluation.hpp"
#include "spanparse/gradcheck.hpp"
#include "spanparse/training.hpp"
#include "test_support.hpp"

using namespace spanparse;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<std::string> file_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

Outcome decode_optimality() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> len(1, 6), labs(2, 4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const std::size_t charts = 500;
  std::size_t mismatches = 0;
  for (std::size_t k = 0; k < charts; ++k) {
    const std::size_t n = len(rng), L = labs(rng);
    LabelVocab v;
    for (std::size_t l = 1; l < L; ++l) v.add("L" + std::to_string(l));
    ScoreChart c(n, L);
    for (double& x : c.raw()) x = u(rng);
    c.clear_empty_column();
    if (cky_decode(c, v).score != brute_force_decode(c, v).score) ++mismatches;
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 30.0, std::to_string(charts) + " charts, " + std::to_string(mismatches) +
                                              " score mismatches, " + fmt("%.2f", secs) + " s"};
}

Outcome round_trip() {
  std::size_t total = 0, ok = 0;
  for (const char* file : {"fixtures.mrg", "toy10.mrg"})
    for (const std::string& line : file_lines(testing::data_path(file))) {
      ++total;
      const Tree t = parse_bracketed(line).front();
      const Tree back = expand_unaries(spans_to_tree(tree_to_spans(collapse_unaries(t)), leaf_copies(t)));
      if (back == t && serialize(back) == line) ++ok;
    }
  return {total > 0 && ok == total, std::to_string(ok) + "/" + std::to_string(total) + " trees identical"};
}

Outcome gradient_battery() {
  auto results = gradcheck::check_ops(50, 7);
  results.push_back(gradcheck::check_pipeline(50, 11));
  Outcome o;
  double worst = 0;
  std::string worst_name;
  for (const auto& r : results) {
    o.pass = o.pass && r.draws == 50 && r.passed(1e-4);
    if (r.max_relative_error >= worst) {
      worst = r.max_relative_error;
      worst_name = r.name;
    }
  }
  o.detail = std::to_string(results.size()) + " checks x 50 draws, max rel err " + fmt("%.3g", worst) + " (" +
             worst_name + ")";
  return o;
}

Outcome overfit() {
  const auto t0 = std::chrono::steady_clock::now();
  LanguageData d;
  d.code = "toy";
  d.train = read_treebank(testing::data_path("toy10.mrg"), "toy");
  TrainConfig cfg;
  cfg.model.encoder.num_layers = 2;
  cfg.model.encoder.d_model = 64;
  cfg.model.encoder.num_heads = 4;
  cfg.model.encoder.d_ff = 128;
  cfg.model.encoder.dropout = 0.0;
  cfg.model.encoder.max_len = 64;
  cfg.model.d_hidden = 64;
  cfg.batch_size = 2;
  cfg.lr = 1e-3;
  cfg.warmup_steps = 20;
  cfg.epochs = 300;
  cfg.target_dev_f1 = 100.0;
  TrainResult r = train(cfg, {d});
  // Re-score the selected model on the training set.
  std::vector<Tree> gold, pred;
  for (const auto& [id, t] : d.train.entries) {
    const auto w = words(t);
    gold.push_back(t);
    pred.push_back(r.model.decode(r.model.chart(w, "toy", nullptr), "toy", leaf_copies(t)));
  }
  const double f1 = labeled_prf(gold, pred).f1;
  const double secs = seconds_since(t0);
  return {f1 == 100.0 && r.epochs_run <= 300 && secs < 300.0,
          "train F1 " + fmt("%.2f", f1) + " after " + std::to_string(r.epochs_run) + " epochs, " + fmt("%.1f", secs) +
              " s"};
}

Outcome sampler_fidelity() {
  Outcome o;
  std::ostringstream detail;
  const std::size_t draws = 100000;
  const std::vector<std::vector<double>> configs{{50.0 / 60, 10.0 / 60}, {0.6, 0.3, 0.1}, {0.7, 0.2, 0.05, 0.05}};
  double min_p = 1.0, max_z = 0.0;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    SamplerConfig s;
    s.fractions = configs[c];
    s.exponent = 0.7;
    LanguageSampler sampler(s);
    Rng rng(500 + c);
    std::vector<std::size_t> counts(s.fractions.size(), 0);
    for (std::size_t k = 0; k < draws; ++k) ++counts[sampler(rng)];
    double z = 0;
    for (double f : s.fractions) z += std::pow(f, 0.7);
    double chi2 = 0;
    for (std::size_t l = 0; l < counts.size(); ++l) {
      const double p = std::pow(s.fractions[l], 0.7) / z;
      const double mean = draws * p, sd = std::sqrt(draws * p * (1 - p));
      const double dev = std::abs(static_cast<double>(counts[l]) - mean) / sd;
      max_z = std::max(max_z, dev);
      o.pass = o.pass && dev <= 3.0;
      chi2 += (static_cast<double>(counts[l]) - mean) * (static_cast<double>(counts[l]) - mean) / mean;
    }
    const double pval = boost::math::gamma_q((counts.size() - 1) / 2.0, chi2 / 2.0);
    min_p = std::min(min_p, pval);
    o.pass = o.pass && pval > 0.01;
  }
  SamplerConfig lim;
  lim.fractions = {0.5, 0.25, 0.125, 0.125};
  lim.exponent = 1.0;
  const auto p1 = sampling_probabilities(lim);
  lim.exponent = 0.0;
  const auto p0 = sampling_probabilities(lim);
  bool limits = true;
  for (std::size_t l = 0; l < 4; ++l) limits = limits && p1[l] == lim.fractions[l] && p0[l] == 0.25;
  o.pass = o.pass && limits;
  detail << "max |z| " << fmt("%.2f", max_z) << ", min chi2 p " << fmt("%.3f", min_p) << ", limits "
         << (limits ? "exact" : "inexact");
  o.detail = detail.str();
  return o;
}

int cli(std::vector<std::string> args, const std::string& input, std::string& out) {
  std::istringstream in(input);
  std::ostringstream o, e;
  const int code = cli::run(std::move(args), in, o, e);
  out = o.str();
  return code;
}

Outcome ensemble_identity() {
  const auto dir = testing::scratch_dir("acceptance_ensemble");
  const std::string train_path = testing::data_path("toy10.mrg"), model = (dir / "m.spck").string();
  std::string ignored;
  const int trained = cli({"train", "--train", "toy=" + train_path, "--out", model, "--log", (dir / "log").string(),
                           "--epochs", "5", "--layers", "1", "--d-model", "32", "--heads", "2", "--d-ff", "32",
                           "--d-hidden", "16", "--batch-size", "2", "--seed", "3"},
                          "", ignored);
  if (trained != 0) return {false, "training failed with exit code " + std::to_string(trained)};
  std::string input;
  for (const auto& [id, t] : read_treebank(train_path).entries) {
    const auto w = words(t);
    for (std::size_t k = 0; k < w.size(); ++k) input += (k ? " " : "") + w[k];
    input += '\n';
  }
  std::string parsed, ensembled;
  const int a = cli({"parse", "--model", model, "--lang", "toy"}, input, parsed);
  const int b = cli({"ensemble", "--models", model + "," + model + "," + model + "," + model, "--lang", "toy"}, input,
                    ensembled);
  const bool same = a == 0 && b == 0 && !parsed.empty() && parsed == ensembled;
  return {same, std::to_string(std::count(parsed.begin(), parsed.end(), '\n')) + " trees, 4 copies, " +
                    (same ? "byte-identical" : "outputs differ")};
}

Outcome joint_compactness() {
  ModelConfig cfg;
  cfg.encoder.num_layers = 2;
  cfg.encoder.d_model = 128;
  cfg.encoder.num_heads = 4;
  cfg.encoder.d_ff = 1024;
  cfg.encoder.dropout = 0.0;
  cfg.d_hidden = 16;
  LanguageData a, b;
  a.code = "A";
  a.train = testing::ToyGrammar().treebank("A", 50, 101);
  b.code = "B";
  b.train = testing::ToyGrammar({{"S", "K1"}, {"NP", "K2"}, {"VP", "K3"}, {"PP", "K4"}}).treebank("B", 10, 201);
  Parser built = initial_model(cfg, {a, b}, 1);
  std::stringstream ckpt;
  save_checkpoint(ckpt, built);
  Parser model = load_checkpoint(ckpt);
  std::size_t encoder = 0, other = 0;
  std::map<std::string, std::size_t> heads;
  model.for_each_parameter([&](const std::string& name, ad::Parameter& p) {
    if (name.rfind("encoder.", 0) == 0)
      encoder += p.value.size();
    else if (name.rfind("head.", 0) == 0)
      heads[name.substr(5, name.find('.', 5) - 5)] += p.value.size();
    else
      other += p.value.size();
  });
  const double total = static_cast<double>(model.parameter_count());
  double worst = 0;
  for (const auto& [lang, n] : heads) worst = std::max(worst, 100.0 * static_cast<double>(n) / total);
  const bool pass = heads.size() == 2 && heads.count("A") && heads.count("B") && other == 0 && encoder > 0 && worst < 1.0;
  return {pass, "1 encoder (" + std::to_string(encoder) + " params), " + std::to_string(heads.size()) +
                    " heads, largest head " + fmt("%.3f", worst) + "% of " + std::to_string(model.parameter_count())};
}

Outcome evaluation_oracle() {
  const Treebank gold = read_treebank(testing::data_path("eval_gold.mrg"));
  const Treebank pred = read_treebank(testing::data_path("eval_pred.mrg"));
  const EvalReport r = labeled_prf(gold, pred);
  const EvalReport self = labeled_prf(gold, gold);
  const double rel = relative_error_delta(91.40, 91.12);
  const bool pass = r.precision == 50.0 && r.recall == 50.0 && r.f1 == 50.0 && fmt("%.2f", r.f1) == "50.00" &&
                    fmt("%.2f", self.f1) == "100.00" && fmt("%+.2f", rel) == "+3.26";
  return {pass, "P=" + fmt("%.2f", r.precision) + " R=" + fmt("%.2f", r.recall) + " F1=" + fmt("%.2f", r.f1) +
                    ", self F1=" + fmt("%.2f", self.f1) + ", rel err delta " + fmt("%+.2f", rel) + "%"};
}

// Relabels every NP and the sentence root, so each sentence is strictly worse.
Tree degrade(const Tree& t) {
  if (t.is_leaf()) return t;
  std::vector<Tree> kids;
  for (const Tree& c : t.children) kids.push_back(degrade(c));
  const bool hit = t.label == "NP" || t.label == "S";
  return Tree::internal(hit ? "XP" : t.label, std::move(kids));
}

Outcome bootstrap_sanity() {
  const Treebank tb = testing::ToyGrammar().treebank("xx", 50, 77);
  std::vector<Tree> gold, worse;
  for (const auto& [id, t] : tb.entries) {
    gold.push_back(t);
    worse.push_back(degrade(t));
  }
  const BootstrapResult same = bootstrap_significance(gold, gold, gold, 10000, 1);
  const BootstrapResult dom = bootstrap_significance(gold, gold, worse, 10000, 1);
  const BootstrapResult again = bootstrap_significance(gold, gold, worse, 10000, 1);
  const bool pass = same.p_value == 1.0 && dom.p_value < 0.05 && again.p_value == dom.p_value && again.delta == dom.delta;
  return {pass, "identical p=" + fmt("%.4f", same.p_value) + ", dominant delta=" + fmt("%+.2f", dom.delta) +
                    " p=" + fmt("%.4f", dom.p_value) + ", repeat " + (again.p_value == dom.p_value ? "identical" : "differs")};
}

Outcome joint_vs_mono() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::map<std::string, std::string> rename{{"S", "K1"}, {"NP", "K2"}, {"VP", "K3"}, {"PP", "K4"}};
  LanguageData a, b;
  a.code = "A";
  a.train = testing::ToyGrammar().treebank("A", 50, 101);
  a.dev = testing::ToyGrammar().treebank("A", 30, 102);
  b.code = "B";
  b.train = testing::ToyGrammar(rename).treebank("B", 10, 201);
  b.dev = testing::ToyGrammar(rename).treebank("B", 30, 202);

  TrainConfig mono;
  mono.model.encoder.num_layers = 2;
  mono.model.encoder.d_model = 32;
  mono.model.encoder.num_heads = 2;
  mono.model.encoder.d_ff = 64;
  mono.model.encoder.dropout = 0.0;
  mono.model.encoder.max_len = 64;
  mono.model.d_hidden = 16;
  mono.batch_size = 5;
  mono.lr = 1e-3;
  mono.warmup_steps = 20;
  mono.epochs = 200;
  TrainConfig joint = mono;
  joint.schedule = Schedule::joint;
  joint.batch_size = 10;

  Outcome o;
  std::ostringstream detail;
  double mono_a = 0, mono_b = 0, joint_a = 0, joint_b = 0;
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  for (std::uint64_t seed : seeds) {
    mono.seed = joint.seed = seed;
    const double ma = train(mono, {a}).best_dev_f1;
    const double mb = train(mono, {b}).best_dev_f1;
    const TrainResult j = train(joint, {a, b});
    const double ja = j.best_dev_by_language.at("A"), jb = j.best_dev_by_language.at("B");
    o.pass = o.pass && jb >= mb;
    detail << "seed " << seed << ": B mono " << fmt("%.2f", mb) << " joint " << fmt("%.2f", jb) << "; ";
    mono_a += ma / seeds.size();
    mono_b += mb / seeds.size();
    joint_a += ja / seeds.size();
    joint_b += jb / seeds.size();
  }
  detail << fmt("%.1f", seconds_since(t0)) << " s";
  o.detail = detail.str();
  const PairedDeltaReport report =
      paired_delta_report({"A", "B"}, {{"A", mono_a}, {"B", mono_b}}, {{{"A", "B"}, joint_a}, {{"B", "A"}, joint_b}});
  std::cout << "# joint-vs-mono dev F1 deltas (mean over " << seeds.size() << " seeds)\n";
  std::istringstream table(format_paired_report(report));
  for (std::string line; std::getline(table, line);) std::cout << "#   " << line << '\n';
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"decode-optimality", decode_optimality},   {"round-trip", round_trip},
      {"gradient-battery", gradient_battery},     {"overfit", overfit},
      {"sampler-fidelity", sampler_fidelity},     {"ensemble-identity", ensemble_identity},
      {"joint-compactness", joint_compactness},   {"evaluation-oracle", evaluation_oracle},
      {"bootstrap-sanity", bootstrap_sanity},     {"joint-vs-mono", joint_vs_mono}};
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
