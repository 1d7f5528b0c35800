#include <catch_amalgamated.hpp>

#include <boost/math/special_functions/gamma.hpp>
#include <regex>
#include <sstream>

#include "spanparse/gradcheck.hpp"
#include "spanparse/training.hpp"
#include "test_support.hpp"

using namespace spanparse;
using Catch::Matchers::WithinAbs;

namespace {

std::string error_code(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return "none";
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.encoder.num_layers = 1;
  m.encoder.d_model = 16;
  m.encoder.num_heads = 2;
  m.encoder.d_ff = 16;
  m.encoder.dropout = 0.0;
  m.encoder.max_len = 16;
  m.d_hidden = 8;
  return m;
}

TrainConfig tiny_train(Schedule s = Schedule::mono) {
  TrainConfig c;
  c.schedule = s;
  c.model = tiny_model();
  c.batch_size = 4;
  c.epochs = 2;
  c.lr = 1e-3;
  c.warmup_steps = 1;
  return c;
}

LanguageData toy_language(const std::string& code, std::size_t n, std::uint64_t seed,
                          std::map<std::string, std::string> rename = {}) {
  LanguageData d;
  d.code = code;
  d.train = testing::ToyGrammar(std::move(rename)).treebank(code, n, seed);
  return d;
}

ScoreChart random_chart(std::size_t n, std::size_t L, std::mt19937_64& rng) {
  ScoreChart c(n, L);
  std::uniform_real_distribution<double> d(-2, 2);
  for (double& v : c.raw()) v = d(rng);
  c.clear_empty_column();
  return c;
}

LabelVocab vocab_of(std::size_t L) {
  LabelVocab v;
  for (std::size_t l = 1; l < L; ++l) v.add("L" + std::to_string(l));
  return v;
}

ad::Tensor chart_tensor(const ScoreChart& c) {
  return ad::Tensor({span_count(c.length()), c.label_count()}, c.raw());
}

}  // namespace

TEST_CASE("sampling probabilities") {
  SamplerConfig s;
  s.fractions = {0.5, 0.3, 0.2};
  s.exponent = 1.0;
  auto p = sampling_probabilities(s);
  for (std::size_t k = 0; k < 3; ++k) CHECK_THAT(p[k], WithinAbs(s.fractions[k], 1e-15));
  s.exponent = 0.0;
  for (double v : sampling_probabilities(s)) CHECK_THAT(v, WithinAbs(1.0 / 3.0, 1e-15));

  s.exponent = 0.7;
  p = sampling_probabilities(s);
  double z = 0;
  for (double f : s.fractions) z += std::pow(f, 0.7);
  for (std::size_t k = 0; k < 3; ++k) CHECK_THAT(p[k], WithinAbs(std::pow(s.fractions[k], 0.7) / z, 1e-15));
  // Flattening: small languages gain mass, the largest loses it.
  CHECK(p[0] < 0.5);
  CHECK(p[2] > 0.2);

  SamplerConfig swapped = s;
  std::swap(swapped.fractions[0], swapped.fractions[2]);
  const auto q = sampling_probabilities(swapped);
  CHECK(q[0] == p[2]);
  CHECK(q[2] == p[0]);
  CHECK(q[1] == p[1]);

  SamplerConfig bad;
  CHECK(error_code([&] { sampling_probabilities(bad); }) == "InvalidSampler");
  bad.fractions = {0.5, 0.6};
  CHECK(error_code([&] { sampling_probabilities(bad); }) == "InvalidSampler");
  bad.fractions = {1.0, 0.0};
  CHECK(error_code([&] { sampling_probabilities(bad); }) == "InvalidSampler");
  bad.fractions = {1.0};
  bad.exponent = -1;
  CHECK(error_code([&] { sampling_probabilities(bad); }) == "InvalidSampler");

  const auto from = SamplerConfig::from_sizes({30, 10}, 0.5);
  CHECK_THAT(from.fractions[0], WithinAbs(0.75, 1e-15));
}

TEST_CASE("empirical language frequencies pass a chi-square test") {
  const std::vector<std::pair<std::vector<double>, double>> configs{
      {{0.5, 0.5}, 0.7}, {{0.9, 0.1}, 0.7}, {{0.6, 0.3, 0.1}, 0.3}, {{0.25, 0.25, 0.25, 0.25}, 1.0},
      {{0.7, 0.2, 0.05, 0.05}, 0.5}};
  const std::size_t draws = 100000;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    SamplerConfig s;
    s.fractions = configs[c].first;
    s.exponent = configs[c].second;
    LanguageSampler sampler(s);
    Rng rng(1000 + c);
    std::vector<std::size_t> counts(s.fractions.size(), 0);
    for (std::size_t k = 0; k < draws; ++k) ++counts[sampler(rng)];
    double chi2 = 0;
    for (std::size_t l = 0; l < counts.size(); ++l) {
      const double e = static_cast<double>(draws) * sampler.probabilities()[l];
      chi2 += (static_cast<double>(counts[l]) - e) * (static_cast<double>(counts[l]) - e) / e;
    }
    const double df = static_cast<double>(counts.size() - 1);
    const double p = boost::math::gamma_q(df / 2.0, chi2 / 2.0);
    INFO("config " << c << " chi2=" << chi2 << " p=" << p);
    CHECK(p > 0.001);
  }
}

TEST_CASE("joint batches") {
  const std::vector<std::size_t> sizes{40, 10, 5};
  const auto sampler = SamplerConfig::from_sizes(sizes, 0.7);

  SECTION("seeded batches are reproducible") {
    Rng a(5), b(5);
    JointBatcher x(sizes, sampler, a), y(sizes, sampler, b);
    for (int k = 0; k < 20; ++k) {
      const auto p = x.next(8, a), q = y.next(8, b);
      for (std::size_t i = 0; i < 8; ++i) {
        CHECK(p[i].language == q[i].language);
        CHECK(p[i].sentence == q[i].sentence);
      }
    }
  }

  SECTION("language counts follow the sampler") {
    Rng rng(6);
    JointBatcher batcher(sizes, sampler, rng);
    const std::size_t batches = 2000, bs = 16, total = batches * bs;
    std::vector<std::size_t> counts(3, 0);
    for (std::size_t k = 0; k < batches; ++k)
      for (const auto& item : make_joint_batch(batcher, bs, rng)) {
        REQUIRE(item.sentence < sizes[item.language]);
        ++counts[item.language];
      }
    const auto p = sampling_probabilities(sampler);
    for (std::size_t l = 0; l < 3; ++l) {
      const double mean = static_cast<double>(total) * p[l];
      const double sd = std::sqrt(static_cast<double>(total) * p[l] * (1 - p[l]));
      CHECK(std::abs(static_cast<double>(counts[l]) - mean) < 5 * sd);
    }
  }

  SECTION("each language cycles through all its sentences before repeating") {
    Rng rng(7);
    JointBatcher batcher(sizes, sampler, rng);
    std::vector<std::vector<std::size_t>> seen(3);
    for (int k = 0; k < 30; ++k)
      for (const auto& item : batcher.next(4, rng)) seen[item.language].push_back(item.sentence);
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t start = 0; start + sizes[l] <= seen[l].size(); start += sizes[l]) {
        std::set<std::size_t> block(seen[l].begin() + static_cast<std::ptrdiff_t>(start),
                                    seen[l].begin() + static_cast<std::ptrdiff_t>(start + sizes[l]));
        CHECK(block.size() == sizes[l]);
      }
  }

  Rng rng(8);
  CHECK(error_code([&] { JointBatcher({3, 0}, SamplerConfig::from_sizes({3, 1}, 0.7), rng, {"a", "b"}); }) ==
        "EmptyTreebank");
}

TEST_CASE("margin loss") {
  const LabelVocab v = vocab_of(4);
  std::mt19937_64 rng(9);

  SECTION("zero when gold dominates every rival by its cost") {
    const SpanSet gold{{{0, 3, "L1"}, {1, 3, "L2"}}, 3};
    ScoreChart c(3, 4);
    for (double& x : c.raw()) x = -5;
    c.clear_empty_column();
    c.at(0, 3, 1) = 5;
    c.at(1, 3, 2) = 5;
    ad::Tape tape;
    const MarginLoss ml = margin_loss(tape.input(chart_tensor(c)), gold, v);
    CHECK(ml.loss.value().item() == 0.0);
    CHECK(ml.hamming == 0);
    CHECK(margin_loss_value(c, gold, v) == 0.0);
  }

  SECTION("all-zero scores cost the full Hamming distance") {
    for (std::size_t n = 1; n <= 6; ++n) {
      const SpanSet gold{{{0, n, "L1"}}, n};
      ad::Tape tape;
      const MarginLoss ml = margin_loss(tape.input(ad::Tensor({span_count(n), 4})), gold, v);
      CHECK(ml.loss.value().item() == static_cast<double>(2 * n - 1));
      CHECK(ml.hamming == 2 * n - 1);
    }
  }

  SECTION("non-negative and consistent with the chart formula") {
    for (int rep = 0; rep < 200; ++rep) {
      const std::size_t n = 1 + rep % 7;
      const ScoreChart c = random_chart(n, 4, rng);
      const SpanSet gold = cky_decode(random_chart(n, 4, rng), v).labeled_spans();
      ad::Tape tape;
      const double loss = margin_loss(tape.input(chart_tensor(c)), gold, v).loss.value().item();
      CHECK(loss >= 0.0);
      CHECK_THAT(loss, WithinAbs(margin_loss_value(c, gold, v), 1e-9));
    }
  }

  SECTION("gradient matches finite differences away from argmax switches") {
    double worst = 0;
    std::size_t checked = 0;
    for (int rep = 0; rep < 30; ++rep) {
      const std::size_t n = 1 + rep % 5;
      const ScoreChart c = random_chart(n, 4, rng);
      const SpanSet gold = cky_decode(random_chart(n, 4, rng), v).labeled_spans();
      ad::Tape tape;
      ad::Var s = tape.input(chart_tensor(c));
      const MarginLoss ml = margin_loss(s, gold, v);
      tape.backward(ml.loss);
      const ad::Tensor g = tape.grad(s);
      ad::Tensor x = chart_tensor(c);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double o = x.data[i], h = 1e-5;
        x.data[i] = o + h;
        ad::Tape t1(false);
        const MarginLoss up = margin_loss(t1.input(x, false), gold, v);
        x.data[i] = o - h;
        ad::Tape t2(false);
        const MarginLoss dn = margin_loss(t2.input(x, false), gold, v);
        x.data[i] = o;
        if (up.rival.spans.spans != dn.rival.spans.spans) continue;
        // The empty column is masked to zero in every chart built from scores.
        const double numeric = i % 4 == 0 ? 0.0 : (up.loss.value().item() - dn.loss.value().item()) / (2 * h);
        worst = std::max(worst, gradcheck::relative_error(g.data[i], numeric));
        ++checked;
      }
    }
    CHECK(checked > 500);
    CHECK(worst < 1e-4);
  }

  SECTION("length mismatch") {
    ad::Tape tape;
    CHECK(error_code([&] { margin_loss(tape.input(ad::Tensor({6, 4})), SpanSet{{{0, 2, "L1"}}, 2}, v); }) ==
          "LengthMismatch");
    CHECK(error_code([&] { margin_loss(tape.input(ad::Tensor({5, 4})), SpanSet{{{0, 2, "L1"}}, 2}, v); }) ==
          "ShapeMismatch");
  }
}

TEST_CASE("a head absent from the loss gets no gradient and no update") {
  auto a = toy_language("aa", 6, 1), b = toy_language("bb", 6, 2, {{"S", "K1"}, {"NP", "K2"}});
  Parser model = initial_model(tiny_model(), {a, b}, 3);
  for (auto* p : model.parameters()) p->zero_grad();
  const auto& [id, tree] = a.train.entries.front();
  ad::Tape tape;
  ad::Var repr = model.encoder().encode(tape, model.word_ids(words(tree)), nullptr);
  ad::Var scores = score_spans(tape, repr, model.head("aa"));
  tape.backward(margin_loss(scores, tree_to_spans(collapse_unaries(tree)), model.head("aa").labels).loss);
  double touched = 0;
  model.head("aa").for_each_parameter([&](const std::string&, ad::Parameter& p) {
    for (double g : p.grad.data) touched += std::abs(g);
  });
  CHECK(touched > 0);
  std::vector<ad::Tensor> before;
  model.head("bb").for_each_parameter([&](const std::string&, ad::Parameter& p) {
    for (double g : p.grad.data) CHECK(g == 0.0);
    before.push_back(p.value);
  });

  std::vector<ad::Parameter*> update;
  model.encoder().for_each_parameter([&](const std::string&, ad::Parameter& p) { update.push_back(&p); });
  model.head("aa").for_each_parameter([&](const std::string&, ad::Parameter& p) { update.push_back(&p); });
  ad::AdamState adam({1e-2});
  adam.step(update);
  std::size_t k = 0;
  model.head("bb").for_each_parameter([&](const std::string&, ad::Parameter& p) { CHECK(p.value.data == before[k++].data); });
}

TEST_CASE("training configuration checks") {
  auto a = toy_language("aa", 4, 1), b = toy_language("bb", 4, 2);
  CHECK(error_code([&] { train(tiny_train(Schedule::mono), {a, b}); }) == "InvalidConfig");
  CHECK(error_code([&] { train(tiny_train(Schedule::joint), {a}); }) == "InvalidConfig");
  CHECK(error_code([&] { train(tiny_train(Schedule::paired), {a}); }) == "InvalidConfig");
  CHECK(error_code([&] { train(tiny_train(Schedule::joint), {a, a}); }) == "InvalidConfig");
  LanguageData empty;
  empty.code = "ee";
  CHECK(error_code([&] { train(tiny_train(), {empty}); }) == "EmptyTreebank");
  CHECK(parse_schedule("joint") == Schedule::joint);
  CHECK(error_code([] { parse_schedule("solo"); }) == "InvalidConfig");

  TrainConfig d;
  CHECK(d.effective_batch_size() == 32);
  d.schedule = Schedule::joint;
  CHECK(d.effective_batch_size() == 256);
  CHECK(d.effective_lr() == 1e-3);
  d.model.encoder.mode = EncoderMode::context_vectors;
  CHECK(d.effective_lr() == 5e-5);
}

TEST_CASE("seeded training is reproducible and logs one line per language") {
  auto a = toy_language("aa", 8, 1), b = toy_language("bb", 8, 2, {{"S", "K1"}, {"VP", "K3"}});
  auto run = [&](std::uint64_t seed) {
    TrainConfig cfg = tiny_train(Schedule::joint);
    cfg.seed = seed;
    cfg.model.encoder.dropout = 0.1;
    std::ostringstream log, ckpt;
    TrainResult r = train(cfg, {a, b}, &log);
    save_checkpoint(ckpt, r.model);
    return std::pair{log.str(), ckpt.str()};
  };
  const auto first = run(1), second = run(1), other = run(2);
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
  CHECK(first.second != other.second);

  const std::regex line(R"(step=\d+ loss=\d+\.\d{6} lang=(aa|bb) devF1=\d+\.\d{2})");
  std::istringstream in(first.first);
  std::string l;
  std::size_t lines = 0;
  while (std::getline(in, l)) {
    CHECK(std::regex_match(l, line));
    ++lines;
  }
  CHECK(lines == 2 * 2);
}

TEST_CASE("training lowers the loss on a toy treebank") {
  auto a = toy_language("aa", 16, 4);
  TrainConfig cfg = tiny_train();
  cfg.epochs = 80;
  cfg.lr = 5e-3;
  const TrainResult r = train(cfg, {a});
  CHECK(r.steps == 80 * 4);
  CHECK(r.best_dev_f1 > 80.0);
  CHECK(r.best_dev_by_language.at("aa") == r.best_dev_f1);
}

TEST_CASE("target dev F1 stops training early") {
  auto a = toy_language("aa", 4, 5);
  TrainConfig cfg = tiny_train();
  cfg.epochs = 50;
  cfg.target_dev_f1 = 0.0;
  const TrainResult r = train(cfg, {a});
  CHECK(r.epochs_run == 1);
}

TEST_CASE("a diverging run raises a numeric error") {
  auto a = toy_language("aa", 4, 6);
  TrainConfig cfg = tiny_train();
  cfg.lr = 1e308;
  cfg.epochs = 20;
  try {
    train(cfg, {a});
    FAIL("expected DivergedLoss");
  } catch (const NumericError& e) {
    CHECK(e.code() == "DivergedLoss");
  }
}

TEST_CASE("checkpoints round-trip byte-for-byte") {
  auto a = toy_language("aa", 6, 7), b = toy_language("bb", 6, 8, {{"PP", "K4"}});
  TrainConfig cfg = tiny_train(Schedule::paired);
  cfg.epochs = 1;
  TrainResult r = train(cfg, {a, b});
  std::ostringstream first;
  save_checkpoint(first, r.model);
  std::istringstream in(first.str());
  Parser loaded = load_checkpoint(in);
  std::ostringstream second;
  save_checkpoint(second, loaded);
  CHECK(first.str() == second.str());
  CHECK(loaded.heads().size() == 2);
  CHECK(loaded.head("bb").labels == r.model.head("bb").labels);

  const auto sentence = words(a.train.entries.front().second);
  const ScoreChart x = r.model.chart(sentence, "aa", nullptr), y = loaded.chart(sentence, "aa", nullptr);
  for (std::size_t k = 0; k < x.raw().size(); ++k) CHECK_THAT(y.raw()[k], WithinAbs(x.raw()[k], 1e-4));

  std::string bytes = first.str();
  bytes[0] = 'X';
  std::istringstream bad_magic(bytes);
  CHECK(error_code([&] { load_checkpoint(bad_magic); }) == "BadMagic");
  std::istringstream truncated(first.str().substr(0, first.str().size() - 3));
  CHECK(error_code([&] { load_checkpoint(truncated); }) == "TruncatedFile");
}

TEST_CASE("paired delta report") {
  const std::vector<std::string> langs{"A", "B", "C"};
  const std::map<std::string, double> mono{{"A", 80.0}, {"B", 70.0}, {"C", 90.0}};
  const std::map<std::pair<std::string, std::string>, double> paired{
      {{"A", "B"}, 81.0}, {{"A", "C"}, 79.5}, {{"B", "A"}, 72.0}, {{"B", "C"}, 73.0}, {{"C", "A"}, 89.0}, {{"C", "B"}, 88.5}};
  const PairedDeltaReport r = paired_delta_report(langs, mono, paired);
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(r.delta[t][t] == 0.0);
    for (std::size_t x = 0; x < 3; ++x)
      if (x != t) CHECK(r.delta[t][x] == paired.at({langs[t], langs[x]}) - mono.at(langs[t]));
  }
  CHECK_THAT(r.row_average[0], WithinAbs(0.5 / 3, 1e-12));
  CHECK_THAT(r.column_average[0], WithinAbs((0 + 2.0 - 1.0) / 3, 1e-12));
  CHECK(r.best_auxiliary == std::vector<std::string>{"B", "C", "None"});
  CHECK(r.best == std::vector<double>{1.0, 3.0, 0.0});

  const std::string table = format_paired_report(r);
  CHECK(table.find("tested\\aux\tA\tB\tC\tAverage\tBest\tBestAux\n") == 0);
  CHECK(table.find("A\t+0.00\t+1.00\t-0.50\t+0.17\t+1.00\tB\n") != std::string::npos);
  CHECK(table.find("C\t-1.00\t-1.50\t+0.00\t-0.83\t+0.00\tNone\n") != std::string::npos);
  CHECK(table.find("Average\t+0.33\t-0.17\t+0.83\n") != std::string::npos);

  auto missing = paired;
  missing.erase({"B", "C"});
  CHECK(error_code([&] { paired_delta_report(langs, mono, missing); }) == "MissingCell");
  CHECK(error_code([&] { paired_delta_report(langs, {{"A", 1.0}}, paired); }) == "MissingCell");
}
