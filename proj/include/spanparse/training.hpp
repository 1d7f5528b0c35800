#pragma once

// Monolingual, joint multilingual and paired training.
//
// Languages are sampled with probability proportional to f^a, where f is the
// language's share of the joint training set. Each sentence runs through the
// shared encoder and its own language's head; the per-sentence structured
// margin loss is averaged over the batch.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "spanparse/autodiff.hpp"
#include "spanparse/decoder.hpp"
#include "spanparse/evaluation.hpp"
#include "spanparse/model.hpp"
#include "spanparse/scorer.hpp"
#include "spanparse/treebank.hpp"

namespace spanparse {

// ---------------------------------------------------------------------------
// Language sampling

struct SamplerConfig {
  std::vector<double> fractions;
  double exponent = 0.7;
  std::uint64_t seed = 0;

  void validate() const {
    if (fractions.empty()) throw Error("InvalidSampler", "no languages");
    double total = 0.0;
    for (double f : fractions) {
      if (!(f > 0.0)) throw Error("InvalidSampler", "fractions must be positive");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) throw Error("InvalidSampler", "fractions must sum to 1");
    if (exponent < 0.0) throw Error("InvalidSampler", "exponent must be >= 0");
  }

  static SamplerConfig from_sizes(const std::vector<std::size_t>& sizes, double exponent, std::uint64_t seed = 0) {
    SamplerConfig s;
    const double total = static_cast<double>(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
    for (std::size_t n : sizes) s.fractions.push_back(static_cast<double>(n) / total);
    s.exponent = exponent;
    s.seed = seed;
    return s;
  }
};

// P(i) = f_i^a / sum_j f_j^a
inline std::vector<double> sampling_probabilities(const SamplerConfig& s) {
  s.validate();
  std::vector<double> p;
  double z = 0.0;
  for (double f : s.fractions) z += p.emplace_back(std::pow(f, s.exponent));
  for (double& v : p) v /= z;
  return p;
}

class LanguageSampler {
 public:
  explicit LanguageSampler(const SamplerConfig& s) : probs_(sampling_probabilities(s)), dist_(probs_.begin(), probs_.end()) {}

  std::size_t operator()(Rng& rng) { return dist_(rng); }
  const std::vector<double>& probabilities() const noexcept { return probs_; }

 private:
  std::vector<double> probs_;
  std::discrete_distribution<std::size_t> dist_;
};

inline std::size_t sample_language(const SamplerConfig& s, Rng& rng) { return LanguageSampler(s)(rng); }

struct BatchItem {
  std::size_t language = 0;
  std::size_t sentence = 0;
};

// Draws batches: each slot picks a language via the sampler, then the next
// sentence from that language's shuffled order (reshuffled when exhausted).
class JointBatcher {
 public:
  JointBatcher(std::vector<std::size_t> sizes, const SamplerConfig& sampler, Rng& rng,
               const std::vector<std::string>& names = {})
      : sizes_(std::move(sizes)), sampler_(sampler), orders_(sizes_.size()), cursors_(sizes_.size(), 0) {
    for (std::size_t l = 0; l < sizes_.size(); ++l) {
      if (sizes_[l] == 0) throw Error("EmptyTreebank", l < names.size() ? names[l] : "language " + std::to_string(l));
      orders_[l].resize(sizes_[l]);
      std::iota(orders_[l].begin(), orders_[l].end(), std::size_t{0});
      std::shuffle(orders_[l].begin(), orders_[l].end(), rng);
    }
  }

  std::vector<BatchItem> next(std::size_t batch_size, Rng& rng) {
    std::vector<BatchItem> batch;
    batch.reserve(batch_size);
    for (std::size_t k = 0; k < batch_size; ++k) {
      const std::size_t l = sampler_(rng);
      if (cursors_[l] == sizes_[l]) {
        std::shuffle(orders_[l].begin(), orders_[l].end(), rng);
        cursors_[l] = 0;
      }
      batch.push_back({l, orders_[l][cursors_[l]++]});
    }
    return batch;
  }

 private:
  std::vector<std::size_t> sizes_;
  LanguageSampler sampler_;
  std::vector<std::vector<std::size_t>> orders_;
  std::vector<std::size_t> cursors_;
};

inline std::vector<BatchItem> make_joint_batch(JointBatcher& batcher, std::size_t batch_size, Rng& rng) {
  return batcher.next(batch_size, rng);
}

// ---------------------------------------------------------------------------
// Structured margin loss

struct MarginLoss {
  ad::Var loss;
  DecodeResult rival;  // loss-augmented argmax
  std::size_t hamming = 0;
};

// max(0, s(T') + cost(T', gold) - s(gold)) with T' the loss-augmented argmax.
// `scores` is the (span_count(n) x |labels|) output of score_spans.
inline MarginLoss margin_loss(ad::Var scores, const SpanSet& gold, const LabelVocab& vocab, const DecoderOptions& opts = {}) {
  const std::size_t L = scores.value().cols();
  const std::size_t spans = scores.value().rows();
  std::size_t n = 0;
  while (span_count(n) < spans) ++n;
  if (span_count(n) != spans) throw ShapeMismatch("margin_loss", ad::shape_str(scores.shape()), "span_count(n) rows");
  if (gold.length != n)
    throw Error("LengthMismatch", "gold length " + std::to_string(gold.length) + " vs chart " + std::to_string(n));
  const ScoreChart chart = chart_from_scores(scores.value(), n);
  MarginLoss out;
  out.rival = loss_augmented_decode(chart, gold, vocab, opts);
  out.hamming = hamming_cost(out.rival.spans, gold);
  std::map<std::size_t, double> coeff;
  for (const auto& s : out.rival.spans.spans)
    if (!is_empty_label(s.label)) coeff[span_index(s.start, s.end, n) * L + vocab.index(s.label)] += 1.0;
  for (const auto& s : gold.spans)
    if (!is_empty_label(s.label) && vocab.contains(s.label))
      coeff[span_index(s.start, s.end, n) * L + vocab.index(s.label)] -= 1.0;
  std::vector<std::size_t> idx;
  std::vector<double> w;
  for (const auto& [k, c] : coeff)
    if (c != 0.0) {
      idx.push_back(k);
      w.push_back(c);
    }
  out.loss = ad::relu(ad::add_scalar(ad::weighted_pick(scores, std::move(idx), std::move(w)),
                                     static_cast<double>(out.hamming)));
  return out;
}

// Loss value only, straight from a chart.
inline double margin_loss_value(const ScoreChart& chart, const SpanSet& gold, const LabelVocab& vocab) {
  const DecodeResult rival = loss_augmented_decode(chart, gold, vocab);
  SpanSet known;
  known.length = gold.length;
  for (const auto& s : gold.spans)
    if (is_empty_label(s.label) || vocab.contains(s.label)) known.spans.push_back(s);
  const double v = tree_score(chart, rival.spans, vocab) + static_cast<double>(hamming_cost(rival.spans, gold)) -
                   tree_score(chart, known, vocab);
  return v > 0.0 ? v : 0.0;
}

// ---------------------------------------------------------------------------
// Training

enum class Schedule { mono, joint, paired };

inline std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::mono: return "mono";
    case Schedule::joint: return "joint";
    case Schedule::paired: return "paired";
  }
  return "mono";
}

inline Schedule parse_schedule(const std::string& s) {
  if (s == "mono") return Schedule::mono;
  if (s == "joint") return Schedule::joint;
  if (s == "paired") return Schedule::paired;
  throw Error("InvalidConfig", "unknown schedule '" + s + "'");
}

struct LanguageData {
  std::string code;
  Treebank train;
  Treebank dev;  // falls back to train when empty
  VectorSource train_vectors;
  VectorSource dev_vectors;
};

struct TrainConfig {
  Schedule schedule = Schedule::mono;
  ModelConfig model;
  std::size_t batch_size = 0;   // 0: 32 mono/paired, 256 joint
  double lr = 0.0;              // 0: 1e-3 scratch, 5e-5 with external vectors
  std::size_t warmup_steps = 0; // linear warmup; scratch mode uses 160 when left at 0
  std::size_t epochs = 10;
  std::size_t eval_interval = 0;  // steps; 0 evaluates once per epoch
  double sampling_exponent = 0.7;
  double clip_norm = 0.0;
  std::uint64_t seed = 1;
  double target_dev_f1 = 101.0;   // stop once mean dev F1 reaches this
  DecoderOptions decoder;

  std::size_t effective_batch_size() const {
    if (batch_size) return batch_size;
    return schedule == Schedule::joint ? 256 : 32;
  }
  double effective_lr() const {
    if (lr > 0.0) return lr;
    return model.encoder.mode == EncoderMode::scratch ? 1e-3 : 5e-5;
  }
  std::size_t effective_warmup() const {
    if (warmup_steps) return warmup_steps;
    return model.encoder.mode == EncoderMode::scratch ? 160 : 0;
  }

  void validate(std::size_t languages) const {
    switch (schedule) {
      case Schedule::mono:
        if (languages != 1) throw Error("InvalidConfig", "mono training takes exactly 1 language");
        break;
      case Schedule::paired:
        if (languages != 2) throw Error("InvalidConfig", "paired training takes exactly 2 languages");
        break;
      case Schedule::joint:
        if (languages < 2) throw Error("InvalidConfig", "joint training takes at least 2 languages");
        break;
    }
    if (epochs == 0) throw Error("InvalidConfig", "epochs must be >= 1");
    model.encoder.validate();
  }
};

struct TrainResult {
  Parser model;
  double best_dev_f1 = -1.0;
  std::map<std::string, double> best_dev_by_language;
  std::size_t steps = 0;
  std::size_t epochs_run = 0;
};

namespace detail {

struct PreparedSentence {
  std::string id;
  std::vector<std::string> words;
  std::vector<Tree> leaves;
  SpanSet gold;
  std::optional<ad::Tensor> external;
  Tree tree;
};

inline std::vector<PreparedSentence> prepare(Parser& model, const Treebank& tb, const VectorSource& vectors) {
  std::vector<PreparedSentence> out;
  out.reserve(tb.size());
  for (const auto& [id, t] : tb.entries) {
    PreparedSentence s;
    s.id = id;
    s.words = spanparse::words(t);
    s.leaves = leaf_copies(t);
    s.gold = tree_to_spans(collapse_unaries(t));
    s.external = model.external_vectors(id, s.words, &vectors);
    s.tree = t;
    out.push_back(std::move(s));
  }
  return out;
}

inline Rng derived_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return Rng(seq);
}

}  // namespace detail

// Dev F1 of a model on prepared sentences for one language.
inline double evaluate_f1(Parser& model, const std::string& lang, const std::vector<detail::PreparedSentence>& data,
                          const DecoderOptions& opts = {}) {
  std::vector<Tree> gold, pred;
  for (const auto& s : data) {
    const ScoreChart chart = model.chart(s.words, lang, s.external ? &*s.external : nullptr);
    pred.push_back(model.decode(chart, lang, s.leaves, opts));
    gold.push_back(s.tree);
  }
  return labeled_prf(gold, pred).f1;
}

// Word and label vocabularies built from the training treebanks in order of
// first occurrence.
inline Parser initial_model(const ModelConfig& cfg, const std::vector<LanguageData>& langs, std::uint64_t seed) {
  Vocabulary words;
  std::map<std::string, LabelVocab> labels;
  for (const auto& l : langs) {
    LabelVocab& vocab = labels[l.code];
    for (const auto& [id, t] : l.train.entries) {
      for (const auto& w : spanparse::words(t)) {
        std::string s = w;
        if (cfg.encoder.lowercase)
          std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        words.add(s);
      }
      for (const auto& sp : tree_to_spans(collapse_unaries(t)).spans) vocab.add(sp.label);
    }
  }
  return Parser(cfg, std::move(words), labels, seed);
}

inline TrainResult train(const TrainConfig& cfg, const std::vector<LanguageData>& langs, std::ostream* log = nullptr) {
  cfg.validate(langs.size());
  std::set<std::string> codes;
  for (const auto& l : langs)
    if (!codes.insert(l.code).second) throw Error("InvalidConfig", "language '" + l.code + "' listed twice");

  TrainResult result;
  result.model = initial_model(cfg.model, langs, cfg.seed);
  Parser& model = result.model;

  std::vector<std::vector<detail::PreparedSentence>> train_sets, dev_sets;
  std::vector<std::size_t> sizes;
  std::vector<std::string> names;
  for (const auto& l : langs) {
    if (l.train.size() == 0) throw Error("EmptyTreebank", l.code);
    train_sets.push_back(detail::prepare(model, l.train, l.train_vectors));
    dev_sets.push_back(l.dev.size() ? detail::prepare(model, l.dev, l.dev_vectors) : train_sets.back());
    sizes.push_back(l.train.size());
    names.push_back(l.code);
  }

  Rng batch_rng = detail::derived_rng(cfg.seed, 1);
  Rng dropout_rng = detail::derived_rng(cfg.seed, 2);
  JointBatcher batcher(sizes, SamplerConfig::from_sizes(sizes, cfg.sampling_exponent, cfg.seed), batch_rng, names);

  ad::AdamConfig adam_cfg;
  adam_cfg.lr = cfg.effective_lr();
  adam_cfg.clip_norm = cfg.clip_norm;
  ad::AdamState adam(adam_cfg);

  std::vector<ad::Parameter*> shared;
  model.encoder().for_each_parameter([&](const std::string&, ad::Parameter& p) { shared.push_back(&p); });
  std::vector<std::vector<ad::Parameter*>> head_params(langs.size());
  for (std::size_t l = 0; l < langs.size(); ++l)
    model.head(langs[l].code).for_each_parameter([&](const std::string&, ad::Parameter& p) { head_params[l].push_back(&p); });

  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  const std::size_t batch_size = cfg.effective_batch_size();
  const std::size_t steps_per_epoch = (total + batch_size - 1) / batch_size;
  const std::size_t warmup = cfg.effective_warmup();

  std::vector<ad::Tensor> best_values;
  double loss_since_eval = 0.0;
  std::size_t batches_since_eval = 0;
  bool done = false;

  auto evaluate = [&](std::size_t step) {
    double mean = 0.0;
    std::map<std::string, double> per;
    const double avg_loss = batches_since_eval ? loss_since_eval / static_cast<double>(batches_since_eval) : 0.0;
    for (std::size_t l = 0; l < langs.size(); ++l) {
      const double f1 = evaluate_f1(model, langs[l].code, dev_sets[l], cfg.decoder);
      per[langs[l].code] = f1;
      mean += f1;
      if (log) {
        std::ostringstream line;
        line << std::fixed << std::setprecision(6) << "step=" << step << " loss=" << avg_loss << " lang=" << langs[l].code
             << std::setprecision(2) << " devF1=" << f1 << '\n';
        *log << line.str();
      }
    }
    mean /= static_cast<double>(langs.size());
    loss_since_eval = 0.0;
    batches_since_eval = 0;
    if (mean > result.best_dev_f1) {
      result.best_dev_f1 = mean;
      result.best_dev_by_language = per;
      best_values.clear();
      model.for_each_parameter([&](const std::string&, ad::Parameter& p) { best_values.push_back(p.value); });
    }
    if (mean >= cfg.target_dev_f1) done = true;
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    for (std::size_t s = 0; s < steps_per_epoch && !done; ++s) {
      const auto batch = batcher.next(batch_size, batch_rng);
      for (ad::Parameter* p : model.parameters()) p->zero_grad();
      std::vector<bool> touched(langs.size(), false);
      double batch_loss = 0.0;
      const double inv_b = 1.0 / static_cast<double>(batch.size());
      for (const BatchItem& item : batch) {
        const auto& sent = train_sets[item.language][item.sentence];
        LanguageHead& head = model.head(langs[item.language].code);
        touched[item.language] = true;
        ad::Tape tape;
        ad::Var repr = model.encoder().encode(tape, model.word_ids(sent.words), sent.external ? &*sent.external : nullptr,
                                              &dropout_rng);
        ad::Var scores = score_spans(tape, repr, head);
        MarginLoss ml = margin_loss(scores, sent.gold, head.labels, cfg.decoder);
        const double v = ml.loss.value().item();
        const auto& sv = scores.value().data;
        const bool finite = std::all_of(sv.begin(), sv.end(), [](double x) { return std::isfinite(x); });
        if (!finite || !std::isfinite(v)) throw NumericError("DivergedLoss", "non-finite loss at step " + std::to_string(result.steps));
        batch_loss += v * inv_b;
        tape.backward(ad::scale(ml.loss, inv_b));
      }
      // Heads absent from the batch are left untouched (no moment decay).
      std::vector<ad::Parameter*> update = shared;
      for (std::size_t l = 0; l < langs.size(); ++l)
        if (touched[l]) update.insert(update.end(), head_params[l].begin(), head_params[l].end());
      ++result.steps;
      const double scale = warmup ? std::min(1.0, static_cast<double>(result.steps) / static_cast<double>(warmup)) : 1.0;
      adam.step(update, scale);
      loss_since_eval += batch_loss;
      ++batches_since_eval;
      if (cfg.eval_interval && result.steps % cfg.eval_interval == 0) evaluate(result.steps);
    }
    ++result.epochs_run;
    if (!cfg.eval_interval && !done) evaluate(result.steps);
  }
  if (!best_values.empty()) {
    std::size_t k = 0;
    model.for_each_parameter([&](const std::string&, ad::Parameter& p) { p.value = best_values[k++]; });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Paired fine-tuning report

struct PairedDeltaReport {
  std::vector<std::string> languages;
  std::vector<std::vector<double>> delta;  // [tested][auxiliary]
  std::vector<double> row_average;
  std::vector<double> column_average;
  std::vector<double> best;                // max over the row, diagonal included
  std::vector<std::string> best_auxiliary; // "None" when no pairing beats mono
};

// cell[t][a] = F1(t trained with a) - F1(t alone); the diagonal is 0.
inline PairedDeltaReport paired_delta_report(const std::vector<std::string>& languages,
                                             const std::map<std::string, double>& mono_f1,
                                             const std::map<std::pair<std::string, std::string>, double>& paired_f1) {
  PairedDeltaReport r;
  r.languages = languages;
  const std::size_t k = languages.size();
  r.delta.assign(k, std::vector<double>(k, 0.0));
  for (std::size_t t = 0; t < k; ++t) {
    auto mono = mono_f1.find(languages[t]);
    if (mono == mono_f1.end()) throw Error("MissingCell", "no monolingual F1 for " + languages[t]);
    for (std::size_t a = 0; a < k; ++a) {
      if (a == t) continue;
      auto it = paired_f1.find({languages[t], languages[a]});
      if (it == paired_f1.end()) throw Error("MissingCell", "no paired F1 for " + languages[t] + " with " + languages[a]);
      r.delta[t][a] = it->second - mono->second;
    }
  }
  r.row_average.assign(k, 0.0);
  r.column_average.assign(k, 0.0);
  for (std::size_t t = 0; t < k; ++t) {
    double best = 0.0;
    std::string aux = "None";
    for (std::size_t a = 0; a < k; ++a) {
      r.row_average[t] += r.delta[t][a] / static_cast<double>(k);
      r.column_average[a] += r.delta[t][a] / static_cast<double>(k);
      if (a != t && r.delta[t][a] > best) {
        best = r.delta[t][a];
        aux = languages[a];
      }
    }
    r.best.push_back(best);
    r.best_auxiliary.push_back(aux);
  }
  return r;
}

inline std::string format_paired_report(const PairedDeltaReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "tested\\aux";
  for (const auto& l : r.languages) os << '\t' << l;
  os << "\tAverage\tBest\tBestAux\n";
  for (std::size_t t = 0; t < r.languages.size(); ++t) {
    os << r.languages[t];
    for (double d : r.delta[t]) os << '\t' << std::showpos << d << std::noshowpos;
    os << '\t' << std::showpos << r.row_average[t] << '\t' << r.best[t] << std::noshowpos << '\t' << r.best_auxiliary[t]
       << '\n';
  }
  os << "Average";
  for (double d : r.column_average) os << '\t' << std::showpos << d << std::noshowpos;
  os << '\n';
  return os.str();
}

}  // namespace spanparse
