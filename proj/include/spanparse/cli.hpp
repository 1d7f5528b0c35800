#pragma once

// Command-line front end. run() is the whole program minus main(), so tests
// can drive it with in-memory streams.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "spanparse/decoder.hpp"
#include "spanparse/error.hpp"
#include "spanparse/evaluation.hpp"
#include "spanparse/gradcheck.hpp"
#include "spanparse/model.hpp"
#include "spanparse/scorer.hpp"
#include "spanparse/training.hpp"
#include "spanparse/treebank.hpp"
#include "spanparse/vectors.hpp"

namespace spanparse::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kFormat = 2, kNumeric = 3 };

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// "lang=path" or bare "path" (language "").
inline std::pair<std::string, std::string> lang_path(const std::string& entry) {
  const auto eq = entry.find('=');
  if (eq == std::string::npos) return {"", entry};
  return {entry.substr(0, eq), entry.substr(eq + 1)};
}

inline const std::set<std::string>& boolean_flags() {
  static const std::set<std::string> flags{"lowercase"};
  return flags;
}

// Splices key=value lines from --config into args as flags, skipping keys
// already given on the command line. Lines starting with '#' are comments.
inline std::vector<std::string> apply_config_file(std::vector<std::string> args) {
  std::string path;
  for (std::size_t k = 0; k < args.size(); ++k) {
    if (args[k] == "--config" && k + 1 < args.size()) path = args[k + 1];
    if (args[k].rfind("--config=", 0) == 0) path = args[k].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream in(path);
  if (!in) throw FormatError("IoError", "cannot open config file " + path);
  std::set<std::string> given;
  for (const auto& a : args)
    if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2));
  std::vector<std::string> extra;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("BadConfigLine", "expected key=value", lineno);
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    std::replace(key.begin(), key.end(), '_', '-');
    if (given.count(key)) continue;
    if (boolean_flags().count(key)) {
      if (value == "true" || value == "1") extra.push_back("--" + key);
      continue;
    }
    extra.push_back("--" + key);
    extra.push_back(value);
  }
  // Insert after the subcommand so the flags bind to it.
  const std::size_t at = args.size() >= 2 ? 2 : args.size();
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), extra.begin(), extra.end());
  return args;
}

inline void echo_config(std::ostream& err, const CLI::App& sub) {
  err << "# " << sub.get_name() << " resolved config\n";
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    std::string value;
    if (opt->count()) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
    }
    err << name << '=' << value << '\n';
  }
}

struct InputSentence {
  std::string id;
  std::vector<std::string> words;
};

// One sentence per line, tokens separated by spaces, optionally preceded by
// "id<TAB>". Without an id the 0-based line index is used.
inline std::vector<InputSentence> read_sentences(std::istream& in) {
  std::vector<InputSentence> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    InputSentence s;
    const auto tab = line.find('\t');
    if (tab != std::string::npos) {
      s.id = line.substr(0, tab);
      line = line.substr(tab + 1);
    } else {
      s.id = std::to_string(out.size());
    }
    s.words = split(line, ' ');
    out.push_back(std::move(s));
  }
  return out;
}

inline std::string fallback_tree(const std::vector<std::string>& words) {
  std::string s = "(TOP";
  for (const auto& w : words) s += " (XX " + w + ")";
  return s + ")";
}

inline std::map<std::string, VectorSource> load_vectors(const std::vector<std::string>& entries) {
  std::map<std::string, VectorSource> out;
  for (const auto& entry : entries) {
    auto [lang, path] = lang_path(entry);
    out[lang] = VectorSource::load(path);
  }
  return out;
}

inline const VectorSource* vectors_for(const std::map<std::string, VectorSource>& v, const std::string& lang) {
  if (auto it = v.find(lang); it != v.end()) return &it->second;
  if (auto it = v.find(""); it != v.end()) return &it->second;
  return nullptr;
}

// Shared by parse and ensemble: averages the charts of all models.
inline int decode_stream(std::vector<Parser>& models, const std::string& lang, const VectorSource* vectors,
                         std::istream& in, std::ostream& out, std::ostream& err) {
  const LabelVocab& labels = models.front().head(lang).labels;
  for (auto& m : models)
    if (!(m.head(lang).labels == labels))
      throw FormatError("VocabMismatch", "ensemble members disagree on the label set for '" + lang + "'");
  for (const auto& s : read_sentences(in)) {
    try {
      if (s.words.empty()) throw Error("EmptySentence", "no tokens");
      std::vector<ScoreChart> charts;
      for (auto& m : models) {
        const auto ext = m.external_vectors(s.id, s.words, vectors);
        charts.push_back(m.chart(s.words, lang, ext ? &*ext : nullptr));
      }
      const ScoreChart chart = charts.size() == 1 ? charts.front() : ensemble_chart(charts);
      out << serialize(models.front().decode(chart, lang, make_leaves(s.words))) << '\n';
    } catch (const Error& e) {
      err << "warning: sentence " << s.id << ": " << e.what() << "; emitting flat tree\n";
      out << fallback_tree(s.words) << '\n';
    }
  }
  return kOk;
}

inline std::vector<Tree> read_trees(const std::string& path) {
  std::vector<Tree> out;
  for (auto& [id, t] : read_treebank(path).entries) out.push_back(std::move(t));
  return out;
}

}  // namespace detail

inline int run(std::vector<std::string> args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Span-based constituency parser"};
  app.require_subcommand(1);
  std::string config_path;
  std::uint64_t seed = 1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value file; command-line flags win");
    sub->add_option("--seed", seed, "random seed")->capture_default_str();
  };

  // train
  TrainConfig tc;
  std::vector<std::string> train_args, dev_args, vector_args, dev_vector_args;
  std::string mode = "scratch", schedule = "mono", ckpt_out, log_path, subword = "last";
  double target_f1 = 101.0;
  auto* train = app.add_subcommand("train", "train a parser and write a checkpoint");
  add_common(train);
  train->add_option("--train", train_args, "training treebank as lang=path (repeatable)")->required();
  train->add_option("--dev", dev_args, "dev treebank as lang=path (repeatable)");
  train->add_option("--vectors", vector_args, "vectors for training sentences, [lang=]path");
  train->add_option("--dev-vectors", dev_vector_args, "vectors for dev sentences, [lang=]path");
  train->add_option("--mode", mode, "scratch|static|context")->capture_default_str();
  train->add_option("--schedule", schedule, "mono|joint|paired")->capture_default_str();
  train->add_option("--out", ckpt_out, "checkpoint path")->required();
  train->add_option("--log", log_path, "training log path (default: stderr)");
  train->add_option("--batch-size", tc.batch_size, "0 picks the schedule default")->capture_default_str();
  train->add_option("--lr", tc.lr, "0 picks the mode default")->capture_default_str();
  train->add_option("--epochs", tc.epochs)->capture_default_str();
  train->add_option("--warmup", tc.warmup_steps, "0 picks the mode default")->capture_default_str();
  train->add_option("--eval-interval", tc.eval_interval, "steps; 0 means once per epoch")->capture_default_str();
  train->add_option("--sampling-exponent", tc.sampling_exponent)->capture_default_str();
  train->add_option("--clip-norm", tc.clip_norm)->capture_default_str();
  train->add_option("--target-f1", target_f1, "stop once mean dev F1 reaches this")->capture_default_str();
  train->add_option("--layers", tc.model.encoder.num_layers)->capture_default_str();
  train->add_option("--d-model", tc.model.encoder.d_model)->capture_default_str();
  train->add_option("--heads", tc.model.encoder.num_heads)->capture_default_str();
  train->add_option("--d-ff", tc.model.encoder.d_ff)->capture_default_str();
  train->add_option("--d-hidden", tc.model.d_hidden)->capture_default_str();
  train->add_option("--dropout", tc.model.encoder.dropout)->capture_default_str();
  train->add_option("--max-len", tc.model.encoder.max_len)->capture_default_str();
  train->add_option("--subword", subword, "last|first")->capture_default_str();
  train->add_flag("--lowercase", tc.model.encoder.lowercase);

  // parse / ensemble
  std::string model_path, models_list, lang;
  std::vector<std::string> decode_vectors;
  auto* parse = app.add_subcommand("parse", "parse tokenized sentences from stdin");
  add_common(parse);
  parse->add_option("--model", model_path)->required();
  parse->add_option("--lang", lang)->required();
  parse->add_option("--vectors", decode_vectors, "[lang=]path");
  auto* ensemble = app.add_subcommand("ensemble", "parse with the averaged charts of several models");
  add_common(ensemble);
  ensemble->add_option("--models", models_list, "comma-separated checkpoints")->required();
  ensemble->add_option("--lang", lang)->required();
  ensemble->add_option("--vectors", decode_vectors, "[lang=]path");

  // evaluate / significance
  std::string gold_path, pred_path, pred_b_path, ignore_labels = "TOP,ROOT,VROOT,S1";
  std::size_t resamples = 10000;
  auto* evaluate = app.add_subcommand("evaluate", "labeled bracket precision, recall and F1");
  add_common(evaluate);
  evaluate->add_option("gold", gold_path)->required();
  evaluate->add_option("pred", pred_path)->required();
  evaluate->add_option("--ignore-labels", ignore_labels)->capture_default_str();
  auto* significance = app.add_subcommand("significance", "paired bootstrap test of system A over B");
  add_common(significance);
  significance->add_option("gold", gold_path)->required();
  significance->add_option("a", pred_path)->required();
  significance->add_option("b", pred_b_path)->required();
  significance->add_option("--resamples", resamples)->capture_default_str();
  significance->add_option("--ignore-labels", ignore_labels)->capture_default_str();

  // gradcheck / inspect-vectors
  std::size_t draws = 50;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  add_common(gradcheck);
  gradcheck->add_option("--draws", draws)->capture_default_str();
  std::string vectors_path;
  auto* inspect = app.add_subcommand("inspect-vectors", "validate a CTXV1 or text vector file");
  add_common(inspect);
  inspect->add_option("path", vectors_path)->required();

  try {
    args = detail::apply_config_file(std::move(args));
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kFormat;
  }

  CLI::App* sub = app.get_subcommands().front();
  detail::echo_config(err, *sub);

  try {
    if (sub == train) {
      tc.seed = seed;
      tc.target_dev_f1 = target_f1;
      tc.schedule = parse_schedule(schedule);
      tc.model.encoder.mode = parse_encoder_mode(mode);
      if (subword != "last" && subword != "first") throw Error("InvalidConfig", "--subword must be last or first");
      tc.model.encoder.subword_pick = subword == "first" ? SubwordPick::first : SubwordPick::last;
      const auto train_vectors = detail::load_vectors(vector_args);
      const auto dev_vectors = detail::load_vectors(dev_vector_args);
      std::map<std::string, std::string> dev_paths;
      for (const auto& s : dev_args) dev_paths.insert(detail::lang_path(s));
      std::vector<LanguageData> langs;
      for (const auto& entry : train_args) {
        auto [code, path] = detail::lang_path(entry);
        if (code.empty()) throw Error("InvalidConfig", "--train expects lang=path, got '" + entry + "'");
        LanguageData d;
        d.code = code;
        d.train = read_treebank(path, code);
        if (auto it = dev_paths.find(code); it != dev_paths.end()) d.dev = read_treebank(it->second, code);
        if (const auto* v = detail::vectors_for(train_vectors, code)) d.train_vectors = *v;
        if (const auto* v = detail::vectors_for(dev_vectors, code)) d.dev_vectors = *v;
        langs.push_back(std::move(d));
      }
      if (tc.model.encoder.mode != EncoderMode::scratch) {
        if (langs.empty() || langs.front().train_vectors.empty())
          throw Error("MissingVectors", "--mode " + mode + " needs --vectors");
        tc.model.encoder.d_ext = langs.front().train_vectors.dim();
      }
      std::ofstream log_file;
      std::ostream* log = &err;
      if (!log_path.empty()) {
        log_file.open(log_path);
        if (!log_file) throw FormatError("IoError", "cannot write " + log_path);
        log = &log_file;
      }
      TrainResult r = spanparse::train(tc, langs, log);
      save_checkpoint(ckpt_out, r.model);
      err << "trained " << r.steps << " steps, best mean dev F1 " << detail::fmt("%.2f", r.best_dev_f1) << ", wrote "
          << ckpt_out << '\n';
      return kOk;
    }
    if (sub == parse || sub == ensemble) {
      std::vector<Parser> models;
      if (sub == parse) {
        models.push_back(load_checkpoint(model_path));
      } else {
        for (const auto& p : detail::split(models_list, ',')) models.push_back(load_checkpoint(p));
        if (models.empty()) throw Error("EmptyEnsemble", "--models lists no checkpoints");
      }
      const auto vectors = detail::load_vectors(decode_vectors);
      return detail::decode_stream(models, lang, detail::vectors_for(vectors, lang), in, out, err);
    }
    std::set<std::string> ignore;
    for (const auto& l : detail::split(ignore_labels, ',')) ignore.insert(l);
    if (sub == evaluate) {
      const EvalReport r = labeled_prf(detail::read_trees(gold_path), detail::read_trees(pred_path), ignore);
      out << "P=" << detail::fmt("%.2f", r.precision) << " R=" << detail::fmt("%.2f", r.recall)
          << " F1=" << detail::fmt("%.2f", r.f1) << " exact=" << detail::fmt("%.2f", r.exact_match)
          << " n=" << r.sentences.size() << '\n';
      return kOk;
    }
    if (sub == significance) {
      const BootstrapResult r = bootstrap_significance(detail::read_trees(gold_path), detail::read_trees(pred_path),
                                                       detail::read_trees(pred_b_path), resamples, seed, ignore);
      out << "delta=" << detail::fmt("%+.2f", r.delta) << " p=" << detail::fmt("%.4f", r.p_value)
          << " resamples=" << r.resamples << '\n';
      return kOk;
    }
    if (sub == gradcheck) {
      auto results = gradcheck::check_ops(draws, seed);
      results.push_back(gradcheck::check_pipeline(draws, seed));
      bool ok = true;
      for (const auto& r : results) {
        ok = ok && r.passed();
        out << (r.passed() ? "ok   " : "FAIL ") << r.name << " max_rel_err=" << detail::fmt("%.3g", r.max_relative_error)
            << " draws=" << r.draws << " coords=" << r.coordinates << '\n';
      }
      return ok ? kOk : kNumeric;
    }
    if (sub == inspect) {
      const VectorSource v = VectorSource::load(vectors_path);
      if (v.context_vectors) {
        std::size_t subwords = 0, words = 0;
        for (const auto& rec : v.context_vectors->records) {
          validate_record(rec);
          subwords += rec.subwords.rows();
          words += rec.word_ends.size();
        }
        out << "format=CTXV1 dim=" << v.context_vectors->dim << " count=" << v.context_vectors->records.size()
            << " words=" << words << " subwords=" << subwords << '\n';
      } else {
        out << "format=text dim=" << v.static_vectors->dim << " count=" << v.static_vectors->table.size() << '\n';
      }
      return kOk;
    }
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kFormat;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

inline int run(int argc, const char* const* argv, std::istream& in = std::cin, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), in, out, err);
}

}  // namespace spanparse::cli
