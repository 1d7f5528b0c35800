#pragma once

// A parser: one shared encoder, one span classifier head per language, and
// the vocabularies they need. Checkpoints use the SPCK1 binary format.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spanparse/autodiff.hpp"
#include "spanparse/binary_io.hpp"
#include "spanparse/decoder.hpp"
#include "spanparse/encoder.hpp"
#include "spanparse/scorer.hpp"
#include "spanparse/treebank.hpp"
#include "spanparse/vectors.hpp"

namespace spanparse {

struct ModelConfig {
  EncoderConfig encoder;
  std::size_t d_hidden = 250;
};

// External vectors for one language: a static table or a CTXV1 file.
struct VectorSource {
  std::optional<StaticVectors> static_vectors;
  std::optional<ContextVectorFile> context_vectors;

  bool empty() const noexcept { return !static_vectors && !context_vectors; }

  std::size_t dim() const {
    if (static_vectors) return static_vectors->dim;
    if (context_vectors) return context_vectors->dim;
    return 0;
  }

  static VectorSource load(const std::string& path) {
    VectorSource vs;
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw FormatError("IoError", "cannot open " + path);
    char head[6] = {};
    probe.read(head, 6);
    probe.close();
    if (std::string(head, 6) == std::string("CTXV1\0", 6))
      vs.context_vectors = read_ctxv1(path);
    else
      vs.static_vectors = read_static_vectors(path);
    return vs;
  }
};

class Parser {
 public:
  Parser() = default;

  // Fresh parameters for the given vocabularies.
  Parser(ModelConfig cfg, Vocabulary words, const std::map<std::string, LabelVocab>& label_vocabs, std::uint64_t seed)
      : cfg_(std::move(cfg)), words_(std::move(words)) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5eedu};
    Rng rng(seq);
    encoder_ = Encoder(cfg_.encoder, words_.size(), rng);
    for (const auto& [lang, vocab] : label_vocabs)
      heads_.emplace(lang, LanguageHead(lang, vocab, cfg_.encoder.d_model, cfg_.d_hidden, rng));
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const Vocabulary& words() const noexcept { return words_; }
  Encoder& encoder() noexcept { return encoder_; }
  std::map<std::string, LanguageHead>& heads() noexcept { return heads_; }
  const std::map<std::string, LanguageHead>& heads() const noexcept { return heads_; }

  LanguageHead& head(const std::string& lang) {
    auto it = heads_.find(lang);
    if (it == heads_.end()) throw Error("UnknownLanguage", "model has no head for '" + lang + "'");
    return it->second;
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    encoder_.for_each_parameter(f);
    for (auto& [lang, h] : heads_) h.for_each_parameter(f);
  }

  std::vector<ad::Parameter*> parameters() {
    std::vector<ad::Parameter*> out;
    for_each_parameter([&](const std::string&, ad::Parameter& p) { out.push_back(&p); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, ad::Parameter& p) { n += p.value.size(); });
    return n;
  }

  std::string normalize(const std::string& w) const {
    if (!cfg_.encoder.lowercase) return w;
    std::string s = w;
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
  }

  std::vector<std::size_t> word_ids(const std::vector<std::string>& sentence) const {
    std::vector<std::size_t> ids;
    ids.reserve(sentence.size());
    for (const auto& w : sentence) ids.push_back(words_.id(normalize(w)));
    return ids;
  }

  // External vectors for a sentence, or nullopt in scratch mode.
  std::optional<ad::Tensor> external_vectors(const std::string& sentence_id, const std::vector<std::string>& sentence,
                                             const VectorSource* source) const {
    const auto mode = cfg_.encoder.mode;
    if (mode == EncoderMode::scratch) return std::nullopt;
    if (!source || source->empty())
      throw Error("MissingVectors", "sentence '" + sentence_id + "' needs external vectors in " + to_string(mode) + " mode");
    ad::Tensor ext;
    if (mode == EncoderMode::static_vectors) {
      if (!source->static_vectors) throw Error("MissingVectors", "static mode needs a text vector file");
      ext = source->static_vectors->lookup(sentence);
    } else {
      if (!source->context_vectors) throw Error("MissingVectors", "context mode needs a CTXV1 file");
      const ContextVectorRecord* rec = source->context_vectors->find(sentence_id);
      if (!rec) throw Error("MissingVectors", "no CTXV1 record for sentence '" + sentence_id + "'");
      ext = align_subwords(*rec, cfg_.encoder.subword_pick, sentence.size());
    }
    if (ext.cols() != cfg_.encoder.d_ext)
      throw ShapeMismatch("external vectors", std::to_string(ext.cols()), std::to_string(cfg_.encoder.d_ext));
    return ext;
  }

  // Inference chart for one sentence.
  ScoreChart chart(const std::vector<std::string>& sentence, const std::string& lang, const ad::Tensor* external) {
    ad::Tape tape(false);
    ad::Var repr = encoder_.encode(tape, word_ids(sentence), external);
    ad::Var scores = score_spans(tape, repr, head(lang));
    return chart_from_scores(scores.value(), sentence.size());
  }

  Tree decode(const ScoreChart& chart, const std::string& lang, const std::vector<Tree>& leaf_nodes,
              const DecoderOptions& opts = {}) {
    return cky_decode(chart, head(lang).labels, opts).to_tree(leaf_nodes);
  }

 private:
  ModelConfig cfg_;
  Vocabulary words_;
  Encoder encoder_;
  std::map<std::string, LanguageHead> heads_;
};

// ---------------------------------------------------------------------------
// SPCK1 checkpoints

inline constexpr std::string_view kCheckpointMagic = "SPCK1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const ModelConfig& c) {
  const EncoderConfig& e = c.encoder;
  return {{"num_layers", e.num_layers},
          {"d_model", e.d_model},
          {"num_heads", e.num_heads},
          {"d_ff", e.d_ff},
          {"dropout", e.dropout},
          {"mode", to_string(e.mode)},
          {"d_ext", e.d_ext},
          {"word_embeddings", e.word_embeddings},
          {"lowercase", e.lowercase},
          {"subword_pick", e.subword_pick == SubwordPick::last ? "last" : "first"},
          {"max_len", e.max_len},
          {"layer_norm_eps", e.layer_norm_eps},
          {"d_hidden", c.d_hidden}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  EncoderConfig& e = c.encoder;
  e.num_layers = j.at("num_layers");
  e.d_model = j.at("d_model");
  e.num_heads = j.at("num_heads");
  e.d_ff = j.at("d_ff");
  e.dropout = j.at("dropout");
  e.mode = parse_encoder_mode(j.at("mode"));
  e.d_ext = j.at("d_ext");
  e.word_embeddings = j.at("word_embeddings");
  e.lowercase = j.at("lowercase");
  e.subword_pick = j.at("subword_pick") == "first" ? SubwordPick::first : SubwordPick::last;
  e.max_len = j.at("max_len");
  e.layer_norm_eps = j.at("layer_norm_eps");
  c.d_hidden = j.at("d_hidden");
  return c;
}

inline void save_checkpoint(std::ostream& out, Parser& model) {
  nlohmann::json meta;
  meta["config"] = config_to_json(model.config());
  meta["words"] = model.words().words();
  nlohmann::json labels = nlohmann::json::object();
  for (const auto& [lang, h] : model.heads()) labels[lang] = h.labels.labels();
  meta["labels"] = labels;
  const std::string blob = meta.dump();

  io::write_magic(out, kCheckpointMagic);
  io::write_le<std::uint32_t>(out, kCheckpointVersion);
  io::write_le<std::uint64_t>(out, blob.size());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  model.for_each_parameter([&](const std::string& name, ad::Parameter& p) {
    io::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t d : p.value.shape) io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double v : p.value.data) io::write_f32(out, static_cast<float>(v));
  });
}

inline void save_checkpoint(const std::string& path, Parser& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("IoError", "cannot write " + path);
  save_checkpoint(out, model);
  if (!out) throw FormatError("IoError", "write failed for " + path);
}

inline Parser load_checkpoint(std::istream& in) {
  io::expect_magic(in, kCheckpointMagic);
  const auto version = io::read_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw FormatError("UnsupportedVersion", "SPCK1 version " + std::to_string(version));
  const auto meta_len = io::read_le<std::uint64_t>(in, "metadata length");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_bytes(in, meta_len, "metadata"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("BadMetadata", e.what());
  }
  ModelConfig cfg;
  Vocabulary words;
  std::map<std::string, LabelVocab> label_vocabs;
  try {
    cfg = config_from_json(meta.at("config"));
    const auto word_list = meta.at("words").get<std::vector<std::string>>();
    for (std::size_t i = 1; i < word_list.size(); ++i) words.add(word_list[i]);
    for (const auto& [lang, labels] : meta.at("labels").items()) {
      const auto list = labels.get<std::vector<std::string>>();
      label_vocabs.emplace(lang, LabelVocab(std::vector<Label>(list.begin() + 1, list.end())));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("BadMetadata", e.what());
  }
  Parser model(cfg, std::move(words), label_vocabs, 0);
  std::map<std::string, ad::Parameter*> by_name;
  model.for_each_parameter([&](const std::string& name, ad::Parameter& p) { by_name.emplace(name, &p); });
  std::set<std::string> seen;
  while (in.peek() != std::char_traits<char>::eof()) {
    const std::string name = io::read_bytes(in, io::read_le<std::uint16_t>(in, "name length"), "name");
    const auto rank = io::read_le<std::uint8_t>(in, "rank");
    ad::Shape shape(rank);
    for (auto& d : shape) d = io::read_le<std::uint32_t>(in, "dims");
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("UnknownTensor", "checkpoint tensor '" + name + "'");
    if (it->second->value.shape != shape)
      throw FormatError("ShapeMismatch", "tensor '" + name + "' has shape " + ad::shape_str(shape) + ", expected " +
                                             ad::shape_str(it->second->value.shape));
    for (double& v : it->second->value.data) v = io::read_f32(in, "payload");
    seen.insert(name);
  }
  if (seen.size() != by_name.size()) throw FormatError("MissingTensor", "checkpoint lacks some parameters");
  return model;
}

inline Parser load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("IoError", "cannot open " + path);
  return load_checkpoint(in);
}

}  // namespace spanparse
