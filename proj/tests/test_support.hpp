#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "spanparse/treebank.hpp"
#include "spanparse/vectors.hpp"

namespace spanparse::testing {

inline std::string data_path(const std::string& name) { return std::string(SPANPARSE_TEST_DATA) + "/" + name; }

inline std::filesystem::path scratch_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("spanparse_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Synthetic CTXV1 data for a treebank: each sentence is split with the toy
// subword scheme and every piece gets a vector derived from a hash of its
// text, so equal pieces share vectors across sentences.
inline ContextVectorFile synthetic_context_vectors(const Treebank& tb, std::size_t dim) {
  ContextVectorFile f;
  f.dim = static_cast<std::uint32_t>(dim);
  for (const auto& [id, tree] : tb.entries) {
    ContextVectorRecord r;
    r.id = id;
    std::vector<std::string> pieces;
    for (const auto& w : words(tree)) {
      for (auto& p : toy_subword_tokenize(w)) pieces.push_back(std::move(p));
      r.word_ends.push_back(static_cast<std::uint32_t>(pieces.size() - 1));
    }
    r.subwords = ad::Tensor({pieces.size(), dim});
    for (std::size_t k = 0; k < pieces.size(); ++k) {
      std::mt19937_64 rng(std::hash<std::string>{}(pieces[k]));
      std::uniform_real_distribution<double> d(-1, 1);
      for (std::size_t c = 0; c < dim; ++c) r.subwords.data[k * dim + c] = static_cast<float>(d(rng));
    }
    f.records.push_back(std::move(r));
  }
  return f;
}

// Small phrase-structure grammar over a shared lexicon. `rename` maps the
// phrasal categories S, NP, VP, PP to a language's own label names, so two
// languages share words and structure but not label inventories.
class ToyGrammar {
 public:
  explicit ToyGrammar(std::map<std::string, std::string> rename = {}) : rename_(std::move(rename)) {}

  Tree sentence(std::mt19937_64& rng) const {
    std::vector<Tree> kids{np(rng), vp(rng)};
    return node("S", std::move(kids));
  }

  Treebank treebank(const std::string& lang, std::size_t count, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    Treebank tb;
    tb.language = lang;
    for (std::size_t k = 0; k < count; ++k) {
      Tree t = Tree::internal("TOP", {sentence(rng)});
      // Reparse so leaf positions are assigned.
      tb.entries.emplace_back(std::to_string(k), parse_bracketed(serialize(t)).front());
    }
    return tb;
  }

 private:
  Tree node(const std::string& cat, std::vector<Tree> kids) const {
    auto it = rename_.find(cat);
    return Tree::internal(it == rename_.end() ? cat : it->second, std::move(kids));
  }
  static Tree pre(const std::string& tag, const std::vector<std::string>& words, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
    return Tree::leaf(0, words[pick(rng)], tag);
  }
  Tree np(std::mt19937_64& rng) const {
    static const std::vector<std::string> dt{"the", "a"}, nn{"cat", "dog", "bird", "man", "book"},
        jj{"old", "big", "red"}, nnp{"mary", "john", "paris"};
    std::uniform_int_distribution<int> shape(0, 2);
    switch (shape(rng)) {
      case 0: return node("NP", {pre("DT", dt, rng), pre("NN", nn, rng)});
      case 1: return node("NP", {pre("DT", dt, rng), pre("JJ", jj, rng), pre("NN", nn, rng)});
      default: return node("NP", {pre("NNP", nnp, rng)});
    }
  }
  Tree pp(std::mt19937_64& rng) const {
    static const std::vector<std::string> in{"in", "on", "with"};
    return node("PP", {pre("IN", in, rng), np(rng)});
  }
  Tree vp(std::mt19937_64& rng) const {
    static const std::vector<std::string> vbd{"saw", "liked", "sat", "ran", "took"};
    std::uniform_int_distribution<int> shape(0, 2);
    switch (shape(rng)) {
      case 0: return node("VP", {pre("VBD", vbd, rng)});
      case 1: return node("VP", {pre("VBD", vbd, rng), np(rng)});
      default: return node("VP", {pre("VBD", vbd, rng), np(rng), pp(rng)});
    }
  }

  std::map<std::string, std::string> rename_;
};

}  // namespace spanparse::testing
