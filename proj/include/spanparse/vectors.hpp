#pragma once

// External word vectors: static text-format tables and contextual subword
// records (CTXV1), plus the subword-to-word alignment.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "spanparse/autodiff.hpp"
#include "spanparse/binary_io.hpp"
#include "spanparse/error.hpp"

namespace spanparse {

// Greedy chunks of at most four characters; continuation chunks carry "##".
inline std::vector<std::string> toy_subword_tokenize(const std::string& word) {
  std::vector<std::string> pieces;
  for (std::size_t i = 0; i < word.size(); i += 4) {
    std::string chunk = word.substr(i, 4);
    pieces.push_back(i == 0 ? chunk : "##" + chunk);
  }
  return pieces;
}

struct ContextVectorRecord {
  std::string id;
  ad::Tensor subwords;                    // (num_subwords x d_ext)
  std::vector<std::uint32_t> word_ends;   // index of each word's last piece

  std::size_t num_words() const noexcept { return word_ends.size(); }
  std::size_t num_subwords() const noexcept { return subwords.rank() == 2 ? subwords.shape[0] : 0; }
  std::size_t dim() const noexcept { return subwords.rank() == 2 ? subwords.shape[1] : 0; }
};

inline void validate_record(const ContextVectorRecord& r) {
  if (r.word_ends.empty()) throw FormatError("WordCountMismatch", "record '" + r.id + "' has no words");
  for (std::size_t w = 0; w < r.word_ends.size(); ++w) {
    if (r.word_ends[w] >= r.num_subwords() || (w > 0 && r.word_ends[w] <= r.word_ends[w - 1]))
      throw FormatError("AlignmentOutOfRange",
                        "record '" + r.id + "' word " + std::to_string(w) + " ends at piece " +
                            std::to_string(r.word_ends[w]));
  }
  if (r.word_ends.back() + 1 != r.num_subwords())
    throw FormatError("AlignmentOutOfRange", "record '" + r.id + "' last word does not end at the last piece");
}

enum class SubwordPick { last, first };

// One row per word: the vector of its last (or first) subword piece.
inline ad::Tensor align_subwords(const ContextVectorRecord& r, SubwordPick pick = SubwordPick::last,
                                 std::size_t expected_words = 0) {
  validate_record(r);
  if (expected_words && expected_words != r.num_words())
    throw FormatError("WordCountMismatch", "record '" + r.id + "' has " + std::to_string(r.num_words()) +
                                               " words, sentence has " + std::to_string(expected_words));
  const std::size_t d = r.dim();
  ad::Tensor out({r.num_words(), d});
  for (std::size_t w = 0; w < r.num_words(); ++w) {
    std::size_t piece = r.word_ends[w];
    if (pick == SubwordPick::first) piece = w == 0 ? 0 : r.word_ends[w - 1] + 1;
    std::copy_n(&r.subwords.data[piece * d], d, &out.data[w * d]);
  }
  return out;
}

inline ad::Tensor align_last_subword(const ContextVectorRecord& r, std::size_t expected_words = 0) {
  return align_subwords(r, SubwordPick::last, expected_words);
}

struct ContextVectorFile {
  std::uint32_t version = 1;
  std::uint32_t dim = 0;
  std::vector<ContextVectorRecord> records;

  const ContextVectorRecord* find(const std::string& id) const {
    if (index_.empty() && !records.empty())
      for (std::size_t i = 0; i < records.size(); ++i) index_.emplace(records[i].id, i);
    auto it = index_.find(id);
    return it == index_.end() ? nullptr : &records[it->second];
  }

 private:
  mutable std::unordered_map<std::string, std::size_t> index_;
};

inline constexpr std::string_view kCtxMagic = "CTXV1";

inline void write_ctxv1(std::ostream& out, const ContextVectorFile& f) {
  io::write_magic(out, kCtxMagic);
  io::write_le<std::uint32_t>(out, f.version);
  io::write_le<std::uint32_t>(out, f.dim);
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(f.records.size()));
  for (const auto& r : f.records) {
    if (r.dim() != f.dim) throw ShapeMismatch("write_ctxv1", std::to_string(r.dim()), std::to_string(f.dim));
    io::write_le<std::uint16_t>(out, static_cast<std::uint16_t>(r.id.size()));
    out.write(r.id.data(), static_cast<std::streamsize>(r.id.size()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.num_subwords()));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.num_words()));
    for (auto e : r.word_ends) io::write_le<std::uint32_t>(out, e);
    for (double v : r.subwords.data) io::write_f32(out, static_cast<float>(v));
  }
}

// Reads and fully validates a CTXV1 stream.
inline ContextVectorFile read_ctxv1(std::istream& in) {
  io::expect_magic(in, kCtxMagic);
  ContextVectorFile f;
  f.version = io::read_le<std::uint32_t>(in, "version");
  if (f.version != 1) throw FormatError("UnsupportedVersion", "CTXV1 version " + std::to_string(f.version));
  f.dim = io::read_le<std::uint32_t>(in, "d_ext");
  const auto count = io::read_le<std::uint32_t>(in, "record count");
  f.records.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    ContextVectorRecord r;
    r.id = io::read_bytes(in, io::read_le<std::uint16_t>(in, "id length"), "id");
    const auto ns = io::read_le<std::uint32_t>(in, "num_subwords");
    const auto nw = io::read_le<std::uint32_t>(in, "num_words");
    r.word_ends.resize(nw);
    for (auto& e : r.word_ends) e = io::read_le<std::uint32_t>(in, "word_end_indices");
    r.subwords = ad::Tensor({ns, f.dim});
    for (double& v : r.subwords.data) v = io::read_f32(in, "subword_matrix");
    validate_record(r);
    f.records.push_back(std::move(r));
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw FormatError("TrailingBytes", "data after the last CTXV1 record");
  return f;
}

inline ContextVectorFile read_ctxv1(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("IoError", "cannot open " + path);
  return read_ctxv1(in);
}

// fastText-style text vectors: optional "COUNT DIM" header, then
// "token v1 ... vD" lines.
struct StaticVectors {
  std::size_t dim = 0;
  std::unordered_map<std::string, std::vector<double>> table;

  const std::vector<double>* find(const std::string& w) const {
    auto it = table.find(w);
    return it == table.end() ? nullptr : &it->second;
  }

  // (n x dim) lookup; unknown words map to zero rows.
  ad::Tensor lookup(const std::vector<std::string>& words) const {
    ad::Tensor out({words.size(), dim});
    for (std::size_t i = 0; i < words.size(); ++i)
      if (const auto* v = find(words[i])) std::copy(v->begin(), v->end(), &out.data[i * dim]);
    return out;
  }
};

inline StaticVectors read_static_vectors(std::istream& in) {
  StaticVectors sv;
  std::string line;
  std::size_t lineno = 0;
  std::size_t declared = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<std::string> fields;
    for (std::string tok; ls >> tok;) fields.push_back(tok);
    if (lineno == 1 && fields.size() == 2 && fields[0].find_first_not_of("0123456789") == std::string::npos &&
        fields[1].find_first_not_of("0123456789") == std::string::npos) {
      declared = std::stoul(fields[0]);
      sv.dim = std::stoul(fields[1]);
      have_header = true;
      continue;
    }
    if (fields.size() < 2) throw FormatError("BadVectorLine", "expected token and values", lineno, 1);
    const std::size_t d = fields.size() - 1;
    if (sv.dim == 0) sv.dim = d;
    if (d != sv.dim)
      throw FormatError("DimensionMismatch", std::to_string(d) + " values, expected " + std::to_string(sv.dim), lineno, 1);
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) {
      try {
        std::size_t used = 0;
        v[i] = std::stod(fields[i + 1], &used);
        if (used != fields[i + 1].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw FormatError("BadVectorLine", "value '" + fields[i + 1] + "' is not a number", lineno, 1);
      }
    }
    sv.table[fields[0]] = std::move(v);
  }
  if (have_header && declared != sv.table.size())
    throw FormatError("CountMismatch", "header declares " + std::to_string(declared) + " vectors, found " +
                                           std::to_string(sv.table.size()));
  if (sv.dim == 0) throw FormatError("EmptyVectors", "no vectors found");
  return sv;
}

inline StaticVectors read_static_vectors(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("IoError", "cannot open " + path);
  return read_static_vectors(in);
}

}  // namespace spanparse
