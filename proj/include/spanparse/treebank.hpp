#pragma once

// Bracketed constituency trees: reading, writing, unary collapsing and the
// conversion between nested trees and labeled span sets.

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "spanparse/error.hpp"

namespace spanparse {

// Labels are plain strings. The empty string is the reserved non-constituent
// label; composite labels produced by unary collapsing join atoms with "::".
using Label = std::string;

inline const Label kEmptyLabel{};
inline constexpr std::string_view kUnarySeparator = "::";

inline bool is_empty_label(const Label& l) noexcept { return l.empty(); }

// A node is a leaf (preterminal: POS tag plus word) when it has no children.
struct Tree {
  Label label;  // phrase label, or POS tag for leaves
  std::vector<Tree> children;
  std::string word;
  std::size_t position = 0;  // leaf index, leaves only

  static Tree leaf(std::size_t position, std::string word, std::string tag) {
    Tree t;
    t.label = std::move(tag);
    t.word = std::move(word);
    t.position = position;
    return t;
  }
  static Tree internal(Label label, std::vector<Tree> children) {
    Tree t;
    t.label = std::move(label);
    t.children = std::move(children);
    return t;
  }

  bool is_leaf() const noexcept { return children.empty(); }

  friend bool operator==(const Tree&, const Tree&) = default;
};

struct LabeledSpan {
  std::size_t start = 0;
  std::size_t end = 0;
  Label label;

  friend auto operator<=>(const LabeledSpan&, const LabeledSpan&) = default;
};

struct SpanSet {
  std::vector<LabeledSpan> spans;
  std::size_t length = 0;
};

struct Treebank {
  std::string language;
  std::vector<std::pair<std::string, Tree>> entries;

  std::size_t size() const noexcept { return entries.size(); }
};

inline void collect_leaves(const Tree& t, std::vector<const Tree*>& out) {
  if (t.is_leaf()) {
    out.push_back(&t);
    return;
  }
  for (const Tree& c : t.children) collect_leaves(c, out);
}

inline std::vector<const Tree*> leaves(const Tree& t) {
  std::vector<const Tree*> out;
  collect_leaves(t, out);
  return out;
}

inline std::vector<std::string> words(const Tree& t) {
  std::vector<std::string> w;
  for (const Tree* l : leaves(t)) w.push_back(l->word);
  return w;
}

inline std::size_t leaf_count(const Tree& t) {
  if (t.is_leaf()) return 1;
  std::size_t n = 0;
  for (const Tree& c : t.children) n += leaf_count(c);
  return n;
}

namespace detail {

inline bool is_bracket_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Strips SPMRL feature decorations such as "NP##case=nom##".
inline std::string strip_decorations(std::string label) {
  if (auto p = label.find("##"); p != std::string::npos && p > 0) label.erase(p);
  return label;
}

class BracketReader {
 public:
  explicit BracketReader(std::string_view text) : text_(text) {}

  std::vector<Tree> read_all() {
    std::vector<Tree> trees;
    skip_space();
    while (pos_ < text_.size()) {
      if (text_[pos_] != '(') fail("UnbalancedBrackets", "expected '(' at start of tree");
      Tree t = read_node(true);
      assign_positions(t);
      trees.push_back(std::move(t));
      skip_space();
    }
    return trees;
  }

 private:
  [[noreturn]] void fail(const char* code, const std::string& msg) const {
    throw FormatError(code, msg, line_, pos_ - line_start_ + 1);
  }

  void skip_space() {
    while (pos_ < text_.size() && is_bracket_space(text_[pos_])) {
      if (text_[pos_] == '\n') {
        ++line_;
        line_start_ = pos_ + 1;
      }
      ++pos_;
    }
  }

  std::string read_token() {
    const std::size_t begin = pos_;
    while (pos_ < text_.size() && !is_bracket_space(text_[pos_]) && text_[pos_] != '(' && text_[pos_] != ')')
      ++pos_;
    return std::string(text_.substr(begin, pos_ - begin));
  }

  // Called with pos_ at '('.
  Tree read_node(bool top) {
    ++pos_;
    skip_space();
    if (pos_ >= text_.size()) fail("UnbalancedBrackets", "input ends inside a tree");
    std::string label;
    if (text_[pos_] != '(' && text_[pos_] != ')') label = read_token();
    skip_space();
    if (pos_ >= text_.size()) fail("UnbalancedBrackets", "input ends inside a tree");
    if (text_[pos_] == ')') {
      fail("EmptyNode", "node '" + label + "' has no children");
    }
    if (text_[pos_] != '(') {
      // Preterminal: (TAG word)
      std::string word = read_token();
      skip_space();
      if (pos_ >= text_.size()) fail("UnbalancedBrackets", "input ends inside a tree");
      if (text_[pos_] == '(') fail("IllegalLabelCharacter", "word '" + word + "' followed by a subtree");
      if (text_[pos_] != ')') fail("IllegalLabelCharacter", "more than one token after tag '" + label + "'");
      ++pos_;
      if (label.empty()) fail("EmptyNode", "preterminal without a tag");
      if (top) return Tree::internal("TOP", {Tree::leaf(0, std::move(word), strip_decorations(label))});
      return Tree::leaf(0, std::move(word), strip_decorations(label));
    }
    std::vector<Tree> children;
    while (true) {
      skip_space();
      if (pos_ >= text_.size()) fail("UnbalancedBrackets", "input ends inside a tree");
      if (text_[pos_] == ')') {
        ++pos_;
        break;
      }
      if (text_[pos_] != '(') {
        fail("IllegalLabelCharacter", "bare token '" + read_token() + "' among subtrees");
      }
      children.push_back(read_node(false));
    }
    if (label.empty()) {
      if (!top) fail("EmptyNode", "unlabeled internal node");
      label = "TOP";
    }
    label = strip_decorations(std::move(label));
    if (label.empty()) fail("EmptyNode", "label empty after stripping decorations");
    if (label.find(kUnarySeparator) != std::string::npos)
      fail("IllegalLabelCharacter", "label '" + label + "' contains the reserved separator");
    return Tree::internal(std::move(label), std::move(children));
  }

  static void assign_positions(Tree& t) {
    std::size_t next = 0;
    assign_positions(t, next);
  }
  static void assign_positions(Tree& t, std::size_t& next) {
    if (t.is_leaf()) {
      t.position = next++;
      return;
    }
    for (Tree& c : t.children) assign_positions(c, next);
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
  std::size_t line_start_ = 0;
};

inline void serialize_into(const Tree& t, std::string& out) {
  out += '(';
  out += t.label;
  if (t.is_leaf()) {
    out += ' ';
    out += t.word;
  } else {
    for (const Tree& c : t.children) {
      out += ' ';
      serialize_into(c, out);
    }
  }
  out += ')';
}

inline std::vector<std::string> split_label(const Label& l) {
  std::vector<std::string> atoms;
  std::size_t begin = 0;
  while (true) {
    const auto p = l.find(kUnarySeparator, begin);
    atoms.push_back(l.substr(begin, p == std::string::npos ? std::string::npos : p - begin));
    if (p == std::string::npos) break;
    begin = p + kUnarySeparator.size();
  }
  return atoms;
}

}  // namespace detail

// Reads whitespace-separated bracketed trees. Leaf positions are assigned left
// to right; an unlabeled outer wrapper "( ... )" becomes "TOP".
inline std::vector<Tree> parse_bracketed(std::string_view text) {
  return detail::BracketReader(text).read_all();
}

inline std::vector<std::string> expand_label(const Label& l) { return detail::split_label(l); }

// Inverse of collapse_unaries: "A::B" becomes (A (B ...)).
inline Tree expand_unaries(const Tree& t) {
  if (t.is_leaf()) return t;
  std::vector<Tree> kids;
  kids.reserve(t.children.size());
  for (const Tree& c : t.children) kids.push_back(expand_unaries(c));
  const auto atoms = detail::split_label(t.label);
  Tree node = Tree::internal(atoms.back(), std::move(kids));
  for (std::size_t k = atoms.size() - 1; k-- > 0;) node = Tree::internal(atoms[k], {std::move(node)});
  return node;
}

// Merges chains of internal nodes with a single internal child into one node.
inline Tree collapse_unaries(const Tree& t) {
  if (t.is_leaf()) return t;
  Label label = t.label;
  const Tree* cur = &t;
  while (cur->children.size() == 1 && !cur->children[0].is_leaf()) {
    cur = &cur->children[0];
    label += kUnarySeparator;
    label += cur->label;
  }
  std::vector<Tree> kids;
  kids.reserve(cur->children.size());
  for (const Tree& c : cur->children) kids.push_back(collapse_unaries(c));
  return Tree::internal(std::move(label), std::move(kids));
}

// Single-line bracket string; composite labels are expanded first.
inline std::string serialize(const Tree& t) {
  std::string out;
  detail::serialize_into(expand_unaries(t), out);
  return out;
}

namespace detail {

inline std::size_t spans_of(const Tree& t, std::size_t start, std::vector<LabeledSpan>& out) {
  if (t.is_leaf()) return start + 1;
  const std::size_t slot = out.size();
  out.push_back({start, start, t.label});
  std::size_t end = start;
  for (const Tree& c : t.children) end = spans_of(c, end, out);
  out[slot].end = end;
  return end;
}

}  // namespace detail

// One span per internal node, preorder; preterminals are not spans. Pass a
// collapsed tree to get one label per span.
inline SpanSet tree_to_spans(const Tree& t) {
  SpanSet s;
  s.length = detail::spans_of(t, 0, s.spans);
  return s;
}

// Rebuilds the (collapsed) tree over the given leaves from nested spans.
// Empty-labeled spans are dropped; their children attach to the parent.
inline Tree spans_to_tree(const SpanSet& spans, const std::vector<Tree>& leaf_nodes) {
  const std::size_t n = leaf_nodes.size();
  if (spans.length != n)
    throw Error("LengthMismatch", "span set length " + std::to_string(spans.length) + " vs " +
                                      std::to_string(n) + " leaves");
  std::vector<LabeledSpan> kept;
  for (const LabeledSpan& s : spans.spans) {
    if (!(s.start < s.end && s.end <= n))
      throw Error("IndexOutOfRange", "span (" + std::to_string(s.start) + "," + std::to_string(s.end) + ")");
    if (!is_empty_label(s.label)) kept.push_back(s);
  }
  // Outer spans before inner ones; equal spans keep input order.
  std::stable_sort(kept.begin(), kept.end(), [](const LabeledSpan& a, const LabeledSpan& b) {
    return std::tie(a.start, b.end) < std::tie(b.start, a.end);
  });
  if (kept.empty() || kept[0].start != 0 || kept[0].end != n)
    throw Error("MissingRootSpan", "no non-empty span covers (0," + std::to_string(n) + ")");
  for (std::size_t a = 0; a < kept.size(); ++a)
    for (std::size_t b = a + 1; b < kept.size(); ++b) {
      const auto& x = kept[a];
      const auto& y = kept[b];
      if ((x.start < y.start && y.start < x.end && x.end < y.end) ||
          (y.start < x.start && x.start < y.end && y.end < x.end))
        throw Error("OverlappingSpans", "(" + std::to_string(x.start) + "," + std::to_string(x.end) + ") and (" +
                                            std::to_string(y.start) + "," + std::to_string(y.end) + ")");
    }
  std::size_t next = 0;
  // Builds the node for kept[idx]; consumes nested spans from `next`.
  auto build = [&](auto&& self, std::size_t idx) -> Tree {
    const LabeledSpan& me = kept[idx];
    Label label = me.label;
    std::vector<Tree> kids;
    std::size_t pos = me.start;
    while (next < kept.size() && kept[next].start == me.start && kept[next].end == me.end) {
      // Duplicate span: stack as a unary chain.
      label += kUnarySeparator;
      label += kept[next].label;
      ++next;
    }
    while (pos < me.end) {
      if (next < kept.size() && kept[next].start == pos && kept[next].end <= me.end) {
        const std::size_t child = next++;
        kids.push_back(self(self, child));
        pos = kept[child].end;
      } else {
        Tree leaf = leaf_nodes[pos];
        leaf.position = pos;
        kids.push_back(std::move(leaf));
        ++pos;
      }
    }
    return Tree::internal(std::move(label), std::move(kids));
  };
  next = 1;
  return build(build, 0);
}

// Leaves (word + tag) built from parallel token and tag lists.
inline std::vector<Tree> make_leaves(const std::vector<std::string>& words,
                                     const std::vector<std::string>& tags = {}) {
  std::vector<Tree> out;
  out.reserve(words.size());
  for (std::size_t i = 0; i < words.size(); ++i)
    out.push_back(Tree::leaf(i, words[i], i < tags.size() ? tags[i] : std::string("XX")));
  return out;
}

inline std::vector<Tree> leaf_copies(const Tree& t) {
  std::vector<Tree> out;
  for (const Tree* l : leaves(t)) out.push_back(*l);
  return out;
}

// One tree per line; sentence ids are the 0-based tree index.
inline Treebank read_treebank(const std::string& path, std::string language = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("IoError", "cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  Treebank tb;
  tb.language = std::move(language);
  auto trees = parse_bracketed(buf.str());
  tb.entries.reserve(trees.size());
  for (std::size_t i = 0; i < trees.size(); ++i) tb.entries.emplace_back(std::to_string(i), std::move(trees[i]));
  return tb;
}

inline void write_treebank(std::ostream& out, const Treebank& tb) {
  for (const auto& [id, t] : tb.entries) out << serialize(t) << '\n';
}

}  // namespace spanparse
