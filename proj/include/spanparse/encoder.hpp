#pragma once

// Sentence encoder: token vectors + learned positions, a stack of factored
// self-attention layers, and conversion of token outputs to fencepost rows.
//
// Every layer keeps two streams of width d_model/2: a content stream and a
// position stream. Attention logits add the content and position dot
// products; each stream then mixes its own values, so position information
// reaches the content stream only through the attention weights.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "spanparse/autodiff.hpp"
#include "spanparse/error.hpp"
#include "spanparse/vectors.hpp"

namespace spanparse {

enum class EncoderMode { scratch, static_vectors, context_vectors };

inline std::string to_string(EncoderMode m) {
  switch (m) {
    case EncoderMode::scratch: return "scratch";
    case EncoderMode::static_vectors: return "static";
    case EncoderMode::context_vectors: return "context";
  }
  return "scratch";
}

inline EncoderMode parse_encoder_mode(const std::string& s) {
  if (s == "scratch") return EncoderMode::scratch;
  if (s == "static" || s == "static_vectors") return EncoderMode::static_vectors;
  if (s == "context" || s == "context_vectors") return EncoderMode::context_vectors;
  throw Error("UnknownMode", "encoder mode '" + s + "'");
}

struct EncoderConfig {
  std::size_t num_layers = 2;
  std::size_t d_model = 1024;
  std::size_t num_heads = 8;
  std::size_t d_ff = 2048;
  double dropout = 0.2;
  EncoderMode mode = EncoderMode::scratch;
  std::size_t d_ext = 0;         // external vector width (static/context modes)
  bool word_embeddings = true;   // learned word table; summed with projected vectors outside scratch mode
  bool lowercase = false;
  SubwordPick subword_pick = SubwordPick::last;
  std::size_t max_len = 512;     // positions, including the two boundary tokens
  double layer_norm_eps = 1e-5;

  std::size_t half() const noexcept { return d_model / 2; }
  std::size_t head_dim() const noexcept { return half() / num_heads; }

  void validate() const {
    if (num_layers < 1) throw Error("InvalidConfig", "num_layers must be >= 1");
    if (d_model == 0 || d_model % 2) throw Error("InvalidConfig", "d_model must be even and positive");
    if (num_heads == 0 || half() % num_heads)
      throw Error("InvalidConfig", "num_heads must divide d_model/2");
    if (d_ff == 0) throw Error("InvalidConfig", "d_ff must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw Error("InvalidConfig", "dropout must be in [0,1)");
    if (mode != EncoderMode::scratch && d_ext == 0)
      throw Error("InvalidConfig", "d_ext must be set outside scratch mode");
    if (mode == EncoderMode::scratch && !word_embeddings)
      throw Error("InvalidConfig", "scratch mode needs word embeddings");
    if (max_len < 3) throw Error("InvalidConfig", "max_len must be >= 3");
  }
};

// Word vocabulary; id 0 is the unknown word.
class Vocabulary {
 public:
  static constexpr std::size_t kUnk = 0;

  Vocabulary() { add("<UNK>"); }

  std::size_t add(const std::string& w) {
    auto [it, inserted] = ids_.try_emplace(w, words_.size());
    if (inserted) words_.push_back(w);
    return it->second;
  }
  std::size_t id(const std::string& w) const {
    auto it = ids_.find(w);
    return it == ids_.end() ? kUnk : it->second;
  }
  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }

 private:
  std::unordered_map<std::string, std::size_t> ids_;
  std::vector<std::string> words_;
};

using Rng = std::mt19937_64;

namespace detail {

inline ad::Parameter uniform_param(ad::Shape shape, double bound, Rng& rng) {
  ad::Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : t.data) v = dist(rng);
  return ad::Parameter(std::move(t));
}

inline ad::Parameter xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return uniform_param({fan_in, fan_out}, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng);
}

inline ad::Parameter filled(ad::Shape shape, double v) { return ad::Parameter(ad::Tensor(std::move(shape), v)); }

}  // namespace detail

// Parameters for one stream (content or position) of one layer.
struct StreamBlock {
  ad::Parameter wq, wk, wv, wo;
  ad::Parameter attn_gain, attn_bias;
  ad::Parameter ff_w1, ff_b1, ff_w2, ff_b2;
  ad::Parameter ff_gain, ff_bias;

  StreamBlock() = default;
  StreamBlock(std::size_t d, std::size_t d_ff, Rng& rng)
      : wq(detail::xavier(d, d, rng)),
        wk(detail::xavier(d, d, rng)),
        wv(detail::xavier(d, d, rng)),
        wo(detail::xavier(d, d, rng)),
        attn_gain(detail::filled({d}, 1.0)),
        attn_bias(detail::filled({d}, 0.0)),
        ff_w1(detail::xavier(d, d_ff, rng)),
        ff_b1(detail::filled({d_ff}, 0.0)),
        ff_w2(detail::xavier(d_ff, d, rng)),
        ff_b2(detail::filled({d}, 0.0)),
        ff_gain(detail::filled({d}, 1.0)),
        ff_bias(detail::filled({d}, 0.0)) {}

  template <typename F>
  void for_each_parameter(const std::string& prefix, F&& f) {
    f(prefix + "wq", wq);
    f(prefix + "wk", wk);
    f(prefix + "wv", wv);
    f(prefix + "wo", wo);
    f(prefix + "attn_gain", attn_gain);
    f(prefix + "attn_bias", attn_bias);
    f(prefix + "ff_w1", ff_w1);
    f(prefix + "ff_b1", ff_b1);
    f(prefix + "ff_w2", ff_w2);
    f(prefix + "ff_b2", ff_b2);
    f(prefix + "ff_gain", ff_gain);
    f(prefix + "ff_bias", ff_bias);
  }
};

struct EncoderLayer {
  StreamBlock content;
  StreamBlock position;
};

// Trainable projection of external vectors: right-multiplication, no bias.
inline ad::Var project(ad::Tape& tape, const ad::Tensor& external, ad::Parameter& w_proj) {
  const ad::Tensor& w = w_proj.value;
  if (external.rank() != 2 || w.rank() != 2 || external.shape[1] != w.shape[0])
    throw ShapeMismatch("project", ad::shape_str(external.shape), "(n, " + std::to_string(w.shape[0]) + ")");
  return ad::matmul(tape.constant(external), tape.param(w_proj));
}

class Encoder {
 public:
  Encoder() = default;
  Encoder(EncoderConfig cfg, std::size_t vocab_size, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t h = cfg_.half();
    const double emb_bound = std::sqrt(3.0 / static_cast<double>(h));
    if (cfg_.word_embeddings) word_embedding_ = detail::uniform_param({vocab_size, h}, emb_bound, rng);
    if (cfg_.mode != EncoderMode::scratch) projection_ = detail::xavier(cfg_.d_ext, h, rng);
    boundary_ = detail::uniform_param({2, h}, emb_bound, rng);
    position_embedding_ = detail::uniform_param({cfg_.max_len, h}, emb_bound, rng);
    layers_.reserve(cfg_.num_layers);
    for (std::size_t l = 0; l < cfg_.num_layers; ++l)
      layers_.push_back({StreamBlock(h, cfg_.d_ff, rng), StreamBlock(h, cfg_.d_ff, rng)});
  }

  const EncoderConfig& config() const noexcept { return cfg_; }

  template <typename F>
  void for_each_parameter(F&& f) {
    if (cfg_.word_embeddings) f("encoder.word_embedding", word_embedding_);
    if (cfg_.mode != EncoderMode::scratch) f("encoder.projection", projection_);
    f("encoder.boundary", boundary_);
    f("encoder.position_embedding", position_embedding_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string p = "encoder.layer" + std::to_string(l) + ".";
      layers_[l].content.for_each_parameter(p + "content.", f);
      layers_[l].position.for_each_parameter(p + "position.", f);
    }
  }

  // Every parameter that belongs to the position stream.
  template <typename F>
  void for_each_position_parameter(F&& f) {
    f(position_embedding_);
    for (auto& layer : layers_)
      layer.position.for_each_parameter("", [&](const std::string&, ad::Parameter& p) { f(p); });
  }

  // Token outputs, (n+2) x d_model: START, the n words, STOP. Each row is
  // [content stream ; position stream]. A non-null rng enables dropout.
  ad::Var encode_tokens(ad::Tape& tape, const std::vector<std::size_t>& word_ids, const ad::Tensor* external,
                        Rng* dropout_rng = nullptr) {
    const std::size_t n = cfg_.mode == EncoderMode::scratch || !external ? word_ids.size() : external->shape[0];
    if (n == 0) throw Error("EmptySentence", "cannot encode an empty sentence");
    if (n + 2 > cfg_.max_len)
      throw Error("SentenceTooLong", std::to_string(n) + " words exceed max_len " + std::to_string(cfg_.max_len));
    if (cfg_.mode != EncoderMode::scratch && !external) throw Error("MissingVectors", "external vectors required");
    if (cfg_.word_embeddings && word_ids.size() != n)
      throw Error("WordCountMismatch", std::to_string(word_ids.size()) + " ids vs " + std::to_string(n) + " vectors");

    ad::Var words;
    if (cfg_.mode != EncoderMode::scratch) words = project(tape, *external, projection_);
    if (cfg_.word_embeddings) {
      ad::Var emb = ad::embedding_lookup(tape.param(word_embedding_), word_ids);
      words = cfg_.mode == EncoderMode::scratch ? emb : ad::add(words, emb);
    }
    ad::Var boundary = tape.param(boundary_);
    ad::Var content = ad::concat_rows({ad::gather_rows(boundary, {0}), words, ad::gather_rows(boundary, {1})});
    std::vector<std::size_t> positions(n + 2);
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    ad::Var position = ad::embedding_lookup(tape.param(position_embedding_), positions);
    content = drop(content, dropout_rng);
    position = drop(position, dropout_rng);

    for (auto& layer : layers_) {
      auto [c_attn, p_attn] = attention(tape, layer, content, position, dropout_rng);
      content = residual_norm(tape, content, c_attn, layer.content.attn_gain, layer.content.attn_bias, dropout_rng);
      position = residual_norm(tape, position, p_attn, layer.position.attn_gain, layer.position.attn_bias, dropout_rng);
      content = residual_norm(tape, content, feed_forward(tape, layer.content, content, dropout_rng),
                              layer.content.ff_gain, layer.content.ff_bias, dropout_rng);
      position = residual_norm(tape, position, feed_forward(tape, layer.position, position, dropout_rng),
                               layer.position.ff_gain, layer.position.ff_bias, dropout_rng);
    }
    return ad::concat({content, position});
  }

  // Fencepost rows from token outputs: row k joins the forward half of token
  // k with the backward half of token k+1 (token 0 is START). The forward
  // half is the even coordinates of a token output, the backward half the odd
  // ones, so both halves draw on both streams.
  ad::Var fenceposts(ad::Var tokens) const {
    const std::size_t n2 = tokens.value().rows();
    const std::size_t d = cfg_.d_model;
    std::vector<std::size_t> lower(n2 - 1), upper(n2 - 1), evens, odds;
    for (std::size_t k = 0; k + 1 < n2; ++k) {
      lower[k] = k;
      upper[k] = k + 1;
    }
    for (std::size_t c = 0; c < d; ++c) (c % 2 ? odds : evens).push_back(c);
    ad::Var fwd = ad::select_cols(ad::gather_rows(tokens, lower), evens);
    ad::Var bwd = ad::select_cols(ad::gather_rows(tokens, upper), odds);
    return ad::concat({fwd, bwd});
  }

  // Boundary representation, (n+1) x d_model.
  ad::Var encode(ad::Tape& tape, const std::vector<std::size_t>& word_ids, const ad::Tensor* external,
                 Rng* dropout_rng = nullptr) {
    return fenceposts(encode_tokens(tape, word_ids, external, dropout_rng));
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for_each_parameter([&](const std::string&, ad::Parameter& p) { n += p.value.size(); });
    return n;
  }

 private:
  ad::Var drop(ad::Var x, Rng* rng) const {
    if (!rng || cfg_.dropout <= 0.0) return x;
    ad::Tensor mask(x.shape());
    std::bernoulli_distribution keep(1.0 - cfg_.dropout);
    const double kept = 1.0 / (1.0 - cfg_.dropout);
    for (double& m : mask.data) m = keep(*rng) ? kept : 0.0;
    return ad::dropout(x, mask);
  }

  std::pair<ad::Var, ad::Var> attention(ad::Tape& tape, EncoderLayer& layer, ad::Var content, ad::Var position,
                                        Rng* rng) {
    const std::size_t heads = cfg_.num_heads, dk = cfg_.head_dim();
    const double inv_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(dk));
    StreamBlock& c = layer.content;
    StreamBlock& p = layer.position;
    ad::Var qc = ad::matmul(content, tape.param(c.wq));
    ad::Var kc = ad::matmul(content, tape.param(c.wk));
    ad::Var vc = ad::matmul(content, tape.param(c.wv));
    ad::Var qp = ad::matmul(position, tape.param(p.wq));
    ad::Var kp = ad::matmul(position, tape.param(p.wk));
    ad::Var vp = ad::matmul(position, tape.param(p.wv));
    std::vector<ad::Var> c_heads, p_heads;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * dk;
      ad::Var logits = ad::add(ad::matmul(ad::slice(qc, off, dk), ad::transpose(ad::slice(kc, off, dk))),
                               ad::matmul(ad::slice(qp, off, dk), ad::transpose(ad::slice(kp, off, dk))));
      ad::Var weights = drop(ad::softmax(ad::scale(logits, inv_scale)), rng);
      c_heads.push_back(ad::matmul(weights, ad::slice(vc, off, dk)));
      p_heads.push_back(ad::matmul(weights, ad::slice(vp, off, dk)));
    }
    return {ad::matmul(ad::concat(c_heads), tape.param(c.wo)), ad::matmul(ad::concat(p_heads), tape.param(p.wo))};
  }

  ad::Var feed_forward(ad::Tape& tape, StreamBlock& b, ad::Var x, Rng* rng) {
    ad::Var hidden = ad::relu(ad::add(ad::matmul(x, tape.param(b.ff_w1)), tape.param(b.ff_b1)));
    return ad::add(ad::matmul(drop(hidden, rng), tape.param(b.ff_w2)), tape.param(b.ff_b2));
  }

  ad::Var residual_norm(ad::Tape& tape, ad::Var x, ad::Var update, ad::Parameter& gain, ad::Parameter& bias,
                        Rng* rng) {
    ad::Var y = ad::layer_norm(ad::add(x, drop(update, rng)), cfg_.layer_norm_eps);
    return ad::add(ad::mul(y, tape.param(gain)), tape.param(bias));
  }

  EncoderConfig cfg_;
  ad::Parameter word_embedding_;
  ad::Parameter projection_;
  ad::Parameter boundary_;
  ad::Parameter position_embedding_;
  std::vector<EncoderLayer> layers_;
};

}  // namespace spanparse
