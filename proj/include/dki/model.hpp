#pragma once

// Frozen decoder-only transformer and the bank of small per-layer encoders
// that feed hidden-state corrections into it. Templated on the scalar type so
// gradient checks can run the full stack in double precision.

#include <cstdint>
#include <map>
#include <random>
#include <utility>

#include "dki/tensor.hpp"

namespace dki {

struct DecoderConfig {
  // Number of transformer blocks; layer indices run 0..n_layers-1 and the
  // hidden state o_l is block l's residual-stream output.
  int n_layers = 9;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 256;  // 4 * d_model
  int vocab_size = 261;
  int max_context = 256;
  double rope_base = 10000.0;
};

struct EncoderConfig {
  int n_blocks = 4;
  int d_enc = 32;
  int n_heads_enc = 2;
  int d_mlp_enc = 128;  // 4 * d_enc
  bool causal = true;   // encoder blocks mirror the decoder's causal masking
  double rope_base = 10000.0;
  std::vector<int> layer_subset = {3, 4, 5, 6, 7, 8};
};

template <typename T>
struct BlockT {
  TensorT<T> attn_norm_w;
  TensorT<T> wq, wk, wv, wo;
  TensorT<T> mlp_norm_w;
  TensorT<T> w_gate, w_up, w_down;

  void collect_params(std::vector<TensorT<T>>& out) const {
    out.push_back(attn_norm_w);
    out.push_back(wq);
    out.push_back(wk);
    out.push_back(wv);
    out.push_back(wo);
    out.push_back(mlp_norm_w);
    out.push_back(w_gate);
    out.push_back(w_up);
    out.push_back(w_down);
  }
};

template <typename T>
struct DecoderModelT {
  DecoderConfig cfg;
  TensorT<T> tok_embedding;  // (vocab x d_model); output head is tied to it
  std::vector<BlockT<T>> blocks;
  TensorT<T> final_norm_w;

  std::vector<TensorT<T>> params() const {
    std::vector<TensorT<T>> out;
    out.push_back(tok_embedding);
    for (const auto& b : blocks) b.collect_params(out);
    out.push_back(final_norm_w);
    return out;
  }

  void set_trainable(bool trainable) {
    for (auto& p : params()) p.set_requires_grad(trainable);
  }
};

template <typename T>
struct EncoderT {
  int layer = -1;
  TensorT<T> down_w;  // (d_model x d_enc)
  std::vector<BlockT<T>> blocks;
  TensorT<T> final_norm_w;
  TensorT<T> up_w;  // (d_enc x d_model), zero-initialized

  std::vector<TensorT<T>> params() const {
    std::vector<TensorT<T>> out;
    out.push_back(down_w);
    for (const auto& b : blocks) b.collect_params(out);
    out.push_back(final_norm_w);
    out.push_back(up_w);
    return out;
  }
};

template <typename T>
struct EncoderBankT {
  EncoderConfig cfg;
  TensorT<T> tok_embedding;  // shared with the decoder, frozen
  std::map<int, EncoderT<T>> encoders;

  bool has_layer(int layer) const { return encoders.count(layer) != 0; }
  const EncoderT<T>& at(int layer) const {
    auto it = encoders.find(layer);
    if (it == encoders.end())
      throw std::invalid_argument("encoder bank has no encoder for layer " +
                                  std::to_string(layer));
    return it->second;
  }
  std::vector<int> layers() const {
    std::vector<int> out;
    for (const auto& [l, e] : encoders) out.push_back(l);
    return out;
  }
  std::vector<TensorT<T>> params(int layer) const { return at(layer).params(); }
  std::vector<TensorT<T>> all_params() const {
    std::vector<TensorT<T>> out;
    for (const auto& [l, e] : encoders)
      for (auto& p : e.params()) out.push_back(p);
    return out;
  }
};

using DecoderModel = DecoderModelT<float>;
using EncoderBank = EncoderBankT<float>;

namespace detail {

inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Truncated normal: redraw while |z| > 2 standard deviations.
template <typename T>
void fill_trunc_normal(TensorT<T>& t, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> dist(0.0, 1.0);
  T* p = t.data();
  for (int64_t i = 0; i < t.numel(); ++i) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    p[i] = static_cast<T>(z * scale);
  }
}

template <typename T>
BlockT<T> init_block(int d, int d_mlp, std::mt19937_64& rng, bool trainable,
                     const std::string& prefix) {
  constexpr double kInitScale = 0.02;
  BlockT<T> b;
  b.attn_norm_w = TensorT<T>::full({d}, T(1), trainable);
  b.wq = TensorT<T>::zeros({d, d}, trainable);
  b.wk = TensorT<T>::zeros({d, d}, trainable);
  b.wv = TensorT<T>::zeros({d, d}, trainable);
  b.wo = TensorT<T>::zeros({d, d}, trainable);
  b.mlp_norm_w = TensorT<T>::full({d}, T(1), trainable);
  b.w_gate = TensorT<T>::zeros({d, d_mlp}, trainable);
  b.w_up = TensorT<T>::zeros({d, d_mlp}, trainable);
  b.w_down = TensorT<T>::zeros({d_mlp, d}, trainable);
  for (TensorT<T>* w : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_gate, &b.w_up,
                        &b.w_down})
    fill_trunc_normal(*w, rng, kInitScale);
  b.attn_norm_w.set_name(prefix + ".attn_norm");
  b.wq.set_name(prefix + ".wq");
  b.wk.set_name(prefix + ".wk");
  b.wv.set_name(prefix + ".wv");
  b.wo.set_name(prefix + ".wo");
  b.mlp_norm_w.set_name(prefix + ".mlp_norm");
  b.w_gate.set_name(prefix + ".w_gate");
  b.w_up.set_name(prefix + ".w_up");
  b.w_down.set_name(prefix + ".w_down");
  return b;
}

}  // namespace detail

inline void validate_configs(const DecoderConfig& dc, const EncoderConfig& ec) {
  if (dc.d_model % dc.n_heads != 0)
    throw std::invalid_argument("decoder config: d_model " +
                                std::to_string(dc.d_model) +
                                " not divisible by n_heads " +
                                std::to_string(dc.n_heads));
  if ((dc.d_model / dc.n_heads) % 2 != 0)
    throw std::invalid_argument("decoder config: head dim must be even for rotary");
  if (ec.d_enc % ec.n_heads_enc != 0)
    throw std::invalid_argument("encoder config: d_enc " +
                                std::to_string(ec.d_enc) +
                                " not divisible by n_heads_enc " +
                                std::to_string(ec.n_heads_enc));
  for (int l : ec.layer_subset)
    if (l < 0 || l >= dc.n_layers)
      throw std::invalid_argument(
          "encoder config: layer " + std::to_string(l) +
          " outside decoder layers [0, " + std::to_string(dc.n_layers) + ")");
}

// Deterministic model construction. The decoder is frozen immediately; the
// encoders are trainable and their up-projections start at zero so every
// encoder emits an all-zero delta at step 0.
template <typename T>
std::pair<DecoderModelT<T>, EncoderBankT<T>> init_models(
    const DecoderConfig& dc, const EncoderConfig& ec, uint64_t seed) {
  validate_configs(dc, ec);
  DecoderModelT<T> dec;
  dec.cfg = dc;
  {
    std::mt19937_64 rng(detail::mix_seed(seed, 0xD0));
    dec.tok_embedding =
        TensorT<T>::zeros({dc.vocab_size, dc.d_model}, /*requires_grad=*/false);
    detail::fill_trunc_normal(dec.tok_embedding, rng, 0.02);
    dec.tok_embedding.set_name("decoder.tok_embedding");
    for (int l = 0; l < dc.n_layers; ++l)
      dec.blocks.push_back(detail::init_block<T>(
          dc.d_model, dc.d_mlp, rng, false, "decoder.block" + std::to_string(l)));
    dec.final_norm_w = TensorT<T>::full({dc.d_model}, T(1), false);
    dec.final_norm_w.set_name("decoder.final_norm");
  }

  EncoderBankT<T> bank;
  bank.cfg = ec;
  bank.tok_embedding = dec.tok_embedding;
  for (int l : ec.layer_subset) {
    // Per-encoder seeding: an encoder's initialization is independent of
    // which other layers are present in the subset.
    std::mt19937_64 rng(detail::mix_seed(seed, 0xE000 + l));
    EncoderT<T> e;
    e.layer = l;
    std::string prefix = "encoder" + std::to_string(l);
    e.down_w = TensorT<T>::zeros({dc.d_model, ec.d_enc}, true);
    detail::fill_trunc_normal(e.down_w, rng, 0.02);
    e.down_w.set_name(prefix + ".down_w");
    for (int b = 0; b < ec.n_blocks; ++b)
      e.blocks.push_back(detail::init_block<T>(
          ec.d_enc, ec.d_mlp_enc, rng, true,
          prefix + ".block" + std::to_string(b)));
    e.final_norm_w = TensorT<T>::full({ec.d_enc}, T(1), true);
    e.final_norm_w.set_name(prefix + ".final_norm");
    e.up_w = TensorT<T>::zeros({ec.d_enc, dc.d_model}, true);
    e.up_w.set_name(prefix + ".up_w");
    bank.encoders.emplace(l, std::move(e));
  }
  return {std::move(dec), std::move(bank)};
}

// Analytic parameter counts (biasless linear layers, norms with one weight
// vector each).
inline int64_t count_block_params(int64_t d, int64_t d_mlp) {
  return 4 * d * d + 3 * d * d_mlp + 2 * d;
}
inline int64_t count_encoder_params(const EncoderConfig& ec, int64_t d_model) {
  return d_model * ec.d_enc                                     // down
         + ec.n_blocks * count_block_params(ec.d_enc, ec.d_mlp_enc)
         + ec.d_enc                                             // final norm
         + ec.d_enc * d_model;                                  // up
}
inline int64_t count_decoder_params(const DecoderConfig& dc) {
  return int64_t(dc.vocab_size) * dc.d_model +
         int64_t(dc.n_layers) * count_block_params(dc.d_model, dc.d_mlp) +
         dc.d_model;
}

// ---- forward passes ----

template <typename T>
TensorT<T> block_forward(const BlockT<T>& blk, const TensorT<T>& x,
                         int n_heads, T rope_base, bool causal) {
  auto xn = ops::rmsnorm(x, blk.attn_norm_w);
  auto q = ops::rope(ops::matmul(xn, blk.wq), n_heads, rope_base);
  auto k = ops::rope(ops::matmul(xn, blk.wk), n_heads, rope_base);
  auto v = ops::matmul(xn, blk.wv);
  auto att = ops::attention(q, k, v, n_heads, causal);
  auto h = ops::add(x, ops::matmul(att, blk.wo));
  auto hn = ops::rmsnorm(h, blk.mlp_norm_w);
  auto gated = ops::mul(ops::silu(ops::matmul(hn, blk.w_gate)),
                        ops::matmul(hn, blk.w_up));
  return ops::add(h, ops::matmul(gated, blk.w_down));
}

template <typename T>
struct DecoderOutT {
  TensorT<T> logits;                 // (T x vocab)
  std::vector<TensorT<T>> hidden;    // o_l per layer when captured
};

// Per-layer injection deltas, already aligned to the decoder's sequence
// (same length as tokens, row 0 zeroed for the BOS slot).
template <typename T>
using InjectionDeltasT = std::map<int, TensorT<T>>;

template <typename T>
DecoderOutT<T> decoder_forward_injected(const DecoderModelT<T>& model,
                                        const InjectionDeltasT<T>& deltas,
                                        const TokenIds& tokens, bool capture) {
  const DecoderConfig& cfg = model.cfg;
  if (static_cast<int>(tokens.size()) > cfg.max_context)
    throw std::invalid_argument(
        "decoder_forward: sequence length " + std::to_string(tokens.size()) +
        " exceeds max_context " + std::to_string(cfg.max_context));
  if (tokens.empty())
    throw std::invalid_argument("decoder_forward: empty token sequence");
  for (const auto& [l, d] : deltas) {
    if (l < 0 || l >= cfg.n_layers)
      throw std::invalid_argument("injection: layer " + std::to_string(l) +
                                  " outside decoder layers [0, " +
                                  std::to_string(cfg.n_layers) + ")");
    if (d.shape() != Shape{static_cast<int64_t>(tokens.size()), cfg.d_model})
      throw std::invalid_argument(
          "injection: delta for layer " + std::to_string(l) + " has shape " +
          shape_str(d.shape()) + ", decoder sequence needs (" +
          std::to_string(tokens.size()) + "x" + std::to_string(cfg.d_model) +
          ")");
  }
  DecoderOutT<T> out;
  ZoneScope zone(Zone::Decoder);
  TensorT<T> x = ops::embedding(model.tok_embedding, tokens);
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerScope layer(l);
    x = block_forward(model.blocks[l], x, cfg.n_heads, T(cfg.rope_base),
                      /*causal=*/true);
    auto it = deltas.find(l);
    if (it != deltas.end()) {
      // The correction is the encoder's output; its cost and graph belong to
      // the encoder side of the ledger.
      ZoneScope enc_zone(Zone::Encoder);
      x = ops::add(x, it->second);
    }
    if (capture) out.hidden.push_back(x);
  }
  out.logits = ops::matmul_nt(ops::rmsnorm(x, model.final_norm_w),
                              model.tok_embedding);
  return out;
}

template <typename T>
DecoderOutT<T> decoder_forward(const DecoderModelT<T>& model,
                               const TokenIds& tokens, bool capture = false) {
  return decoder_forward_injected(model, InjectionDeltasT<T>{}, tokens,
                                  capture);
}

// Encoder pipeline: shared embeddings -> down-projection -> blocks ->
// final norm -> up-projection. Output lives in decoder hidden-state space and
// has one row per input token.
template <typename T>
TensorT<T> encoder_forward(const EncoderBankT<T>& bank, int layer,
                           const TokenIds& tokens_kx) {
  const EncoderT<T>& enc = bank.at(layer);
  const EncoderConfig& cfg = bank.cfg;
  ZoneScope zone(Zone::Encoder);
  TensorT<T> x = ops::embedding(bank.tok_embedding, tokens_kx);
  x = ops::matmul(x, enc.down_w);
  for (int b = 0; b < cfg.n_blocks; ++b)
    x = block_forward(enc.blocks[b], x, cfg.n_heads_enc, T(cfg.rope_base),
                      cfg.causal);
  x = ops::rmsnorm(x, enc.final_norm_w);
  return ops::matmul(x, enc.up_w);
}

// ---- parameter fingerprinting ----

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename T>
uint64_t params_hash(const std::vector<TensorT<T>>& params) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params)
    h = fnv1a64(p.data(), static_cast<size_t>(p.numel()) * sizeof(T), h);
  return h;
}

template <typename T>
uint64_t decoder_hash(const DecoderModelT<T>& model) {
  return params_hash(model.params());
}

}  // namespace dki
