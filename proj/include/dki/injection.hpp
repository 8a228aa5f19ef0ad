#pragma once

// Sequence alignment between the plain run D(x) and the knowledge run D(K,x),
// construction of hidden-state difference targets, and the injected decoder
// forward pass.
//
// Layout convention (set by the data module): the knowledge-run sequence is
// [BOS] ++ K ++ X and the plain-run sequence is [BOS] ++ X, where X is the
// source/target tail and K the rendered knowledge segment of k_len tokens.
// Shifting by k_len aligns every X position across the two runs; the BOS slot
// aligns to different content, so it is excluded from both the pretraining
// loss and the injection itself.

#include "dki/model.hpp"
#include "dki/tensor.hpp"

namespace dki {

// Drops the first b rows of a (T x d) sequence.
template <typename T>
TensorT<T> shift_left(const TensorT<T>& seq, int64_t b) {
  const Shape& s = seq.shape();
  if (s.size() != 2)
    throw std::invalid_argument("shift_left: sequence must be 2-d, got " +
                                shape_str(s));
  if (b < 0 || b > s[0])
    throw std::invalid_argument("shift_left: shift " + std::to_string(b) +
                                " exceeds sequence length " +
                                std::to_string(s[0]));
  NoGradScope ng;
  return ops::row_slice(seq, b, s[0] - b);
}

// Prepends b invalid rows; position b+i holds seq[i]. Returns the shifted
// sequence and its validity mask.
template <typename T>
std::pair<TensorT<T>, Mask> shift_right(const TensorT<T>& seq, int64_t b) {
  const Shape& s = seq.shape();
  if (s.size() != 2)
    throw std::invalid_argument("shift_right: sequence must be 2-d, got " +
                                shape_str(s));
  if (b < 0)
    throw std::invalid_argument("shift_right: negative shift " +
                                std::to_string(b));
  int64_t rows = s[0], d = s[1];
  NoGradScope ng;
  TensorT<T> out = TensorT<T>::zeros({rows + b, d});
  std::memcpy(out.data() + b * d, seq.data(),
              sizeof(T) * static_cast<size_t>(rows * d));
  Mask valid(static_cast<size_t>(rows + b), 1);
  for (int64_t i = 0; i < b; ++i) valid[i] = 0;
  return {std::move(out), std::move(valid)};
}

// Per-layer difference targets in the knowledge-run frame: row p holds
// o_l^(K,x)[p] - o_l^(x)[p - k_len] wherever both runs carry the same token.
template <typename T>
struct AlignedTargetT {
  int64_t rows = 0;  // |K| + |x|
  int64_t d = 0;
  int64_t k_len = 0;
  Mask valid;  // rows 0..k_len are invalid (missing slots + BOS slot)
  std::vector<std::vector<T>> layers;  // one rows*d buffer per decoder layer
};

using AlignedTarget = AlignedTargetT<float>;

template <typename T>
AlignedTargetT<T> build_pretrain_targets(
    const std::vector<TensorT<T>>& capture_plain,
    const std::vector<TensorT<T>>& capture_knowledge, int64_t k_len) {
  if (capture_plain.size() != capture_knowledge.size())
    throw std::invalid_argument(
        "build_pretrain_targets: layer counts differ (" +
        std::to_string(capture_plain.size()) + " vs " +
        std::to_string(capture_knowledge.size()) + ")");
  if (capture_plain.empty())
    throw std::invalid_argument("build_pretrain_targets: no captured layers");
  int64_t t_x = capture_plain[0].dim(0);
  int64_t t_kx = capture_knowledge[0].dim(0);
  int64_t d = capture_plain[0].dim(1);
  if (t_kx != t_x + k_len)
    throw std::invalid_argument(
        "build_pretrain_targets: knowledge run has " + std::to_string(t_kx) +
        " rows, plain run " + std::to_string(t_x) + " rows, k_len " +
        std::to_string(k_len) + " is inconsistent");

  AlignedTargetT<T> tgt;
  tgt.rows = t_kx;
  tgt.d = d;
  tgt.k_len = k_len;
  tgt.valid.assign(static_cast<size_t>(t_kx), 1);
  for (int64_t p = 0; p <= k_len && p < t_kx; ++p) tgt.valid[p] = 0;
  tgt.layers.resize(capture_plain.size());
  for (size_t l = 0; l < capture_plain.size(); ++l) {
    const TensorT<T>& plain = capture_plain[l];
    const TensorT<T>& know = capture_knowledge[l];
    if (plain.dim(0) != t_x || know.dim(0) != t_kx || plain.dim(1) != d ||
        know.dim(1) != d)
      throw std::invalid_argument(
          "build_pretrain_targets: layer " + std::to_string(l) +
          " capture shapes " + shape_str(plain.shape()) + " / " +
          shape_str(know.shape()) + " are inconsistent");
    auto& buf = tgt.layers[l];
    buf.assign(static_cast<size_t>(t_kx * d), T(0));
    const T* pk = know.data();
    const T* pp = plain.data();
    for (int64_t p = k_len + 1; p < t_kx; ++p)
      for (int64_t j = 0; j < d; ++j)
        buf[p * d + j] = pk[p * d + j] - pp[(p - k_len) * d + j];
  }
  return tgt;
}

// Baseline pretraining loss of the all-zero predictor: the masked MSE equals
// the mean squared element of the target over valid rows.
template <typename T>
double zero_predictor_baseline(const AlignedTargetT<T>& tgt, size_t layer_idx) {
  const auto& buf = tgt.layers.at(layer_idx);
  double acc = 0;
  int64_t n = 0;
  for (int64_t p = 0; p < tgt.rows; ++p) {
    if (!tgt.valid[p]) continue;
    for (int64_t j = 0; j < tgt.d; ++j) {
      double v = buf[p * tgt.d + j];
      acc += v * v;
    }
    n += tgt.d;
  }
  return n ? acc / double(n) : 0.0;
}

// Exact captured difference for one layer, moved into the decoder frame
// (plain-run indexing, BOS row zeroed). Injecting this at that single layer
// reproduces the knowledge-run hidden state at aligned positions.
template <typename T>
TensorT<T> aligned_delta_for_layer(const AlignedTargetT<T>& tgt, int layer) {
  const auto& buf = tgt.layers.at(static_cast<size_t>(layer));
  int64_t t_x = tgt.rows - tgt.k_len;
  NoGradScope ng;
  TensorT<T> out = TensorT<T>::zeros({t_x, tgt.d});
  for (int64_t p = 1; p < t_x; ++p)
    for (int64_t j = 0; j < tgt.d; ++j)
      out.data()[p * tgt.d + j] = buf[(p + tgt.k_len) * tgt.d + j];
  return out;
}

// Runs every encoder in `subset` on the knowledge-run tokens and shifts the
// outputs into the decoder frame. Gradients flow back through the shift into
// the encoders; the BOS row is zeroed via a constant mask.
template <typename T>
InjectionDeltasT<T> compute_injection_deltas(const EncoderBankT<T>& bank,
                                             const std::vector<int>& subset,
                                             const TokenIds& tokens_kx,
                                             int64_t k_len) {
  int64_t t_kx = static_cast<int64_t>(tokens_kx.size());
  int64_t t_x = t_kx - k_len;
  if (t_x <= 0)
    throw std::invalid_argument("injection: k_len " + std::to_string(k_len) +
                                " leaves no decoder sequence in " +
                                std::to_string(t_kx) + " tokens");
  TensorT<T> bos_mask;
  {
    NoGradScope ng;
    bos_mask = TensorT<T>::full({t_x, bank.encoders.empty()
                                          ? 1
                                          : bank.encoders.begin()->second.up_w.dim(1)},
                                T(1));
    for (int64_t j = 0; j < bos_mask.dim(1); ++j) bos_mask.data()[j] = T(0);
  }
  InjectionDeltasT<T> deltas;
  for (int l : subset) {
    TensorT<T> full = encoder_forward(bank, l, tokens_kx);
    if (full.dim(0) != t_kx)
      throw std::invalid_argument(
          "injection: encoder output has " + std::to_string(full.dim(0)) +
          " rows, expected |K|+|x| = " + std::to_string(t_kx));
    ZoneScope zone(Zone::Encoder);
    TensorT<T> shifted = ops::row_slice(full, k_len, t_x);
    deltas.emplace(l, ops::mul(shifted, bos_mask));
  }
  return deltas;
}

// Eq.-style injected forward: the decoder processes only tokens_x while each
// encoder processes [head] ++ tokens_k ++ tail(tokens_x). tokens_x[0] is the
// shared sequence head (BOS) present in both runs.
template <typename T>
DecoderOutT<T> injected_forward(const DecoderModelT<T>& model,
                                const EncoderBankT<T>& bank,
                                const std::vector<int>& subset,
                                const TokenIds& tokens_k,
                                const TokenIds& tokens_x,
                                bool capture = false) {
  if (tokens_x.empty())
    throw std::invalid_argument("injected_forward: empty input sequence");
  TokenIds tokens_kx;
  tokens_kx.reserve(tokens_k.size() + tokens_x.size());
  tokens_kx.push_back(tokens_x[0]);
  tokens_kx.insert(tokens_kx.end(), tokens_k.begin(), tokens_k.end());
  tokens_kx.insert(tokens_kx.end(), tokens_x.begin() + 1, tokens_x.end());
  InjectionDeltasT<T> deltas = compute_injection_deltas(
      bank, subset, tokens_kx, static_cast<int64_t>(tokens_k.size()));
  return decoder_forward_injected(model, deltas, tokens_x, capture);
}

}  // namespace dki
