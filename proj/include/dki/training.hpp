#pragma once

// The three training modes: hidden-state-difference pretraining (no decoder
// backprop), cross-entropy fine-tuning through the frozen decoder, and
// knowledge editing (fine-tuning with an empty knowledge slot).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dki/cache.hpp"
#include "dki/data.hpp"
#include "dki/injection.hpp"
#include "dki/model.hpp"

namespace dki {

struct TrainConfig {
  std::string mode = "pretrain";  // pretrain | finetune | edit
  std::vector<int> layer_subset = {3, 4, 5, 6, 7, 8};
  // Warmup climbs linearly from lr_start to lr_peak, then cosine decay back
  // down to lr_end at max_steps.
  double lr_start = 1e-5;
  double lr_peak = 1e-4;
  double lr_end = 1e-5;
  int64_t warmup_steps = 100;
  int64_t max_steps = 2000;
  int batch_size = 8;
  uint64_t seed = 0;
  AdamConfig adam;
  // Pretraining: an encoder whose best loss has not dropped below the
  // zero-predictor baseline after this many steps is flagged divergent and
  // stopped (flag-and-exclude, never retried).
  int64_t divergence_patience = 400;
  // Early stop once the smoothed loss reaches target_ratio * baseline (0 =
  // run to max_steps).
  double target_ratio = 0.0;
  // Fine-tuning/editing: early stop once the batch loss reaches this
  // absolute value (0 = run to max_steps).
  double target_loss = 0.0;
  int64_t log_every = 25;
  // Fine-tuning: evaluate validation loss every this many steps (0 = never).
  int64_t val_every = 0;

  void validate() const;
};

double lr_at(int64_t step, const TrainConfig& cfg);

struct TrainEvent {
  int64_t step = 0;
  double loss = 0;
  double lr = 0;
};

struct TrainLog {
  int layer = -1;  // pretraining only
  std::vector<TrainEvent> events;
  std::vector<TrainEvent> val_events;
  double baseline = 0;  // zero-predictor MSE over the dataset (pretraining)
  double final_loss = 0;
  int64_t steps_run = 0;
  bool diverged = false;
};

struct CaptureStats {
  int64_t captured = 0;
  int64_t skipped_overlong = 0;
  int64_t grad_allocations = 0;  // must stay 0
};

// Runs D(K,x) and D(x) with hidden-state capture for every sample and writes
// difference targets to a fresh cache directory. No gradient storage is
// allocated anywhere in the pass.
CaptureStats capture_pass(const DecoderModel& decoder,
                          const std::vector<KnowledgeSample>& dataset,
                          const std::string& cache_dir,
                          std::function<void(const std::string&)> warn = {});

// Optimizes a single encoder against its layer's cached targets via masked
// MSE. Only that encoder's parameters receive gradients; the decoder is
// never run.
TrainLog pretrain_encoder(EncoderBank& bank, int layer,
                          const CaptureCache& cache, const TrainConfig& cfg);

// Convenience driver: trains each layer's encoder in turn (or in `jobs`
// parallel threads; the cache is read-only and parameter sets are disjoint).
std::vector<TrainLog> pretrain_encoders(EncoderBank& bank,
                                        const std::vector<int>& layers,
                                        const CaptureCache& cache,
                                        const TrainConfig& cfg, int jobs = 1);

// Cross-entropy fine-tuning of the subset's encoders through the frozen
// decoder. Loss is computed on the tokens after [SYS] only.
TrainLog finetune(const DecoderModel& decoder, EncoderBank& bank,
                  const std::vector<int>& subset,
                  const std::vector<KnowledgeSample>& dataset,
                  const TrainConfig& cfg,
                  const std::vector<KnowledgeSample>* val_dataset = nullptr);

// Knowledge editing: fine-tuning with an empty knowledge slot on
// (prompt, counter-object) pairs.
TrainLog edit(const DecoderModel& decoder, EncoderBank& bank,
              const std::vector<int>& subset,
              const std::vector<EditSample>& edit_set, const TrainConfig& cfg);

// The (prompt -> " counter_object") samples an edit run trains on.
std::vector<KnowledgeSample> edit_training_samples(
    const std::vector<EditSample>& edit_set);

// Bootstrap for the frozen decoder: short next-token training on the full
// rendered sequences (knowledge included). The decoder is unfrozen for the
// duration of the loop and re-frozen before returning.
TrainLog pretrain_decoder(DecoderModel& decoder,
                          const std::vector<KnowledgeSample>& dataset,
                          const TrainConfig& cfg,
                          const std::vector<KnowledgeSample>* val_dataset = nullptr);

// Next-token row mask over an already-assembled sequence: rows predicting
// the tokens after the [SYS] marker.
Mask ce_row_mask_for_sequence(const TokenIds& ids);

// Shifted next-token targets: targets[i] = ids[i+1], last row unscored.
TokenIds next_token_targets(const TokenIds& ids);

}  // namespace dki
