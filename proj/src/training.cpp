#include "dki/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

namespace dki {

void TrainConfig::validate() const {
  if (lr_peak < lr_start || lr_peak < lr_end)
    throw std::invalid_argument("train config: lr_peak must be >= lr_start and lr_end");
  if (max_steps <= warmup_steps)
    throw std::invalid_argument("train config: max_steps (" +
                                std::to_string(max_steps) +
                                ") must exceed warmup_steps (" +
                                std::to_string(warmup_steps) + ")");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size < 1");
}

double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  if (step <= cfg.warmup_steps) {
    if (cfg.warmup_steps == 0) return cfg.lr_peak;
    return cfg.lr_start +
           (cfg.lr_peak - cfg.lr_start) * double(step) / double(cfg.warmup_steps);
  }
  int64_t s = std::min(step, cfg.max_steps);
  double progress =
      double(s - cfg.warmup_steps) / double(cfg.max_steps - cfg.warmup_steps);
  return cfg.lr_end +
         (cfg.lr_peak - cfg.lr_end) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

CaptureStats capture_pass(const DecoderModel& decoder,
                          const std::vector<KnowledgeSample>& dataset,
                          const std::string& cache_dir,
                          std::function<void(const std::string&)> warn) {
  CaptureStats stats;
  OpCounters counters;
  CaptureCacheWriter writer(cache_dir, decoder.cfg.n_layers,
                            decoder.cfg.d_model);
  {
    CounterScope cs(counters);
    NoGradScope ng;
    for (size_t i = 0; i < dataset.size(); ++i) {
      Rendered r;
      try {
        r = render(dataset[i], decoder.cfg.max_context);
      } catch (const std::length_error& e) {
        ++stats.skipped_overlong;
        if (warn)
          warn("sample " + std::to_string(i) + " skipped: " + e.what());
        continue;
      }
      TokenIds kx = r.ids;
      TokenIds x = r.plain_sequence();
      auto know_out = decoder_forward(decoder, kx, /*capture=*/true);
      auto plain_out = decoder_forward(decoder, x, /*capture=*/true);
      AlignedTarget tgt =
          build_pretrain_targets(plain_out.hidden, know_out.hidden, r.k_len);
      writer.add(static_cast<uint32_t>(i), static_cast<uint32_t>(r.k_len), kx,
                 tgt);
      ++stats.captured;
    }
  }
  writer.finalize();
  stats.grad_allocations = counters.grad_allocations;
  return stats;
}

namespace {

// Dataset-wide zero-predictor loss: what masked MSE reports when every
// prediction is zero, averaged over records.
double dataset_baseline(const std::vector<CacheRecord>& records,
                        const std::vector<std::vector<float>>& targets,
                        int d_model) {
  double acc = 0;
  for (size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    const auto& buf = targets[r];
    double s = 0;
    int64_t n = 0;
    for (size_t p = 0; p < rec.valid.size(); ++p) {
      if (!rec.valid[p]) continue;
      for (int j = 0; j < d_model; ++j) {
        double v = buf[p * d_model + j];
        s += v * v;
      }
      n += d_model;
    }
    if (n) acc += s / double(n);
  }
  return records.empty() ? 0.0 : acc / double(records.size());
}

}  // namespace

TrainLog pretrain_encoder(EncoderBank& bank, int layer,
                          const CaptureCache& cache, const TrainConfig& cfg) {
  cfg.validate();
  if (!bank.has_layer(layer))
    throw std::invalid_argument("pretrain_encoder: bank has no encoder for layer " +
                                std::to_string(layer));
  if (layer >= cache.n_layers())
    throw std::invalid_argument("pretrain_encoder: cache holds layers [0, " +
                                std::to_string(cache.n_layers()) +
                                "), asked for " + std::to_string(layer));
  const auto& records = cache.records();
  if (records.empty())
    throw std::invalid_argument("pretrain_encoder: empty capture cache");
  auto targets = cache.load_layer(layer);
  int d_model = cache.d_model();

  TrainLog log;
  log.layer = layer;
  log.baseline = dataset_baseline(records, targets, d_model);

  std::vector<Tensor> params = bank.params(layer);
  AdamState adam_state;
  // Data order depends only on (seed, layer): the same encoder sees the same
  // stream no matter which other layers are being trained.
  std::mt19937_64 rng(detail::mix_seed(cfg.seed, 0x7A000 + layer));
  std::vector<size_t> order(records.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  size_t cursor = 0;

  double smoothed = log.baseline;
  double best = std::numeric_limits<double>::infinity();
  constexpr double kSmooth = 0.9;

  for (int64_t step = 0; step < cfg.max_steps; ++step) {
    std::vector<Tensor> losses;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const CacheRecord& rec = records[order[cursor]];
      const auto& buf = targets[order[cursor]];
      ++cursor;
      Tensor target;
      {
        NoGradScope ng;
        target = Tensor::from(
            {static_cast<int64_t>(rec.tokens.size()), d_model}, buf);
      }
      Tensor pred = encoder_forward(bank, layer, rec.tokens);
      losses.push_back(ops::masked_mse(pred, target, rec.valid));
    }
    Tensor loss = ops::mean_of(losses);
    double loss_v = loss.item();
    loss.backward();
    AdamConfig ac = cfg.adam;
    ac.lr = lr_at(step, cfg);
    adam_step(params, adam_state, ac);

    smoothed = (step == 0) ? loss_v : kSmooth * smoothed + (1 - kSmooth) * loss_v;
    best = std::min(best, loss_v);
    log.final_loss = smoothed;
    log.steps_run = step + 1;
    if (step % cfg.log_every == 0 || step + 1 == cfg.max_steps)
      log.events.push_back({step, loss_v, ac.lr});

    if (cfg.target_ratio > 0 && smoothed <= cfg.target_ratio * log.baseline)
      break;
    if (step + 1 >= cfg.divergence_patience && best >= log.baseline) {
      log.diverged = true;
      break;
    }
  }
  return log;
}

std::vector<TrainLog> pretrain_encoders(EncoderBank& bank,
                                        const std::vector<int>& layers,
                                        const CaptureCache& cache,
                                        const TrainConfig& cfg, int jobs) {
  std::vector<TrainLog> logs(layers.size());
  if (jobs <= 1) {
    for (size_t i = 0; i < layers.size(); ++i)
      logs[i] = pretrain_encoder(bank, layers[i], cache, cfg);
    return logs;
  }
  // Parameter sets are disjoint and the cache is read-only; each worker
  // trains a distinct subset of layers.
  std::vector<std::thread> workers;
  std::vector<std::string> errors(jobs);
  for (int w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w]() {
      try {
        for (size_t i = w; i < layers.size(); i += jobs)
          logs[i] = pretrain_encoder(bank, layers[i], cache, cfg);
      } catch (const std::exception& e) {
        errors[w] = e.what();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (const auto& e : errors)
    if (!e.empty()) throw std::runtime_error("pretrain worker failed: " + e);
  return logs;
}

Mask ce_row_mask_for_sequence(const TokenIds& ids) {
  Mask tok(ids.size(), 0);
  bool after_sys = false;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (after_sys) tok[i] = 1;
    if (ids[i] == TokenizerSpec::kSys) after_sys = true;
  }
  Mask rows(ids.size(), 0);
  for (size_t i = 0; i + 1 < ids.size(); ++i) rows[i] = tok[i + 1];
  return rows;
}

TokenIds next_token_targets(const TokenIds& ids) {
  TokenIds out(ids.size(), 0);
  for (size_t i = 0; i + 1 < ids.size(); ++i) out[i] = ids[i + 1];
  return out;
}

namespace {

TrainLog finetune_loop(const DecoderModel& decoder, EncoderBank& bank,
                       const std::vector<int>& subset,
                       const std::vector<KnowledgeSample>& dataset,
                       const TrainConfig& cfg,
                       const std::vector<KnowledgeSample>* val_dataset,
                       uint64_t seed_salt) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("finetune: empty dataset");
  for (int l : subset)
    if (!bank.has_layer(l))
      throw std::invalid_argument("finetune: bank has no encoder for layer " +
                                  std::to_string(l));

  struct Prepared {
    TokenIds kx, x, targets;
    Mask rows;
    int64_t k_len;
  };
  std::vector<Prepared> prep;
  prep.reserve(dataset.size());
  for (const auto& s : dataset) {
    Rendered r = render(s, decoder.cfg.max_context);
    Prepared p;
    p.kx = r.ids;
    p.x = r.plain_sequence();
    p.targets = next_token_targets(p.x);
    p.rows = ce_row_mask_for_sequence(p.x);
    p.k_len = r.k_len;
    if (mask_count(p.rows) == 0)
      throw std::invalid_argument("finetune: sample has no scored tokens after [SYS]");
    prep.push_back(std::move(p));
  }

  std::vector<Tensor> params;
  for (int l : subset)
    for (auto& p : bank.params(l)) params.push_back(p);
  AdamState adam_state;

  std::mt19937_64 rng(detail::mix_seed(cfg.seed, seed_salt));
  std::vector<size_t> order(prep.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  size_t cursor = 0;

  auto eval_val = [&](int64_t step, TrainLog& log) {
    if (!val_dataset || val_dataset->empty()) return;
    NoGradScope ng;
    double total = 0;
    int64_t count = 0;
    for (const auto& s : *val_dataset) {
      Rendered r = render(s, decoder.cfg.max_context);
      TokenIds x = r.plain_sequence();
      auto out = injected_forward(decoder, bank, subset, r.knowledge_segment(), x);
      Mask rows = ce_row_mask_for_sequence(x);
      Tensor ce = ops::masked_cross_entropy(out.logits, next_token_targets(x), rows);
      total += double(ce.item()) * double(mask_count(rows));
      count += mask_count(rows);
    }
    log.val_events.push_back({step, count ? total / double(count) : 0.0, 0.0});
  };

  TrainLog log;
  for (int64_t step = 0; step < cfg.max_steps; ++step) {
    std::vector<Tensor> losses;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Prepared& p = prep[order[cursor]];
      ++cursor;
      TokenIds k_segment(p.kx.begin() + 1, p.kx.begin() + 1 + p.k_len);
      auto out = injected_forward(decoder, bank, subset, k_segment, p.x);
      losses.push_back(ops::masked_cross_entropy(out.logits, p.targets, p.rows));
    }
    Tensor loss = ops::mean_of(losses);
    double loss_v = loss.item();
    loss.backward();
    AdamConfig ac = cfg.adam;
    ac.lr = lr_at(step, cfg);
    adam_step(params, adam_state, ac);

    log.final_loss = loss_v;
    log.steps_run = step + 1;
    if (step % cfg.log_every == 0 || step + 1 == cfg.max_steps)
      log.events.push_back({step, loss_v, ac.lr});
    if (cfg.val_every > 0 &&
        (step % cfg.val_every == cfg.val_every - 1 || step + 1 == cfg.max_steps))
      eval_val(step + 1, log);
    if (cfg.target_loss > 0 && loss_v <= cfg.target_loss) break;
  }
  return log;
}

}  // namespace

TrainLog pretrain_decoder(DecoderModel& decoder,
                          const std::vector<KnowledgeSample>& dataset,
                          const TrainConfig& cfg,
                          const std::vector<KnowledgeSample>* val_dataset) {
  cfg.validate();
  if (dataset.empty())
    throw std::invalid_argument("pretrain_decoder: empty dataset");
  struct Prepared {
    TokenIds ids, targets;
    Mask rows;
  };
  std::vector<Prepared> prep;
  prep.reserve(dataset.size());
  for (const auto& s : dataset) {
    Rendered r = render(s, decoder.cfg.max_context);
    Prepared p;
    p.ids = r.ids;
    p.targets = next_token_targets(p.ids);
    p.rows = r.lm_row_mask();
    prep.push_back(std::move(p));
  }

  decoder.set_trainable(true);
  std::vector<Tensor> params = decoder.params();
  AdamState adam_state;
  std::mt19937_64 rng(detail::mix_seed(cfg.seed, 0xDEC));
  std::vector<size_t> order(prep.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  size_t cursor = 0;

  TrainLog log;
  for (int64_t step = 0; step < cfg.max_steps; ++step) {
    std::vector<Tensor> losses;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Prepared& p = prep[order[cursor]];
      ++cursor;
      auto out = decoder_forward(decoder, p.ids);
      losses.push_back(ops::masked_cross_entropy(out.logits, p.targets, p.rows));
    }
    Tensor loss = ops::mean_of(losses);
    double loss_v = loss.item();
    loss.backward();
    AdamConfig ac = cfg.adam;
    ac.lr = lr_at(step, cfg);
    adam_step(params, adam_state, ac);
    log.final_loss = loss_v;
    log.steps_run = step + 1;
    if (step % cfg.log_every == 0 || step + 1 == cfg.max_steps)
      log.events.push_back({step, loss_v, ac.lr});
    if (cfg.target_loss > 0 && loss_v <= cfg.target_loss) break;
  }
  if (val_dataset && !val_dataset->empty()) {
    NoGradScope ng;
    double total = 0;
    int64_t count = 0;
    for (const auto& s : *val_dataset) {
      Rendered r = render(s, decoder.cfg.max_context);
      auto out = decoder_forward(decoder, r.ids);
      Mask rows = r.lm_row_mask();
      Tensor ce =
          ops::masked_cross_entropy(out.logits, next_token_targets(r.ids), rows);
      total += double(ce.item()) * double(mask_count(rows));
      count += mask_count(rows);
    }
    log.val_events.push_back({log.steps_run, count ? total / double(count) : 0.0, 0.0});
  }
  decoder.set_trainable(false);
  return log;
}

TrainLog finetune(const DecoderModel& decoder, EncoderBank& bank,
                  const std::vector<int>& subset,
                  const std::vector<KnowledgeSample>& dataset,
                  const TrainConfig& cfg,
                  const std::vector<KnowledgeSample>* val_dataset) {
  return finetune_loop(decoder, bank, subset, dataset, cfg, val_dataset, 0xF1);
}

std::vector<KnowledgeSample> edit_training_samples(
    const std::vector<EditSample>& edit_set) {
  std::vector<KnowledgeSample> out;
  out.reserve(edit_set.size());
  for (const auto& e : edit_set) {
    KnowledgeSample s;
    s.source = e.prompt();
    s.target = " " + e.counter_object;
    out.push_back(std::move(s));
  }
  return out;
}

TrainLog edit(const DecoderModel& decoder, EncoderBank& bank,
              const std::vector<int>& subset,
              const std::vector<EditSample>& edit_set, const TrainConfig& cfg) {
  if (edit_set.empty()) throw std::invalid_argument("edit: empty edit set");
  return finetune_loop(decoder, bank, subset, edit_training_samples(edit_set),
                       cfg, nullptr, 0xED);
}

}  // namespace dki
