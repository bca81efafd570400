#pragma once

// Stage-one (backbone on clips) and stage-two (GRU on per-position
// features) training loops, plus prediction helpers.

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include <json.hpp>

#include "stor2/backbone.hpp"
#include "stor2/log.hpp"
#include "stor2/metrics.hpp"
#include "stor2/optim.hpp"
#include "stor2/rng.hpp"
#include "stor2/scene.hpp"
#include "stor2/sequence.hpp"

namespace stor2 {

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global steps taken so far
  double lr = 0;         // learning rate of the epoch's last step
  double loss = 0;       // mean batch loss over the epoch
  std::optional<double> val_top1;
};

inline nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"step", e.step},
          {"lr", e.lr},
          {"loss", e.loss},
          {"val_top1", e.val_top1 ? nlohmann::json(*e.val_top1) : nlohmann::json(nullptr)}};
}

/// One JSON object per line.
inline std::string to_jsonl(const std::vector<EpochLog>& log) {
  std::string out;
  for (const auto& e : log) out += to_json(e).dump() + "\n";
  return out;
}

using EpochCallback = std::function<void(const EpochLog&)>;

namespace detail {

/// Epoch count after honouring min_steps.
inline std::size_t effective_epochs(const TrainConfig& cfg, std::size_t steps_per_epoch) {
  std::size_t epochs = cfg.epochs;
  if (cfg.min_steps > epochs * steps_per_epoch) epochs = (cfg.min_steps + steps_per_epoch - 1) / steps_per_epoch;
  return epochs;
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

template <class T>
std::vector<double> softmax_row(std::span<const T> logits) {
  auto p = softmax(logits);
  return {p.begin(), p.end()};
}

}  // namespace detail

/// Class probabilities for every clip, computed in batches.
template <class T>
PredictionSet predict_clips(Backbone<T>& model, const std::vector<Clip>& clips, Ablation ablation = Ablation::none,
                            std::size_t batch = 64) {
  PredictionSet out;
  out.K = model.config.K;
  for (std::size_t first = 0; first < clips.size(); first += batch) {
    const std::size_t n = std::min(batch, clips.size() - first);
    Tape<T> tape;
    auto res = forward(tape, model, std::span<const Clip>(clips.data() + first, n), ablation);
    auto logits = res.logits.value();
    for (std::size_t i = 0; i < n; ++i)
      out.add(detail::softmax_row<T>(logits.subspan(i * out.K, out.K)), clips[first + i].label);
  }
  return out;
}

/// Mean cross-entropy over a batch; used by training and by descent probes.
template <class T>
Var<T> batch_loss(Tape<T>& tape, Backbone<T>& model, std::span<const Clip> clips, Ablation ablation) {
  auto res = forward(tape, model, clips, ablation);
  std::vector<std::size_t> labels;
  for (const auto& c : clips) labels.push_back(c.label);
  return softmax_cross_entropy(res.logits, std::span<const std::size_t>(labels));
}

/// Minibatch SGD over shuffled clips with the warmup-cosine schedule.
/// Batch order for epoch e is a permutation seeded by (seed, e).
template <class T>
std::vector<EpochLog> train_backbone(Backbone<T>& model, const std::vector<Clip>& train, const TrainConfig& cfg,
                                     Ablation ablation = Ablation::none, const std::vector<Clip>* val = nullptr,
                                     const EpochCallback& on_epoch = {}) {
  if (train.empty()) throw ArgumentError("train_backbone: empty training set");
  cfg.validate();
  const std::size_t steps_per_epoch = (train.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t epochs = detail::effective_epochs(cfg, steps_per_epoch);
  TrainConfig sched = cfg;
  sched.epochs = epochs;
  sched.warmup_epochs = std::max<std::size_t>(1, cfg.warmup_epochs * epochs / cfg.epochs);
  const std::size_t total = epochs * steps_per_epoch;

  Sgd<T> opt(model.parameters(), cfg.momentum, cfg.weight_decay);
  std::vector<EpochLog> history;
  std::vector<Clip> batch;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const auto order = detail::shuffled(train.size(), derive_seed(cfg.seed, epoch));
    double loss_sum = 0;
    double lr = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
      batch.clear();
      for (std::size_t i = first; i < std::min(order.size(), first + cfg.batch); ++i) batch.push_back(train[order[i]]);
      opt.zero_grad();
      Tape<T> tape;
      auto loss = batch_loss(tape, model, std::span<const Clip>(batch), ablation);
      tape.backward(loss);
      if (cfg.grad_clip > 0) opt.clip_grad_norm(cfg.grad_clip);
      lr = lr_at(sched, step, total);
      opt.step(lr);
      loss_sum += static_cast<double>(loss.item());
      ++step;
    }
    EpochLog e{epoch, step, lr, loss_sum / static_cast<double>(steps_per_epoch), std::nullopt};
    if (val && !val->empty()) e.val_top1 = top1_accuracy(predict_clips(model, *val, ablation));
    if (!std::isfinite(e.loss)) throw NumericError("train_backbone: loss diverged at epoch " + std::to_string(epoch));
    log::debug("backbone epoch " + std::to_string(epoch) + " loss " + std::to_string(e.loss));
    history.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return history;
}

// ---------------------------------------------------------------------------
// Sequence stage

/// One video as seen by the GRU: an input vector and a label per clip
/// position, plus the per-frame phases used for frame-wise scoring.
template <class T>
struct SequenceSample {
  std::string id;
  std::vector<std::vector<T>> inputs;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> frame_phases;
};

template <class T>
void check_sample(const SequenceSample<T>& s, const ClipShape& shape) {
  if (s.inputs.empty()) throw ArgumentError("sequence '" + s.id + "': no positions");
  if (s.inputs.size() != s.labels.size())
    throw ArgumentError("sequence '" + s.id + "': " + std::to_string(s.inputs.size()) + " feature rows, " +
                        std::to_string(s.labels.size()) + " labels");
  if (position_count(s.frame_phases.size(), shape) != s.labels.size())
    throw ArgumentError("sequence '" + s.id + "': " + std::to_string(s.frame_phases.size()) + " frames do not tile into " +
                        std::to_string(s.labels.size()) + " positions");
}

/// Per-position cross-entropy summed within a video, averaged over the
/// videos of a batch.
template <class T>
std::vector<EpochLog> train_sequence(Gru<T>& gru, const std::vector<SequenceSample<T>>& videos, const TrainConfig& cfg,
                                     const ClipShape& shape, const EpochCallback& on_epoch = {}) {
  if (videos.empty()) throw ArgumentError("train_sequence: no videos");
  cfg.validate();
  for (const auto& v : videos) check_sample(v, shape);
  const std::size_t steps_per_epoch = (videos.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t epochs = detail::effective_epochs(cfg, steps_per_epoch);
  TrainConfig sched = cfg;
  sched.epochs = epochs;
  sched.warmup_epochs = std::max<std::size_t>(1, cfg.warmup_epochs * epochs / cfg.epochs);
  const std::size_t total = epochs * steps_per_epoch;

  Sgd<T> opt(gru.parameters(), cfg.momentum, cfg.weight_decay);
  std::vector<EpochLog> history;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    const auto order = detail::shuffled(videos.size(), derive_seed(cfg.seed, epoch));
    double loss_sum = 0, lr = 0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
      const std::size_t n = std::min(cfg.batch, order.size() - first);
      opt.zero_grad();
      double batch_loss = 0;
      for (std::size_t i = first; i < first + n; ++i) {
        const auto& v = videos[order[i]];
        Tape<T> tape;
        auto logits = segment_video(tape, gru, v.inputs);
        auto loss = scale(softmax_cross_entropy(logits, std::span<const std::size_t>(v.labels), Reduction::sum),
                          T(1) / static_cast<T>(n));
        tape.backward(loss);
        batch_loss += static_cast<double>(loss.item());
      }
      if (cfg.grad_clip > 0) opt.clip_grad_norm(cfg.grad_clip);
      lr = lr_at(sched, step, total);
      opt.step(lr);
      loss_sum += batch_loss;
      ++step;
    }
    EpochLog e{epoch, step, lr, loss_sum / static_cast<double>(steps_per_epoch), std::nullopt};
    if (!std::isfinite(e.loss)) throw NumericError("train_sequence: loss diverged at epoch " + std::to_string(epoch));
    history.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return history;
}

/// Spreads per-position score rows over the frames each position owns.
inline void add_framewise(PredictionSet& out, const std::vector<std::vector<double>>& position_scores,
                          const std::vector<std::size_t>& frame_phases, const ClipShape& shape) {
  const std::size_t positions = position_count(frame_phases.size(), shape);
  if (position_scores.size() != positions)
    throw ArgumentError("add_framewise: " + std::to_string(position_scores.size()) + " score rows for " +
                        std::to_string(positions) + " positions");
  for (std::size_t p = 0; p < positions; ++p) {
    const auto span = position_frames(p, frame_phases.size(), shape);
    for (std::size_t f = span.begin; f < span.end; ++f) out.add(position_scores[p], frame_phases[f]);
  }
}

/// GRU class probabilities per position.
template <class T>
std::vector<std::vector<double>> sequence_scores(Gru<T>& gru, const SequenceSample<T>& v) {
  Tape<T> tape;
  auto logits = segment_video(tape, gru, v.inputs).value();
  const std::size_t K = gru.config.K;
  std::vector<std::vector<double>> rows;
  for (std::size_t p = 0; p < v.inputs.size(); ++p) rows.push_back(detail::softmax_row<T>(logits.subspan(p * K, K)));
  return rows;
}

/// Frame-level predictions of the GRU over held-out videos.
template <class T>
PredictionSet framewise_predictions(Gru<T>& gru, const std::vector<SequenceSample<T>>& videos, const ClipShape& shape) {
  PredictionSet out;
  out.K = gru.config.K;
  for (const auto& v : videos) {
    check_sample(v, shape);
    add_framewise(out, sequence_scores(gru, v), v.frame_phases, shape);
  }
  return out;
}

/// Labels that the GRU is trained on: majority phase per tiled position.
inline std::vector<std::size_t> position_labels(const VideoRecord& video, const ClipShape& shape) {
  std::vector<std::size_t> labels;
  for (std::size_t p = 0; p < position_count(video.size(), shape); ++p) labels.push_back(position_label(video, p, shape));
  return labels;
}

/// Backbone-only baseline: each position's clip classified independently.
/// With `one_hot`, the argmax class gets score 1 and the rest 0.
template <class T>
PredictionSet per_clip_framewise(Backbone<T>& model, const std::vector<VideoRecord>& videos, const ClipShape& shape,
                                 bool one_hot) {
  PredictionSet out;
  out.K = model.config.K;
  for (const auto& v : videos) {
    std::vector<Clip> clips;
    for (std::size_t p = 0; p < position_count(v.size(), shape); ++p) clips.push_back(tile_clip(v, p, shape));
    auto preds = predict_clips(model, clips);
    if (one_hot)
      for (auto& row : preds.scores) {
        const auto k = argmax(row);
        std::fill(row.begin(), row.end(), 0.0);
        row[k] = 1.0;
      }
    add_framewise(out, preds.scores, v.phases, shape);
  }
  return out;
}

}  // namespace stor2
