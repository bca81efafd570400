#pragma once

// Scene types: detections, padded clips, full-length videos, and the
// sampling rules that turn videos into clips.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stor2/errors.hpp"
#include "stor2/log.hpp"

namespace stor2 {

/// Normalized box: center (cx, cy) and extent (w, h), all in [0, 1].
struct BoundingBox {
  double cx = 0, cy = 0, w = 0, h = 0;

  std::array<double, 4> as_vector() const { return {cx, cy, w, h}; }
  bool in_unit_range() const {
    for (double v : as_vector())
      if (!(v >= 0.0 && v <= 1.0)) return false;
    return true;
  }
  bool is_zero() const { return cx == 0 && cy == 0 && w == 0 && h == 0; }
  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

struct Detection {
  BoundingBox box;
  std::size_t category = 0;
  bool valid = true;
  double conf = 1.0;

  static Detection padding(std::size_t padding_id) { return {{}, padding_id, false, 0.0}; }
  friend bool operator==(const Detection&, const Detection&) = default;
};

using Frame = std::vector<Detection>;

/// Ordered object categories. Ids are dense; id == size() marks padding.
class CategoryTable {
 public:
  CategoryTable() : names_{"human", "table", "gurney", "psc", "or-table", "vsc"} {}
  explicit CategoryTable(std::vector<std::string> names) : names_(std::move(names)) {
    if (names_.empty()) throw ConfigError("category table is empty");
  }

  std::size_t size() const { return names_.size(); }
  std::size_t padding_id() const { return names_.size(); }
  const std::string& name(std::size_t id) const { return names_.at(id); }
  const std::vector<std::string>& names() const { return names_; }

  std::size_t id_of(const std::string& name) const {
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw ConfigError("unknown category '" + name + "'");
    return static_cast<std::size_t>(it - names_.begin());
  }

 private:
  std::vector<std::string> names_;
};

/// Fixed geometry of the clip tensor.
struct ClipShape {
  std::size_t T = 8;   // frames per clip
  std::size_t N = 15;  // detection slots per frame
  std::size_t C = 6;   // categories
  static constexpr std::size_t stride = 2;

  /// Source frames covered by one clip.
  std::size_t span() const { return T * stride; }
  std::size_t padding_id() const { return C; }
};

struct ClipSource {
  std::string video_id;
  std::size_t start_frame = 0;
  friend bool operator==(const ClipSource&, const ClipSource&) = default;
};

struct Clip {
  std::vector<Frame> frames;  // T frames of exactly N slots
  std::size_t label = 0;
  ClipSource source;
  std::vector<std::size_t> source_frames;
  std::optional<std::vector<double>> appearance;

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (const auto& f : frames)
      for (const auto& d : f) n += d.valid;
    return n;
  }
  friend bool operator==(const Clip&, const Clip&) = default;
};

struct VideoRecord {
  std::string id;
  std::vector<Frame> frames;
  std::vector<std::size_t> phases;
  std::optional<std::vector<std::vector<double>>> appearance;  // one vector per clip position

  std::size_t size() const { return frames.size(); }
  friend bool operator==(const VideoRecord&, const VideoRecord&) = default;
};

/// Half-open frame range [begin, end) sharing one phase label.
struct FrameSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t label = 0;
  std::size_t length() const { return end - begin; }
  friend bool operator==(const FrameSpan&, const FrameSpan&) = default;
};

inline std::vector<FrameSpan> phase_runs(const VideoRecord& video) {
  std::vector<FrameSpan> runs;
  for (std::size_t f = 0; f < video.phases.size(); ++f) {
    if (runs.empty() || runs.back().label != video.phases[f])
      runs.push_back({f, f + 1, video.phases[f]});
    else
      runs.back().end = f + 1;
  }
  return runs;
}

/// Checks every VideoRecord invariant; throws ValidationError.
inline void validate(const VideoRecord& video, std::size_t categories, std::size_t classes) {
  if (video.phases.size() != video.frames.size())
    throw ValidationError("video '" + video.id + "': " + std::to_string(video.phases.size()) +
                          " phase labels for " + std::to_string(video.frames.size()) + " frames");
  for (std::size_t f = 0; f < video.frames.size(); ++f) {
    if (video.phases[f] >= classes)
      throw ValidationError("video '" + video.id + "' frame " + std::to_string(f) + ": phase " +
                            std::to_string(video.phases[f]) + " >= " + std::to_string(classes));
    for (const auto& d : video.frames[f]) {
      if (!d.box.in_unit_range())
        throw ValidationError("video '" + video.id + "' frame " + std::to_string(f) + ": box outside [0,1]");
      if (d.category >= categories)
        throw ValidationError("video '" + video.id + "' frame " + std::to_string(f) + ": category " +
                              std::to_string(d.category) + " >= " + std::to_string(categories));
    }
  }
}

/// Lays detections into exactly N slots: valid detections first, then
/// zero-box padding slots. Overfull frames keep the N most confident
/// detections in their original order.
inline Frame pad_frame(const std::vector<Detection>& detections, std::size_t slots, std::size_t padding_id) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < detections.size(); ++i)
    if (detections[i].valid) keep.push_back(i);
  if (keep.size() > slots) {
    log::debug("pad_frame: truncating ", keep.size(), " detections to ", slots);
    std::stable_sort(keep.begin(), keep.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].conf > detections[b].conf; });
    keep.resize(slots);
    std::sort(keep.begin(), keep.end());
  }
  Frame out;
  out.reserve(slots);
  for (auto i : keep) out.push_back(detections[i]);
  while (out.size() < slots) out.push_back(Detection::padding(padding_id));
  return out;
}

enum class ShortRunPolicy { reject, repeat_last };

/// Takes T frames at stride 2 from a single-phase run, starting uniformly
/// at random among the starts whose 2T-frame span fits in the run.
inline Clip sample_clip(const VideoRecord& video, const FrameSpan& run, const ClipShape& shape,
                        std::mt19937_64& rng, ShortRunPolicy policy = ShortRunPolicy::reject) {
  if (run.end > video.frames.size() || run.begin >= run.end)
    throw SamplingError("sample_clip: run [" + std::to_string(run.begin) + ", " + std::to_string(run.end) +
                        ") outside video '" + video.id + "'");
  for (std::size_t f = run.begin; f < run.end; ++f)
    if (video.phases[f] != run.label) throw SamplingError("sample_clip: run mixes phases in '" + video.id + "'");
  const std::size_t span = shape.span();
  if (run.length() < span && policy == ShortRunPolicy::reject)
    throw SamplingError("sample_clip: run of " + std::to_string(run.length()) + " frames shorter than " +
                        std::to_string(span));
  std::size_t start = run.begin;
  if (run.length() > span) {
    std::uniform_int_distribution<std::size_t> pick(run.begin, run.end - span);
    start = pick(rng);
  }
  Clip clip;
  clip.label = run.label;
  clip.source = {video.id, start};
  for (std::size_t t = 0; t < shape.T; ++t) {
    const std::size_t f = std::min(start + t * ClipShape::stride, run.end - 1);
    clip.source_frames.push_back(f);
    clip.frames.push_back(pad_frame(video.frames[f], shape.N, shape.padding_id()));
  }
  if (video.appearance && !video.appearance->empty()) {
    const std::size_t center = start + std::min(span, run.end - start) / 2;
    const std::size_t pos = std::min(center / span, video.appearance->size() - 1);
    clip.appearance = (*video.appearance)[pos];
  }
  return clip;
}

/// Number of non-overlapping clip positions a video is tiled into. A
/// non-empty video shorter than one clip span still yields one position.
inline std::size_t position_count(std::size_t frames, const ClipShape& shape) {
  if (frames == 0) return 0;
  return std::max<std::size_t>(1, frames / shape.span());
}

/// Frames whose predictions come from position `p`; the last position also
/// owns the tail that does not fill a whole span.
inline FrameSpan position_frames(std::size_t p, std::size_t frames, const ClipShape& shape) {
  const std::size_t positions = position_count(frames, shape);
  const std::size_t begin = p * shape.span();
  const std::size_t end = p + 1 == positions ? frames : std::min(frames, begin + shape.span());
  return {begin, end, 0};
}

/// Most frequent phase in [begin, end); ties go to the lowest id.
inline std::size_t majority_label(const std::vector<std::size_t>& phases, std::size_t begin, std::size_t end) {
  std::vector<std::size_t> counts;
  for (std::size_t f = begin; f < end && f < phases.size(); ++f) {
    if (phases[f] >= counts.size()) counts.resize(phases[f] + 1, 0);
    ++counts[phases[f]];
  }
  if (counts.empty()) throw ArgumentError("majority_label: empty span");
  return static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

/// Label of clip position `p`: majority phase over its span of 2T frames.
inline std::size_t position_label(const VideoRecord& video, std::size_t p, const ClipShape& shape) {
  const std::size_t begin = p * shape.span();
  return majority_label(video.phases, begin, std::min(video.size(), begin + shape.span()));
}

/// The clip at tiling position `p` (stride 2, final frame repeated when
/// the video ends early). Label is the position's majority phase.
inline Clip tile_clip(const VideoRecord& video, std::size_t p, const ClipShape& shape) {
  if (p >= position_count(video.size(), shape))
    throw RangeError("tile_clip: position " + std::to_string(p) + " outside video '" + video.id + "'");
  Clip clip;
  const std::size_t start = p * shape.span();
  clip.label = position_label(video, p, shape);
  clip.source = {video.id, start};
  for (std::size_t t = 0; t < shape.T; ++t) {
    const std::size_t f = std::min(start + t * ClipShape::stride, video.size() - 1);
    clip.source_frames.push_back(f);
    clip.frames.push_back(pad_frame(video.frames[f], shape.N, shape.padding_id()));
  }
  if (video.appearance && p < video.appearance->size()) clip.appearance = (*video.appearance)[p];
  return clip;
}

/// Uniform seed-deterministic choice of round(fraction * n) indices
/// (sorted), and the sorted complement.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                                   std::uint64_t seed) {
  if (n == 0) throw ArgumentError("split_labeled_fraction: empty input");
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw ArgumentError("split_labeled_fraction: fraction must be in (0, 1], got " + std::to_string(fraction));
  if (fraction * static_cast<double>(n) < 1.0)
    throw ArgumentError("split_labeled_fraction: fraction " + std::to_string(fraction) + " of " +
                        std::to_string(n) + " items selects nothing");
  auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  k = std::clamp<std::size_t>(k, 1, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  std::vector<std::size_t> rest(order.begin() + static_cast<std::ptrdiff_t>(k), order.end());
  std::sort(chosen.begin(), chosen.end());
  std::sort(rest.begin(), rest.end());
  return {chosen, rest};
}

/// Video-level labeled/remainder partition.
template <class Item>
std::pair<std::vector<Item>, std::vector<Item>> split_labeled_fraction(const std::vector<Item>& items,
                                                                       double fraction, std::uint64_t seed) {
  auto [chosen, rest] = split_indices(items.size(), fraction, seed);
  std::pair<std::vector<Item>, std::vector<Item>> out;
  for (auto i : chosen) out.first.push_back(items[i]);
  for (auto i : rest) out.second.push_back(items[i]);
  return out;
}

/// `per_run` clips from every phase run of every video.
inline std::vector<Clip> sample_training_clips(const std::vector<VideoRecord>& videos, const ClipShape& shape,
                                               std::size_t per_run, std::uint64_t seed) {
  std::vector<Clip> clips;
  std::mt19937_64 rng(seed);
  for (const auto& v : videos)
    for (const auto& run : phase_runs(v))
      for (std::size_t k = 0; k < per_run; ++k)
        clips.push_back(sample_clip(v, run, shape, rng, ShortRunPolicy::repeat_last));
  return clips;
}

}  // namespace stor2
