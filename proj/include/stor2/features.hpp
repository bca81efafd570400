#pragma once

// Per-position clip features and their on-disk store.
//
// One binary file per video, little-endian:
//
//   8      magic "STOR2FEA"
//   u32    format version (1)
//   u32    id length, id bytes
//   u64    position count P
//   u64    feature width D (d_clip)
//   f32    P*D values, position-major
//   u32    P position labels
//
// A sidecar features.json lists the files with their hashes, the feature
// width and the hash of the checkpoint that produced them.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "stor2/backbone.hpp"
#include "stor2/errors.hpp"
#include "stor2/io.hpp"
#include "stor2/scene.hpp"
#include "stor2/train.hpp"

namespace stor2 {

inline constexpr char kFeatureMagic[8] = {'S', 'T', 'O', 'R', '2', 'F', 'E', 'A'};
inline constexpr std::uint32_t kFeatureVersion = 1;

struct VideoFeatures {
  std::string id;
  std::size_t width = 0;
  std::vector<std::vector<float>> rows;  // one per position
  std::vector<std::size_t> labels;

  std::size_t positions() const { return rows.size(); }
  friend bool operator==(const VideoFeatures&, const VideoFeatures&) = default;
};

/// φ_clip (before the classifier) for every tiled position of every video.
/// Parameters are only read.
template <class T>
std::vector<VideoFeatures> extract_features(Backbone<T>& model, const std::vector<VideoRecord>& videos,
                                            const ClipShape& shape, std::size_t batch = 64) {
  const auto& cfg = model.config;
  if (shape.T != cfg.T || shape.C != cfg.C)
    throw CheckpointError("extract_features: checkpoint expects T=" + std::to_string(cfg.T) + ", C=" +
                          std::to_string(cfg.C) + " but data has T=" + std::to_string(shape.T) + ", C=" +
                          std::to_string(shape.C));
  if (cfg.fusion()) throw CheckpointError("extract_features: checkpoint has a fused classifier; use a graph-only one");
  std::vector<VideoFeatures> out;
  out.reserve(videos.size());
  for (const auto& v : videos) {
    VideoFeatures vf;
    vf.id = v.id;
    vf.width = cfg.clip_width();
    std::vector<Clip> clips;
    for (std::size_t p = 0; p < position_count(v.size(), shape); ++p) clips.push_back(tile_clip(v, p, shape));
    for (std::size_t first = 0; first < clips.size(); first += batch) {
      const std::size_t n = std::min(batch, clips.size() - first);
      Tape<T> tape;
      auto res = forward(tape, model, std::span<const Clip>(clips.data() + first, n));
      auto values = res.clip_features.value();
      for (std::size_t i = 0; i < n; ++i) {
        auto row = values.subspan(i * vf.width, vf.width);
        vf.rows.emplace_back(row.begin(), row.end());
      }
    }
    for (const auto& c : clips) vf.labels.push_back(c.label);
    out.push_back(std::move(vf));
  }
  return out;
}

inline std::string encode_features(const VideoFeatures& vf) {
  io::ByteWriter w;
  w.put_bytes({kFeatureMagic, 8});
  w.put<std::uint32_t>(kFeatureVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(vf.id.size()));
  w.put_bytes(vf.id);
  w.put<std::uint64_t>(vf.positions());
  w.put<std::uint64_t>(vf.width);
  for (const auto& row : vf.rows) {
    if (row.size() != vf.width) throw DimensionError("encode_features: ragged rows in '" + vf.id + "'");
    for (float x : row) w.put<float>(x);
  }
  for (auto l : vf.labels) w.put<std::uint32_t>(static_cast<std::uint32_t>(l));
  return w.bytes();
}

inline VideoFeatures decode_features(std::string_view bytes) {
  try {
    io::ByteReader r(bytes);
    if (r.get_bytes(8) != std::string_view(kFeatureMagic, 8)) throw CheckpointError("not a feature file");
    if (auto v = r.get<std::uint32_t>(); v != kFeatureVersion)
      throw CheckpointError("feature format version " + std::to_string(v) + " unsupported");
    VideoFeatures vf;
    vf.id = std::string(r.get_bytes(r.get<std::uint32_t>()));
    const auto positions = r.get<std::uint64_t>();
    vf.width = r.get<std::uint64_t>();
    vf.rows.assign(positions, std::vector<float>(vf.width));
    for (auto& row : vf.rows)
      for (auto& x : row) x = r.get<float>();
    for (std::uint64_t p = 0; p < positions; ++p) vf.labels.push_back(r.get<std::uint32_t>());
    if (!r.done()) throw CheckpointError("trailing bytes in feature file");
    return vf;
  } catch (const IoError& e) {
    throw CheckpointError(std::string("corrupt feature file: ") + e.what());
  }
}

inline std::string feature_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "video-%05zu.fea", index);
  return buf;
}

/// Writes one file per video plus features.json into `dir`.
inline void save_feature_store(const std::filesystem::path& dir, const std::vector<VideoFeatures>& store,
                               const nlohmann::json& provenance = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest{{"format", "stor2-features"}, {"version", kFeatureVersion}, {"videos", nlohmann::json::array()}};
  if (!store.empty()) manifest["width"] = store.front().width;
  if (!provenance.is_null()) manifest["source"] = provenance;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto bytes = encode_features(store[i]);
    const auto name = feature_file_name(i);
    io::write_file_atomic(dir / name, bytes);
    manifest["videos"].push_back(
        {{"id", store[i].id}, {"file", name}, {"positions", store[i].positions()}, {"hash", io::fnv1a_hex(bytes)}});
  }
  io::write_file_atomic(dir / "features.json", manifest.dump(2) + "\n");
}

inline std::vector<VideoFeatures> load_feature_store(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "features.json";
  if (!std::filesystem::exists(manifest_path))
    throw DependencyError("no feature store at '" + dir.string() + "' (run `stor2 extract` first)");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("features.json: " + std::string(e.what()));
  }
  std::vector<VideoFeatures> store;
  for (const auto& entry : manifest.at("videos")) {
    const auto bytes = io::read_file(dir / entry.at("file").get<std::string>());
    if (io::fnv1a_hex(bytes) != entry.at("hash").get<std::string>())
      throw CheckpointError("feature file '" + entry.at("file").get<std::string>() + "' does not match its hash");
    store.push_back(decode_features(bytes));
  }
  return store;
}

enum class SequenceInput { graph, fusion, appearance };

inline SequenceInput parse_sequence_input(const std::string& s) {
  if (s == "graph" || s == "graph-only") return SequenceInput::graph;
  if (s == "fusion") return SequenceInput::fusion;
  if (s == "appearance" || s == "appearance-only") return SequenceInput::appearance;
  throw ConfigError("variant: expected graph, fusion or appearance, got '" + s + "'");
}

inline std::string to_string(SequenceInput v) {
  switch (v) {
    case SequenceInput::graph: return "graph";
    case SequenceInput::fusion: return "fusion";
    case SequenceInput::appearance: return "appearance";
  }
  return "?";
}

/// GRU inputs for one video. `features` may be null for the appearance-only
/// variant; the other variants need it to be aligned with the video.
template <class T>
SequenceSample<T> make_sequence_sample(const VideoRecord& video, const VideoFeatures* features, const ClipShape& shape,
                                       SequenceInput variant) {
  SequenceSample<T> s;
  s.id = video.id;
  s.frame_phases = video.phases;
  s.labels = position_labels(video, shape);
  const std::size_t positions = s.labels.size();
  const bool graph = variant != SequenceInput::appearance;
  const bool appearance = variant != SequenceInput::graph;
  if (graph) {
    if (!features) throw ArgumentError("make_sequence_sample: '" + video.id + "' needs clip features");
    if (features->id != video.id || features->positions() != positions)
      throw ArgumentError("make_sequence_sample: features for '" + features->id + "' (" +
                          std::to_string(features->positions()) + " positions) do not align with '" + video.id +
                          "' (" + std::to_string(positions) + ")");
  }
  if (appearance && (!video.appearance || video.appearance->size() != positions))
    throw ArgumentError("make_sequence_sample: '" + video.id + "' lacks one appearance vector per position");
  for (std::size_t p = 0; p < positions; ++p) {
    std::vector<T> x;
    if (graph) x.assign(features->rows[p].begin(), features->rows[p].end());
    if (appearance) x.insert(x.end(), (*video.appearance)[p].begin(), (*video.appearance)[p].end());
    s.inputs.push_back(std::move(x));
  }
  return s;
}

}  // namespace stor2
