#pragma once

// JSONL dataset files: one VideoRecord per line.
//
//   {"id": str, "fps_subsample": 2,
//    "frames": [[{"cat": int, "box": [cx, cy, w, h], "conf": float}, ...], ...],
//    "phases": [int, ...],
//    "appearance": [[float, ...], ...]}          (optional)

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "stor2/io.hpp"
#include "stor2/scene.hpp"

namespace stor2 {

struct DatasetLimits {
  std::size_t categories = 6;
  std::size_t classes = 9;
};

inline nlohmann::json to_json(const VideoRecord& v) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : v.frames) {
    nlohmann::json dets = nlohmann::json::array();
    for (const auto& d : f) {
      if (!d.valid) continue;
      dets.push_back({{"cat", d.category}, {"box", {d.box.cx, d.box.cy, d.box.w, d.box.h}}, {"conf", d.conf}});
    }
    frames.push_back(std::move(dets));
  }
  nlohmann::json j = {{"id", v.id}, {"fps_subsample", ClipShape::stride}, {"frames", std::move(frames)},
                      {"phases", v.phases}};
  if (v.appearance) j["appearance"] = *v.appearance;
  return j;
}

inline VideoRecord video_from_json(const nlohmann::json& j, const DatasetLimits& limits) {
  VideoRecord v;
  v.id = j.at("id").get<std::string>();
  if (j.contains("fps_subsample") && j.at("fps_subsample").get<int>() != static_cast<int>(ClipShape::stride))
    throw ValidationError("video '" + v.id + "': unsupported fps_subsample");
  for (const auto& jf : j.at("frames")) {
    Frame frame;
    for (const auto& jd : jf) {
      Detection d;
      const auto cat = jd.at("cat").get<long long>();
      if (cat < 0) throw ValidationError("video '" + v.id + "': negative category");
      d.category = static_cast<std::size_t>(cat);
      const auto& box = jd.at("box");
      if (!box.is_array() || box.size() != 4) throw ValidationError("video '" + v.id + "': box needs 4 numbers");
      d.box = {box[0].get<double>(), box[1].get<double>(), box[2].get<double>(), box[3].get<double>()};
      d.conf = jd.value("conf", 1.0);
      frame.push_back(d);
    }
    v.frames.push_back(std::move(frame));
  }
  for (const auto& p : j.at("phases")) {
    const auto ph = p.get<long long>();
    if (ph < 0) throw ValidationError("video '" + v.id + "': negative phase");
    v.phases.push_back(static_cast<std::size_t>(ph));
  }
  if (j.contains("appearance") && !j.at("appearance").is_null())
    v.appearance = j.at("appearance").get<std::vector<std::vector<double>>>();
  validate(v, limits.categories, limits.classes);
  return v;
}

/// Streams records in file order. Blank lines are skipped.
inline void for_each_record(const std::filesystem::path& path, const DatasetLimits& limits,
                            const std::function<void(VideoRecord&&)>& sink) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
    VideoRecord v;
    try {
      v = video_from_json(j, limits);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
    sink(std::move(v));
  }
}

inline std::vector<VideoRecord> load_dataset(const std::filesystem::path& path, const DatasetLimits& limits = {}) {
  std::vector<VideoRecord> out;
  for_each_record(path, limits, [&](VideoRecord&& v) { out.push_back(std::move(v)); });
  return out;
}

inline std::string serialize_dataset(const std::vector<VideoRecord>& videos) {
  std::string out;
  for (const auto& v : videos) {
    out += to_json(v).dump();
    out += '\n';
  }
  return out;
}

inline void save_dataset(const std::filesystem::path& path, const std::vector<VideoRecord>& videos) {
  io::write_file_atomic(path, serialize_dataset(videos));
}

}  // namespace stor2
