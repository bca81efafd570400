#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>

#include "stor2/dataset_io.hpp"
#include "stor2/orsim.hpp"
#include "stor2/scene.hpp"
#include "support/temp_dir.hpp"

using namespace stor2;

namespace {

Detection det(std::size_t cat, double cx, double conf = 1.0) { return {{cx, 0.5, 0.1, 0.1}, cat, true, conf}; }

VideoRecord single_phase(std::size_t frames, std::size_t label = 3) {
  VideoRecord v;
  v.id = "v";
  for (std::size_t f = 0; f < frames; ++f) v.frames.push_back({det(0, static_cast<double>(f) / 100.0)});
  v.phases.assign(frames, label);
  return v;
}

}  // namespace

TEST(BoundingBox, VectorOrderIsCxCyWH) {
  BoundingBox b{0.1, 0.2, 0.3, 0.4};
  EXPECT_EQ(b.as_vector(), (std::array<double, 4>{0.1, 0.2, 0.3, 0.4}));
}

TEST(CategoryTable, DefaultOrderAndPaddingId) {
  CategoryTable t;
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.name(0), "human");
  EXPECT_EQ(t.name(4), "or-table");
  EXPECT_EQ(t.padding_id(), 6u);
  EXPECT_EQ(t.id_of("psc"), 3u);
  EXPECT_THROW(t.id_of("robot"), ConfigError);
}

TEST(PadFrame, PadsToNSlots) {
  Frame f = pad_frame({det(0, 0.1), det(1, 0.2), det(2, 0.3)}, 15, 6);
  ASSERT_EQ(f.size(), 15u);
  std::size_t padded = 0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (i < 3) {
      EXPECT_TRUE(f[i].valid);
    } else {
      EXPECT_FALSE(f[i].valid);
      EXPECT_EQ(f[i].category, 6u);
      EXPECT_TRUE(f[i].box.is_zero());
      ++padded;
    }
  }
  EXPECT_EQ(padded, 12u);
}

TEST(PadFrame, EmptyAndFull) {
  auto empty = pad_frame({}, 15, 6);
  for (const auto& d : empty) EXPECT_FALSE(d.valid);
  Frame full;
  for (std::size_t i = 0; i < 15; ++i) full.push_back(det(i % 6, i / 20.0));
  auto out = pad_frame(full, 15, 6);
  EXPECT_EQ(out, full);
}

TEST(PadFrame, OverfullKeepsHighestConfidenceInOrder) {
  Frame f{det(0, 0.1, 0.9), det(1, 0.2, 0.1), det(2, 0.3, 0.8), det(3, 0.4, 0.2)};
  auto out = pad_frame(f, 2, 6);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].category, 0u);
  EXPECT_EQ(out[1].category, 2u);
}

TEST(SampleClip, ExactSpanForcesStart) {
  auto v = single_phase(16);
  std::mt19937_64 rng(1);
  auto clip = sample_clip(v, {0, 16, 3}, ClipShape{}, rng);
  EXPECT_EQ(clip.source.start_frame, 0u);
  EXPECT_EQ(clip.label, 3u);
  ASSERT_EQ(clip.frames.size(), 8u);
  for (const auto& fr : clip.frames) EXPECT_EQ(fr.size(), 15u);
}

TEST(SampleClip, StrideTwoAndSixteenFrameSpan) {
  auto v = single_phase(100);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    auto clip = sample_clip(v, {0, 100, 3}, ClipShape{}, rng);
    for (std::size_t t = 1; t < clip.source_frames.size(); ++t)
      EXPECT_EQ(clip.source_frames[t] - clip.source_frames[t - 1], 2u);
    EXPECT_LE(clip.source.start_frame + 16, 100u);
    EXPECT_EQ(clip.source_frames.back() - clip.source_frames.front(), 14u);
  }
}

TEST(SampleClip, StartIsUniformOverValidRange) {
  auto v = single_phase(20);  // starts 0..4
  std::mt19937_64 rng(9);
  std::vector<int> hist(5, 0);
  for (int i = 0; i < 5000; ++i) ++hist.at(sample_clip(v, {0, 20, 3}, ClipShape{}, rng).source.start_frame);
  for (int h : hist) EXPECT_NEAR(h, 1000, 150);
}

TEST(SampleClip, SameSeedSameClip) {
  auto v = single_phase(64);
  std::mt19937_64 a(3), b(3);
  EXPECT_EQ(sample_clip(v, {0, 64, 3}, ClipShape{}, a), sample_clip(v, {0, 64, 3}, ClipShape{}, b));
}

TEST(SampleClip, ShortRunPolicy) {
  auto v = single_phase(10);
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_clip(v, {0, 10, 3}, ClipShape{}, rng), SamplingError);
  auto clip = sample_clip(v, {0, 10, 3}, ClipShape{}, rng, ShortRunPolicy::repeat_last);
  EXPECT_EQ(clip.source_frames.back(), 9u);
  EXPECT_EQ(clip.frames.size(), 8u);
}

TEST(SampleClip, MixedRunRejected) {
  auto v = single_phase(32);
  v.phases[20] = 4;
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_clip(v, {0, 32, 3}, ClipShape{}, rng), SamplingError);
}

TEST(Tiling, PositionsAndLabels) {
  ClipShape s;
  EXPECT_EQ(position_count(64, s), 4u);
  EXPECT_EQ(position_count(70, s), 4u);
  EXPECT_EQ(position_count(5, s), 1u);
  EXPECT_EQ(position_count(0, s), 0u);
  EXPECT_EQ(position_frames(3, 70, s).end, 70u);
  VideoRecord v = single_phase(32, 1);
  for (std::size_t f = 10; f < 32; ++f) v.phases[f] = 2;
  EXPECT_EQ(position_label(v, 0, s), 1u);  // 10 of 16 frames
  EXPECT_EQ(position_label(v, 1, s), 2u);
  EXPECT_EQ(majority_label({4, 4, 2, 2}, 0, 4), 2u);  // tie -> lowest id
}

TEST(SplitLabeledFraction, PartitionProperties) {
  std::vector<int> items(400);
  std::iota(items.begin(), items.end(), 0);
  auto [labeled, rest] = split_labeled_fraction(items, 0.05, 42);
  EXPECT_EQ(labeled.size(), 20u);
  std::set<int> all(labeled.begin(), labeled.end());
  for (int r : rest) EXPECT_TRUE(all.insert(r).second);
  EXPECT_EQ(all.size(), 400u);
  auto again = split_labeled_fraction(items, 0.05, 42);
  EXPECT_EQ(again.first, labeled);
  auto full = split_labeled_fraction(items, 1.0, 1);
  EXPECT_EQ(full.first.size(), 400u);
  EXPECT_TRUE(full.second.empty());
}

TEST(SplitLabeledFraction, Errors) {
  std::vector<int> none;
  EXPECT_THROW(split_labeled_fraction(none, 0.5, 1), ArgumentError);
  std::vector<int> ten(10);
  EXPECT_THROW(split_labeled_fraction(ten, 0.05, 1), ArgumentError);
  EXPECT_THROW(split_labeled_fraction(ten, 1.5, 1), ArgumentError);
}

TEST(Dataset, EmptyFileGivesEmptyStream) {
  stor2::testing::TempDir dir;
  std::ofstream(dir / "empty.jsonl").close();
  EXPECT_TRUE(load_dataset(dir / "empty.jsonl").empty());
}

TEST(Dataset, OneRecordTwoFrames) {
  stor2::testing::TempDir dir;
  std::ofstream(dir / "one.jsonl")
      << R"({"id":"a","fps_subsample":2,"frames":[[{"cat":0,"box":[0.5,0.5,0.1,0.2],"conf":0.9}],)"
      << R"([{"cat":3,"box":[0.2,0.3,0.1,0.1],"conf":0.8}]],"phases":[1,1]})" << "\n";
  auto videos = load_dataset(dir / "one.jsonl");
  ASSERT_EQ(videos.size(), 1u);
  EXPECT_EQ(videos[0].size(), 2u);
  EXPECT_EQ(videos[0].frames[1][0].category, 3u);
}

TEST(Dataset, MalformedLineReportsLineNumber) {
  stor2::testing::TempDir dir;
  auto path = dir / "bad.jsonl";
  std::ofstream(path) << R"({"id":"a","frames":[[]],"phases":[0]})" << "\n" << "{not json\n";
  try {
    load_dataset(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(Dataset, BoxOutOfRangeIsValidationError) {
  stor2::testing::TempDir dir;
  auto path = dir / "range.jsonl";
  std::ofstream(path) << R"({"id":"a","frames":[[{"cat":0,"box":[1.5,0.5,0.1,0.1]}]],"phases":[0]})" << "\n";
  EXPECT_THROW(load_dataset(path), ValidationError);
}

TEST(Dataset, RoundTripGenerated) {
  stor2::testing::TempDir dir;
  auto cfg = orsim::default_config();
  std::vector<VideoRecord> videos;
  for (int i = 0; i < 3; ++i) {
    std::mt19937_64 rng(100 + i);
    videos.push_back(orsim::generate_procedure(cfg, rng, "p" + std::to_string(i)));
  }
  save_dataset(dir / "d.jsonl", videos);
  auto back = load_dataset(dir / "d.jsonl");
  EXPECT_EQ(back, videos);
  EXPECT_EQ(serialize_dataset(back), serialize_dataset(videos));
}
