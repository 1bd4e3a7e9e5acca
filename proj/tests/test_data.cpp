#include <gtest/gtest.h>

#include <fstream>
#include <thread>

#include "support.hpp"

using namespace mjp;

namespace {

// Distance from p to the surface of the box [lo, hi].
double surface_distance(const Vec3& p, const Vec3& lo, const Vec3& hi) {
  double outside = 0.0, inside = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double d = std::max({lo[a] - p[a], p[a] - hi[a], 0.0});
    outside += d * d;
    inside = std::min({inside, std::abs(p[a] - lo[a]), std::abs(p[a] - hi[a])});
  }
  return outside > 0.0 ? std::sqrt(outside) : inside;
}

}  // namespace

TEST(Data, SameSeedSameFrame) {
  const auto a = generate_scene({}, 123), b = generate_scene({}, 123);
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(a.image, b.image);
  ASSERT_EQ(a.boxes.size(), b.boxes.size());
  for (std::size_t i = 0; i < a.boxes.size(); ++i) EXPECT_EQ(a.boxes[i].center, b.boxes[i].center);
  const auto c = generate_scene({}, 124);
  EXPECT_NE(a.points, c.points);
}

TEST(Data, GeneratorsDoNotShareState) {
  const auto ref_a = generate_scene({}, 7), ref_b = generate_scene({}, 8);
  std::vector<SceneFrame> a, b;
  std::thread ta([&] {
    for (int i = 0; i < 3; ++i) a.push_back(generate_scene({}, 7));
  });
  std::thread tb([&] {
    for (int i = 0; i < 3; ++i) b.push_back(generate_scene({}, 8));
  });
  ta.join();
  tb.join();
  for (const auto& f : a) EXPECT_EQ(f.points, ref_a.points);
  for (const auto& f : b) EXPECT_EQ(f.points, ref_b.points);
}

TEST(Data, NoiselessBoxPointsLieOnTheBox) {
  SceneConfig cfg;
  cfg.noise_sigma = 0.0;
  cfg.wall_probability = 0.0;
  std::size_t on_box = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const auto layout = generate_layout(cfg, rng, seed);
    for (const auto& h : cast_lidar(layout, cfg, rng)) {
      if (h.solid < 0) {
        EXPECT_NEAR(h.point.z(), cfg.ground_z, 1e-9);
        continue;
      }
      const auto& s = layout.solids[h.solid];
      EXPECT_LT(surface_distance(h.point, s.min, s.max), 1e-9);
      ++on_box;
    }
  }
  EXPECT_GT(on_box, 100u);
}

TEST(Data, EmptySceneIsGroundOnly) {
  SceneConfig cfg;
  cfg.n_boxes_min = cfg.n_boxes_max = 0;
  cfg.wall_probability = 0.0;
  const auto f = generate_scene(cfg, 99);
  EXPECT_TRUE(f.boxes.empty());
  ASSERT_FALSE(f.points.empty());
  // Noise moves a point along its ray, so the z error is at most |noise|.
  for (const auto& p : f.points) EXPECT_NEAR(p.z, cfg.ground_z, 6.0 * cfg.noise_sigma + 1e-5);
  // Only downward rays reach the ground within range.
  EXPECT_LT(f.points.size(), static_cast<std::size_t>(cfg.lidar_azimuth * cfg.lidar_elevation));
}

TEST(Data, PointsStayWithinNoiseOfASurface) {
  const SceneConfig cfg;
  for (std::uint64_t seed = 10; seed < 14; ++seed) {
    Rng rng(seed);
    const auto layout = generate_layout(cfg, rng, seed);
    for (const auto& h : cast_lidar(layout, cfg, rng)) {
      const double range = h.point.norm();
      EXPECT_LE(std::abs(range - h.true_range), 6.0 * cfg.noise_sigma);
      const Vec3 exact = h.direction * h.true_range;
      if (h.solid < 0)
        EXPECT_NEAR(exact.z(), cfg.ground_z, 1e-9);
      else
        EXPECT_LT(surface_distance(exact, layout.solids[h.solid].min, layout.solids[h.solid].max), 1e-9);
      EXPECT_GE(h.intensity, 0.0);
      EXPECT_LE(h.intensity, 1.0);
    }
  }
}

TEST(Data, StoredPointsMatchHitsInSinglePrecision) {
  const SceneConfig cfg;
  Rng rng(21);
  const auto layout = generate_layout(cfg, rng, 21);
  const auto hits = cast_lidar(layout, cfg, rng);
  const auto f = generate_scene(cfg, 21);
  ASSERT_EQ(hits.size(), f.points.size());
  for (std::size_t i = 0; i < hits.size(); ++i) {
    EXPECT_EQ(f.points[i].x, static_cast<float>(hits[i].point.x()));
    EXPECT_EQ(f.points[i].z, static_cast<float>(hits[i].point.z()));
  }
}

TEST(Data, BoxesAreAxisAlignedAndClearOfEgo) {
  for (const auto& f : test::make_frames(10, 3)) {
    EXPECT_GE(f.boxes.size(), 2u);
    EXPECT_LE(f.boxes.size(), 6u);
    for (const auto& b : f.boxes) {
      EXPECT_EQ(b.yaw, 0.0);
      EXPECT_NEAR(b.center.z() - 0.5 * b.size.z(), -1.6, 1e-12);
      const bool near_ego = b.center.x() - 0.5 * b.size.x() < 3.0 && b.center.x() + 0.5 * b.size.x() > -3.0 &&
                            b.center.y() - 0.5 * b.size.y() < 2.0 && b.center.y() + 0.5 * b.size.y() > -2.0;
      EXPECT_FALSE(near_ego);
    }
  }
}

TEST(Data, PointFileRoundTrip) {
  test::TempDir dir("data_points");
  Rng rng(4);
  std::vector<PointXYZI> pts(1000);
  for (auto& p : pts) p = {static_cast<float>(rng.normal()), static_cast<float>(rng.normal()),
                           static_cast<float>(rng.normal()), static_cast<float>(rng.uniform())};
  write_pointcloud(dir.path() / "p.bin", pts);
  EXPECT_EQ(std::filesystem::file_size(dir.path() / "p.bin"), 16000u);
  EXPECT_EQ(read_pointcloud(dir.path() / "p.bin"), pts);
  write_pointcloud(dir.path() / "e.bin", std::vector<PointXYZI>{});
  EXPECT_TRUE(read_pointcloud(dir.path() / "e.bin").empty());
}

TEST(Data, TruncatedPointFileReportsOffset) {
  std::vector<std::uint8_t> bytes(16 * 3 + 7, 0);
  try {
    decode_points(bytes, "cloud.bin");
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 48u);
    EXPECT_NE(std::string(e.what()).find("cloud.bin"), std::string::npos);
    EXPECT_EQ(e.kind(), ErrorKind::data);
  }
}

TEST(Data, ImageRoundTripAndCorruption) {
  GrayImage img(5, 3);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 5; ++x) img.at(x, y) = static_cast<std::uint8_t>(x * 40 + y);
  const auto bytes = encode_pgm(img);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 11), "P5\n5 3\n255\n");
  EXPECT_EQ(decode_pgm(bytes), img);
  auto cut = bytes;
  cut.pop_back();
  EXPECT_THROW(decode_pgm(cut), FormatError);
  auto magic = bytes;
  magic[1] = '2';
  try {
    decode_pgm(magic, "img.pgm");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
}

TEST(Data, SceneDirectoryRoundTrip) {
  test::TempDir dir("data_scene");
  const auto f = generate_scene({}, 55);
  write_scene(dir.path() / scene_dir_name(0), f);
  const auto back = read_scene(dir.path() / scene_dir_name(0));
  EXPECT_EQ(back.points, f.points);
  EXPECT_EQ(back.image, f.image);
  EXPECT_TRUE(back.cam == f.cam);
  ASSERT_EQ(back.boxes.size(), f.boxes.size());
  for (std::size_t i = 0; i < f.boxes.size(); ++i) {
    EXPECT_EQ(back.boxes[i].center, f.boxes[i].center);
    EXPECT_EQ(back.boxes[i].size, f.boxes[i].size);
  }
  EXPECT_EQ(scene_dir_name(42), "scene_00042");
  EXPECT_EQ(list_scenes(dir.path()).size(), 1u);
  EXPECT_THROW(list_scenes(dir.path() / "missing"), PrerequisiteError);
}

TEST(Data, MismatchedImageIsDataError) {
  test::TempDir dir("data_mismatch");
  const auto f = generate_scene({}, 56);
  write_scene(dir.path(), f);
  write_image(dir.path() / "image.pgm", GrayImage(10, 10));
  try {
    read_scene(dir.path());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
  }
}

TEST(Data, PlacementFailureNamesTheSeed) {
  SceneConfig cfg;
  cfg.n_boxes_min = cfg.n_boxes_max = 3;
  cfg.placement_extent = 1.0;  // every candidate overlaps the sensor keep-out zone
  try {
    generate_scene(cfg, 4242);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
    EXPECT_NE(std::string(e.what()).find("seed 4242"), std::string::npos);
  }
}

TEST(Data, InvalidConfigRejected) {
  SceneConfig cfg;
  cfg.noise_sigma = -1.0;
  EXPECT_THROW(generate_scene(cfg, 1), std::invalid_argument);
  cfg = {};
  cfg.n_boxes_max = 1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}
