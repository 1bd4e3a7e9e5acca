#include <gtest/gtest.h>

#include <numbers>

#include "support.hpp"

using namespace mjp;

namespace {

Pose random_pose(Rng& rng) {
  const Vec3 axis = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
  const double angle = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const Mat3 r = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  return Pose(r, Vec3(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)));
}

CameraModel unit_camera() {
  return CameraModel(100, 100, 64, 64, 128, 128, Pose(forward_camera_rotation(), Vec3::Zero()));
}

}  // namespace

TEST(Geometry, TransformExamples) {
  EXPECT_EQ(transform_point(Pose::identity(), Vec3(1, 2, 3)), Vec3(1, 2, 3));
  EXPECT_EQ(transform_point(Pose::translation(Vec3(5, 0, 0)), Vec3::Zero()), Vec3(5, 0, 0));
  const Vec3 r = transform_point(Pose::yaw(std::numbers::pi / 2), Vec3(1, 0, 0));
  EXPECT_NEAR(r.x(), 0.0, 1e-15);
  EXPECT_NEAR(r.y(), 1.0, 1e-15);
  EXPECT_NEAR(r.z(), 0.0, 1e-15);
}

TEST(Geometry, InvertExamples) {
  const Pose id = invert_pose(Pose::identity());
  EXPECT_EQ(id.rotation(), Mat3::Identity());
  EXPECT_EQ(id.translation(), Vec3::Zero());
  const Pose t = invert_pose(Pose::translation(Vec3(5, 0, 0)));
  EXPECT_EQ(t.rotation(), Mat3::Identity());
  EXPECT_EQ(t.translation(), Vec3(-5, 0, 0));
}

TEST(Geometry, InvertRoundTripRandomPose) {
  Rng rng(7);
  const Pose p = random_pose(rng);
  const Pose inv = invert_pose(p);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Vec3 x(rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-50, 50));
    worst = std::max(worst, (transform_point(inv, transform_point(p, x)) - x).norm());
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Geometry, PoseRejectsNonRigid) {
  Mat3 scaled = 2.0 * Mat3::Identity();
  EXPECT_THROW(Pose(scaled, Vec3::Zero()), std::invalid_argument);
  Mat3 reflect = Mat3::Identity();
  reflect(0, 0) = -1.0;
  EXPECT_THROW(Pose(reflect, Vec3::Zero()), std::invalid_argument);
}

TEST(Geometry, ProjectOpticalAxis) {
  const auto cam = unit_camera();
  const auto px = project(cam, Vec3(10, 0, 0));
  ASSERT_TRUE(px);
  EXPECT_DOUBLE_EQ(px->u, 64.0);
  EXPECT_DOUBLE_EQ(px->v, 64.0);
  EXPECT_DOUBLE_EQ(px->depth, 10.0);
}

TEST(Geometry, ProjectBehindIsOutOfView) {
  EXPECT_FALSE(project(unit_camera(), Vec3(-1, 0, 0)));
}

TEST(Geometry, ProjectHandComputedExample) {
  // Ego y (left) maps to camera -x, so one meter to the left at 10 m lands at
  // u = 100 * (-1) / 10 + 64 = 54.
  const auto px = project(unit_camera(), Vec3(10, 1, 0));
  ASSERT_TRUE(px);
  EXPECT_NEAR(px->u, 54.0, 1e-12);
  EXPECT_NEAR(px->v, 64.0, 1e-12);
  EXPECT_NEAR(px->depth, 10.0, 1e-12);
}

TEST(Geometry, ProjectOutsideImage) {
  EXPECT_FALSE(project(unit_camera(), Vec3(1, 5, 0)));
}

TEST(Geometry, UnprojectPrincipalPoint) {
  const auto cam = unit_camera();
  const Vec3 p = unproject(cam, cam.cx(), cam.cy(), 5.0);
  EXPECT_NEAR((p - Vec3(5, 0, 0)).norm(), 0.0, 1e-12);
  EXPECT_THROW(unproject(cam, 10, 10, 0.0), std::invalid_argument);
  EXPECT_THROW(unproject(cam, 10, 10, -1.0), std::invalid_argument);
}

TEST(Geometry, UnprojectRoundTrip) {
  Rng rng(11);
  const CameraModel cam(80, 90, 60.5, 47.25, 120, 96, random_pose(rng));
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double u = rng.uniform(0, cam.width()), v = rng.uniform(0, cam.height()), d = rng.uniform(0.5, 80);
    const auto px = project(cam, unproject(cam, u, v, d));
    ASSERT_TRUE(px);
    worst = std::max({worst, std::abs(px->u - u), std::abs(px->v - v), std::abs(px->depth - d)});
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Geometry, ProjectIsAssociativeUnderComposition) {
  Rng rng(3);
  const Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
  const Pose left = compose(compose(a, b), c);
  const Pose right = compose(a, compose(b, c));
  const CameraModel cl(50, 50, 32, 32, 64, 64, left);
  const CameraModel cr(50, 50, 32, 32, 64, 64, right);
  for (int i = 0; i < 200; ++i) {
    const Vec3 p = unproject(cl, rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(1, 20));
    const auto x = project(cl, p), y = project(cr, p);
    ASSERT_TRUE(x && y);
    EXPECT_NEAR(x->u, y->u, 1e-9);
    EXPECT_NEAR(x->v, y->v, 1e-9);
    EXPECT_NEAR(x->depth, y->depth, 1e-9);
  }
}

TEST(Geometry, CameraValidation) {
  const Pose p;
  EXPECT_THROW(CameraModel(0, 1, 1, 1, 4, 4, p), std::invalid_argument);
  EXPECT_THROW(CameraModel(1, 1, 0, 1, 4, 4, p), std::invalid_argument);
  EXPECT_THROW(CameraModel(1, 1, 4, 1, 4, 4, p), std::invalid_argument);
}

TEST(Geometry, CalibJsonRoundTrip) {
  const auto cam = SceneConfig{}.camera();
  EXPECT_TRUE(calib_from_json(calib_to_json(cam)) == cam);
  auto j = calib_to_json(cam);
  j["T_cam_to_ego"][15] = 2.0;
  EXPECT_THROW(calib_from_json(j), std::invalid_argument);
  j.erase("fx");
  EXPECT_THROW(calib_from_json(j), std::invalid_argument);
}
