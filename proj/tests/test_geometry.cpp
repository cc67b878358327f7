#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "oracles.hpp"
#include "poifusion/geometry.hpp"
#include "poifusion/scene.hpp"

using namespace poifusion;

namespace {

constexpr double kPi = std::numbers::pi;

Box3D box_at(double x, double y, double z, double w, double l, double h, double theta) {
  return {x, y, z, w, l, h, std::sin(theta), std::cos(theta)};
}

CameraModel pinhole_identity() {
  CameraModel cam;
  cam.intrinsics = Mat3{{{100, 0, 50}, {0, 100, 50}, {0, 0, 1}}};
  cam.width = 100;
  cam.height = 100;
  return cam;
}

}  // namespace

TEST(BoxCorners, UnitCubeAtOriginInCanonicalOrder) {
  const auto c = box_corners(Box3D{0, 0, 0, 1, 1, 1, 0, 1});
  int k = 0;
  for (double sz : {-0.5, 0.5})
    for (double sy : {-0.5, 0.5})
      for (double sx : {-0.5, 0.5}) {
        EXPECT_EQ(c[k][0], sx);
        EXPECT_EQ(c[k][1], sy);
        EXPECT_EQ(c[k][2], sz);
        ++k;
      }
}

TEST(BoxCorners, QuarterTurnRotatesEveryCorner) {
  const auto c0 = box_corners(Box3D{0, 0, 0, 1, 1, 1, 0, 1});
  const auto c90 = box_corners(Box3D{0, 0, 0, 1, 1, 1, 1, 0});
  for (int i = 0; i < 8; ++i) {
    EXPECT_NEAR(c90[i][0], -c0[i][1], 1e-15);
    EXPECT_NEAR(c90[i][1], c0[i][0], 1e-15);
    EXPECT_EQ(c90[i][2], c0[i][2]);
  }
}

TEST(BoxCorners, MatchRotationMatrixOracle) {
  const double t = 30.0 * kPi / 180.0;
  const auto c = box_corners(box_at(1, 2, 3, 2, 4, 6, t));
  const auto o = oracle::corners(1, 2, 3, 2, 4, 6, t);
  for (int i = 0; i < 8; ++i)
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(c[i][a], o[i][a], 1e-12);
}

TEST(BoxCorners, RandomBoxesMatchOracleAndCentroid) {
  const auto v = oracle::uniform_values(7 * 200, 5, -1, 1);
  for (int k = 0; k < 200; ++k) {
    const double* p = v.data() + 7 * k;
    const Box3D b = box_at(10 * p[0], 10 * p[1], 2 * p[2], 1.5 + p[3], 3 + p[4], 2 + p[5], kPi * p[6]);
    const auto c = box_corners(b);
    const auto o = oracle::corners(b.x, b.y, b.z, b.w, b.l, b.h, kPi * p[6]);
    Vec3 mean{0, 0, 0};
    for (int i = 0; i < 8; ++i) {
      for (int a = 0; a < 3; ++a) EXPECT_NEAR(c[i][a], o[i][a], 1e-12);
      mean = mean + 0.125 * c[i];
    }
    EXPECT_NEAR(mean[0], b.x, 1e-12);
    EXPECT_NEAR(mean[1], b.y, 1e-12);
    EXPECT_NEAR(mean[2], b.z, 1e-12);
  }
}

TEST(BoxCorners, RotateThenCornersEqualsCornersThenRotate) {
  const auto v = oracle::uniform_values(50, 6, -kPi, kPi);
  for (double th : v) {
    const auto rotated = box_corners(box_at(0, 0, 0.3, 1.7, 4.2, 1.5, th));
    const auto base = box_corners(box_at(0, 0, 0.3, 1.7, 4.2, 1.5, 0));
    const Mat3 r = rotation_z(th);
    for (int i = 0; i < 8; ++i) {
      const Vec3 q = r * base[i];
      for (int a = 0; a < 3; ++a) EXPECT_NEAR(rotated[i][a], q[a], 1e-12);
    }
  }
}

TEST(BoxCorners, UnnormalizedHeadingUsesAtan2) {
  const auto a = box_corners(Box3D{0, 0, 0, 1, 2, 1, 3.0, 4.0});
  const auto b = box_corners(Box3D{0, 0, 0, 1, 2, 1, 0.6, 0.8});
  for (int i = 0; i < 8; ++i)
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(a[i][k], b[i][k], 1e-15);
}

TEST(BoxCorners, DegenerateHeadingAndDimensionsThrow) {
  EXPECT_THROW(box_corners(Box3D{0, 0, 0, 1, 1, 1, 0, 0}), GeometryError);
  EXPECT_THROW(box_corners(Box3D{0, 0, 0, 0, 1, 1, 0, 1}), GeometryError);
}

TEST(ProjectBev, RangeOriginMapsToZero) {
  const BevGrid g;
  const auto c = project_bev({g.x_min, g.y_min, 0}, g);
  EXPECT_EQ(c.m, 0.0);
  EXPECT_EQ(c.n, 0.0);
}

TEST(ProjectBev, NuScenesRangeCenterIsCell90) {
  const BevGrid g{-54, -54, 54, 54, 0.075, 0.075, 8};
  EXPECT_NEAR(project_bev({0, 0, 0}, g).m, 90.0, 1e-12);
  EXPECT_EQ(g.width(), 180);
}

TEST(ProjectBev, OneCellStep) {
  const BevGrid g;
  EXPECT_NEAR(project_bev({g.x_min + g.voxel_x * g.downsample, 0, 0}, g).m, 1.0, 1e-12);
}

TEST(ProjectBev, AffineMonotoneAndRoundTrips) {
  const BevGrid g;
  EXPECT_EQ(g.width(), 48);
  EXPECT_EQ(g.height(), 48);
  const auto v = oracle::uniform_values(2000, 7, -30, 30);
  for (std::size_t i = 0; i + 1 < v.size(); i += 2) {
    const auto c = project_bev({v[i], v[i + 1], 0.0}, g);
    const auto back = bev_to_metric(c, g);
    EXPECT_LT(std::abs(back[0] - v[i]), 1e-9);
    EXPECT_LT(std::abs(back[1] - v[i + 1]), 1e-9);
  }
  for (double x = -20; x < 20; x += 0.37) {
    EXPECT_GT(project_bev({x + 0.01, 0, 0}, g).m, project_bev({x, 0, 0}, g).m);
    EXPECT_GT(project_bev({0, x + 0.01, 0}, g).n, project_bev({0, x, 0}, g).n);
  }
}

TEST(BevGridValidation, NonIntegralExtentOrEmptyRangeThrows) {
  EXPECT_THROW((BevGrid{-10, -10, 10, 10, 0.07, 0.075, 8}.validate()), GeometryError);
  EXPECT_THROW((BevGrid{5, -10, 5, 10, 0.075, 0.075, 8}.validate()), GeometryError);
  EXPECT_NO_THROW((BevGrid{-14.4, -14.4, 14.4, 14.4, 0.075, 0.075, 8}.validate()));
}

TEST(ProjectCamera, PrincipalPoint) {
  const auto p = project_camera({0, 0, 10}, pinhole_identity());
  ASSERT_TRUE(p);
  EXPECT_EQ(p->u, 50.0);
  EXPECT_EQ(p->v, 50.0);
  EXPECT_EQ(p->depth, 10.0);
}

TEST(ProjectCamera, OffsetPoint) {
  const auto p = project_camera({1, 0, 10}, pinhole_identity());
  ASSERT_TRUE(p);
  EXPECT_DOUBLE_EQ(p->u, 60.0);
  EXPECT_DOUBLE_EQ(p->v, 50.0);
}

TEST(ProjectCamera, BehindNearPlaneOrOutsideImageIsNone) {
  EXPECT_FALSE(project_camera({0, 0, -5}, pinhole_identity()));
  EXPECT_FALSE(project_camera({0, 0, 0.1}, pinhole_identity()));
  EXPECT_FALSE(project_camera({10, 0, 10}, pinhole_identity()));
}

TEST(ProjectCamera, ScaleInvariantAlongRay) {
  const auto v = oracle::uniform_values(300, 8, -0.4, 0.4);
  for (std::size_t i = 0; i + 2 < v.size(); i += 3) {
    const double z = 5 + 10 * std::abs(v[i + 2]);
    const Vec3 p{v[i] * z, v[i + 1] * z, z};
    const auto a = project_camera(p, pinhole_identity());
    const auto b = project_camera(2.0 * p, pinhole_identity());
    ASSERT_TRUE(a && b);
    EXPECT_NEAR(a->u, b->u, 1e-12);
    EXPECT_NEAR(a->v, b->v, 1e-12);
  }
}

TEST(CameraValidation, RejectsNonOrthonormalRotation) {
  CameraModel cam = pinhole_identity();
  cam.rotation[0][0] = 1.01;
  EXPECT_THROW(cam.validate(), GeometryError);
  cam = pinhole_identity();
  cam.rotation[2][2] = -1;  // reflection, det = -1
  cam.rotation[1][1] = 1;
  EXPECT_THROW(cam.validate(), GeometryError);
  EXPECT_NO_THROW(pinhole_identity().validate());
}

TEST(MakeCamera, LooksAlongYawAndIsValid) {
  for (double yaw : {0.0, kPi / 3, kPi, -kPi / 2}) {
    const CameraModel cam = make_camera(yaw, kPi / 2, 64, 48, {0, 0, 1.5});
    EXPECT_NO_THROW(cam.validate());
    const auto p = project_camera({1.5 + 10 * std::cos(yaw) - 1.5, 10 * std::sin(yaw), 1.5}, cam);
    ASSERT_TRUE(p);
    EXPECT_NEAR(p->u, 32.0, 1e-9);
    EXPECT_NEAR(p->v, 24.0, 1e-9);
    EXPECT_NEAR(p->depth, 10.0, 1e-9);
    const Vec3 c = cam.position();
    EXPECT_NEAR(c[2], 1.5, 1e-12);
  }
}

TEST(VisibleViews, BehindEveryCameraIsEmpty) {
  const std::vector<CameraModel> rig{make_camera(0, kPi / 2, 64, 64, {0, 0, 0})};
  EXPECT_TRUE(visible_views({-10, 0, 0}, rig).empty());
}

TEST(VisibleViews, OppositeCamerasSeeTheirSideOnly) {
  const std::vector<CameraModel> rig{make_camera(0, kPi / 2, 64, 64, {0, 0, 0}),
                                     make_camera(kPi, kPi / 2, 64, 64, {0, 0, 0})};
  EXPECT_EQ(visible_views({10, 0, 0}, rig), std::vector<int>{0});
  EXPECT_EQ(visible_views({-10, 0, 0}, rig), std::vector<int>{1});
}

TEST(VisibleViews, OverlapRegionReturnsBothInRigOrder) {
  // Two 120° cameras 90° apart overlap in a 30° wedge around 45°.
  const std::vector<CameraModel> rig{make_camera(0, 2 * kPi / 3, 64, 64, {0, 0, 0}),
                                     make_camera(kPi / 2, 2 * kPi / 3, 64, 64, {0, 0, 0})};
  EXPECT_EQ(visible_views({10, 10, 0}, rig), (std::vector<int>{0, 1}));
  EXPECT_EQ(visible_views({10, -1, 0}, rig), std::vector<int>{0});
}

TEST(BevOverlap, SeparatingAxisAgreesWithSimpleCases) {
  EXPECT_TRUE(bev_overlaps(box_at(0, 0, 0, 2, 2, 1, 0), box_at(1, 1, 0, 2, 2, 1, 0.3)));
  EXPECT_FALSE(bev_overlaps(box_at(0, 0, 0, 2, 2, 1, 0), box_at(3, 0, 0, 2, 2, 1, 0)));
  EXPECT_FALSE(bev_overlaps(box_at(0, 0, 0, 2, 2, 1, 0), box_at(2, 0, 0, 2, 2, 1, 0)));  // touching
}
