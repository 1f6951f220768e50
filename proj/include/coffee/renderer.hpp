#pragma once

#include <atomic>
#include <thread>
#include <vector>

#include "coffee/bvh.hpp"
#include "coffee/image.hpp"

// Ray-traced world: grayscale Lambertian rendering of a mesh under a
// directional sun with hard ray-traced self-cast shadows, plus the depth
// map and ground-truth relative pose the learning stack trains against.

namespace coffee {

/// Rigid transform x -> rotation * x + translation.
struct Scene {
  const TriMesh* mesh = nullptr;
  RigidTransform asteroid_pose;  // asteroid frame -> inertial
  RigidTransform camera_pose;    // camera frame -> inertial
  Vec3 sun_dir_inertial = Vec3(0, 0, 1);  // propagation direction, unit
  double albedo = 0.8;

  SunGeometry sun() const {
    return SunGeometry(sun_dir_inertial, camera_pose.rotation.inverse());
  }

  void validate() const {
    if (mesh == nullptr || mesh->faces.empty())
      throw ValidationError("Scene: missing mesh");
    if (std::abs(sun_dir_inertial.norm() - 1.0) > 1e-9)
      throw ValidationError("Scene: sun direction must be unit norm");
    if (!(albedo > 0.0 && albedo <= 1.0))
      throw ValidationError("Scene: albedo must be in (0,1]");
    // Camera must sit outside the mesh bounding sphere.
    const Vec3 center = asteroid_pose.translation;
    double r = 0.0;
    for (const Vec3& p : mesh->positions) r = std::max(r, p.norm());
    if ((camera_pose.translation - center).norm() <= r)
      throw ValidationError("Scene: camera inside mesh bounding sphere");
  }
};

struct SceneFrame {
  Image image;         // [0,1] grayscale
  Image depth;         // camera-frame z of the hit, 0 = no hit
  RigidTransform pose;  // asteroid frame -> camera frame
  Vec3 sun_c = Vec3(0, 0, 1);  // sun propagation direction, camera frame
  int frame_index = 0;

  void validate() const {
    if (image.width != depth.width || image.height != depth.height)
      throw ValidationError("SceneFrame: image/depth size mismatch");
    for (size_t i = 0; i < image.pixels.size(); ++i) {
      if (depth.pixels[i] < 0.0)
        throw ValidationError("SceneFrame: negative depth");
      if (depth.pixels[i] == 0.0 && image.pixels[i] != 0.0)
        throw ValidationError("SceneFrame: lit background pixel");
    }
  }
};

/// Render one frame. Tiled over rows; any worker count produces the same
/// output because tiles write disjoint pixels.
inline SceneFrame render(const Scene& scene, const CameraModel& cam,
                         const Bvh& bvh, int frame_index = 0,
                         int threads = 1) {
  scene.validate();
  cam.validate();
  const TriMesh& mesh = *scene.mesh;

  SceneFrame frame;
  frame.image = Image(cam.width, cam.height, 0.0);
  frame.depth = Image(cam.width, cam.height, 0.0);
  frame.frame_index = frame_index;
  frame.pose = scene.camera_pose.inverse().compose(scene.asteroid_pose);
  frame.sun_c = scene.camera_pose.rotation.inverse().apply(
      scene.sun_dir_inertial);

  // Primary rays are built in the camera frame with unit z so the hit
  // parameter equals camera depth, then mapped into the model frame where
  // the BVH lives.
  const RigidTransform model_from_cam = frame.pose.inverse();
  const Mat3 rot_mc = model_from_cam.rotation.matrix();
  const Vec3 cam_origin_model = model_from_cam.translation;
  const Vec3 sun_model =
      scene.asteroid_pose.rotation.inverse().apply(scene.sun_dir_inertial);
  const double shadow_offset = 1e-4 * mesh.mean_radius();

  const int rows_per_tile = 16;
  const int tile_count = (cam.height + rows_per_tile - 1) / rows_per_tile;
  std::atomic<int> next_tile{0};

  const auto worker = [&]() {
    while (true) {
      const int tile = next_tile.fetch_add(1);
      if (tile >= tile_count) break;
      const int y0 = tile * rows_per_tile;
      const int y1 = std::min(cam.height, y0 + rows_per_tile);
      for (int y = y0; y < y1; ++y) {
        for (int x = 0; x < cam.width; ++x) {
          const Vec3 dir_cam = cam.normalized_ray(Vec2(x + 0.5, y + 0.5));
          Ray ray{cam_origin_model, rot_mc * dir_cam};
          const Hit hit = bvh.nearest(ray);
          if (!hit.valid()) continue;
          frame.depth.at(x, y) = hit.t;  // dir has unit camera z

          const auto& tri = mesh.faces[hit.face];
          const Vec3 n_shade =
              ((1.0 - hit.u - hit.v) * mesh.normals[tri[0]] +
               hit.u * mesh.normals[tri[1]] + hit.v * mesh.normals[tri[2]])
                  .normalized();
          const double lambert = n_shade.dot(-sun_model);
          if (lambert <= 0.0) continue;

          const Vec3 hit_point = ray.origin + hit.t * ray.dir;
          const Vec3 offset_origin =
              hit_point + shadow_offset * mesh.face_normal(hit.face);
          if (bvh.occluded(Ray{offset_origin, -sun_model})) continue;
          frame.image.at(x, y) = scene.albedo * lambert;
        }
      }
    }
  };

  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return frame;
}

/// Transfer a pixel with known depth from frame A into frame B under the
/// rigid transform x_B = pose_ab(x_A).
inline Vec2 reproject(const Vec2& pixel, double depth,
                      const RigidTransform& pose_ab, const CameraModel& cam) {
  if (!(depth > 0.0)) throw ValidationError("reproject: depth must be > 0");
  const Vec3 x_a = depth * cam.normalized_ray(pixel);
  const Vec3 x_b = pose_ab.apply(x_a);
  if (!(x_b.z() > 0.0))
    throw ValidationError("reproject: point behind the target camera");
  return project(x_b, cam);
}

}  // namespace coffee
