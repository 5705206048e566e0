#pragma once

// Seeded synthetic cloud pairs with exact ground-truth bookkeeping.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "edfnet/config.hpp"
#include "edfnet/errors.hpp"
#include "edfnet/geometry.hpp"

namespace edfnet {

enum class ShapeFamily { plane, sphere, box, composite };
enum class PerturbationMode { rigid, nonrigid };

inline std::string to_string(ShapeFamily s) {
  switch (s) {
    case ShapeFamily::plane: return "plane";
    case ShapeFamily::sphere: return "sphere";
    case ShapeFamily::box: return "box";
    case ShapeFamily::composite: return "composite";
  }
  return "composite";
}

inline std::optional<ShapeFamily> parse_shape(const std::string& s) {
  if (s == "plane") return ShapeFamily::plane;
  if (s == "sphere") return ShapeFamily::sphere;
  if (s == "box") return ShapeFamily::box;
  if (s == "composite") return ShapeFamily::composite;
  return std::nullopt;
}

struct SyntheticPairSpec {
  ShapeFamily shape = ShapeFamily::composite;
  std::size_t points = 2000;
  double crop = 0.3;               // fraction of the target removed
  double noise = 0.005;            // target Gaussian noise, meters
  PerturbationMode mode = PerturbationMode::rigid;
  double max_rotation_deg = 30.0;  // relative rotation angle ~ U[0, max]
  double max_translation = 0.5;    // per-axis U[-t, t]
  double deform_amplitude = 0.05;  // non-rigid displacement magnitude, meters
  double deform_wavelength = 1.0;  // meters

  std::vector<std::string> validate() const {
    std::vector<std::string> errs;
    if (points < 100) errs.push_back("dataset.points: must be at least 100");
    if (!(crop >= 0.0 && crop < 1.0)) errs.push_back("dataset.crop: must lie in [0, 1)");
    if (!(noise >= 0.0)) errs.push_back("dataset.noise: must be nonnegative");
    if (!(max_rotation_deg >= 0.0 && max_rotation_deg <= 360.0)) {
      errs.push_back("dataset.max_rotation_deg: must lie in [0, 360]");
    }
    if (!(max_translation >= 0.0)) errs.push_back("dataset.max_translation: must be nonnegative");
    if (!(deform_amplitude >= 0.0)) errs.push_back("dataset.deform_amplitude: must be nonnegative");
    if (!(deform_wavelength > 0.0)) errs.push_back("dataset.deform_wavelength: must be positive");
    return errs;
  }

  static SyntheticPairSpec from_config(const KeyValueConfig& kv, std::vector<std::string>& errs,
                                       SyntheticPairSpec c) {
    const std::string shape = kv.get("dataset.shape", to_string(c.shape));
    if (auto s = parse_shape(shape)) {
      c.shape = *s;
    } else {
      errs.push_back("dataset.shape: expected plane, sphere, box or composite");
    }
    c.points = static_cast<std::size_t>(
        std::max<long long>(0, kv.get_int("dataset.points", static_cast<long long>(c.points), errs)));
    c.crop = kv.get_double("dataset.crop", c.crop, errs);
    c.noise = kv.get_double("dataset.noise", c.noise, errs);
    const std::string mode = kv.get("dataset.mode", c.mode == PerturbationMode::rigid ? "rigid" : "nonrigid");
    if (mode == "rigid") {
      c.mode = PerturbationMode::rigid;
    } else if (mode == "nonrigid") {
      c.mode = PerturbationMode::nonrigid;
    } else {
      errs.push_back("dataset.mode: expected 'rigid' or 'nonrigid'");
    }
    c.max_rotation_deg = kv.get_double("dataset.max_rotation_deg", c.max_rotation_deg, errs);
    c.max_translation = kv.get_double("dataset.max_translation", c.max_translation, errs);
    c.deform_amplitude = kv.get_double("dataset.deform_amplitude", c.deform_amplitude, errs);
    c.deform_wavelength = kv.get_double("dataset.deform_wavelength", c.deform_wavelength, errs);
    return c;
  }
};

struct SyntheticPair {
  PointCloud source, target;
  RigidTransform gt;                    // rigid part of the perturbation
  std::vector<long> source_to_target;   // target row of each source point, -1 if cropped
  std::vector<Vec3> true_position;      // where each source point ends up (before crop and noise)
};

namespace detail {

// Axis-aligned rectangle patch: origin + u*a + v*b, u, v in [0, 1].
struct Patch {
  Vec3 origin, a, b;
  double area() const { return a.cross(b).norm(); }
};

struct Sphere {
  Vec3 center;
  double radius;
  double area() const { return 4.0 * std::numbers::pi * radius * radius; }
};

struct Surface {
  std::vector<Patch> patches;
  std::vector<Sphere> spheres;

  void add_box(const Vec3& lo, const Vec3& size, bool bottom) {
    const Vec3 ex(size.x(), 0, 0), ey(0, size.y(), 0), ez(0, 0, size.z());
    const Vec3 hi = lo + size;
    if (bottom) patches.push_back({lo, ex, ey});
    patches.push_back({Vec3(lo.x(), lo.y(), hi.z()), ex, ey});
    patches.push_back({lo, ex, ez});
    patches.push_back({Vec3(lo.x(), hi.y(), lo.z()), ex, ez});
    patches.push_back({lo, ey, ez});
    patches.push_back({Vec3(hi.x(), lo.y(), lo.z()), ey, ez});
  }

  std::vector<Vec3> sample(std::size_t n, std::mt19937_64& rng) const {
    std::vector<double> areas;
    for (const auto& p : patches) areas.push_back(p.area());
    for (const auto& s : spheres) areas.push_back(s.area());
    std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Vec3> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = pick(rng);
      if (k < patches.size()) {
        const Patch& p = patches[k];
        const double s = u(rng), t = u(rng);
        out.push_back(p.origin + s * p.a + t * p.b);
      } else {
        const Sphere& sp = spheres[k - patches.size()];
        out.push_back(sp.center + sp.radius * random_unit_vector(rng));
      }
    }
    return out;
  }
};

inline Surface make_surface(ShapeFamily family) {
  Surface s;
  switch (family) {
    case ShapeFamily::plane:
      s.patches.push_back({Vec3(-0.5, -0.5, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)});
      break;
    case ShapeFamily::sphere:
      s.spheres.push_back({Vec3::Zero(), 0.5});
      break;
    case ShapeFamily::box:
      s.add_box(Vec3(-0.4, -0.3, -0.2), Vec3(0.8, 0.6, 0.4), true);
      break;
    case ShapeFamily::composite:
      // Floor, a row of three identical boxes, a tall pillar and a ball.
      s.patches.push_back({Vec3(-0.6, -0.6, 0), Vec3(1.2, 0, 0), Vec3(0, 1.2, 0)});
      for (int k = 0; k < 3; ++k) s.add_box(Vec3(-0.45 + 0.35 * k, -0.4, 0), Vec3(0.2, 0.2, 0.25), false);
      s.add_box(Vec3(-0.4, 0.25, 0), Vec3(0.15, 0.15, 0.5), false);
      s.spheres.push_back({Vec3(0.3, 0.3, 0.15), 0.15});
      break;
  }
  return s;
}

}  // namespace detail

/// Surface samples of a shape family, centered near the origin.
inline std::vector<Vec3> sample_shape(ShapeFamily family, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return detail::make_surface(family).sample(n, rng);
}

/// Smooth low-frequency displacement used by the non-rigid mode.
inline Vec3 smooth_displacement(const Vec3& p, double amplitude, double wavelength, const Vec3& phase) {
  const double w = 2.0 * std::numbers::pi / wavelength;
  return amplitude * Vec3(std::sin(w * p.y() + phase.x()), std::sin(w * p.z() + phase.y()),
                          std::sin(w * p.x() + phase.z()));
}

/// source sampled from the shape; target = crop(perturb(source)) + noise.
/// The crop keeps the ceil((1 - crop) * N) points with the smallest
/// projection on a random direction, in source order.
inline SyntheticPair generate_pair(const SyntheticPairSpec& spec, std::uint64_t seed) {
  if (auto errs = spec.validate(); !errs.empty()) throw ConfigError(errs.front());
  std::mt19937_64 rng(seed);
  SyntheticPair out;
  out.source.points = detail::make_surface(spec.shape).sample(spec.points, rng);

  std::uniform_real_distribution<double> angle(0.0, spec.max_rotation_deg * std::numbers::pi / 180.0);
  std::uniform_real_distribution<double> shift(-spec.max_translation, spec.max_translation);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const Vec3 axis = random_unit_vector(rng);
  out.gt.rotation = axis_angle_rotation(axis, spec.max_rotation_deg > 0.0 ? angle(rng) : 0.0);
  if (spec.max_translation > 0.0) out.gt.translation = Vec3(shift(rng), shift(rng), shift(rng));
  const Vec3 ph(phase(rng), phase(rng), phase(rng));
  const Vec3 crop_dir = random_unit_vector(rng);

  const std::size_t n = out.source.size();
  out.true_position.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec3 p = out.source.points[i];
    if (spec.mode == PerturbationMode::nonrigid) {
      p += smooth_displacement(p, spec.deform_amplitude, spec.deform_wavelength, ph);
    }
    out.true_position[i] = out.gt.apply(p);
  }

  const auto keep = static_cast<std::size_t>(std::ceil((1.0 - spec.crop) * static_cast<double>(n) - 1e-9));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return out.true_position[a].dot(crop_dir) < out.true_position[b].dot(crop_dir);
  });
  std::vector<bool> kept(n, false);
  for (std::size_t k = 0; k < keep; ++k) kept[order[k]] = true;

  std::normal_distribution<double> noise(0.0, spec.noise > 0.0 ? spec.noise : 1.0);
  out.source_to_target.assign(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (!kept[i]) continue;
    Vec3 q = out.true_position[i];
    if (spec.noise > 0.0) q += Vec3(noise(rng), noise(rng), noise(rng));
    out.source_to_target[i] = static_cast<long>(out.target.size());
    out.target.points.push_back(q);
  }
  return out;
}

}  // namespace edfnet
