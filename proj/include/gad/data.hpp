#pragma once

#include <string>
#include <vector>

#include "gad/tensor.hpp"

namespace gad {

enum class Task { classification, part_seg, scene_seg };

std::string task_name(Task t);
Task task_from(const std::string& name);

struct PointCloud {
  Mat coords;  // N x 3
  std::vector<int32_t> point_labels;  // per-point part ids, empty when absent
  int32_t class_label = -1;           // doubles as the category id

  Index n() const { return coords.rows(); }
  bool has_class() const { return class_label >= 0; }
  bool has_parts() const { return !point_labels.empty(); }
  Tensor coords_tensor() const {
    return Tensor::from_flat({coords.rows(), 3},
                             Eigen::Map<const Arr>(coords.data(), coords.size()));
  }
};

// Centroid to the origin, largest point norm scaled to 1. Idempotent; a
// single point (or fully coincident cloud) only gets centered.
PointCloud unit_normalize(PointCloud cloud);

enum class SynthKind { sphere, cube, torus, plane_pair, cylinder };

SynthKind synth_kind_from(const std::string& name);
std::string synth_kind_name(SynthKind kind);

// Number of part labels synth_generate emits for a kind (local ids 0..p-1).
Index synth_part_count(SynthKind kind);

// Uniform surface sample of the primitive, unit-normalized, then jittered
// with Gaussian noise. Part labels are deterministic functions of the
// pre-noise geometry (torus: angular quadrants; cylinder: barrel vs caps;
// cube: faces; sphere: hemispheres; plane_pair: which plane).
PointCloud synth_generate(SynthKind kind, Index n_points, double noise_std,
                          Rng& rng);

// Text format: one "x y z [part]" line per point, '#' starts a comment.
PointCloud load_xyz_text(const std::string& path);
void save_xyz_text(const std::string& path, const PointCloud& cloud);

// Binary batch format (GADB): magic, version, count, then per cloud the
// point count, a flags byte, f32 coordinates and the labels.
std::vector<PointCloud> load_batch_binary(const std::string& path);
void save_batch_binary(const std::string& path,
                       const std::vector<PointCloud>& clouds);

struct Dataset {
  Task task = Task::classification;
  Index num_classes = 0;
  Index num_parts = 0;
  Index category_count = 0;
  Index points_per_cloud = 0;
  // part ids owned by each category; instance mIoU averages over these
  std::vector<std::vector<int32_t>> category_parts;
  std::vector<PointCloud> clouds;

  void validate_labels() const;  // precise errors on out-of-range labels
};

struct ManifestData {
  Dataset train;
  Dataset test;
};

// Manifest: key=value header plus repeated train=/test= file entries with
// paths relative to the manifest.
ManifestData load_manifest(const std::string& path);
void save_dataset(const std::string& dir, const std::string& name,
                  const ManifestData& data);

// Built-in desk-scale datasets:
//   cls4 - sphere/cube/torus/plane_pair classification, 200+50 per class
//   seg2 - torus/cylinder part segmentation, 100+25 per kind
ManifestData make_synth_dataset(const std::string& name, uint64_t seed);

}  // namespace gad
