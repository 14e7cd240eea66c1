#pragma once

#include "uld/scene.hpp"
#include "uld/types.hpp"

#include <optional>
#include <string>
#include <vector>

namespace uld {

struct ManifestEntry {
    std::string id;
    std::string image_path;  // relative to the dataset root
    Mat landmarks;           // N x 2 ground truth, 0 x 2 when unannotated
    std::optional<double> yaw;
    std::optional<RoI> box;
    std::optional<double> d_iod;
    std::vector<bool> visible;             // synthetic datasets only
    std::optional<SyntheticScene> scene;   // synthetic datasets only
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    int n_landmarks = 0;  // consistent landmark count, 0 when unannotated
    std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

struct SyntheticDatasetConfig {
    int n_images = 60;
    int canvas = 64;
    int n_landmarks = 6;
    std::string pose_distribution = "uniform";  // uniform | two_mode | fixed
    double fixed_pose = 0.0;
    double pose_range = 30.0;  // uniform draws from [-pose_range, pose_range]
    double blob_radius = 4.0;
    double intensity_falloff = 14.0;
    double shear_scale = 0.35;
    double occlusion_pose = 60.0;  // |pose| beyond which far-side landmarks hide
    std::uint64_t seed = 5;
};

// Canonical landmark template: an ellipse ring centred on the canvas.
std::vector<Eigen::Vector2d> template_landmarks(int k, int canvas);

// Applies the pose deformation (horizontal shear, odd in pose) and the
// far-side occlusion rule to the template.
SyntheticScene make_scene(const SyntheticDatasetConfig& cfg, double pose, std::uint64_t appearance_seed);

// Paints each region pixel with its nearest visible landmark's palette colour,
// scaled by an intensity that decays with the distance to that landmark.
Image render_scene(const SyntheticScene& scene);

struct SyntheticDataset {
    std::vector<Image> images;
    DatasetManifest manifest;
};

SyntheticDataset generate_synthetic_dataset(const SyntheticDatasetConfig& cfg);

// ---------------------------------------------------------------------------
// Disk layout: <root>/manifest.jsonl + <root>/images/*.fmap
// ---------------------------------------------------------------------------

void write_dataset(const SyntheticDataset& dataset, const std::string& root);
void write_manifest(const DatasetManifest& manifest, const std::string& path);

// format_id: "generic_json_lines" or "synthetic" (the latter requires scene
// blocks). Malformed entries raise errors naming the line; missing images are
// excluded with a warning.
DatasetManifest ingest_dataset(const std::string& root, const std::string& format_id);

Image load_image(const std::string& root, const ManifestEntry& entry);

// Ground-truth bounding-box diagonal, the NME normalizer for datasets
// without an interocular distance.
double gt_bbox_diagonal(const ManifestEntry& entry);

}  // namespace uld
