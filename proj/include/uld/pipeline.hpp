#pragma once

#include "uld/bootstrap.hpp"
#include "uld/dataset.hpp"
#include "uld/eval.hpp"
#include "uld/model.hpp"
#include "uld/selftrain.hpp"

#include <string>
#include <vector>

namespace uld {

struct DatasetOptions {
    std::string root;
    std::string format = "synthetic";
    double train_fraction = 0.75;
};

struct ZeroshotOptions {
    int pixels_per_image = 100;
    std::string roi_provider = "gt_box";  // gt_box | full_image
};

struct EvalOptions {
    int regressor_subset = 300;  // capped at the evaluated image count
    double hungarian_threshold = 0.2;
    double ced_max = 20.0;
    int ced_points = 101;
    std::vector<double> yaw_edges = {-90.0, -60.0, -30.0, 30.0, 60.0, 90.0};
    std::string yaw_binning = "signed";  // signed | absolute (bins on |yaw|)
    std::string normalizer = "gt_bbox_diagonal";  // gt_bbox_diagonal | canvas_diagonal | d_iod
    int consistency_images = 20;
    double consistency_rotation_deg = 25.0;
    double consistency_flip_probability = 0.5;
};

struct PipelineConfig {
    std::string profile = "desk";
    std::uint64_t seed = 42;
    std::string run_root = "runs";
    std::string run_id = "run";
    DatasetOptions dataset;
    ModelConfig model;
    int keypoint_clusters = 6;  // K
    int pose_clusters = 2;      // Q
    ZeroshotOptions zeroshot;
    BootstrapConfig bootstrap;
    Schedule duld;
    Schedule proxy;
    Schedule duldpp;
    EvalOptions eval;

    // Profile presets. "desk" targets minutes-scale CPU runs; "paper" carries
    // the published training constants (lr 1e-4/5e-5/5e-4, betas (0.9, 0.999),
    // batch 12, margin 0.8, recluster every 5000, 50k/100k/50k/100k
    // iterations, K = 10).
    static PipelineConfig defaults(const std::string& profile);
    static PipelineConfig from_json_file(const std::string& path);
    static PipelineConfig from_json_text(const std::string& text);

    std::string canonical_json() const;
    std::uint64_t config_hash() const;
    void save_json(const std::string& path) const;
};

// Resolves <run_root>/<run_id>; ULD_RUN_ROOT overrides the configured root.
std::string run_directory(const PipelineConfig& cfg);

struct LoadedDataset {
    DatasetManifest manifest;
    std::vector<Image> images;
    std::vector<int> train_indices;
    std::vector<int> test_indices;

    std::vector<Image> train_images() const;
    std::vector<Image> test_images() const;
};

LoadedDataset load_dataset(const PipelineConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints: versioned archive of all learnable parameters + config hash +
// optimizer state + iteration cursor, integrity-checked with a trailing
// checksum. Loading with a different config hash is refused unless forced.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const Model& model, const std::string& stage,
                     long iteration, std::uint64_t config_hash, const nn::Adam* adam = nullptr);

struct CheckpointInfo {
    std::string stage;
    long iteration = 0;
};

CheckpointInfo load_checkpoint(const std::string& path, Model& model, std::uint64_t config_hash,
                               bool force = false, nn::Adam* adam = nullptr);

// ---------------------------------------------------------------------------
// ZeroShot
// ---------------------------------------------------------------------------

struct ZeroshotResult {
    EvalReport report;
    ClusterModel cluster_model;
    std::vector<Mat> test_landmarks;  // per test image, K x 2 slots
    double purity = 0.0;
    CedCurve ced_forward, ced_backward;
};

ZeroshotResult run_zeroshot(const PipelineConfig& cfg, const LoadedDataset& data);

// ---------------------------------------------------------------------------
// Stage evaluation
// ---------------------------------------------------------------------------

struct StageEvaluation {
    EvalReport report;
    CedCurve ced_forward, ced_backward;
    double forward_nme = 0.0;
    double backward_nme = 0.0;
    double clustering_accuracy_pct = -1.0;  // -1 when not applicable
};

StageEvaluation evaluate_stage(const std::string& stage, const Model& model, const PseudoLabeler& labeler,
                               const LoadedDataset& data, const PipelineConfig& cfg);

// ---------------------------------------------------------------------------
// Stage running (artifacts under <run>/<stage>/)
// ---------------------------------------------------------------------------

// stage: bootstrap | duld | proxy | duldpp. Prerequisite checkpoints are
// validated; training stages resume from their newest boundary checkpoint.
void run_stage(const std::string& stage, const PipelineConfig& cfg);

// bootstrap -> duld -> proxy -> duldpp.
void run_full_pipeline(const PipelineConfig& cfg);

// Re-evaluates a finished stage into <run>/eval/<stage>/.
void run_eval(const std::string& stage, const PipelineConfig& cfg);

}  // namespace uld
