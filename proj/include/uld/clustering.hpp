#pragma once

#include "uld/types.hpp"

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace uld {

// ---------------------------------------------------------------------------
// Cluster models
// ---------------------------------------------------------------------------

struct ClusterModel {
    enum class Stage { flat_keypoint, pose_stage1, keypoint_stage2 };

    Mat centroids;  // k x dim
    Stage stage = Stage::flat_keypoint;
    int parent_pose_label = -1;  // set for stage-2 models

    int k() const { return static_cast<int>(centroids.rows()); }
    int dim() const { return static_cast<int>(centroids.cols()); }
};

struct KMeansResult {
    ClusterModel model;
    std::vector<int> labels;
    std::vector<double> inertia_history;  // one entry per Lloyd assignment pass
    double inertia = 0.0;
    int iterations = 0;
    int reseeds = 0;
};

// k-means++ seeding followed by Lloyd iterations until the largest centroid
// shift drops below tol or max_iter passes. Empty clusters are re-seeded from
// the point currently farthest from its centroid. Deterministic per seed;
// all ties break toward the lowest index.
KMeansResult kmeans(const Mat& points, int k, std::uint64_t seed, int max_iter = 100, double tol = 1e-7);

struct Assignment {
    std::vector<int> labels;
    std::vector<double> distances;
};

// Nearest-centroid labels (Euclidean); equidistant points take the lowest
// centroid index.
Assignment assign(const Mat& points, const ClusterModel& model);

// ---------------------------------------------------------------------------
// Exemplar assignment
// ---------------------------------------------------------------------------

struct LabeledKeypoint {
    Keypoint p;
    Vec f;
    int label = -1;
    double centroid_distance = 0.0;
};

// Per image: keep for every cluster label present exactly one keypoint, the
// one whose descriptor is nearest that label's centroid. Output labels are
// pairwise distinct; output size <= model.k().
std::vector<LabeledKeypoint> exemplar_assign(const std::vector<Keypoint>& keypoints, const Mat& descriptors,
                                             const std::vector<int>& labels, const ClusterModel& model);

// ---------------------------------------------------------------------------
// Two-stage clustering
// ---------------------------------------------------------------------------

struct TwoStageResult {
    ClusterModel pose_model;                  // stage 1 over latent codes
    std::vector<ClusterModel> keypoint_models;  // one per pose cluster (may be shrunk)
    std::vector<int> pose_labels;             // u_j per image
    std::vector<std::vector<int>> composite_labels;  // per image, per keypoint: u * K + k
    std::vector<int> shrunk_pose_clusters;    // pose clusters whose stage-2 k was reduced
    int nominal_k = 0;                        // label stride (composite label = u * nominal_k + k)
};

// Stage 1 partitions per-image latent codes into Q pose clusters; stage 2
// clusters the keypoint descriptors of each pose cluster into (at most) K
// groups. A pose cluster holding fewer than K descriptors gets a shrunk
// stage-2 model instead of failing.
TwoStageResult two_stage_cluster(const Mat& latent_codes, const std::vector<Mat>& per_image_descriptors,
                                 int pose_clusters, int keypoint_clusters, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Training set
// ---------------------------------------------------------------------------

struct TrainingImageEntry {
    std::vector<Keypoint> keypoints;  // kept keypoints, aligned with rows of descriptors
    Mat descriptors;                  // n x D, L2-normalized rows
    std::vector<int> labels;          // pseudo-labels in [0, label_space)
    Vec latent;                       // latent pose code, empty when absent
    int pose_label = -1;
};

// Inference-time labeler: enough state to reproduce pseudo-labels for new
// images (flat keypoint model, or pose + per-pose stage-2 models).
struct PseudoLabeler {
    bool two_stage = false;
    int nominal_k = 0;
    ClusterModel pose_model;
    std::vector<ClusterModel> keypoint_models;  // size 1 when flat

    int label_space() const {
        return nominal_k * (two_stage ? static_cast<int>(keypoint_models.size()) : 1);
    }
};

struct TrainingSet {
    std::vector<TrainingImageEntry> images;
    int epoch = 0;
    int keypoint_clusters = 0;  // K
    int pose_clusters = 1;      // Q; 1 in flat mode
    PseudoLabeler labeler;

    int label_space() const { return keypoint_clusters * pose_clusters; }
};

struct ImageExtraction {
    std::vector<Keypoint> keypoints;
    Mat descriptors;  // n x D, L2-normalized rows
    Vec latent;       // empty when no encoder is attached
};

using ExtractFn = std::function<ImageExtraction(int image_index)>;

struct UpdateOptions {
    int keypoint_clusters = 10;  // K
    int pose_clusters = 1;       // Q; > 1 switches to two-stage mode
    std::uint64_t seed = 0;
    int kmeans_max_iter = 100;
    double kmeans_tol = 1e-7;
};

struct UpdateStats {
    int empty_images = 0;  // images that produced no keypoints this epoch
    std::vector<int> shrunk_pose_clusters;
};

// One self-training dataset refresh: extract keypoints/descriptors (and
// latents) per image, cluster, exemplar-assign, stamp the next epoch.
TrainingSet update_training_set(int n_images, const ExtractFn& extract, const UpdateOptions& options,
                                const TrainingSet* previous = nullptr, UpdateStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Cluster quality
// ---------------------------------------------------------------------------

struct ClusterQuality {
    double silhouette = 0.0;         // mean over points, singletons contribute 0
    double calinski_harabasz = 0.0;  // 0 in the degenerate all-singleton / zero-dispersion cases
};

ClusterQuality cluster_quality(const Mat& points, const std::vector<int>& labels);

// Majority-identity purity over points with a known identity (>= 0);
// identity-less points are ignored.
double cluster_purity(const std::vector<int>& labels, const std::vector<int>& true_ids);

// ---------------------------------------------------------------------------
// Serialization (versioned binary, used next to checkpoints)
// ---------------------------------------------------------------------------

void save_cluster_model(const ClusterModel& model, std::ostream& out);
ClusterModel load_cluster_model(std::istream& in);
void save_pseudo_labeler(const PseudoLabeler& labeler, const std::string& path);
PseudoLabeler load_pseudo_labeler(const std::string& path);

}  // namespace uld
