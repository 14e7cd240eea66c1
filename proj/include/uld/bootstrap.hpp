#pragma once

#include "uld/augment.hpp"
#include "uld/clustering.hpp"
#include "uld/loss_report.hpp"
#include "uld/model.hpp"

#include <vector>

namespace uld {

// Binary detector targets from descriptor correspondences: positions are the
// masked pixels of the original image on a stride grid; a position is
// positive when its mutual-nearest descriptor match in the augmented volume
// lands within match_radius of the geometric correspondence. Volumes must be
// L2-normalized per pixel.
Mat bce_targets_from_mnn(const Mat& vol_norm, const Mat& vol_aug_norm, int height, int width,
                         const CorrespondencePair& pair, int grid_stride, double match_radius);

// Weighted mean over masked pixels of the symmetric binary cross-entropy
// between the two heatmaps (the original sampled at q, the augmented sampled
// bilinearly at A(q)) against the shared 0/1 targets. positive_weight
// counters the negative-pixel imbalance; 1 gives the plain mean.
double detector_bce(const Heatmap& h, const Heatmap& h_aug, const CorrespondencePair& pair,
                    const Mat& targets, double positive_weight = 1.0);
double detector_bce_grad(const Heatmap& h, const Heatmap& h_aug, const CorrespondencePair& pair,
                         const Mat& targets, Mat* dh_col, Mat* dh_aug_col,
                         double positive_weight = 1.0);

// InfoNCE-style correspondence loss: for sampled masked positions q_i, the
// softmax over candidate positions {A(q_j)} in the augmented volume must put
// its mass on j == i. Gradients are w.r.t. the normalized volumes.
double correspondence_nll(const Mat& vol_norm, const Mat& vol_aug_norm, int height, int width,
                          const CorrespondencePair& pair, double temperature, int n_samples,
                          std::uint64_t seed);
double correspondence_nll_grad(const Mat& vol_norm, const Mat& vol_aug_norm, int height, int width,
                               const CorrespondencePair& pair, double temperature, int n_samples,
                               std::uint64_t seed, Mat* dvol, Mat* dvol_aug);

struct BootstrapConfig {
    int iterations = 300;
    int batch_size = 4;
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    AugmentationConfig augment;
    double temperature = 0.1;
    int nll_samples = 256;
    int bce_grid_stride = 2;
    double bce_match_radius = 1.5;
    double bce_positive_weight_cap = 30.0;  // upweight positives up to neg/pos, capped
    double detector_loss_weight = 1.0;
    double descriptor_loss_weight = 1.0;
    ExtractionOptions extraction;
    std::uint64_t seed = 7;
};

struct BootstrapResult {
    std::vector<double> losses;  // combined loss per iteration
    double initial_loss = 0.0;
    double final_loss = 0.0;
    bool aborted_nan = false;
    long aborted_at = -1;
    // Initial training set content: keypoints + descriptors per image
    // (pseudo-labels arrive with the first clustering pass).
    std::vector<ImageExtraction> extractions;
};

// Self-supervised initialization of aggregator + heads on image/augmentation
// pairs (detector BCE + descriptor correspondence NLL, Adam). On a NaN loss
// the last finite parameters are restored and the run aborts.
BootstrapResult bootstrap_train(const std::vector<Image>& images, Model& model, const BootstrapConfig& cfg,
                                LossReport* report = nullptr);

}  // namespace uld
