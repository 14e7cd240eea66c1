#pragma once

#include "uld/augment.hpp"
#include "uld/types.hpp"

#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace uld {

// ---------------------------------------------------------------------------
// Landmark regression (forward: discovered -> ground truth; backward: the
// reverse). Landmark matrices hold one image per row with interleaved
// (x0, y0, x1, y1, ...) coordinates.
// ---------------------------------------------------------------------------

enum class RegressionDirection { forward, backward };

struct Regressor {
    Mat weights;  // (src_dim + 1) x dst_dim, last row is the bias
    RegressionDirection direction = RegressionDirection::forward;
    bool ridge_fallback = false;
    int subset_size = 0;
    std::uint64_t seed = 0;
};

// Least-squares fit on a seeded random subset of rows; rank deficiency falls
// back to ridge (lambda = 1e-6) and flags the regressor.
Regressor fit_regressor(const Mat& pred, const Mat& gt, int subset_size, RegressionDirection direction,
                        std::uint64_t seed);
Mat apply_regressor(const Regressor& regressor, const Mat& src);

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

// Per-image mean landmark error, normalized per image, as a percentage.
Vec nme_per_image(const Mat& mapped, const Mat& target, const Vec& normalizers);
// Grand mean over images and landmarks, x100.
double nme(const Mat& mapped, const Mat& target, const Vec& normalizers);

struct CedCurve {
    Vec thresholds;
    Vec fractions;  // fraction of images with error <= threshold
    double auc = 0.0;  // trapezoid, normalized by the threshold range
};

CedCurve ced(const Vec& errors, const Vec& thresholds);

// ---------------------------------------------------------------------------
// Hungarian matching
// ---------------------------------------------------------------------------

struct HungarianResult {
    std::vector<int> assignment;  // per row: matched column
    double cost = 0.0;
};

// Minimum-cost one-to-one assignment; rows() <= cols().
HungarianResult hungarian(const Mat& cost);

struct HungarianAccuracy {
    std::vector<int> matched_unsup;    // per GT landmark: matched unsupervised index or -1
    std::vector<double> accuracy;      // per GT landmark: hit fraction, NaN when unmatched
    double mean_matched = 0.0;         // mean accuracy over matched GT landmarks
};

// One global correspondence: the dataset-mean normalized distance matrix is
// matched once with the Hungarian algorithm; per-GT-landmark accuracy is the
// fraction of images whose matched unsupervised landmark lies within
// threshold_factor * d_iod.
HungarianAccuracy hungarian_accuracy(const std::vector<Mat>& unsup, const std::vector<Mat>& gt,
                                     const Vec& d_iod, double threshold_factor = 0.2);

// ---------------------------------------------------------------------------
// Consistency under similarity transforms
// ---------------------------------------------------------------------------

struct LabeledLandmarks {
    std::vector<Keypoint> points;
    std::vector<int> labels;
};

using LandmarkExtractor = std::function<LabeledLandmarks(const Image&)>;

struct ConsistencyResult {
    double error = 0.0;  // mean over label-matched landmarks
    int matched = 0;
    int unmatched = 0;
    bool skipped = false;  // no detections on either side
};

// e = mean over matched labels of || p(A(x)) - A(p(x)) ||.
ConsistencyResult consistency_error(const LandmarkExtractor& extractor, const Image& image,
                                    const SimilarityTransform& transform);

// ---------------------------------------------------------------------------
// Binned diagnostics
// ---------------------------------------------------------------------------

struct YawBin {
    double lo = 0.0;
    double hi = 0.0;
    std::optional<double> nme;  // absent when the bin is empty
    int count = 0;
};

// Bins are [lo, hi) except the last, which includes its right edge. Every
// image must fall into a bin.
std::vector<YawBin> yaw_binned_nme(const Vec& per_image_errors, const Vec& yaw,
                                   const std::vector<double>& edges);

std::vector<double> default_yaw_edges();  // -90, -60, -30, 30, 60, 90

struct ClusteringAccuracy {
    double percent = 0.0;
    bool tie_flagged = false;
    std::vector<int> cluster_to_range;
};

// Maps every cluster to its majority yaw-range (ties to the lowest range
// index, flagged); accuracy is the fraction of images whose range matches
// their cluster's assigned range.
ClusteringAccuracy clustering_accuracy(const std::vector<int>& cluster_labels,
                                       const std::vector<int>& range_indices, int n_clusters);

int yaw_range_index(double yaw, const std::vector<double>& edges);

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

// Flat ordered key/value report with deterministic formatting, so identical
// runs serialize byte-identically.
class EvalReport {
public:
    void set(const std::string& key, double value);
    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;
    double get(const std::string& key) const;

    std::string to_text() const;  // "key = value" lines
    void write(const std::string& path) const;
    static EvalReport read(const std::string& path);

    const std::vector<std::pair<std::string, std::string>>& fields() const { return fields_; }

private:
    std::vector<std::pair<std::string, std::string>> fields_;
};

std::string format_double(double value);  // %.9g, deterministic

void write_ced_csv(const CedCurve& curve, const std::string& path);

}  // namespace uld
