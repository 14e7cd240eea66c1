#include "uld/eval.hpp"

#include "uld/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace uld {

// ---------------------------------------------------------------------------
// Regression
// ---------------------------------------------------------------------------

Regressor fit_regressor(const Mat& pred, const Mat& gt, int subset_size, RegressionDirection direction,
                        std::uint64_t seed) {
    require(pred.rows() == gt.rows(), "fit_regressor: row count mismatch");
    const long m = pred.rows();
    require(subset_size >= 1 && subset_size <= m, "fit_regressor: subset_size out of range");

    const Mat& src_all = direction == RegressionDirection::forward ? pred : gt;
    const Mat& dst_all = direction == RegressionDirection::forward ? gt : pred;

    std::vector<long> rows(static_cast<std::size_t>(m));
    for (long i = 0; i < m; ++i) rows[static_cast<std::size_t>(i)] = i;
    if (subset_size < m) {
        Rng rng(seed);
        for (int i = 0; i < subset_size; ++i) {
            const long j = i + static_cast<long>(rng() % static_cast<std::uint64_t>(m - i));
            std::swap(rows[static_cast<std::size_t>(i)], rows[static_cast<std::size_t>(j)]);
        }
        rows.resize(static_cast<std::size_t>(subset_size));
    }

    Mat x(subset_size, src_all.cols() + 1);
    Mat y(subset_size, dst_all.cols());
    for (int i = 0; i < subset_size; ++i) {
        x.row(i).head(src_all.cols()) = src_all.row(rows[static_cast<std::size_t>(i)]);
        x(i, src_all.cols()) = 1.0;
        y.row(i) = dst_all.row(rows[static_cast<std::size_t>(i)]);
    }

    Regressor reg;
    reg.direction = direction;
    reg.subset_size = subset_size;
    reg.seed = seed;

    Eigen::ColPivHouseholderQR<Mat> qr(x);
    if (qr.rank() < x.cols()) {
        reg.ridge_fallback = true;
        const Mat gram = x.transpose() * x + 1e-6 * Mat::Identity(x.cols(), x.cols());
        reg.weights = gram.ldlt().solve(x.transpose() * y);
    } else {
        reg.weights = qr.solve(y);
    }
    return reg;
}

Mat apply_regressor(const Regressor& regressor, const Mat& src) {
    require(src.cols() + 1 == regressor.weights.rows(), "apply_regressor: dimension mismatch");
    Mat out = src * regressor.weights.topRows(src.cols());
    out.rowwise() += regressor.weights.row(src.cols());
    return out;
}

// ---------------------------------------------------------------------------
// NME
// ---------------------------------------------------------------------------

Vec nme_per_image(const Mat& mapped, const Mat& target, const Vec& normalizers) {
    require(mapped.rows() == target.rows() && mapped.cols() == target.cols(),
            "nme: mapped/target shape mismatch");
    require(mapped.cols() % 2 == 0, "nme: coordinate columns must be even");
    require(normalizers.size() == mapped.rows(), "nme: one normalizer per image required");
    const long n_points = mapped.cols() / 2;
    Vec per_image(mapped.rows());
    for (long i = 0; i < mapped.rows(); ++i) {
        if (!(normalizers(i) > 0.0)) throw std::invalid_argument("nme: normalizer must be positive");
        double sum = 0.0;
        for (long k = 0; k < n_points; ++k) {
            const double dx = mapped(i, 2 * k) - target(i, 2 * k);
            const double dy = mapped(i, 2 * k + 1) - target(i, 2 * k + 1);
            sum += std::sqrt(dx * dx + dy * dy);
        }
        per_image(i) = 100.0 * sum / (static_cast<double>(n_points) * normalizers(i));
    }
    return per_image;
}

double nme(const Mat& mapped, const Mat& target, const Vec& normalizers) {
    return nme_per_image(mapped, target, normalizers).mean();
}

CedCurve ced(const Vec& errors, const Vec& thresholds) {
    require(thresholds.size() >= 2, "ced: need at least two thresholds");
    for (long i = 0; i < errors.size(); ++i)
        require(errors(i) >= 0.0, "ced: errors must be non-negative");
    for (long i = 1; i < thresholds.size(); ++i)
        require(thresholds(i) > thresholds(i - 1), "ced: thresholds must be strictly increasing");

    CedCurve curve;
    curve.thresholds = thresholds;
    curve.fractions = Vec(thresholds.size());
    for (long t = 0; t < thresholds.size(); ++t) {
        long count = 0;
        for (long i = 0; i < errors.size(); ++i)
            if (errors(i) <= thresholds(t)) ++count;
        curve.fractions(t) = errors.size() > 0 ? static_cast<double>(count) / errors.size() : 0.0;
    }
    double area = 0.0;
    for (long t = 1; t < thresholds.size(); ++t)
        area += 0.5 * (curve.fractions(t) + curve.fractions(t - 1)) * (thresholds(t) - thresholds(t - 1));
    curve.auc = area / (thresholds(thresholds.size() - 1) - thresholds(0));
    return curve;
}

// ---------------------------------------------------------------------------
// Hungarian
// ---------------------------------------------------------------------------

HungarianResult hungarian(const Mat& cost) {
    const long n = cost.rows();
    const long m = cost.cols();
    require(n >= 1 && m >= n, "hungarian: need rows() <= cols()");

    // Potentials-based shortest augmenting path (1-indexed internals).
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> v(static_cast<std::size_t>(m) + 1, 0.0);
    std::vector<long> p(static_cast<std::size_t>(m) + 1, 0);
    std::vector<long> way(static_cast<std::size_t>(m) + 1, 0);

    for (long i = 1; i <= n; ++i) {
        p[0] = i;
        long j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const long i0 = p[static_cast<std::size_t>(j0)];
            double delta = inf;
            long j1 = 0;
            for (long j = 1; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                                   v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (long j = 0; j <= m; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const long j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }

    HungarianResult result;
    result.assignment.assign(static_cast<std::size_t>(n), -1);
    for (long j = 1; j <= m; ++j) {
        if (p[static_cast<std::size_t>(j)] > 0)
            result.assignment[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] =
                static_cast<int>(j - 1);
    }
    for (long i = 0; i < n; ++i) result.cost += cost(i, result.assignment[static_cast<std::size_t>(i)]);
    return result;
}

HungarianAccuracy hungarian_accuracy(const std::vector<Mat>& unsup, const std::vector<Mat>& gt,
                                     const Vec& d_iod, double threshold_factor) {
    require(!unsup.empty() && unsup.size() == gt.size(), "hungarian_accuracy: dataset size mismatch");
    require(d_iod.size() == static_cast<long>(unsup.size()), "hungarian_accuracy: one d_iod per image");
    const long k = unsup.front().rows();
    const long n = gt.front().rows();
    require(k >= 1, "hungarian_accuracy: need at least one unsupervised landmark");
    require(k <= n, "hungarian_accuracy: more unsupervised landmarks than ground-truth landmarks");

    Mat mean_cost = Mat::Zero(k, n);
    for (std::size_t img = 0; img < unsup.size(); ++img) {
        require(unsup[img].rows() == k && gt[img].rows() == n,
                "hungarian_accuracy: inconsistent landmark counts");
        require(d_iod(static_cast<long>(img)) > 0.0, "hungarian_accuracy: d_iod must be positive");
        for (long a = 0; a < k; ++a)
            for (long b = 0; b < n; ++b)
                mean_cost(a, b) +=
                    (unsup[img].row(a) - gt[img].row(b)).norm() / d_iod(static_cast<long>(img));
    }
    mean_cost /= static_cast<double>(unsup.size());

    const HungarianResult match = hungarian(mean_cost);

    HungarianAccuracy acc;
    acc.matched_unsup.assign(static_cast<std::size_t>(n), -1);
    acc.accuracy.assign(static_cast<std::size_t>(n), std::numeric_limits<double>::quiet_NaN());
    for (long a = 0; a < k; ++a) acc.matched_unsup[static_cast<std::size_t>(match.assignment[a])] = static_cast<int>(a);

    double matched_sum = 0.0;
    int matched_count = 0;
    for (long b = 0; b < n; ++b) {
        const int a = acc.matched_unsup[static_cast<std::size_t>(b)];
        if (a < 0) continue;
        long hits = 0;
        for (std::size_t img = 0; img < unsup.size(); ++img) {
            const double d = (unsup[img].row(a) - gt[img].row(b)).norm();
            if (d <= threshold_factor * d_iod(static_cast<long>(img))) ++hits;
        }
        acc.accuracy[static_cast<std::size_t>(b)] = static_cast<double>(hits) / unsup.size();
        matched_sum += acc.accuracy[static_cast<std::size_t>(b)];
        ++matched_count;
    }
    acc.mean_matched = matched_count > 0 ? matched_sum / matched_count : 0.0;
    return acc;
}

// ---------------------------------------------------------------------------
// Consistency
// ---------------------------------------------------------------------------

ConsistencyResult consistency_error(const LandmarkExtractor& extractor, const Image& image,
                                    const SimilarityTransform& transform) {
    const LabeledLandmarks base = extractor(image);
    const LabeledLandmarks moved = extractor(warp_image(image, transform));

    ConsistencyResult result;
    if (base.points.empty() || moved.points.empty()) {
        result.skipped = true;
        return result;
    }

    std::map<int, Keypoint> by_label;
    for (std::size_t i = 0; i < moved.points.size(); ++i) by_label[moved.labels[i]] = moved.points[i];

    double sum = 0.0;
    for (std::size_t i = 0; i < base.points.size(); ++i) {
        const auto it = by_label.find(base.labels[i]);
        if (it == by_label.end()) {
            ++result.unmatched;
            continue;
        }
        const Eigen::Vector2d expected =
            transform.apply({base.points[i].x, base.points[i].y}, image.width, image.height);
        sum += (Eigen::Vector2d(it->second.x, it->second.y) - expected).norm();
        ++result.matched;
    }
    result.unmatched += static_cast<int>(moved.points.size()) - result.matched;
    if (result.matched == 0) {
        result.skipped = true;
        return result;
    }
    result.error = sum / result.matched;
    return result;
}

// ---------------------------------------------------------------------------
// Binned diagnostics
// ---------------------------------------------------------------------------

std::vector<double> default_yaw_edges() { return {-90.0, -60.0, -30.0, 30.0, 60.0, 90.0}; }

int yaw_range_index(double yaw, const std::vector<double>& edges) {
    require(edges.size() >= 2, "yaw_range_index: need at least one bin");
    const int n_bins = static_cast<int>(edges.size()) - 1;
    for (int b = 0; b < n_bins; ++b) {
        const bool last = b == n_bins - 1;
        if (yaw >= edges[static_cast<std::size_t>(b)] &&
            (yaw < edges[static_cast<std::size_t>(b) + 1] ||
             (last && yaw <= edges[static_cast<std::size_t>(b) + 1])))
            return b;
    }
    throw std::invalid_argument("yaw_range_index: yaw " + std::to_string(yaw) + " falls outside the bins");
}

std::vector<YawBin> yaw_binned_nme(const Vec& per_image_errors, const Vec& yaw,
                                   const std::vector<double>& edges) {
    require(per_image_errors.size() == yaw.size(), "yaw_binned_nme: size mismatch");
    const int n_bins = static_cast<int>(edges.size()) - 1;
    std::vector<YawBin> bins(static_cast<std::size_t>(n_bins));
    for (int b = 0; b < n_bins; ++b) {
        bins[static_cast<std::size_t>(b)].lo = edges[static_cast<std::size_t>(b)];
        bins[static_cast<std::size_t>(b)].hi = edges[static_cast<std::size_t>(b) + 1];
    }
    std::vector<double> sums(static_cast<std::size_t>(n_bins), 0.0);
    for (long i = 0; i < yaw.size(); ++i) {
        const int b = yaw_range_index(yaw(i), edges);
        sums[static_cast<std::size_t>(b)] += per_image_errors(i);
        ++bins[static_cast<std::size_t>(b)].count;
    }
    for (int b = 0; b < n_bins; ++b) {
        if (bins[static_cast<std::size_t>(b)].count > 0)
            bins[static_cast<std::size_t>(b)].nme =
                sums[static_cast<std::size_t>(b)] / bins[static_cast<std::size_t>(b)].count;
    }
    return bins;
}

ClusteringAccuracy clustering_accuracy(const std::vector<int>& cluster_labels,
                                       const std::vector<int>& range_indices, int n_clusters) {
    require(cluster_labels.size() == range_indices.size(), "clustering_accuracy: size mismatch");
    require(!cluster_labels.empty(), "clustering_accuracy: empty input");
    require(n_clusters >= 1, "clustering_accuracy: n_clusters must be >= 1");
    int n_ranges = 0;
    for (int r : range_indices) {
        require(r >= 0, "clustering_accuracy: negative range index");
        n_ranges = std::max(n_ranges, r + 1);
    }

    ClusteringAccuracy out;
    out.cluster_to_range.assign(static_cast<std::size_t>(n_clusters), 0);
    std::vector<std::vector<long>> counts(static_cast<std::size_t>(n_clusters),
                                          std::vector<long>(static_cast<std::size_t>(n_ranges), 0));
    for (std::size_t i = 0; i < cluster_labels.size(); ++i) {
        require(cluster_labels[i] >= 0 && cluster_labels[i] < n_clusters,
                "clustering_accuracy: cluster label out of range");
        ++counts[static_cast<std::size_t>(cluster_labels[i])][static_cast<std::size_t>(range_indices[i])];
    }
    for (int c = 0; c < n_clusters; ++c) {
        long best = -1;
        int best_range = 0;
        bool tie = false;
        for (int r = 0; r < n_ranges; ++r) {
            const long v = counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(r)];
            if (v > best) {
                best = v;
                best_range = r;
                tie = false;
            } else if (v == best && v > 0) {
                tie = true;  // lowest range index wins, flag it
            }
        }
        out.cluster_to_range[static_cast<std::size_t>(c)] = best_range;
        if (tie) out.tie_flagged = true;
    }

    long hits = 0;
    for (std::size_t i = 0; i < cluster_labels.size(); ++i)
        if (out.cluster_to_range[static_cast<std::size_t>(cluster_labels[i])] == range_indices[i]) ++hits;
    out.percent = 100.0 * static_cast<double>(hits) / static_cast<double>(cluster_labels.size());
    return out;
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

std::string format_double(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", value);
    return buf;
}

void EvalReport::set(const std::string& key, double value) { fields_.emplace_back(key, format_double(value)); }

void EvalReport::set(const std::string& key, const std::string& value) { fields_.emplace_back(key, value); }

bool EvalReport::has(const std::string& key) const {
    for (const auto& [k, v] : fields_)
        if (k == key) return true;
    return false;
}

double EvalReport::get(const std::string& key) const {
    for (const auto& [k, v] : fields_)
        if (k == key) return std::stod(v);
    throw std::out_of_range("EvalReport: no field '" + key + "'");
}

std::string EvalReport::to_text() const {
    std::ostringstream out;
    for (const auto& [k, v] : fields_) out << k << " = " << v << "\n";
    return out.str();
}

void EvalReport::write(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("EvalReport: cannot open '" + path + "' for writing");
    out << to_text();
}

EvalReport EvalReport::read(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("EvalReport: cannot open '" + path + "'");
    EvalReport report;
    std::string line;
    while (std::getline(in, line)) {
        const auto sep = line.find(" = ");
        if (sep == std::string::npos) continue;
        report.set(line.substr(0, sep), line.substr(sep + 3));
    }
    return report;
}

void write_ced_csv(const CedCurve& curve, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_ced_csv: cannot open '" + path + "'");
    out << "threshold,fraction\n";
    for (long i = 0; i < curve.thresholds.size(); ++i)
        out << format_double(curve.thresholds(i)) << "," << format_double(curve.fractions(i)) << "\n";
}

}  // namespace uld
