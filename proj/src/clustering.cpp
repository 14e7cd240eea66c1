#include "uld/clustering.hpp"

#include "uld/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

namespace uld {

namespace {

// Squared Euclidean distances, points x centroids.
Mat pairwise_sq(const Mat& points, const Mat& centroids) {
    Mat d2 = -2.0 * points * centroids.transpose();
    d2.colwise() += points.rowwise().squaredNorm();
    d2.rowwise() += centroids.rowwise().squaredNorm().transpose();
    return d2.cwiseMax(0.0);
}

// Nearest centroid per point, ties to the lowest index.
void nearest(const Mat& d2, std::vector<int>& labels, std::vector<double>& dist2) {
    const long n = d2.rows();
    labels.resize(n);
    dist2.resize(n);
    for (long i = 0; i < n; ++i) {
        int best = 0;
        double bd = d2(i, 0);
        for (long c = 1; c < d2.cols(); ++c) {
            if (d2(i, c) < bd) {
                bd = d2(i, c);
                best = static_cast<int>(c);
            }
        }
        labels[i] = best;
        dist2[i] = bd;
    }
}

}  // namespace

KMeansResult kmeans(const Mat& points, int k, std::uint64_t seed, int max_iter, double tol) {
    const long n = points.rows();
    require(k >= 1, "kmeans: k must be >= 1");
    if (n < k)
        throw std::invalid_argument("kmeans: need at least k=" + std::to_string(k) + " points, got " +
                                    std::to_string(n));

    Rng rng(seed);
    Mat centroids(k, points.cols());

    // k-means++ seeding.
    {
        const long first = static_cast<long>(rng() % static_cast<std::uint64_t>(n));
        centroids.row(0) = points.row(first);
        Vec d2 = (points.rowwise() - centroids.row(0)).rowwise().squaredNorm();
        for (int c = 1; c < k; ++c) {
            const double total = d2.sum();
            long chosen = -1;
            if (total > 0.0) {
                double r = uniform(rng, 0.0, total);
                for (long i = 0; i < n; ++i) {
                    r -= d2(i);
                    if (r <= 0.0) {
                        chosen = i;
                        break;
                    }
                }
                if (chosen < 0) chosen = n - 1;
            } else {
                // All remaining mass at already-chosen points; fall back to the
                // first point not yet used as a centroid.
                chosen = 0;
                for (long i = 0; i < n; ++i) {
                    bool used = false;
                    for (int cc = 0; cc < c; ++cc)
                        if ((points.row(i) - centroids.row(cc)).squaredNorm() == 0.0) used = true;
                    if (!used) {
                        chosen = i;
                        break;
                    }
                }
            }
            centroids.row(c) = points.row(chosen);
            d2 = d2.cwiseMin((points.rowwise() - centroids.row(c)).rowwise().squaredNorm());
        }
    }

    KMeansResult result;
    std::vector<int> labels;
    std::vector<double> dist2;
    int reseeds = 0;

    for (int iter = 0; iter < max_iter; ++iter) {
        Mat d2 = pairwise_sq(points, centroids);
        nearest(d2, labels, dist2);

        // Repair empty clusters from the point farthest from its centroid.
        std::vector<long> counts(k, 0);
        for (int l : labels) ++counts[l];
        for (int c = 0; c < k; ++c) {
            if (counts[c] > 0) continue;
            long farthest = 0;
            double best = -1.0;
            for (long i = 0; i < n; ++i) {
                if (counts[labels[i]] <= 1) continue;  // don't strip another cluster bare
                if (dist2[i] > best) {
                    best = dist2[i];
                    farthest = i;
                }
            }
            --counts[labels[farthest]];
            labels[farthest] = c;
            ++counts[c];
            centroids.row(c) = points.row(farthest);
            dist2[farthest] = 0.0;
            ++reseeds;
        }

        result.inertia_history.push_back(std::accumulate(dist2.begin(), dist2.end(), 0.0));

        Mat next = Mat::Zero(k, points.cols());
        for (long i = 0; i < n; ++i) next.row(labels[i]) += points.row(i);
        for (int c = 0; c < k; ++c) next.row(c) /= static_cast<double>(counts[c]);

        const double shift = (next - centroids).rowwise().norm().maxCoeff();
        centroids = next;
        result.iterations = iter + 1;
        if (shift < tol) break;
    }

    // Final assignment against the converged centroids.
    Mat d2 = pairwise_sq(points, centroids);
    nearest(d2, labels, dist2);
    result.inertia = std::accumulate(dist2.begin(), dist2.end(), 0.0);
    result.inertia_history.push_back(result.inertia);
    result.labels = labels;
    result.reseeds = reseeds;
    result.model.centroids = centroids;
    result.model.stage = ClusterModel::Stage::flat_keypoint;
    return result;
}

Assignment assign(const Mat& points, const ClusterModel& model) {
    require(points.cols() == model.centroids.cols(),
            "assign: descriptor dimension does not match the cluster model");
    Assignment a;
    if (points.rows() == 0) return a;
    Mat d2 = pairwise_sq(points, model.centroids);
    std::vector<double> dist2;
    nearest(d2, a.labels, dist2);
    a.distances.resize(dist2.size());
    for (std::size_t i = 0; i < dist2.size(); ++i) a.distances[i] = std::sqrt(dist2[i]);
    return a;
}

std::vector<LabeledKeypoint> exemplar_assign(const std::vector<Keypoint>& keypoints, const Mat& descriptors,
                                             const std::vector<int>& labels, const ClusterModel& model) {
    require(static_cast<long>(keypoints.size()) == descriptors.rows(), "exemplar_assign: size mismatch");
    require(keypoints.size() == labels.size(), "exemplar_assign: size mismatch");

    std::vector<long> best(model.k(), -1);
    std::vector<double> best_d(model.k(), std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < keypoints.size(); ++i) {
        const int l = labels[i];
        require(l >= 0 && l < model.k(), "exemplar_assign: label outside the model's range");
        const double d = (descriptors.row(i) - model.centroids.row(l)).norm();
        if (d < best_d[l]) {
            best_d[l] = d;
            best[l] = static_cast<long>(i);
        }
    }

    std::vector<LabeledKeypoint> out;
    for (int l = 0; l < model.k(); ++l) {
        if (best[l] < 0) continue;
        LabeledKeypoint kp;
        kp.p = keypoints[best[l]];
        kp.f = descriptors.row(best[l]).transpose();
        kp.label = l;
        kp.centroid_distance = best_d[l];
        out.push_back(std::move(kp));
    }
    return out;
}

TwoStageResult two_stage_cluster(const Mat& latent_codes, const std::vector<Mat>& per_image_descriptors,
                                 int pose_clusters, int keypoint_clusters, std::uint64_t seed) {
    const long m = latent_codes.rows();
    require(pose_clusters >= 1 && keypoint_clusters >= 1, "two_stage_cluster: Q and K must be >= 1");
    require(m == static_cast<long>(per_image_descriptors.size()),
            "two_stage_cluster: every image needs a latent code");

    TwoStageResult result;
    result.nominal_k = keypoint_clusters;

    if (pose_clusters == 1) {
        result.pose_model.centroids = latent_codes.colwise().mean();
        result.pose_model.stage = ClusterModel::Stage::pose_stage1;
        result.pose_labels.assign(m, 0);
    } else {
        KMeansResult stage1 = kmeans(latent_codes, pose_clusters, seed);
        result.pose_model = std::move(stage1.model);
        result.pose_model.stage = ClusterModel::Stage::pose_stage1;
        result.pose_labels = std::move(stage1.labels);
    }

    result.composite_labels.resize(m);
    for (int q = 0; q < pose_clusters; ++q) {
        Mat pool;
        std::vector<std::pair<long, long>> origin;  // (image, row) per pooled descriptor
        long rows = 0;
        for (long j = 0; j < m; ++j)
            if (result.pose_labels[j] == q) rows += per_image_descriptors[j].rows();
        long dim = 0;
        for (const Mat& d : per_image_descriptors)
            if (d.rows() > 0) dim = d.cols();
        pool.resize(rows, dim);
        long r = 0;
        for (long j = 0; j < m; ++j) {
            if (result.pose_labels[j] != q) continue;
            const Mat& d = per_image_descriptors[j];
            for (long i = 0; i < d.rows(); ++i) {
                pool.row(r) = d.row(i);
                origin.emplace_back(j, i);
                ++r;
            }
        }

        ClusterModel model;
        model.stage = ClusterModel::Stage::keypoint_stage2;
        model.parent_pose_label = q;
        std::vector<int> labels(rows, 0);
        if (rows == 0) {
            model.centroids = Mat::Zero(0, dim);
            result.shrunk_pose_clusters.push_back(q);
        } else {
            int k_here = keypoint_clusters;
            if (rows < keypoint_clusters) {
                k_here = static_cast<int>(rows);
                result.shrunk_pose_clusters.push_back(q);
            }
            // Q == 1 degenerates to the flat clustering under the same seed.
            KMeansResult stage2 = kmeans(pool, k_here, seed + static_cast<std::uint64_t>(q));
            model.centroids = std::move(stage2.model.centroids);
            labels = std::move(stage2.labels);
        }
        result.keypoint_models.push_back(std::move(model));

        for (long i = 0; i < rows; ++i) {
            auto [img, row] = origin[static_cast<std::size_t>(i)];
            auto& comp = result.composite_labels[img];
            if (comp.size() != static_cast<std::size_t>(per_image_descriptors[img].rows()))
                comp.assign(per_image_descriptors[img].rows(), -1);
            comp[row] = q * keypoint_clusters + labels[i];
        }
    }
    for (long j = 0; j < m; ++j)
        if (result.composite_labels[j].empty())
            result.composite_labels[j].assign(per_image_descriptors[j].rows(), -1);
    return result;
}

TrainingSet update_training_set(int n_images, const ExtractFn& extract, const UpdateOptions& options,
                                const TrainingSet* previous, UpdateStats* stats) {
    require(n_images >= 1, "update_training_set: no images");
    require(options.keypoint_clusters >= 1, "update_training_set: K must be >= 1");
    require(options.pose_clusters >= 1, "update_training_set: Q must be >= 1");

    std::vector<ImageExtraction> ex(n_images);
    int empty_images = 0;
    for (int j = 0; j < n_images; ++j) {
        ex[j] = extract(j);
        require(static_cast<long>(ex[j].keypoints.size()) == ex[j].descriptors.rows(),
                "update_training_set: keypoint/descriptor mismatch");
        if (ex[j].keypoints.empty()) ++empty_images;
    }

    TrainingSet set;
    set.epoch = previous ? previous->epoch + 1 : 0;
    set.keypoint_clusters = options.keypoint_clusters;
    set.pose_clusters = options.pose_clusters;
    set.images.resize(n_images);

    const bool two_stage = options.pose_clusters > 1;
    if (!two_stage) {
        long total = 0;
        long dim = 0;
        for (const auto& e : ex) {
            total += e.descriptors.rows();
            if (e.descriptors.rows() > 0) dim = e.descriptors.cols();
        }
        if (total < options.keypoint_clusters)
            throw std::runtime_error("update_training_set: only " + std::to_string(total) +
                                     " keypoints extracted, fewer than K=" +
                                     std::to_string(options.keypoint_clusters));
        Mat pool(total, dim);
        long r = 0;
        for (const auto& e : ex) {
            for (long i = 0; i < e.descriptors.rows(); ++i) pool.row(r++) = e.descriptors.row(i);
        }
        KMeansResult km = kmeans(pool, options.keypoint_clusters, options.seed, options.kmeans_max_iter,
                                 options.kmeans_tol);
        set.labeler.two_stage = false;
        set.labeler.nominal_k = options.keypoint_clusters;
        set.labeler.keypoint_models = {km.model};

        r = 0;
        for (int j = 0; j < n_images; ++j) {
            std::vector<int> labels(ex[j].keypoints.size());
            for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = km.labels[r++];
            auto kept = exemplar_assign(ex[j].keypoints, ex[j].descriptors, labels, km.model);
            auto& entry = set.images[j];
            entry.latent = ex[j].latent;
            entry.descriptors.resize(static_cast<long>(kept.size()), dim);
            for (std::size_t i = 0; i < kept.size(); ++i) {
                entry.keypoints.push_back(kept[i].p);
                entry.descriptors.row(static_cast<long>(i)) = kept[i].f.transpose();
                entry.labels.push_back(kept[i].label);
            }
        }
    } else {
        long latent_dim = -1;
        for (const auto& e : ex) {
            require(e.latent.size() > 0, "update_training_set: two-stage mode requires a latent code per image");
            if (latent_dim < 0) latent_dim = e.latent.size();
            require(e.latent.size() == latent_dim, "update_training_set: inconsistent latent dimensions");
        }
        Mat latents(n_images, latent_dim);
        std::vector<Mat> descs(n_images);
        for (int j = 0; j < n_images; ++j) {
            latents.row(j) = ex[j].latent.transpose();
            descs[j] = ex[j].descriptors;
        }
        TwoStageResult ts = two_stage_cluster(latents, descs, options.pose_clusters,
                                              options.keypoint_clusters, options.seed);
        set.labeler.two_stage = true;
        set.labeler.nominal_k = options.keypoint_clusters;
        set.labeler.pose_model = ts.pose_model;
        set.labeler.keypoint_models = ts.keypoint_models;
        if (stats) stats->shrunk_pose_clusters = ts.shrunk_pose_clusters;

        for (int j = 0; j < n_images; ++j) {
            const int u = ts.pose_labels[j];
            const ClusterModel& model = ts.keypoint_models[u];
            std::vector<int> within(ex[j].keypoints.size());
            for (std::size_t i = 0; i < within.size(); ++i)
                within[i] = ts.composite_labels[j][i] - u * options.keypoint_clusters;
            auto kept = model.k() > 0
                            ? exemplar_assign(ex[j].keypoints, ex[j].descriptors, within, model)
                            : std::vector<LabeledKeypoint>{};
            auto& entry = set.images[j];
            entry.latent = ex[j].latent;
            entry.pose_label = u;
            entry.descriptors.resize(static_cast<long>(kept.size()), ex[j].descriptors.cols());
            for (std::size_t i = 0; i < kept.size(); ++i) {
                entry.keypoints.push_back(kept[i].p);
                entry.descriptors.row(static_cast<long>(i)) = kept[i].f.transpose();
                entry.labels.push_back(u * options.keypoint_clusters + kept[i].label);
            }
        }
    }

    if (stats) stats->empty_images = empty_images;
    return set;
}

ClusterQuality cluster_quality(const Mat& points, const std::vector<int>& labels) {
    const long n = points.rows();
    require(n == static_cast<long>(labels.size()), "cluster_quality: size mismatch");
    require(n >= 2, "cluster_quality: need at least two points");

    int k = 0;
    for (int l : labels) k = std::max(k, l + 1);
    std::vector<long> counts(k, 0);
    for (int l : labels) {
        require(l >= 0, "cluster_quality: negative label");
        ++counts[l];
    }
    int non_empty = 0;
    for (long c : counts)
        if (c > 0) ++non_empty;
    if (non_empty < 2) throw std::invalid_argument("cluster_quality: needs at least two clusters");

    ClusterQuality q;

    // Silhouette, singleton convention s(i) = 0.
    {
        Mat d = pairwise_sq(points, points).cwiseSqrt();
        double total = 0.0;
        for (long i = 0; i < n; ++i) {
            const int own = labels[i];
            if (counts[own] == 1) continue;  // contributes 0
            std::vector<double> sums(k, 0.0);
            for (long j = 0; j < n; ++j)
                if (j != i) sums[labels[j]] += d(i, j);
            const double a = sums[own] / static_cast<double>(counts[own] - 1);
            double b = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c)
                if (c != own && counts[c] > 0) b = std::min(b, sums[c] / static_cast<double>(counts[c]));
            const double denom = std::max(a, b);
            total += denom > 0.0 ? (b - a) / denom : 0.0;
        }
        q.silhouette = total / static_cast<double>(n);
    }

    // Calinski-Harabasz: between/within dispersion ratio; degenerate cases
    // (all singletons or zero within-dispersion) report 0.
    {
        const Eigen::RowVectorXd mean = points.colwise().mean();
        double between = 0.0;
        double within = 0.0;
        Mat centroids = Mat::Zero(k, points.cols());
        for (long i = 0; i < n; ++i) centroids.row(labels[i]) += points.row(i);
        for (int c = 0; c < k; ++c)
            if (counts[c] > 0) centroids.row(c) /= static_cast<double>(counts[c]);
        for (long i = 0; i < n; ++i) within += (points.row(i) - centroids.row(labels[i])).squaredNorm();
        for (int c = 0; c < k; ++c)
            if (counts[c] > 0) between += counts[c] * (centroids.row(c) - mean).squaredNorm();
        if (n > non_empty && within > 0.0)
            q.calinski_harabasz = (between / (non_empty - 1)) / (within / static_cast<double>(n - non_empty));
    }
    return q;
}

double cluster_purity(const std::vector<int>& labels, const std::vector<int>& true_ids) {
    require(labels.size() == true_ids.size(), "cluster_purity: size mismatch");
    int k = 0, t = 0;
    for (int l : labels) k = std::max(k, l + 1);
    for (int id : true_ids) t = std::max(t, id + 1);
    std::vector<std::vector<long>> table(k, std::vector<long>(t, 0));
    long total = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (true_ids[i] < 0) continue;
        ++table[labels[i]][true_ids[i]];
        ++total;
    }
    require(total > 0, "cluster_purity: no points with known identity");
    long agree = 0;
    for (int c = 0; c < k; ++c) agree += *std::max_element(table[c].begin(), table[c].end());
    return static_cast<double>(agree) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {
constexpr char kClusterMagic[4] = {'U', 'L', 'D', 'C'};
constexpr std::uint16_t kClusterVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error(std::string("cluster model: truncated while reading ") + what);
    return v;
}
}  // namespace

void save_cluster_model(const ClusterModel& model, std::ostream& out) {
    out.write(kClusterMagic, 4);
    put<std::uint16_t>(out, kClusterVersion);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(model.stage));
    put<std::int32_t>(out, model.parent_pose_label);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(model.k()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(model.dim()));
    for (long i = 0; i < model.centroids.rows(); ++i)
        for (long j = 0; j < model.centroids.cols(); ++j) put<double>(out, model.centroids(i, j));
}

ClusterModel load_cluster_model(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kClusterMagic, 4) != 0)
        throw std::runtime_error("cluster model: bad magic");
    const auto version = get<std::uint16_t>(in, "version");
    if (version != kClusterVersion)
        throw std::runtime_error("cluster model: unsupported version " + std::to_string(version));
    ClusterModel model;
    model.stage = static_cast<ClusterModel::Stage>(get<std::uint16_t>(in, "stage"));
    model.parent_pose_label = get<std::int32_t>(in, "parent pose label");
    const auto k = get<std::uint32_t>(in, "k");
    const auto dim = get<std::uint32_t>(in, "dim");
    model.centroids.resize(k, dim);
    for (std::uint32_t i = 0; i < k; ++i)
        for (std::uint32_t j = 0; j < dim; ++j) model.centroids(i, j) = get<double>(in, "centroid");
    return model;
}

void save_pseudo_labeler(const PseudoLabeler& labeler, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_pseudo_labeler: cannot open '" + path + "'");
    put<std::uint8_t>(out, labeler.two_stage ? 1 : 0);
    put<std::int32_t>(out, labeler.nominal_k);
    if (labeler.two_stage) save_cluster_model(labeler.pose_model, out);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(labeler.keypoint_models.size()));
    for (const auto& m : labeler.keypoint_models) save_cluster_model(m, out);
    if (!out) throw std::runtime_error("save_pseudo_labeler: write failed for '" + path + "'");
}

PseudoLabeler load_pseudo_labeler(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_pseudo_labeler: cannot open '" + path + "'");
    PseudoLabeler labeler;
    labeler.two_stage = get<std::uint8_t>(in, "two_stage flag") != 0;
    labeler.nominal_k = get<std::int32_t>(in, "nominal k");
    if (labeler.two_stage) labeler.pose_model = load_cluster_model(in);
    const auto count = get<std::uint32_t>(in, "model count");
    for (std::uint32_t i = 0; i < count; ++i) labeler.keypoint_models.push_back(load_cluster_model(in));
    return labeler;
}

}  // namespace uld
