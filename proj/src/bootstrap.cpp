#include "uld/bootstrap.hpp"

#include <algorithm>
#include <cmath>

namespace uld {

namespace {

double bce_term(double p, double t) {
    const double q = std::clamp(p, 1e-7, 1.0 - 1e-7);
    return -t * std::log(q) - (1.0 - t) * std::log(1.0 - q);
}

double bce_term_grad(double p, double t) {
    const double q = std::clamp(p, 1e-7, 1.0 - 1e-7);
    return (q - t) / (q * (1.0 - q));
}

std::vector<long> masked_stride_pixels(const CorrespondencePair& pair, int stride) {
    std::vector<long> out;
    const int w = pair.original.width;
    const int h = pair.original.height;
    for (int y = 0; y < h; y += stride)
        for (int x = 0; x < w; x += stride) {
            const long idx = static_cast<long>(y) * w + x;
            if (pair.valid[static_cast<std::size_t>(idx)]) out.push_back(idx);
        }
    return out;
}

}  // namespace

Mat bce_targets_from_mnn(const Mat& vol_norm, const Mat& vol_aug_norm, int height, int width,
                         const CorrespondencePair& pair, int grid_stride, double match_radius) {
    require(grid_stride >= 1, "bce_targets_from_mnn: stride must be >= 1");
    require(vol_norm.rows() == static_cast<long>(height) * width, "bce_targets_from_mnn: size mismatch");

    const std::vector<long> orig = masked_stride_pixels(pair, grid_stride);
    std::vector<long> aug;
    for (int y = 0; y < height; y += grid_stride)
        for (int x = 0; x < width; x += grid_stride) aug.push_back(static_cast<long>(y) * width + x);

    // -1 marks positions outside the sampling grid: they carry no label and
    // are excluded from the loss.
    Mat targets = Mat::Constant(height, width, -1.0);
    for (long idx : orig) targets(idx / width, idx % width) = 0.0;
    if (orig.empty() || aug.empty()) return targets;

    Mat f(static_cast<long>(orig.size()), vol_norm.cols());
    for (std::size_t i = 0; i < orig.size(); ++i) f.row(static_cast<long>(i)) = vol_norm.row(orig[i]);
    Mat g(static_cast<long>(aug.size()), vol_aug_norm.cols());
    for (std::size_t j = 0; j < aug.size(); ++j) g.row(static_cast<long>(j)) = vol_aug_norm.row(aug[j]);

    const Mat sim = f * g.transpose();
    std::vector<long> row_best(orig.size());
    std::vector<long> col_best(aug.size(), -1);
    std::vector<double> col_val(aug.size(), -std::numeric_limits<double>::infinity());
    for (long i = 0; i < sim.rows(); ++i) {
        long best = 0;
        for (long j = 1; j < sim.cols(); ++j)
            if (sim(i, j) > sim(i, best)) best = j;
        row_best[static_cast<std::size_t>(i)] = best;
        if (sim(i, best) > col_val[static_cast<std::size_t>(best)]) {
            col_val[static_cast<std::size_t>(best)] = sim(i, best);
            col_best[static_cast<std::size_t>(best)] = i;
        }
    }

    for (std::size_t i = 0; i < orig.size(); ++i) {
        const long j = row_best[i];
        if (col_best[static_cast<std::size_t>(j)] != static_cast<long>(i)) continue;  // not mutual
        const double qx = static_cast<double>(orig[i] % width);
        const double qy = static_cast<double>(orig[i] / width);
        const Eigen::Vector2d expected = pair.transform.apply({qx, qy}, width, height);
        const double mx = static_cast<double>(aug[static_cast<std::size_t>(j)] % width);
        const double my = static_cast<double>(aug[static_cast<std::size_t>(j)] / width);
        if ((expected - Eigen::Vector2d(mx, my)).norm() <= match_radius)
            targets(static_cast<long>(qy), static_cast<long>(qx)) = 1.0;
    }
    return targets;
}

double detector_bce_grad(const Heatmap& h, const Heatmap& h_aug, const CorrespondencePair& pair,
                         const Mat& targets, Mat* dh_col, Mat* dh_aug_col, double positive_weight) {
    const int height = h.height();
    const int width = h.width();
    require(h_aug.height() == height && h_aug.width() == width, "detector_bce: heatmap shape mismatch");
    require(targets.rows() == height && targets.cols() == width, "detector_bce: target shape mismatch");
    require(positive_weight > 0.0, "detector_bce: positive_weight must be > 0");
    if (pair.valid_count == 0) throw std::invalid_argument("detector_bce: empty correspondence mask");

    if (dh_col) *dh_col = Mat::Zero(static_cast<long>(height) * width, 1);
    if (dh_aug_col) *dh_aug_col = Mat::Zero(static_cast<long>(height) * width, 1);

    double total_weight = 0.0;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            if (pair.valid[static_cast<std::size_t>(static_cast<long>(y) * width + x)] &&
                targets(y, x) >= 0.0)
                total_weight += targets(y, x) > 0.5 ? positive_weight : 1.0;
    if (total_weight == 0.0)
        throw std::invalid_argument("detector_bce: no labelled pixels inside the mask");

    const Mat aug_col = heatmap_as_column(h_aug);
    double total = 0.0;
    const double inv = 1.0 / total_weight;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const long idx = static_cast<long>(y) * width + x;
            if (!pair.valid[static_cast<std::size_t>(idx)]) continue;
            const double t = targets(y, x);
            if (t < 0.0) continue;  // unlabelled position
            const double weight = t > 0.5 ? positive_weight : 1.0;
            const Eigen::Vector2d q =
                pair.transform.apply({static_cast<double>(x), static_cast<double>(y)}, width, height);
            const nn::BilinearTaps taps = nn::bilinear_taps(width, height, q.x(), q.y());
            const double p2 = taps.w00 * aug_col(taps.i00, 0) + taps.w01 * aug_col(taps.i01, 0) +
                              taps.w10 * aug_col(taps.i10, 0) + taps.w11 * aug_col(taps.i11, 0);
            const double p1 = h.grid(y, x);
            total += weight * 0.5 * (bce_term(p1, t) + bce_term(p2, t));
            if (dh_col) (*dh_col)(idx, 0) += weight * 0.5 * inv * bce_term_grad(p1, t);
            if (dh_aug_col) {
                const double g2 = weight * 0.5 * inv * bce_term_grad(p2, t);
                (*dh_aug_col)(taps.i00, 0) += taps.w00 * g2;
                (*dh_aug_col)(taps.i01, 0) += taps.w01 * g2;
                (*dh_aug_col)(taps.i10, 0) += taps.w10 * g2;
                (*dh_aug_col)(taps.i11, 0) += taps.w11 * g2;
            }
        }
    }
    return total * inv;
}

double detector_bce(const Heatmap& h, const Heatmap& h_aug, const CorrespondencePair& pair,
                    const Mat& targets, double positive_weight) {
    return detector_bce_grad(h, h_aug, pair, targets, nullptr, nullptr, positive_weight);
}

double correspondence_nll_grad(const Mat& vol_norm, const Mat& vol_aug_norm, int height, int width,
                               const CorrespondencePair& pair, double temperature, int n_samples,
                               std::uint64_t seed, Mat* dvol, Mat* dvol_aug) {
    if (temperature <= 0.0) throw std::invalid_argument("correspondence_nll: temperature must be > 0");
    require(vol_norm.rows() == static_cast<long>(height) * width, "correspondence_nll: size mismatch");
    require(vol_norm.cols() == vol_aug_norm.cols(), "correspondence_nll: channel mismatch");

    std::vector<long> candidates = masked_stride_pixels(pair, 1);
    require(!candidates.empty(), "correspondence_nll: empty correspondence mask");
    std::vector<long> chosen;
    if (n_samples >= static_cast<int>(candidates.size())) {
        chosen = candidates;
    } else {
        Rng rng(seed);
        for (int i = 0; i < n_samples; ++i) {  // partial Fisher-Yates
            const long j = i + static_cast<long>(rng() % (candidates.size() - i));
            std::swap(candidates[i], candidates[j]);
            chosen.push_back(candidates[i]);
        }
    }
    const long n = static_cast<long>(chosen.size());
    const long dim = vol_norm.cols();

    Mat f(n, dim), g(n, dim), g_raw(n, dim);
    std::vector<Eigen::Vector2d> aug_pos(chosen.size());
    for (long i = 0; i < n; ++i) {
        f.row(i) = vol_norm.row(chosen[static_cast<std::size_t>(i)]);
        const double qx = static_cast<double>(chosen[static_cast<std::size_t>(i)] % width);
        const double qy = static_cast<double>(chosen[static_cast<std::size_t>(i)] / width);
        const Eigen::Vector2d a = pair.transform.apply({qx, qy}, width, height);
        aug_pos[static_cast<std::size_t>(i)] = a;
        const Vec raw = nn::bilinear_sample(vol_aug_norm, width, height, a.x(), a.y());
        g_raw.row(i) = raw.transpose();
        g.row(i) = nn::l2_normalize(raw).transpose();
    }

    Mat scores = f * g.transpose() / temperature;
    const Vec row_max = scores.rowwise().maxCoeff();
    Mat p = (scores.colwise() - row_max).array().exp().matrix();
    const Vec denom = p.rowwise().sum();
    double loss = 0.0;
    for (long i = 0; i < n; ++i) {
        p.row(i) /= denom(i);
        loss += std::log(denom(i)) + row_max(i) - scores(i, i);
    }
    loss /= static_cast<double>(n);

    if (dvol || dvol_aug) {
        Mat ds = p;
        for (long i = 0; i < n; ++i) ds(i, i) -= 1.0;
        ds /= static_cast<double>(n) * temperature;
        if (dvol) {
            if (dvol->rows() != vol_norm.rows() || dvol->cols() != dim)
                *dvol = Mat::Zero(vol_norm.rows(), dim);
            const Mat df = ds * g;
            for (long i = 0; i < n; ++i) dvol->row(chosen[static_cast<std::size_t>(i)]) += df.row(i);
        }
        if (dvol_aug) {
            if (dvol_aug->rows() != vol_aug_norm.rows() || dvol_aug->cols() != dim)
                *dvol_aug = Mat::Zero(vol_aug_norm.rows(), dim);
            const Mat dg = ds.transpose() * f;
            for (long i = 0; i < n; ++i) {
                const Vec draw =
                    nn::l2_normalize_backward(dg.row(i).transpose(), g_raw.row(i).transpose());
                nn::bilinear_scatter(*dvol_aug, width, height, aug_pos[static_cast<std::size_t>(i)].x(),
                                     aug_pos[static_cast<std::size_t>(i)].y(), draw);
            }
        }
    }
    return loss;
}

double correspondence_nll(const Mat& vol_norm, const Mat& vol_aug_norm, int height, int width,
                          const CorrespondencePair& pair, double temperature, int n_samples,
                          std::uint64_t seed) {
    return correspondence_nll_grad(vol_norm, vol_aug_norm, height, width, pair, temperature, n_samples,
                                   seed, nullptr, nullptr);
}

BootstrapResult bootstrap_train(const std::vector<Image>& images, Model& model, const BootstrapConfig& cfg,
                                LossReport* report) {
    require(!images.empty(), "bootstrap_train: empty dataset");
    const int height = model.image_size();
    const int width = model.image_size();

    nn::Adam adam({cfg.lr, cfg.beta1, cfg.beta2, 1e-8},
                  {&model.aggregator.params(), &model.detector.params(), &model.descriptor.params()});

    BootstrapResult result;
    Rng batch_rng(mix_seed(cfg.seed, 0xb007));
    Vec snap_agg = model.aggregator.params().values();
    Vec snap_det = model.detector.params().values();
    Vec snap_desc = model.descriptor.params().values();

    for (int it = 0; it < cfg.iterations; ++it) {
        model.aggregator.params().zero_grad();
        model.detector.params().zero_grad();
        model.descriptor.params().zero_grad();

        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const int j = uniform_int(batch_rng, 0, static_cast<int>(images.size()) - 1);
            const CorrespondencePair pair =
                make_pair(images[static_cast<std::size_t>(j)],
                          mix_seed(cfg.seed, static_cast<std::uint64_t>(it) * 977 + b, 0xa06), cfg.augment);

            Aggregator::Ctx agg_ctx_o, agg_ctx_a;
            const FeatureMap f_o = model.features(pair.original, &agg_ctx_o);
            const FeatureMap f_a = model.features(pair.augmented, &agg_ctx_a);

            ConvHead::Ctx det_o, det_a, desc_o, desc_a;
            const Heatmap h_o = detect(f_o, model.detector, det_o);
            const Heatmap h_a = detect(f_a, model.detector, det_a);
            const FeatureMap v_o = describe(f_o, model.descriptor, desc_o);
            const FeatureMap v_a = describe(f_a, model.descriptor, desc_a);
            const Mat vn_o = nn::l2_normalize_rows(v_o.values);
            const Mat vn_a = nn::l2_normalize_rows(v_a.values);

            const Mat targets = bce_targets_from_mnn(vn_o, vn_a, height, width, pair, cfg.bce_grid_stride,
                                                     cfg.bce_match_radius);

            // Counter the heavy negative majority so peaks stay above the
            // detection threshold.
            double n_pos = 0.0, n_neg = 0.0;
            for (int y = 0; y < height; ++y)
                for (int x = 0; x < width; ++x) {
                    if (!pair.valid[static_cast<std::size_t>(static_cast<long>(y) * width + x)]) continue;
                    if (targets(y, x) > 0.5)
                        n_pos += 1.0;
                    else if (targets(y, x) == 0.0)
                        n_neg += 1.0;
                }
            const double pos_weight =
                n_pos > 0.0 ? std::clamp(n_neg / n_pos, 1.0, cfg.bce_positive_weight_cap) : 1.0;

            Mat dh_o, dh_a, dvn_o, dvn_a;
            const double l_det = detector_bce_grad(h_o, h_a, pair, targets, &dh_o, &dh_a, pos_weight);
            const double l_desc = correspondence_nll_grad(
                vn_o, vn_a, height, width, pair, cfg.temperature, cfg.nll_samples,
                mix_seed(cfg.seed, static_cast<std::uint64_t>(it) * 977 + b, 0xd15c), &dvn_o, &dvn_a);

            const double w_det = cfg.detector_loss_weight / cfg.batch_size;
            const double w_desc = cfg.descriptor_loss_weight / cfg.batch_size;
            batch_loss += (cfg.detector_loss_weight * l_det + cfg.descriptor_loss_weight * l_desc) /
                          cfg.batch_size;

            // Detector path.
            Mat df_o = model.detector.backward(w_det * dh_o, det_o);
            Mat df_a = model.detector.backward(w_det * dh_a, det_a);
            // Descriptor path (through the per-pixel normalization).
            const Mat dv_o = nn::l2_normalize_rows_backward(w_desc * dvn_o, v_o.values);
            const Mat dv_a = nn::l2_normalize_rows_backward(w_desc * dvn_a, v_a.values);
            df_o += model.descriptor.backward(dv_o, desc_o);
            df_a += model.descriptor.backward(dv_a, desc_a);
            model.aggregator.backward(df_o, agg_ctx_o);
            model.aggregator.backward(df_a, agg_ctx_a);
        }

        if (!std::isfinite(batch_loss)) {
            model.aggregator.params().values() = snap_agg;
            model.detector.params().values() = snap_det;
            model.descriptor.params().values() = snap_desc;
            result.aborted_nan = true;
            result.aborted_at = it;
            break;
        }
        snap_agg = model.aggregator.params().values();
        snap_det = model.detector.params().values();
        snap_desc = model.descriptor.params().values();

        adam.step();
        result.losses.push_back(batch_loss);
        if (report) report->add(it, "bootstrap", "combined", batch_loss);
    }

    if (!result.losses.empty()) {
        result.initial_loss = result.losses.front();
        result.final_loss = result.losses.back();
    }

    result.extractions.reserve(images.size());
    for (const Image& image : images)
        result.extractions.push_back(extract_keypoints(model, image, cfg.extraction));
    return result;
}

}  // namespace uld
