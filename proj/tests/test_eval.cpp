#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "uld/eval.hpp"
#include "uld/rng.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

using namespace uld;

namespace {

Mat random_mat(long rows, long cols, Rng& rng, double scale = 1.0) {
    Mat m(rows, cols);
    for (long j = 0; j < cols; ++j)
        for (long i = 0; i < rows; ++i) m(i, j) = normal(rng, 0.0, scale);
    return m;
}

double brute_force_assignment_cost(const Mat& cost) {
    std::vector<int> perm(static_cast<std::size_t>(cost.cols()));
    std::iota(perm.begin(), perm.end(), 0);
    double best = 1e300;
    do {
        double total = 0.0;
        for (long i = 0; i < cost.rows(); ++i) total += cost(i, perm[static_cast<std::size_t>(i)]);
        best = std::min(best, total);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

}  // namespace

TEST_CASE("regressor recovers an exact affine map") {
    Rng rng(1);
    const int m = 24, k = 4, n = 4;  // equal dims so the affine map is invertible
    const Mat gt = random_mat(m, 2 * n, rng, 10.0);
    const Mat map = random_mat(2 * n, 2 * k, rng, 0.5);
    const Eigen::RowVectorXd offset = random_mat(1, 2 * k, rng, 3.0).row(0);
    Mat pred = gt * map;
    pred.rowwise() += offset;

    // Forward: pred -> gt must reproduce gt exactly (invertible affine).
    const Regressor fwd = fit_regressor(pred, gt, m, RegressionDirection::forward, 3);
    CHECK((apply_regressor(fwd, pred) - gt).cwiseAbs().maxCoeff() < 1e-6);
    CHECK(!fwd.ridge_fallback);

    // Backward: gt -> pred is exact by construction.
    const Regressor bwd = fit_regressor(pred, gt, m, RegressionDirection::backward, 3);
    CHECK((apply_regressor(bwd, gt) - pred).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("regressor subsets are seeded and rank deficiency falls back to ridge") {
    Rng rng(2);
    const Mat pred = random_mat(30, 6, rng);
    const Mat gt = random_mat(30, 4, rng);
    const Regressor a = fit_regressor(pred, gt, 12, RegressionDirection::forward, 7);
    const Regressor b = fit_regressor(pred, gt, 12, RegressionDirection::forward, 7);
    CHECK((a.weights - b.weights).cwiseAbs().maxCoeff() == 0.0);

    // Duplicate column makes the design rank deficient.
    Mat degenerate = pred;
    degenerate.col(1) = degenerate.col(0);
    const Regressor r = fit_regressor(degenerate, gt, 30, RegressionDirection::forward, 7);
    CHECK(r.ridge_fallback);
    CHECK(r.weights.allFinite());
}

TEST_CASE("ground truth regressed onto itself has zero forward NME") {
    Rng rng(21);
    const Mat gt = random_mat(15, 8, rng, 12.0);
    Vec norms = Vec::Constant(15, 30.0);
    for (int subset : {9, 12, 15}) {
        const Regressor fwd = fit_regressor(gt, gt, subset, RegressionDirection::forward, 4);
        CHECK(nme(apply_regressor(fwd, gt), gt, norms) < 1e-8);
    }
}

TEST_CASE("nme definition and scale invariance") {
    Mat mapped(1, 2);
    mapped << 3.0, 4.0;  // one image, one landmark
    Mat target(1, 2);
    target << 0.0, 0.0;
    Vec norm(1);
    norm << 5.0;  // error is exactly the normalizer
    CHECK(nme(mapped, target, norm) == doctest::Approx(100.0));

    CHECK(nme(target, target, norm) == doctest::Approx(0.0));

    // Doubling coordinates and normalizers changes nothing.
    Rng rng(3);
    const Mat a = random_mat(6, 8, rng, 5.0);
    const Mat b = random_mat(6, 8, rng, 5.0);
    Vec norms(6);
    for (int i = 0; i < 6; ++i) norms(i) = 1.0 + std::abs(normal(rng));
    const double base = nme(a, b, norms);
    CHECK(nme(2.0 * a, 2.0 * b, 2.0 * norms) == doctest::Approx(base).epsilon(1e-12));

    Vec bad = norms;
    bad(2) = 0.0;
    CHECK_THROWS(nme(a, b, bad));
}

TEST_CASE("ced counts fractions, stays monotone, ends at 1") {
    Vec errors(3);
    errors << 1.0, 2.0, 3.0;
    Vec thresholds(4);
    thresholds << 0.5, 2.0, 2.5, 4.0;
    const CedCurve curve = ced(errors, thresholds);
    CHECK(curve.fractions(0) == doctest::Approx(0.0));
    CHECK(curve.fractions(1) == doctest::Approx(2.0 / 3.0));
    CHECK(curve.fractions(2) == doctest::Approx(2.0 / 3.0));
    CHECK(curve.fractions(3) == doctest::Approx(1.0));
    for (long i = 1; i < curve.fractions.size(); ++i) CHECK(curve.fractions(i) >= curve.fractions(i - 1));

    Vec zeros = Vec::Zero(5);
    const CedCurve flat = ced(zeros, thresholds);
    for (long i = 0; i < flat.fractions.size(); ++i) CHECK(flat.fractions(i) == doctest::Approx(1.0));
    CHECK(flat.auc == doctest::Approx(1.0));

    // Monotonicity on random inputs.
    Rng rng(4);
    Vec random_errors(40);
    for (long i = 0; i < 40; ++i) random_errors(i) = std::abs(normal(rng, 0.0, 3.0));
    Vec grid(11);
    for (int i = 0; i < 11; ++i) grid(i) = i;
    const CedCurve rc = ced(random_errors, grid);
    for (long i = 1; i < rc.fractions.size(); ++i) CHECK(rc.fractions(i) >= rc.fractions(i - 1));
}

TEST_CASE("hungarian solves the diagonal case and matches brute force up to 7x7") {
    Mat cost(2, 2);
    cost << 0, 1, 1, 0;
    const HungarianResult r = hungarian(cost);
    CHECK(r.assignment == std::vector<int>{0, 1});
    CHECK(r.cost == doctest::Approx(0.0));

    Rng rng(5);
    for (int n = 2; n <= 7; ++n) {
        for (int rep = 0; rep < 4; ++rep) {
            Mat c(n, n);
            for (long i = 0; i < n; ++i)
                for (long j = 0; j < n; ++j) c(i, j) = std::abs(normal(rng, 0.0, 2.0));
            const HungarianResult h = hungarian(c);
            CHECK(h.cost == doctest::Approx(brute_force_assignment_cost(c)).epsilon(1e-9));
            std::vector<int> cols = h.assignment;
            std::sort(cols.begin(), cols.end());
            CHECK(std::unique(cols.begin(), cols.end()) == cols.end());
        }
    }

    // Rectangular: rows <= cols.
    Mat rect(2, 4);
    rect << 5, 1, 9, 9, 9, 9, 9, 0.5;
    const HungarianResult hr = hungarian(rect);
    CHECK(hr.assignment == std::vector<int>{1, 3});
}

TEST_CASE("hungarian accuracy: exact unsupervised landmarks score 100 percent") {
    Rng rng(6);
    const int m = 10, k = 3, n = 6;
    std::vector<Mat> gt(m), unsup(m);
    Vec iod(m);
    for (int img = 0; img < m; ++img) {
        gt[static_cast<std::size_t>(img)] = random_mat(n, 2, rng, 10.0);
        unsup[static_cast<std::size_t>(img)] = gt[static_cast<std::size_t>(img)].topRows(k);
        iod(img) = 20.0;
    }
    const HungarianAccuracy acc = hungarian_accuracy(unsup, gt, iod, 0.2);
    int matched = 0;
    for (long b = 0; b < n; ++b) {
        if (acc.matched_unsup[static_cast<std::size_t>(b)] < 0) continue;
        ++matched;
        CHECK(acc.accuracy[static_cast<std::size_t>(b)] == doctest::Approx(1.0));
    }
    CHECK(matched == k);
    CHECK(acc.mean_matched == doctest::Approx(1.0));
    // The first k ground-truth landmarks are the matched ones.
    for (long b = 0; b < k; ++b) CHECK(acc.matched_unsup[static_cast<std::size_t>(b)] >= 0);
}

TEST_CASE("consistency error is zero for the identity transform") {
    // A deterministic extractor keyed on image content.
    const LandmarkExtractor extractor = [](const Image& image) {
        LabeledLandmarks out;
        out.points = {{image.values(0, 0) + 5.0, 6.0, 1.0}, {10.0, 12.0, 1.0}};
        out.labels = {0, 1};
        return out;
    };
    Image img(24, 24, 3, "test");
    img.values.setConstant(0.25);
    const ConsistencyResult r = consistency_error(extractor, img, SimilarityTransform::identity());
    CHECK(!r.skipped);
    CHECK(r.error == doctest::Approx(0.0));
    CHECK(r.matched == 2);
}

TEST_CASE("consistency error vanishes for an equivariant extractor under translation") {
    // Landmarks at the intensity peaks of the image; pure translation moves
    // them exactly with the content.
    const LandmarkExtractor extractor = [](const Image& image) {
        LabeledLandmarks out;
        // Find the two brightest pixels of channel 0, at least 4 px apart.
        std::vector<std::pair<double, long>> vals;
        for (long p = 0; p < image.values.rows(); ++p) vals.push_back({image.values(p, 0), p});
        std::sort(vals.begin(), vals.end(), [](auto& a, auto& b) { return a.first > b.first; });
        for (const auto& [v, p] : vals) {
            if (v < 0.5) break;
            const double x = static_cast<double>(p % image.width);
            const double y = static_cast<double>(p / image.width);
            bool close = false;
            for (const auto& kp : out.points)
                if (std::hypot(kp.x - x, kp.y - y) < 4.0) close = true;
            if (close) continue;
            out.points.push_back({x, y, v});
            out.labels.push_back(static_cast<int>(out.points.size()) - 1);
            if (out.points.size() == 2) break;
        }
        // Label by x-order so labels are stable identities.
        if (out.points.size() == 2 && out.points[0].x > out.points[1].x) {
            std::swap(out.points[0], out.points[1]);
        }
        return out;
    };

    Image img(32, 32, 3, "test");
    const auto bump = [&](int cx, int cy) {
        for (int y = -3; y <= 3; ++y)
            for (int x = -3; x <= 3; ++x)
                img.values(img.index(cx + x, cy + y), 0) =
                    std::max(img.values(img.index(cx + x, cy + y), 0),
                             std::exp(-(x * x + y * y) / 4.0));
    };
    bump(10, 12);
    bump(22, 18);

    SimilarityTransform shift;
    shift.tx = 3.0;
    shift.ty = -2.0;
    const ConsistencyResult r = consistency_error(extractor, img, shift);
    CHECK(!r.skipped);
    CHECK(r.error <= 0.5);

    // Zero detections: the image is skipped and counted.
    Image empty(32, 32, 3, "test");
    const ConsistencyResult s = consistency_error(extractor, empty, shift);
    CHECK(s.skipped);
}

TEST_CASE("yaw bins follow the left-closed right-open rule with an inclusive last edge") {
    const std::vector<double> edges = {-90.0, -60.0, -30.0, 30.0, 60.0, 90.0};
    CHECK(yaw_range_index(-90.0, edges) == 0);
    CHECK(yaw_range_index(-60.0, edges) == 1);  // boundary lands in the right bin
    CHECK(yaw_range_index(29.999, edges) == 2);
    CHECK(yaw_range_index(30.0, edges) == 3);
    CHECK(yaw_range_index(90.0, edges) == 4);  // last edge inclusive
    CHECK_THROWS(yaw_range_index(91.0, edges));

    Vec errors(2), yaw(2);
    errors << 1.0, 3.0;
    yaw << -45.0, 45.0;
    const auto bins = yaw_binned_nme(errors, yaw, edges);
    REQUIRE(bins.size() == 5);
    CHECK(*bins[1].nme == doctest::Approx(1.0));
    CHECK(*bins[3].nme == doctest::Approx(3.0));
    CHECK(!bins[0].nme.has_value());  // empty bin reported as absent
    CHECK(!bins[2].nme.has_value());

    // All images in one bin reproduce the overall mean.
    Vec e2(3), y2(3);
    e2 << 1.0, 2.0, 3.0;
    y2 << 0.0, 5.0, -5.0;
    const auto single = yaw_binned_nme(e2, y2, edges);
    CHECK(*single[2].nme == doctest::Approx(2.0));
}

TEST_CASE("clustering accuracy maps clusters to majority ranges") {
    // Perfect alignment.
    const std::vector<int> clusters = {0, 0, 1, 1, 2, 2};
    const std::vector<int> ranges = {1, 1, 0, 0, 2, 2};
    const ClusteringAccuracy perfect = clustering_accuracy(clusters, ranges, 3);
    CHECK(perfect.percent == doctest::Approx(100.0));
    CHECK(!perfect.tie_flagged);

    // One cluster split 50/50: tie resolved to the lowest range index and
    // flagged; that cluster contributes half its members.
    const std::vector<int> c2 = {0, 0, 1, 1};
    const std::vector<int> r2 = {0, 1, 1, 1};
    const ClusteringAccuracy half = clustering_accuracy(c2, r2, 2);
    CHECK(half.tie_flagged);
    CHECK(half.cluster_to_range[0] == 0);
    CHECK(half.percent == doctest::Approx(75.0));

    // Relabeling clusters permutes nothing in the score.
    const std::vector<int> relabeled = {2, 2, 0, 0, 1, 1};
    CHECK(clustering_accuracy(relabeled, ranges, 3).percent == doctest::Approx(100.0));
}

TEST_CASE("eval report serializes deterministically and round-trips") {
    EvalReport a;
    a.set("stage", std::string("unit"));
    a.set("forward_nme_pct", 3.14159265358979);
    a.set("count", 42.0);
    const std::string text = a.to_text();

    EvalReport b;
    b.set("stage", std::string("unit"));
    b.set("forward_nme_pct", 3.14159265358979);
    b.set("count", 42.0);
    CHECK(b.to_text() == text);

    a.write("report_test.txt");
    const EvalReport back = EvalReport::read("report_test.txt");
    CHECK(back.get("forward_nme_pct") == doctest::Approx(3.14159265358979));
    CHECK(back.has("stage"));
    std::remove("report_test.txt");
}
