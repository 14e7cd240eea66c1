#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "uld/heads.hpp"

using namespace uld;

namespace {

FeatureMap random_fmap(int h, int w, int d, Rng& rng) {
    FeatureMap f(h, w, d, "test");
    for (long i = 0; i < f.values.rows(); ++i)
        for (long j = 0; j < f.values.cols(); ++j) f.values(i, j) = normal(rng, 0.0, 0.5);
    return f;
}

// Central finite differences over a head's parameters for loss = sum(output).
bool head_grad_check(ConvHead& head, const FeatureMap& input, double tol = 1e-4) {
    auto loss = [&](bool accumulate) {
        ConvHead::Ctx ctx;
        const Mat y = head.forward(input, ctx);
        if (accumulate) head.backward(Mat::Ones(y.rows(), y.cols()), ctx);
        return y.sum();
    };
    head.params().zero_grad();
    loss(true);
    const Vec analytic = head.params().grads();
    const double h = 1e-6;
    for (long i = 0; i < head.params().size(); ++i) {
        const double keep = head.params().values()(i);
        head.params().values()(i) = keep + h;
        const double hi = loss(false);
        head.params().values()(i) = keep - h;
        const double lo = loss(false);
        head.params().values()(i) = keep;
        const double numeric = (hi - lo) / (2.0 * h);
        const double denom = std::max({1.0, std::abs(analytic(i)), std::abs(numeric)});
        if (std::abs(analytic(i) - numeric) / denom > tol) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("zero feature map with zero-initialized biases gives a uniform 0.5 heatmap") {
    HeadConfig cfg{4, 6, 6, 1};
    ConvHead head(cfg, true);
    Rng rng(1);
    head.init(rng);  // weights random, biases zero
    FeatureMap zero(5, 7, 4, "test");
    const Heatmap h = detect(zero, head);
    CHECK((h.grid.array() - 0.5).abs().maxCoeff() < 1e-12);
}

TEST_CASE("detector forward is deterministic and bounded") {
    HeadConfig cfg{4, 6, 6, 1};
    ConvHead head(cfg, true);
    Rng rng(2);
    head.init(rng);
    Rng frng(3);
    const FeatureMap f = random_fmap(6, 6, 4, frng);
    const Heatmap a = detect(f, head);
    const Heatmap b = detect(f, head);
    CHECK((a.grid - b.grid).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.grid.minCoeff() >= 0.0);
    CHECK(a.grid.maxCoeff() <= 1.0);
}

TEST_CASE("detector gradient matches finite differences on a small instance") {
    HeadConfig cfg{3, 4, 4, 1};  // well under 1k parameters
    ConvHead head(cfg, true);
    Rng rng(4);
    head.init(rng);
    CHECK(head.params().size() <= 1000);
    Rng frng(5);
    const FeatureMap f = random_fmap(6, 6, 3, frng);
    CHECK(head_grad_check(head, f));
}

TEST_CASE("descriptor head emits the configured channel count and zero maps to zero") {
    HeadConfig cfg{3, 4, 4, 8};
    ConvHead head(cfg, false);
    Rng rng(6);
    head.init(rng);
    FeatureMap zero(5, 5, 3, "test");
    const FeatureMap vol = describe(zero, head);
    CHECK(vol.channels() == 8);
    CHECK(vol.values.cwiseAbs().maxCoeff() == 0.0);  // zero input, zero biases
}

TEST_CASE("descriptor gradient matches finite differences") {
    HeadConfig cfg{3, 4, 4, 5};
    ConvHead head(cfg, false);
    Rng rng(7);
    head.init(rng);
    CHECK(head.params().size() <= 1000);
    Rng frng(8);
    const FeatureMap f = random_fmap(5, 6, 3, frng);
    CHECK(head_grad_check(head, f));
}

TEST_CASE("nms keeps a lone peak and drops the weaker of two close peaks") {
    Heatmap h(9, 9);
    h.grid(4, 4) = 0.9;
    auto kps = nms_extract(h, 3, 0.1, 10);
    REQUIRE(kps.size() == 1);
    CHECK(kps[0].x == 4.0);
    CHECK(kps[0].y == 4.0);
    CHECK(kps[0].score == doctest::Approx(0.9));

    // Two peaks one pixel apart: 3x3 suppression keeps only the higher one.
    Heatmap two(9, 9);
    two.grid(4, 4) = 0.8;
    two.grid(4, 5) = 0.6;
    kps = nms_extract(two, 3, 0.1, 10);
    REQUIRE(kps.size() == 1);
    CHECK(kps[0].x == 4.0);

    // Constant maps have no strict maxima.
    Heatmap flat(6, 6);
    flat.grid.setConstant(0.7);
    CHECK(nms_extract(flat, 3, 0.1, 10).empty());
}

TEST_CASE("nms respects threshold, cap and window exclusion") {
    Heatmap h(20, 20);
    h.grid(2, 2) = 0.9;
    h.grid(10, 10) = 0.8;
    h.grid(17, 4) = 0.3;
    h.grid(4, 17) = 0.05;

    auto kps = nms_extract(h, 5, 0.1, 10);
    REQUIRE(kps.size() == 3);  // the 0.05 peak is cut by the threshold
    CHECK(kps[0].score == doctest::Approx(0.9));
    CHECK(kps[1].score == doctest::Approx(0.8));

    kps = nms_extract(h, 5, 0.1, 2);
    CHECK(kps.size() == 2);

    // No two survivors within the suppression window of each other.
    const int window = 5;
    for (std::size_t i = 0; i < kps.size(); ++i)
        for (std::size_t j = i + 1; j < kps.size(); ++j)
            CHECK((std::abs(kps[i].x - kps[j].x) > window / 2 ||
                   std::abs(kps[i].y - kps[j].y) > window / 2));

    CHECK_THROWS(nms_extract(h, 4, 0.1, 5));  // even window
    CHECK_THROWS(nms_extract(h, 1, 0.1, 5));  // too small
}

TEST_CASE("sample_descriptor interpolates and normalizes") {
    FeatureMap vol(4, 4, 3, "test");
    // Cell (x=1, y=2) gets v1, cell (x=2, y=2) gets v2.
    vol.values.row(vol.index(1, 2)) << 1.0, 2.0, 2.0;
    vol.values.row(vol.index(2, 2)) << 3.0, 0.0, 0.0;

    const Descriptor at_cell = sample_descriptor(vol, {1.0, 2.0, 1.0});
    CHECK(at_cell.normalized);
    CHECK(at_cell.f.norm() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK((at_cell.f - Vec(Eigen::Vector3d(1, 2, 2) / 3.0)).cwiseAbs().maxCoeff() < 1e-12);

    // Midway between the two cells: normalized mean of v1 and v2.
    const Descriptor mid = sample_descriptor(vol, {1.5, 2.0, 1.0});
    const Eigen::Vector3d mean(2.0, 1.0, 1.0);
    CHECK((mid.f - Vec(mean.normalized())).cwiseAbs().maxCoeff() < 1e-12);

    CHECK_THROWS(sample_descriptor(vol, {-1.0, 0.0, 1.0}));
    CHECK_THROWS(sample_descriptor(vol, {0.0, 3.5, 1.0}));
}

TEST_CASE("sample_descriptor moves continuously with the sampling position") {
    Rng rng(9);
    FeatureMap vol(6, 6, 4, "test");
    for (long i = 0; i < vol.values.rows(); ++i)
        for (long j = 0; j < 4; ++j) vol.values(i, j) = 1.0 + 0.1 * normal(rng);
    const Vec base = nn::bilinear_sample(vol.values, 6, 6, 2.3, 3.1);
    const Vec moved = nn::bilinear_sample(vol.values, 6, 6, 2.3 + 1e-4, 3.1);
    CHECK((moved - base).norm() < 1e-3);
}

TEST_CASE("render_gaussians puts unit peaks at the points") {
    const Heatmap h = render_gaussians({{5.0, 5.0, 1.0}}, 2.0, 12, 12);
    CHECK(h.grid(5, 5) == doctest::Approx(1.0));
    // Value at distance sigma: exp(-1/2).
    CHECK(h.grid(5, 7) == doctest::Approx(std::exp(-0.5)).epsilon(1e-12));

    const Heatmap two = render_gaussians({{3.0, 3.0, 1.0}, {20.0, 20.0, 1.0}}, 1.5, 24, 24);
    CHECK(two.grid(3, 3) == doctest::Approx(1.0));
    CHECK(two.grid(20, 20) == doctest::Approx(1.0));
    CHECK_THROWS(render_gaussians({{1.0, 1.0, 1.0}}, 0.0, 8, 8));
}

TEST_CASE("render_gaussians combines overlapping points with a pixel-wise max") {
    const Heatmap h = render_gaussians({{4.0, 4.0, 1.0}, {6.0, 4.0, 1.0}}, 2.0, 12, 12);
    // Midpoint: max of the two equal Gaussians, not their sum.
    CHECK(h.grid(4, 5) == doctest::Approx(std::exp(-0.5 / 4.0)).epsilon(1e-12));
    CHECK(h.grid.maxCoeff() <= 1.0);
}

TEST_CASE("render_gaussians is translation equivariant for integer shifts") {
    const std::vector<Keypoint> pts = {{6.0, 7.0, 1.0}, {10.0, 9.0, 1.0}};
    std::vector<Keypoint> shifted;
    for (const auto& p : pts) shifted.push_back({p.x + 3.0, p.y + 2.0, p.score});
    const Heatmap a = render_gaussians(pts, 1.5, 24, 24);
    const Heatmap b = render_gaussians(shifted, 1.5, 24, 24);
    // Compare interior pixels under the shift.
    for (int y = 12; y < 20; ++y)
        for (int x = 12; x < 20; ++x)
            CHECK(b.grid(y, x) == doctest::Approx(a.grid(y - 2, x - 3)).epsilon(1e-12));
}
