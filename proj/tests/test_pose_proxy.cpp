#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "uld/heads.hpp"
#include "uld/pose_proxy.hpp"

using namespace uld;

namespace {

Heatmap random_heatmap(int size, Rng& rng) {
    Heatmap h(size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) h.grid(y, x) = uniform(rng, 0.0, 1.0);
    return h;
}

}  // namespace

TEST_CASE("encoder emits the configured latent dimension, 64 by default") {
    VaeConfig dflt;
    CHECK(dflt.latent_dim == 64);
    Vae vae(VaeConfig{32, 64, 4});
    Rng rng(1);
    vae.init(rng);
    Rng hr(2);
    const Heatmap h = random_heatmap(32, hr);
    const LatentPoseCode code = encode(h, vae);
    CHECK(code.phi.size() == 64);
    CHECK(code.mu.size() == 64);
    CHECK(code.logvar.size() == 64);
}

TEST_CASE("inference encoding is deterministic; training mode records epsilon") {
    Vae vae(VaeConfig{16, 8, 3});
    Rng rng(3);
    vae.init(rng);
    Rng hr(4);
    const Heatmap h = random_heatmap(16, hr);

    const LatentPoseCode a = encode(h, vae);
    const LatentPoseCode b = encode(h, vae);
    CHECK((a.phi - b.phi).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.phi - a.mu).cwiseAbs().maxCoeff() == 0.0);

    Rng eps_rng(5);
    const LatentPoseCode t = encode(h, vae, true, &eps_rng);
    CHECK(t.epsilon.size() == 8);
    const Vec expect = t.mu + ((0.5 * t.logvar.array()).exp() * t.epsilon.array()).matrix();
    CHECK((t.phi - expect).cwiseAbs().maxCoeff() < 1e-15);
    CHECK_THROWS(encode(h, vae, true, nullptr));

    Heatmap wrong(8, 8);
    CHECK_THROWS(encode(wrong, vae));
}

TEST_CASE("decoder output lies in [0, 1] and is deterministic") {
    Vae vae(VaeConfig{16, 8, 3});
    Rng rng(6);
    vae.init(rng);
    Vec phi(8);
    for (long i = 0; i < 8; ++i) phi(i) = normal(rng, 0.0, 2.0);
    const Heatmap a = decode(phi, vae);
    const Heatmap b = decode(phi, vae);
    CHECK(a.height() == 16);
    CHECK(a.grid.minCoeff() >= 0.0);
    CHECK(a.grid.maxCoeff() <= 1.0);
    CHECK((a.grid - b.grid).cwiseAbs().maxCoeff() == 0.0);
    CHECK_THROWS(decode(Vec::Zero(5), vae));
}

TEST_CASE("reparameterized samples match the encoder distribution") {
    Vec mu(4), logvar(4);
    mu << 0.5, -1.0, 2.0, 0.0;
    logvar << 0.0, -0.5, 0.7, 1.2;
    Rng rng(7);
    Vec mean = Vec::Zero(4), second = Vec::Zero(4);
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        Vec eps(4);
        for (long j = 0; j < 4; ++j) eps(j) = normal(rng);
        const Vec phi = mu + ((0.5 * logvar.array()).exp() * eps.array()).matrix();
        mean += phi;
        second += phi.cwiseProduct(phi);
    }
    mean /= n;
    second /= n;
    for (long j = 0; j < 4; ++j) {
        const double var = second(j) - mean(j) * mean(j);
        CHECK(std::abs(mean(j) - mu(j)) < 0.05 * std::max(1.0, std::abs(mu(j))) + 0.03);
        CHECK(std::abs(var - std::exp(logvar(j))) / std::exp(logvar(j)) < 0.05);
    }
}

TEST_CASE("KL closed form: zero at the prior, 32 for unit means in 64 dims") {
    CHECK(kl_standard_normal(Vec::Zero(10), Vec::Zero(10)) == doctest::Approx(0.0));
    CHECK(kl_standard_normal(Vec::Ones(64), Vec::Zero(64)) == doctest::Approx(32.0));
}

TEST_CASE("KL closed form matches a Monte-Carlo estimate within 1 percent") {
    Rng rng(8);
    Vec mu(6), logvar(6);
    for (long i = 0; i < 6; ++i) {
        mu(i) = normal(rng, 0.0, 1.0);
        logvar(i) = normal(rng, 0.0, 0.5);
    }
    const double closed = kl_standard_normal(mu, logvar);

    // MC estimate of E_q[log q(z) - log p(z)].
    double acc = 0.0;
    const int n = 100000;
    Rng mc(9);
    for (int i = 0; i < n; ++i) {
        double log_q = 0.0, log_p = 0.0;
        for (long j = 0; j < 6; ++j) {
            const double sigma = std::exp(0.5 * logvar(j));
            const double z = mu(j) + sigma * normal(mc);
            log_q += -0.5 * std::log(2 * M_PI) - 0.5 * logvar(j) -
                     0.5 * (z - mu(j)) * (z - mu(j)) / (sigma * sigma);
            log_p += -0.5 * std::log(2 * M_PI) - 0.5 * z * z;
        }
        acc += log_q - log_p;
    }
    const double mc_estimate = acc / n;
    CHECK(std::abs(mc_estimate - closed) / std::abs(closed) < 0.01);
}

TEST_CASE("elbo: exact binary reconstruction has zero reconstruction term") {
    Heatmap target(8, 8, Heatmap::Source::pseudo_gt);
    target.grid(2, 2) = 1.0;
    target.grid(5, 6) = 1.0;
    CHECK(reconstruction_bce(target, target) < 1e-4);
    CHECK(elbo_loss(target, target, Vec::Zero(4), Vec::Zero(4), 1.0) < 1e-4);
    CHECK(elbo_loss(target, target, Vec::Ones(64), Vec::Zero(64), 1.0) == doctest::Approx(32.0).epsilon(1e-4));
}

TEST_CASE("encoder and decoder gradients match finite differences on small instances") {
    Vae vae(VaeConfig{16, 4, 2});
    Rng rng(10);
    vae.init(rng);
    CHECK(vae.encoder.params().size() <= 1000);
    CHECK(vae.decoder.params().size() <= 1000);

    Rng hr(11);
    const Heatmap h = random_heatmap(16, hr);
    const Mat h_col = heatmap_as_column(h);

    // Encoder: loss = ||mu||^2 + ||logvar||^2.
    {
        auto loss = [&](bool accumulate) {
            VaeEncoder::Ctx ctx;
            Vec mu, logvar;
            vae.encoder.forward(h_col, ctx, &mu, &logvar);
            if (accumulate) vae.encoder.backward(2.0 * mu, 2.0 * logvar, ctx);
            return mu.squaredNorm() + logvar.squaredNorm();
        };
        vae.encoder.params().zero_grad();
        loss(true);
        const Vec analytic = vae.encoder.params().grads();
        const double eps = 1e-6;
        bool ok = true;
        for (long i = 0; i < vae.encoder.params().size(); ++i) {
            const double keep = vae.encoder.params().values()(i);
            vae.encoder.params().values()(i) = keep + eps;
            const double hi = loss(false);
            vae.encoder.params().values()(i) = keep - eps;
            const double lo = loss(false);
            vae.encoder.params().values()(i) = keep;
            const double numeric = (hi - lo) / (2 * eps);
            const double denom = std::max({1.0, std::abs(numeric), std::abs(analytic(i))});
            if (std::abs(analytic(i) - numeric) / denom > 1e-4) ok = false;
        }
        CHECK(ok);
    }

    // Decoder: loss = sum(output).
    {
        Vec phi(4);
        phi << 0.3, -0.8, 1.2, 0.1;
        auto loss = [&](bool accumulate) {
            VaeDecoder::Ctx ctx;
            const Mat y = vae.decoder.forward(phi, ctx);
            if (accumulate) vae.decoder.backward(Mat::Ones(y.rows(), 1), ctx);
            return y.sum();
        };
        vae.decoder.params().zero_grad();
        loss(true);
        const Vec analytic = vae.decoder.params().grads();
        const double eps = 1e-6;
        bool ok = true;
        for (long i = 0; i < vae.decoder.params().size(); ++i) {
            const double keep = vae.decoder.params().values()(i);
            vae.decoder.params().values()(i) = keep + eps;
            const double hi = loss(false);
            vae.decoder.params().values()(i) = keep - eps;
            const double lo = loss(false);
            vae.decoder.params().values()(i) = keep;
            const double numeric = (hi - lo) / (2 * eps);
            const double denom = std::max({1.0, std::abs(numeric), std::abs(analytic(i))});
            if (std::abs(analytic(i) - numeric) / denom > 1e-4) ok = false;
        }
        CHECK(ok);
    }
}

TEST_CASE("latent contrastive loss evaluates the worked examples") {
    const double m = 0.8;
    Vec a = Vec::Zero(8);
    Vec b = Vec::Zero(8);
    Vec far = Vec::Zero(8);
    far(0) = 1.0;  // distance 1.0 >= margin

    // Identical positives, margin-separated negative: both terms vanish.
    CHECK(latent_contrastive(a, b, far, 0, 0, 1, m) == doctest::Approx(0.0));

    // Same-label distance 0.3, different-label distance 1.0: loss = 0.3.
    Vec pos = Vec::Zero(8);
    pos(1) = 0.3;
    CHECK(latent_contrastive(a, pos, far, 0, 0, 1, m) == doctest::Approx(0.3).epsilon(1e-12));

    // Same-label distance 0, different-label distance 0.5: hinge leaves 0.3.
    Vec neg = Vec::Zero(8);
    neg(0) = 0.5;
    CHECK(latent_contrastive(a, b, neg, 0, 0, 1, m) == doctest::Approx(0.3).epsilon(1e-12));

    CHECK_THROWS(latent_contrastive(a, b, far, 0, 1, 2, m));  // positive label differs
    CHECK_THROWS(latent_contrastive(a, b, far, 0, 0, 0, m));  // negative label equal
}

TEST_CASE("latent contrastive loss is non-negative with a correct zero set") {
    Rng rng(12);
    const double m = 0.8;
    for (int rep = 0; rep < 50; ++rep) {
        Vec a(4), b(4), c(4);
        for (long i = 0; i < 4; ++i) {
            a(i) = normal(rng);
            b(i) = normal(rng);
            c(i) = normal(rng);
        }
        const double loss = latent_contrastive(a, b, c, 0, 0, 1, m);
        CHECK(loss >= 0.0);
        const bool zero_conditions = (a - b).norm() < 1e-12 && (a - c).norm() >= m;
        if (zero_conditions) CHECK(loss == doctest::Approx(0.0));
        if (loss == 0.0) CHECK(zero_conditions);
    }
}

TEST_CASE("latent contrastive gradient matches finite differences") {
    Rng rng(13);
    Vec a(6), b(6), c(6);
    for (long i = 0; i < 6; ++i) {
        a(i) = normal(rng);
        b(i) = normal(rng);
        c(i) = 0.1 * normal(rng);  // keep the hinge active
    }
    Vec da, db, dc;
    latent_contrastive_grad(a, b, c, 0, 0, 1, 0.8, &da, &db, &dc);
    const double eps = 1e-6;
    for (long i = 0; i < 6; ++i) {
        Vec ap = a;
        ap(i) += eps;
        double hi = latent_contrastive(ap, b, c, 0, 0, 1, 0.8);
        ap(i) -= 2 * eps;
        double lo = latent_contrastive(ap, b, c, 0, 0, 1, 0.8);
        CHECK(da(i) == doctest::Approx((hi - lo) / (2 * eps)).epsilon(1e-4));

        Vec bp = b;
        bp(i) += eps;
        hi = latent_contrastive(a, bp, c, 0, 0, 1, 0.8);
        bp(i) -= 2 * eps;
        lo = latent_contrastive(a, bp, c, 0, 0, 1, 0.8);
        CHECK(db(i) == doctest::Approx((hi - lo) / (2 * eps)).epsilon(1e-4));

        Vec cp = c;
        cp(i) += eps;
        hi = latent_contrastive(a, b, cp, 0, 0, 1, 0.8);
        cp(i) -= 2 * eps;
        lo = latent_contrastive(a, b, cp, 0, 0, 1, 0.8);
        CHECK(dc(i) == doctest::Approx((hi - lo) / (2 * eps)).epsilon(1e-4));
    }
}

TEST_CASE("a few ELBO steps reduce reconstruction error on a fixed tiny set") {
    Vae vae(VaeConfig{16, 6, 3});
    Rng rng(14);
    vae.init(rng);

    // Fixed targets: Gaussian blobs at two layouts.
    std::vector<Heatmap> targets;
    targets.push_back(render_gaussians({{4, 4, 1.0}, {11, 10, 1.0}}, 1.5, 16, 16));
    targets.push_back(render_gaussians({{10, 4, 1.0}, {5, 11, 1.0}}, 1.5, 16, 16));

    const auto total_bce = [&]() {
        double total = 0.0;
        for (const auto& t : targets) {
            const LatentPoseCode code = encode(t, vae);
            total += reconstruction_bce(decode(code.phi, vae), t);
        }
        return total;
    };
    const double before = total_bce();

    nn::Adam adam({5e-3, 0.9, 0.999, 1e-8}, {&vae.encoder.params(), &vae.decoder.params()});
    Rng eps_rng(15);
    for (int it = 0; it < 120; ++it) {
        vae.encoder.params().zero_grad();
        vae.decoder.params().zero_grad();
        for (const auto& t : targets) {
            VaeEncoder::Ctx enc_ctx;
            const LatentPoseCode code = encode(t, vae, true, &eps_rng, &enc_ctx);
            VaeDecoder::Ctx dec_ctx;
            const Mat recon_col = vae.decoder.forward(code.phi, dec_ctx);
            Mat drecon;
            Vec dmu_kl, dlogvar_kl;
            elbo_loss_grad(column_as_heatmap(recon_col, 16, 16), t, code.mu, code.logvar, 1.0, &drecon,
                           &dmu_kl, &dlogvar_kl);
            const Vec dphi = vae.decoder.backward(drecon, dec_ctx);
            const Vec dmu = dphi + dmu_kl;
            const Vec dlogvar =
                (dphi.array() * code.epsilon.array() * 0.5 * (0.5 * code.logvar.array()).exp()).matrix() +
                dlogvar_kl;
            vae.encoder.backward(dmu, dlogvar, enc_ctx);
        }
        adam.step();
    }
    CHECK(total_bce() < before);
}
