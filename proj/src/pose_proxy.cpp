#include "uld/pose_proxy.hpp"

#include "uld/heads.hpp"

#include <cmath>

namespace uld {

namespace {
int halved(int s) { return nn::Conv2d::out_dim(s, 3, 2); }
}  // namespace

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

VaeEncoder::VaeEncoder(const VaeConfig& cfg) : cfg_(cfg) {
    require(cfg.input_size >= 4, "VaeEncoder: input size too small for four stride-2 blocks");
    conv1_ = nn::Conv2d::create(store_, "enc1", 1, cfg.channels, 3, 2);
    conv2_ = nn::Conv2d::create(store_, "enc2", cfg.channels, cfg.channels, 3, 2);
    conv3_ = nn::Conv2d::create(store_, "enc3", cfg.channels, cfg.channels, 3, 2);
    conv4_ = nn::Conv2d::create(store_, "enc4", cfg.channels, cfg.channels, 3, 2);
    bottom_ = halved(halved(halved(halved(cfg.input_size))));
    const int flat = bottom_ * bottom_ * cfg.channels;
    mu_head_ = nn::Dense::create(store_, "mu", flat, cfg.latent_dim);
    logvar_head_ = nn::Dense::create(store_, "logvar", flat, cfg.latent_dim);
    store_.finalize();
}

void VaeEncoder::init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    conv3_.init(rng);
    conv4_.init(rng);
    mu_head_.init(rng);
    logvar_head_.init(rng);
}

void VaeEncoder::forward(const Mat& heatmap_col, Ctx& ctx, Vec* mu, Vec* logvar) const {
    const long n = static_cast<long>(cfg_.input_size) * cfg_.input_size;
    require(heatmap_col.rows() == n && heatmap_col.cols() == 1,
            "VaeEncoder: heatmap is not at the configured resolution");
    const int s0 = cfg_.input_size;
    ctx.z1 = conv1_.forward(heatmap_col, s0, s0, ctx.c1);
    const int s1 = halved(s0);
    ctx.z2 = conv2_.forward(nn::leaky_relu(ctx.z1), s1, s1, ctx.c2);
    const int s2 = halved(s1);
    ctx.z3 = conv3_.forward(nn::leaky_relu(ctx.z2), s2, s2, ctx.c3);
    const int s3 = halved(s2);
    ctx.z4 = conv4_.forward(nn::leaky_relu(ctx.z3), s3, s3, ctx.c4);
    const Mat a4 = nn::leaky_relu(ctx.z4);
    ctx.flat = Eigen::Map<const Vec>(a4.data(), a4.size());
    *mu = mu_head_.forward(ctx.flat);
    *logvar = logvar_head_.forward(ctx.flat);
}

void VaeEncoder::backward(const Vec& dmu, const Vec& dlogvar, const Ctx& ctx) {
    Vec dflat = mu_head_.backward(dmu, ctx.flat);
    dflat += logvar_head_.backward(dlogvar, ctx.flat);
    Mat da4 = Eigen::Map<const Mat>(dflat.data(), ctx.z4.rows(), ctx.z4.cols());
    const Mat dz4 = nn::leaky_relu_backward(da4, ctx.z4);
    const Mat da3 = conv4_.backward(dz4, ctx.c4);
    const Mat dz3 = nn::leaky_relu_backward(da3, ctx.z3);
    const Mat da2 = conv3_.backward(dz3, ctx.c3);
    const Mat dz2 = nn::leaky_relu_backward(da2, ctx.z2);
    const Mat da1 = conv2_.backward(dz2, ctx.c2);
    const Mat dz1 = nn::leaky_relu_backward(da1, ctx.z1);
    conv1_.backward(dz1, ctx.c1);  // input gradient intentionally dropped
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

VaeDecoder::VaeDecoder(const VaeConfig& cfg) : cfg_(cfg) {
    bottom_ = halved(halved(halved(halved(cfg.input_size))));
    expand_ = nn::Dense::create(store_, "expand", cfg.latent_dim, bottom_ * bottom_ * cfg.channels);
    conv1_ = nn::Conv2d::create(store_, "dec1", cfg.channels, cfg.channels, 3, 1);
    conv2_ = nn::Conv2d::create(store_, "dec2", cfg.channels, cfg.channels, 3, 1);
    conv3_ = nn::Conv2d::create(store_, "dec3", cfg.channels, cfg.channels, 3, 1);
    conv4_ = nn::Conv2d::create(store_, "dec4", cfg.channels, cfg.channels, 3, 1);
    conv5_ = nn::Conv2d::create(store_, "dec5", cfg.channels, 1, 1, 1);
    store_.finalize();
}

void VaeDecoder::init(Rng& rng) {
    expand_.init(rng);
    conv1_.init(rng);
    conv2_.init(rng);
    conv3_.init(rng);
    conv4_.init(rng);
    conv5_.init(rng);
}

Mat VaeDecoder::forward(const Vec& phi, Ctx& ctx) const {
    require(phi.size() == cfg_.latent_dim, "VaeDecoder: latent dimension mismatch");
    ctx.latent = phi;
    ctx.flat = expand_.forward(phi);
    ctx.sizes.clear();

    // Mirror of the encoder: grow back to input_size by doubling, clamped so
    // the final block lands exactly on the configured resolution.
    int s = bottom_;
    ctx.z0 = Eigen::Map<const Mat>(ctx.flat.data(), static_cast<long>(s) * s, cfg_.channels);
    Mat a = nn::leaky_relu(ctx.z0);

    const int target = cfg_.input_size;
    int s1 = std::min(target, s * 2);
    ctx.sizes.push_back(s1);
    Mat up = nn::upsample_bilinear(a, s, s, s1, s1);
    ctx.z1 = conv1_.forward(up, s1, s1, ctx.c1);
    a = nn::leaky_relu(ctx.z1);

    int s2 = std::min(target, s1 * 2);
    ctx.sizes.push_back(s2);
    up = nn::upsample_bilinear(a, s1, s1, s2, s2);
    ctx.z2 = conv2_.forward(up, s2, s2, ctx.c2);
    a = nn::leaky_relu(ctx.z2);

    int s3 = std::min(target, s2 * 2);
    ctx.sizes.push_back(s3);
    up = nn::upsample_bilinear(a, s2, s2, s3, s3);
    ctx.z3 = conv3_.forward(up, s3, s3, ctx.c3);
    a = nn::leaky_relu(ctx.z3);

    int s4 = target;
    ctx.sizes.push_back(s4);
    up = nn::upsample_bilinear(a, s3, s3, s4, s4);
    ctx.z4 = conv4_.forward(up, s4, s4, ctx.c4);
    a = nn::leaky_relu(ctx.z4);

    ctx.out = nn::sigmoid(conv5_.forward(a, s4, s4, ctx.c5));
    return ctx.out;
}

Vec VaeDecoder::backward(const Mat& d_out, const Ctx& ctx) {
    const int target = cfg_.input_size;
    const int s1 = ctx.sizes[0], s2 = ctx.sizes[1], s3 = ctx.sizes[2];

    Mat dy = nn::sigmoid_backward(d_out, ctx.out);
    Mat da = conv5_.backward(dy, ctx.c5);
    Mat dz = nn::leaky_relu_backward(da, ctx.z4);
    Mat dup = conv4_.backward(dz, ctx.c4);
    da = nn::upsample_bilinear_backward(dup, s3, s3, target, target);

    dz = nn::leaky_relu_backward(da, ctx.z3);
    dup = conv3_.backward(dz, ctx.c3);
    da = nn::upsample_bilinear_backward(dup, s2, s2, s3, s3);

    dz = nn::leaky_relu_backward(da, ctx.z2);
    dup = conv2_.backward(dz, ctx.c2);
    da = nn::upsample_bilinear_backward(dup, s1, s1, s2, s2);

    dz = nn::leaky_relu_backward(da, ctx.z1);
    dup = conv1_.backward(dz, ctx.c1);
    da = nn::upsample_bilinear_backward(dup, bottom_, bottom_, s1, s1);

    dz = nn::leaky_relu_backward(da, ctx.z0);
    const Vec dflat = Eigen::Map<const Vec>(dz.data(), dz.size());
    return expand_.backward(dflat, ctx.latent);
}

// ---------------------------------------------------------------------------
// Spec-level operations
// ---------------------------------------------------------------------------

LatentPoseCode encode(const Heatmap& h, const Vae& vae, bool training, Rng* rng, VaeEncoder::Ctx* ctx) {
    VaeEncoder::Ctx local;
    VaeEncoder::Ctx& c = ctx ? *ctx : local;
    LatentPoseCode code;
    vae.encoder.forward(heatmap_as_column(h), c, &code.mu, &code.logvar);
    if (training) {
        require(rng != nullptr, "encode: training mode needs an RNG for reparameterization");
        code.epsilon = Vec(code.mu.size());
        for (long i = 0; i < code.epsilon.size(); ++i) code.epsilon(i) = normal(*rng);
        code.phi = code.mu + ((0.5 * code.logvar.array()).exp() * code.epsilon.array()).matrix();
    } else {
        code.phi = code.mu;
    }
    return code;
}

Heatmap decode(const Vec& phi, const Vae& vae, VaeDecoder::Ctx* ctx) {
    VaeDecoder::Ctx local;
    VaeDecoder::Ctx& c = ctx ? *ctx : local;
    const Mat col = vae.decoder.forward(phi, c);
    return column_as_heatmap(col, vae.config.input_size, vae.config.input_size,
                             Heatmap::Source::detector_output);
}

double kl_standard_normal(const Vec& mu, const Vec& logvar) {
    return 0.5 * (mu.array().square() + logvar.array().exp() - 1.0 - logvar.array()).sum();
}

double reconstruction_bce(const Heatmap& recon, const Heatmap& target) {
    require(recon.grid.rows() == target.grid.rows() && recon.grid.cols() == target.grid.cols(),
            "reconstruction_bce: shape mismatch");
    const auto p = recon.grid.array().max(1e-7).min(1.0 - 1e-7);
    const auto t = target.grid.array();
    return -(t * p.log() + (1.0 - t) * (1.0 - p).log()).sum();
}

double elbo_loss(const Heatmap& recon, const Heatmap& target, const Vec& mu, const Vec& logvar,
                 double beta) {
    return reconstruction_bce(recon, target) + beta * kl_standard_normal(mu, logvar);
}

double elbo_loss_grad(const Heatmap& recon, const Heatmap& target, const Vec& mu, const Vec& logvar,
                      double beta, Mat* d_recon_col, Vec* d_mu, Vec* d_logvar) {
    const double loss = elbo_loss(recon, target, mu, logvar, beta);
    if (d_recon_col) {
        const int height = recon.height(), width = recon.width();
        d_recon_col->resize(static_cast<long>(height) * width, 1);
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                const double p = std::clamp(recon.grid(y, x), 1e-7, 1.0 - 1e-7);
                const double t = target.grid(y, x);
                (*d_recon_col)(static_cast<long>(y) * width + x, 0) = (p - t) / (p * (1.0 - p));
            }
        }
    }
    if (d_mu) *d_mu = beta * mu;
    if (d_logvar) *d_logvar = beta * 0.5 * (logvar.array().exp() - 1.0).matrix();
    return loss;
}

double latent_contrastive(const Vec& phi, const Vec& phi_pos, const Vec& phi_neg, int u, int u_pos,
                          int u_neg, double margin) {
    require(u == u_pos, "latent_contrastive: positive must share the anchor's pose label");
    require(u != u_neg, "latent_contrastive: negative must have a different pose label");
    require(margin > 0.0, "latent_contrastive: margin must be positive");
    return (phi - phi_pos).norm() + std::max(0.0, margin - (phi - phi_neg).norm());
}

double latent_contrastive_grad(const Vec& phi, const Vec& phi_pos, const Vec& phi_neg, int u, int u_pos,
                               int u_neg, double margin, Vec* d_phi, Vec* d_pos, Vec* d_neg) {
    const double loss = latent_contrastive(phi, phi_pos, phi_neg, u, u_pos, u_neg, margin);
    const Vec diff_pos = phi - phi_pos;
    const Vec diff_neg = phi - phi_neg;
    const double n_pos = diff_pos.norm();
    const double n_neg = diff_neg.norm();
    Vec g_anchor = Vec::Zero(phi.size());
    Vec g_pos = Vec::Zero(phi.size());
    Vec g_neg = Vec::Zero(phi.size());
    if (n_pos > 1e-12) {
        g_anchor += diff_pos / n_pos;
        g_pos -= diff_pos / n_pos;
    }
    if (n_neg < margin && n_neg > 1e-12) {
        g_anchor -= diff_neg / n_neg;
        g_neg += diff_neg / n_neg;
    }
    if (d_phi) *d_phi = g_anchor;
    if (d_pos) *d_pos = g_pos;
    if (d_neg) *d_neg = g_neg;
    return loss;
}

}  // namespace uld
