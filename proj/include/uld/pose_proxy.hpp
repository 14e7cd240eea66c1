#pragma once

#include "uld/nn.hpp"
#include "uld/types.hpp"

#include <optional>

namespace uld {

struct VaeConfig {
    int input_size = 64;  // heatmap side length; four stride-2 blocks
    int latent_dim = 64;
    int channels = 6;
};

struct LatentPoseCode {
    Vec phi;
    Vec mu;
    Vec logvar;
    Vec epsilon;  // recorded reparameterization noise (training mode only)
    int pose_label = -1;
};

// Encoder: heatmap -> four stride-2 conv blocks -> dense mu / logvar heads.
class VaeEncoder {
public:
    explicit VaeEncoder(const VaeConfig& cfg);
    void init(Rng& rng);

    struct Ctx {
        nn::Conv2d::Ctx c1, c2, c3, c4;
        Mat z1, z2, z3, z4;
        Vec flat;
    };

    void forward(const Mat& heatmap_col, Ctx& ctx, Vec* mu, Vec* logvar) const;
    // Accumulates parameter gradients; the gradient w.r.t. the input heatmap
    // is discarded (training stops gradients at the detector output).
    void backward(const Vec& dmu, const Vec& dlogvar, const Ctx& ctx);

    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

private:
    VaeConfig cfg_;
    nn::ParamStore store_;
    nn::Conv2d conv1_, conv2_, conv3_, conv4_;
    nn::Dense mu_head_, logvar_head_;
    int bottom_ = 0;  // spatial side after the stride-2 stack
};

// Decoder: latent -> dense -> four (upsample x2, conv) blocks -> 1x1 conv ->
// sigmoid heatmap.
class VaeDecoder {
public:
    explicit VaeDecoder(const VaeConfig& cfg);
    void init(Rng& rng);

    struct Ctx {
        Vec latent;
        Vec flat;
        nn::Conv2d::Ctx c1, c2, c3, c4, c5;
        Mat z0, z1, z2, z3, z4;
        Mat out;
        std::vector<int> sizes;
    };

    Mat forward(const Vec& phi, Ctx& ctx) const;  // (S*S) x 1 column in [0, 1]
    Vec backward(const Mat& d_out, const Ctx& ctx);

    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

private:
    VaeConfig cfg_;
    nn::ParamStore store_;
    nn::Dense expand_;
    nn::Conv2d conv1_, conv2_, conv3_, conv4_, conv5_;
    int bottom_ = 0;
};

struct Vae {
    VaeConfig config;
    VaeEncoder encoder;
    VaeDecoder decoder;

    explicit Vae(const VaeConfig& cfg) : config(cfg), encoder(cfg), decoder(cfg) {}
    void init(Rng& rng) {
        encoder.init(rng);
        decoder.init(rng);
    }
};

// phi = mu at inference; mu + sigma .* eps with recorded eps during training.
LatentPoseCode encode(const Heatmap& h, const Vae& vae, bool training = false, Rng* rng = nullptr,
                      VaeEncoder::Ctx* ctx = nullptr);
Heatmap decode(const Vec& phi, const Vae& vae, VaeDecoder::Ctx* ctx = nullptr);

// Bernoulli reconstruction (summed over pixels) + beta * closed-form KL to
// the standard normal prior.
double elbo_loss(const Heatmap& recon, const Heatmap& target, const Vec& mu, const Vec& logvar,
                 double beta);
double elbo_loss_grad(const Heatmap& recon, const Heatmap& target, const Vec& mu, const Vec& logvar,
                      double beta, Mat* d_recon_col, Vec* d_mu, Vec* d_logvar);

double kl_standard_normal(const Vec& mu, const Vec& logvar);
double reconstruction_bce(const Heatmap& recon, const Heatmap& target);

// ||phi - phi_pos|| + max(0, margin - ||phi - phi_neg||); requires
// u == u_pos and u != u_neg.
double latent_contrastive(const Vec& phi, const Vec& phi_pos, const Vec& phi_neg, int u, int u_pos,
                          int u_neg, double margin);
double latent_contrastive_grad(const Vec& phi, const Vec& phi_pos, const Vec& phi_neg, int u, int u_pos,
                               int u_neg, double margin, Vec* d_phi, Vec* d_pos, Vec* d_neg);

}  // namespace uld
