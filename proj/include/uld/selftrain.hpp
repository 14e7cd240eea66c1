#pragma once

#include "uld/bootstrap.hpp"
#include "uld/clustering.hpp"
#include "uld/loss_report.hpp"
#include "uld/model.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace uld {

struct Schedule {
    long total_iterations = 2000;
    long recluster_every = 200;
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int batch_size = 4;
    double margin = 0.8;
    int contrastive_triples = 64;
    double heatmap_sigma = 2.5;
    double mse_weight = 1.0;
    double contrastive_weight = 1.0;
    double elbo_beta = 1.0;
    int keypoint_clusters = 6;  // K
    int pose_clusters = 2;      // Q (D-ULD++ only)
    bool duldpp_full_vae = false;
    ExtractionOptions extraction;
    std::uint64_t seed = 11;
};

// Mean squared error over pixels.
double heatmap_mse(const Heatmap& h, const Heatmap& g);
double heatmap_mse_grad(const Heatmap& h, const Heatmap& g, Mat* dh_col);

// ||f - f_pos|| + max(0, margin - ||f - f_neg||); requires c == c_pos and
// c != c_neg.
double descriptor_contrastive(const Vec& f, const Vec& f_pos, const Vec& f_neg, int c, int c_pos,
                              int c_neg, double margin);
double descriptor_contrastive_grad(const Vec& f, const Vec& f_pos, const Vec& f_neg, int c, int c_pos,
                                   int c_neg, double margin, Vec* df, Vec* d_pos, Vec* d_neg);

struct StageResult {
    TrainingSet training_set;
    std::vector<double> losses;
    std::vector<std::pair<long, int>> recluster_events;  // (iteration, epoch stamp)
    bool aborted_nan = false;
    long aborted_at = -1;
};

// Invoked at every re-clustering event (iteration, fresh training set, Adam
// state) so the caller can checkpoint; resuming restarts at the boundary and
// re-derives the training set deterministically.
using ReclusterCallback = std::function<void(long iteration, const TrainingSet&, const nn::Adam&)>;

nn::Adam make_duld_adam(Model& model, const Schedule& schedule);
nn::Adam make_proxy_adam(Model& model, const Schedule& schedule);
nn::Adam make_duldpp_adam(Model& model, const Schedule& schedule);

// D-ULD: alternate flat re-clustering with Adam steps on heatmap MSE
// (targets rendered from the current pseudo-labeled keypoints) plus the
// descriptor contrastive loss over batch triples.
StageResult train_duld(const std::vector<Image>& images, Model& model, const Schedule& schedule,
                       LossReport* report = nullptr, const ReclusterCallback& on_recluster = {},
                       nn::Adam* adam = nullptr, long start_iteration = 0,
                       const TrainingSet* resume_set = nullptr);

using CheckpointCallback = std::function<void(long iteration, const nn::Adam&)>;

// Proxy stage: the network is frozen (heatmaps precomputed); the VAE is
// trained with the ELBO against pseudo-ground-truth Gaussians.
// on_checkpoint fires every recluster_every iterations (checkpoint cadence).
StageResult train_proxy(const std::vector<Image>& images, Model& model, const TrainingSet& label_set,
                        const Schedule& schedule, LossReport* report = nullptr,
                        nn::Adam* adam = nullptr, long start_iteration = 0,
                        const CheckpointCallback& on_checkpoint = {});

// D-ULD++ step 2: the decoder is dropped, the descriptor head frozen.
// Two-stage re-clustering refreshes (u_j, composite labels); Adam steps run
// heatmap MSE through detector + aggregator and the latent contrastive loss
// through the encoder alone.
StageResult train_duldpp(const std::vector<Image>& images, Model& model, const Schedule& schedule,
                         LossReport* report = nullptr, const ReclusterCallback& on_recluster = {},
                         nn::Adam* adam = nullptr, long start_iteration = 0,
                         const TrainingSet* resume_set = nullptr);

}  // namespace uld
