#include "uld/selftrain.hpp"

#include <algorithm>
#include <cmath>

namespace uld {

double heatmap_mse(const Heatmap& h, const Heatmap& g) {
    require(h.grid.rows() == g.grid.rows() && h.grid.cols() == g.grid.cols(),
            "heatmap_mse: shape mismatch");
    return (h.grid - g.grid).array().square().mean();
}

double heatmap_mse_grad(const Heatmap& h, const Heatmap& g, Mat* dh_col) {
    const double loss = heatmap_mse(h, g);
    if (dh_col) {
        const int height = h.height(), width = h.width();
        const double scale = 2.0 / static_cast<double>(h.grid.size());
        dh_col->resize(static_cast<long>(height) * width, 1);
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                (*dh_col)(static_cast<long>(y) * width + x, 0) = scale * (h.grid(y, x) - g.grid(y, x));
    }
    return loss;
}

double descriptor_contrastive(const Vec& f, const Vec& f_pos, const Vec& f_neg, int c, int c_pos,
                              int c_neg, double margin) {
    require(c == c_pos, "descriptor_contrastive: positive must share the anchor's pseudo-label");
    require(c != c_neg, "descriptor_contrastive: negative must have a different pseudo-label");
    require(margin > 0.0, "descriptor_contrastive: margin must be positive");
    return (f - f_pos).norm() + std::max(0.0, margin - (f - f_neg).norm());
}

double descriptor_contrastive_grad(const Vec& f, const Vec& f_pos, const Vec& f_neg, int c, int c_pos,
                                   int c_neg, double margin, Vec* df, Vec* d_pos, Vec* d_neg) {
    const double loss = descriptor_contrastive(f, f_pos, f_neg, c, c_pos, c_neg, margin);
    const Vec diff_pos = f - f_pos;
    const Vec diff_neg = f - f_neg;
    const double n_pos = diff_pos.norm();
    const double n_neg = diff_neg.norm();
    Vec g_anchor = Vec::Zero(f.size());
    Vec g_pos = Vec::Zero(f.size());
    Vec g_neg = Vec::Zero(f.size());
    if (n_pos > 1e-12) {
        g_anchor += diff_pos / n_pos;
        g_pos -= diff_pos / n_pos;
    }
    if (n_neg < margin && n_neg > 1e-12) {
        g_anchor -= diff_neg / n_neg;
        g_neg += diff_neg / n_neg;
    }
    if (df) *df = g_anchor;
    if (d_pos) *d_pos = g_pos;
    if (d_neg) *d_neg = g_neg;
    return loss;
}

nn::Adam make_duld_adam(Model& model, const Schedule& s) {
    return nn::Adam({s.learning_rate, s.beta1, s.beta2, 1e-8},
                    {&model.aggregator.params(), &model.detector.params(), &model.descriptor.params()});
}

nn::Adam make_proxy_adam(Model& model, const Schedule& s) {
    return nn::Adam({s.learning_rate, s.beta1, s.beta2, 1e-8},
                    {&model.vae.encoder.params(), &model.vae.decoder.params()});
}

nn::Adam make_duldpp_adam(Model& model, const Schedule& s) {
    std::vector<nn::ParamStore*> stores = {&model.aggregator.params(), &model.detector.params(),
                                           &model.vae.encoder.params()};
    if (s.duldpp_full_vae) stores.push_back(&model.vae.decoder.params());
    return nn::Adam({s.learning_rate, s.beta1, s.beta2, 1e-8}, stores);
}

namespace {

std::vector<int> sample_batch(std::size_t n_images, int batch_size, Rng& rng) {
    std::vector<int> out;
    out.reserve(static_cast<std::size_t>(batch_size));
    for (int b = 0; b < batch_size; ++b) out.push_back(uniform_int(rng, 0, static_cast<int>(n_images) - 1));
    return out;
}

struct TripleIndex {
    int anchor = 0;
    int positive = 0;
    int negative = 0;
};

// Uniform anchor/positive/negative selection over items carrying a label;
// anchors without a same-label partner or a different-label item are skipped.
std::vector<TripleIndex> sample_triples(const std::vector<int>& labels, int cap, Rng& rng) {
    std::vector<TripleIndex> out;
    const int n = static_cast<int>(labels.size());
    std::vector<int> anchors;
    for (int i = 0; i < n; ++i) {
        bool has_pos = false, has_neg = false;
        for (int j = 0; j < n && !(has_pos && has_neg); ++j) {
            if (j == i) continue;
            if (labels[j] == labels[i]) has_pos = true;
            if (labels[j] != labels[i]) has_neg = true;
        }
        if (has_pos && has_neg) anchors.push_back(i);
    }
    if (anchors.empty()) return out;
    if (static_cast<int>(anchors.size()) > cap) {
        for (int i = 0; i < cap; ++i) {
            const int j = i + static_cast<int>(rng() % (anchors.size() - i));
            std::swap(anchors[static_cast<std::size_t>(i)], anchors[static_cast<std::size_t>(j)]);
        }
        anchors.resize(static_cast<std::size_t>(cap));
    }
    for (int a : anchors) {
        std::vector<int> pos, neg;
        for (int j = 0; j < n; ++j) {
            if (j == a) continue;
            (labels[j] == labels[a] ? pos : neg).push_back(j);
        }
        TripleIndex t;
        t.anchor = a;
        t.positive = pos[rng() % pos.size()];
        t.negative = neg[rng() % neg.size()];
        out.push_back(t);
    }
    return out;
}

int boundary_epoch(long iteration, long every) { return every > 0 ? static_cast<int>(iteration / every) : 0; }

}  // namespace

// ---------------------------------------------------------------------------
// D-ULD
// ---------------------------------------------------------------------------

StageResult train_duld(const std::vector<Image>& images, Model& model, const Schedule& s,
                       LossReport* report, const ReclusterCallback& on_recluster, nn::Adam* adam_ext,
                       long start_iteration, const TrainingSet* resume_set) {
    require(!images.empty(), "train_duld: empty dataset");
    const int size = model.image_size();
    const int n_images = static_cast<int>(images.size());

    nn::Adam local_adam = make_duld_adam(model, s);
    nn::Adam& adam = adam_ext ? *adam_ext : local_adam;

    const ExtractFn extract = [&](int j) {
        return extract_keypoints(model, images[static_cast<std::size_t>(j)], s.extraction, false);
    };
    UpdateOptions uo;
    uo.keypoint_clusters = s.keypoint_clusters;
    uo.pose_clusters = 1;
    uo.seed = mix_seed(s.seed, 0xC1A57EA);

    StageResult res;
    TrainingSet set;
    bool have_set = false;
    if (resume_set) {
        set = *resume_set;
        have_set = true;
    }

    Vec snap_agg = model.aggregator.params().values();
    Vec snap_det = model.detector.params().values();
    Vec snap_desc = model.descriptor.params().values();

    for (long it = start_iteration; it < s.total_iterations; ++it) {
        // A caller-provided set covers the starting boundary.
        const bool provided_here = resume_set && it == start_iteration;
        const bool boundary =
            s.recluster_every > 0 && it % s.recluster_every == 0 && !provided_here;
        if (boundary || !have_set) {
            UpdateStats stats;
            set = update_training_set(n_images, extract, uo, nullptr, &stats);
            set.epoch = boundary_epoch(it, s.recluster_every);
            have_set = true;
            res.recluster_events.emplace_back(it, set.epoch);
            if (report) {
                report->add(it, "duld", "recluster_epoch", set.epoch);
                report->add(it, "duld", "empty_images", stats.empty_images);
            }
            if (on_recluster) on_recluster(it, set, adam);
        }
        require(set.epoch == boundary_epoch(it, s.recluster_every),
                "train_duld: pseudo-label targets would come from a stale epoch");

        model.aggregator.params().zero_grad();
        model.detector.params().zero_grad();
        model.descriptor.params().zero_grad();

        Rng batch_rng(mix_seed(s.seed, static_cast<std::uint64_t>(it), 0xBA7C4));
        const std::vector<int> batch = sample_batch(images.size(), s.batch_size, batch_rng);

        struct Slot {
            int image = 0;
            Aggregator::Ctx agg_ctx;
            ConvHead::Ctx det_ctx, desc_ctx;
            FeatureMap volume;
            Mat dh_col;
            std::vector<Vec> raw, norm, dnorm;
        };
        std::vector<Slot> slots(batch.size());

        double mse_sum = 0.0;
        std::vector<int> triple_labels;
        std::vector<std::pair<int, int>> triple_origin;  // (slot, keypoint row)
        for (std::size_t b = 0; b < batch.size(); ++b) {
            Slot& slot = slots[b];
            slot.image = batch[b];
            const auto& entry = set.images[static_cast<std::size_t>(slot.image)];

            const FeatureMap fmap = model.features(images[static_cast<std::size_t>(slot.image)], &slot.agg_ctx);
            const Heatmap heat = detect(fmap, model.detector, slot.det_ctx);
            slot.volume = describe(fmap, model.descriptor, slot.desc_ctx);

            const Heatmap target = render_gaussians(entry.keypoints, s.heatmap_sigma, size, size);
            mse_sum += heatmap_mse_grad(heat, target, &slot.dh_col);

            for (std::size_t i = 0; i < entry.keypoints.size(); ++i) {
                const Keypoint& kp = entry.keypoints[i];
                const Vec raw = nn::bilinear_sample(slot.volume.values, size, size, kp.x, kp.y);
                slot.raw.push_back(raw);
                slot.norm.push_back(nn::l2_normalize(raw));
                slot.dnorm.push_back(Vec::Zero(raw.size()));
                triple_labels.push_back(entry.labels[i]);
                triple_origin.emplace_back(static_cast<int>(b), static_cast<int>(slot.raw.size()) - 1);
            }
        }

        Rng triple_rng(mix_seed(s.seed, static_cast<std::uint64_t>(it), 0x77195));
        const auto triples = sample_triples(triple_labels, s.contrastive_triples, triple_rng);
        double con_sum = 0.0;
        for (const TripleIndex& t : triples) {
            auto [sa, ia] = triple_origin[static_cast<std::size_t>(t.anchor)];
            auto [sp, ip] = triple_origin[static_cast<std::size_t>(t.positive)];
            auto [sn, in_] = triple_origin[static_cast<std::size_t>(t.negative)];
            Vec da, dp, dn;
            con_sum += descriptor_contrastive_grad(
                slots[sa].norm[ia], slots[sp].norm[ip], slots[sn].norm[in_], triple_labels[t.anchor],
                triple_labels[t.positive], triple_labels[t.negative], s.margin, &da, &dp, &dn);
            slots[sa].dnorm[ia] += da;
            slots[sp].dnorm[ip] += dp;
            slots[sn].dnorm[in_] += dn;
        }

        const double mse_mean = mse_sum / static_cast<double>(batch.size());
        const double con_mean = triples.empty() ? 0.0 : con_sum / static_cast<double>(triples.size());
        const double loss = s.mse_weight * mse_mean + s.contrastive_weight * con_mean;

        const double w_mse = s.mse_weight / static_cast<double>(batch.size());
        const double w_con =
            triples.empty() ? 0.0 : s.contrastive_weight / static_cast<double>(triples.size());
        for (std::size_t b = 0; b < batch.size(); ++b) {
            Slot& slot = slots[b];
            const auto& entry = set.images[static_cast<std::size_t>(slot.image)];
            Mat dvol = Mat::Zero(slot.volume.values.rows(), slot.volume.values.cols());
            for (std::size_t i = 0; i < slot.raw.size(); ++i) {
                if (w_con == 0.0 || slot.dnorm[i].isZero(0.0)) continue;
                const Vec draw = nn::l2_normalize_backward(w_con * slot.dnorm[i], slot.raw[i]);
                nn::bilinear_scatter(dvol, size, size, entry.keypoints[i].x, entry.keypoints[i].y, draw);
            }
            Mat dfeat = model.detector.backward(w_mse * slot.dh_col, slot.det_ctx);
            dfeat += model.descriptor.backward(dvol, slot.desc_ctx);
            model.aggregator.backward(dfeat, slot.agg_ctx);
        }

        if (!std::isfinite(loss)) {
            model.aggregator.params().values() = snap_agg;
            model.detector.params().values() = snap_det;
            model.descriptor.params().values() = snap_desc;
            res.aborted_nan = true;
            res.aborted_at = it;
            break;
        }
        snap_agg = model.aggregator.params().values();
        snap_det = model.detector.params().values();
        snap_desc = model.descriptor.params().values();

        adam.step();
        res.losses.push_back(loss);
        if (report) {
            report->add(it, "duld", "heatmap_mse", mse_mean);
            report->add(it, "duld", "descriptor_contrastive", con_mean);
        }
    }

    res.training_set = std::move(set);
    return res;
}

// ---------------------------------------------------------------------------
// Proxy task
// ---------------------------------------------------------------------------

StageResult train_proxy(const std::vector<Image>& images, Model& model, const TrainingSet& label_set,
                        const Schedule& s, LossReport* report, nn::Adam* adam_ext, long start_iteration,
                        const CheckpointCallback& on_checkpoint) {
    require(!images.empty(), "train_proxy: empty dataset");
    require(label_set.images.size() == images.size(), "train_proxy: training set does not match images");
    const int size = model.image_size();

    nn::Adam local_adam = make_proxy_adam(model, s);
    nn::Adam& adam = adam_ext ? *adam_ext : local_adam;

    // The network is frozen during the proxy task, so heatmaps and targets
    // are fixed for the whole stage.
    std::vector<Heatmap> heats, targets;
    heats.reserve(images.size());
    targets.reserve(images.size());
    for (std::size_t j = 0; j < images.size(); ++j) {
        heats.push_back(detect(model.features(images[j]), model.detector));
        targets.push_back(
            render_gaussians(label_set.images[j].keypoints, s.heatmap_sigma, size, size));
    }

    StageResult res;
    res.training_set = label_set;

    Vec snap_enc = model.vae.encoder.params().values();
    Vec snap_dec = model.vae.decoder.params().values();

    for (long it = start_iteration; it < s.total_iterations; ++it) {
        if (on_checkpoint && s.recluster_every > 0 && it % s.recluster_every == 0) on_checkpoint(it, adam);
        model.vae.encoder.params().zero_grad();
        model.vae.decoder.params().zero_grad();

        Rng batch_rng(mix_seed(s.seed, static_cast<std::uint64_t>(it), 0xBA7C4));
        const std::vector<int> batch = sample_batch(images.size(), s.batch_size, batch_rng);

        double loss_sum = 0.0;
        const double inv_batch = 1.0 / static_cast<double>(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const int j = batch[b];
            Rng eps_rng(mix_seed(s.seed, static_cast<std::uint64_t>(it) * 131 + b, 0xE9D));
            VaeEncoder::Ctx enc_ctx;
            const LatentPoseCode code =
                encode(heats[static_cast<std::size_t>(j)], model.vae, true, &eps_rng, &enc_ctx);
            VaeDecoder::Ctx dec_ctx;
            const Mat recon_col = model.vae.decoder.forward(code.phi, dec_ctx);
            const Heatmap recon = column_as_heatmap(recon_col, size, size);

            Mat drecon;
            Vec dmu_kl, dlogvar_kl;
            loss_sum += elbo_loss_grad(recon, targets[static_cast<std::size_t>(j)], code.mu, code.logvar,
                                       s.elbo_beta, &drecon, &dmu_kl, &dlogvar_kl);

            const Vec dphi = model.vae.decoder.backward(inv_batch * drecon, dec_ctx);
            const Vec dmu = dphi + inv_batch * dmu_kl;
            const Vec dlogvar =
                (dphi.array() * code.epsilon.array() * 0.5 * (0.5 * code.logvar.array()).exp()).matrix() +
                inv_batch * dlogvar_kl;
            model.vae.encoder.backward(dmu, dlogvar, enc_ctx);
        }

        const double loss = loss_sum * inv_batch;
        if (!std::isfinite(loss)) {
            model.vae.encoder.params().values() = snap_enc;
            model.vae.decoder.params().values() = snap_dec;
            res.aborted_nan = true;
            res.aborted_at = it;
            break;
        }
        snap_enc = model.vae.encoder.params().values();
        snap_dec = model.vae.decoder.params().values();

        adam.step();
        res.losses.push_back(loss);
        if (report) report->add(it, "proxy", "elbo", loss);
    }
    return res;
}

// ---------------------------------------------------------------------------
// D-ULD++
// ---------------------------------------------------------------------------

StageResult train_duldpp(const std::vector<Image>& images, Model& model, const Schedule& s,
                         LossReport* report, const ReclusterCallback& on_recluster, nn::Adam* adam_ext,
                         long start_iteration, const TrainingSet* resume_set) {
    require(!images.empty(), "train_duldpp: empty dataset");
    require(s.pose_clusters >= 1, "train_duldpp: pose_clusters must be >= 1");
    const int size = model.image_size();
    const int n_images = static_cast<int>(images.size());

    nn::Adam local_adam = make_duldpp_adam(model, s);
    nn::Adam& adam = adam_ext ? *adam_ext : local_adam;

    const ExtractFn extract = [&](int j) {
        return extract_keypoints(model, images[static_cast<std::size_t>(j)], s.extraction,
                                 /*with_latent=*/true);
    };
    UpdateOptions uo;
    uo.keypoint_clusters = s.keypoint_clusters;
    uo.pose_clusters = s.pose_clusters;
    uo.seed = mix_seed(s.seed, 0xC1A57EB);

    StageResult res;
    TrainingSet set;
    bool have_set = false;
    if (resume_set) {
        set = *resume_set;
        have_set = true;
    }

    const std::uint64_t desc_checksum_before = model.descriptor.params().checksum();

    Vec snap_agg = model.aggregator.params().values();
    Vec snap_det = model.detector.params().values();
    Vec snap_enc = model.vae.encoder.params().values();
    Vec snap_dec = model.vae.decoder.params().values();

    for (long it = start_iteration; it < s.total_iterations; ++it) {
        const bool provided_here = resume_set && it == start_iteration;
        const bool boundary =
            s.recluster_every > 0 && it % s.recluster_every == 0 && !provided_here;
        if (boundary || !have_set) {
            UpdateStats stats;
            set = update_training_set(n_images, extract, uo, nullptr, &stats);
            set.epoch = boundary_epoch(it, s.recluster_every);
            have_set = true;
            res.recluster_events.emplace_back(it, set.epoch);
            if (report) {
                report->add(it, "duldpp", "recluster_epoch", set.epoch);
                report->add(it, "duldpp", "empty_images", stats.empty_images);
                report->add(it, "duldpp", "shrunk_pose_clusters",
                            static_cast<double>(stats.shrunk_pose_clusters.size()));
            }
            if (on_recluster) on_recluster(it, set, adam);
        }
        require(set.epoch == boundary_epoch(it, s.recluster_every),
                "train_duldpp: pseudo-label targets would come from a stale epoch");

        model.aggregator.params().zero_grad();
        model.detector.params().zero_grad();
        model.vae.encoder.params().zero_grad();
        model.vae.decoder.params().zero_grad();

        Rng batch_rng(mix_seed(s.seed, static_cast<std::uint64_t>(it), 0xBA7C4));
        const std::vector<int> batch = sample_batch(images.size(), s.batch_size, batch_rng);

        struct Slot {
            int image = 0;
            Aggregator::Ctx agg_ctx;
            ConvHead::Ctx det_ctx;
            VaeEncoder::Ctx enc_ctx;
            LatentPoseCode code;
            Mat dh_col;
            Vec dphi;
        };
        std::vector<Slot> slots(batch.size());
        std::vector<int> pose_labels(batch.size());

        double mse_sum = 0.0;
        double elbo_sum = 0.0;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            Slot& slot = slots[b];
            slot.image = batch[b];
            const auto& entry = set.images[static_cast<std::size_t>(slot.image)];
            pose_labels[b] = entry.pose_label;

            const FeatureMap fmap = model.features(images[static_cast<std::size_t>(slot.image)], &slot.agg_ctx);
            const Heatmap heat = detect(fmap, model.detector, slot.det_ctx);
            Rng eps_rng(mix_seed(s.seed, static_cast<std::uint64_t>(it) * 131 + b, 0xE9D));
            slot.code = encode(heat, model.vae, true, &eps_rng, &slot.enc_ctx);
            slot.dphi = Vec::Zero(slot.code.phi.size());

            const Heatmap target = render_gaussians(entry.keypoints, s.heatmap_sigma, size, size);
            mse_sum += heatmap_mse_grad(heat, target, &slot.dh_col);

            if (s.duldpp_full_vae) {
                VaeDecoder::Ctx dec_ctx;
                const Mat recon_col = model.vae.decoder.forward(slot.code.phi, dec_ctx);
                const Heatmap recon = column_as_heatmap(recon_col, size, size);
                Mat drecon;
                Vec dmu_kl, dlogvar_kl;
                elbo_sum += elbo_loss_grad(recon, target, slot.code.mu, slot.code.logvar, s.elbo_beta,
                                           &drecon, &dmu_kl, &dlogvar_kl);
                const double inv_batch = 1.0 / static_cast<double>(batch.size());
                const Vec dphi_rec = model.vae.decoder.backward(inv_batch * drecon, dec_ctx);
                slot.dphi += dphi_rec;
                const Vec dmu = inv_batch * dmu_kl;
                const Vec dlogvar = inv_batch * dlogvar_kl;
                model.vae.encoder.backward(dmu, dlogvar, slot.enc_ctx);
            }
        }

        Rng triple_rng(mix_seed(s.seed, static_cast<std::uint64_t>(it), 0x77196));
        const auto triples = sample_triples(pose_labels, s.contrastive_triples, triple_rng);
        double con_sum = 0.0;
        for (const TripleIndex& t : triples) {
            Vec da, dp, dn;
            con_sum += latent_contrastive_grad(slots[t.anchor].code.phi, slots[t.positive].code.phi,
                                               slots[t.negative].code.phi, pose_labels[t.anchor],
                                               pose_labels[t.positive], pose_labels[t.negative], s.margin,
                                               &da, &dp, &dn);
            slots[t.anchor].dphi += (s.contrastive_weight / static_cast<double>(triples.size())) * da;
            slots[t.positive].dphi += (s.contrastive_weight / static_cast<double>(triples.size())) * dp;
            slots[t.negative].dphi += (s.contrastive_weight / static_cast<double>(triples.size())) * dn;
        }

        const double mse_mean = mse_sum / static_cast<double>(batch.size());
        const double con_mean = triples.empty() ? 0.0 : con_sum / static_cast<double>(triples.size());
        const double loss = s.mse_weight * mse_mean + s.contrastive_weight * con_mean +
                            (s.duldpp_full_vae ? elbo_sum / static_cast<double>(batch.size()) : 0.0);

        const double w_mse = s.mse_weight / static_cast<double>(batch.size());
        for (std::size_t b = 0; b < batch.size(); ++b) {
            Slot& slot = slots[b];
            if (!slot.dphi.isZero(0.0)) {
                // Latent loss reaches the encoder only; gradients stop at the
                // detector heatmap.
                const Vec dmu = slot.dphi;
                const Vec dlogvar = (slot.dphi.array() * slot.code.epsilon.array() * 0.5 *
                                     (0.5 * slot.code.logvar.array()).exp())
                                        .matrix();
                model.vae.encoder.backward(dmu, dlogvar, slot.enc_ctx);
            }
            const Mat dfeat = model.detector.backward(w_mse * slot.dh_col, slot.det_ctx);
            model.aggregator.backward(dfeat, slot.agg_ctx);
        }

        if (!std::isfinite(loss)) {
            model.aggregator.params().values() = snap_agg;
            model.detector.params().values() = snap_det;
            model.vae.encoder.params().values() = snap_enc;
            model.vae.decoder.params().values() = snap_dec;
            res.aborted_nan = true;
            res.aborted_at = it;
            break;
        }
        snap_agg = model.aggregator.params().values();
        snap_det = model.detector.params().values();
        snap_enc = model.vae.encoder.params().values();
        snap_dec = model.vae.decoder.params().values();

        adam.step();
        res.losses.push_back(loss);
        if (report) {
            report->add(it, "duldpp", "heatmap_mse", mse_mean);
            report->add(it, "duldpp", "latent_contrastive", con_mean);
            if (s.duldpp_full_vae)
                report->add(it, "duldpp", "elbo", elbo_sum / static_cast<double>(batch.size()));
        }
    }

    require(model.descriptor.params().checksum() == desc_checksum_before,
            "train_duldpp: descriptor head must stay frozen");
    res.training_set = std::move(set);
    return res;
}

}  // namespace uld
