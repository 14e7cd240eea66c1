#include "uld/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace uld {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

PipelineConfig PipelineConfig::defaults(const std::string& profile) {
    PipelineConfig cfg;
    cfg.profile = profile;
    cfg.dataset.format = "synthetic";

    if (profile == "desk") {
        cfg.keypoint_clusters = 6;
        cfg.pose_clusters = 2;
        cfg.model.oracle = {6, 10, 64, 2, 2, 0.05, 3};
        cfg.model.aggregator_channels = 10;
        cfg.model.head_hidden1 = 10;
        cfg.model.head_hidden2 = 10;
        cfg.model.descriptor_dim = 10;
        cfg.model.vae = {64, 64, 6};

        cfg.bootstrap.iterations = 300;
        cfg.bootstrap.batch_size = 4;
        cfg.bootstrap.lr = 1e-4;

        cfg.duld.total_iterations = 2000;
        cfg.duld.recluster_every = 200;
        cfg.duld.learning_rate = 1e-4;
        cfg.duld.batch_size = 4;

        cfg.proxy.total_iterations = 500;
        cfg.proxy.recluster_every = 200;  // checkpoint cadence; the proxy never re-clusters
        cfg.proxy.learning_rate = 5e-5;
        cfg.proxy.batch_size = 8;

        cfg.duldpp.total_iterations = 2000;
        cfg.duldpp.recluster_every = 200;
        cfg.duldpp.learning_rate = 5e-4;
        cfg.duldpp.batch_size = 6;

        cfg.eval.consistency_images = 20;
    } else if (profile == "paper") {
        cfg.keypoint_clusters = 10;
        cfg.pose_clusters = 5;
        cfg.model.oracle = {10, 16, 64, 2, 2, 0.05, 3};
        cfg.model.aggregator_channels = 16;
        cfg.model.head_hidden1 = 16;
        cfg.model.head_hidden2 = 16;
        cfg.model.descriptor_dim = 16;
        cfg.model.vae = {64, 64, 8};

        cfg.bootstrap.iterations = 50000;
        cfg.bootstrap.batch_size = 12;
        cfg.bootstrap.lr = 1e-4;

        cfg.duld.total_iterations = 100000;
        cfg.duld.recluster_every = 5000;
        cfg.duld.learning_rate = 1e-4;
        cfg.duld.batch_size = 12;

        cfg.proxy.total_iterations = 50000;
        cfg.proxy.recluster_every = 5000;
        cfg.proxy.learning_rate = 5e-5;
        cfg.proxy.batch_size = 12;

        cfg.duldpp.total_iterations = 100000;
        cfg.duldpp.recluster_every = 5000;
        cfg.duldpp.learning_rate = 5e-4;
        cfg.duldpp.batch_size = 12;
    } else {
        throw std::invalid_argument("PipelineConfig: unknown profile '" + profile + "'");
    }

    for (Schedule* s : {&cfg.duld, &cfg.proxy, &cfg.duldpp}) {
        s->margin = 0.8;
        s->beta1 = 0.9;
        s->beta2 = 0.999;
        s->keypoint_clusters = cfg.keypoint_clusters;
        s->pose_clusters = cfg.pose_clusters;
        s->extraction.max_keypoints = 3 * cfg.keypoint_clusters;
    }
    cfg.duld.seed = 11;
    cfg.proxy.seed = 12;
    cfg.duldpp.seed = 13;
    cfg.bootstrap.extraction.max_keypoints = 3 * cfg.keypoint_clusters;
    return cfg;
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

json schedule_to_json(const Schedule& s) {
    return json{{"iterations", s.total_iterations},
                {"recluster_every", s.recluster_every},
                {"lr", s.learning_rate},
                {"beta1", s.beta1},
                {"beta2", s.beta2},
                {"batch_size", s.batch_size},
                {"margin", s.margin},
                {"contrastive_triples", s.contrastive_triples},
                {"heatmap_sigma", s.heatmap_sigma},
                {"mse_weight", s.mse_weight},
                {"contrastive_weight", s.contrastive_weight},
                {"elbo_beta", s.elbo_beta},
                {"full_vae", s.duldpp_full_vae},
                {"nms_window", s.extraction.nms_window},
                {"nms_threshold", s.extraction.nms_threshold},
                {"max_keypoints", s.extraction.max_keypoints},
                {"seed", s.seed}};
}

void schedule_from_json(const json& j, Schedule& s) {
    maybe(j, "iterations", s.total_iterations);
    maybe(j, "recluster_every", s.recluster_every);
    maybe(j, "lr", s.learning_rate);
    maybe(j, "beta1", s.beta1);
    maybe(j, "beta2", s.beta2);
    maybe(j, "batch_size", s.batch_size);
    maybe(j, "margin", s.margin);
    maybe(j, "contrastive_triples", s.contrastive_triples);
    maybe(j, "heatmap_sigma", s.heatmap_sigma);
    maybe(j, "mse_weight", s.mse_weight);
    maybe(j, "contrastive_weight", s.contrastive_weight);
    maybe(j, "elbo_beta", s.elbo_beta);
    maybe(j, "full_vae", s.duldpp_full_vae);
    maybe(j, "nms_window", s.extraction.nms_window);
    maybe(j, "nms_threshold", s.extraction.nms_threshold);
    maybe(j, "max_keypoints", s.extraction.max_keypoints);
    maybe(j, "seed", s.seed);
}

json config_to_json(const PipelineConfig& c) {
    json j;
    j["profile"] = c.profile;
    j["seed"] = c.seed;
    j["run_root"] = c.run_root;
    j["run_id"] = c.run_id;
    j["dataset"] = {{"root", c.dataset.root},
                    {"format", c.dataset.format},
                    {"train_fraction", c.dataset.train_fraction}};
    j["model"] = {{"backbone_kind", c.model.backbone_kind},
                  {"oracle",
                   {{"n_identities", c.model.oracle.n_identities},
                    {"descriptor_dim", c.model.oracle.descriptor_dim},
                    {"image_size", c.model.oracle.image_size},
                    {"layers", c.model.oracle.layers},
                    {"timesteps", c.model.oracle.timesteps},
                    {"noise_sigma", c.model.oracle.noise_sigma},
                    {"seed", c.model.oracle.seed}}},
                  {"aggregator",
                   {{"channels", c.model.aggregator_channels},
                    {"activation", c.model.aggregator_activation},
                    {"init", c.model.aggregator_init}}},
                  {"heads",
                   {{"hidden1", c.model.head_hidden1},
                    {"hidden2", c.model.head_hidden2},
                    {"descriptor_dim", c.model.descriptor_dim}}},
                  {"vae",
                   {{"input_size", c.model.vae.input_size},
                    {"latent_dim", c.model.vae.latent_dim},
                    {"channels", c.model.vae.channels}}},
                  {"init_seed", c.model.init_seed}};
    j["clusters"] = {{"k", c.keypoint_clusters}, {"q", c.pose_clusters}};
    j["zeroshot"] = {{"pixels_per_image", c.zeroshot.pixels_per_image},
                     {"roi_provider", c.zeroshot.roi_provider}};
    j["bootstrap"] = {{"iterations", c.bootstrap.iterations},
                      {"batch_size", c.bootstrap.batch_size},
                      {"lr", c.bootstrap.lr},
                      {"beta1", c.bootstrap.beta1},
                      {"beta2", c.bootstrap.beta2},
                      {"max_rotation_deg", c.bootstrap.augment.max_rotation_deg},
                      {"flip_probability", c.bootstrap.augment.flip_probability},
                      {"temperature", c.bootstrap.temperature},
                      {"nll_samples", c.bootstrap.nll_samples},
                      {"bce_grid_stride", c.bootstrap.bce_grid_stride},
                      {"bce_match_radius", c.bootstrap.bce_match_radius},
                      {"detector_loss_weight", c.bootstrap.detector_loss_weight},
                      {"descriptor_loss_weight", c.bootstrap.descriptor_loss_weight},
                      {"nms_window", c.bootstrap.extraction.nms_window},
                      {"nms_threshold", c.bootstrap.extraction.nms_threshold},
                      {"max_keypoints", c.bootstrap.extraction.max_keypoints},
                      {"seed", c.bootstrap.seed}};
    j["duld"] = schedule_to_json(c.duld);
    j["proxy"] = schedule_to_json(c.proxy);
    j["duldpp"] = schedule_to_json(c.duldpp);
    j["eval"] = {{"regressor_subset", c.eval.regressor_subset},
                 {"hungarian_threshold", c.eval.hungarian_threshold},
                 {"ced_max", c.eval.ced_max},
                 {"ced_points", c.eval.ced_points},
                 {"yaw_edges", c.eval.yaw_edges},
                 {"yaw_binning", c.eval.yaw_binning},
                 {"normalizer", c.eval.normalizer},
                 {"consistency_images", c.eval.consistency_images},
                 {"consistency_rotation_deg", c.eval.consistency_rotation_deg},
                 {"consistency_flip_probability", c.eval.consistency_flip_probability}};
    return j;
}

}  // namespace

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("PipelineConfig: invalid JSON: ") + e.what());
    }
    PipelineConfig c = defaults(j.value("profile", "desk"));
    maybe(j, "seed", c.seed);
    maybe(j, "run_root", c.run_root);
    maybe(j, "run_id", c.run_id);
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        maybe(d, "root", c.dataset.root);
        maybe(d, "format", c.dataset.format);
        maybe(d, "train_fraction", c.dataset.train_fraction);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        maybe(m, "backbone_kind", c.model.backbone_kind);
        if (m.contains("oracle")) {
            const json& o = m.at("oracle");
            maybe(o, "n_identities", c.model.oracle.n_identities);
            maybe(o, "descriptor_dim", c.model.oracle.descriptor_dim);
            maybe(o, "image_size", c.model.oracle.image_size);
            maybe(o, "layers", c.model.oracle.layers);
            maybe(o, "timesteps", c.model.oracle.timesteps);
            maybe(o, "noise_sigma", c.model.oracle.noise_sigma);
            maybe(o, "seed", c.model.oracle.seed);
        }
        if (m.contains("aggregator")) {
            const json& a = m.at("aggregator");
            maybe(a, "channels", c.model.aggregator_channels);
            maybe(a, "activation", c.model.aggregator_activation);
            maybe(a, "init", c.model.aggregator_init);
        }
        if (m.contains("heads")) {
            const json& h = m.at("heads");
            maybe(h, "hidden1", c.model.head_hidden1);
            maybe(h, "hidden2", c.model.head_hidden2);
            maybe(h, "descriptor_dim", c.model.descriptor_dim);
        }
        if (m.contains("vae")) {
            const json& v = m.at("vae");
            maybe(v, "input_size", c.model.vae.input_size);
            maybe(v, "latent_dim", c.model.vae.latent_dim);
            maybe(v, "channels", c.model.vae.channels);
        }
        maybe(m, "init_seed", c.model.init_seed);
    }
    if (j.contains("clusters")) {
        maybe(j.at("clusters"), "k", c.keypoint_clusters);
        maybe(j.at("clusters"), "q", c.pose_clusters);
        for (Schedule* s : {&c.duld, &c.proxy, &c.duldpp}) {
            s->keypoint_clusters = c.keypoint_clusters;
            s->pose_clusters = c.pose_clusters;
            s->extraction.max_keypoints = 3 * c.keypoint_clusters;
        }
        c.bootstrap.extraction.max_keypoints = 3 * c.keypoint_clusters;
    }
    if (j.contains("zeroshot")) {
        maybe(j.at("zeroshot"), "pixels_per_image", c.zeroshot.pixels_per_image);
        maybe(j.at("zeroshot"), "roi_provider", c.zeroshot.roi_provider);
    }
    if (j.contains("bootstrap")) {
        const json& b = j.at("bootstrap");
        maybe(b, "iterations", c.bootstrap.iterations);
        maybe(b, "batch_size", c.bootstrap.batch_size);
        maybe(b, "lr", c.bootstrap.lr);
        maybe(b, "beta1", c.bootstrap.beta1);
        maybe(b, "beta2", c.bootstrap.beta2);
        maybe(b, "max_rotation_deg", c.bootstrap.augment.max_rotation_deg);
        maybe(b, "flip_probability", c.bootstrap.augment.flip_probability);
        maybe(b, "temperature", c.bootstrap.temperature);
        maybe(b, "nll_samples", c.bootstrap.nll_samples);
        maybe(b, "bce_grid_stride", c.bootstrap.bce_grid_stride);
        maybe(b, "bce_match_radius", c.bootstrap.bce_match_radius);
        maybe(b, "detector_loss_weight", c.bootstrap.detector_loss_weight);
        maybe(b, "descriptor_loss_weight", c.bootstrap.descriptor_loss_weight);
        maybe(b, "nms_window", c.bootstrap.extraction.nms_window);
        maybe(b, "nms_threshold", c.bootstrap.extraction.nms_threshold);
        maybe(b, "max_keypoints", c.bootstrap.extraction.max_keypoints);
        maybe(b, "seed", c.bootstrap.seed);
    }
    if (j.contains("duld")) schedule_from_json(j.at("duld"), c.duld);
    if (j.contains("proxy")) schedule_from_json(j.at("proxy"), c.proxy);
    if (j.contains("duldpp")) schedule_from_json(j.at("duldpp"), c.duldpp);
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        maybe(e, "regressor_subset", c.eval.regressor_subset);
        maybe(e, "hungarian_threshold", c.eval.hungarian_threshold);
        maybe(e, "ced_max", c.eval.ced_max);
        maybe(e, "ced_points", c.eval.ced_points);
        maybe(e, "yaw_edges", c.eval.yaw_edges);
        maybe(e, "yaw_binning", c.eval.yaw_binning);
        maybe(e, "normalizer", c.eval.normalizer);
        maybe(e, "consistency_images", c.eval.consistency_images);
        maybe(e, "consistency_rotation_deg", c.eval.consistency_rotation_deg);
        maybe(e, "consistency_flip_probability", c.eval.consistency_flip_probability);
    }
    return c;
}

PipelineConfig PipelineConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("PipelineConfig: cannot open '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string PipelineConfig::canonical_json() const { return config_to_json(*this).dump(2); }

std::uint64_t PipelineConfig::config_hash() const { return fnv1a(canonical_json()); }

void PipelineConfig::save_json(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("PipelineConfig: cannot write '" + path + "'");
    out << canonical_json() << "\n";
}

std::string run_directory(const PipelineConfig& cfg) {
    const char* env = std::getenv("ULD_RUN_ROOT");
    const std::string root = env && *env ? env : cfg.run_root;
    return (fs::path(root) / cfg.run_id).string();
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

LoadedDataset load_dataset(const PipelineConfig& cfg) {
    require(!cfg.dataset.root.empty(), "load_dataset: dataset.root is not configured");
    LoadedDataset data;
    data.manifest = ingest_dataset(cfg.dataset.root, cfg.dataset.format);
    require(!data.manifest.entries.empty(), "load_dataset: manifest holds no usable entries");
    data.images.reserve(data.manifest.entries.size());
    for (const auto& entry : data.manifest.entries) data.images.push_back(load_image(cfg.dataset.root, entry));

    const int n = static_cast<int>(data.images.size());
    int n_train = static_cast<int>(std::lround(cfg.dataset.train_fraction * n));
    n_train = std::clamp(n_train, 1, n - 1 > 0 ? n - 1 : 1);
    for (int i = 0; i < n; ++i)
        (i < n_train ? data.train_indices : data.test_indices).push_back(i);
    if (data.test_indices.empty()) data.test_indices = data.train_indices;
    return data;
}

std::vector<Image> LoadedDataset::train_images() const {
    std::vector<Image> out;
    out.reserve(train_indices.size());
    for (int i : train_indices) out.push_back(images[static_cast<std::size_t>(i)]);
    return out;
}

std::vector<Image> LoadedDataset::test_images() const {
    std::vector<Image> out;
    out.reserve(test_indices.size());
    for (int i : test_indices) out.push_back(images[static_cast<std::size_t>(i)]);
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'U', 'L', 'D', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

void put_string(std::ostream& out, const std::string& s) {
    const std::uint32_t n = static_cast<std::uint32_t>(s.size());
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(s.data(), n);
}

std::string get_string(std::istream& in) {
    std::uint32_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    std::string s(n, '\0');
    in.read(s.data(), n);
    return s;
}

void put_params(std::ostream& out, const Vec& v) {
    const std::uint64_t n = static_cast<std::uint64_t>(v.size());
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}

void get_params(std::istream& in, Vec& v) {
    std::uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    if (static_cast<long>(n) != v.size())
        throw std::runtime_error("checkpoint: parameter block size mismatch (expected " +
                                 std::to_string(v.size()) + ", found " + std::to_string(n) + ")");
    in.read(reinterpret_cast<char*>(v.data()), sizeof(double) * static_cast<std::streamsize>(n));
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const std::string& stage,
                     long iteration, std::uint64_t config_hash, const nn::Adam* adam) {
    std::ostringstream body;
    body.write(kCkptMagic, 4);
    body.write(reinterpret_cast<const char*>(&kCkptVersion), sizeof(kCkptVersion));
    body.write(reinterpret_cast<const char*>(&config_hash), sizeof(config_hash));
    put_string(body, stage);
    const std::int64_t it = iteration;
    body.write(reinterpret_cast<const char*>(&it), sizeof(it));
    put_params(body, model.aggregator.params().values());
    put_params(body, model.detector.params().values());
    put_params(body, model.descriptor.params().values());
    put_params(body, model.vae.encoder.params().values());
    put_params(body, model.vae.decoder.params().values());
    const std::uint8_t has_adam = adam ? 1 : 0;
    body.write(reinterpret_cast<const char*>(&has_adam), sizeof(has_adam));
    if (adam) adam->save(body);

    const std::string payload = body.str();
    const std::uint64_t checksum = fnv1a(payload.data(), payload.size());
    fs::create_directories(fs::path(path).parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

CheckpointInfo load_checkpoint(const std::string& path, Model& model, std::uint64_t config_hash,
                               bool force, nn::Adam* adam) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open '" + path + "'");
    std::stringstream buffer;
    buffer << in.rdbuf();
    std::string all = buffer.str();
    if (all.size() < 8 + 4) throw std::runtime_error("load_checkpoint: truncated file '" + path + "'");

    const std::uint64_t stored_checksum =
        *reinterpret_cast<const std::uint64_t*>(all.data() + all.size() - 8);
    all.resize(all.size() - 8);
    if (fnv1a(all.data(), all.size()) != stored_checksum)
        throw std::runtime_error("load_checkpoint: checksum failure, '" + path + "' is corrupt");

    std::istringstream body(all);
    char magic[4];
    body.read(magic, 4);
    if (std::memcmp(magic, kCkptMagic, 4) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in '" + path + "'");
    std::uint32_t version = 0;
    body.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != kCkptVersion)
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    std::uint64_t stored_hash = 0;
    body.read(reinterpret_cast<char*>(&stored_hash), sizeof(stored_hash));
    if (stored_hash != config_hash && !force)
        throw std::runtime_error(
            "load_checkpoint: config hash mismatch for '" + path +
            "' (checkpoint was produced by a different configuration); pass force to override");

    CheckpointInfo info;
    info.stage = get_string(body);
    std::int64_t it = 0;
    body.read(reinterpret_cast<char*>(&it), sizeof(it));
    info.iteration = static_cast<long>(it);
    get_params(body, model.aggregator.params().values());
    get_params(body, model.detector.params().values());
    get_params(body, model.descriptor.params().values());
    get_params(body, model.vae.encoder.params().values());
    get_params(body, model.vae.decoder.params().values());
    std::uint8_t has_adam = 0;
    body.read(reinterpret_cast<char*>(&has_adam), sizeof(has_adam));
    if (has_adam && adam) adam->load(body);
    return info;
}

// ---------------------------------------------------------------------------
// Shared evaluation plumbing
// ---------------------------------------------------------------------------

namespace {

Vec make_normalizers(const std::vector<const ManifestEntry*>& entries, const EvalOptions& opt,
                     int canvas_w, int canvas_h) {
    Vec norm(static_cast<long>(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (opt.normalizer == "canvas_diagonal") {
            norm(static_cast<long>(i)) = std::hypot(canvas_w, canvas_h);
        } else if (opt.normalizer == "d_iod") {
            require(entries[i]->d_iod.has_value(), "evaluate: normalizer 'd_iod' needs d_iod annotations");
            norm(static_cast<long>(i)) = *entries[i]->d_iod;
        } else if (opt.normalizer == "gt_bbox_diagonal") {
            norm(static_cast<long>(i)) = gt_bbox_diagonal(*entries[i]);
        } else {
            throw std::invalid_argument("evaluate: unknown normalizer '" + opt.normalizer + "'");
        }
    }
    return norm;
}

Mat flatten_rows(const std::vector<Mat>& per_image) {
    require(!per_image.empty(), "evaluate: no images");
    const long k = per_image.front().rows();
    Mat out(static_cast<long>(per_image.size()), 2 * k);
    for (std::size_t i = 0; i < per_image.size(); ++i) {
        for (long r = 0; r < k; ++r) {
            out(static_cast<long>(i), 2 * r) = per_image[i](r, 0);
            out(static_cast<long>(i), 2 * r + 1) = per_image[i](r, 1);
        }
    }
    return out;
}

int yaw_index_for(double yaw, const EvalOptions& opt) {
    if (opt.yaw_binning == "absolute") {
        std::vector<double> edges = opt.yaw_edges;
        return yaw_range_index(std::abs(yaw), edges);
    }
    return yaw_range_index(yaw, opt.yaw_edges);
}

// Canonical stage-2 slot order: clusters of every pose group are matched to
// the reference pose's centroids so slot k means the same landmark role
// across poses.
std::vector<std::vector<int>> stage2_slot_alignment(const PseudoLabeler& labeler) {
    std::vector<std::vector<int>> align(labeler.keypoint_models.size());
    if (!labeler.two_stage) {
        for (std::size_t q = 0; q < labeler.keypoint_models.size(); ++q) {
            align[q].resize(static_cast<std::size_t>(labeler.keypoint_models[q].k()));
            for (int k = 0; k < labeler.keypoint_models[q].k(); ++k) align[q][static_cast<std::size_t>(k)] = k;
        }
        return align;
    }
    int ref = 0;
    for (std::size_t q = 0; q < labeler.keypoint_models.size(); ++q)
        if (labeler.keypoint_models[q].k() > labeler.keypoint_models[static_cast<std::size_t>(ref)].k())
            ref = static_cast<int>(q);
    const Mat& ref_centroids = labeler.keypoint_models[static_cast<std::size_t>(ref)].centroids;
    for (std::size_t q = 0; q < labeler.keypoint_models.size(); ++q) {
        const Mat& c = labeler.keypoint_models[q].centroids;
        align[q].resize(static_cast<std::size_t>(c.rows()));
        if (c.rows() == 0) continue;
        if (static_cast<int>(q) == ref) {
            for (long k = 0; k < c.rows(); ++k) align[q][static_cast<std::size_t>(k)] = static_cast<int>(k);
            continue;
        }
        Mat cost(c.rows(), ref_centroids.rows());
        for (long a = 0; a < c.rows(); ++a)
            for (long b = 0; b < ref_centroids.rows(); ++b)
                cost(a, b) = (c.row(a) - ref_centroids.row(b)).norm();
        const HungarianResult match = hungarian(cost);
        for (long a = 0; a < c.rows(); ++a)
            align[q][static_cast<std::size_t>(a)] = match.assignment[static_cast<std::size_t>(a)];
    }
    return align;
}

struct SlotLandmarks {
    Mat points;                // K x 2, missing slots filled with a fallback
    std::vector<bool> filled;  // per slot
    int missing = 0;
};

SlotLandmarks slots_from_labeled(const std::vector<LabeledKeypoint>& kept,
                                 const std::vector<int>& slot_of_label, int n_slots, int canvas_w,
                                 int canvas_h) {
    SlotLandmarks out;
    out.points = Mat::Zero(n_slots, 2);
    out.filled.assign(static_cast<std::size_t>(n_slots), false);
    double mx = 0, my = 0;
    int n = 0;
    for (const auto& kp : kept) {
        const int slot = slot_of_label[static_cast<std::size_t>(kp.label)];
        out.points(slot, 0) = kp.p.x;
        out.points(slot, 1) = kp.p.y;
        out.filled[static_cast<std::size_t>(slot)] = true;
        mx += kp.p.x;
        my += kp.p.y;
        ++n;
    }
    const double fx = n > 0 ? mx / n : 0.5 * canvas_w;
    const double fy = n > 0 ? my / n : 0.5 * canvas_h;
    for (int s = 0; s < n_slots; ++s) {
        if (out.filled[static_cast<std::size_t>(s)]) continue;
        out.points(s, 0) = fx;
        out.points(s, 1) = fy;
        ++out.missing;
    }
    return out;
}

struct LandmarkEvalCore {
    double forward_nme = 0.0;
    double backward_nme = 0.0;
    CedCurve ced_forward, ced_backward;
};

// Regression + NME + CED + Hungarian + cluster quality + yaw bins, shared by
// the zero-shot path and the trained-model path.
LandmarkEvalCore landmark_eval(const std::vector<Mat>& pred_slots,
                               const std::vector<const ManifestEntry*>& entries, const Mat& pooled_desc,
                               const std::vector<int>& pooled_labels, int missing_slots,
                               const PipelineConfig& cfg, int canvas_w, int canvas_h, EvalReport& report) {
    LandmarkEvalCore core;
    const long m = static_cast<long>(pred_slots.size());
    const Mat pred = flatten_rows(pred_slots);

    std::vector<Mat> gt_slots;
    gt_slots.reserve(entries.size());
    for (const auto* e : entries) gt_slots.push_back(e->landmarks);
    const Mat gt = flatten_rows(gt_slots);
    const Vec normalizers = make_normalizers(entries, cfg.eval, canvas_w, canvas_h);

    const int subset = static_cast<int>(std::min<long>(cfg.eval.regressor_subset, m));
    const Regressor fwd =
        fit_regressor(pred, gt, subset, RegressionDirection::forward, mix_seed(cfg.seed, 0xF17));
    const Regressor bwd =
        fit_regressor(pred, gt, subset, RegressionDirection::backward, mix_seed(cfg.seed, 0xF18));

    const Vec fwd_errors = nme_per_image(apply_regressor(fwd, pred), gt, normalizers);
    const Vec bwd_errors = nme_per_image(apply_regressor(bwd, gt), pred, normalizers);
    core.forward_nme = fwd_errors.mean();
    core.backward_nme = bwd_errors.mean();

    Vec thresholds(cfg.eval.ced_points);
    for (int i = 0; i < cfg.eval.ced_points; ++i)
        thresholds(i) = cfg.eval.ced_max * i / (cfg.eval.ced_points - 1.0);
    core.ced_forward = ced(fwd_errors, thresholds);
    core.ced_backward = ced(bwd_errors, thresholds);

    report.set("images_evaluated", static_cast<double>(m));
    report.set("forward_nme_pct", core.forward_nme);
    report.set("backward_nme_pct", core.backward_nme);
    report.set("forward_ced_auc", core.ced_forward.auc);
    report.set("backward_ced_auc", core.ced_backward.auc);
    report.set("regressor_subset", subset);
    report.set("regressor_ridge_fallback", (fwd.ridge_fallback || bwd.ridge_fallback) ? 1.0 : 0.0);
    report.set("missing_slots", missing_slots);

    const long n_gt = gt_slots.front().rows();
    const long k_slots = pred_slots.front().rows();
    if (k_slots <= n_gt) {
        const HungarianAccuracy acc =
            hungarian_accuracy(pred_slots, gt_slots, normalizers, cfg.eval.hungarian_threshold);
        report.set("hungarian_mean_matched_pct", 100.0 * acc.mean_matched);
        for (long b = 0; b < n_gt; ++b) {
            char key[48];
            std::snprintf(key, sizeof(key), "hungarian_acc_gt%02ld_pct", b);
            const double v = acc.accuracy[static_cast<std::size_t>(b)];
            report.set(key, std::isnan(v) ? std::string("unmatched") : format_double(100.0 * v));
        }
    }

    // Cluster quality over the pooled assigned descriptors.
    {
        int distinct = 0;
        std::vector<int> seen;
        for (int l : pooled_labels)
            if (std::find(seen.begin(), seen.end(), l) == seen.end()) {
                seen.push_back(l);
                ++distinct;
            }
        if (pooled_desc.rows() >= 2 && distinct >= 2) {
            const ClusterQuality q = cluster_quality(pooled_desc, pooled_labels);
            report.set("silhouette", q.silhouette);
            report.set("calinski_harabasz", q.calinski_harabasz);
        }
    }

    // Yaw-binned forward NME.
    bool all_yaw = true;
    for (const auto* e : entries)
        if (!e->yaw) all_yaw = false;
    if (all_yaw) {
        Vec yaw(m);
        for (long i = 0; i < m; ++i) yaw(i) = *entries[static_cast<std::size_t>(i)]->yaw;
        if (cfg.eval.yaw_binning == "absolute") yaw = yaw.cwiseAbs();
        const auto bins = yaw_binned_nme(fwd_errors, yaw, cfg.eval.yaw_edges);
        for (std::size_t b = 0; b < bins.size(); ++b) {
            char key[48];
            std::snprintf(key, sizeof(key), "yaw_bin%zu", b);
            report.set(std::string(key) + "_range",
                       "[" + format_double(bins[b].lo) + "," + format_double(bins[b].hi) +
                           (b + 1 == bins.size() ? "]" : ")"));
            report.set(std::string(key) + "_count", bins[b].count);
            report.set(std::string(key) + "_fwd_nme_pct",
                       bins[b].nme ? format_double(*bins[b].nme) : std::string("absent"));
        }
    }
    return core;
}

}  // namespace

// ---------------------------------------------------------------------------
// ZeroShot
// ---------------------------------------------------------------------------

namespace {

RoI roi_for_entry(const ManifestEntry& entry, const ZeroshotOptions& opt, int canvas_w, int canvas_h) {
    if (opt.roi_provider == "gt_box" && entry.box) return entry.box->clamped(canvas_w, canvas_h);
    if (opt.roi_provider != "gt_box" && opt.roi_provider != "full_image")
        throw std::invalid_argument("zeroshot: unknown roi provider '" + opt.roi_provider + "'");
    return RoI{0.0, 0.0, canvas_w - 1.0, canvas_h - 1.0};
}

int true_identity(const ManifestEntry& entry, double x, double y) {
    if (!entry.scene) return -1;
    const SyntheticScene& scene = *entry.scene;
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int k = 0; k < scene.n_landmarks(); ++k) {
        if (!scene.visible[static_cast<std::size_t>(k)]) continue;
        const double d = (scene.landmarks[static_cast<std::size_t>(k)] - Eigen::Vector2d(x, y)).norm();
        if (d < best_d) {
            best_d = d;
            best = k;
        }
    }
    return best;
}

}  // namespace

ZeroshotResult run_zeroshot(const PipelineConfig& cfg, const LoadedDataset& data) {
    const Model model(cfg.model);
    const int size = model.image_size();
    const int n_pix = cfg.zeroshot.pixels_per_image;

    // Training split: sample pixels, collect normalized aggregated
    // descriptors, remember true identities when scenes are available.
    std::vector<Vec> descriptors;
    std::vector<int> true_ids;
    for (int idx : data.train_indices) {
        const auto& entry = data.manifest.entries[static_cast<std::size_t>(idx)];
        const FeatureMap fmap = model.features(data.images[static_cast<std::size_t>(idx)]);
        const RoI roi = roi_for_entry(entry, cfg.zeroshot, size, size);
        const auto pixels =
            sample_roi_pixels(roi, n_pix, mix_seed(cfg.seed, static_cast<std::uint64_t>(idx), 0x2e20));
        for (const auto& [x, y] : pixels) {
            descriptors.push_back(nn::l2_normalize(fmap.values.row(fmap.index(x, y)).transpose()));
            true_ids.push_back(true_identity(entry, x, y));
        }
    }
    Mat pool(static_cast<long>(descriptors.size()), descriptors.front().size());
    for (std::size_t i = 0; i < descriptors.size(); ++i) pool.row(static_cast<long>(i)) = descriptors[i].transpose();

    const KMeansResult km = kmeans(pool, cfg.keypoint_clusters, mix_seed(cfg.seed, 0x2e21));

    ZeroshotResult result;
    result.cluster_model = km.model;
    bool any_identity = false;
    for (int id : true_ids)
        if (id >= 0) any_identity = true;
    if (any_identity) result.purity = cluster_purity(km.labels, true_ids);

    // Test split: sample, assign to the retained centroids, exemplar-assign.
    std::vector<Mat> pred_slots;
    std::vector<const ManifestEntry*> entries;
    Mat pooled_desc(0, pool.cols());
    std::vector<int> pooled_labels;
    int missing_slots = 0;
    std::vector<long> pooled_rows;
    for (int idx : data.test_indices) {
        const auto& entry = data.manifest.entries[static_cast<std::size_t>(idx)];
        const FeatureMap fmap = model.features(data.images[static_cast<std::size_t>(idx)]);
        const RoI roi = roi_for_entry(entry, cfg.zeroshot, size, size);
        const auto pixels =
            sample_roi_pixels(roi, n_pix, mix_seed(cfg.seed, static_cast<std::uint64_t>(idx), 0x2e22));
        std::vector<Keypoint> kps;
        Mat desc(static_cast<long>(pixels.size()), pool.cols());
        for (std::size_t i = 0; i < pixels.size(); ++i) {
            kps.push_back({static_cast<double>(pixels[i].first), static_cast<double>(pixels[i].second), 1.0});
            desc.row(static_cast<long>(i)) =
                nn::l2_normalize(fmap.values.row(fmap.index(pixels[i].first, pixels[i].second)).transpose())
                    .transpose();
        }
        const Assignment a = assign(desc, km.model);
        const auto kept = exemplar_assign(kps, desc, a.labels, km.model);

        std::vector<int> ident(static_cast<std::size_t>(cfg.keypoint_clusters));
        for (int s = 0; s < cfg.keypoint_clusters; ++s) ident[static_cast<std::size_t>(s)] = s;
        const SlotLandmarks slots = slots_from_labeled(kept, ident, cfg.keypoint_clusters, size, size);
        missing_slots += slots.missing;
        pred_slots.push_back(slots.points);
        entries.push_back(&entry);
        const long base = pooled_desc.rows();
        pooled_desc.conservativeResize(base + desc.rows(), Eigen::NoChange);
        for (long i = 0; i < desc.rows(); ++i) {
            pooled_desc.row(base + i) = desc.row(i);
            pooled_labels.push_back(a.labels[static_cast<std::size_t>(i)]);
        }
        result.test_landmarks.push_back(slots.points);
    }

    result.report.set("stage", std::string("zeroshot"));
    if (any_identity) result.report.set("purity_pct", 100.0 * result.purity);
    const LandmarkEvalCore core = landmark_eval(pred_slots, entries, pooled_desc, pooled_labels,
                                                missing_slots, cfg, size, size, result.report);
    result.ced_forward = core.ced_forward;
    result.ced_backward = core.ced_backward;
    return result;
}

// ---------------------------------------------------------------------------
// Stage evaluation
// ---------------------------------------------------------------------------

StageEvaluation evaluate_stage(const std::string& stage, const Model& model, const PseudoLabeler& labeler,
                               const LoadedDataset& data, const PipelineConfig& cfg) {
    require(!labeler.keypoint_models.empty(), "evaluate_stage: labeler has no cluster models");
    const int size = model.image_size();
    const int n_slots = labeler.nominal_k;
    const auto align = stage2_slot_alignment(labeler);

    ExtractionOptions opts = cfg.duld.extraction;

    // Labeled landmark extraction in canonical slot space, shared by the
    // metric path and the consistency probe.
    const auto extract_slots = [&](const Image& image) -> LabeledLandmarks {
        const ImageExtraction ex = extract_keypoints(model, image, opts, labeler.two_stage);
        LabeledLandmarks out;
        if (ex.keypoints.empty()) return out;
        int pose = 0;
        if (labeler.two_stage) pose = assign(ex.latent.transpose(), labeler.pose_model).labels[0];
        const ClusterModel& m = labeler.keypoint_models[static_cast<std::size_t>(pose)];
        if (m.k() == 0) return out;
        const Assignment a = assign(ex.descriptors, m);
        for (const auto& kp : exemplar_assign(ex.keypoints, ex.descriptors, a.labels, m)) {
            out.points.push_back(kp.p);
            out.labels.push_back(align[static_cast<std::size_t>(pose)][static_cast<std::size_t>(kp.label)]);
        }
        return out;
    };

    std::vector<Mat> pred_slots;
    std::vector<const ManifestEntry*> entries;
    Mat pooled_desc(0, model.config().descriptor_dim);
    std::vector<int> pooled_labels;
    std::vector<int> pose_labels;
    int missing_slots = 0;

    for (int idx : data.test_indices) {
        const auto& entry = data.manifest.entries[static_cast<std::size_t>(idx)];
        const Image& image = data.images[static_cast<std::size_t>(idx)];
        const ImageExtraction ex = extract_keypoints(model, image, opts, labeler.two_stage);

        int pose = 0;
        std::vector<LabeledKeypoint> kept;
        std::vector<int> slot_labels;
        if (!ex.keypoints.empty()) {
            if (labeler.two_stage) {
                Mat latent_row = ex.latent.transpose();
                pose = assign(latent_row, labeler.pose_model).labels[0];
            }
            const ClusterModel& m = labeler.keypoint_models[static_cast<std::size_t>(pose)];
            if (m.k() > 0) {
                const Assignment a = assign(ex.descriptors, m);
                kept = exemplar_assign(ex.keypoints, ex.descriptors, a.labels, m);
                for (std::size_t i = 0; i < a.labels.size(); ++i)
                    slot_labels.push_back(
                        align[static_cast<std::size_t>(pose)][static_cast<std::size_t>(a.labels[i])]);
            }
        }
        std::vector<int> slot_of_label(static_cast<std::size_t>(
                                           labeler.keypoint_models[static_cast<std::size_t>(pose)].k()),
                                       0);
        for (std::size_t l = 0; l < slot_of_label.size(); ++l)
            slot_of_label[l] = align[static_cast<std::size_t>(pose)][l];
        const SlotLandmarks slots = slots_from_labeled(kept, slot_of_label, n_slots, size, size);
        missing_slots += slots.missing;
        pred_slots.push_back(slots.points);
        entries.push_back(&entry);
        pose_labels.push_back(pose);

        if (static_cast<long>(slot_labels.size()) == ex.descriptors.rows()) {
            const long base = pooled_desc.rows();
            pooled_desc.conservativeResize(base + ex.descriptors.rows(), Eigen::NoChange);
            for (long i = 0; i < ex.descriptors.rows(); ++i) {
                pooled_desc.row(base + i) = ex.descriptors.row(i);
                pooled_labels.push_back(slot_labels[static_cast<std::size_t>(i)]);
            }
        }
    }

    StageEvaluation out;
    out.report.set("stage", stage);
    const LandmarkEvalCore core = landmark_eval(pred_slots, entries, pooled_desc, pooled_labels,
                                                missing_slots, cfg, size, size, out.report);
    out.forward_nme = core.forward_nme;
    out.backward_nme = core.backward_nme;
    out.ced_forward = core.ced_forward;
    out.ced_backward = core.ced_backward;

    // Consistency under seeded similarity transforms.
    {
        const LandmarkExtractor extractor = extract_slots;
        double sum = 0.0;
        int used = 0, skipped = 0;
        const int limit = std::min<int>(cfg.eval.consistency_images,
                                        static_cast<int>(data.test_indices.size()));
        for (int i = 0; i < limit; ++i) {
            const Image& image = data.images[static_cast<std::size_t>(data.test_indices[static_cast<std::size_t>(i)])];
            Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(i), 0xC0515));
            SimilarityTransform t;
            t.angle = uniform(rng, -cfg.eval.consistency_rotation_deg, cfg.eval.consistency_rotation_deg) *
                      M_PI / 180.0;
            t.flip = uniform(rng, 0.0, 1.0) < cfg.eval.consistency_flip_probability;
            const ConsistencyResult r = consistency_error(extractor, image, t);
            if (r.skipped) {
                ++skipped;
            } else {
                sum += r.error;
                ++used;
            }
        }
        out.report.set("consistency_images", used);
        out.report.set("consistency_skipped", skipped);
        if (used > 0) out.report.set("consistency_error_px", sum / used);
    }

    // Pose-cluster accuracy against yaw ranges (two-stage models only).
    if (labeler.two_stage) {
        bool all_yaw = true;
        for (const auto* e : entries)
            if (!e->yaw) all_yaw = false;
        if (all_yaw) {
            std::vector<int> ranges;
            ranges.reserve(entries.size());
            for (const auto* e : entries) ranges.push_back(yaw_index_for(*e->yaw, cfg.eval));
            const ClusteringAccuracy acc =
                clustering_accuracy(pose_labels, ranges, labeler.pose_model.k());
            out.clustering_accuracy_pct = acc.percent;
            out.report.set("clustering_accuracy_pct", acc.percent);
            out.report.set("clustering_accuracy_tie", acc.tie_flagged ? 1.0 : 0.0);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stage running
// ---------------------------------------------------------------------------

namespace {

std::string stage_dir(const PipelineConfig& cfg, const std::string& stage) {
    return (fs::path(run_directory(cfg)) / stage).string();
}

void ensure_run_config(const PipelineConfig& cfg) {
    const fs::path dir = run_directory(cfg);
    fs::create_directories(dir);
    const fs::path cfg_path = dir / "config.json";
    if (fs::exists(cfg_path)) {
        const PipelineConfig existing = PipelineConfig::from_json_file(cfg_path.string());
        if (existing.config_hash() != cfg.config_hash())
            throw std::runtime_error("run directory '" + dir.string() +
                                     "' was created with a different configuration");
    } else {
        cfg.save_json(cfg_path.string());
    }
}

void require_prerequisite(const PipelineConfig& cfg, const std::string& stage,
                          const std::string& needed) {
    const fs::path path = fs::path(stage_dir(cfg, needed)) / "checkpoint.bin";
    if (!fs::exists(path))
        throw std::runtime_error("stage '" + stage + "' requires the '" + needed +
                                 "' stage checkpoint (" + path.string() + "); run that stage first");
}

// Newest boundary checkpoint under <stage>/checkpoints, or empty.
std::string latest_boundary_checkpoint(const std::string& dir, long* iteration) {
    const fs::path sub = fs::path(dir) / "checkpoints";
    if (!fs::exists(sub)) return {};
    std::string best;
    long best_iter = -1;
    for (const auto& e : fs::directory_iterator(sub)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("iter_", 0) != 0) continue;
        const long it = std::strtol(name.c_str() + 5, nullptr, 10);
        if (it > best_iter) {
            best_iter = it;
            best = e.path().string();
        }
    }
    if (iteration) *iteration = best_iter;
    return best;
}

TrainingSet derive_flat_set(const std::vector<Image>& images, const Model& model, const Schedule& s) {
    const ExtractFn extract = [&](int j) {
        return extract_keypoints(model, images[static_cast<std::size_t>(j)], s.extraction, false);
    };
    UpdateOptions uo;
    uo.keypoint_clusters = s.keypoint_clusters;
    uo.pose_clusters = 1;
    uo.seed = mix_seed(s.seed, 0xC1A57EA);
    return update_training_set(static_cast<int>(images.size()), extract, uo);
}

void write_stage_eval(const StageEvaluation& eval, const std::string& dir) {
    eval.report.write((fs::path(dir) / "report.txt").string());
    write_ced_csv(eval.ced_forward, (fs::path(dir) / "ced_forward.csv").string());
    write_ced_csv(eval.ced_backward, (fs::path(dir) / "ced_backward.csv").string());
}

}  // namespace

void run_stage(const std::string& stage, const PipelineConfig& cfg) {
    ensure_run_config(cfg);
    const std::string dir = stage_dir(cfg, stage);
    fs::create_directories(dir);
    const std::uint64_t hash = cfg.config_hash();
    const LoadedDataset data = load_dataset(cfg);
    const std::vector<Image> train = data.train_images();

    if (stage == "zeroshot") {
        const ZeroshotResult zs = run_zeroshot(cfg, data);
        zs.report.write((fs::path(dir) / "report.txt").string());
        write_ced_csv(zs.ced_forward, (fs::path(dir) / "ced_forward.csv").string());
        write_ced_csv(zs.ced_backward, (fs::path(dir) / "ced_backward.csv").string());
        std::ofstream labeler_out((fs::path(dir) / "clusters.bin").string(), std::ios::binary);
        save_cluster_model(zs.cluster_model, labeler_out);
        return;
    }

    if (stage == "bootstrap") {
        Model model(cfg.model);
        LossReport losses;
        const BootstrapResult result = bootstrap_train(train, model, cfg.bootstrap, &losses);
        losses.write_csv((fs::path(dir) / "losses.csv").string());
        save_checkpoint((fs::path(dir) / "checkpoint.bin").string(), model, "bootstrap",
                        cfg.bootstrap.iterations, hash);
        if (result.aborted_nan)
            throw std::runtime_error(
                "bootstrap training hit a non-finite loss at iteration " +
                std::to_string(result.aborted_at) +
                "; the last finite parameters were checkpointed to " + dir);
        const TrainingSet set = derive_flat_set(train, model, cfg.duld);
        save_pseudo_labeler(set.labeler, (fs::path(dir) / "labeler.bin").string());
        write_stage_eval(evaluate_stage("bootstrap", model, set.labeler, data, cfg), dir);
        return;
    }

    if (stage == "duld" || stage == "duldpp") {
        const std::string prereq = stage == "duld" ? "bootstrap" : "proxy";
        require_prerequisite(cfg, stage, prereq);
        Model model(cfg.model);
        const Schedule& schedule = stage == "duld" ? cfg.duld : cfg.duldpp;
        nn::Adam adam = stage == "duld" ? make_duld_adam(model, schedule)
                                        : make_duldpp_adam(model, schedule);

        long start_iteration = 0;
        long resume_iter = -1;
        const std::string resume_path = latest_boundary_checkpoint(dir, &resume_iter);
        if (!resume_path.empty() && resume_iter < schedule.total_iterations) {
            load_checkpoint(resume_path, model, hash, false, &adam);
            start_iteration = resume_iter;
        } else {
            load_checkpoint((fs::path(stage_dir(cfg, prereq)) / "checkpoint.bin").string(), model, hash);
        }

        if (stage == "duld" && start_iteration == 0 &&
            !fs::exists(fs::path(dir) / "report_epoch0.txt")) {
            const TrainingSet epoch0 = derive_flat_set(train, model, cfg.duld);
            const StageEvaluation eval0 = evaluate_stage("duld_epoch0", model, epoch0.labeler, data, cfg);
            eval0.report.write((fs::path(dir) / "report_epoch0.txt").string());
        }

        LossReport losses;
        const ReclusterCallback on_recluster = [&](long iteration, const TrainingSet&,
                                                   const nn::Adam& state) {
            char name[32];
            std::snprintf(name, sizeof(name), "iter_%06ld.bin", iteration);
            save_checkpoint((fs::path(dir) / "checkpoints" / name).string(), model, stage, iteration,
                            hash, &state);
        };

        StageResult result;
        if (stage == "duld")
            result = train_duld(train, model, schedule, &losses, on_recluster, &adam, start_iteration);
        else
            result = train_duldpp(train, model, schedule, &losses, on_recluster, &adam, start_iteration);
        losses.write_csv((fs::path(dir) / "losses.csv").string(), /*append=*/start_iteration > 0);
        if (result.aborted_nan)
            throw std::runtime_error(stage + " training hit a non-finite loss at iteration " +
                                     std::to_string(result.aborted_at) +
                                     "; the last finite parameters are in " + dir);
        save_checkpoint((fs::path(dir) / "checkpoint.bin").string(), model, stage,
                        schedule.total_iterations, hash, &adam);
        save_pseudo_labeler(result.training_set.labeler, (fs::path(dir) / "labeler.bin").string());
        write_stage_eval(evaluate_stage(stage, model, result.training_set.labeler, data, cfg), dir);
        return;
    }

    if (stage == "proxy") {
        require_prerequisite(cfg, stage, "duld");
        Model model(cfg.model);
        nn::Adam adam = make_proxy_adam(model, cfg.proxy);

        long start_iteration = 0;
        long resume_iter = -1;
        const std::string resume_path = latest_boundary_checkpoint(dir, &resume_iter);
        if (!resume_path.empty() && resume_iter < cfg.proxy.total_iterations) {
            load_checkpoint(resume_path, model, hash, false, &adam);
            start_iteration = resume_iter;
        } else {
            load_checkpoint((fs::path(stage_dir(cfg, "duld")) / "checkpoint.bin").string(), model, hash);
        }

        Schedule schedule = cfg.proxy;
        schedule.keypoint_clusters = cfg.duld.keypoint_clusters;
        const TrainingSet set = derive_flat_set(train, model, cfg.duld);

        const std::uint64_t desc_before = model.descriptor.params().checksum();
        LossReport losses;
        const CheckpointCallback on_checkpoint = [&](long iteration, const nn::Adam& state) {
            char name[32];
            std::snprintf(name, sizeof(name), "iter_%06ld.bin", iteration);
            save_checkpoint((fs::path(dir) / "checkpoints" / name).string(), model, "proxy", iteration,
                            hash, &state);
        };
        const StageResult result =
            train_proxy(train, model, set, schedule, &losses, &adam, start_iteration, on_checkpoint);
        losses.write_csv((fs::path(dir) / "losses.csv").string(), start_iteration > 0);
        if (result.aborted_nan)
            throw std::runtime_error("proxy training hit a non-finite loss at iteration " +
                                     std::to_string(result.aborted_at));
        require(model.descriptor.params().checksum() == desc_before,
                "proxy stage must leave the descriptor head untouched");
        save_checkpoint((fs::path(dir) / "checkpoint.bin").string(), model, "proxy",
                        cfg.proxy.total_iterations, hash, &adam);
        save_pseudo_labeler(set.labeler, (fs::path(dir) / "labeler.bin").string());
        StageEvaluation eval = evaluate_stage("proxy", model, set.labeler, data, cfg);
        if (!result.losses.empty()) {
            eval.report.set("elbo_initial", result.losses.front());
            eval.report.set("elbo_final", result.losses.back());
        }
        write_stage_eval(eval, dir);
        return;
    }

    throw std::invalid_argument("run_stage: unknown stage '" + stage + "'");
}

void run_full_pipeline(const PipelineConfig& cfg) {
    run_stage("bootstrap", cfg);
    run_stage("duld", cfg);
    run_stage("proxy", cfg);
    run_stage("duldpp", cfg);
}

void run_eval(const std::string& stage, const PipelineConfig& cfg) {
    const std::string dir = stage_dir(cfg, stage);
    const fs::path ckpt = fs::path(dir) / "checkpoint.bin";
    if (!fs::exists(ckpt))
        throw std::runtime_error("eval: no checkpoint for stage '" + stage + "' at " + ckpt.string() +
                                 "; run that stage first");
    Model model(cfg.model);
    load_checkpoint(ckpt.string(), model, cfg.config_hash());
    const PseudoLabeler labeler = load_pseudo_labeler((fs::path(dir) / "labeler.bin").string());
    const LoadedDataset data = load_dataset(cfg);
    const std::string out_dir = (fs::path(run_directory(cfg)) / "eval" / stage).string();
    fs::create_directories(out_dir);
    write_stage_eval(evaluate_stage(stage, model, labeler, data, cfg), out_dir);
}

}  // namespace uld
