#include "uld/dataset.hpp"

#include "uld/backbone.hpp"
#include "uld/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

namespace uld {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<Eigen::Vector2d> template_landmarks(int k, int canvas) {
    require(k >= 1, "template_landmarks: k must be >= 1");
    const double cx = 0.5 * canvas;
    const double cy = 0.5 * canvas;
    const double rx = 0.28 * canvas;
    const double ry = 0.20 * canvas;
    std::vector<Eigen::Vector2d> points;
    points.reserve(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        const double a = 2.0 * M_PI * i / k - 0.5 * M_PI;
        points.emplace_back(cx + rx * std::cos(a), cy + ry * std::sin(a));
    }
    return points;
}

SyntheticScene make_scene(const SyntheticDatasetConfig& cfg, double pose, std::uint64_t appearance_seed) {
    require(pose >= -90.0 && pose <= 90.0, "make_scene: pose must be in [-90, 90]");
    SyntheticScene scene;
    scene.canvas = cfg.canvas;
    scene.pose = pose;
    scene.blob_radius = cfg.blob_radius;
    scene.intensity_falloff = cfg.intensity_falloff;
    scene.appearance_seed = appearance_seed;

    const double cy = 0.5 * cfg.canvas;
    const double cx = 0.5 * cfg.canvas;
    const double shear = (pose / 90.0) * cfg.shear_scale;
    for (const Eigen::Vector2d& t : template_landmarks(cfg.n_landmarks, cfg.canvas)) {
        scene.landmarks.emplace_back(t.x() + shear * (t.y() - cy), t.y());
        bool visible = true;
        if (std::abs(pose) > cfg.occlusion_pose) {
            // The far side turns away: for positive poses landmarks left of
            // centre disappear, for negative poses the right side does.
            if (pose > 0.0 && t.x() < cx - 0.05 * cfg.canvas) visible = false;
            if (pose < 0.0 && t.x() > cx + 0.05 * cfg.canvas) visible = false;
        }
        scene.visible.push_back(visible);
    }
    return scene;
}

Image render_scene(const SyntheticScene& scene) {
    const int size = scene.canvas;
    Image image(size, size, 3, "image");
    const Mat palette = landmark_palette(scene.n_landmarks());
    Rng rng(mix_seed(scene.appearance_seed, 0x5CE11E));
    const double gain = uniform(rng, 0.95, 1.05);

    // Region of interest: bounding box of the visible landmarks plus padding.
    double x0 = size, y0 = size, x1 = 0, y1 = 0;
    bool any_visible = false;
    for (int k = 0; k < scene.n_landmarks(); ++k) {
        if (!scene.visible[static_cast<std::size_t>(k)]) continue;
        any_visible = true;
        x0 = std::min(x0, scene.landmarks[static_cast<std::size_t>(k)].x());
        y0 = std::min(y0, scene.landmarks[static_cast<std::size_t>(k)].y());
        x1 = std::max(x1, scene.landmarks[static_cast<std::size_t>(k)].x());
        y1 = std::max(y1, scene.landmarks[static_cast<std::size_t>(k)].y());
    }
    const double pad = scene.blob_radius + 3.0;

    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const long p = image.index(x, y);
            // Faint deterministic background texture.
            for (int c = 0; c < 3; ++c) image.values(p, c) = std::abs(normal(rng, 0.0, 0.01));
            if (!any_visible) continue;
            if (x < x0 - pad || x > x1 + pad || y < y0 - pad || y > y1 + pad) continue;
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
            const double intensity =
                gain * std::max(0.3, 1.0 - best_d / std::max(1.0, scene.intensity_falloff));
            image.values.row(p) = intensity * palette.row(best);
        }
    }
    return image;
}

namespace {

double draw_pose(const SyntheticDatasetConfig& cfg, Rng& rng) {
    if (cfg.pose_distribution == "fixed") return cfg.fixed_pose;
    if (cfg.pose_distribution == "uniform") return uniform(rng, -cfg.pose_range, cfg.pose_range);
    if (cfg.pose_distribution == "two_mode")
        // Near-frontal half, strongly turned half.
        return uniform(rng, 0.0, 1.0) < 0.5 ? uniform(rng, -25.0, 25.0) : uniform(rng, 50.0, 85.0);
    throw std::invalid_argument("generate_synthetic_dataset: unknown pose distribution '" +
                                cfg.pose_distribution + "'");
}

RoI scene_box(const SyntheticScene& scene) {
    double x0 = scene.canvas, y0 = scene.canvas, x1 = 0, y1 = 0;
    for (int k = 0; k < scene.n_landmarks(); ++k) {
        if (!scene.visible[static_cast<std::size_t>(k)]) continue;
        x0 = std::min(x0, scene.landmarks[static_cast<std::size_t>(k)].x());
        y0 = std::min(y0, scene.landmarks[static_cast<std::size_t>(k)].y());
        x1 = std::max(x1, scene.landmarks[static_cast<std::size_t>(k)].x());
        y1 = std::max(y1, scene.landmarks[static_cast<std::size_t>(k)].y());
    }
    const double pad = scene.blob_radius + 3.0;
    RoI box{x0 - pad, y0 - pad, x1 + pad, y1 + pad};
    return box.clamped(scene.canvas, scene.canvas);
}

json scene_to_json(const SyntheticScene& scene) {
    json j;
    j["canvas"] = scene.canvas;
    j["pose"] = scene.pose;
    j["blob_radius"] = scene.blob_radius;
    j["intensity_falloff"] = scene.intensity_falloff;
    j["appearance_seed"] = scene.appearance_seed;
    json pts = json::array();
    for (const auto& p : scene.landmarks) {
        pts.push_back(p.x());
        pts.push_back(p.y());
    }
    j["landmarks"] = pts;
    j["visible"] = scene.visible;
    return j;
}

SyntheticScene scene_from_json(const json& j) {
    SyntheticScene scene;
    scene.canvas = j.at("canvas").get<int>();
    scene.pose = j.at("pose").get<double>();
    scene.blob_radius = j.at("blob_radius").get<double>();
    scene.intensity_falloff = j.at("intensity_falloff").get<double>();
    scene.appearance_seed = j.at("appearance_seed").get<std::uint64_t>();
    const auto pts = j.at("landmarks").get<std::vector<double>>();
    require(pts.size() % 2 == 0, "scene: odd landmark coordinate count");
    for (std::size_t i = 0; i + 1 < pts.size(); i += 2) scene.landmarks.emplace_back(pts[i], pts[i + 1]);
    scene.visible = j.at("visible").get<std::vector<bool>>();
    require(scene.visible.size() == scene.landmarks.size(), "scene: visibility size mismatch");
    return scene;
}

}  // namespace

SyntheticDataset generate_synthetic_dataset(const SyntheticDatasetConfig& cfg) {
    require(cfg.n_images >= 1, "generate_synthetic_dataset: n_images must be >= 1");
    SyntheticDataset out;
    out.manifest.n_landmarks = cfg.n_landmarks;
    Rng rng(cfg.seed);
    for (int i = 0; i < cfg.n_images; ++i) {
        const double pose = draw_pose(cfg, rng);
        const SyntheticScene scene = make_scene(cfg, pose, mix_seed(cfg.seed, static_cast<std::uint64_t>(i)));
        out.images.push_back(render_scene(scene));

        ManifestEntry entry;
        char id[32];
        std::snprintf(id, sizeof(id), "img_%04d", i);
        entry.id = id;
        entry.image_path = std::string("images/") + id + ".fmap";
        entry.landmarks.resize(cfg.n_landmarks, 2);
        for (int k = 0; k < cfg.n_landmarks; ++k)
            entry.landmarks.row(k) = scene.landmarks[static_cast<std::size_t>(k)].transpose();
        entry.yaw = pose;
        entry.box = scene_box(scene);
        entry.visible = scene.visible;
        entry.scene = scene;
        out.manifest.entries.push_back(std::move(entry));
    }
    return out;
}

void write_manifest(const DatasetManifest& manifest, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("write_manifest: cannot open '" + path + "'");
    for (const auto& e : manifest.entries) {
        json j;
        j["id"] = e.id;
        j["image"] = e.image_path;
        if (e.landmarks.rows() > 0) {
            json pts = json::array();
            for (long k = 0; k < e.landmarks.rows(); ++k) {
                pts.push_back(e.landmarks(k, 0));
                pts.push_back(e.landmarks(k, 1));
            }
            j["landmarks"] = pts;
        }
        if (e.yaw) j["yaw"] = *e.yaw;
        if (e.box) j["box"] = {e.box->x_min, e.box->y_min, e.box->x_max, e.box->y_max};
        if (e.d_iod) j["d_iod"] = *e.d_iod;
        if (!e.visible.empty()) j["visible"] = e.visible;
        if (e.scene) j["scene"] = scene_to_json(*e.scene);
        out << j.dump() << "\n";
    }
}

void write_dataset(const SyntheticDataset& dataset, const std::string& root) {
    fs::create_directories(fs::path(root) / "images");
    for (std::size_t i = 0; i < dataset.images.size(); ++i) {
        const auto& entry = dataset.manifest.entries[i];
        cache_features(dataset.images[i], (fs::path(root) / entry.image_path).string());
    }
    write_manifest(dataset.manifest, (fs::path(root) / "manifest.jsonl").string());
}

DatasetManifest ingest_dataset(const std::string& root, const std::string& format_id) {
    if (format_id != "generic_json_lines" && format_id != "synthetic")
        throw std::invalid_argument("ingest_dataset: unknown format '" + format_id + "'");
    const fs::path manifest_path = fs::path(root) / "manifest.jsonl";
    std::ifstream in(manifest_path);
    if (!in) throw std::runtime_error("ingest_dataset: cannot open '" + manifest_path.string() + "'");

    DatasetManifest manifest;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error("ingest_dataset: malformed entry at line " + std::to_string(line_no) +
                                     ": " + e.what());
        }
        ManifestEntry entry;
        try {
            entry.id = j.at("id").get<std::string>();
            entry.image_path = j.at("image").get<std::string>();
            if (j.contains("landmarks")) {
                const auto pts = j.at("landmarks").get<std::vector<double>>();
                if (pts.size() % 2 != 0)
                    throw std::runtime_error("odd landmark coordinate count");
                entry.landmarks.resize(static_cast<long>(pts.size() / 2), 2);
                for (std::size_t k = 0; k + 1 < pts.size(); k += 2) {
                    entry.landmarks(static_cast<long>(k / 2), 0) = pts[k];
                    entry.landmarks(static_cast<long>(k / 2), 1) = pts[k + 1];
                }
            } else {
                entry.landmarks.resize(0, 2);
            }
            if (j.contains("yaw")) entry.yaw = j.at("yaw").get<double>();
            if (j.contains("box")) {
                const auto b = j.at("box").get<std::vector<double>>();
                if (b.size() != 4) throw std::runtime_error("box must have 4 values");
                entry.box = RoI{b[0], b[1], b[2], b[3]};
            }
            if (j.contains("d_iod")) entry.d_iod = j.at("d_iod").get<double>();
            if (j.contains("visible")) entry.visible = j.at("visible").get<std::vector<bool>>();
            if (j.contains("scene")) entry.scene = scene_from_json(j.at("scene"));
            if (format_id == "synthetic" && !entry.scene)
                throw std::runtime_error("synthetic format requires a scene block");
        } catch (const std::exception& e) {
            throw std::runtime_error("ingest_dataset: malformed entry at line " + std::to_string(line_no) +
                                     ": " + e.what());
        }

        if (entry.landmarks.rows() > 0) {
            if (manifest.n_landmarks == 0) {
                manifest.n_landmarks = static_cast<int>(entry.landmarks.rows());
            } else if (manifest.n_landmarks != static_cast<int>(entry.landmarks.rows())) {
                throw std::runtime_error("ingest_dataset: entry at line " + std::to_string(line_no) +
                                         " has " + std::to_string(entry.landmarks.rows()) +
                                         " landmarks, dataset uses " + std::to_string(manifest.n_landmarks));
            }
        }
        if (!fs::exists(fs::path(root) / entry.image_path)) {
            manifest.warnings.push_back("missing image '" + entry.image_path + "' (line " +
                                        std::to_string(line_no) + "), entry excluded");
            continue;
        }
        manifest.entries.push_back(std::move(entry));
    }
    if (manifest.entries.empty())
        manifest.warnings.push_back("manifest '" + manifest_path.string() + "' produced no entries");
    return manifest;
}

Image load_image(const std::string& root, const ManifestEntry& entry) {
    return load_features((fs::path(root) / entry.image_path).string());
}

double gt_bbox_diagonal(const ManifestEntry& entry) {
    require(entry.landmarks.rows() >= 2, "gt_bbox_diagonal: need at least two landmarks");
    const double x0 = entry.landmarks.col(0).minCoeff();
    const double x1 = entry.landmarks.col(0).maxCoeff();
    const double y0 = entry.landmarks.col(1).minCoeff();
    const double y1 = entry.landmarks.col(1).maxCoeff();
    const double diag = std::hypot(x1 - x0, y1 - y0);
    require(diag > 0.0, "gt_bbox_diagonal: degenerate landmark box");
    return diag;
}

}  // namespace uld
