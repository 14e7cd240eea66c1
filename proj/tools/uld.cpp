#include "uld/pipeline.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace {

struct ConfigCli {
    std::string config_path;
    std::string profile = "desk";
    std::string run_root, run_id, dataset_root, dataset_format;
    std::uint64_t seed = 0;
    bool seed_set = false;
    int k = 0, q = 0;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "pipeline config JSON file");
        cmd->add_option("--profile", profile, "config profile when no file is given (desk|paper)");
        cmd->add_option("--run-root", run_root, "run root directory (env ULD_RUN_ROOT overrides)");
        cmd->add_option("--run-id", run_id, "run identifier");
        cmd->add_option("--dataset-root", dataset_root, "dataset directory");
        cmd->add_option("--dataset-format", dataset_format, "manifest format id");
        cmd->add_option("--seed", seed, "master seed")->each([this](const std::string&) { seed_set = true; });
        cmd->add_option("--k", k, "number of keypoint clusters K");
        cmd->add_option("--q", q, "number of pose clusters Q");
    }

    uld::PipelineConfig resolve() const {
        uld::PipelineConfig cfg = config_path.empty()
                                      ? uld::PipelineConfig::defaults(profile)
                                      : uld::PipelineConfig::from_json_file(config_path);
        if (!run_root.empty()) cfg.run_root = run_root;
        if (!run_id.empty()) cfg.run_id = run_id;
        if (!dataset_root.empty()) cfg.dataset.root = dataset_root;
        if (!dataset_format.empty()) cfg.dataset.format = dataset_format;
        if (seed_set) cfg.seed = seed;
        if (k > 0) {
            cfg.keypoint_clusters = k;
            for (uld::Schedule* s : {&cfg.duld, &cfg.proxy, &cfg.duldpp}) {
                s->keypoint_clusters = k;
                s->extraction.max_keypoints = 3 * k;
            }
            cfg.bootstrap.extraction.max_keypoints = 3 * k;
        }
        if (q > 0) {
            cfg.pose_clusters = q;
            for (uld::Schedule* s : {&cfg.duld, &cfg.proxy, &cfg.duldpp}) s->pose_clusters = q;
        }
        return cfg;
    }
};

// Minimal polyline SVG, no graphics dependencies.
void write_svg(const std::string& path, const std::string& title,
               const std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>>& series) {
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto& [name, pts] : series) {
        for (const auto& [x, y] : pts) {
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    }
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    const double w = 640, h = 420, ml = 60, mr = 20, mt = 40, mb = 40;
    const auto sx = [&](double x) { return ml + (x - x0) / (x1 - x0) * (w - ml - mr); };
    const auto sy = [&](double y) { return h - mb - (y - y0) / (y1 - y0) * (h - mt - mb); };
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("plot: cannot open '" + path + "'");
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"16\">"
        << title << "</text>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
        << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        const double fx = x0 + (x1 - x0) * t / 4.0;
        const double fy = y0 + (y1 - y0) * t / 4.0;
        out << "<text x=\"" << sx(fx) << "\" y=\"" << h - mb + 16
            << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
            << uld::format_double(fx) << "</text>\n";
        out << "<text x=\"" << ml - 6 << "\" y=\"" << sy(fy) + 3
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">"
            << uld::format_double(fy) << "</text>\n";
    }
    int ci = 0;
    for (const auto& [name, pts] : series) {
        out << "<polyline fill=\"none\" stroke=\"" << colors[ci % 6] << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : pts) out << sx(x) << "," << sy(y) << " ";
        out << "\"/>\n";
        out << "<text x=\"" << w - mr - 6 << "\" y=\"" << mt + 14 + 14 * ci
            << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" << colors[ci % 6]
            << "\">" << name << "</text>\n";
        ++ci;
    }
    out << "</svg>\n";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    return out;
}

int cmd_plot(const std::string& input, const std::string& output, const std::string& kind,
             std::string title) {
    std::ifstream in(input);
    if (!in) throw std::runtime_error("plot: cannot open '" + input + "'");
    std::string line;
    std::getline(in, line);  // header
    std::vector<std::pair<std::string, std::vector<std::pair<double, double>>>> series;
    if (kind == "ced") {
        std::vector<std::pair<double, double>> pts;
        while (std::getline(in, line)) {
            const auto f = split_csv_line(line);
            if (f.size() == 2) pts.emplace_back(std::stod(f[0]), std::stod(f[1]));
        }
        series.emplace_back("fraction <= threshold", std::move(pts));
        if (title.empty()) title = "Cumulative error distribution";
    } else if (kind == "loss") {
        std::map<std::string, std::vector<std::pair<double, double>>> by_name;
        while (std::getline(in, line)) {
            const auto f = split_csv_line(line);
            if (f.size() == 4) by_name[f[1] + "/" + f[2]].emplace_back(std::stod(f[0]), std::stod(f[3]));
        }
        for (auto& [name, pts] : by_name) series.emplace_back(name, std::move(pts));
        if (title.empty()) title = "Training losses";
    } else {
        throw std::runtime_error("plot: unknown kind '" + kind + "' (use ced or loss)");
    }
    write_svg(output, title, series);
    std::cout << "wrote " << output << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Unsupervised landmark discovery pipeline"};
    app.require_subcommand(1);

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "generate a synthetic blob-scene dataset");
    std::string synth_out;
    uld::SyntheticDatasetConfig synth_cfg;
    synth->add_option("--out", synth_out, "output dataset directory")->required();
    synth->add_option("--images", synth_cfg.n_images, "number of images");
    synth->add_option("--landmarks", synth_cfg.n_landmarks, "true landmark count");
    synth->add_option("--canvas", synth_cfg.canvas, "canvas side length");
    synth->add_option("--pose-dist", synth_cfg.pose_distribution, "uniform | two_mode | fixed");
    synth->add_option("--pose-range", synth_cfg.pose_range, "uniform pose range (degrees)");
    synth->add_option("--fixed-pose", synth_cfg.fixed_pose, "pose for the fixed distribution");
    synth->add_option("--blob-radius", synth_cfg.blob_radius, "landmark core radius");
    synth->add_option("--seed", synth_cfg.seed, "generator seed");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "validate a dataset manifest");
    std::string ingest_root, ingest_format = "generic_json_lines";
    ingest->add_option("--root", ingest_root, "dataset directory")->required();
    ingest->add_option("--format", ingest_format, "generic_json_lines | synthetic");

    // pipeline stages
    ConfigCli zeroshot_cli, bootstrap_cli, duld_cli, proxy_cli, duldpp_cli, eval_cli;
    auto* zeroshot = app.add_subcommand("zeroshot", "run the clustering-only baseline");
    zeroshot_cli.attach(zeroshot);
    auto* bootstrap = app.add_subcommand("bootstrap", "self-supervised keypoint initialization");
    bootstrap_cli.attach(bootstrap);
    auto* duld = app.add_subcommand("train-duld", "clustering-driven self-training");
    duld_cli.attach(duld);
    auto* proxy = app.add_subcommand("train-proxy", "pose-guided proxy task (VAE)");
    proxy_cli.attach(proxy);
    auto* duldpp = app.add_subcommand("train-duldpp", "two-stage-clustering self-training");
    duldpp_cli.attach(duldpp);
    auto* evalc = app.add_subcommand("eval", "re-evaluate a finished stage");
    std::string eval_stage = "duldpp";
    evalc->add_option("--stage", eval_stage, "stage to evaluate");
    eval_cli.attach(evalc);

    // plot
    auto* plot = app.add_subcommand("plot", "render a CSV artifact to SVG");
    std::string plot_in, plot_out, plot_kind = "ced", plot_title;
    plot->add_option("--input", plot_in, "input CSV")->required();
    plot->add_option("--output", plot_out, "output SVG")->required();
    plot->add_option("--kind", plot_kind, "ced | loss");
    plot->add_option("--title", plot_title, "plot title");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            const uld::SyntheticDataset data = uld::generate_synthetic_dataset(synth_cfg);
            uld::write_dataset(data, synth_out);
            std::cout << "wrote " << data.images.size() << " images + manifest to " << synth_out << "\n";
            return 0;
        }
        if (ingest->parsed()) {
            const uld::DatasetManifest manifest = uld::ingest_dataset(ingest_root, ingest_format);
            std::cout << "manifest ok: " << manifest.entries.size() << " entries, "
                      << manifest.n_landmarks << " landmarks per image\n";
            for (const auto& w : manifest.warnings) std::cout << "warning: " << w << "\n";
            return 0;
        }
        if (zeroshot->parsed()) {
            uld::run_stage("zeroshot", zeroshot_cli.resolve());
            std::cout << "zeroshot report written under " << uld::run_directory(zeroshot_cli.resolve())
                      << "/zeroshot\n";
            return 0;
        }
        if (bootstrap->parsed()) {
            uld::run_stage("bootstrap", bootstrap_cli.resolve());
            return 0;
        }
        if (duld->parsed()) {
            uld::run_stage("duld", duld_cli.resolve());
            return 0;
        }
        if (proxy->parsed()) {
            uld::run_stage("proxy", proxy_cli.resolve());
            return 0;
        }
        if (duldpp->parsed()) {
            uld::run_stage("duldpp", duldpp_cli.resolve());
            return 0;
        }
        if (evalc->parsed()) {
            uld::run_eval(eval_stage, eval_cli.resolve());
            return 0;
        }
        if (plot->parsed()) return cmd_plot(plot_in, plot_out, plot_kind, plot_title);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
