#include "uld/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

namespace uld {

// ---------------------------------------------------------------------------
// Embeddings and palette
// ---------------------------------------------------------------------------

Mat landmark_embeddings(int k, int dim) {
    require(k >= 1, "landmark_embeddings: k must be >= 1");
    require(dim >= k, "landmark_embeddings: dim must be >= k");
    // Centered unit basis: rows have pairwise inner product -1/(k-1).
    Mat e = Mat::Zero(k, dim);
    if (k == 1) {
        e(0, 0) = 1.0;
        return e;
    }
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) e(i, j) = (i == j ? 1.0 : 0.0) - 1.0 / k;
        e.row(i) /= e.row(i).norm();
    }
    return e;
}

Mat landmark_palette(int k) {
    require(k >= 1, "landmark_palette: k must be >= 1");
    Mat palette(k, 3);
    for (int i = 0; i < k; ++i) {
        const double hue = 360.0 * i / k;
        const double hp = hue / 60.0;
        const double frac = hp - std::floor(hp);
        double r = 0, g = 0, b = 0;
        switch (static_cast<int>(hp) % 6) {
            case 0: r = 1, g = frac, b = 0; break;
            case 1: r = 1 - frac, g = 1, b = 0; break;
            case 2: r = 0, g = 1, b = frac; break;
            case 3: r = 0, g = 1 - frac, b = 1; break;
            case 4: r = frac, g = 0, b = 1; break;
            default: r = 1, g = 0, b = 1 - frac; break;
        }
        palette.row(i) << r, g, b;
        palette.row(i) /= palette.row(i).norm();
    }
    return palette;
}

double embedding_min_separation(const Mat& embeddings) {
    double best = std::numeric_limits<double>::infinity();
    for (long i = 0; i < embeddings.rows(); ++i)
        for (long j = i + 1; j < embeddings.rows(); ++j)
            best = std::min(best, (embeddings.row(i) - embeddings.row(j)).norm());
    return best;
}

// ---------------------------------------------------------------------------
// Raw stacks
// ---------------------------------------------------------------------------

void RawFeatureStack::validate() const {
    require(!entries.empty(), "RawFeatureStack: at least one (layer, timestep) grid required");
    std::set<std::pair<int, int>> seen;
    for (const auto& e : entries) {
        require(seen.insert({e.layer, e.timestep}).second,
                "RawFeatureStack: duplicate (layer, timestep) pair");
        require(e.grid.height > 0 && e.grid.width > 0, "RawFeatureStack: empty grid");
        require(e.grid.finite(), "RawFeatureStack: non-finite grid values");
    }
}

RawFeatureStack extract_raw(const Image& image, const BackboneAdapter& adapter) {
    if (image.height != adapter.input_height() || image.width != adapter.input_width()) {
        throw std::invalid_argument("extract_raw: image is " + std::to_string(image.width) + "x" +
                                    std::to_string(image.height) + " but adapter '" + adapter.name() +
                                    "' expects " + std::to_string(adapter.input_width()) + "x" +
                                    std::to_string(adapter.input_height()));
    }
    require(image.channels() == 3, "extract_raw: image must have 3 channels");
    RawFeatureStack stack = adapter.extract(image);
    stack.validate();
    return stack;
}

// ---------------------------------------------------------------------------
// OracleAdapter
// ---------------------------------------------------------------------------

OracleAdapter::OracleAdapter(OracleAdapterConfig cfg) : cfg_(cfg) {
    require(cfg_.n_identities >= 1, "OracleAdapter: n_identities must be >= 1");
    require(cfg_.layers >= 1 && cfg_.timesteps >= 1, "OracleAdapter: layers and timesteps must be >= 1");
    require(cfg_.descriptor_dim >= cfg_.n_identities,
            "OracleAdapter: descriptor_dim must be >= n_identities");
    embeddings_ = landmark_embeddings(cfg_.n_identities, cfg_.descriptor_dim);
    palette_ = landmark_palette(cfg_.n_identities);
}

std::vector<BackboneAdapter::LayerSpec> OracleAdapter::layout() const {
    std::vector<LayerSpec> specs;
    for (int l = 0; l < cfg_.layers; ++l) {
        // Deepest layer at half resolution, last layer at full resolution.
        const int size = (l + 1 < cfg_.layers) ? cfg_.image_size / 2 : cfg_.image_size;
        for (int t = 0; t < cfg_.timesteps; ++t)
            specs.push_back({l, t, size, size, cfg_.descriptor_dim});
    }
    return specs;
}

RawFeatureStack OracleAdapter::extract(const Image& image) const {
    const int size = cfg_.image_size;
    Mat base = Mat::Zero(static_cast<long>(size) * size, cfg_.descriptor_dim);
    for (long p = 0; p < base.rows(); ++p) {
        const Eigen::RowVector3d rgb = image.values.row(p);
        const double intensity = rgb.norm();
        if (intensity < 0.15) continue;  // background stays at the zero embedding
        const Eigen::RowVector3d dir = rgb / intensity;
        long best = 0;
        double best_dot = -2.0;
        for (long k = 0; k < palette_.rows(); ++k) {
            const double d = dir.dot(palette_.row(k));
            if (d > best_dot) {
                best_dot = d;
                best = k;
            }
        }
        base.row(p) = std::min(intensity, 1.0) * embeddings_.row(best);
    }

    const std::uint64_t image_hash =
        fnv1a(image.values.data(), sizeof(double) * static_cast<std::size_t>(image.values.size()));

    RawFeatureStack stack;
    for (const LayerSpec& spec : layout()) {
        FeatureMap grid(spec.height, spec.width, spec.channels, "oracle");
        grid.values = nn::upsample_bilinear(base, size, size, spec.height, spec.width);
        if (cfg_.noise_sigma > 0.0) {
            Rng rng(mix_seed(cfg_.seed, image_hash, static_cast<std::uint64_t>(spec.layer) * 131 + spec.timestep));
            for (long i = 0; i < grid.values.rows(); ++i)
                for (long j = 0; j < grid.values.cols(); ++j)
                    grid.values(i, j) += normal(rng, 0.0, cfg_.noise_sigma);
        }
        stack.entries.push_back({spec.layer, spec.timestep, std::move(grid)});
    }
    return stack;
}

std::unique_ptr<BackboneAdapter> make_adapter(const std::string& kind, const OracleAdapterConfig& oracle_cfg) {
    if (kind == "oracle") return std::make_unique<OracleAdapter>(oracle_cfg);
    if (kind == "stable-diffusion")
        throw std::runtime_error(
            "backbone adapter 'stable-diffusion' is not available in this build; "
            "configure backbone.kind = \"oracle\" or plug in an external adapter");
    throw std::runtime_error("unknown backbone adapter '" + kind + "'");
}

// ---------------------------------------------------------------------------
// Aggregator
// ---------------------------------------------------------------------------

Activation activation_from_string(const std::string& s) {
    if (s == "none") return Activation::none;
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::none: return "none";
        case Activation::relu: return "relu";
        default: return "tanh";
    }
}

namespace {

Mat apply_activation(Activation a, const Mat& z) {
    switch (a) {
        case Activation::none: return z;
        case Activation::relu: return nn::relu(z);
        default: return z.array().tanh().matrix();
    }
}

Mat activation_backward(Activation a, const Mat& dy, const Mat& z, const Mat& y) {
    switch (a) {
        case Activation::none: return dy;
        case Activation::relu: return nn::relu_backward(dy, z);
        default: return (dy.array() * (1.0 - y.array().square())).matrix();
    }
}

}  // namespace

Aggregator::Aggregator(const std::vector<BackboneAdapter::LayerSpec>& layout, AggregatorConfig cfg)
    : cfg_(cfg) {
    require(!layout.empty(), "Aggregator: empty layout");
    std::vector<BackboneAdapter::LayerSpec> sorted = layout;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        return std::tie(a.layer, a.timestep) < std::tie(b.layer, b.timestep);
    });

    std::map<int, int> layer_to_bottleneck;
    for (const auto& spec : sorted) {
        auto it = layer_to_bottleneck.find(spec.layer);
        if (it == layer_to_bottleneck.end()) {
            BottleneckBlocks b;
            b.layer = spec.layer;
            b.channels = spec.channels;
            b.weight_block = store_.declare("bottleneck" + std::to_string(spec.layer) + ".weight",
                                            spec.channels, cfg_.out_channels);
            b.bias_block = store_.declare("bottleneck" + std::to_string(spec.layer) + ".bias",
                                          cfg_.out_channels, 1);
            it = layer_to_bottleneck.emplace(spec.layer, static_cast<int>(bottlenecks_.size())).first;
            bottlenecks_.push_back(b);
        } else {
            require(bottlenecks_[it->second].channels == spec.channels,
                    "Aggregator: inconsistent channel count within a layer");
        }
        Slot s;
        s.layer = spec.layer;
        s.timestep = spec.timestep;
        s.height = spec.height;
        s.width = spec.width;
        s.channels = spec.channels;
        s.bottleneck_index = it->second;
        slots_.push_back(s);
    }
    mix_block_ = store_.declare("mix.weights", static_cast<long>(slots_.size()), 1);
    store_.finalize();
}

void Aggregator::init_random(Rng& rng) {
    for (const auto& b : bottlenecks_) {
        auto w = store_.value(b.weight_block);
        const double scale = std::sqrt(2.0 / static_cast<double>(b.channels));
        for (long j = 0; j < w.cols(); ++j)
            for (long i = 0; i < w.rows(); ++i) w(i, j) = normal(rng, 0.0, scale);
        store_.value(b.bias_block).setZero();
    }
    store_.value(mix_block_).setConstant(1.0 / static_cast<double>(slots_.size()));
}

void Aggregator::init_identity() {
    require(cfg_.activation == Activation::none, "Aggregator: identity init requires activation 'none'");
    for (const auto& b : bottlenecks_) {
        require(b.channels == cfg_.out_channels,
                "Aggregator: identity init requires layer channels == out_channels");
        store_.value(b.weight_block) = Mat::Identity(b.channels, cfg_.out_channels);
        store_.value(b.bias_block).setZero();
    }
    store_.value(mix_block_).setConstant(1.0 / static_cast<double>(slots_.size()));
}

long Aggregator::slot_of(int layer, int timestep) const {
    for (std::size_t i = 0; i < slots_.size(); ++i)
        if (slots_[i].layer == layer && slots_[i].timestep == timestep) return static_cast<long>(i);
    return -1;
}

double Aggregator::mixing_weight(int layer, int timestep) const {
    const long s = slot_of(layer, timestep);
    require(s >= 0, "Aggregator: no such (layer, timestep)");
    return store_.value(mix_block_)(s, 0);
}

void Aggregator::set_mixing_weight(int layer, int timestep, double value) {
    const long s = slot_of(layer, timestep);
    require(s >= 0, "Aggregator: no such (layer, timestep)");
    store_.value(mix_block_)(s, 0) = value;
}

FeatureMap Aggregator::forward(const RawFeatureStack& raw, Ctx* ctx) const {
    raw.validate();
    require(raw.entries.size() == slots_.size(),
            "Aggregator: raw stack does not match the configured (layer, timestep) layout");

    std::vector<const RawFeatureEntry*> by_slot(slots_.size(), nullptr);
    for (const auto& e : raw.entries) {
        const long s = slot_of(e.layer, e.timestep);
        if (s < 0)
            throw std::invalid_argument("Aggregator: no mixing weight configured for (layer " +
                                        std::to_string(e.layer) + ", timestep " +
                                        std::to_string(e.timestep) + ")");
        require(e.grid.height == slots_[s].height && e.grid.width == slots_[s].width &&
                    e.grid.channels() == slots_[s].channels,
                "Aggregator: grid shape does not match the declared layout");
        by_slot[s] = &e;
    }

    if (ctx) {
        ctx->upsampled.assign(slots_.size(), Mat());
        ctx->preact.assign(slots_.size(), Mat());
        ctx->activated.assign(slots_.size(), Mat());
    }

    const auto mix = store_.value(mix_block_);
    FeatureMap out(cfg_.out_height, cfg_.out_width, cfg_.out_channels, "aggregated");
    for (std::size_t s = 0; s < slots_.size(); ++s) {
        const Slot& slot = slots_[s];
        const BottleneckBlocks& b = bottlenecks_[slot.bottleneck_index];
        Mat up = nn::upsample_bilinear(by_slot[s]->grid.values, slot.height, slot.width, cfg_.out_height,
                                       cfg_.out_width);
        Mat z = up * store_.value(b.weight_block);
        z.rowwise() += store_.value(b.bias_block).col(0).transpose();
        Mat a = apply_activation(cfg_.activation, z);
        out.values.noalias() += mix(static_cast<long>(s), 0) * a;
        if (ctx) {
            ctx->upsampled[s] = std::move(up);
            ctx->preact[s] = std::move(z);
            ctx->activated[s] = std::move(a);
        }
    }
    return out;
}

void Aggregator::backward(const Mat& d_out, const Ctx& ctx) {
    require(ctx.activated.size() == slots_.size(), "Aggregator: backward called with a stale context");
    auto mix = store_.value(mix_block_);
    auto dmix = store_.grad(mix_block_);
    for (std::size_t s = 0; s < slots_.size(); ++s) {
        const Slot& slot = slots_[s];
        const BottleneckBlocks& b = bottlenecks_[slot.bottleneck_index];
        dmix(static_cast<long>(s), 0) += (d_out.array() * ctx.activated[s].array()).sum();
        const Mat da = mix(static_cast<long>(s), 0) * d_out;
        const Mat dz = activation_backward(cfg_.activation, da, ctx.preact[s], ctx.activated[s]);
        store_.grad(b.weight_block).noalias() += ctx.upsampled[s].transpose() * dz;
        store_.grad(b.bias_block).col(0) += dz.colwise().sum().transpose();
    }
}

FeatureMap aggregate(const RawFeatureStack& raw, const Aggregator& agg) { return agg.forward(raw); }

// ---------------------------------------------------------------------------
// Scene-direct oracle features
// ---------------------------------------------------------------------------

FeatureMap oracle_backbone(const SyntheticScene& scene, double noise_sigma, std::uint64_t seed,
                           int descriptor_dim) {
    require(scene.n_landmarks() >= 1, "oracle_backbone: scene has no landmarks");
    require(scene.visible.size() == scene.landmarks.size(), "oracle_backbone: visibility size mismatch");
    const Mat table = landmark_embeddings(scene.n_landmarks(), descriptor_dim);

    const int size = scene.canvas;
    FeatureMap out(size, size, descriptor_dim, "oracle_backbone");
    Rng rng(seed);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const long p = out.index(x, y);
            long best = -1;
            double best_d = std::numeric_limits<double>::infinity();
            for (int k = 0; k < scene.n_landmarks(); ++k) {
                if (!scene.visible[k]) continue;
                const double d = (scene.landmarks[k] - Eigen::Vector2d(x, y)).norm();
                if (d < best_d) {
                    best_d = d;
                    best = k;
                }
            }
            if (best >= 0 && best_d <= scene.blob_radius) out.values.row(p) = table.row(best);
            if (noise_sigma > 0.0)
                for (int c = 0; c < descriptor_dim; ++c)
                    out.values(p, c) += normal(rng, 0.0, noise_sigma);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// RoI pixel sampling
// ---------------------------------------------------------------------------

std::vector<std::pair<int, int>> sample_roi_pixels(const RoI& roi, int n, std::uint64_t seed) {
    require(n >= 1, "sample_roi_pixels: n must be >= 1");
    const int x0 = static_cast<int>(std::ceil(roi.x_min));
    const int y0 = static_cast<int>(std::ceil(roi.y_min));
    const int x1 = static_cast<int>(std::floor(roi.x_max));
    const int y1 = static_cast<int>(std::floor(roi.y_max));
    require(x1 >= x0 && y1 >= y0, "sample_roi_pixels: RoI contains no integer pixels");
    const long nx = x1 - x0 + 1;
    const long ny = y1 - y0 + 1;
    const long count = nx * ny;
    if (n > count)
        throw std::invalid_argument("sample_roi_pixels: requested " + std::to_string(n) +
                                    " pixels from an RoI with only " + std::to_string(count));

    std::vector<long> cells(count);
    for (long i = 0; i < count; ++i) cells[i] = i;
    Rng rng(seed);
    std::vector<std::pair<int, int>> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {  // partial Fisher-Yates
        const long j = i + static_cast<long>(rng() % static_cast<std::uint64_t>(count - i));
        std::swap(cells[i], cells[j]);
        out.emplace_back(x0 + static_cast<int>(cells[i] % nx), y0 + static_cast<int>(cells[i] / nx));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Feature cache
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'U', 'L', 'D', 'F'};
constexpr std::uint16_t kVersion = 1;
constexpr std::uint16_t kDtypeF64 = 1;

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* field, long offset) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in)
        throw std::runtime_error("feature cache: truncated while reading " + std::string(field) +
                                 " at offset " + std::to_string(offset));
    return v;
}

}  // namespace

void cache_features(const FeatureMap& map, const std::string& path, std::uint64_t seed) {
    require(map.height > 0 && map.width > 0, "cache_features: empty map");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cache_features: cannot open '" + path + "' for writing");
    out.write(kMagic, 4);
    put<std::uint16_t>(out, kVersion);
    put<std::uint16_t>(out, kDtypeF64);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(map.height));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(map.width));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(map.channels()));
    put<std::uint32_t>(out, 0u);  // reserved
    put<std::uint64_t>(out, seed);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(map.provenance.size()));
    out.write(map.provenance.data(), static_cast<std::streamsize>(map.provenance.size()));
    for (long p = 0; p < map.values.rows(); ++p)
        for (long c = 0; c < map.values.cols(); ++c) put<double>(out, map.values(p, c));
    if (!out) throw std::runtime_error("cache_features: write failed for '" + path + "'");
}

FeatureMap load_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_features: cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("load_features: bad magic at offset 0 in '" + path + "'");
    const auto version = get<std::uint16_t>(in, "version", 4);
    if (version != kVersion)
        throw std::runtime_error("load_features: unsupported version " + std::to_string(version) +
                                 " at offset 4");
    const auto dtype = get<std::uint16_t>(in, "dtype", 6);
    if (dtype != kDtypeF64)
        throw std::runtime_error("load_features: unsupported dtype code " + std::to_string(dtype) +
                                 " at offset 6");
    const auto height = get<std::uint32_t>(in, "height", 8);
    const auto width = get<std::uint32_t>(in, "width", 12);
    const auto channels = get<std::uint32_t>(in, "channels", 16);
    get<std::uint32_t>(in, "reserved", 20);
    get<std::uint64_t>(in, "seed", 24);
    if (height == 0 || width == 0 || channels == 0 || height > (1u << 20) || width > (1u << 20) ||
        channels > (1u << 20))
        throw std::runtime_error("load_features: implausible dimensions in header at offset 8");
    const auto prov_len = get<std::uint32_t>(in, "provenance length", 32);
    if (prov_len > (1u << 20))
        throw std::runtime_error("load_features: implausible provenance length at offset 32");
    std::string provenance(prov_len, '\0');
    in.read(provenance.data(), prov_len);
    if (!in) throw std::runtime_error("load_features: truncated provenance at offset 36");

    FeatureMap map(static_cast<int>(height), static_cast<int>(width), static_cast<int>(channels),
                   provenance);
    const long value_offset = 36 + static_cast<long>(prov_len);
    for (long p = 0; p < map.values.rows(); ++p) {
        for (long c = 0; c < map.values.cols(); ++c) {
            double v;
            in.read(reinterpret_cast<char*>(&v), sizeof(double));
            if (!in)
                throw std::runtime_error("load_features: truncated value payload at offset " +
                                         std::to_string(value_offset + 8 * (p * map.values.cols() + c)));
            map.values(p, c) = v;
        }
    }
    return map;
}

}  // namespace uld
