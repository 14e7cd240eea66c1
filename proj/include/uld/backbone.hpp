#pragma once

#include "uld/nn.hpp"
#include "uld/rng.hpp"
#include "uld/scene.hpp"
#include "uld/types.hpp"

#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace uld {

// ---------------------------------------------------------------------------
// Identity embeddings
// ---------------------------------------------------------------------------

// k unit vectors with equal pairwise inner products -1/(k-1) (a regular
// simplex), deterministic in (k, dim). Requires dim >= k.
Mat landmark_embeddings(int k, int dim);

// k distinct unit-norm RGB directions used to paint synthetic scenes; the
// oracle adapter inverts this palette to recover identities from pixels.
Mat landmark_palette(int k);

double embedding_min_separation(const Mat& embeddings);

// ---------------------------------------------------------------------------
// Raw feature stacks and adapters
// ---------------------------------------------------------------------------

struct RawFeatureEntry {
    int layer = 0;
    int timestep = 0;
    FeatureMap grid;
};

struct RawFeatureStack {
    std::vector<RawFeatureEntry> entries;

    void validate() const;  // distinct (layer, timestep), non-empty, finite grids
};

class BackboneAdapter {
public:
    struct LayerSpec {
        int layer = 0;
        int timestep = 0;
        int height = 0;
        int width = 0;
        int channels = 0;
    };

    virtual ~BackboneAdapter() = default;
    virtual std::string name() const = 0;
    virtual int input_height() const = 0;
    virtual int input_width() const = 0;
    virtual std::vector<LayerSpec> layout() const = 0;
    virtual RawFeatureStack extract(const Image& image) const = 0;
};

// Validates image dimensions against the adapter contract and extracts the
// declared (layer, timestep) grids.
RawFeatureStack extract_raw(const Image& image, const BackboneAdapter& adapter);

struct OracleAdapterConfig {
    int n_identities = 6;
    int descriptor_dim = 12;
    int image_size = 64;
    int layers = 2;
    int timesteps = 2;
    double noise_sigma = 0.05;
    std::uint64_t seed = 0;
};

// Feature extractor that reads identities back out of rendered blob scenes:
// pixel chroma selects an identity embedding, pixel intensity scales it, and
// per-(layer, timestep) Gaussian noise is added. Deterministic in
// (image, seed).
class OracleAdapter : public BackboneAdapter {
public:
    explicit OracleAdapter(OracleAdapterConfig cfg);

    std::string name() const override { return "oracle"; }
    int input_height() const override { return cfg_.image_size; }
    int input_width() const override { return cfg_.image_size; }
    std::vector<LayerSpec> layout() const override;
    RawFeatureStack extract(const Image& image) const override;

    const Mat& embeddings() const { return embeddings_; }
    const OracleAdapterConfig& config() const { return cfg_; }

private:
    OracleAdapterConfig cfg_;
    Mat embeddings_;  // n_identities x descriptor_dim
    Mat palette_;     // n_identities x 3
};

// Registry entry point; unknown or unavailable adapters fail with an error
// naming the adapter kind.
std::unique_ptr<BackboneAdapter> make_adapter(const std::string& kind, const OracleAdapterConfig& oracle_cfg);

// ---------------------------------------------------------------------------
// Feature aggregation
// ---------------------------------------------------------------------------

enum class Activation { none, relu, tanh };

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

struct AggregatorConfig {
    int out_channels = 12;
    int out_height = 64;
    int out_width = 64;
    Activation activation = Activation::none;
};

// Learnable mixer: every (layer, timestep) grid is upscaled to the output
// resolution, pushed through that layer's 1x1 bottleneck + activation,
// scaled by its mixing weight and summed. Bottlenecks and mixing weights
// live in one ParamStore so the whole thing trains jointly with the heads.
class Aggregator {
public:
    Aggregator(const std::vector<BackboneAdapter::LayerSpec>& layout, AggregatorConfig cfg);

    void init_random(Rng& rng);
    // Pass-through start: identity bottlenecks (requires matching channel
    // counts and no activation) and uniform mixing weights.
    void init_identity();

    struct Ctx {
        std::vector<Mat> upsampled;
        std::vector<Mat> preact;
        std::vector<Mat> activated;
    };

    FeatureMap forward(const RawFeatureStack& raw, Ctx* ctx = nullptr) const;
    void backward(const Mat& d_out, const Ctx& ctx);

    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    const AggregatorConfig& config() const { return cfg_; }
    double mixing_weight(int layer, int timestep) const;
    void set_mixing_weight(int layer, int timestep, double value);

private:
    struct Slot {
        int layer = 0;
        int timestep = 0;
        int height = 0;
        int width = 0;
        int channels = 0;
        int bottleneck_index = 0;  // into per-layer bottleneck list
    };
    struct BottleneckBlocks {
        int layer = 0;
        int channels = 0;
        int weight_block = -1;
        int bias_block = -1;
    };

    long slot_of(int layer, int timestep) const;

    AggregatorConfig cfg_;
    std::vector<Slot> slots_;  // sorted by (layer, timestep)
    std::vector<BottleneckBlocks> bottlenecks_;
    int mix_block_ = -1;
    nn::ParamStore store_;
};

// Spec-level convenience wrapper around Aggregator::forward.
FeatureMap aggregate(const RawFeatureStack& raw, const Aggregator& agg);

// ---------------------------------------------------------------------------
// Scene-direct oracle features
// ---------------------------------------------------------------------------

// Builds the aggregated-feature stand-in straight from scene geometry:
// pixels within blob_radius of a visible landmark get that landmark's unit
// embedding, everything else the background embedding (zero), both plus
// N(0, noise_sigma^2) per channel.
FeatureMap oracle_backbone(const SyntheticScene& scene, double noise_sigma, std::uint64_t seed,
                           int descriptor_dim = 12);

// ---------------------------------------------------------------------------
// RoI pixel sampling
// ---------------------------------------------------------------------------

// n distinct integer pixel positions uniformly drawn inside the box,
// reproducible per seed. Throws when n exceeds the pixel count.
std::vector<std::pair<int, int>> sample_roi_pixels(const RoI& roi, int n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Feature cache
// ---------------------------------------------------------------------------
// Layout (little-endian):
//   0   4  magic "ULDF"
//   4   2  version (currently 1)
//   6   2  dtype code (1 = float64)
//   8   4  height
//   12  4  width
//   16  4  channels
//   20  4  reserved
//   24  8  seed
//   32  4  provenance byte count, followed by the provenance string,
//          followed by height*width*channels float64 values in pixel-major
//          (y, x, channel) order.

void cache_features(const FeatureMap& map, const std::string& path, std::uint64_t seed = 0);
FeatureMap load_features(const std::string& path);

}  // namespace uld
