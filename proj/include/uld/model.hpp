#pragma once

#include "uld/backbone.hpp"
#include "uld/clustering.hpp"
#include "uld/heads.hpp"
#include "uld/pose_proxy.hpp"

#include <memory>
#include <string>

namespace uld {

struct ModelConfig {
    std::string backbone_kind = "oracle";
    OracleAdapterConfig oracle;
    int aggregator_channels = 12;
    std::string aggregator_activation = "none";
    std::string aggregator_init = "identity";  // "identity" | "random"
    int head_hidden1 = 12;
    int head_hidden2 = 12;
    int descriptor_dim = 12;
    VaeConfig vae;
    std::uint64_t init_seed = 1;
};

// The trainable network: backbone adapter (fixed) -> aggregator -> detector /
// descriptor heads, plus the appended VAE. Parameter ownership is split per
// component so stages can freeze exactly the pieces they must not touch.
class Model {
public:
    explicit Model(const ModelConfig& cfg);

    FeatureMap features(const Image& image, Aggregator::Ctx* ctx = nullptr) const;

    const ModelConfig& config() const { return cfg_; }
    int image_size() const { return adapter->input_height(); }

    std::unique_ptr<BackboneAdapter> adapter;
    Aggregator aggregator;
    ConvHead detector;
    ConvHead descriptor;
    Vae vae;

private:
    ModelConfig cfg_;
};

struct ExtractionOptions {
    int nms_window = 5;
    double nms_threshold = 0.25;
    int max_keypoints = 30;
};

// Detector -> NMS -> per-keypoint normalized descriptors, optionally with the
// latent pose code of the detector heatmap (inference-mode encoder).
ImageExtraction extract_keypoints(const Model& model, const Image& image, const ExtractionOptions& options,
                                  bool with_latent = false);

}  // namespace uld
