#pragma once

#include "uld/nn.hpp"
#include "uld/types.hpp"

#include <vector>

namespace uld {

struct HeadConfig {
    int in_channels = 12;
    int hidden1 = 12;
    int hidden2 = 12;
    int out_channels = 1;  // 1 for the detector, descriptor dimension for the descriptor head
};

// Three-layer conv stack: 3x3 -> relu -> 3x3 -> relu -> 1x1. The detector
// finishes with a sigmoid so the heatmap lives in [0, 1]; the descriptor head
// emits the raw volume (normalization happens at sampling / loss time).
class ConvHead {
public:
    ConvHead(const HeadConfig& cfg, bool sigmoid_output);

    void init(Rng& rng);  // He weights, zero biases

    struct Ctx {
        nn::Conv2d::Ctx c1, c2, c3;
        Mat z1, z2;   // pre-activations
        Mat out;      // post-sigmoid output when applicable
        int h = 0, w = 0;
    };

    Mat forward(const FeatureMap& fmap, Ctx& ctx) const;
    // Accumulates parameter gradients, returns the gradient w.r.t. the input
    // feature map values.
    Mat backward(const Mat& d_out, const Ctx& ctx);

    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }
    const HeadConfig& config() const { return cfg_; }

private:
    HeadConfig cfg_;
    bool sigmoid_output_;
    nn::ParamStore store_;
    nn::Conv2d conv1_, conv2_, conv3_;
};

// Detector head: feature map -> single-channel heatmap in [0, 1].
Heatmap detect(const FeatureMap& fmap, const ConvHead& head, ConvHead::Ctx& ctx);
Heatmap detect(const FeatureMap& fmap, const ConvHead& head);

// Descriptor head: feature map -> descriptor volume (H x W x D, unnormalized).
FeatureMap describe(const FeatureMap& fmap, const ConvHead& head, ConvHead::Ctx& ctx);
FeatureMap describe(const FeatureMap& fmap, const ConvHead& head);

// Pixel-major (y * W + x) column view conversions between heatmaps and the
// single-channel matrices the conv stack works on.
Mat heatmap_as_column(const Heatmap& h);
Heatmap column_as_heatmap(const Mat& column, int height, int width,
                          Heatmap::Source source = Heatmap::Source::detector_output);

// Strict local maxima over an odd window, score >= threshold, sorted by
// descending score (ties by y then x), at most max_n. A constant region has
// no strict maxima and yields nothing.
std::vector<Keypoint> nms_extract(const Heatmap& h, int window, double threshold, int max_n);

// Bilinear interpolation at p followed by L2 normalization.
Descriptor sample_descriptor(const FeatureMap& volume, const Keypoint& p);

// Pixel-wise max of K unit-height Gaussians centred at the given points.
Heatmap render_gaussians(const std::vector<Keypoint>& points, double sigma, int height, int width);

}  // namespace uld
