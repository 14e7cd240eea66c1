#include "uld/heads.hpp"

#include <algorithm>
#include <cmath>

namespace uld {

ConvHead::ConvHead(const HeadConfig& cfg, bool sigmoid_output) : cfg_(cfg), sigmoid_output_(sigmoid_output) {
    conv1_ = nn::Conv2d::create(store_, "conv1", cfg.in_channels, cfg.hidden1, 3);
    conv2_ = nn::Conv2d::create(store_, "conv2", cfg.hidden1, cfg.hidden2, 3);
    conv3_ = nn::Conv2d::create(store_, "conv3", cfg.hidden2, cfg.out_channels, 1);
    store_.finalize();
}

void ConvHead::init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    conv3_.init(rng);
}

Mat ConvHead::forward(const FeatureMap& fmap, Ctx& ctx) const {
    require(fmap.channels() == cfg_.in_channels, "ConvHead: feature channel count mismatch");
    ctx.h = fmap.height;
    ctx.w = fmap.width;
    ctx.z1 = conv1_.forward(fmap.values, fmap.height, fmap.width, ctx.c1);
    const Mat a1 = nn::relu(ctx.z1);
    ctx.z2 = conv2_.forward(a1, fmap.height, fmap.width, ctx.c2);
    const Mat a2 = nn::relu(ctx.z2);
    Mat y = conv3_.forward(a2, fmap.height, fmap.width, ctx.c3);
    if (sigmoid_output_) {
        ctx.out = nn::sigmoid(y);
        return ctx.out;
    }
    return y;
}

Mat ConvHead::backward(const Mat& d_out, const Ctx& ctx) {
    Mat dy = d_out;
    if (sigmoid_output_) dy = nn::sigmoid_backward(dy, ctx.out);
    const Mat da2 = conv3_.backward(dy, ctx.c3);
    const Mat dz2 = nn::relu_backward(da2, ctx.z2);
    const Mat da1 = conv2_.backward(dz2, ctx.c2);
    const Mat dz1 = nn::relu_backward(da1, ctx.z1);
    return conv1_.backward(dz1, ctx.c1);
}

Heatmap detect(const FeatureMap& fmap, const ConvHead& head, ConvHead::Ctx& ctx) {
    require(head.config().out_channels == 1, "detect: head must emit one channel");
    return column_as_heatmap(head.forward(fmap, ctx), fmap.height, fmap.width,
                             Heatmap::Source::detector_output);
}

Heatmap detect(const FeatureMap& fmap, const ConvHead& head) {
    ConvHead::Ctx ctx;
    return detect(fmap, head, ctx);
}

FeatureMap describe(const FeatureMap& fmap, const ConvHead& head, ConvHead::Ctx& ctx) {
    FeatureMap vol(fmap.height, fmap.width, head.config().out_channels, "descriptor_volume");
    vol.values = head.forward(fmap, ctx);
    return vol;
}

FeatureMap describe(const FeatureMap& fmap, const ConvHead& head) {
    ConvHead::Ctx ctx;
    return describe(fmap, head, ctx);
}

Mat heatmap_as_column(const Heatmap& h) {
    Mat col(static_cast<long>(h.height()) * h.width(), 1);
    for (int y = 0; y < h.height(); ++y)
        for (int x = 0; x < h.width(); ++x) col(static_cast<long>(y) * h.width() + x, 0) = h.grid(y, x);
    return col;
}

Heatmap column_as_heatmap(const Mat& column, int height, int width, Heatmap::Source source) {
    require(column.rows() == static_cast<long>(height) * width && column.cols() == 1,
            "column_as_heatmap: size mismatch");
    Heatmap h(height, width, source);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) h.grid(y, x) = column(static_cast<long>(y) * width + x, 0);
    return h;
}

std::vector<Keypoint> nms_extract(const Heatmap& h, int window, double threshold, int max_n) {
    require(window >= 3 && window % 2 == 1, "nms_extract: window must be odd and >= 3");
    require(max_n >= 0, "nms_extract: max_n must be >= 0");
    const int half = window / 2;
    const int height = h.height();
    const int width = h.width();

    std::vector<Keypoint> peaks;
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const double v = h.grid(y, x);
            if (v < threshold) continue;
            bool strict_max = true;
            for (int dy = -half; dy <= half && strict_max; ++dy) {
                const int yy = y + dy;
                if (yy < 0 || yy >= height) continue;
                for (int dx = -half; dx <= half; ++dx) {
                    const int xx = x + dx;
                    if (xx < 0 || xx >= width || (dx == 0 && dy == 0)) continue;
                    if (h.grid(yy, xx) >= v) {
                        strict_max = false;
                        break;
                    }
                }
            }
            if (strict_max) peaks.push_back({static_cast<double>(x), static_cast<double>(y), v});
        }
    }
    std::sort(peaks.begin(), peaks.end(), [](const Keypoint& a, const Keypoint& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });
    if (static_cast<int>(peaks.size()) > max_n) peaks.resize(max_n);
    return peaks;
}

Descriptor sample_descriptor(const FeatureMap& volume, const Keypoint& p) {
    const Vec raw = nn::bilinear_sample(volume.values, volume.width, volume.height, p.x, p.y);
    Descriptor d;
    d.f = nn::l2_normalize(raw);
    d.normalized = true;
    return d;
}

Heatmap render_gaussians(const std::vector<Keypoint>& points, double sigma, int height, int width) {
    require(sigma > 0.0, "render_gaussians: sigma must be positive");
    Heatmap h(height, width, Heatmap::Source::pseudo_gt);
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (const Keypoint& p : points) {
        // Only touch the neighborhood where the Gaussian is non-negligible.
        const int reach = static_cast<int>(std::ceil(6.0 * sigma));
        const int x0 = std::max(0, static_cast<int>(std::floor(p.x)) - reach);
        const int x1 = std::min(width - 1, static_cast<int>(std::ceil(p.x)) + reach);
        const int y0 = std::max(0, static_cast<int>(std::floor(p.y)) - reach);
        const int y1 = std::min(height - 1, static_cast<int>(std::ceil(p.y)) + reach);
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                const double d2 = (x - p.x) * (x - p.x) + (y - p.y) * (y - p.y);
                h.grid(y, x) = std::max(h.grid(y, x), std::exp(-d2 * inv));
            }
        }
    }
    return h;
}

}  // namespace uld
