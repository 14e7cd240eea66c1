#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace uld {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Dense per-pixel descriptor grid. Pixels are stored row-major as rows of
// `values` (pixel index = y * width + x), channels as columns. The same type
// doubles as an RGB image container (channels == 3).
struct FeatureMap {
    Mat values;  // (height * width) x channels
    int height = 0;
    int width = 0;
    std::string provenance;

    FeatureMap() = default;
    FeatureMap(int h, int w, int channels, std::string prov = {})
        : values(Mat::Zero(h * w, channels)), height(h), width(w), provenance(std::move(prov)) {}

    int channels() const { return static_cast<int>(values.cols()); }
    int pixels() const { return height * width; }
    long index(int x, int y) const { return static_cast<long>(y) * width + x; }

    bool finite() const { return values.allFinite(); }
};

using Image = FeatureMap;

// Single-channel confidence or pseudo-ground-truth map, values in [0, 1].
struct Heatmap {
    enum class Source { detector_output, pseudo_gt };

    Mat grid;  // height x width
    Source source = Source::detector_output;

    Heatmap() = default;
    Heatmap(int h, int w, Source s = Source::detector_output) : grid(Mat::Zero(h, w)), source(s) {}

    int height() const { return static_cast<int>(grid.rows()); }
    int width() const { return static_cast<int>(grid.cols()); }
};

struct Keypoint {
    double x = 0.0;
    double y = 0.0;
    double score = 0.0;
};

struct Descriptor {
    Vec f;
    bool normalized = false;
};

// Axis-aligned region of interest in pixel coordinates, inclusive bounds.
struct RoI {
    double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }

    // Clamps to [0, w-1] x [0, h-1] and validates that a non-empty box remains.
    RoI clamped(int image_width, int image_height) const {
        RoI r = *this;
        r.x_min = std::max(0.0, r.x_min);
        r.y_min = std::max(0.0, r.y_min);
        r.x_max = std::min(static_cast<double>(image_width - 1), r.x_max);
        r.y_max = std::min(static_cast<double>(image_height - 1), r.y_max);
        if (r.x_min >= r.x_max || r.y_min >= r.y_max)
            throw std::invalid_argument("RoI: empty box after clamping to image bounds");
        return r;
    }
};

inline void require(bool cond, const std::string& what) {
    if (!cond) throw std::invalid_argument(what);
}

}  // namespace uld
