#pragma once

#include "uld/rng.hpp"
#include "uld/types.hpp"

#include <cstdint>
#include <vector>

namespace uld {

// Similarity transform about the image centre: p' = s * R(angle) * F * (p - c) + c + t,
// where F mirrors x when flip is set. A pure horizontal flip maps (x, y) to
// (W-1-x, y).
struct SimilarityTransform {
    double angle = 0.0;  // radians
    bool flip = false;
    double scale = 1.0;
    double tx = 0.0, ty = 0.0;

    Eigen::Vector2d apply(const Eigen::Vector2d& p, int width, int height) const;
    Eigen::Vector2d apply_inverse(const Eigen::Vector2d& p, int width, int height) const;
    bool is_identity() const { return angle == 0.0 && !flip && scale == 1.0 && tx == 0.0 && ty == 0.0; }

    static SimilarityTransform identity() { return {}; }
};

struct AugmentationConfig {
    double max_rotation_deg = 30.0;
    double flip_probability = 0.5;
    double min_scale = 1.0;
    double max_scale = 1.0;
    double max_translation = 0.0;
};

struct CorrespondencePair {
    Image original;
    Image augmented;
    SimilarityTransform transform;
    std::vector<std::uint8_t> valid;  // per original pixel: transform maps it inside bounds
    long valid_count = 0;
};

// Draws a transform uniformly within the configured bounds and warps the
// image; the mask marks original pixels whose transformed position lands
// inside the augmented canvas.
CorrespondencePair make_pair(const Image& image, std::uint64_t seed, const AugmentationConfig& config);
CorrespondencePair make_pair(const Image& image, const SimilarityTransform& transform);

// output(q) = bilinear(input, A^-1(q)); pixels with out-of-bounds preimage
// are zero. The identity transform reproduces the input exactly.
Image warp_image(const Image& image, const SimilarityTransform& transform);

}  // namespace uld
