#include "uld/augment.hpp"

#include "uld/nn.hpp"

#include <cmath>

namespace uld {

namespace {

Eigen::Matrix2d linear_part(const SimilarityTransform& t) {
    Eigen::Matrix2d rot;
    rot << std::cos(t.angle), -std::sin(t.angle), std::sin(t.angle), std::cos(t.angle);
    Eigen::Matrix2d mirror = Eigen::Matrix2d::Identity();
    if (t.flip) mirror(0, 0) = -1.0;
    return t.scale * rot * mirror;
}

Eigen::Vector2d centre(int width, int height) {
    return {0.5 * (width - 1), 0.5 * (height - 1)};
}

}  // namespace

Eigen::Vector2d SimilarityTransform::apply(const Eigen::Vector2d& p, int width, int height) const {
    const Eigen::Vector2d c = centre(width, height);
    return linear_part(*this) * (p - c) + c + Eigen::Vector2d(tx, ty);
}

Eigen::Vector2d SimilarityTransform::apply_inverse(const Eigen::Vector2d& p, int width, int height) const {
    require(scale > 0.0, "SimilarityTransform: scale must be positive");
    const Eigen::Vector2d c = centre(width, height);
    return linear_part(*this).inverse() * (p - c - Eigen::Vector2d(tx, ty)) + c;
}

Image warp_image(const Image& image, const SimilarityTransform& transform) {
    if (transform.is_identity()) return image;
    Image out(image.height, image.width, image.channels(), image.provenance);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const Eigen::Vector2d src = transform.apply_inverse({static_cast<double>(x), static_cast<double>(y)},
                                                                image.width, image.height);
            if (src.x() < 0.0 || src.x() > image.width - 1.0 || src.y() < 0.0 || src.y() > image.height - 1.0)
                continue;
            out.values.row(out.index(x, y)) =
                nn::bilinear_sample(image.values, image.width, image.height, src.x(), src.y()).transpose();
        }
    }
    return out;
}

CorrespondencePair make_pair(const Image& image, const SimilarityTransform& transform) {
    CorrespondencePair pair;
    pair.original = image;
    pair.transform = transform;
    pair.augmented = warp_image(image, transform);
    pair.valid.assign(static_cast<std::size_t>(image.pixels()), 0);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            const Eigen::Vector2d q =
                transform.apply({static_cast<double>(x), static_cast<double>(y)}, image.width, image.height);
            if (q.x() >= 0.0 && q.x() <= image.width - 1.0 && q.y() >= 0.0 && q.y() <= image.height - 1.0) {
                pair.valid[static_cast<std::size_t>(image.index(x, y))] = 1;
                ++pair.valid_count;
            }
        }
    }
    return pair;
}

CorrespondencePair make_pair(const Image& image, std::uint64_t seed, const AugmentationConfig& config) {
    require(config.min_scale > 0.0 && config.max_scale >= config.min_scale,
            "make_pair: invalid scale bounds");
    Rng rng(seed);
    SimilarityTransform t;
    const double bound = config.max_rotation_deg * M_PI / 180.0;
    t.angle = bound > 0.0 ? uniform(rng, -bound, bound) : 0.0;
    t.flip = config.flip_probability > 0.0 && uniform(rng, 0.0, 1.0) < config.flip_probability;
    t.scale = config.max_scale > config.min_scale ? uniform(rng, config.min_scale, config.max_scale)
                                                  : config.min_scale;
    if (config.max_translation > 0.0) {
        t.tx = uniform(rng, -config.max_translation, config.max_translation);
        t.ty = uniform(rng, -config.max_translation, config.max_translation);
    }
    return make_pair(image, t);
}

}  // namespace uld
