#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace uld {

// Procedural blob scene: the desk-scale stand-in for a pose-varying object.
// `landmarks` are the deformed (rendered) positions; `visible` tracks which
// ones survive the far-side occlusion rule at extreme poses.
struct SyntheticScene {
    int canvas = 64;
    double pose = 0.0;  // synthetic yaw in [-90, 90]
    double blob_radius = 4.0;
    double intensity_falloff = 14.0;  // radius at which rendered intensity bottoms out
    std::uint64_t appearance_seed = 0;
    std::vector<Eigen::Vector2d> landmarks;
    std::vector<bool> visible;

    int n_landmarks() const { return static_cast<int>(landmarks.size()); }
};

}  // namespace uld
