// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "sop2/tensor.hpp"

namespace sop2 {

struct Extent {
    double x_min = 0.0, x_max = 46.08;
    double y_min = 0.0, y_max = 46.08;
    double z_min = 0.0, z_max = 6.0;

    double area() const { return (x_max - x_min) * (y_max - y_min); }
    bool empty() const { return x_max <= x_min || y_max <= y_min || z_max <= z_min; }
};

struct Point {
    double x, y, z, intensity;
};

struct PointCloud {
    std::vector<Point> points;
    Extent extent;
};

struct Box {
    double cx, cy;
    double length, width;
    double yaw;  // radians in [-pi, pi]
    int cls;     // 0..2
};

struct SceneLabel {
    std::vector<Box> boxes;
};

// Knobs that realize a controllable source->target shift on synthetic
// scenes.
struct DomainParams {
    double density = 3.0;             // ground points per square meter
    double sensor_height = 0.0;       // meters added to every z
    double intensity_bias = 0.0;      // added to intensities, result clamped to [0,1]
    double box_scale = 1.0;           // multiplies box length/width
    std::array<double, 3> class_mix = {0.5, 0.3, 0.2};

    void validate() const;
};

struct GridSpec {
    double dx = 0.32, dy = 0.32, dz = 6.0;
};

// Pillar voxel grid before feature encoding: unique (ix, iy) cells holding
// up to P points each.
struct VoxelGrid {
    GridSpec grid;
    Extent extent;
    int nx = 0, ny = 0;  // cells along x / y
    std::vector<std::array<int, 2>> coords;           // [V x 2] as (ix, iy)
    std::vector<std::vector<Point>> points_per_voxel;  // first-P points in input order

    int voxel_count() const { return static_cast<int>(coords.size()); }
};

std::pair<PointCloud, SceneLabel> gen_scene(std::uint64_t seed, const DomainParams& params,
                                            const Extent& extent);

VoxelGrid voxelize(const PointCloud& pc, const GridSpec& grid, int max_points_per_voxel = 32);

// One linear layer (7 -> C) + ReLU per point, optional extra C -> C
// layers, then a channelwise max over each voxel's points. Differentiable.
struct VfeWeights {
    std::vector<Linear> layers;  // layers[0]: 7 -> C, rest C -> C
};

// Per-point input features: (x, y, z, intensity, dx-to-center, dy-to-center, z).
constexpr int kVfeInputChannels = 7;

Tensor vfe_forward(const VoxelGrid& vg, const VfeWeights& weights);

}  // namespace sop2
