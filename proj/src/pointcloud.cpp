// SPDX-License-Identifier: Apache-2.0
#include "sop2/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

namespace sop2 {

namespace {

// Master sampling densities for the thinning construction: a fixed-rate
// master point set is drawn per scene and each point keeps an independent
// uniform; a point survives iff u < density / cap. Raising the density
// therefore keeps a superset of the retained points, which makes the
// voxel count monotone in density by construction.
constexpr double kGroundCap = 32.0;   // points / m^2
constexpr double kBoxCap = 256.0;     // points / m^2
constexpr double kBoxDensityRatio = 8.0;  // box interior density vs ground

constexpr double kClassLength[3] = {4.2, 0.6, 1.8};
constexpr double kClassWidth[3] = {1.8, 0.6, 0.6};
constexpr double kClassHeight[3] = {1.6, 1.7, 1.5};

double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

}  // namespace

void DomainParams::validate() const {
    if (!(density > 0.0)) throw ConfigError("domain density must be positive");
    if (density > kGroundCap) {
        throw ConfigError("domain density exceeds the supported maximum of " +
                          std::to_string(kGroundCap) + " points/m^2");
    }
    double s = 0.0;
    for (double p : class_mix) {
        if (p < 0.0) throw ConfigError("class mix probabilities must be non-negative");
        s += p;
    }
    if (std::fabs(s - 1.0) > 1e-9) throw ConfigError("class mix must sum to 1");
}

std::pair<PointCloud, SceneLabel> gen_scene(std::uint64_t seed, const DomainParams& params,
                                            const Extent& extent) {
    if (extent.empty()) throw ConfigError("gen_scene: empty extent");
    params.validate();

    std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + 0xd1b54a32d192ed03ull);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    PointCloud pc;
    pc.extent = extent;
    SceneLabel label;

    const double zs_lo = extent.z_min;
    const double zs_hi = std::nextafter(extent.z_max, extent.z_min);
    auto clamp_point = [&](Point p) {
        p.x = clampd(p.x, extent.x_min, std::nextafter(extent.x_max, extent.x_min));
        p.y = clampd(p.y, extent.y_min, std::nextafter(extent.y_max, extent.y_min));
        p.z = clampd(p.z, zs_lo, zs_hi);
        p.intensity = clampd(p.intensity, 0.0, 1.0);
        return p;
    };

    // Boxes first; their count and geometry do not depend on density.
    const int n_boxes = 2 + static_cast<int>(rng() % 3ull);
    const double margin = 3.0;
    for (int b = 0; b < n_boxes; ++b) {
        Box box;
        const double u = unit(rng);
        box.cls = u < params.class_mix[0] ? 0 : (u < params.class_mix[0] + params.class_mix[1] ? 1 : 2);
        box.cx = extent.x_min + margin + unit(rng) * (extent.x_max - extent.x_min - 2 * margin);
        box.cy = extent.y_min + margin + unit(rng) * (extent.y_max - extent.y_min - 2 * margin);
        box.length = kClassLength[box.cls] * params.box_scale;
        box.width = kClassWidth[box.cls] * params.box_scale;
        box.yaw = (unit(rng) * 2.0 - 1.0) * M_PI;
        label.boxes.push_back(box);
    }

    // Ground master set, thinned to the requested density.
    const double keep_ground = params.density / kGroundCap;
    std::poisson_distribution<int> ground_count(kGroundCap * extent.area());
    const int n_ground_master = ground_count(rng);
    std::normal_distribution<double> ground_z(0.0, 0.05);
    for (int i = 0; i < n_ground_master; ++i) {
        Point p;
        p.x = extent.x_min + unit(rng) * (extent.x_max - extent.x_min);
        p.y = extent.y_min + unit(rng) * (extent.y_max - extent.y_min);
        p.z = params.sensor_height + ground_z(rng);
        p.intensity = unit(rng) * 0.4 + params.intensity_bias;
        const double keep = unit(rng);
        if (keep < keep_ground) pc.points.push_back(clamp_point(p));
    }

    // Box interiors at elevated density, same thinning construction.
    const double box_density = std::min(kBoxDensityRatio * params.density, kBoxCap);
    const double keep_box = box_density / kBoxCap;
    bool any_box_point = false;
    for (const Box& box : label.boxes) {
        std::poisson_distribution<int> box_count(kBoxCap * box.length * box.width);
        const int n_master = box_count(rng);
        const double cy = std::cos(box.yaw), sy = std::sin(box.yaw);
        for (int i = 0; i < n_master; ++i) {
            const double lu = (unit(rng) - 0.5) * box.length;
            const double lv = (unit(rng) - 0.5) * box.width;
            Point p;
            p.x = box.cx + lu * cy - lv * sy;
            p.y = box.cy + lu * sy + lv * cy;
            p.z = params.sensor_height + unit(rng) * kClassHeight[box.cls];
            p.intensity = 0.5 + unit(rng) * 0.5 + params.intensity_bias;
            const double keep = unit(rng);
            if (keep < keep_box) {
                pc.points.push_back(clamp_point(p));
                any_box_point = true;
            }
        }
    }
    if (!any_box_point) {
        throw DataError("gen_scene: density too low to place any box point (seed " +
                        std::to_string(seed) + ")");
    }
    return {std::move(pc), std::move(label)};
}

VoxelGrid voxelize(const PointCloud& pc, const GridSpec& grid, int max_points_per_voxel) {
    if (!(grid.dx > 0.0) || !(grid.dy > 0.0) || !(grid.dz > 0.0)) {
        throw ConfigError("voxelize: grid cell sizes must be positive");
    }
    if (max_points_per_voxel < 1) {
        throw ConfigError("voxelize: max_points_per_voxel must be at least 1");
    }
    VoxelGrid vg;
    vg.grid = grid;
    vg.extent = pc.extent;
    vg.nx = std::max(1, static_cast<int>(std::ceil((pc.extent.x_max - pc.extent.x_min) / grid.dx)));
    vg.ny = std::max(1, static_cast<int>(std::ceil((pc.extent.y_max - pc.extent.y_min) / grid.dy)));

    // std::map keeps voxels ordered by (ix, iy) deterministically.
    std::map<std::pair<int, int>, std::vector<Point>> cells;
    for (const Point& p : pc.points) {
        int ix = static_cast<int>(std::floor((p.x - pc.extent.x_min) / grid.dx));
        int iy = static_cast<int>(std::floor((p.y - pc.extent.y_min) / grid.dy));
        ix = std::min(std::max(ix, 0), vg.nx - 1);
        iy = std::min(std::max(iy, 0), vg.ny - 1);
        auto& bucket = cells[{ix, iy}];
        if (static_cast<int>(bucket.size()) < max_points_per_voxel) bucket.push_back(p);
    }
    vg.coords.reserve(cells.size());
    vg.points_per_voxel.reserve(cells.size());
    for (auto& [key, bucket] : cells) {
        vg.coords.push_back({key.first, key.second});
        vg.points_per_voxel.push_back(std::move(bucket));
    }
    return vg;
}

Tensor vfe_forward(const VoxelGrid& vg, const VfeWeights& weights) {
    if (weights.layers.empty()) throw ConfigError("vfe_forward: no encoder layers");
    if (weights.layers[0].in_features() != kVfeInputChannels) {
        throw DimensionError("vfe_forward: first layer expects " +
                             std::to_string(kVfeInputChannels) + " input channels, got " +
                             std::to_string(weights.layers[0].in_features()));
    }
    const int c = weights.layers.back().out_features();
    const int v = vg.voxel_count();
    if (v == 0) return Tensor::zeros({0, c});

    std::vector<Tensor> voxel_feats;
    voxel_feats.reserve(static_cast<std::size_t>(v));
    for (int i = 0; i < v; ++i) {
        const auto& pts = vg.points_per_voxel[static_cast<std::size_t>(i)];
        const int np = static_cast<int>(pts.size());
        const double cx = vg.extent.x_min + (vg.coords[static_cast<std::size_t>(i)][0] + 0.5) * vg.grid.dx;
        const double cyc = vg.extent.y_min + (vg.coords[static_cast<std::size_t>(i)][1] + 0.5) * vg.grid.dy;
        std::vector<double> rows(static_cast<std::size_t>(np) * kVfeInputChannels);
        for (int p = 0; p < np; ++p) {
            const Point& pt = pts[static_cast<std::size_t>(p)];
            double* r = rows.data() + static_cast<std::size_t>(p) * kVfeInputChannels;
            r[0] = pt.x;
            r[1] = pt.y;
            r[2] = pt.z;
            r[3] = pt.intensity;
            r[4] = pt.x - cx;
            r[5] = pt.y - cyc;
            r[6] = pt.z;
        }
        Tensor x = Tensor::from({np, kVfeInputChannels}, std::move(rows));
        for (std::size_t l = 0; l < weights.layers.size(); ++l) {
            x = relu(weights.layers[l].forward(x));
        }
        Tensor pooled = max_pool_rows(x, Mask(static_cast<std::size_t>(np), 1));
        voxel_feats.push_back(reshape(pooled, {1, c}));
    }
    return concat_rows(voxel_feats);
}

}  // namespace sop2
