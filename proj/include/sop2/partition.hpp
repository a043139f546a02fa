// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "sop2/pointcloud.hpp"
#include "sop2/tensor.hpp"

namespace sop2 {

enum class Axis { X, Y };

struct WindowSize {
    int wx = 12;
    int wy = 12;
};

// One fixed-capacity voxel set: up to n_s voxel rows gathered from the
// feature table. Slots beyond `valid` are padding (mask false, row -1).
struct VoxelSet {
    long window_id = 0;
    int valid = 0;
    std::vector<int> rows;  // length n_s, -1 for padding

    Mask mask() const {
        Mask m(rows.size(), 0);
        for (int i = 0; i < valid; ++i) m[static_cast<std::size_t>(i)] = 1;
        return m;
    }
};

// All nonzero voxels of one grid grouped into disjoint fixed-capacity sets
// within spatial windows, sorted along the partition axis.
struct SetPartition {
    int index = 1;  // 1-based over all partitions (odd: X, even: Y)
    Axis axis = Axis::X;
    int set_capacity = 36;  // n_s
    WindowSize window;
    std::vector<VoxelSet> sets;

    int set_count() const { return static_cast<int>(sets.size()); }
};

// blocks (default 4) x two partitions each; window sizes alternate across
// blocks. Partition j (1-based): odd j sorts along X, even j along Y.
struct PartitionSchedule {
    int blocks = 4;
    std::vector<WindowSize> window_per_block = {{12, 12}, {24, 24}, {12, 12}, {24, 24}};
    int set_capacity = 36;

    int total_partitions() const { return 2 * blocks; }
    Axis axis_of(int partition_index) const {  // 1-based
        return partition_index % 2 == 1 ? Axis::X : Axis::Y;
    }
    const WindowSize& window_of(int partition_index) const {
        return window_per_block[static_cast<std::size_t>((partition_index - 1) / 2)];
    }
};

// id = (floor(ix/wx), floor(iy/wy)) flattened row-major over the window grid.
std::vector<long> window_assign(const std::vector<std::array<int, 2>>& coords,
                                const WindowSize& window, int nx, int ny);

SetPartition set_partition(const VoxelGrid& vg, const WindowSize& window, Axis axis,
                           int set_capacity, int partition_index = 1);

// Gathers one set's feature rows as [n_s x C]; padding slots are zero rows.
Tensor gather_set(const SetPartition& sp, int set_index, const Tensor& features);

// Inverse of gathering: writes each valid (set, slot) row back to its voxel
// row. Relies on the coverage invariant (each voxel appears exactly once).
Tensor scatter_back(const SetPartition& sp, const std::vector<Tensor>& set_outputs,
                    int voxel_count);

}  // namespace sop2
