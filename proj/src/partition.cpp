// SPDX-License-Identifier: Apache-2.0
#include "sop2/partition.hpp"

#include <algorithm>
#include <map>

namespace sop2 {

std::vector<long> window_assign(const std::vector<std::array<int, 2>>& coords,
                                const WindowSize& window, int nx, int ny) {
    if (window.wx < 1 || window.wy < 1) {
        throw ConfigError("window_assign: window sizes must be at least 1");
    }
    (void)nx;
    const long nwy = (ny + window.wy - 1) / window.wy;
    std::vector<long> ids;
    ids.reserve(coords.size());
    for (const auto& c : coords) {
        const long wxi = c[0] / window.wx;
        const long wyi = c[1] / window.wy;
        ids.push_back(wxi * nwy + wyi);
    }
    return ids;
}

SetPartition set_partition(const VoxelGrid& vg, const WindowSize& window, Axis axis,
                           int set_capacity, int partition_index) {
    if (set_capacity < 1) throw ConfigError("set_partition: set capacity must be at least 1");

    SetPartition sp;
    sp.index = partition_index;
    sp.axis = axis;
    sp.set_capacity = set_capacity;
    sp.window = window;

    const std::vector<long> wids = window_assign(vg.coords, window, vg.nx, vg.ny);

    // Group voxel rows by window, ordered by window id.
    std::map<long, std::vector<int>> groups;
    for (int r = 0; r < vg.voxel_count(); ++r) {
        groups[wids[static_cast<std::size_t>(r)]].push_back(r);
    }

    for (auto& [wid, rows] : groups) {
        // Canonical total order: (axis coord, other coord, grid-row index).
        std::sort(rows.begin(), rows.end(), [&](int a, int b) {
            const auto& ca = vg.coords[static_cast<std::size_t>(a)];
            const auto& cb = vg.coords[static_cast<std::size_t>(b)];
            const int pa = axis == Axis::X ? ca[0] : ca[1];
            const int pb = axis == Axis::X ? cb[0] : cb[1];
            const int sa = axis == Axis::X ? ca[1] : ca[0];
            const int sb = axis == Axis::X ? cb[1] : cb[0];
            if (pa != pb) return pa < pb;
            if (sa != sb) return sa < sb;
            return a < b;
        });
        for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(set_capacity)) {
            VoxelSet set;
            set.window_id = wid;
            set.rows.assign(static_cast<std::size_t>(set_capacity), -1);
            const std::size_t end = std::min(rows.size(), start + static_cast<std::size_t>(set_capacity));
            set.valid = static_cast<int>(end - start);
            for (std::size_t i = start; i < end; ++i) {
                set.rows[i - start] = rows[i];
            }
            sp.sets.push_back(std::move(set));
        }
    }
    return sp;
}

Tensor gather_set(const SetPartition& sp, int set_index, const Tensor& features) {
    return gather_rows(features, sp.sets[static_cast<std::size_t>(set_index)].rows);
}

Tensor scatter_back(const SetPartition& sp, const std::vector<Tensor>& set_outputs,
                    int voxel_count) {
    if (set_outputs.size() != sp.sets.size()) {
        throw DimensionError("scatter_back: " + std::to_string(set_outputs.size()) +
                             " outputs for " + std::to_string(sp.sets.size()) + " sets");
    }
    std::vector<std::vector<int>> rows;
    rows.reserve(sp.sets.size());
    for (std::size_t i = 0; i < sp.sets.size(); ++i) {
        if (set_outputs[i].rank() != 2 ||
            set_outputs[i].dim(0) != sp.set_capacity) {
            throw DimensionError("scatter_back: set output " + std::to_string(i) + " has shape " +
                                 Tensor::shape_str(set_outputs[i].shape()) + ", expected " +
                                 std::to_string(sp.set_capacity) + " rows");
        }
        rows.push_back(sp.sets[i].rows);
    }
    const int c = sp.sets.empty() ? 0 : set_outputs[0].dim(1);
    if (sp.sets.empty()) return Tensor::zeros({voxel_count, c});
    return scatter_rows(set_outputs, rows, voxel_count);
}

}  // namespace sop2
