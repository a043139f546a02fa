// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sop2/backbone.hpp"
#include "sop2/tuner.hpp"

namespace sop2 {

// Binary container shared by model checkpoints and scene archives:
//   magic "SOP2CKPT" | u32 version | u64 config_len + config text (UTF-8)
//   | u32 tensor count | per tensor: u32 name_len + name, u32 ndim,
//   u64 dims..., u64 payload offset | u64 payload_len + payload.
// Payload is 32-bit little-endian floats, row-major, tensors packed in
// manifest order at non-overlapping offsets.
inline constexpr char kCheckpointMagic[8] = {'S', 'O', 'P', '2', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;
};

struct CheckpointData {
    std::string config_text;
    std::vector<CheckpointEntry> entries;

    const CheckpointEntry* find(const std::string& name) const;
};

std::vector<std::uint8_t> checkpoint_serialize(const CheckpointData& data);
CheckpointData checkpoint_parse(const std::uint8_t* bytes, std::size_t len);

void checkpoint_write_file(const std::string& path, const CheckpointData& data);
CheckpointData checkpoint_read_file(const std::string& path);

// Rounds each tensor to f32.
CheckpointData checkpoint_from_params(const std::string& config_text,
                                      const std::vector<NamedParam>& params);

struct LoadStats {
    int loaded = 0;  // tensors copied from the file
    int fresh = 0;   // model tensors absent from the file (keep their init)
};

// Copies file tensors into same-named model parameters. A file tensor
// with no matching model parameter, or a shape mismatch, is a DataError.
LoadStats checkpoint_load_params(const CheckpointData& data, std::vector<NamedParam>& params);

// ---- scene archives ---------------------------------------------------------

// One scene per record pair: "scene{i}.points" [n x 4] and
// "scene{i}.boxes" [b x 6] (cx, cy, length, width, yaw, class).
CheckpointData archive_from_scenes(const std::string& config_text,
                                   const std::vector<Scene>& scenes, const Extent& extent);
std::vector<Scene> scenes_from_archive(const CheckpointData& data, const Extent& extent);

}  // namespace sop2
