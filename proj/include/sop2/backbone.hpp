// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sop2/partition.hpp"
#include "sop2/pointcloud.hpp"
#include "sop2/prompts.hpp"
#include "sop2/tensor.hpp"

namespace sop2 {

enum class PromptMode { none, token, generator, pool };

const char* to_string(PromptMode m);
PromptMode prompt_mode_from_string(const std::string& s);

// Full hyperparameter record for one model. Defaults follow the reference
// setup: 192 channels, four blocks of two partitions, n_s = 36, hybrid
// 12/24 windows on a 0.32 m grid, M = 40, n_P = 5, K = 8, n_T = n_G = 1.
struct ModelConfig {
    int channels = 192;
    int blocks = 4;
    int heads = 8;
    int set_capacity = 36;  // n_s
    std::vector<int> window_sizes = {12, 24, 12, 24};  // square windows, one per block
    GridSpec grid;
    Extent extent;
    int max_points_per_voxel = 32;
    int vfe_layers = 1;
    int mlp_hidden_ratio = 2;
    int head_hidden = 64;

    PromptMode prompt_mode = PromptMode::none;
    std::vector<int> prompt_partitions;  // 1-based; empty means every partition
    int n_t = 1;
    int n_g = 1;
    int gen_layers = 4;
    int pool_m = 40;
    int pool_n_p = 5;
    int pool_k = 8;
    double lambda_key = 0.1;
    bool key_pull = true;

    int lora_rank = 4;
    double lora_alpha = 8.0;

    double layer_norm_eps = 1e-5;
    double cosine_eps = 1e-8;
    std::uint64_t seed = 0;

    int total_partitions() const { return 2 * blocks; }
    int bev_nx() const;
    int bev_ny() const;
    PartitionSchedule schedule() const;
    // Expands prompt_mode + prompt_partitions into one mode per partition.
    std::vector<PromptMode> mode_per_partition() const;
    void validate() const;
};

enum class ParamGroup { head, backbone, bias, prompt_token, generator, pool, lora };

const char* to_string(ParamGroup g);

struct NamedParam {
    std::string name;
    Tensor tensor;  // shares storage with the model
    ParamGroup group;
};

struct PartitionLayer {
    AttentionWeights attn;
    Linear mlp_in, mlp_out;
    Tensor ln1_gamma, ln1_beta;
    Tensor ln2_gamma, ln2_beta;
    std::optional<PromptToken> prompt_token;
    std::optional<PromptGenerator> prompt_generator;
    std::optional<PromptPool> prompt_pool;
};

struct DetectionHead {
    Linear cls_in, cls_out;  // C -> hidden -> 3
    Linear reg_in, reg_out;  // C -> hidden -> 5
};

struct Model {
    ModelConfig cfg;
    VfeWeights vfe;
    std::vector<PartitionLayer> partitions;  // 2 * blocks, index j-1
    DetectionHead head;

    static Model build(const ModelConfig& cfg);
    // Stable, name-unique enumeration of every parameter tensor.
    std::vector<NamedParam> parameters() const;
};

// Dense bird's-eye-view map scattered from voxel features. Row layout:
// cell (ix, iy) lives at row iy * nx + ix.
struct BevMap {
    Tensor features;  // [(ny * nx) x C]
    int nx = 0, ny = 0;
};

struct Detections {
    Tensor cls_logits;  // [(ny * nx) x 3]
    Tensor box_reg;     // [(ny * nx) x 5]: dx, dy, log l, log w, yaw
    int nx = 0, ny = 0;
};

struct ForwardResult {
    Detections det;
    // Sum of (1 - score) over all selected pool keys, every partition;
    // scaled by lambda_key when added to the training loss.
    Tensor key_pull_sum;
    VoxelGrid vg;
};

struct ForwardOptions {
    // When set, receives a value copy of the features entering each
    // partition (2 * blocks entries), plus the VFE output at index 0.
    std::vector<Tensor>* partition_input_taps = nullptr;
    // When set, receives per-partition per-set masked mean features
    // (embedding export).
    std::vector<std::vector<std::vector<double>>>* set_mean_taps = nullptr;
};

// Drops the first p rows of an attention output, keeping the voxel rows.
Tensor strip_prompts(const Tensor& prompted_output, int prompt_rows);

// One block: two set partitions (X then Y), each optionally prompted, with
// attention + MLP sublayers and residual/norm wiring, scattered back to
// the voxel table. Accumulates pool key-pull terms into key_pull_sum.
Tensor block_forward(const Model& m, Tensor features, const VoxelGrid& vg, int block_index,
                     Tensor& key_pull_sum, const ForwardOptions& opts = {});

Detections head_forward(const BevMap& bev, const DetectionHead& head);

// Focal binary cross-entropy (alpha = 0.25, gamma = 2) on the class
// heatmap plus L1 on box regression at positive cells, summed 1:1.
Tensor detection_loss(const Detections& det, const SceneLabel& label, const ModelConfig& cfg);

ForwardResult model_forward(const Model& m, const PointCloud& pc,
                            const ForwardOptions& opts = {});

}  // namespace sop2
