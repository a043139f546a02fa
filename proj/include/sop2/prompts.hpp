// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "sop2/partition.hpp"
#include "sop2/tensor.hpp"

namespace sop2 {

// One set after prompt attachment: p prompt rows prepended to the n_s
// gathered voxel rows. Prompt rows carry mask true.
struct PromptedSet {
    Tensor tokens;  // [(p + n_s) x C]
    Mask mask;
    int prompt_rows = 0;
};

// Static learnable tokens shared by every set of one partition.
struct PromptToken {
    Tensor tokens;  // [n_T x C]
    int partition_index = 1;

    int count() const { return tokens.dim(0); }
    int channels() const { return tokens.dim(1); }
};

// Per-partition MLP producing input-conditioned prompts. All layers map
// C -> C except the last, which widens to n_G * C so the output reshapes
// to [n_G x C].
struct PromptGenerator {
    std::vector<Linear> mlp;
    int partition_index = 1;
    int prompt_count = 1;  // n_G

    int channels() const { return mlp.front().in_features(); }
};

// M (key, value-block) pairs per partition. Values are stored flat as
// [(M * n_P) x C]; block m occupies rows [m*n_P, (m+1)*n_P).
struct PromptPool {
    Tensor keys;    // [M x C]
    Tensor values;  // [(M * n_P) x C]
    int partition_index = 1;
    int size = 40;           // M
    int prompt_length = 5;   // n_P
    int select_count = 8;    // K
    double cosine_eps = 1e-8;

    Tensor value_block(int m) const {
        return slice_rows(values, m * prompt_length, (m + 1) * prompt_length);
    }
};

struct PoolSelection {
    std::vector<int> indices;     // K pool rows, descending score
    Tensor prompts;               // [K x n_P x C]
    std::vector<Tensor> scores;   // K scalars, descending
};

struct PoolAttachResult {
    std::vector<PromptedSet> sets;
    std::vector<std::vector<int>> selected;  // per-set top-K indices
    // Sum over sets and selected keys of (1 - score); pulls selected keys
    // toward their queries when added to the training loss.
    Tensor key_pull_sum;
};

PromptToken make_prompt_token(int partition_index, int n_t, int channels, std::uint64_t seed);
PromptGenerator make_prompt_generator(int partition_index, int layers, int n_g, int channels,
                                      std::uint64_t seed);
PromptPool make_prompt_pool(int partition_index, int m, int n_p, int k, int channels,
                            std::uint64_t seed, double cosine_eps = 1e-8);

std::vector<PromptedSet> attach_prompt_tokens(const SetPartition& sp, const Tensor& features,
                                              const PromptToken& pt);

// Set summary (masked max pool) -> MLP -> [n_G x C] prompts, one call per set.
std::vector<Tensor> generate_prompts(const SetPartition& sp, const Tensor& features,
                                     const PromptGenerator& g);
std::vector<PromptedSet> attach_generated_prompts(const SetPartition& sp, const Tensor& features,
                                                  const PromptGenerator& g);

// Masked channelwise max over the set's rows.
Tensor pool_query(const Tensor& set_tokens, const Mask& mask);

// Scores every key against the query by cosine similarity and gathers the
// top-K value blocks. Ties break toward the lower index; results are in
// descending-score order.
PoolSelection pool_select(const PromptPool& pool, const Tensor& query);

std::vector<PromptedSet> attach_pool_prompts_simple(const SetPartition& sp,
                                                    const Tensor& features,
                                                    const PromptPool& pool);
PoolAttachResult attach_pool_prompts(const SetPartition& sp, const Tensor& features,
                                     const PromptPool& pool, bool with_key_pull);

}  // namespace sop2
