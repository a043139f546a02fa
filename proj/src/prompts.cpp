// SPDX-License-Identifier: Apache-2.0
#include "sop2/prompts.hpp"

#include <algorithm>
#include <cmath>

namespace sop2 {

namespace {

constexpr double kPromptInitRange = 0.02;

void require_partition(int have, int want, const char* what) {
    if (have != want) {
        throw WiringError(std::string(what) + " for partition " + std::to_string(have) +
                          " attached to partition " + std::to_string(want));
    }
}

void require_channels(int have, int want, const char* what) {
    if (have != want) {
        throw DimensionError(std::string(what) + ": channel extent " + std::to_string(have) +
                             " vs features " + std::to_string(want));
    }
}

Mask prompted_mask(int prompt_rows, const VoxelSet& set) {
    Mask m(static_cast<std::size_t>(prompt_rows), 1);
    Mask sm = set.mask();
    m.insert(m.end(), sm.begin(), sm.end());
    return m;
}

Linear init_linear(int in, int out, const std::string& name, std::uint64_t seed) {
    Linear l;
    l.w = Tensor::zeros({in, out}, true).set_name(name + ".w");
    l.b = Tensor::zeros({out}, true).set_name(name + ".b");
    const double bound = in > 0 ? 1.0 / std::sqrt(static_cast<double>(in)) : 0.0;
    fill_uniform(l.w, -bound, bound, seed);
    return l;
}

}  // namespace

PromptToken make_prompt_token(int partition_index, int n_t, int channels, std::uint64_t seed) {
    if (n_t < 0) throw ConfigError("prompt token count must be non-negative");
    PromptToken pt;
    pt.partition_index = partition_index;
    pt.tokens = Tensor::zeros({n_t, channels}, true)
                    .set_name("part" + std::to_string(partition_index) + ".prompt.tokens");
    fill_uniform(pt.tokens, -kPromptInitRange, kPromptInitRange, seed);
    return pt;
}

PromptGenerator make_prompt_generator(int partition_index, int layers, int n_g, int channels,
                                      std::uint64_t seed) {
    if (layers < 1) throw ConfigError("prompt generator needs at least one layer");
    if (n_g < 0) throw ConfigError("generator prompt count must be non-negative");
    PromptGenerator g;
    g.partition_index = partition_index;
    g.prompt_count = n_g;
    const std::string base = "part" + std::to_string(partition_index) + ".gen.";
    for (int l = 0; l < layers; ++l) {
        const int out = l == layers - 1 ? n_g * channels : channels;
        g.mlp.push_back(init_linear(channels, out, base + std::to_string(l), seed));
    }
    return g;
}

PromptPool make_prompt_pool(int partition_index, int m, int n_p, int k, int channels,
                            std::uint64_t seed, double cosine_eps) {
    if (m < 1) throw ConfigError("prompt pool size M must be at least 1");
    if (n_p < 1) throw ConfigError("prompt length n_P must be at least 1");
    if (k < 1 || k > m) {
        throw ConfigError("top-K selection count " + std::to_string(k) +
                          " must be in [1, M=" + std::to_string(m) + "]");
    }
    PromptPool pool;
    pool.partition_index = partition_index;
    pool.size = m;
    pool.prompt_length = n_p;
    pool.select_count = k;
    pool.cosine_eps = cosine_eps;
    const std::string base = "part" + std::to_string(partition_index) + ".pool.";
    pool.keys = Tensor::zeros({m, channels}, true).set_name(base + "keys");
    pool.values = Tensor::zeros({m * n_p, channels}, true).set_name(base + "values");
    fill_uniform(pool.keys, -kPromptInitRange, kPromptInitRange, seed);
    fill_uniform(pool.values, -kPromptInitRange, kPromptInitRange, seed);
    return pool;
}

std::vector<PromptedSet> attach_prompt_tokens(const SetPartition& sp, const Tensor& features,
                                              const PromptToken& pt) {
    require_partition(pt.partition_index, sp.index, "prompt tokens");
    require_channels(pt.channels(), features.dim(1), "attach_prompt_tokens");
    std::vector<PromptedSet> out;
    out.reserve(sp.sets.size());
    for (int i = 0; i < sp.set_count(); ++i) {
        Tensor set = gather_set(sp, i, features);
        PromptedSet ps;
        ps.prompt_rows = pt.count();
        // The same token tensor is shared by every set; gradients accumulate.
        ps.tokens = pt.count() > 0 ? concat_tokens(pt.tokens, set) : set;
        ps.mask = prompted_mask(pt.count(), sp.sets[static_cast<std::size_t>(i)]);
        out.push_back(std::move(ps));
    }
    return out;
}

std::vector<Tensor> generate_prompts(const SetPartition& sp, const Tensor& features,
                                     const PromptGenerator& g) {
    require_partition(g.partition_index, sp.index, "prompt generator");
    require_channels(g.channels(), features.dim(1), "generate_prompts");
    const int c = features.dim(1);
    std::vector<Tensor> prompts;
    prompts.reserve(sp.sets.size());
    for (int i = 0; i < sp.set_count(); ++i) {
        Tensor set = gather_set(sp, i, features);
        Tensor summary = max_pool_rows(set, sp.sets[static_cast<std::size_t>(i)].mask());
        Tensor x = reshape(summary, {1, c});
        for (std::size_t l = 0; l < g.mlp.size(); ++l) {
            x = g.mlp[l].forward(x);
            if (l + 1 < g.mlp.size()) x = relu(x);
        }
        prompts.push_back(reshape(x, {g.prompt_count, c}));
    }
    return prompts;
}

std::vector<PromptedSet> attach_generated_prompts(const SetPartition& sp, const Tensor& features,
                                                  const PromptGenerator& g) {
    std::vector<Tensor> prompts = generate_prompts(sp, features, g);
    std::vector<PromptedSet> out;
    out.reserve(sp.sets.size());
    for (int i = 0; i < sp.set_count(); ++i) {
        Tensor set = gather_set(sp, i, features);
        PromptedSet ps;
        ps.prompt_rows = g.prompt_count;
        ps.tokens = g.prompt_count > 0
                        ? concat_tokens(prompts[static_cast<std::size_t>(i)], set)
                        : set;
        ps.mask = prompted_mask(g.prompt_count, sp.sets[static_cast<std::size_t>(i)]);
        out.push_back(std::move(ps));
    }
    return out;
}

Tensor pool_query(const Tensor& set_tokens, const Mask& mask) {
    return max_pool_rows(set_tokens, mask);
}

PoolSelection pool_select(const PromptPool& pool, const Tensor& query) {
    if (pool.select_count > pool.size) {
        throw ConfigError("pool_select: K exceeds pool size");
    }
    const int m = pool.size;
    std::vector<Tensor> all_scores;
    all_scores.reserve(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        Tensor key = reshape(slice_rows(pool.keys, i, i + 1), {pool.keys.dim(1)});
        all_scores.push_back(cosine_similarity(query, key, pool.cosine_eps));
    }
    // Rank by (-score, index): descending score, ties to the lower index.
    std::vector<int> order(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) order[static_cast<std::size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return all_scores[static_cast<std::size_t>(a)].item() >
               all_scores[static_cast<std::size_t>(b)].item();
    });

    PoolSelection sel;
    std::vector<Tensor> blocks;
    for (int r = 0; r < pool.select_count; ++r) {
        const int idx = order[static_cast<std::size_t>(r)];
        sel.indices.push_back(idx);
        sel.scores.push_back(all_scores[static_cast<std::size_t>(idx)]);
        blocks.push_back(pool.value_block(idx));
    }
    sel.prompts = reshape(concat_rows(blocks),
                          {pool.select_count, pool.prompt_length, pool.keys.dim(1)});
    return sel;
}

std::vector<PromptedSet> attach_pool_prompts_simple(const SetPartition& sp,
                                                    const Tensor& features,
                                                    const PromptPool& pool) {
    return attach_pool_prompts(sp, features, pool, false).sets;
}

PoolAttachResult attach_pool_prompts(const SetPartition& sp, const Tensor& features,
                                     const PromptPool& pool, bool with_key_pull) {
    require_partition(pool.partition_index, sp.index, "prompt pool");
    require_channels(pool.keys.dim(1), features.dim(1), "attach_pool_prompts");
    const int c = features.dim(1);
    const int p = pool.select_count * pool.prompt_length;

    PoolAttachResult res;
    res.key_pull_sum = Tensor::scalar(0.0);
    for (int i = 0; i < sp.set_count(); ++i) {
        Tensor set = gather_set(sp, i, features);
        Tensor query = pool_query(set, sp.sets[static_cast<std::size_t>(i)].mask());
        PoolSelection sel = pool_select(pool, query);

        PromptedSet ps;
        ps.prompt_rows = p;
        ps.tokens = concat_tokens(reshape(sel.prompts, {p, c}), set);
        ps.mask = prompted_mask(p, sp.sets[static_cast<std::size_t>(i)]);
        res.sets.push_back(std::move(ps));
        res.selected.push_back(sel.indices);

        if (with_key_pull) {
            for (const Tensor& s : sel.scores) {
                res.key_pull_sum = add(res.key_pull_sum, sub(Tensor::scalar(1.0), s));
            }
        }
    }
    return res;
}

}  // namespace sop2
