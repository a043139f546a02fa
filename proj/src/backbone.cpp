// SPDX-License-Identifier: Apache-2.0
#include "sop2/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace sop2 {

namespace {

constexpr double kFocalAlpha = 0.25;
constexpr double kFocalGamma = 2.0;
// Class logits start at a 1% prior so the focal background term is quiet
// at initialization; without this the head's hidden units die in the
// first epochs under the all-background push.
constexpr double kClassPriorBias = -4.59511985013459;  // log(0.01 / 0.99)

Linear build_linear(int in, int out, const std::string& name, std::uint64_t seed) {
    Linear l;
    l.w = Tensor::zeros({in, out}, true).set_name(name + ".w");
    l.b = Tensor::zeros({out}, true).set_name(name + ".b");
    if (in > 0) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        fill_uniform(l.w, -bound, bound, seed);
    }
    return l;
}

void push_linear(std::vector<NamedParam>& out, const Linear& l, const std::string& name,
                 ParamGroup wgroup, ParamGroup bgroup) {
    out.push_back({name + ".w", l.w, wgroup});
    out.push_back({name + ".b", l.b, bgroup});
    if (l.lora) {
        out.push_back({name + ".lora.down", l.lora->down, ParamGroup::lora});
        out.push_back({name + ".lora.up", l.lora->up, ParamGroup::lora});
    }
}

}  // namespace

const char* to_string(PromptMode m) {
    switch (m) {
        case PromptMode::none: return "none";
        case PromptMode::token: return "token";
        case PromptMode::generator: return "generator";
        case PromptMode::pool: return "pool";
    }
    return "none";
}

PromptMode prompt_mode_from_string(const std::string& s) {
    if (s == "none") return PromptMode::none;
    if (s == "token") return PromptMode::token;
    if (s == "generator") return PromptMode::generator;
    if (s == "pool") return PromptMode::pool;
    throw ConfigError("unknown prompt mode '" + s + "'");
}

const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::head: return "head";
        case ParamGroup::backbone: return "backbone";
        case ParamGroup::bias: return "biases";
        case ParamGroup::prompt_token: return "prompts";
        case ParamGroup::generator: return "generators";
        case ParamGroup::pool: return "pools";
        case ParamGroup::lora: return "lora";
    }
    return "?";
}

int ModelConfig::bev_nx() const {
    return std::max(1, static_cast<int>(std::ceil((extent.x_max - extent.x_min) / grid.dx)));
}

int ModelConfig::bev_ny() const {
    return std::max(1, static_cast<int>(std::ceil((extent.y_max - extent.y_min) / grid.dy)));
}

PartitionSchedule ModelConfig::schedule() const {
    PartitionSchedule s;
    s.blocks = blocks;
    s.set_capacity = set_capacity;
    s.window_per_block.clear();
    for (int w : window_sizes) s.window_per_block.push_back({w, w});
    return s;
}

std::vector<PromptMode> ModelConfig::mode_per_partition() const {
    std::vector<PromptMode> modes(static_cast<std::size_t>(total_partitions()), PromptMode::none);
    if (prompt_mode == PromptMode::none) return modes;
    if (prompt_partitions.empty()) {
        std::fill(modes.begin(), modes.end(), prompt_mode);
        return modes;
    }
    for (int j : prompt_partitions) {
        modes[static_cast<std::size_t>(j - 1)] = prompt_mode;
    }
    return modes;
}

void ModelConfig::validate() const {
    if (channels < 1) throw ConfigError("channels must be positive");
    if (blocks < 1) throw ConfigError("blocks must be positive");
    if (heads < 1 || channels % heads != 0) {
        throw ConfigError("heads=" + std::to_string(heads) +
                          " must divide channels=" + std::to_string(channels));
    }
    if (set_capacity < 1) throw ConfigError("set capacity n_s must be positive");
    if (static_cast<int>(window_sizes.size()) != blocks) {
        throw ConfigError("need one window size per block (" + std::to_string(blocks) +
                          "), got " + std::to_string(window_sizes.size()));
    }
    for (int w : window_sizes) {
        if (w < 1) throw ConfigError("window sizes must be at least 1");
    }
    if (extent.empty()) throw ConfigError("empty scene extent");
    if (!(grid.dx > 0 && grid.dy > 0 && grid.dz > 0)) {
        throw ConfigError("grid cells must be positive");
    }
    for (int j : prompt_partitions) {
        if (j < 1 || j > total_partitions()) {
            throw ConfigError("prompt partition index " + std::to_string(j) + " outside 1.." +
                              std::to_string(total_partitions()));
        }
    }
    if (prompt_mode == PromptMode::pool) {
        if (pool_k < 1 || pool_k > pool_m) {
            throw ConfigError("pool selection K=" + std::to_string(pool_k) +
                              " must be in [1, M=" + std::to_string(pool_m) + "]");
        }
        if (pool_n_p < 1) throw ConfigError("pool prompt length n_P must be positive");
    }
    if (n_t < 0 || n_g < 0) throw ConfigError("prompt counts must be non-negative");
    if (gen_layers < 1) throw ConfigError("generator layer count must be positive");
    if (mlp_hidden_ratio < 1) throw ConfigError("mlp hidden ratio must be positive");
    if (head_hidden < 1) throw ConfigError("head hidden width must be positive");
    if (vfe_layers < 1) throw ConfigError("vfe layer count must be positive");
    if (!(layer_norm_eps > 0) || !(cosine_eps > 0)) {
        throw ConfigError("eps values must be positive");
    }
    if (lora_rank < 1) throw ConfigError("lora rank must be positive");
}

Model Model::build(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    const int c = cfg.channels;
    const std::uint64_t seed = cfg.seed;

    for (int l = 0; l < cfg.vfe_layers; ++l) {
        const int in = l == 0 ? kVfeInputChannels : c;
        m.vfe.layers.push_back(build_linear(in, c, "vfe." + std::to_string(l), seed));
    }

    const std::vector<PromptMode> modes = cfg.mode_per_partition();
    for (int j = 1; j <= cfg.total_partitions(); ++j) {
        PartitionLayer layer;
        const std::string base = "part" + std::to_string(j);
        layer.attn.q = build_linear(c, c, base + ".attn.q", seed);
        layer.attn.k = build_linear(c, c, base + ".attn.k", seed);
        layer.attn.v = build_linear(c, c, base + ".attn.v", seed);
        layer.attn.o = build_linear(c, c, base + ".attn.o", seed);
        layer.mlp_in = build_linear(c, c * cfg.mlp_hidden_ratio, base + ".mlp.0", seed);
        layer.mlp_out = build_linear(c * cfg.mlp_hidden_ratio, c, base + ".mlp.1", seed);
        layer.ln1_gamma = Tensor::full({c}, 1.0).set_name(base + ".ln1.gamma");
        layer.ln1_beta = Tensor::zeros({c}).set_name(base + ".ln1.beta");
        layer.ln2_gamma = Tensor::full({c}, 1.0).set_name(base + ".ln2.gamma");
        layer.ln2_beta = Tensor::zeros({c}).set_name(base + ".ln2.beta");
        for (Tensor* t : {&layer.ln1_gamma, &layer.ln1_beta, &layer.ln2_gamma, &layer.ln2_beta}) {
            t->set_requires_grad(true);
        }

        switch (modes[static_cast<std::size_t>(j - 1)]) {
            case PromptMode::none:
                break;
            case PromptMode::token:
                layer.prompt_token = make_prompt_token(j, cfg.n_t, c, seed);
                break;
            case PromptMode::generator:
                layer.prompt_generator =
                    make_prompt_generator(j, cfg.gen_layers, cfg.n_g, c, seed);
                break;
            case PromptMode::pool:
                layer.prompt_pool = make_prompt_pool(j, cfg.pool_m, cfg.pool_n_p, cfg.pool_k, c,
                                                     seed, cfg.cosine_eps);
                break;
        }
        m.partitions.push_back(std::move(layer));
    }

    m.head.cls_in = build_linear(c, cfg.head_hidden, "head.cls.0", seed);
    m.head.cls_out = build_linear(cfg.head_hidden, 3, "head.cls.1", seed);
    std::fill(m.head.cls_out.b.data().begin(), m.head.cls_out.b.data().end(), kClassPriorBias);
    m.head.reg_in = build_linear(c, cfg.head_hidden, "head.reg.0", seed);
    m.head.reg_out = build_linear(cfg.head_hidden, 5, "head.reg.1", seed);
    return m;
}

std::vector<NamedParam> Model::parameters() const {
    std::vector<NamedParam> out;
    for (std::size_t l = 0; l < vfe.layers.size(); ++l) {
        push_linear(out, vfe.layers[l], "vfe." + std::to_string(l), ParamGroup::backbone,
                    ParamGroup::bias);
    }
    for (std::size_t i = 0; i < partitions.size(); ++i) {
        const PartitionLayer& p = partitions[i];
        const std::string base = "part" + std::to_string(i + 1);
        push_linear(out, p.attn.q, base + ".attn.q", ParamGroup::backbone, ParamGroup::bias);
        push_linear(out, p.attn.k, base + ".attn.k", ParamGroup::backbone, ParamGroup::bias);
        push_linear(out, p.attn.v, base + ".attn.v", ParamGroup::backbone, ParamGroup::bias);
        push_linear(out, p.attn.o, base + ".attn.o", ParamGroup::backbone, ParamGroup::bias);
        push_linear(out, p.mlp_in, base + ".mlp.0", ParamGroup::backbone, ParamGroup::bias);
        push_linear(out, p.mlp_out, base + ".mlp.1", ParamGroup::backbone, ParamGroup::bias);
        out.push_back({base + ".ln1.gamma", p.ln1_gamma, ParamGroup::backbone});
        out.push_back({base + ".ln1.beta", p.ln1_beta, ParamGroup::bias});
        out.push_back({base + ".ln2.gamma", p.ln2_gamma, ParamGroup::backbone});
        out.push_back({base + ".ln2.beta", p.ln2_beta, ParamGroup::bias});
        if (p.prompt_token) {
            out.push_back(
                {base + ".prompt.tokens", p.prompt_token->tokens, ParamGroup::prompt_token});
        }
        if (p.prompt_generator) {
            for (std::size_t l = 0; l < p.prompt_generator->mlp.size(); ++l) {
                push_linear(out, p.prompt_generator->mlp[l], base + ".gen." + std::to_string(l),
                            ParamGroup::generator, ParamGroup::generator);
            }
        }
        if (p.prompt_pool) {
            out.push_back({base + ".pool.keys", p.prompt_pool->keys, ParamGroup::pool});
            out.push_back({base + ".pool.values", p.prompt_pool->values, ParamGroup::pool});
        }
    }
    push_linear(out, head.cls_in, "head.cls.0", ParamGroup::head, ParamGroup::head);
    push_linear(out, head.cls_out, "head.cls.1", ParamGroup::head, ParamGroup::head);
    push_linear(out, head.reg_in, "head.reg.0", ParamGroup::head, ParamGroup::head);
    push_linear(out, head.reg_out, "head.reg.1", ParamGroup::head, ParamGroup::head);
    return out;
}

Tensor strip_prompts(const Tensor& prompted_output, int prompt_rows) {
    if (prompt_rows < 0 || prompt_rows > prompted_output.dim(0)) {
        throw WiringError("strip_prompts: prompt row count " + std::to_string(prompt_rows) +
                          " does not fit output " + Tensor::shape_str(prompted_output.shape()));
    }
    if (prompt_rows == 0) return prompted_output;
    return slice_rows(prompted_output, prompt_rows, prompted_output.dim(0));
}

Tensor block_forward(const Model& m, Tensor features, const VoxelGrid& vg, int block_index,
                     Tensor& key_pull_sum, const ForwardOptions& opts) {
    const ModelConfig& cfg = m.cfg;
    if (features.dim(0) != vg.voxel_count()) {
        throw DimensionError("block_forward: feature rows " + std::to_string(features.dim(0)) +
                             " vs voxel count " + std::to_string(vg.voxel_count()));
    }
    const PartitionSchedule sched = cfg.schedule();
    for (int sub = 0; sub < 2; ++sub) {
        const int j = block_index * 2 + sub + 1;
        const PartitionLayer& layer = m.partitions[static_cast<std::size_t>(j - 1)];
        if (opts.partition_input_taps) {
            opts.partition_input_taps->push_back(features.clone());
        }
        SetPartition sp =
            set_partition(vg, sched.window_of(j), sched.axis_of(j), cfg.set_capacity, j);
        if (opts.set_mean_taps) {
            std::vector<std::vector<double>> means;
            for (int i = 0; i < sp.set_count(); ++i) {
                const VoxelSet& set = sp.sets[static_cast<std::size_t>(i)];
                std::vector<double> mean(static_cast<std::size_t>(features.dim(1)), 0.0);
                for (int r = 0; r < set.valid; ++r) {
                    for (int ch = 0; ch < features.dim(1); ++ch) {
                        mean[static_cast<std::size_t>(ch)] +=
                            features.at(set.rows[static_cast<std::size_t>(r)], ch);
                    }
                }
                for (double& v : mean) v /= set.valid;
                means.push_back(std::move(mean));
            }
            opts.set_mean_taps->push_back(std::move(means));
        }
        if (sp.set_count() == 0) continue;

        std::vector<PromptedSet> prompted;
        if (layer.prompt_token) {
            prompted = attach_prompt_tokens(sp, features, *layer.prompt_token);
        } else if (layer.prompt_generator) {
            prompted = attach_generated_prompts(sp, features, *layer.prompt_generator);
        } else if (layer.prompt_pool) {
            PoolAttachResult res =
                attach_pool_prompts(sp, features, *layer.prompt_pool, cfg.key_pull);
            prompted = std::move(res.sets);
            if (cfg.key_pull) key_pull_sum = add(key_pull_sum, res.key_pull_sum);
        } else {
            for (int i = 0; i < sp.set_count(); ++i) {
                PromptedSet ps;
                ps.prompt_rows = 0;
                ps.tokens = gather_set(sp, i, features);
                ps.mask = sp.sets[static_cast<std::size_t>(i)].mask();
                prompted.push_back(std::move(ps));
            }
        }

        // N as batch: attention + MLP over each set, then scatter back.
        std::vector<Tensor> outs;
        outs.reserve(prompted.size());
        for (int i = 0; i < sp.set_count(); ++i) {
            const PromptedSet& ps = prompted[static_cast<std::size_t>(i)];
            Tensor att = mhsa(ps.tokens, ps.mask, layer.attn, cfg.heads);
            Tensor kept = strip_prompts(att, ps.prompt_rows);
            Tensor original = gather_set(sp, i, features);
            Tensor h1 = layer_norm(add(kept, original), layer.ln1_gamma, layer.ln1_beta,
                                   cfg.layer_norm_eps);
            Tensor mlp = layer.mlp_out.forward(relu(layer.mlp_in.forward(h1)));
            Tensor h2 =
                layer_norm(add(mlp, h1), layer.ln2_gamma, layer.ln2_beta, cfg.layer_norm_eps);
            outs.push_back(std::move(h2));
        }
        features = scatter_back(sp, outs, vg.voxel_count());
    }
    return features;
}

Detections head_forward(const BevMap& bev, const DetectionHead& head) {
    Detections det;
    det.nx = bev.nx;
    det.ny = bev.ny;
    det.cls_logits = head.cls_out.forward(relu(head.cls_in.forward(bev.features)));
    det.box_reg = head.reg_out.forward(relu(head.reg_in.forward(bev.features)));
    return det;
}

Tensor detection_loss(const Detections& det, const SceneLabel& label, const ModelConfig& cfg) {
    const int nx = det.nx, ny = det.ny;
    const int cells = nx * ny;
    if (det.cls_logits.dim(0) != cells || det.box_reg.dim(0) != cells) {
        throw DimensionError("detection_loss: detections do not match the grid");
    }

    // Rasterize labels: class heatmap target plus per-cell regression
    // target; the first box wins a contested cell.
    Tensor cls_target = Tensor::zeros({cells, 3});
    std::vector<int> pos_cells;
    std::vector<double> reg_targets;
    std::vector<bool> cell_taken(static_cast<std::size_t>(cells), false);
    for (const Box& b : label.boxes) {
        const int ix = static_cast<int>(std::floor((b.cx - cfg.extent.x_min) / cfg.grid.dx));
        const int iy = static_cast<int>(std::floor((b.cy - cfg.extent.y_min) / cfg.grid.dy));
        if (ix < 0 || ix >= nx || iy < 0 || iy >= ny) continue;
        const int cell = iy * nx + ix;
        cls_target.data()[static_cast<std::size_t>(cell) * 3 + b.cls] = 1.0;
        if (cell_taken[static_cast<std::size_t>(cell)]) continue;
        cell_taken[static_cast<std::size_t>(cell)] = true;
        pos_cells.push_back(cell);
        reg_targets.push_back((b.cx - cfg.extent.x_min) / cfg.grid.dx - (ix + 0.5));
        reg_targets.push_back((b.cy - cfg.extent.y_min) / cfg.grid.dy - (iy + 0.5));
        reg_targets.push_back(std::log(b.length));
        reg_targets.push_back(std::log(b.width));
        reg_targets.push_back(b.yaw);
    }

    Tensor ones = Tensor::full({cells, 3}, 1.0);
    Tensor alpha_t = Tensor::zeros({cells, 3});
    for (std::size_t i = 0; i < alpha_t.numel(); ++i) {
        alpha_t.data()[i] = cls_target.data()[i] > 0.5 ? kFocalAlpha : (1.0 - kFocalAlpha);
    }
    Tensor ce = bce_with_logits(det.cls_logits, cls_target);
    Tensor p = sigmoid(det.cls_logits);
    Tensor pt = add(mul(p, cls_target), mul(sub(ones, p), sub(ones, cls_target)));
    Tensor modulator = pow_const(sub(ones, pt), kFocalGamma);
    Tensor cls_loss = sum_all(mul(mul(alpha_t, modulator), ce));

    if (pos_cells.empty()) return cls_loss;

    Tensor pred = gather_rows(det.box_reg, pos_cells);
    Tensor target = Tensor::from({static_cast<int>(pos_cells.size()), 5}, std::move(reg_targets));
    Tensor reg_loss = sum_all(abs_val(sub(pred, target)));
    return add(cls_loss, reg_loss);
}

ForwardResult model_forward(const Model& m, const PointCloud& pc, const ForwardOptions& opts) {
    const ModelConfig& cfg = m.cfg;
    ForwardResult res;
    res.vg = voxelize(pc, cfg.grid, cfg.max_points_per_voxel);
    res.key_pull_sum = Tensor::scalar(0.0);

    Tensor features = vfe_forward(res.vg, m.vfe);
    for (int b = 0; b < cfg.blocks; ++b) {
        features = block_forward(m, features, res.vg, b, res.key_pull_sum, opts);
    }

    BevMap bev;
    bev.nx = cfg.bev_nx();
    bev.ny = cfg.bev_ny();
    std::vector<int> cell_rows;
    cell_rows.reserve(static_cast<std::size_t>(res.vg.voxel_count()));
    for (const auto& coord : res.vg.coords) {
        cell_rows.push_back(coord[1] * bev.nx + coord[0]);
    }
    bev.features = scatter_rows({features}, {cell_rows}, bev.nx * bev.ny);

    res.det = head_forward(bev, m.head);
    return res;
}

}  // namespace sop2
