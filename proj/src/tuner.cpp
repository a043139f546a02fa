// SPDX-License-Identifier: Apache-2.0
#include "sop2/tuner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace sop2 {

namespace {

const std::vector<ParamGroup> kReportOrder = {
    ParamGroup::head,   ParamGroup::backbone,   ParamGroup::bias,
    ParamGroup::prompt_token, ParamGroup::pool, ParamGroup::generator,
    ParamGroup::lora,
};

std::vector<ParamGroup> groups_for(TuningMode mode) {
    switch (mode) {
        case TuningMode::from_scratch:
        case TuningMode::full_finetune:
            return {ParamGroup::head,   ParamGroup::backbone,   ParamGroup::bias,
                    ParamGroup::prompt_token, ParamGroup::pool, ParamGroup::generator,
                    ParamGroup::lora};
        case TuningMode::head_finetune:
            return {ParamGroup::head};
        case TuningMode::bitfit:
            return {ParamGroup::head, ParamGroup::bias};
        case TuningMode::lora:
            return {ParamGroup::head, ParamGroup::lora};
        case TuningMode::prompt_token:
            return {ParamGroup::head, ParamGroup::prompt_token};
        case TuningMode::prompt_generator:
            return {ParamGroup::head, ParamGroup::generator};
        case TuningMode::sop2:
            return {ParamGroup::head, ParamGroup::pool};
        case TuningMode::sop2_plus_lora:
            return {ParamGroup::head, ParamGroup::pool, ParamGroup::lora};
    }
    return {};
}

// Mechanism groups the mode cannot run without.
std::vector<ParamGroup> required_groups(TuningMode mode) {
    switch (mode) {
        case TuningMode::lora:
            return {ParamGroup::lora};
        case TuningMode::prompt_token:
            return {ParamGroup::prompt_token};
        case TuningMode::prompt_generator:
            return {ParamGroup::generator};
        case TuningMode::sop2:
            return {ParamGroup::pool};
        case TuningMode::sop2_plus_lora:
            return {ParamGroup::pool, ParamGroup::lora};
        default:
            return {};
    }
}

}  // namespace

const char* to_string(TuningMode m) {
    switch (m) {
        case TuningMode::from_scratch: return "from_scratch";
        case TuningMode::head_finetune: return "head";
        case TuningMode::full_finetune: return "full";
        case TuningMode::bitfit: return "bitfit";
        case TuningMode::lora: return "lora";
        case TuningMode::prompt_token: return "prompt_token";
        case TuningMode::prompt_generator: return "prompt_generator";
        case TuningMode::sop2: return "sop2";
        case TuningMode::sop2_plus_lora: return "sop2_plus_lora";
    }
    return "?";
}

TuningMode tuning_mode_from_string(const std::string& s) {
    if (s == "from_scratch") return TuningMode::from_scratch;
    if (s == "head" || s == "head_finetune") return TuningMode::head_finetune;
    if (s == "full" || s == "full_finetune") return TuningMode::full_finetune;
    if (s == "bitfit") return TuningMode::bitfit;
    if (s == "lora") return TuningMode::lora;
    if (s == "prompt_token") return TuningMode::prompt_token;
    if (s == "prompt_generator") return TuningMode::prompt_generator;
    if (s == "sop2") return TuningMode::sop2;
    if (s == "sop2_plus_lora" || s == "sop2+lora") return TuningMode::sop2_plus_lora;
    throw ConfigError("unknown tuning mode '" + s + "'");
}

void set_trainable(Model& model, TuningMode mode) {
    const std::vector<ParamGroup> enabled = groups_for(mode);
    std::vector<NamedParam> params = model.parameters();

    for (ParamGroup need : required_groups(mode)) {
        const bool present = std::any_of(params.begin(), params.end(), [&](const NamedParam& p) {
            return p.group == need;
        });
        if (!present) {
            throw ConfigError(std::string("tuning mode ") + to_string(mode) +
                              " requires the model to carry " + to_string(need) +
                              " parameters, but none are present");
        }
    }
    for (NamedParam& p : params) {
        const bool on =
            std::find(enabled.begin(), enabled.end(), p.group) != enabled.end();
        p.tensor.set_requires_grad(on);
    }
}

void lora_wrap(Linear& layer, int rank, double alpha, const std::string& name,
               std::uint64_t seed) {
    const int in = layer.in_features(), out = layer.out_features();
    if (rank < 1) throw ConfigError("lora rank must be at least 1");
    if (rank > std::min(in, out)) {
        throw ConfigError("lora rank " + std::to_string(rank) + " exceeds min(" +
                          std::to_string(in) + ", " + std::to_string(out) + ")");
    }
    LoraState lora;
    lora.rank = rank;
    lora.alpha = alpha;
    lora.down = Tensor::zeros({in, rank}, true).set_name(name + ".lora.down");
    lora.up = Tensor::zeros({rank, out}, true).set_name(name + ".lora.up");
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    fill_uniform(lora.down, -bound, bound, seed);
    // up stays zero: the wrapped layer starts exactly equal to the base.
    layer.lora = std::move(lora);
}

void lora_wrap_model(Model& model) {
    const ModelConfig& cfg = model.cfg;
    for (std::size_t i = 0; i < model.partitions.size(); ++i) {
        const std::string base = "part" + std::to_string(i + 1) + ".attn.";
        PartitionLayer& p = model.partitions[i];
        lora_wrap(p.attn.q, cfg.lora_rank, cfg.lora_alpha, base + "q", cfg.seed);
        lora_wrap(p.attn.k, cfg.lora_rank, cfg.lora_alpha, base + "k", cfg.seed);
        lora_wrap(p.attn.v, cfg.lora_rank, cfg.lora_alpha, base + "v", cfg.seed);
        lora_wrap(p.attn.o, cfg.lora_rank, cfg.lora_alpha, base + "o", cfg.seed);
    }
}

ParamReport count_params(Model& model, TuningMode mode) {
    set_trainable(model, mode);
    ParamReport report;
    report.mode = mode;
    for (ParamGroup g : kReportOrder) report.counts[g] = 0;
    for (const NamedParam& p : model.parameters()) {
        report.model_total += static_cast<long>(p.tensor.numel());
        if (p.tensor.requires_grad()) {
            report.counts[p.group] += static_cast<long>(p.tensor.numel());
            report.trainable_total += static_cast<long>(p.tensor.numel());
        }
    }
    return report;
}

std::string ParamReport::table() const {
    std::ostringstream os;
    os << "mode: " << to_string(mode) << "\n";
    for (ParamGroup g : kReportOrder) {
        os << "  " << to_string(g) << ": " << group(g) << "\n";
    }
    os << "  trainable total: " << trainable_total << "\n";
    os << "  model total: " << model_total << "\n";
    return os.str();
}

std::string ParamReport::key_values() const {
    std::ostringstream os;
    os << "mode=" << to_string(mode) << "\n";
    for (ParamGroup g : kReportOrder) {
        os << to_string(g) << "=" << group(g) << "\n";
    }
    os << "trainable_total=" << trainable_total << "\n";
    os << "model_total=" << model_total << "\n";
    return os.str();
}

void AdamOptimizer::step(std::vector<NamedParam>& params, double lr) {
    for (NamedParam& p : params) {
        if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
        Moments& mo = state_[p.name];
        const std::size_t n = p.tensor.numel();
        if (mo.m.size() != n) {
            mo.m.assign(n, 0.0);
            mo.v.assign(n, 0.0);
            mo.t = 0;
        }
        ++mo.t;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(mo.t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(mo.t));
        auto& value = p.tensor.data();
        const auto& grad = p.tensor.grad();
        for (std::size_t i = 0; i < n; ++i) {
            mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * grad[i];
            mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
            const double mhat = mo.m[i] / bc1;
            const double vhat = mo.v[i] / bc2;
            value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        if (!p.tensor.all_finite()) {
            throw NumericError("non-finite value in parameter '" + p.name +
                               "' after optimizer update");
        }
    }
}

double lr_at_step(const OptimizerConfig& cfg, long step, long total_steps) {
    if (total_steps <= 0) return cfg.lr;
    const long warmup = std::max<long>(1, std::lround(cfg.warmup_frac * total_steps));
    if (step < warmup) {
        return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    const long tail = std::max<long>(1, total_steps - warmup);
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(tail);
    return 0.5 * cfg.lr * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));
}

std::vector<int> select_fraction(int scene_count, double fraction, std::uint64_t seed) {
    if (!(fraction > 0.0) || fraction > 1.0) {
        throw ConfigError("training fraction must lie in (0, 1]");
    }
    std::vector<int> order(static_cast<std::size_t>(scene_count));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed * 0x2545f4914f6cdd1dull + 0x9e3779b97f4a7c15ull);
    std::shuffle(order.begin(), order.end(), rng);
    const int keep = static_cast<int>(std::ceil(fraction * scene_count));
    order.resize(static_cast<std::size_t>(std::min(keep, scene_count)));
    return order;
}

namespace {

std::pair<double, double> dataset_loss(const Model& model, const std::vector<Scene>& scenes,
                                       const std::vector<int>& subset) {
    double total = 0.0, det_total = 0.0;
    for (int idx : subset) {
        const Scene& s = scenes[static_cast<std::size_t>(idx)];
        ForwardResult r = model_forward(model, s.pc);
        Tensor det = detection_loss(r.det, s.label, model.cfg);
        Tensor loss = add(det, scale(r.key_pull_sum, model.cfg.lambda_key));
        total += loss.item();
        det_total += det.item();
    }
    const double n = static_cast<double>(subset.size());
    return {total / n, det_total / n};
}

}  // namespace

TrainLog train(Model& model, const std::vector<Scene>& scenes, TuningMode mode,
               const OptimizerConfig& opt_cfg, int epochs, double fraction) {
    set_trainable(model, mode);
    if (scenes.empty()) throw ConfigError("train: no scenes");
    const std::vector<int> subset = select_fraction(static_cast<int>(scenes.size()), fraction,
                                                    model.cfg.seed);
    if (subset.empty()) throw ConfigError("train: empty training subset");

    TrainLog log;
    log.mode = mode;
    log.seed = model.cfg.seed;
    std::tie(log.initial_loss, log.initial_det_loss) = dataset_loss(model, scenes, subset);

    std::vector<NamedParam> params = model.parameters();
    for (NamedParam& p : params) p.tensor.zero_grad();

    AdamOptimizer adam(opt_cfg);
    const long total_steps = static_cast<long>(epochs) * static_cast<long>(subset.size());
    long step = 0;
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        std::vector<int> order = subset;
        std::mt19937_64 rng(model.cfg.seed * 1000003ull + static_cast<std::uint64_t>(epoch));
        std::shuffle(order.begin(), order.end(), rng);

        double epoch_loss = 0.0, epoch_det_loss = 0.0;
        double last_lr = 0.0;
        for (int idx : order) {
            const Scene& s = scenes[static_cast<std::size_t>(idx)];
            double loss_value = 0.0;
            {
                Tape tape;
                ForwardResult r = model_forward(model, s.pc);
                Tensor det = detection_loss(r.det, s.label, model.cfg);
                Tensor loss = add(det, scale(r.key_pull_sum, model.cfg.lambda_key));
                loss_value = loss.item();
                if (!std::isfinite(loss_value)) {
                    throw NumericError("non-finite value in tensor 'loss' at step " +
                                       std::to_string(step));
                }
                epoch_det_loss += det.item();
                tape.backward(loss);
            }
            last_lr = lr_at_step(opt_cfg, step, total_steps);
            adam.step(params, last_lr);
            for (NamedParam& p : params) p.tensor.zero_grad();
            epoch_loss += loss_value;
            ++step;
        }
        log.epochs.push_back({epoch, epoch_loss / static_cast<double>(order.size()),
                              epoch_det_loss / static_cast<double>(order.size()), last_lr});
    }
    return log;
}

EvalMetrics evaluate_detections(const std::vector<Detections>& dets,
                                const std::vector<SceneLabel>& labels, const ModelConfig& cfg) {
    if (dets.size() != labels.size()) {
        throw DimensionError("evaluate: detection/label count mismatch");
    }
    long tp[3] = {0, 0, 0}, pred_total[3] = {0, 0, 0};
    long recalled[3] = {0, 0, 0}, gt_total[3] = {0, 0, 0};

    for (std::size_t s = 0; s < dets.size(); ++s) {
        const Detections& det = dets[s];
        const int nx = det.nx, ny = det.ny;

        std::vector<std::pair<int, int>> centers[3];
        for (const Box& b : labels[s].boxes) {
            const int ix = static_cast<int>(std::floor((b.cx - cfg.extent.x_min) / cfg.grid.dx));
            const int iy = static_cast<int>(std::floor((b.cy - cfg.extent.y_min) / cfg.grid.dy));
            if (ix < 0 || ix >= nx || iy < 0 || iy >= ny) continue;
            centers[b.cls].push_back({ix, iy});
            ++gt_total[b.cls];
        }

        std::vector<std::pair<int, int>> positives[3];
        for (int cell = 0; cell < nx * ny; ++cell) {
            for (int k = 0; k < 3; ++k) {
                const double z = det.cls_logits.at(cell, k);
                const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                          : std::exp(z) / (1.0 + std::exp(z));
                if (p > 0.5) {
                    positives[k].push_back({cell % nx, cell / nx});
                    ++pred_total[k];
                }
            }
        }

        auto near = [](const std::pair<int, int>& a, const std::pair<int, int>& b) {
            return std::abs(a.first - b.first) <= 1 && std::abs(a.second - b.second) <= 1;
        };
        for (int k = 0; k < 3; ++k) {
            for (const auto& p : positives[k]) {
                if (std::any_of(centers[k].begin(), centers[k].end(),
                                [&](const auto& c) { return near(p, c); })) {
                    ++tp[k];
                }
            }
            for (const auto& c : centers[k]) {
                if (std::any_of(positives[k].begin(), positives[k].end(),
                                [&](const auto& p) { return near(p, c); })) {
                    ++recalled[k];
                }
            }
        }
    }

    EvalMetrics m;
    double f1_sum = 0.0;
    for (int k = 0; k < 3; ++k) {
        ClassMetrics& cm = m.per_class[k];
        cm.precision = pred_total[k] == 0 ? (gt_total[k] == 0 ? 1.0 : 0.0)
                                          : static_cast<double>(tp[k]) / pred_total[k];
        cm.recall = gt_total[k] == 0 ? 1.0 : static_cast<double>(recalled[k]) / gt_total[k];
        cm.f1 = cm.precision + cm.recall > 0.0
                    ? 2.0 * cm.precision * cm.recall / (cm.precision + cm.recall)
                    : 0.0;
        f1_sum += cm.f1;
    }
    m.mean_f1 = f1_sum / 3.0;
    return m;
}

EvalMetrics evaluate(const Model& model, const std::vector<Scene>& scenes) {
    std::vector<Detections> dets;
    std::vector<SceneLabel> labels;
    for (const Scene& s : scenes) {
        dets.push_back(model_forward(model, s.pc).det);
        labels.push_back(s.label);
    }
    return evaluate_detections(dets, labels, model.cfg);
}

std::string EvalMetrics::table() const {
    static const char* names[3] = {"class0", "class1", "class2"};
    std::ostringstream os;
    os << "class     precision  recall     f1\n";
    for (int k = 0; k < 3; ++k) {
        os << names[k];
        char buf[64];
        std::snprintf(buf, sizeof(buf), "    %.4f     %.4f     %.4f\n", per_class[k].precision,
                      per_class[k].recall, per_class[k].f1);
        os << buf;
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "mean f1: %.4f\n", mean_f1);
    os << buf;
    return os.str();
}

}  // namespace sop2
