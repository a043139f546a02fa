// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "sop2/backbone.hpp"

namespace sop2 {

enum class TuningMode {
    from_scratch,
    head_finetune,
    full_finetune,
    bitfit,
    lora,
    prompt_token,
    prompt_generator,
    sop2,
    sop2_plus_lora,
};

const char* to_string(TuningMode m);
TuningMode tuning_mode_from_string(const std::string& s);

// Per-group trainable-parameter counts under one tuning mode.
struct ParamReport {
    TuningMode mode = TuningMode::full_finetune;
    // Fixed display order: head, backbone, biases, prompts, pools, generators, lora.
    std::map<ParamGroup, long> counts;
    long trainable_total = 0;
    long model_total = 0;

    long group(ParamGroup g) const {
        auto it = counts.find(g);
        return it == counts.end() ? 0 : it->second;
    }
    std::string table() const;
    std::string key_values() const;  // machine-readable "group=count" lines
};

struct Scene {
    PointCloud pc;
    SceneLabel label;
};

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double warmup_frac = 0.05;  // fraction of total steps, then cosine decay to zero
};

struct EpochRecord {
    int epoch = 0;
    double mean_loss = 0.0;      // full optimized objective (incl. key-pull term)
    double mean_det_loss = 0.0;  // detection component only
    double lr = 0.0;
};

struct TrainLog {
    TuningMode mode = TuningMode::from_scratch;
    std::uint64_t seed = 0;
    // Mean losses over the subset before any update.
    double initial_loss = 0.0;
    double initial_det_loss = 0.0;
    std::vector<EpochRecord> epochs;

    double final_loss() const { return epochs.empty() ? initial_loss : epochs.back().mean_loss; }
    double final_det_loss() const {
        return epochs.empty() ? initial_det_loss : epochs.back().mean_det_loss;
    }
};

// Flags gradient participation per the tuning mode. Throws ConfigError when
// the mode needs a mechanism the model was not built with.
void set_trainable(Model& model, TuningMode mode);

// Adds a rank-r bypass (up factor zero-initialized) to a linear layer.
void lora_wrap(Linear& layer, int rank, double alpha, const std::string& name,
               std::uint64_t seed);

// Wraps the Q, K, V and output projections of every partition's attention.
void lora_wrap_model(Model& model);

ParamReport count_params(Model& model, TuningMode mode);

// Adaptive-moment optimizer over the flagged parameters only.
class AdamOptimizer {
  public:
    explicit AdamOptimizer(const OptimizerConfig& cfg) : cfg_(cfg) {}

    // Applies one update using gradients accumulated on the tensors, then
    // leaves gradients untouched (callers zero them).
    void step(std::vector<NamedParam>& params, double lr);

  private:
    struct Moments {
        std::vector<double> m, v;
        long t = 0;
    };
    OptimizerConfig cfg_;
    std::map<std::string, Moments> state_;
};

double lr_at_step(const OptimizerConfig& cfg, long step, long total_steps);

// Deterministic training-subset selection: seeded shuffle, first
// ceil(fraction * N) scenes.
std::vector<int> select_fraction(int scene_count, double fraction, std::uint64_t seed);

TrainLog train(Model& model, const std::vector<Scene>& scenes, TuningMode mode,
               const OptimizerConfig& opt_cfg, int epochs, double fraction = 1.0);

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct EvalMetrics {
    ClassMetrics per_class[3];
    double mean_f1 = 0.0;
    std::string table() const;
};

// Cell-level matching: a prediction cell is positive when its class
// sigmoid exceeds 0.5; matches label center cells within a 1-cell radius.
EvalMetrics evaluate(const Model& model, const std::vector<Scene>& scenes);
EvalMetrics evaluate_detections(const std::vector<Detections>& dets,
                                const std::vector<SceneLabel>& labels, const ModelConfig& cfg);

}  // namespace sop2
