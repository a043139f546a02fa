// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "sop2/backbone.hpp"

namespace sop2 {

struct TrainSettings {
    double lr = 1e-3;
    int epochs = 50;
    double warmup_frac = 0.05;
    double fraction = 1.0;
    std::string mode = "sop2";
};

// Plain-text key=value run configuration mirroring the model
// hyperparameters, the source/target domain knobs and the training
// settings. Unknown keys are rejected.
struct RunConfig {
    ModelConfig model;
    DomainParams source;   // generation defaults
    DomainParams target;   // shifted domain
    TrainSettings train;

    RunConfig();

    static RunConfig parse_text(const std::string& text);
    static RunConfig parse_file(const std::string& path);

    // Every key, sorted, one per line; doubles at full precision.
    std::string canonical() const;
    // The subset of keys that must match for a checkpoint to be loadable:
    // everything that fixes backbone tensor shapes and the voxel grid.
    std::string backbone_signature() const;
};

}  // namespace sop2
