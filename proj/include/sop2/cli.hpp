// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sop2/checkpoint.hpp"
#include "sop2/config.hpp"
#include "sop2/tuner.hpp"

namespace sop2 {

// Exit codes: 0 success, 2 usage, 3 data/config error, 4 numerical failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitConfig = 3;
inline constexpr int kExitNumeric = 4;

// Builds the model a tuning mode needs: prompt machinery is enabled to
// match prompt-based modes (a conflicting explicit prompt_mode is a
// configuration error) and lora modes wrap the attention projections.
Model build_model_for_mode(const RunConfig& rc, TuningMode mode);

// The prompt mechanism implied by a tuning mode (none for baselines).
PromptMode implied_prompt_mode(TuningMode mode);

// Loads a pretrained checkpoint after comparing backbone signatures;
// a mismatch throws DataError carrying both signatures.
LoadStats apply_pretrained(Model& model, const RunConfig& rc, const std::string& ckpt_path);

// Scene archive helpers (header text + container round trip).
void write_scene_archive_file(const std::string& path, const std::vector<Scene>& scenes,
                              const DomainParams& params, const Extent& extent,
                              const std::string& domain_name, std::uint64_t seed);
std::vector<Scene> read_scene_archive_file(const std::string& path, const Extent& expected_extent);

// Full command dispatch; maps thrown errors onto exit codes.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);  // convenience for tests

}  // namespace sop2
