// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace sop2 {

// Error hierarchy. The CLI maps these onto process exit codes:
//   UsageError -> 2, ConfigError/DataError -> 3, NumericError -> 4,
//   everything else -> 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape mismatch between tensors; message names both shapes.
struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mismatched component indices (e.g. a prompt attached to the wrong
// partition) or inconsistent plumbing between modules.
struct WiringError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Reduction over an empty selection (all-false mask).
struct EmptySetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf detected; message carries the tensor name.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API contract violation (e.g. backward on a non-scalar).
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace sop2
