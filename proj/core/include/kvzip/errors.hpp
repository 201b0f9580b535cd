#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace kvzip {

// Error classes map to CLI exit codes: config = 1, io = 2, contract = 3.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Position capacity exceeded (cache length + input length > max_position).
struct CapacityError : ContractError {
    using ContractError::ContractError;
};

// Loss became non-finite during optimization; carries the failing step.
struct TrainingError : std::runtime_error {
    TrainingError(const std::string& msg, uint64_t step_) : std::runtime_error(msg), step(step_) {}
    uint64_t step;
};

}  // namespace kvzip
