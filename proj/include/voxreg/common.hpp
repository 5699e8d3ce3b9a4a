#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace voxreg {

// Error taxonomy maps onto the CLI exit-code contract:
//   ConfigError -> 4, DataError -> 2, NumericError -> 3.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Internal invariant violations (recorded-graph cycles etc.).
class InternalError : public std::logic_error {
 public:
  explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

// Global cap on kernel-internal parallelism. Results are required to be
// identical for any value (see parallel_for), so this only trades speed.
int max_threads();
void set_max_threads(int n);

// Reads VOXREG_THREADS; returns 1 if unset or unparsable.
int threads_from_env();

// Splits [0, n) into contiguous chunks, one worker per chunk. Each index is
// processed by exactly one worker and the per-index work must not touch
// state owned by other indices; under that contract the result does not
// depend on the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

std::string format_double(double v);  // shortest round-trippable decimal
std::string format_float(float v);

}  // namespace voxreg
