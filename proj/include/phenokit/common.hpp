#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace phenokit {

// Bad user input (files, flags, config values). Maps to CLI exit code 1.
class InputError : public std::runtime_error {
  public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Violated internal contract (shape mismatch on an internal path, non-finite
// intermediate, corrupt state). Maps to CLI exit code 3.
class InvariantError : public std::runtime_error {
  public:
    explicit InvariantError(const std::string& msg) : std::runtime_error(msg) {}
};

// Worker cap: PHENOKIT_THREADS env var, else hardware concurrency, at least 1.
int worker_count();

// Runs fn(i) for i in [0, n). Work is split into fixed contiguous blocks so
// that the set of (i -> writes) is identical regardless of thread count; fn
// must not touch shared mutable state outside its own index.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace phenokit
