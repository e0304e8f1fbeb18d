#pragma once

#include <cstddef>
#include <functional>

namespace tense {

/// Caps the worker count used by parallel stages. 0 restores the default
/// (hardware concurrency).
void set_max_threads(std::size_t n);
std::size_t max_threads();

/// Runs fn(i) for i in [0, n) on up to max_threads() workers. Work items are
/// handed out dynamically; fn must be safe to call concurrently for distinct i.
/// The first exception thrown by any item is rethrown after all workers stop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace tense
