#pragma once

#include <cstdint>
#include <functional>

namespace rope {

// Thread count, from ROPE_THREADS if set, else hardware concurrency.
int thread_count();

// Runs fn(i) for i in [0, n) on up to thread_count() threads. Callers write
// results into preallocated per-index slots so output never depends on
// scheduling; exceptions are captured and rethrown on the caller thread.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

}  // namespace rope
