#pragma once

#include <cstddef>
#include <functional>

namespace gmfc {

/// Deterministic data-parallel helpers.
///
/// Work items write into preallocated, disjoint slots; reductions happen
/// serially afterwards.  Results are therefore bit-identical for any worker
/// count, which the command-line tools rely on.
namespace parallel {

/// Sets the global worker count (1 = serial).  Values < 1 are clamped to 1.
void set_workers(int n);

/// Current worker count.
int workers();

/// Runs fn(i) for i in [0, n), statically chunked over the worker threads.
/// fn must only touch state owned by index i.  Exceptions propagate (the
/// first one thrown in index order).
void for_each_index(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace parallel
}  // namespace gmfc
