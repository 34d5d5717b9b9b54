#pragma once

#include <functional>

namespace prcnn {

// Worker count used by the kernels. Work is only ever split across
// independent output elements, so results do not depend on this value.
void set_num_threads(int n);
int num_threads();
int hardware_threads();

// Calls fn(i) for i in [0, count), partitioned into contiguous chunks.
void parallel_for(int count, const std::function<void(int)>& fn);

}  // namespace prcnn
