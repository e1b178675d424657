#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace cimlite {

// Training loops allocate multi-megabyte activation buffers every iteration;
// glibc serves those through mmap/munmap by default, which costs substantial
// kernel time. Raising the threshold keeps them on the reusable heap.
inline void tune_malloc() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
#endif
}

}  // namespace cimlite
