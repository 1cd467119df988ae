#pragma once

// Batched exp/log. Uses glibc's vector math library (libmvec) when AVX-512
// is available; results stay deterministic for a given build.

#include <cmath>
#include <cstddef>

#if defined(__AVX512F__) && defined(__GLIBC__) && !defined(SDCL_NO_LIBMVEC)
#include <immintrin.h>
#define SDCL_HAVE_LIBMVEC 1
extern "C" __m512d _ZGVeN8v_exp(__m512d);
extern "C" __m512d _ZGVeN8v_log(__m512d);
#endif

namespace sdcl::detail {

inline void exp_inplace(double* p, std::size_t n) {
  std::size_t i = 0;
#if defined(SDCL_HAVE_LIBMVEC)
  for (; i + 8 <= n; i += 8) _mm512_storeu_pd(p + i, _ZGVeN8v_exp(_mm512_loadu_pd(p + i)));
#endif
  for (; i < n; ++i) p[i] = std::exp(p[i]);
}

inline void log_inplace(double* p, std::size_t n) {
  std::size_t i = 0;
#if defined(SDCL_HAVE_LIBMVEC)
  for (; i + 8 <= n; i += 8) _mm512_storeu_pd(p + i, _ZGVeN8v_log(_mm512_loadu_pd(p + i)));
#endif
  for (; i < n; ++i) p[i] = std::log(p[i]);
}

}  // namespace sdcl::detail
