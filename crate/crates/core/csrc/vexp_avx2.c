/* Bulk exponential over a buffer via the glibc vector math library
 * (4-wide AVX2 variant). Callers guarantee finite inputs and that the CPU
 * supports AVX2. */
#include <immintrin.h>
#include <math.h>
#include <stddef.h>

__m256d _ZGVdN4v_exp(__m256d);

void dsattn_vexp_avx2(double *v, size_t n) {
  size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(v + i, _ZGVdN4v_exp(_mm256_loadu_pd(v + i)));
  for (; i < n; i++) v[i] = exp(v[i]);
}
