/* Bulk exponential, 8-wide AVX-512 variant. Callers guarantee finite inputs
 * and that the CPU supports AVX-512F. */
#include <immintrin.h>
#include <math.h>
#include <stddef.h>

__m512d _ZGVeN8v_exp(__m512d);

void dsattn_vexp_avx512(double *v, size_t n) {
  size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm512_storeu_pd(v + i, _ZGVeN8v_exp(_mm512_loadu_pd(v + i)));
  for (; i < n; i++) v[i] = exp(v[i]);
}
