#include <stdint.h>

void vadd_unrolled(void **args, long start, long end)
{
    float *x = (float *) args[0];
    float *y = (float *) args[1];
    float *z = (float *) args[2];
    long i = start;
    for (; (i + 2) <= end; i += 2) {
        z[i] = x[i] + y[i];
        z[i + 1] = x[i + 1] + y[i + 1];
    }
    for (; i < end; ++i) {
        z[i] = x[i] + y[i];
    }
}
