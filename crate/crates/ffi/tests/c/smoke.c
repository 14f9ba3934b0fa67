#include <math.h>
#include <stdio.h>

#include "orepipe.h"

int main(void) {
    const char *words[] = {"stope", "haul road"};
    OrepipeMatcher *m = NULL;
    if (orepipe_matcher_new(words, 2, &m) != OREPIPE_STATUS_OK) return 1;
    bool hit = false;
    if (orepipe_matcher_is_match(m, "the haul road was graded", &hit) != OREPIPE_STATUS_OK || !hit) return 2;
    orepipe_matcher_free(m);

    OrepipeTTest t;
    if (orepipe_ttest_from_summary(55.51, 0.29, 41.2, 0.25, 100, -0.09, &t) != OREPIPE_STATUS_OK) return 3;
    if (t.df != 99 || fabs(t.t_critical_one_tail - 1.66) > 0.01) return 4;

    double percent = 0.0;
    if (orepipe_deviation(1.0, 0.0, &percent) != OREPIPE_STATUS_INVALID_ARGUMENT) return 5;
    if (orepipe_last_error() == NULL) return 6;

    printf("ok %s\n", orepipe_version());
    return 0;
}
