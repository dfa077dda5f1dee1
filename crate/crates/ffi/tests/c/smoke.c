#include <stdio.h>
#include <stdlib.h>
#include "vmcnet.h"

#define CHECK(call)                                                        \
  do {                                                                     \
    VmcStatus s_ = (call);                                                 \
    if (s_ != VMC_STATUS_OK) {                                             \
      fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, vmc_last_error_message()); \
      return 1;                                                            \
    }                                                                      \
  } while (0)

int main(void) {
  VmcModel *model = NULL;
  CHECK(vmc_model_new(NULL, 7, &model));

  uint64_t frozen = 0, trainable = 0;
  CHECK(vmc_model_parameter_counts(model, &frozen, &trainable));

  size_t n = 1, h = 64, w = 64;
  double *img = malloc(n * h * w * 3 * sizeof(double));
  for (size_t i = 0; i < n * h * w * 3; i++) img[i] = (double)(i % 17) / 16.0;

  VmcPyramid *pyr = NULL;
  CHECK(vmc_model_forward(model, img, n, h, w, VMC_MODE_CONFIGURED, false, &pyr));
  for (size_t l = 0; l < 4; l++) {
    size_t shape[4], rank = 0;
    CHECK(vmc_pyramid_level_shape(pyr, l, shape, &rank));
    size_t len = shape[0] * shape[1] * shape[2] * shape[3];
    double *buf = malloc(len * sizeof(double));
    CHECK(vmc_pyramid_level_data(pyr, l, buf, len));
    printf("level %zu: %zux%zux%zux%zu first=%.6f\n", l, shape[0], shape[1], shape[2], shape[3], buf[0]);
    if (shape[1] != h >> (l + 2)) return 3;
    free(buf);
  }

  if (vmc_model_forward(NULL, img, n, h, w, 0, false, &pyr) != VMC_STATUS_NULL_POINTER) return 4;
  if (vmc_model_forward(model, img, n, 60, 60, 0, false, &pyr) == VMC_STATUS_OK) return 5;

  double sp[2] = {0.8, 0.5}, sv[2] = {0.2, 0.5}, fused[2];
  CHECK(vmc_fuse_scores(sp, sv, 2, 0.5, fused));
  if (fused[0] < 0.399999 || fused[0] > 0.400001) return 6;

  printf("frozen=%llu trainable=%llu ok\n", (unsigned long long)frozen, (unsigned long long)trainable);
  vmc_pyramid_free(pyr);
  vmc_model_free(model);
  free(img);
  return 0;
}
