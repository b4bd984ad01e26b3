/* C ABI for the sbi library.
 *
 * Conventions:
 *  - Functions returning int give an error code: 0 (SBI_OK) on success.
 *    On failure, sbi_last_error_message() returns a thread-local,
 *    NUL-terminated description valid until the next failing call.
 *  - Handles are opaque; free each with its matching *_free function.
 *    Freeing NULL is a no-op. Handles are not thread-safe; do not share
 *    one handle across threads without external synchronization.
 *  - Matrices are copied out row-major; capacities are in double
 *    elements, not bytes.
 */

#ifndef SBI_H
#define SBI_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    SBI_OK = 0,
    SBI_ERR_NULL_POINTER = 1,
    SBI_ERR_INVALID_UTF8 = 2,
    SBI_ERR_UNKNOWN_SIMULATOR = 3,
    SBI_ERR_INVALID_ARGUMENT = 4,
    SBI_ERR_IO = 5,
    SBI_ERR_NUMERIC = 6,
    SBI_ERR_ARTIFACT = 7,
    SBI_ERR_PANIC = 8,
};

typedef struct SbiSimulator SbiSimulator;
typedef struct SbiDataset SbiDataset;
typedef struct SbiModel SbiModel;

/* Library version string, static storage. */
const char *sbi_version(void);

/* Message for the most recent error on the calling thread; never NULL. */
const char *sbi_last_error_message(void);

/* Simulators: "two_moons", "slcp", "lotka_volterra", "gaussian_linear". */
int sbi_simulator_create(const char *name, SbiSimulator **out);
void sbi_simulator_free(SbiSimulator *sim);
size_t sbi_simulator_theta_dim(const SbiSimulator *sim);
size_t sbi_simulator_x_dim(const SbiSimulator *sim);

/* Draw `budget` (theta, x) pairs; deterministic in `seed`. */
int sbi_simulator_generate(const SbiSimulator *sim, size_t budget,
                           uint64_t seed, SbiDataset **out);

void sbi_dataset_free(SbiDataset *ds);
size_t sbi_dataset_len(const SbiDataset *ds);
size_t sbi_dataset_theta_dim(const SbiDataset *ds);
size_t sbi_dataset_x_dim(const SbiDataset *ds);

/* Copy parameters / observations row-major into `out`; `capacity` must
 * be at least len * dim. */
int sbi_dataset_thetas(const SbiDataset *ds, double *out, size_t capacity);
int sbi_dataset_xs(const SbiDataset *ds, double *out, size_t capacity);

/* CSV round trip in the toolkit's on-disk format (17 significant
 * digits; a .meta.json sidecar is written next to the CSV). */
int sbi_dataset_save(const SbiDataset *ds, const char *path);
int sbi_dataset_load(const char *path, SbiDataset **out);

/* Load a model artifact written by `sbi train`. For Bayesian models the
 * posterior weight draws are taken here with the same seed the evaluate
 * command uses, so densities match the CLI's. */
int sbi_model_load(const char *path, SbiModel **out);
void sbi_model_free(SbiModel *model);
size_t sbi_model_theta_dim(const SbiModel *model);
size_t sbi_model_x_dim(const SbiModel *model);

/* Model-averaged log posterior density log p(theta | x). `theta_dim`
 * and `x_dim` must match the model's. */
int sbi_model_log_posterior(const SbiModel *model, const double *theta,
                            size_t theta_dim, const double *x, size_t x_dim,
                            double *out);

#ifdef __cplusplus
}
#endif

#endif /* SBI_H */
