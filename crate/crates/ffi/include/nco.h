#ifndef NCO_H
#define NCO_H

#pragma once

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum NcoStatus {
  NCO_STATUS_OK = 0,
  NCO_STATUS_NULL_POINTER = 1,
  NCO_STATUS_INVALID_ARGUMENT = 2,
  NCO_STATUS_IO = 3,
  NCO_STATUS_PARSE = 4,
  NCO_STATUS_INFEASIBLE = 5,
  NCO_STATUS_MODEL = 6,
  NCO_STATUS_PANIC = 7,
} NcoStatus;

typedef enum NcoProblem {
  NCO_PROBLEM_TSP = 0,
  NCO_PROBLEM_CVRP = 1,
} NcoProblem;

/**
 * A TSP or CVRP instance, with the scaling back to file units when it was
 * read from a library file.
 */
typedef struct NcoInstance NcoInstance;

/**
 * A trained or freshly initialized model.
 */
typedef struct NcoModel NcoModel;

/**
 * A solution together with its objective.
 */
typedef struct NcoSolution NcoSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t nco_last_error(char *buf, size_t len);

/**
 * Fresh model with random parameters.
 *
 * # Safety
 * `out` must be valid for writing a pointer.
 */
enum NcoStatus nco_model_new(enum NcoProblem problem,
                             size_t d,
                             size_t layers,
                             size_t heads,
                             size_t ff_hidden,
                             uint64_t seed,
                             struct NcoModel **out);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writing.
 */
enum NcoStatus nco_model_load(const char *path, struct NcoModel **out);

/**
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void nco_model_free(struct NcoModel *model);

/**
 * Uniform random TSP instance of `n` nodes.
 *
 * # Safety
 * `out` must be valid for writing a pointer.
 */
enum NcoStatus nco_instance_generate_tsp(size_t n, uint64_t seed, struct NcoInstance **out);

/**
 * Uniform random CVRP instance of `n` customers.
 *
 * # Safety
 * `out` must be valid for writing a pointer.
 */
enum NcoStatus nco_instance_generate_cvrp(size_t n,
                                          uint32_t capacity,
                                          uint64_t seed,
                                          struct NcoInstance **out);

/**
 * TSP instance from `n` points in the unit square, `xy` holding `2n` values.
 *
 * # Safety
 * `xy` must be valid for reading `2 * n` doubles and `out` for writing.
 */
enum NcoStatus nco_instance_tsp_from_coords(const double *xy, size_t n, struct NcoInstance **out);

/**
 * CVRP instance from a depot, `n` customers (`xy` holds `2n` values) and demands.
 *
 * # Safety
 * `depot` must point to two doubles, `xy` to `2 * n` doubles, `demands` to `n`
 * values, and `out` must be valid for writing.
 */
enum NcoStatus nco_instance_cvrp_from_coords(const double *depot,
                                             const double *xy,
                                             const uint32_t *demands,
                                             size_t n,
                                             uint32_t capacity,
                                             struct NcoInstance **out);

/**
 * Reads an EUC_2D TSPLIB or CVRPLIB file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for writing.
 */
enum NcoStatus nco_instance_load(const char *path, struct NcoInstance **out);

/**
 * Number of nodes (TSP) or customers (CVRP), or 0 for a null handle.
 *
 * # Safety
 * `inst` must be null or a live handle.
 */
size_t nco_instance_size(const struct NcoInstance *inst);

/**
 * # Safety
 * `inst` must be null or a handle from this library not yet freed.
 */
void nco_instance_free(struct NcoInstance *inst);

/**
 * Random-insertion solution.
 *
 * # Safety
 * `inst` must be a live handle and `out` valid for writing.
 */
enum NcoStatus nco_random_insertion(const struct NcoInstance *inst,
                                    uint64_t seed,
                                    struct NcoSolution **out);

/**
 * Random insertion followed by `iterations` rounds of parallel local
 * reconstruction with windows of at most `l_max` nodes.
 *
 * # Safety
 * `model` and `inst` must be live handles and `out` valid for writing.
 */
enum NcoStatus nco_solve(const struct NcoModel *model,
                         const struct NcoInstance *inst,
                         size_t iterations,
                         size_t l_max,
                         uint64_t seed,
                         struct NcoSolution **out);

/**
 * Objective in the instance's units (file units for library instances).
 *
 * # Safety
 * `sol` must be null or a live handle.
 */
double nco_solution_objective(const struct NcoSolution *sol);

/**
 * Number of entries in the visiting order.
 *
 * # Safety
 * `sol` must be null or a live handle.
 */
size_t nco_solution_len(const struct NcoSolution *sol);

/**
 * Copies the visiting order (0-based node ids; customer indices for the
 * CVRP) and, when `via_depot` is not null, the CVRP route-start flags.
 *
 * # Safety
 * `order` must be valid for `len` values and `via_depot` null or valid for `len` bytes.
 */
enum NcoStatus nco_solution_copy(const struct NcoSolution *sol,
                                 size_t *order,
                                 uint8_t *via_depot,
                                 size_t len);

/**
 * # Safety
 * `sol` must be null or a handle from this library not yet freed.
 */
void nco_solution_free(struct NcoSolution *sol);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NCO_H */
