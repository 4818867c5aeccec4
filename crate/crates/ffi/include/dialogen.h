#ifndef DIALOGEN_H
#define DIALOGEN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DgStatus {
  DG_STATUS_OK = 0,
  DG_STATUS_NULL_ARGUMENT = 1,
  DG_STATUS_INVALID_UTF8 = 2,
  DG_STATUS_SYNTAX = 3,
  DG_STATUS_IO = 4,
  DG_STATUS_SCHEMA = 5,
  DG_STATUS_UNKNOWN_INTENT = 6,
  DG_STATUS_UNKNOWN_VARIABLE = 7,
  DG_STATUS_INVALID_TRANSITION = 8,
  DG_STATUS_TYPE_MISMATCH = 9,
  DG_STATUS_ALIGNMENT = 10,
  DG_STATUS_CONFIG = 11,
  DG_STATUS_OTHER = 12,
  DG_STATUS_PANIC = 13,
} DgStatus;

// A mock back-end session bound to a catalog.
typedef struct DgBackend DgBackend;

// A loaded intent catalog.
typedef struct DgCatalog DgCatalog;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *dg_last_error(void);

// Library version as a static string.
const char *dg_version(void);

// # Safety
// `s` must come from this library, or be null.
void dg_string_free(char *s);

// Loads a catalog from a JSON-lines file.
//
// # Safety
// `path` must be a valid C string and `out` writable.
enum DgStatus dg_catalog_open(const char *path, struct DgCatalog **out);

// # Safety
// `catalog` must be a live handle and `out` writable.
enum DgStatus dg_catalog_intent_count(const struct DgCatalog *catalog, size_t *out);

// # Safety
// `catalog` must come from [`dg_catalog_open`] and not be used afterwards.
void dg_catalog_free(struct DgCatalog *catalog);

// Creates an empty back-end session. The catalog may be freed afterwards.
//
// # Safety
// `catalog` must be a live handle and `out` writable.
enum DgStatus dg_backend_new(const struct DgCatalog *catalog, struct DgBackend **out);

// Applies one command line. `*signal` receives the signal text, or null
// when the command has no back-end effect.
//
// # Safety
// `backend` must be a live handle, `command` a valid C string and
// `signal` writable.
enum DgStatus dg_backend_apply(struct DgBackend *backend, const char *command, char **signal);

// # Safety
// `backend` must come from [`dg_backend_new`] and not be used afterwards.
void dg_backend_free(struct DgBackend *backend);

// Canonical form of a newline-separated command block.
//
// # Safety
// `commands` must be a valid C string and `out` writable.
enum DgStatus dg_canonicalize(const char *commands, char **out);

// Dataset statistics as JSON.
//
// # Safety
// `dataset_path` must be a valid C string, `catalog` a live handle and
// `out` writable.
enum DgStatus dg_stats_json(const char *dataset_path, const struct DgCatalog *catalog, char **out);

// Scores a prediction file against a gold dataset; the report is JSON.
//
// # Safety
// Both paths must be valid C strings and `out` writable.
enum DgStatus dg_evaluate_json(const char *gold_path, const char *predictions_path, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIALOGEN_H */
