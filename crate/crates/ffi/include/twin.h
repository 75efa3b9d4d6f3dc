#ifndef TWIN_H
#define TWIN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TwinStatus {
  TWIN_STATUS_OK = 0,
  TWIN_STATUS_NULL_ARGUMENT = 1,
  TWIN_STATUS_INVALID_UTF8 = 2,
  TWIN_STATUS_MALFORMED_JSON = 3,
  TWIN_STATUS_INVALID_REGISTRY = 4,
  TWIN_STATUS_UNKNOWN_ATTRIBUTE = 5,
  TWIN_STATUS_UNKNOWN_MODEL = 6,
  TWIN_STATUS_INVALID_VALUE = 7,
  TWIN_STATUS_INTERNAL = 99,
} TwinStatus;

/**
 * One patient's twin.
 */
typedef struct TwinHandle TwinHandle;

/**
 * A validated, immutable registry. May be shared by many twins.
 */
typedef struct TwinRegistry TwinRegistry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static nul-terminated string.
 */
const char *twin_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into the library from the same thread.
 */
const char *twin_last_error_message(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void twin_string_free(char *s);

/**
 * Parses and validates a registry document.
 *
 * # Safety
 * `json` must be a nul-terminated string; `out` must be writable.
 */
enum TwinStatus twin_registry_load_json(const char *json, struct TwinRegistry **out);

/**
 * # Safety
 * `registry` must be null or a handle from `twin_registry_load_json`, not yet freed.
 */
void twin_registry_free(struct TwinRegistry *registry);

/**
 * # Safety
 * `registry` must be a live handle.
 */
uint64_t twin_registry_version(const struct TwinRegistry *registry);

/**
 * Builds an empty twin. The twin keeps its own reference to the registry, so
 * the registry handle may be freed afterwards.
 *
 * # Safety
 * `registry` must be a live handle, `patient_id` a nul-terminated string and
 * `out` writable.
 */
enum TwinStatus twin_create(const struct TwinRegistry *registry,
                            const char *patient_id,
                            struct TwinHandle **out);

/**
 * # Safety
 * `twin` must be null or a handle from `twin_create`, not yet freed.
 */
void twin_free(struct TwinHandle *twin);

/**
 * Ingests one observation `{"attribute", "value", "timestamp", "source"}`
 * and writes the run report. On failure the twin is unchanged.
 *
 * # Safety
 * Pointers must be live; `out_report` receives a string to free with
 * `twin_string_free`.
 */
enum TwinStatus twin_ingest_json(struct TwinHandle *twin,
                                 const char *event_json,
                                 char **out_report);

/**
 * Runs `{"overrides": [...], "query": {...}}` on a scratch copy and writes
 * `{"snapshot", "report"}`. The twin is never modified.
 *
 * # Safety
 * Pointers must be live; `out` receives a string to free with `twin_string_free`.
 */
enum TwinStatus twin_what_if_json(const struct TwinHandle *twin,
                                  const char *request_json,
                                  char **out);

/**
 * # Safety
 * Pointers must be live; `out` receives a string to free with `twin_string_free`.
 */
enum TwinStatus twin_attribute_report_json(const struct TwinHandle *twin,
                                           const char *attribute,
                                           char **out);

/**
 * # Safety
 * Pointers must be live; `out` receives a string to free with `twin_string_free`.
 */
enum TwinStatus twin_snapshot_json(const struct TwinHandle *twin, char **out);

/**
 * Canonical serialized state, byte-stable across identical histories.
 *
 * # Safety
 * Pointers must be live; `out` receives a string to free with `twin_string_free`.
 */
enum TwinStatus twin_state_json(const struct TwinHandle *twin, char **out);

/**
 * # Safety
 * `twin` must be live and `model` a nul-terminated string.
 */
enum TwinStatus twin_set_model_enabled(struct TwinHandle *twin, const char *model, bool enabled);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TWIN_H */
