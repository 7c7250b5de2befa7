#ifndef NEUROVID_CAPI_H
#define NEUROVID_CAPI_H

/* C interface to the pipeline. Everything crosses this boundary as plain C
 * data: an opaque config handle, JSON text, and integer status codes. The
 * codes double as process exit codes for the CLI. */

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
    NVD_OK = 0,
    NVD_ERROR = 1,      /* unclassified failure (I/O, malformed artifact, ...) */
    NVD_CONFIG = 2,     /* bad configuration or rejected input */
    NVD_DEPENDENCY = 3, /* missing upstream artifact */
    NVD_NUMERIC = 4,    /* numerical abort (non-finite loss, ...) */
};

/* Message of the most recent failure on this thread. Never NULL; empty when
 * the last call succeeded. The buffer is owned by the library and valid
 * until the next failing call on the same thread. */
const char* nvd_last_error(void);

const char* nvd_version(void);

/* Pipeline stage names in execution order, NULL-terminated. */
const char* const* nvd_stage_names(void);

/* Opaque, validated run configuration. */
typedef struct nvd_config nvd_config;

/* Parses and validates a config document; NULL or "" gives the defaults.
 * Unknown keys and type errors are rejected. Returns NULL on error (see
 * nvd_last_error). */
nvd_config* nvd_config_create(const char* json_text);

/* Applies one "section.key=value" assignment (dashes in the path are read as
 * underscores) and re-validates. On error the handle is unchanged. */
int nvd_config_override(nvd_config* cfg, const char* assignment);

/* Canonical JSON of the effective config. Free with nvd_free. */
char* nvd_config_dump(const nvd_config* cfg);

void nvd_config_free(nvd_config* cfg);

/* Runs one stage, or "all" for the core chain (every stage except ablate),
 * inside <run_root>/<run_name>. run_root NULL or "" falls back to
 * $NEUROVID_RUN_ROOT, then "./runs". A stage whose config and inputs are
 * unchanged is skipped unless force. skipped/wall_ms may be NULL; for "all",
 * skipped reports whether every stage was skipped. */
int nvd_run_stage(const nvd_config* cfg, const char* run_root, const char* stage, int force,
                  int* skipped, double* wall_ms);

/* Frees any buffer returned by this library. */
void nvd_free(char* p);

#ifdef __cplusplus
}
#endif

#endif /* NEUROVID_CAPI_H */
