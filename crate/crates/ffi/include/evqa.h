#ifndef EVQA_H
#define EVQA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Call outcome. Nonzero values mirror the CLI exit codes, with dedicated
// codes for null arguments and invalid UTF-8.
typedef enum {
  EvqaOk = 0,
  EvqaErrUsage = 1,
  EvqaErrData = 2,
  EvqaErrRuntime = 3,
  EvqaErrNullArgument = 4,
  EvqaErrInvalidUtf8 = 5,
} EvqaStatus;

// A loaded reader checkpoint: the model plus its embedded vocabulary.
typedef struct EvqaModel EvqaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *evqa_version(void);

// Most recent error message on this thread; empty when no call failed.
// The pointer stays valid until the next failing call on this thread.
const char *evqa_last_error(void);

// Word-level answer F1 between two UTF-8 strings.
//
// # Safety
// `pred` and `gold` must be NUL-terminated strings; `out` must point to
// a writable f64.
EvqaStatus evqa_qa_f1(const char *pred, const char *gold, double *out);

// Loads a reader checkpoint. On success `*out` owns the model.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must point to a writable
// pointer slot.
EvqaStatus evqa_model_load(const char *path, EvqaModel **out);

// Runs one prediction. `example_json` is a single example in the corpus
// schema; `mode` is `single_paragraph` or `paired_paragraph`
// (`selected_evidences` needs a selector and is not exposed here). On
// success `*out` is a heap JSON prediction record; free it with
// [`evqa_string_free`].
//
// # Safety
// `model` must come from [`evqa_model_load`] and be unreleased;
// `example_json` and `mode` must be NUL-terminated strings; `out` must
// point to a writable pointer slot.
EvqaStatus evqa_model_predict_json(const EvqaModel *model,
                                   const char *example_json,
                                   const char *mode,
                                   char **out);

// Releases a model returned by [`evqa_model_load`]. Null is a no-op.
//
// # Safety
// `model` must be null or an unreleased pointer from
// [`evqa_model_load`].
void evqa_model_free(EvqaModel *model);

// Releases a string returned by this library. Null is a no-op.
//
// # Safety
// `s` must be null or an unreleased string pointer returned by this
// library.
void evqa_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVQA_H */
