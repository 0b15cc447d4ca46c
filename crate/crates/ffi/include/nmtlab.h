#ifndef NMTLAB_H
#define NMTLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  NMT_STATUS_OK = 0,
  NMT_STATUS_NULL_POINTER = 1,
  NMT_STATUS_INVALID_UTF8 = 2,
  // Bad input detected before any work: sizes, ranges, configuration.
  NMT_STATUS_INVALID_ARGUMENT = 3,
  NMT_STATUS_IO = 4,
  // Any other failure inside the library.
  NMT_STATUS_RUNTIME = 5,
  NMT_STATUS_PANIC = 6,
} NmtStatus;

typedef enum {
  NMT_T_TEST_VARIANT_PAIRED = 0,
  NMT_T_TEST_VARIANT_WELCH = 1,
} NmtTTestVariant;

// Opaque BPE model.
typedef struct NmtBpe NmtBpe;

// Opaque trained model with its vocabulary and decoding settings.
typedef struct NmtTranslator NmtTranslator;

typedef struct {
  double bleu;
  double chrf;
  double ter;
} NmtScores;

typedef struct {
  double t;
  double df;
  double p;
  // Nonzero when both groups have zero spread but different means.
  uint8_t degenerate;
} NmtTTest;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *nmt_last_error(void);

// Library version as a static NUL-terminated string.
const char *nmt_version(void);

// # Safety
// `s` must be null or a string returned by this library, freed once.
void nmt_string_free(char *s);

// Loads a model written as a merges file plus a vocabulary file.
//
// # Safety
// Path arguments must be NUL-terminated; `out` must be writable.
NmtStatus nmt_bpe_load(const char *merges_path, const char *vocab_path, NmtBpe **out);

// Learns `num_merges` merges from `n` lines.
//
// # Safety
// `lines` must point to `n` NUL-terminated strings; `out` must be writable.
NmtStatus nmt_bpe_learn(const char *const *lines, uintptr_t n, uintptr_t num_merges, NmtBpe **out);

// Saves a model to a merges file and a vocabulary file.
//
// # Safety
// `bpe` must come from this library; paths must be NUL-terminated.
NmtStatus nmt_bpe_save(const NmtBpe *bpe, const char *merges_path, const char *vocab_path);

// Segments one line; tokens are joined by single spaces. `dropout` of 0
// gives the deterministic segmentation.
//
// # Safety
// `bpe` must come from this library; `out` receives a string to free with
// `nmt_string_free`.
NmtStatus nmt_bpe_apply(const NmtBpe *bpe,
                        const char *line,
                        double dropout,
                        uint64_t seed,
                        char **out);

// Inverse of `nmt_bpe_apply`: space-separated subword tokens back to text.
//
// # Safety
// `tokens` must be NUL-terminated; `out` must be writable.
NmtStatus nmt_bpe_decode(const char *tokens, char **out);

// # Safety
// `bpe` must be null or a handle from this library, freed once.
void nmt_bpe_free(NmtBpe *bpe);

// Loads a checkpoint and the subword model it was trained with. A
// `beam_size` of 0 or 1 decodes greedily.
//
// # Safety
// Paths must be NUL-terminated; `out` must be writable.
NmtStatus nmt_translator_load(const char *checkpoint_path,
                              const char *merges_path,
                              const char *vocab_path,
                              uintptr_t beam_size,
                              uintptr_t max_len,
                              NmtTranslator **out);

// Translates one line. The input is normalized first.
//
// # Safety
// `t` must come from this library; `out` receives a string to free with
// `nmt_string_free`.
NmtStatus nmt_translate(const NmtTranslator *t, const char *line, char **out);

// # Safety
// `t` must be null or a handle from this library, freed once.
void nmt_translator_free(NmtTranslator *t);

// Corpus BLEU, chrF and TER of `n` hypothesis lines against `n` references.
//
// # Safety
// `hyps` and `refs` must each point to `n` NUL-terminated strings.
NmtStatus nmt_score(const char *const *hyps, const char *const *refs, uintptr_t n, NmtScores *out);

// Two-tailed t-test of `a` against `b`. The paired variant needs equal
// lengths.
//
// # Safety
// `a` and `b` must point to `na` and `nb` doubles.
NmtStatus nmt_ttest(const double *a,
                    uintptr_t na,
                    const double *b,
                    uintptr_t nb,
                    NmtTTestVariant variant,
                    NmtTTest *out);

// Bonferroni correction over the `n` raw p-values. Writes `n` corrected
// values and `n` reject flags (1 when the corrected value is below
// `alpha`).
//
// # Safety
// `raw_p` must hold `n` doubles; `corrected` and `reject` must have room for
// `n` entries.
NmtStatus nmt_bonferroni(const double *raw_p,
                         uintptr_t n,
                         double alpha,
                         double *corrected,
                         uint8_t *reject);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NMTLAB_H */
