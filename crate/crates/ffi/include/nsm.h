#ifndef NSM_H
#define NSM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. `NSM_OK` is zero.
 */
typedef enum {
  NSM_OK = 0,
  NSM_INVALID_ARGUMENT = 1,
  NSM_IO_ERROR = 2,
  NSM_PARSE_ERROR = 3,
  NSM_EXEC_ERROR = 4,
  NSM_INTERNAL_ERROR = 5,
} NsmStatus;

/**
 * Loaded triple store.
 */
typedef struct NsmKb NsmKb;

/**
 * Surface-form-to-entity table for linking question text.
 */
typedef struct NsmLexicon NsmLexicon;

/**
 * Trained programmer checkpoint.
 */
typedef struct NsmModel NsmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Valid until the next
 * failing call; never null.
 */
const char *nsm_last_error(void);

/**
 * Frees a string returned by this library. Null is a no-op.
 */
void nsm_string_free(char *s);

/**
 * Loads a tab-separated triple file (`subject<TAB>property<TAB>object`).
 */
NsmStatus nsm_kb_open(const char *path, NsmKb **out);

void nsm_kb_close(NsmKb *kb);

uintptr_t nsm_kb_num_triples(const NsmKb *kb);

/**
 * Loads a tab-separated `surface<TAB>entity` lexicon.
 */
NsmStatus nsm_lexicon_open(const char *path, NsmLexicon **out);

void nsm_lexicon_close(NsmLexicon *lex);

/**
 * Loads a checkpoint written by the trainer (JSON).
 */
NsmStatus nsm_model_open(const char *path, NsmModel **out);

void nsm_model_close(NsmModel *model);

/**
 * Executes a program text against the KB. `entities` are the pre-linked
 * entity ids bound to the leading variables, in order. The denotation is
 * written to `out_values` as newline-joined value texts (empty string for
 * the empty set).
 */
NsmStatus nsm_run_program(const NsmKb *kb,
                          const char *program,
                          const char *const *entities,
                          uintptr_t n_entities,
                          char **out_values);

/**
 * Answers a whitespace-tokenized question: links entity mentions through
 * the lexicon, beam-decodes a program, executes it, and returns both the
 * best program text and its newline-joined denotation.
 */
NsmStatus nsm_answer(const NsmModel *model,
                     const NsmKb *kb,
                     const NsmLexicon *lexicon,
                     const char *question,
                     uintptr_t beam,
                     char **out_program,
                     char **out_values);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* NSM_H */
