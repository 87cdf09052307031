/* C interface for the token-level entity linking runtime.
 *
 * Usage:
 *   TokelModel *model = NULL;
 *   int rc = tokel_model_load("model.ckpt", "token_vocab.tsv",
 *                             "entity_vocab.tsv", &model);
 *   if (rc != TOKEL_OK) { ... }
 *   const char *tokens[] = {"thor", "visited", "oslo"};
 *   TokelPrediction preds[3];
 *   rc = tokel_predict(model, tokens, 3, 0.5, preds);
 *   ...
 *   tokel_model_free(model);
 */
#ifndef TOKEL_H
#define TOKEL_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes returned by every fallible function. */
#define TOKEL_OK 0
#define TOKEL_ERR_NULL_ARGUMENT 1
#define TOKEL_ERR_INVALID_UTF8 2
#define TOKEL_ERR_LOAD 3
#define TOKEL_ERR_PREDICT 4
#define TOKEL_ERR_BAD_THRESHOLD 5

/* Opaque model handle. */
typedef struct TokelModel TokelModel;

/* One token's linking decision. `entity` is NULL when the token is not
 * linked to any entity; otherwise it points at a string owned by the
 * model handle, valid until tokel_model_free. */
typedef struct TokelPrediction {
  const char *entity;
  double probability;
} TokelPrediction;

/* Loads a trained checkpoint plus its token and entity vocabularies.
 * On success writes a handle to *out and returns TOKEL_OK. The handle
 * must be released with tokel_model_free. */
int tokel_model_load(const char *checkpoint, const char *token_vocab,
                     const char *entity_vocab, TokelModel **out);

/* Links entities in n_tokens pre-tokenized words. Writes one prediction
 * per token into out, which must hold at least n_tokens entries.
 * threshold is the per-entity decision threshold in [0, 1]; 0.5 matches
 * the training-time default. */
int tokel_predict(TokelModel *model, const char *const *tokens,
                  size_t n_tokens, double threshold, TokelPrediction *out);

/* Last error message for this handle, or NULL if the previous call
 * succeeded. Valid until the next call on the same handle. */
const char *tokel_last_error(const TokelModel *model);

/* Number of linkable entities (the Nil class excluded). */
size_t tokel_kb_size(const TokelModel *model);

/* Releases a handle; NULL is a no-op. */
void tokel_model_free(TokelModel *model);

#ifdef __cplusplus
}
#endif

#endif /* TOKEL_H */
