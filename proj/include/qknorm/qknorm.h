/* C interface to the qknorm transformer library.
 *
 * Every fallible call returns a qk_status. On failure the message is kept
 * per thread and read back with qk_last_error(). Strings handed out through
 * char** parameters are owned by the caller and released with qk_string_free.
 */
#ifndef QKNORM_QKNORM_H
#define QKNORM_QKNORM_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define QK_API __declspec(dllexport)
#else
#define QK_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum qk_status {
  QK_OK = 0,
  QK_ERR_INVALID_ARGUMENT = 1,
  QK_ERR_SHAPE = 2,
  QK_ERR_IO = 3,
  QK_ERR_DIVERGED = 4,
  QK_ERR_FORMAT = 5,
  QK_ERR_INTERNAL = 99
} qk_status;

typedef struct qk_config qk_config;
typedef struct qk_corpus qk_corpus;
typedef struct qk_model qk_model;

QK_API const char* qk_version(void);
/* Message of the last failed call on this thread, "" if none. */
QK_API const char* qk_last_error(void);
QK_API void qk_string_free(char* s);

/* Configuration: a flat set of kebab-case keys with string values. */
QK_API qk_status qk_config_new(qk_config** out);
QK_API void qk_config_free(qk_config* cfg);
QK_API qk_status qk_config_set(qk_config* cfg, const char* key, const char* value);
QK_API qk_status qk_config_get(const qk_config* cfg, const char* key, char** value);
/* key=value lines, '#' comments. */
QK_API qk_status qk_config_load_file(qk_config* cfg, const char* path);
QK_API size_t qk_config_key_count(void);
/* NULL when index is out of range. */
QK_API const char* qk_config_key_name(size_t index);
QK_API const char* qk_config_key_help(size_t index);
/* "model", "train" or "data". */
QK_API const char* qk_config_key_group(size_t index);

/* Corpus from the config's data keys (files or toy-task). */
QK_API qk_status qk_corpus_load(const qk_config* cfg, qk_corpus** out);
QK_API void qk_corpus_free(qk_corpus* corpus);
/* Writes {train,dev,test}.{src,tgt} into dir. */
QK_API qk_status qk_corpus_write(const qk_corpus* corpus, const char* dir);
/* Tab-separated key/value summary: split sizes, vocab sizes, L, g0. */
QK_API qk_status qk_corpus_summary(const qk_corpus* corpus, const qk_config* cfg, char** report);

typedef void (*qk_epoch_fn)(void* user, size_t epoch, double train_loss, double dev_bleu,
                            double dev_accuracy, double lr, int improved);

/* Trains a model. report: tab-separated key/value lines. step_log: TSV with
 * columns step, epoch, lr, loss, grad_norm. Any out pointer may be NULL. */
QK_API qk_status qk_train(const qk_config* cfg, const qk_corpus* corpus, qk_epoch_fn on_epoch,
                          void* user, qk_model** model_out, char** report, char** step_log);

QK_API qk_status qk_model_load(const char* checkpoint_path, qk_model** out);
QK_API qk_status qk_model_save(const qk_model* model, const char* checkpoint_path);
QK_API void qk_model_free(qk_model* model);
/* Greedy-decodes src_path and scores against ref_path. hypotheses holds one
 * detokenized line per source. */
QK_API qk_status qk_model_evaluate(const qk_model* model, const char* src_path,
                                   const char* ref_path, char** report, char** hypotheses);
/* Encoder self-attention heatmaps for one source sentence. */
QK_API qk_status qk_model_export_attention(const qk_model* model, const char* sentence,
                                           const char* out_dir, size_t* files_written);
QK_API qk_status qk_model_g_values(const qk_model* model, char** values);

typedef void (*qk_sweep_row_fn)(void* user, const char* row_tsv);

/* kind: heads, percentile or ablation. table is TSV with a header row. */
QK_API qk_status qk_sweep(const qk_config* cfg, const qk_corpus* corpus, const char* kind,
                          qk_sweep_row_fn on_row, void* user, char** table);

/* Corpus BLEU of two line-aligned files. tokenizer: whitespace or char. */
QK_API qk_status qk_bleu_files(const char* hyp_path, const char* ref_path, const char* tokenizer,
                               char** report);
QK_API qk_status qk_bootstrap_files(const char* hyp_a_path, const char* hyp_b_path,
                                    const char* ref_path, const char* tokenizer,
                                    size_t resamples, uint64_t seed, char** report);

#ifdef __cplusplus
}
#endif

#endif
