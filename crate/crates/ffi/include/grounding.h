#ifndef GROUNDING_H
#define GROUNDING_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Result of every fallible call.
 */
typedef enum GrdStatus {
  GRD_STATUS_OK = 0,
  /*
   A required pointer argument was NULL.
   */
  GRD_STATUS_NULL_ARGUMENT = 1,
  /*
   A string argument was not valid UTF-8.
   */
  GRD_STATUS_INVALID_UTF8 = 2,
  /*
   Input text did not parse.
   */
  GRD_STATUS_PARSE = 3,
  /*
   Input parsed but violates a rule (bad id, duplicate, bad parameter).
   */
  GRD_STATUS_INVALID_INPUT = 4,
  /*
   File system failure.
   */
  GRD_STATUS_IO = 5,
  /*
   The reasoning backend failed.
   */
  GRD_STATUS_BACKEND = 6,
  /*
   Internal panic, caught at the boundary.
   */
  GRD_STATUS_PANIC = 7,
} GrdStatus;

/*
 Opaque instance memory.
 */
typedef struct GrdMemory GrdMemory;

/*
 Opaque action-change trigger.
 */
typedef struct GrdTrigger GrdTrigger;

/*
 Counts and scores of one matching.
 */
typedef struct GrdMatchSummary {
  size_t true_positives;
  size_t false_positives;
  size_t false_negatives;
  double precision;
  double recall;
  double gs;
} GrdMatchSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer stays
 valid until the next call into this library on the same thread.
 */
const char *grd_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *grd_version(void);

/*
 Releases a string returned by this library.
 */
void grd_string_free(char *s);

struct GrdMemory *grd_memory_new(void);

void grd_memory_free(struct GrdMemory *mem);

/*
 Stores an actor under an upstream id such as `person_1` or `robot_1`.
 */
enum GrdStatus grd_memory_insert_actor(struct GrdMemory *mem,
                                       const char *actor_id,
                                       const char *crop,
                                       double first_seen);

/*
 Registers an object under the next free id; writes its index (`k` in `object_k`).
 */
enum GrdStatus grd_memory_register_object(struct GrdMemory *mem,
                                          const char *crop,
                                          double first_seen,
                                          uint32_t *out_index);

/*
 Appends one event tuple given as a JSON object.
 */
enum GrdStatus grd_memory_append_event(struct GrdMemory *mem, const char *tuple_json);

enum GrdStatus grd_memory_event_count(const struct GrdMemory *mem, size_t *out_count);

/*
 Stored events as JSON lines in episodic order.
 */
enum GrdStatus grd_memory_events(const struct GrdMemory *mem, char **out_jsonl);

/*
 Whole memory as a snapshot JSON document.
 */
enum GrdStatus grd_memory_snapshot(const struct GrdMemory *mem, char **out_json);

/*
 Builds a memory handle from a snapshot document.
 */
enum GrdStatus grd_memory_load(const char *snapshot_json, struct GrdMemory **out_mem);

/*
 New trigger requiring `min_hold_frames` (at least 1) consecutive frames.
 */
enum GrdStatus grd_trigger_new(uint32_t min_hold_frames, struct GrdTrigger **out_trigger);

void grd_trigger_free(struct GrdTrigger *trigger);

enum GrdStatus grd_trigger_reset(struct GrdTrigger *trigger);

/*
 Feeds one frame line; writes a JSON array of the triggers it fires
 (`[{"actor","action","time","frame_index"}]`, often empty).
 */
enum GrdStatus grd_trigger_observe(struct GrdTrigger *trigger,
                                   const char *frame_json,
                                   char **out_triggers_json);

/*
 Matches predicted against ground-truth tuples (both JSON lines; a
 ground-truth header line is accepted) at tolerance `delta` seconds.
 */
enum GrdStatus grd_match_events(const char *gt_jsonl,
                                const char *pred_jsonl,
                                double delta,
                                struct GrdMatchSummary *out_summary);

/*
 Full report (overall and per-role) for one ground-truth file with its
 metadata header and one prediction file, as JSON.
 */
enum GrdStatus grd_score_report(const char *gt_file,
                                const char *pred_jsonl,
                                double delta,
                                char **out_json);

/*
 Writes the four files of a builtin script into `out_dir`, named after the builtin.
 */
enum GrdStatus grd_simulate_builtin(const char *name, uint64_t seed, const char *out_dir);

/*
 Runs a frame stream through trigger and reasoner with the scripted backend;
 writes the predictions as JSON lines.
 */
enum GrdStatus grd_run_scripted(const char *frames_jsonl,
                                const char *registry_json,
                                const char *oracle_json,
                                uint32_t min_hold_frames,
                                char **out_predictions_jsonl);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GROUNDING_H */
