#pragma once

// Byte-level tokenizer with role markers, prompt rendering, JSONL ingestion
// in the (knowledge, source, target) schema, and the synthetic dataset
// generators used in place of real corpora.

#include <cstdint>
#include <string>
#include <vector>

#include "dki/tensor.hpp"

namespace dki {

// Byte alphabet plus special tokens. Marker substrings like "[SYS]" in input
// text map to the special ids; any byte string without markers round-trips
// exactly.
struct TokenizerSpec {
  static constexpr int32_t kByteCount = 256;
  static constexpr int32_t kBos = 256;
  static constexpr int32_t kPad = 257;
  static constexpr int32_t kUsr = 258;
  static constexpr int32_t kSys = 259;
  static constexpr int32_t kSep = 260;
  static constexpr int32_t kVocabSize = 261;
};

TokenIds tokenize(const std::string& text);
TokenIds tokenize_bytes(const std::string& text);  // bytes only, no markers
std::string detokenize(const TokenIds& ids);

enum class Role : uint8_t { Bos = 0, Know = 1, Usr = 2, Sys = 3 };

// A rendered sample: [BOS] ++ knowledge segment (wrapper + [SEP]-joined
// strings, k_len tokens) ++ [USR] ++ source ++ [SYS] ++ target.
struct Rendered {
  TokenIds ids;
  std::vector<Role> roles;
  int64_t k_len = 0;

  int64_t size() const { return static_cast<int64_t>(ids.size()); }
  TokenIds knowledge_segment() const;  // the k_len KNOW tokens
  TokenIds plain_sequence() const;     // [BOS] ++ USR/SYS tokens
  // Marks tokens strictly after the [SYS] marker (the scored target tokens).
  Mask target_token_mask() const;
  // Row mask for next-token cross-entropy: row i is scored iff token i+1 is
  // a scored target token.
  Mask ce_row_mask() const;
  // Row mask scoring every next-token prediction (language-model objective).
  Mask lm_row_mask() const;
};

struct KnowledgeSample {
  std::vector<std::string> knowledge;
  std::string source;
  std::string target;
};

struct EditSample {
  std::string subject;
  std::string relation;
  std::string true_object;
  std::string counter_object;
  std::vector<std::string> paraphrases;   // prompt variants for the subject
  std::vector<std::string> neighborhood;  // prompts about other subjects
  std::string prompt() const { return subject + " " + relation; }
};

Rendered render(const KnowledgeSample& sample, int max_context = 0);

struct LineError {
  int line = 0;
  std::string message;
};
struct JsonlReport {
  std::vector<LineError> errors;
};

std::vector<KnowledgeSample> load_jsonl(const std::string& path,
                                        JsonlReport* report = nullptr);
void write_jsonl(const std::string& path,
                 const std::vector<KnowledgeSample>& samples);
std::vector<EditSample> load_edits_jsonl(const std::string& path,
                                         JsonlReport* report = nullptr);
void write_edits_jsonl(const std::string& path,
                       const std::vector<EditSample>& samples);

// ---- synthetic dataset generators ----

struct KvDataset {
  std::vector<KnowledgeSample> train, val, test;
};

// Key-value recall: knowledge lists "<key> is <value>" facts (one relevant,
// n_distractors irrelevant, shuffled); the value is random, so without the
// knowledge the answer is at chance. Splits are disjoint by key.
KvDataset gen_kv_dataset(int n_entities, int n_distractors, uint64_t seed);

// Synthetic counterfacts: (subject, relation, object) triples with a swapped
// counter-object from the same relation's pool, >=2 paraphrases and >=2
// neighborhood prompts whose subjects share the relation and true object.
std::vector<EditSample> gen_counterfact_dataset(int n_edits, uint64_t seed);

// Plain statements of every true fact referenced by the edit set (edit,
// paraphrase and neighborhood prompts), for decoder pretraining.
std::vector<KnowledgeSample> counterfact_fact_samples(
    const std::vector<EditSample>& edits);

// One-hop facts-and-rules reasoning with balanced True/False/Unknown labels.
std::vector<KnowledgeSample> gen_rules_dataset(int n_samples, uint64_t seed);

}  // namespace dki
