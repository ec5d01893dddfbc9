#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mta/model.hpp"
#include "mta/spans.hpp"
#include "mta/tokenizer.hpp"

namespace mta {

struct Sample {
  std::string id;
  std::string text;
  // Byte offset where the response begins; 0 means the whole text.
  std::size_t response_start = 0;
};

struct AnnotatedCorpus {
  std::vector<Sample> samples;
  std::vector<SpanAnnotation> spans;  // same order as samples
};

// Words of the synthetic grammar, in tokenizer id order.
std::vector<std::string> grammar_lexicon();

// Sentences from a small agreement grammar (NP VP NP [P NP]) with gold word
// and NP/VP chunk spans. With `copy_task` each sample is "S | S" and the
// response is the copy, so every response position is greedy-decodable.
AnnotatedCorpus generate_grammar_corpus(std::size_t n, std::uint64_t seed, bool copy_task = true);

// Corpus JSONL: {"id": ..., "text": ..., "response_start": <char offset>}.
std::vector<Sample> read_corpus_jsonl(const std::filesystem::path& path);
void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<Sample>& samples);

struct EncodedSample {
  std::string id;
  Encoding encoding;            // truncated to the usable length
  std::size_t response_token = 0;  // first token index inside the response
  AlignedSpans spans;
};

// Tokenizes and truncates to max_seq_len. When `spans` is non-empty every
// sample must have an annotation with matching id and text; the first
// offending sample id is reported otherwise.
std::vector<EncodedSample> encode_corpus(const std::vector<Sample>& samples, const std::vector<SpanAnnotation>& spans,
                                         const Tokenizer& tokenizer, std::size_t max_seq_len);

struct Batch {
  TokenBatch tokens;
  std::vector<std::int32_t> targets;  // next token per position
  std::vector<double> loss_mask;      // 1 where the next token is supervised
  std::vector<AlignedSpans> spans;
};

Batch make_batch(const std::vector<const EncodedSample*>& rows, std::int32_t pad_id, bool response_only);

}  // namespace mta
