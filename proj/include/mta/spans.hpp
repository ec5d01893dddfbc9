#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mta/tensor.hpp"
#include "mta/tokenizer.hpp"

namespace mta {

enum class PhraseLabel { NP, VP };
enum class Granularity { word, phrase };

const char* to_string(PhraseLabel label);
const char* to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);

// Offsets count Unicode scalar values; [start_char, end_char).
struct CharSpan {
  std::size_t start_char = 0;
  std::size_t end_char = 0;
  bool operator==(const CharSpan&) const = default;
};

struct PhraseSpan {
  std::size_t start_char = 0;
  std::size_t end_char = 0;
  PhraseLabel label = PhraseLabel::NP;
  bool operator==(const PhraseSpan&) const = default;
};

struct SpanAnnotation {
  std::string sample_id;
  std::string text;
  std::vector<CharSpan> words;
  std::vector<PhraseSpan> phrases;

  // Bounds, ordering and non-overlap within each granularity.
  void validate() const;
  bool operator==(const SpanAnnotation&) const = default;
};

// Inclusive model-token index range.
struct TokenSpan {
  std::size_t first = 0;
  std::size_t last = 0;
  bool operator==(const TokenSpan&) const = default;
};

struct TokenSpanMap {
  Granularity granularity = Granularity::word;
  std::vector<TokenSpan> spans;
  std::size_t dropped_count = 0;
  bool fell_back_to_words = false;  // phrase map built from word spans

  std::size_t size() const { return spans.size(); }
};

struct AlignedSpans {
  TokenSpanMap words;
  TokenSpanMap phrases;
  const TokenSpanMap& at(Granularity g) const { return g == Granularity::word ? words : phrases; }
};

struct SpanTensors {
  Tensor reps;     // [n_spans, d]
  Tensor weights;  // [n_spans], sums to one
};

// ---- span annotation JSONL --------------------------------------------------

SpanAnnotation parse_span_line(const std::string& line, std::size_t line_no);
std::string format_span_line(const SpanAnnotation& ann);
std::vector<SpanAnnotation> read_span_jsonl(const std::filesystem::path& path);
void write_span_jsonl(const std::filesystem::path& path, const std::vector<SpanAnnotation>& anns);

// Byte offset of every Unicode scalar boundary: n_scalars + 1 entries.
std::vector<std::size_t> scalar_byte_offsets(std::string_view utf8);
std::size_t scalar_length(std::string_view utf8);

// ---- alignment ----------------------------------------------------------------

// Resolves byte ranges to token ranges: token t joins a span when their byte
// ranges share at least one byte. Tokens at or beyond `usable_tokens` are
// padding/truncation and never join. Spans with no token are dropped and
// counted; overlapping results are merged.
TokenSpanMap align_byte_spans(std::span<const ByteRange> spans, std::span<const ByteRange> tokens,
                              std::size_t usable_tokens, Granularity granularity);

// Aligns both granularities of an annotation to an encoding of the same text.
// A phrase map with no resolved phrase falls back to the word spans.
AlignedSpans align_spans(const SpanAnnotation& ann, const Encoding& enc, std::size_t usable_tokens);

// ---- span tensors ---------------------------------------------------------

// [n_spans, seq] 0/1 membership matrix.
Tensor span_membership(const TokenSpanMap& map, std::size_t seq);

// U_k = sum_{t in S_k} w_t H_t / sum_{t in S_k} w_t.  hidden [seq, d], weights [seq].
Tensor span_representations(const Tensor& hidden, const Tensor& weights, const TokenSpanMap& map);

// Teacher token weights summed per span, normalized across spans.
Tensor span_weights(const Tensor& teacher_weights, const TokenSpanMap& map);

}  // namespace mta
