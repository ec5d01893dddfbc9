#include "mta/spans.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

namespace mta {

using nlohmann::json;

const char* to_string(PhraseLabel label) { return label == PhraseLabel::NP ? "NP" : "VP"; }

const char* to_string(Granularity g) { return g == Granularity::word ? "word" : "phrase"; }

Granularity granularity_from_string(const std::string& s) {
  if (s == "word") return Granularity::word;
  if (s == "phrase") return Granularity::phrase;
  throw Error("unknown granularity '" + s + "'");
}

std::vector<std::size_t> scalar_byte_offsets(std::string_view utf8) {
  std::vector<std::size_t> offsets;
  offsets.reserve(utf8.size() + 1);
  std::size_t i = 0;
  while (i < utf8.size()) {
    offsets.push_back(i);
    const auto c = static_cast<unsigned char>(utf8[i]);
    std::size_t len = 1;
    if (c >= 0xF0 && c < 0xF8) {
      len = 4;
    } else if (c >= 0xE0) {
      len = 3;
    } else if (c >= 0xC0) {
      len = 2;
    } else if (c >= 0x80) {
      throw Error("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (c >= 0xF8) throw Error("invalid UTF-8 lead byte at offset " + std::to_string(i));
    if (i + len > utf8.size()) throw Error("truncated UTF-8 sequence at offset " + std::to_string(i));
    for (std::size_t k = 1; k < len; ++k) {
      if ((static_cast<unsigned char>(utf8[i + k]) & 0xC0) != 0x80) {
        throw Error("invalid UTF-8 continuation byte at offset " + std::to_string(i + k));
      }
    }
    i += len;
  }
  offsets.push_back(utf8.size());
  return offsets;
}

std::size_t scalar_length(std::string_view utf8) { return scalar_byte_offsets(utf8).size() - 1; }

// ---- validation / JSONL -------------------------------------------------------

namespace {

template <typename Span>
void check_granularity(const std::vector<Span>& spans, std::size_t length, const std::string& what,
                       const std::string& sample_id) {
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& s = spans[i];
    if (!(s.start_char < s.end_char) || s.end_char > length) {
      throw Error("sample " + sample_id + ": " + what + " span " + std::to_string(i) + " [" +
                  std::to_string(s.start_char) + ", " + std::to_string(s.end_char) + ") out of bounds for text of " +
                  std::to_string(length) + " characters");
    }
    if (i > 0 && s.start_char < spans[i - 1].end_char) {
      throw Error("sample " + sample_id + ": " + what + " spans " + std::to_string(i - 1) + " and " +
                  std::to_string(i) + " overlap or are unsorted");
    }
  }
}

std::size_t offset_field(const json& obj, const char* key, std::size_t line_no) {
  if (!obj.contains(key) || !obj.at(key).is_number_unsigned()) {
    throw Error("line " + std::to_string(line_no) + ": span needs a non-negative integer '" + key + "'");
  }
  return obj.at(key).get<std::size_t>();
}

}  // namespace

void SpanAnnotation::validate() const {
  const std::size_t length = scalar_length(text);
  check_granularity(words, length, "word", sample_id);
  check_granularity(phrases, length, "phrase", sample_id);
}

SpanAnnotation parse_span_line(const std::string& line, std::size_t line_no) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
  }
  const auto prefix = "line " + std::to_string(line_no) + ": ";
  if (!j.is_object()) throw Error(prefix + "expected an object");
  for (const char* key : {"sample_id", "text"}) {
    if (!j.contains(key) || !j.at(key).is_string()) throw Error(prefix + "missing string field '" + key + "'");
  }
  SpanAnnotation ann;
  ann.sample_id = j.at("sample_id").get<std::string>();
  ann.text = j.at("text").get<std::string>();
  for (const auto& w : j.value("words", json::array())) {
    ann.words.push_back({offset_field(w, "start_char", line_no), offset_field(w, "end_char", line_no)});
  }
  for (const auto& p : j.value("phrases", json::array())) {
    const std::string label = p.value("label", "");
    if (label != "NP" && label != "VP") throw Error(prefix + "phrase label must be NP or VP, got '" + label + "'");
    ann.phrases.push_back({offset_field(p, "start_char", line_no), offset_field(p, "end_char", line_no),
                           label == "NP" ? PhraseLabel::NP : PhraseLabel::VP});
  }
  try {
    ann.validate();
  } catch (const Error& e) {
    throw Error(prefix + e.what());
  }
  return ann;
}

std::string format_span_line(const SpanAnnotation& ann) {
  json j;
  j["sample_id"] = ann.sample_id;
  j["text"] = ann.text;
  j["words"] = json::array();
  for (const auto& w : ann.words) j["words"].push_back({{"start_char", w.start_char}, {"end_char", w.end_char}});
  j["phrases"] = json::array();
  for (const auto& p : ann.phrases) {
    j["phrases"].push_back({{"start_char", p.start_char}, {"end_char", p.end_char}, {"label", to_string(p.label)}});
  }
  return j.dump();
}

std::vector<SpanAnnotation> read_span_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open span file " + path.string());
  std::vector<SpanAnnotation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_span_line(line, line_no));
  }
  return out;
}

void write_span_jsonl(const std::filesystem::path& path, const std::vector<SpanAnnotation>& anns) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write span file " + path.string());
  for (const auto& a : anns) os << format_span_line(a) << '\n';
}

// ---- alignment ----------------------------------------------------------------

TokenSpanMap align_byte_spans(std::span<const ByteRange> spans, std::span<const ByteRange> tokens,
                              std::size_t usable_tokens, Granularity granularity) {
  TokenSpanMap map;
  map.granularity = granularity;
  const std::size_t usable = std::min(usable_tokens, tokens.size());
  std::vector<TokenSpan> resolved;
  for (const ByteRange& s : spans) {
    bool found = false;
    TokenSpan ts;
    for (std::size_t t = 0; t < usable; ++t) {
      const ByteRange& tok = tokens[t];
      if (std::max(tok.start, s.start) < std::min(tok.end, s.end)) {
        if (!found) ts.first = t;
        ts.last = t;
        found = true;
      }
    }
    if (found) {
      resolved.push_back(ts);
    } else {
      ++map.dropped_count;
    }
  }
  std::sort(resolved.begin(), resolved.end(),
            [](const TokenSpan& a, const TokenSpan& b) { return a.first < b.first || (a.first == b.first && a.last < b.last); });
  for (const TokenSpan& ts : resolved) {
    if (!map.spans.empty() && ts.first <= map.spans.back().last) {
      map.spans.back().last = std::max(map.spans.back().last, ts.last);
    } else {
      map.spans.push_back(ts);
    }
  }
  return map;
}

AlignedSpans align_spans(const SpanAnnotation& ann, const Encoding& enc, std::size_t usable_tokens) {
  if (ann.text != enc.text) {
    throw Error("sample " + ann.sample_id + ": annotation text does not match the tokenized text");
  }
  const auto bytes = scalar_byte_offsets(ann.text);
  const auto to_bytes = [&](std::size_t s, std::size_t e) {
    if (e >= bytes.size() || s >= e) throw Error("sample " + ann.sample_id + ": span outside text");
    return ByteRange{bytes[s], bytes[e]};
  };
  std::vector<ByteRange> words, phrases;
  for (const auto& w : ann.words) words.push_back(to_bytes(w.start_char, w.end_char));
  for (const auto& p : ann.phrases) phrases.push_back(to_bytes(p.start_char, p.end_char));

  AlignedSpans out;
  out.words = align_byte_spans(words, enc.ranges, usable_tokens, Granularity::word);
  out.phrases = align_byte_spans(phrases, enc.ranges, usable_tokens, Granularity::phrase);
  if (out.phrases.spans.empty()) {
    const std::size_t dropped = out.phrases.dropped_count;
    out.phrases = out.words;
    out.phrases.granularity = Granularity::phrase;
    out.phrases.dropped_count = dropped;
    out.phrases.fell_back_to_words = true;
  }
  return out;
}

// ---- span tensors ---------------------------------------------------------

Tensor span_membership(const TokenSpanMap& map, std::size_t seq) {
  std::vector<double> m(map.size() * seq, 0.0);
  for (std::size_t k = 0; k < map.size(); ++k) {
    const TokenSpan& s = map.spans[k];
    if (s.last >= seq || s.first > s.last) {
      throw Error("span [" + std::to_string(s.first) + ", " + std::to_string(s.last) + "] outside sequence of " +
                  std::to_string(seq));
    }
    for (std::size_t t = s.first; t <= s.last; ++t) m[k * seq + t] = 1.0;
  }
  return Tensor({map.size(), seq}, std::move(m));
}

Tensor span_representations(const Tensor& hidden, const Tensor& weights, const TokenSpanMap& map) {
  if (hidden.rank() != 2 || weights.shape() != Shape{hidden.dim(0)}) {
    throw ShapeError("span_representations: hidden " + to_string(hidden.shape()) + " vs weights " +
                     to_string(weights.shape()));
  }
  if (map.spans.empty()) throw Error("span_representations: no spans");
  const std::size_t seq = hidden.dim(0);
  const Tensor pooled = span_membership(map, seq) * reshape(weights, {1, seq});  // [N, seq]
  const Tensor total = sum(pooled, 1, true);                                      // [N, 1]
  for (std::size_t k = 0; k < map.size(); ++k) {
    if (!(total[k] > 1e-12)) {
      throw Error("span_representations: span " + std::to_string(k) + " has total token weight " +
                  std::to_string(total[k]));
    }
  }
  return matmul(pooled, hidden) / total;
}

Tensor span_weights(const Tensor& teacher_weights, const TokenSpanMap& map) {
  if (teacher_weights.rank() != 1) throw ShapeError("span_weights: expected [seq], got " + to_string(teacher_weights.shape()));
  if (map.spans.empty()) throw Error("span_weights: no spans");
  const std::size_t seq = teacher_weights.dim(0);
  const Tensor raw = reshape(matmul(span_membership(map, seq), reshape(teacher_weights, {seq, 1})), {map.size()});
  const Tensor total = sum(raw);
  if (!(total.item() > 0.0)) throw Error("span_weights: every span has zero weight");
  return raw / total;
}

}  // namespace mta
