#include "mta/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <unordered_map>

#include <nlohmann/json.hpp>

namespace mta {

namespace {

const std::vector<std::string> kDetSingular = {"a", "every", "one"};
const std::vector<std::string> kDetPlural = {"some", "two", "many"};
const std::vector<std::string> kAdjectives = {"red", "small", "happy", "old", "blue", "quiet"};
const std::vector<std::string> kNounSingular = {"cat", "dog", "bird", "child", "farmer", "ball", "tree", "river"};
const std::vector<std::string> kNounPlural = {"cats", "dogs", "birds", "children", "farmers", "balls", "trees", "rivers"};
const std::vector<std::string> kVerbSingular = {"sees", "chases", "likes", "finds", "hears", "follows"};
const std::vector<std::string> kVerbBase = {"see", "chase", "like", "find", "hear", "follow"};
const std::vector<std::string> kAux = {"will", "can", "must"};
const std::vector<std::string> kPrep = {"near", "under", "with"};
constexpr const char* kThe = "the";
constexpr const char* kSeparator = "|";

struct Word {
  std::string text;
  int chunk = -1;  // index into the chunk label list, -1 when outside any chunk
};

class SentenceBuilder {
 public:
  explicit SentenceBuilder(std::mt19937_64& rng) : rng_(rng) {}

  std::vector<Word> sentence(std::vector<PhraseLabel>& labels) {
    std::vector<Word> out;
    const bool plural_subject = noun_phrase(out, labels);
    verb_group(out, labels, plural_subject);
    noun_phrase(out, labels);
    if (coin(0.4)) {
      out.push_back({pick(kPrep), -1});
      noun_phrase(out, labels);
    }
    return out;
  }

 private:
  bool coin(double p) { return std::bernoulli_distribution(p)(rng_); }
  const std::string& pick(const std::vector<std::string>& v) {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng_)];
  }

  bool noun_phrase(std::vector<Word>& out, std::vector<PhraseLabel>& labels) {
    const int chunk = static_cast<int>(labels.size());
    labels.push_back(PhraseLabel::NP);
    const bool plural = coin(0.5);
    if (coin(0.3)) {
      out.push_back({kThe, chunk});
    } else {
      out.push_back({pick(plural ? kDetPlural : kDetSingular), chunk});
    }
    if (coin(0.5)) out.push_back({pick(kAdjectives), chunk});
    out.push_back({pick(plural ? kNounPlural : kNounSingular), chunk});
    return plural;
  }

  void verb_group(std::vector<Word>& out, std::vector<PhraseLabel>& labels, bool plural_subject) {
    const int chunk = static_cast<int>(labels.size());
    labels.push_back(PhraseLabel::VP);
    const std::size_t verb = std::uniform_int_distribution<std::size_t>(0, kVerbBase.size() - 1)(rng_);
    if (coin(0.35)) {
      out.push_back({pick(kAux), chunk});
      out.push_back({kVerbBase[verb], chunk});
    } else {
      out.push_back({plural_subject ? kVerbBase[verb] : kVerbSingular[verb], chunk});
    }
  }

  std::mt19937_64& rng_;
};

void append_words(const std::vector<Word>& words, int chunk_offset, std::string& text,
                  std::vector<CharSpan>& word_spans, std::vector<std::pair<int, CharSpan>>& chunk_spans) {
  for (const Word& w : words) {
    if (!text.empty()) text.push_back(' ');
    const std::size_t start = text.size();
    text += w.text;
    const CharSpan span{start, text.size()};
    word_spans.push_back(span);
    if (w.chunk < 0) continue;
    const int id = w.chunk + chunk_offset;
    if (!chunk_spans.empty() && chunk_spans.back().first == id) {
      chunk_spans.back().second.end_char = span.end_char;
    } else {
      chunk_spans.push_back({id, span});
    }
  }
}

}  // namespace

std::vector<std::string> grammar_lexicon() {
  std::vector<std::string> lex;
  for (const auto* group : {&kDetSingular, &kDetPlural, &kAdjectives, &kNounSingular, &kNounPlural, &kVerbSingular,
                            &kVerbBase, &kAux, &kPrep}) {
    lex.insert(lex.end(), group->begin(), group->end());
  }
  lex.emplace_back(kThe);
  lex.emplace_back(kSeparator);
  return lex;
}

AnnotatedCorpus generate_grammar_corpus(std::size_t n, std::uint64_t seed, bool copy_task) {
  std::mt19937_64 rng(seed);
  SentenceBuilder builder(rng);
  AnnotatedCorpus corpus;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<PhraseLabel> labels;
    const std::vector<Word> sentence = builder.sentence(labels);

    Sample sample;
    sample.id = "g" + std::to_string(seed) + "-" + std::to_string(i);
    SpanAnnotation ann;
    ann.sample_id = sample.id;
    std::vector<std::pair<int, CharSpan>> chunks;
    append_words(sentence, 0, sample.text, ann.words, chunks);
    if (copy_task) {
      append_words({{kSeparator, -1}}, 0, sample.text, ann.words, chunks);
      sample.response_start = sample.text.size() + 1;
      append_words(sentence, static_cast<int>(labels.size()), sample.text, ann.words, chunks);
    }
    for (const auto& [id, span] : chunks) {
      ann.phrases.push_back({span.start_char, span.end_char, labels[static_cast<std::size_t>(id) % labels.size()]});
    }
    ann.text = sample.text;
    corpus.samples.push_back(std::move(sample));
    corpus.spans.push_back(std::move(ann));
  }
  return corpus;
}

std::vector<Sample> read_corpus_jsonl(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open corpus " + path.string());
  std::vector<Sample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      Sample s;
      s.id = j.at("id").get<std::string>();
      s.text = j.at("text").get<std::string>();
      const std::size_t response_char = j.value("response_start", std::size_t{0});
      const auto offsets = scalar_byte_offsets(s.text);
      if (response_char >= offsets.size()) throw Error("response_start beyond text");
      s.response_start = offsets[response_char];
      out.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw Error(path.string() + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_corpus_jsonl(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write corpus " + path.string());
  for (const Sample& s : samples) {
    const auto offsets = scalar_byte_offsets(s.text);
    const auto it = std::lower_bound(offsets.begin(), offsets.end(), s.response_start);
    nlohmann::json j{{"id", s.id}, {"text", s.text}, {"response_start", it - offsets.begin()}};
    os << j.dump() << '\n';
  }
}

std::vector<EncodedSample> encode_corpus(const std::vector<Sample>& samples, const std::vector<SpanAnnotation>& spans,
                                         const Tokenizer& tokenizer, std::size_t max_seq_len) {
  std::unordered_map<std::string, const SpanAnnotation*> by_id;
  for (const auto& a : spans) by_id.emplace(a.sample_id, &a);
  std::vector<EncodedSample> out;
  out.reserve(samples.size());
  for (const Sample& s : samples) {
    EncodedSample e;
    e.id = s.id;
    e.encoding = tokenizer.encode(s.text);
    if (e.encoding.ids.size() > max_seq_len) {
      e.encoding.ids.resize(max_seq_len);
      e.encoding.ranges.resize(max_seq_len);
    }
    e.response_token = e.encoding.ids.size();
    for (std::size_t t = 1; t < e.encoding.ids.size(); ++t) {
      if (e.encoding.ranges[t].start >= s.response_start) {
        e.response_token = t;
        break;
      }
    }
    if (!spans.empty()) {
      const auto it = by_id.find(s.id);
      if (it == by_id.end()) throw Error("sample " + s.id + ": no span annotation with this sample_id");
      e.spans = align_spans(*it->second, e.encoding, e.encoding.ids.size());
    }
    out.push_back(std::move(e));
  }
  return out;
}

Batch make_batch(const std::vector<const EncodedSample*>& rows, std::int32_t pad_id, bool response_only) {
  if (rows.empty()) throw Error("empty batch");
  std::size_t seq = 0;
  for (const auto* r : rows) seq = std::max(seq, r->encoding.ids.size());
  const std::size_t B = rows.size();
  Batch batch;
  batch.tokens.batch = B;
  batch.tokens.seq = seq;
  batch.tokens.ids.assign(B * seq, pad_id);
  std::vector<std::uint8_t> pad(B * seq, 1);
  batch.targets.assign(B * seq, pad_id);
  batch.loss_mask.assign(B * seq, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& ids = rows[b]->encoding.ids;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      batch.tokens.ids[b * seq + t] = ids[t];
      pad[b * seq + t] = 0;
      if (t + 1 < ids.size()) {
        batch.targets[b * seq + t] = ids[t + 1];
        const bool supervised = !response_only || t + 1 >= rows[b]->response_token;
        batch.loss_mask[b * seq + t] = supervised ? 1.0 : 0.0;
      }
    }
    batch.spans.push_back(rows[b]->spans);
  }
  batch.tokens.padding = Mask({B, seq}, std::move(pad));
  return batch;
}

}  // namespace mta
