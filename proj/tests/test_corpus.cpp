#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "mta/corpus.hpp"
#include "test_util.hpp"

using namespace mta;
using mta::testing::TempDir;

namespace {

bool contains(const std::vector<std::string>& v, const std::string& s) { return std::find(v.begin(), v.end(), s) != v.end(); }

const std::vector<std::string> kSingularNouns = {"cat", "dog", "bird", "child", "farmer", "ball", "tree", "river"};
const std::vector<std::string> kSingularVerbs = {"sees", "chases", "likes", "finds", "hears", "follows"};
const std::vector<std::string> kAux = {"will", "can", "must"};

}  // namespace

TEST(Grammar, DeterministicPerSeed) {
  const auto a = generate_grammar_corpus(50, 3), b = generate_grammar_corpus(50, 3), c = generate_grammar_corpus(50, 4);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(a.samples[i].text, b.samples[i].text);
    EXPECT_EQ(a.spans[i], b.spans[i]);
  }
  std::size_t same = 0;
  for (std::size_t i = 0; i < 50; ++i) same += a.samples[i].text == c.samples[i].text ? 1 : 0;
  EXPECT_LT(same, 10u);
}

TEST(Grammar, CopyTaskLayoutAndSpans) {
  const auto corpus = generate_grammar_corpus(200, 11);
  const WhitespaceTokenizer tok(grammar_lexicon());
  std::set<std::string> ids;
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    const Sample& s = corpus.samples[i];
    const SpanAnnotation& ann = corpus.spans[i];
    EXPECT_TRUE(ids.insert(s.id).second);
    EXPECT_EQ(ann.sample_id, s.id);
    EXPECT_EQ(ann.text, s.text);
    EXPECT_NO_THROW(ann.validate());
    const auto bar = s.text.find(" | ");
    ASSERT_NE(bar, std::string::npos);
    EXPECT_EQ(s.text.substr(0, bar), s.text.substr(s.response_start));
    EXPECT_EQ(s.response_start, bar + 3);
    const auto words = split_whitespace(s.text);
    EXPECT_EQ(ann.words.size(), words.size());
    for (const auto& w : words) EXPECT_TRUE(contains(tok.lexicon(), w)) << w;
    // NP VP NP [P NP], copied once after the separator.
    ASSERT_TRUE(ann.phrases.size() == 6 || ann.phrases.size() == 8) << s.text;
    const std::size_t half = ann.phrases.size() / 2;
    for (std::size_t k = 0; k < ann.phrases.size(); ++k) {
      EXPECT_EQ(ann.phrases[k].label, k % half == 1 ? PhraseLabel::VP : PhraseLabel::NP);
    }
  }
}

TEST(Grammar, SubjectVerbAgreement) {
  const auto corpus = generate_grammar_corpus(300, 12);
  for (const auto& ann : corpus.spans) {
    const auto& np = ann.phrases[0];
    const auto subject = split_whitespace(ann.text.substr(np.start_char, np.end_char - np.start_char));
    const auto& vp = ann.phrases[1];
    const auto verb = split_whitespace(ann.text.substr(vp.start_char, vp.end_char - vp.start_char));
    if (contains(kAux, verb[0])) {
      ASSERT_EQ(verb.size(), 2u);
      EXPECT_FALSE(contains(kSingularVerbs, verb[1])) << ann.text;
      continue;
    }
    ASSERT_EQ(verb.size(), 1u);
    EXPECT_EQ(contains(kSingularNouns, subject.back()), contains(kSingularVerbs, verb[0])) << ann.text;
  }
}

TEST(Encode, ResponseTokenAndSpans) {
  const auto corpus = generate_grammar_corpus(20, 13);
  const WhitespaceTokenizer tok(grammar_lexicon());
  const auto enc = encode_corpus(corpus.samples, corpus.spans, tok, 48);
  for (const auto& e : enc) {
    const auto& ids = e.encoding.ids;
    EXPECT_EQ(ids[0], tok.bos_id());
    EXPECT_EQ(tok.decode({ids.begin() + static_cast<long>(e.response_token), ids.end()}),
              tok.decode({ids.begin() + 1, ids.begin() + static_cast<long>(e.response_token) - 1}));
    EXPECT_EQ(tok.decode({ids[e.response_token - 1]}), "|");
    EXPECT_FALSE(e.spans.phrases.fell_back_to_words);
    EXPECT_EQ(e.spans.words.size(), ids.size() - 1);
    EXPECT_EQ(e.spans.words.dropped_count, 0u);
  }
}

TEST(Encode, TruncationDropsSpansPastTheEnd) {
  const auto corpus = generate_grammar_corpus(5, 14);
  const WhitespaceTokenizer tok(grammar_lexicon());
  const auto enc = encode_corpus(corpus.samples, corpus.spans, tok, 6);
  for (const auto& e : enc) {
    EXPECT_EQ(e.encoding.ids.size(), 6u);
    EXPECT_EQ(e.spans.words.size(), 5u);
    EXPECT_GT(e.spans.words.dropped_count, 0u);
    for (const auto& s : e.spans.phrases.spans) EXPECT_LT(s.last, 6u);
  }
}

TEST(Encode, MissingAnnotationNamesSample) {
  auto corpus = generate_grammar_corpus(4, 15);
  corpus.spans.erase(corpus.spans.begin() + 2);
  const WhitespaceTokenizer tok(grammar_lexicon());
  try {
    (void)encode_corpus(corpus.samples, corpus.spans, tok, 48);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(std::string(e.what()), "sample g15-2: no span annotation with this sample_id");
  }
}

TEST(Batch, ShiftedTargetsMasksAndPadding) {
  const WhitespaceTokenizer tok(grammar_lexicon());
  const std::vector<Sample> samples{{"a", "the cat sees a dog | the cat sees a dog", 20},
                                    {"b", "two cats | two cats", 11}};
  const auto enc = encode_corpus(samples, {}, tok, 48);
  ASSERT_EQ(enc[0].response_token, 7u);
  ASSERT_EQ(enc[1].response_token, 4u);
  const Batch all = make_batch({&enc[0], &enc[1]}, tok.pad_id(), false);
  const Batch resp = make_batch({&enc[0], &enc[1]}, tok.pad_id(), true);
  const std::size_t T = 12;
  ASSERT_EQ(all.tokens.seq, T);
  for (std::size_t t = 0; t < T; ++t) {
    EXPECT_EQ(all.tokens.padding[T + t], t >= 6);
    if (t + 1 < 12) EXPECT_EQ(all.targets[t], enc[0].encoding.ids[t + 1]);
    EXPECT_EQ(all.loss_mask[t], t + 1 < 12 ? 1.0 : 0.0);
    EXPECT_EQ(resp.loss_mask[t], t + 1 < 12 && t + 1 >= 7 ? 1.0 : 0.0);
    EXPECT_EQ(all.loss_mask[T + t], t + 1 < 6 ? 1.0 : 0.0);
    EXPECT_EQ(resp.loss_mask[T + t], t + 1 < 6 && t + 1 >= 4 ? 1.0 : 0.0);
    if (t >= 6) EXPECT_EQ(all.tokens.ids[T + t], tok.pad_id());
  }
  EXPECT_THROW((void)make_batch({}, 0, false), Error);
}

TEST(CorpusJsonl, RoundTripUsesCharacterOffsets) {
  TempDir dir("corpus");
  const std::vector<Sample> samples{{"u1", "café | café", 8}, {"u2", "plain text", 0}};
  write_corpus_jsonl(dir / "c.jsonl", samples);
  std::ifstream is(dir / "c.jsonl");
  std::string first;
  std::getline(is, first);
  EXPECT_NE(first.find("\"response_start\":7"), std::string::npos) << first;
  const auto back = read_corpus_jsonl(dir / "c.jsonl");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].text, samples[0].text);
  EXPECT_EQ(back[0].response_start, 8u);
  EXPECT_EQ(back[1].response_start, 0u);
}

TEST(CorpusJsonl, ErrorsCarryLineNumbers) {
  TempDir dir("corpus-bad");
  std::ofstream(dir / "c.jsonl") << R"({"id":"a","text":"x"})" << '\n' << R"({"id":"b","text":"xy","response_start":9})" << '\n';
  try {
    (void)read_corpus_jsonl(dir / "c.jsonl");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}
