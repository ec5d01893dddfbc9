#include "mta/tokenizer.hpp"

#include <cctype>

#include "mta/corpus.hpp"
#include "mta/tensor.hpp"

namespace mta {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

}  // namespace

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

std::vector<std::string> Tokenizer::words(std::string_view text) const { return split_whitespace(text); }

Encoding ByteTokenizer::encode(std::string_view text) const {
  Encoding enc;
  enc.text = std::string(text);
  enc.ids.reserve(text.size() + 1);
  enc.ids.push_back(bos_id());
  enc.ranges.push_back({0, 0});
  for (std::size_t i = 0; i < text.size(); ++i) {
    enc.ids.push_back(static_cast<unsigned char>(text[i]));
    enc.ranges.push_back({i, i + 1});
  }
  return enc;
}

std::string ByteTokenizer::decode(const std::vector<std::int32_t>& ids) const {
  std::string out;
  for (std::int32_t id : ids)
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  return out;
}

WhitespaceTokenizer::WhitespaceTokenizer(std::vector<std::string> lexicon) : lexicon_(std::move(lexicon)) {
  for (std::size_t i = 0; i < lexicon_.size(); ++i) {
    if (!index_.emplace(lexicon_[i], static_cast<std::int32_t>(i + 4)).second) {
      throw Error("whitespace tokenizer: duplicate lexicon entry '" + lexicon_[i] + "'");
    }
  }
}

Encoding WhitespaceTokenizer::encode(std::string_view text) const {
  Encoding enc;
  enc.text = std::string(text);
  enc.ids.push_back(bos_id());
  enc.ranges.push_back({0, 0});
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i == start) break;
    const auto it = index_.find(std::string(text.substr(start, i - start)));
    enc.ids.push_back(it == index_.end() ? unk_id() : it->second);
    enc.ranges.push_back({start, i});
  }
  return enc;
}

std::string WhitespaceTokenizer::decode(const std::vector<std::int32_t>& ids) const {
  std::string out;
  for (std::int32_t id : ids) {
    if (id < 4 || static_cast<std::size_t>(id) >= vocab_size()) continue;
    if (!out.empty()) out.push_back(' ');
    out += lexicon_[static_cast<std::size_t>(id - 4)];
  }
  return out;
}

std::unique_ptr<Tokenizer> make_tokenizer(const std::string& name) {
  if (name == "byte") return std::make_unique<ByteTokenizer>();
  if (name == "whitespace") return std::make_unique<WhitespaceTokenizer>(grammar_lexicon());
  throw Error("unknown tokenizer '" + name + "'");
}

}  // namespace mta
