#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mta {

// Half-open byte range [start, end) into the encoded text.
struct ByteRange {
  std::size_t start = 0;
  std::size_t end = 0;
  bool operator==(const ByteRange&) const = default;
};

struct Encoding {
  std::string text;
  std::vector<std::int32_t> ids;
  std::vector<ByteRange> ranges;  // empty range for special tokens
};

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::string name() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::int32_t pad_id() const = 0;
  virtual std::int32_t bos_id() const = 0;
  virtual std::int32_t eos_id() const = 0;
  // Prepends BOS; never appends EOS.
  virtual Encoding encode(std::string_view text) const = 0;
  virtual std::string decode(const std::vector<std::int32_t>& ids) const = 0;
  // Units ROUGE-L is computed over for decoded text.
  std::vector<std::string> words(std::string_view text) const;
};

// One token per UTF-8 byte plus three specials.
class ByteTokenizer final : public Tokenizer {
 public:
  std::string name() const override { return "byte"; }
  std::size_t vocab_size() const override { return 259; }
  std::int32_t pad_id() const override { return 256; }
  std::int32_t bos_id() const override { return 257; }
  std::int32_t eos_id() const override { return 258; }
  Encoding encode(std::string_view text) const override;
  std::string decode(const std::vector<std::int32_t>& ids) const override;
};

// Closed-vocabulary whitespace tokenizer for synthetic grammars.
// Ids: 0 <pad>, 1 <bos>, 2 <eos>, 3 <unk>, then the lexicon in order.
class WhitespaceTokenizer final : public Tokenizer {
 public:
  explicit WhitespaceTokenizer(std::vector<std::string> lexicon);

  std::string name() const override { return "whitespace"; }
  std::size_t vocab_size() const override { return lexicon_.size() + 4; }
  std::int32_t pad_id() const override { return 0; }
  std::int32_t bos_id() const override { return 1; }
  std::int32_t eos_id() const override { return 2; }
  std::int32_t unk_id() const { return 3; }
  Encoding encode(std::string_view text) const override;
  std::string decode(const std::vector<std::int32_t>& ids) const override;
  const std::vector<std::string>& lexicon() const { return lexicon_; }

 private:
  std::vector<std::string> lexicon_;
  std::unordered_map<std::string, std::int32_t> index_;
};

std::vector<std::string> split_whitespace(std::string_view text);

// Builds the tokenizer named in a run config ("byte" or "whitespace", the
// latter over the synthetic grammar lexicon).
std::unique_ptr<Tokenizer> make_tokenizer(const std::string& name);

}  // namespace mta
