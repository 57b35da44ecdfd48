#pragma once

// Byte-pair-encoding tokenizer compatible with the CLIP text encoder.
//
// Vocabulary layout: 256 byte symbols, the same 256 symbols with an
// end-of-word marker, one entry per merge rule, then <|startoftext|> and
// <|endoftext|>. With the published merge list (48894 rules) this yields the
// 49408-entry vocabulary; with no merges it degenerates to a byte-level
// tokenizer of 514 entries, which the toy-scale encoders use.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace flip {

struct TokenizedText {
  std::vector<long> ids;  // starts with SOT, ends with EOT
  bool truncated = false;
};

class BpeTokenizer {
 public:
  static constexpr long kContextLength = 77;
  static constexpr long kPublishedMergeCount = 48894;

  /// Tokenizer without merge rules (byte-level).
  BpeTokenizer();
  /// Loads merge rules from a plain-text or gzip file, one "a b" pair per
  /// line. The first line is a version header and is always skipped.
  static BpeTokenizer from_merges_file(const std::filesystem::path& path,
                                       long max_merges = kPublishedMergeCount);
  static BpeTokenizer from_merges(std::vector<std::pair<std::string, std::string>> merges);

  std::vector<long> encode(std::string_view text) const;
  /// SOT + tokens + EOT; over-long input is cut to `context` ids with EOT kept last.
  TokenizedText tokenize(std::string_view text, long context = kContextLength) const;
  std::string decode(const std::vector<long>& ids) const;

  long vocab_size() const { return static_cast<long>(id_to_token_.size()); }
  long sot_id() const { return vocab_size() - 2; }
  long eot_id() const { return vocab_size() - 1; }
  long merge_count() const { return static_cast<long>(merge_rank_.size()); }

 private:
  explicit BpeTokenizer(std::vector<std::pair<std::string, std::string>> merges);
  std::vector<std::string> bpe(const std::string& word) const;

  std::vector<std::string> byte_to_symbol_;
  std::unordered_map<std::string, unsigned char> symbol_to_byte_;
  std::map<std::pair<std::string, std::string>, long> merge_rank_;
  std::unordered_map<std::string, long> token_to_id_;
  std::vector<std::string> id_to_token_;
};

}  // namespace flip
