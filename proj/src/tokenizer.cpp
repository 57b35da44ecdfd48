#include "flip/tokenizer.hpp"

#include "flip/errors.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <limits>
#include <sstream>

namespace flip {
namespace {

std::string utf8(unsigned cp) {
  std::string s;
  if (cp < 0x80) {
    s.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    s.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    s.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    s.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    s.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
  return s;
}

// Byte -> printable symbol table, in vocabulary order.
std::vector<std::pair<unsigned char, std::string>> byte_symbols() {
  std::vector<int> bs;
  for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
  for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
  for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
  std::vector<unsigned> cs(bs.begin(), bs.end());
  unsigned n = 0;
  for (int b = 0; b < 256; ++b) {
    if (std::find(bs.begin(), bs.end(), b) == bs.end()) {
      bs.push_back(b);
      cs.push_back(256 + n++);
    }
  }
  std::vector<std::pair<unsigned char, std::string>> out;
  for (std::size_t i = 0; i < bs.size(); ++i) out.emplace_back(static_cast<unsigned char>(bs[i]), utf8(cs[i]));
  return out;
}

std::string read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (!f) throw IoError("cannot open merges file " + path.string());
  std::string out;
  char buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
  gzclose(f);
  if (n < 0) throw IoError("failed reading merges file " + path.string());
  return out;
}

std::string clean_text(std::string_view text) {
  std::string out;
  bool space = false;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  return out;
}

bool is_letter(unsigned char c) { return std::isalpha(c) || c >= 0x80; }

// Splits like the reference pattern: contractions, letter runs, single
// digits, runs of other non-space characters. Non-ASCII bytes count as letters.
std::vector<std::string> pre_tokenize(const std::string& s) {
  static const char* kContractions[] = {"'s", "'t", "'re", "'ve", "'m", "'ll", "'d"};
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (std::isspace(c)) {
      ++i;
      continue;
    }
    if (c == '\'') {
      bool matched = false;
      for (const char* k : kContractions) {
        const std::string_view kv(k);
        if (s.compare(i, kv.size(), kv) == 0) {
          words.emplace_back(kv);
          i += kv.size();
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    std::size_t j = i + 1;
    if (is_letter(c)) {
      while (j < s.size() && is_letter(static_cast<unsigned char>(s[j]))) ++j;
    } else if (!std::isdigit(c)) {
      while (j < s.size()) {
        const auto d = static_cast<unsigned char>(s[j]);
        if (std::isspace(d) || is_letter(d) || std::isdigit(d)) break;
        ++j;
      }
    }
    words.push_back(s.substr(i, j - i));
    i = j;
  }
  return words;
}

}  // namespace

BpeTokenizer::BpeTokenizer() : BpeTokenizer(std::vector<std::pair<std::string, std::string>>{}) {}

BpeTokenizer::BpeTokenizer(std::vector<std::pair<std::string, std::string>> merges) {
  byte_to_symbol_.resize(256);
  const auto table = byte_symbols();
  for (const auto& [b, sym] : table) {
    byte_to_symbol_[b] = sym;
    symbol_to_byte_[sym] = b;
  }
  for (const auto& [b, sym] : table) id_to_token_.push_back(sym);
  for (const auto& [b, sym] : table) id_to_token_.push_back(sym + "</w>");
  for (std::size_t r = 0; r < merges.size(); ++r) {
    merge_rank_.emplace(merges[r], static_cast<long>(r));
    id_to_token_.push_back(merges[r].first + merges[r].second);
  }
  id_to_token_.emplace_back("<|startoftext|>");
  id_to_token_.emplace_back("<|endoftext|>");
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    token_to_id_.emplace(id_to_token_[i], static_cast<long>(i));
  }
}

BpeTokenizer BpeTokenizer::from_merges(std::vector<std::pair<std::string, std::string>> merges) {
  return BpeTokenizer(std::move(merges));
}

BpeTokenizer BpeTokenizer::from_merges_file(const std::filesystem::path& path, long max_merges) {
  std::istringstream in(read_maybe_gzip(path));
  std::vector<std::pair<std::string, std::string>> merges;
  std::string line;
  std::getline(in, line);  // version header
  while (std::getline(in, line) && static_cast<long>(merges.size()) < max_merges) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || line.find(' ', sp + 1) != std::string::npos) {
      throw IoError("malformed merge rule in " + path.string() + ": '" + line + "'");
    }
    merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
  }
  return BpeTokenizer(std::move(merges));
}

std::vector<std::string> BpeTokenizer::bpe(const std::string& word) const {
  // Split the byte-symbol string into UTF-8 code points.
  std::vector<std::string> parts;
  for (std::size_t i = 0; i < word.size();) {
    std::size_t len = 1;
    const auto c = static_cast<unsigned char>(word[i]);
    if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    parts.push_back(word.substr(i, len));
    i += len;
  }
  if (parts.empty()) return parts;
  parts.back() += "</w>";
  while (parts.size() > 1) {
    long best = std::numeric_limits<long>::max();
    std::size_t at = 0;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      const auto it = merge_rank_.find({parts[i], parts[i + 1]});
      if (it != merge_rank_.end() && it->second < best) {
        best = it->second;
        at = i;
      }
    }
    if (best == std::numeric_limits<long>::max()) break;
    const std::string a = parts[at];
    const std::string b = parts[at + 1];
    // Merge every occurrence of the best pair, left to right.
    std::vector<std::string> next;
    for (std::size_t i = 0; i < parts.size();) {
      if (i + 1 < parts.size() && parts[i] == a && parts[i + 1] == b) {
        next.push_back(a + b);
        i += 2;
      } else {
        next.push_back(parts[i++]);
      }
    }
    parts = std::move(next);
  }
  return parts;
}

std::vector<long> BpeTokenizer::encode(std::string_view text) const {
  std::vector<long> ids;
  for (const auto& word : pre_tokenize(clean_text(text))) {
    std::string mapped;
    for (unsigned char b : word) mapped += byte_to_symbol_[b];
    for (const auto& piece : bpe(mapped)) ids.push_back(token_to_id_.at(piece));
  }
  return ids;
}

TokenizedText BpeTokenizer::tokenize(std::string_view text, long context) const {
  if (context < 2) throw ConfigError("tokenizer context must hold at least SOT and EOT");
  TokenizedText out;
  out.ids.push_back(sot_id());
  const auto body = encode(text);
  out.ids.insert(out.ids.end(), body.begin(), body.end());
  out.ids.push_back(eot_id());
  if (static_cast<long>(out.ids.size()) > context) {
    out.ids.resize(static_cast<std::size_t>(context));
    out.ids.back() = eot_id();
    out.truncated = true;
  }
  return out;
}

std::string BpeTokenizer::decode(const std::vector<long>& ids) const {
  std::string joined;
  for (long id : ids) {
    if (id == sot_id() || id == eot_id()) continue;
    joined += id_to_token_.at(static_cast<std::size_t>(id));
  }
  std::string out;
  for (std::size_t i = 0; i < joined.size();) {
    if (joined.compare(i, 4, "</w>") == 0) {
      out.push_back(' ');
      i += 4;
      continue;
    }
    std::size_t len = 1;
    const auto c = static_cast<unsigned char>(joined[i]);
    if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    out.push_back(static_cast<char>(symbol_to_byte_.at(joined.substr(i, len))));
    i += len;
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

}  // namespace flip
