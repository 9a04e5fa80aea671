#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "relemb/common.hpp"
#include "relemb/corpus.hpp"

namespace relemb {

using TokenId = std::int32_t;

// Reserved tokens occupy the first ids, in this order.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBlank = 2;
inline constexpr TokenId kSubjectOpen = 3;
inline constexpr TokenId kSubjectClose = 4;
inline constexpr TokenId kObjectOpen = 5;
inline constexpr TokenId kObjectClose = 6;
inline constexpr std::array<const char*, 7> kNames = {
    "[PAD]", "[UNK]", "[BLANK]", "[SU]", "[/SU]", "[OB]", "[/OB]"};
inline constexpr std::size_t kCount = kNames.size();
}  // namespace special

class Vocab {
 public:
  Vocab() {
    for (const char* name : special::kNames) add(name);
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenId id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? special::kUnk : it->second;
  }
  bool contains(const std::string& token) const { return ids_.contains(token); }

  // Plain text, one token per line, line number (from 0) = id.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    for (const auto& t : tokens_) out << t << '\n';
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read vocabulary " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    if (lines.size() < special::kCount)
      throw DataError("vocabulary " + path + " is truncated");
    for (std::size_t i = 0; i < special::kCount; ++i)
      if (lines[i] != special::kNames[i])
        throw DataError("vocabulary " + path + " has wrong reserved tokens");
    Vocab v;
    for (std::size_t i = special::kCount; i < lines.size(); ++i) v.add(lines[i]);
    if (v.size() != lines.size())
      throw DataError("vocabulary " + path + " has duplicate tokens");
    return v;
  }

  void add(const std::string& token) {
    if (ids_.contains(token)) return;
    ids_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(token);
  }

  friend bool operator==(const Vocab& a, const Vocab& b) {
    return a.tokens_ == b.tokens_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

// Keeps the max_size most frequent context tokens (ties broken by token
// text) after the reserved ones.
inline Vocab build_vocab(const std::vector<RelationExample>& corpus,
                         std::size_t max_size) {
  if (corpus.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& ex : corpus)
    for (auto& w : split_words(ex.context)) ++counts[std::move(w)];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(),
                                                          counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocab v;
  for (std::size_t i = 0; i < ranked.size() && i < max_size; ++i)
    v.add(ranked[i].first);
  return v;
}

struct TokenizedExample {
  std::vector<TokenId> ids;  // padded to max_len
  std::size_t su_pos = 0;
  std::size_t ob_pos = 0;
  std::size_t length = 0;           // before padding
  std::size_t original_length = 0;  // before truncation
  bool subject_masked = false;
  bool object_masked = false;

  bool truncated() const { return original_length > length; }
};

inline constexpr std::size_t kMinEncodeLength = 6;  // 4 markers + 2 mentions

// Wraps the subject mention in [SU] .. [/SU] and the object in [OB] .. [/OB].
// Each mention is independently replaced by one [BLANK] with probability
// mask_prob. Over-long sequences lose context tail first, then the context
// before the first marker, then the context between the mentions, and finally
// mention tokens; markers always survive.
template <typename Rng>
TokenizedExample encode(const RelationExample& ex, const Vocab& vocab,
                        double mask_prob, std::size_t max_len, Rng& rng) {
  if (max_len < kMinEncodeLength)
    throw std::invalid_argument("max_len " + std::to_string(max_len) +
                                " cannot hold the entity markers");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool mask_subject = unit(rng) < mask_prob;
  const bool mask_object = unit(rng) < mask_prob;

  const bool subject_first = ex.subject_span.begin <= ex.object_span.begin;
  const Span first = subject_first ? ex.subject_span : ex.object_span;
  const Span second = subject_first ? ex.object_span : ex.subject_span;
  if (first.end > second.begin || second.end > ex.context.size())
    throw DataError("example " + ex.id() + " has overlapping or invalid spans");

  const std::string_view ctx = ex.context;
  auto ids_of = [&](std::string_view text) {
    std::vector<TokenId> out;
    for (const auto& w : split_words(text)) out.push_back(vocab.id(w));
    return out;
  };
  auto mention = [&](Span s, bool masked) {
    if (masked) return std::vector<TokenId>{special::kBlank};
    auto ids = ids_of(ctx.substr(s.begin, s.size()));
    if (ids.empty()) throw DataError("example " + ex.id() + " has an empty mention");
    return ids;
  };

  auto head = ids_of(ctx.substr(0, first.begin));
  auto m1 = mention(first, subject_first ? mask_subject : mask_object);
  auto mid = ids_of(ctx.substr(first.end, second.begin - first.end));
  auto m2 = mention(second, subject_first ? mask_object : mask_subject);
  auto tail = ids_of(ctx.substr(second.end));

  TokenizedExample out;
  out.subject_masked = mask_subject;
  out.object_masked = mask_object;
  out.original_length =
      head.size() + m1.size() + mid.size() + m2.size() + tail.size() + 4;

  std::size_t over = out.original_length > max_len ? out.original_length - max_len : 0;
  auto shrink_back = [&](std::vector<TokenId>& v, std::size_t keep_min) {
    const std::size_t n = std::min(over, v.size() - std::min(v.size(), keep_min));
    v.resize(v.size() - n);
    over -= n;
  };
  shrink_back(tail, 0);
  if (over > 0) {
    const std::size_t n = std::min(over, head.size());
    head.erase(head.begin(), head.begin() + static_cast<std::ptrdiff_t>(n));
    over -= n;
  }
  shrink_back(mid, 0);
  shrink_back(m2, 1);
  shrink_back(m1, 1);

  const TokenId open1 = subject_first ? special::kSubjectOpen : special::kObjectOpen;
  const TokenId close1 = subject_first ? special::kSubjectClose : special::kObjectClose;
  const TokenId open2 = subject_first ? special::kObjectOpen : special::kSubjectOpen;
  const TokenId close2 = subject_first ? special::kObjectClose : special::kSubjectClose;

  auto& ids = out.ids;
  ids.reserve(max_len);
  ids.insert(ids.end(), head.begin(), head.end());
  const std::size_t pos1 = ids.size();
  ids.push_back(open1);
  ids.insert(ids.end(), m1.begin(), m1.end());
  ids.push_back(close1);
  ids.insert(ids.end(), mid.begin(), mid.end());
  const std::size_t pos2 = ids.size();
  ids.push_back(open2);
  ids.insert(ids.end(), m2.begin(), m2.end());
  ids.push_back(close2);
  ids.insert(ids.end(), tail.begin(), tail.end());

  out.length = ids.size();
  out.su_pos = subject_first ? pos1 : pos2;
  out.ob_pos = subject_first ? pos2 : pos1;
  ids.resize(max_len, special::kPad);
  return out;
}

}  // namespace relemb
