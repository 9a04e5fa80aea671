#pragma once

// Screenplay corpus handling: dialogue parsing, consecutive-speaker merging,
// relation-statement construction and dataset splitting.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "relemb/common.hpp"

namespace relemb {

struct DialogueEntry {
  std::string speaker;
  std::string text;

  friend bool operator==(const DialogueEntry&, const DialogueEntry&) = default;
};

struct Episode {
  std::string show_id;
  std::string episode_id;
  std::vector<DialogueEntry> entries;
};

struct ParseResult {
  Episode episode;
  std::size_t skipped_lines = 0;
};

// Line-prefix patterns whose lines are discarded before speaker recognition
// (scene transitions, title and afterword blocks).
struct CleaningRules {
  std::vector<std::string> drop_prefixes;

  bool drops(std::string_view line) const {
    for (const auto& p : drop_prefixes)
      if (line.starts_with(p)) return true;
    return false;
  }

  // One pattern per line; blank lines and lines starting with '#' ignored.
  static CleaningRules parse(std::string_view text) {
    CleaningRules rules;
    for (const auto& raw : split(text, '\n')) {
      std::string_view line = raw;
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      if (trim(line).empty() || line.front() == '#') continue;
      rules.drop_prefixes.emplace_back(line);
    }
    return rules;
  }

  static CleaningRules load(const std::string& path) {
    return parse(read_file(path));
  }
};

namespace detail {

inline bool is_speaker_char(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == ' ' ||
         c == '\'';
}

// Returns the canonical speaker name if `line` opens a dialogue entry, and
// stores the offset just past the ':' in `text_start`.
inline std::string match_speaker(std::string_view line,
                                 std::size_t& text_start) {
  const auto colon = line.find(':');
  if (colon == std::string_view::npos) return {};
  const std::string_view name = line.substr(0, colon);
  bool has_letter = false;
  for (char c : name) {
    if (!is_speaker_char(c)) return {};
    has_letter |= (c >= 'A' && c <= 'Z');
  }
  if (!has_letter) return {};
  std::string canonical;
  for (char c : trim(name)) {
    if (c == ' ' && !canonical.empty() && canonical.back() == ' ') continue;
    canonical.push_back(c);
  }
  text_start = colon + 1;
  return canonical;
}

inline void append_text(std::string& dst, std::string_view more) {
  if (more.empty()) return;
  if (!dst.empty()) dst.push_back(' ');
  dst.append(more);
}

}  // namespace detail

// A line is a dialogue entry iff (after leading whitespace) it starts with an
// all-caps name followed by ':'. Non-blank lines directly following an entry
// are continuations. A blank line or a dropped line closes the open entry;
// other content outside an entry is skipped and counted.
inline ParseResult parse_episode(std::string_view raw,
                                 const CleaningRules& rules,
                                 std::string show_id = {},
                                 std::string episode_id = {}) {
  ParseResult result;
  result.episode.show_id = std::move(show_id);
  result.episode.episode_id = std::move(episode_id);
  auto& entries = result.episode.entries;

  bool open = false;
  auto close = [&] {
    if (open && entries.back().text.empty()) {
      entries.pop_back();
      ++result.skipped_lines;
    }
    open = false;
  };

  for (const auto& raw_line : split(raw, '\n')) {
    std::string_view line = raw_line;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const std::string_view body = trim(line);
    if (body.empty()) {
      close();
      continue;
    }
    if (rules.drops(body)) {
      close();
      ++result.skipped_lines;
      continue;
    }
    std::size_t text_start = 0;
    std::string speaker = detail::match_speaker(body, text_start);
    if (!speaker.empty()) {
      close();
      entries.push_back({std::move(speaker),
                         std::string(trim(body.substr(text_start)))});
      open = true;
    } else if (open) {
      detail::append_text(entries.back().text, body);
    } else {
      ++result.skipped_lines;
    }
  }
  close();
  return result;
}

// Inverse of parse_episode for already-parsed entries: one "SPEAKER: text"
// line per entry.
inline std::string serialize_episode(const Episode& episode) {
  std::string out;
  for (const auto& e : episode.entries) {
    out += e.speaker;
    out += ": ";
    out += e.text;
    out += '\n';
  }
  return out;
}

// Consecutive entries by the same speaker are merged, texts joined by a
// single space.
inline std::vector<DialogueEntry> deduplicate(
    const std::vector<DialogueEntry>& entries) {
  std::vector<DialogueEntry> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    if (!out.empty() && out.back().speaker == e.speaker)
      detail::append_text(out.back().text, e.text);
    else
      out.push_back(e);
  }
  return out;
}

inline Episode deduplicate(Episode episode) {
  episode.entries = deduplicate(episode.entries);
  return episode;
}

// Half-open byte range into RelationExample::context.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  friend bool operator==(const Span&, const Span&) = default;
};

struct RelationExample {
  std::string context;
  std::string subject;
  std::string object;
  Span subject_span;
  Span object_span;
  std::string show_id;
  std::string episode_id;
  std::size_t index = 0;  // position of the bigram within its episode

  EntityPair pair() const { return {subject, object}; }
  std::string id() const {
    return show_id + "/" + episode_id + "#" + std::to_string(index);
  }
  // Word tokens plus the four entity markers.
  std::size_t token_length() const { return split_words(context).size() + 4; }

  friend bool operator==(const RelationExample&,
                         const RelationExample&) = default;
};

// One example per consecutive pair of entries: subject speaks first, object
// replies; context is "S: text_s O: text_o".
inline std::vector<RelationExample> build_examples(const Episode& episode) {
  std::vector<RelationExample> out;
  const auto& es = episode.entries;
  for (std::size_t i = 0; i + 1 < es.size(); ++i) {
    const auto& a = es[i];
    const auto& b = es[i + 1];
    RelationExample ex;
    ex.subject = a.speaker;
    ex.object = b.speaker;
    ex.context = a.speaker + ": " + a.text + " ";
    ex.subject_span = {0, a.speaker.size()};
    ex.object_span = {ex.context.size(), ex.context.size() + b.speaker.size()};
    ex.context += b.speaker + ": " + b.text;
    ex.show_id = episode.show_id;
    ex.episode_id = episode.episode_id;
    ex.index = i;
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::map<EntityPair, std::size_t> pair_counts(
    const std::vector<RelationExample>& examples) {
  std::map<EntityPair, std::size_t> counts;
  for (const auto& ex : examples) ++counts[ex.pair()];
  return counts;
}

struct SplitStats {
  std::string name;
  std::size_t count = 0;
  double mean_length = 0.0;  // tokens, including entity markers
};

inline SplitStats split_stats(std::string name,
                              const std::vector<RelationExample>& examples) {
  SplitStats s{std::move(name), examples.size(), 0.0};
  if (examples.empty()) return s;
  double total = 0;
  for (const auto& ex : examples) total += static_cast<double>(ex.token_length());
  s.mean_length = total / static_cast<double>(examples.size());
  return s;
}

struct DatasetSplits {
  std::vector<RelationExample> train;
  std::vector<RelationExample> test;
  std::vector<RelationExample> validation;
  std::vector<SplitStats> stats;
  // Set when every pair fell below the minimum count.
  bool empty = false;

  void refresh_stats() {
    stats = {split_stats("train", train), split_stats("test", test),
             split_stats("validation", validation)};
  }
};

inline DatasetSplits filter_and_split(
    const std::vector<RelationExample>& examples,
    std::size_t min_per_pair = 5, double train_fraction = 0.8,
    std::uint64_t seed = 0) {
  if (train_fraction < 0.0 || train_fraction > 1.0)
    throw std::invalid_argument("train_fraction must lie in [0, 1]");
  const auto counts = pair_counts(examples);
  std::vector<RelationExample> kept;
  for (const auto& ex : examples)
    if (counts.at(ex.pair()) >= min_per_pair) kept.push_back(ex);

  std::mt19937_64 rng(seed);
  std::shuffle(kept.begin(), kept.end(), rng);
  const auto n_train = static_cast<std::size_t>(
      std::llround(train_fraction * static_cast<double>(kept.size())));

  DatasetSplits splits;
  splits.empty = kept.empty();
  splits.train.assign(kept.begin(), kept.begin() + static_cast<std::ptrdiff_t>(n_train));
  splits.test.assign(kept.begin() + static_cast<std::ptrdiff_t>(n_train), kept.end());
  splits.refresh_stats();
  return splits;
}

// Ordered pairs ranked by example count (descending), ties by pair name.
inline std::vector<std::pair<EntityPair, std::size_t>> ranked_pairs(
    const std::vector<RelationExample>& examples) {
  const auto counts = pair_counts(examples);
  std::vector<std::pair<EntityPair, std::size_t>> ranked(counts.begin(),
                                                         counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) {
                     if (a.second != b.second) return a.second > b.second;
                     return a.first < b.first;
                   });
  return ranked;
}

// Examples of the top_k most prolific ordered pairs, minus excluded pairs.
inline std::vector<RelationExample> build_validation(
    const std::vector<RelationExample>& examples, std::size_t top_k = 36,
    const std::vector<EntityPair>& excluded_pairs = {}) {
  const auto ranked = ranked_pairs(examples);
  if (top_k > ranked.size())
    throw DataError("validation top_k " + std::to_string(top_k) +
                    " exceeds the " + std::to_string(ranked.size()) +
                    " distinct pairs");
  std::set<EntityPair> selected;
  for (std::size_t i = 0; i < top_k; ++i) selected.insert(ranked[i].first);
  for (const auto& p : excluded_pairs) selected.erase(p);

  std::vector<RelationExample> out;
  for (const auto& ex : examples)
    if (selected.contains(ex.pair())) out.push_back(ex);
  return out;
}

// Parses "A|B" or "A,B".
inline EntityPair parse_pair(std::string_view text) {
  const auto sep = text.find_first_of("|,");
  if (sep == std::string_view::npos)
    throw DataError("malformed pair '" + std::string(text) + "'");
  return {std::string(trim(text.substr(0, sep))),
          std::string(trim(text.substr(sep + 1)))};
}

// --- JSON Lines ------------------------------------------------------------

inline nlohmann::ordered_json to_json(const RelationExample& ex) {
  return {{"id", ex.id()},
          {"context", ex.context},
          {"subject", ex.subject},
          {"object", ex.object},
          {"subject_span", {ex.subject_span.begin, ex.subject_span.end}},
          {"object_span", {ex.object_span.begin, ex.object_span.end}},
          {"show_id", ex.show_id},
          {"episode_id", ex.episode_id},
          {"index", ex.index}};
}

inline RelationExample example_from_json(const nlohmann::json& j) {
  RelationExample ex;
  ex.context = j.at("context").get<std::string>();
  ex.subject = j.at("subject").get<std::string>();
  ex.object = j.at("object").get<std::string>();
  ex.subject_span = {j.at("subject_span").at(0).get<std::size_t>(),
                     j.at("subject_span").at(1).get<std::size_t>()};
  ex.object_span = {j.at("object_span").at(0).get<std::size_t>(),
                    j.at("object_span").at(1).get<std::size_t>()};
  ex.show_id = j.at("show_id").get<std::string>();
  ex.episode_id = j.at("episode_id").get<std::string>();
  ex.index = j.value("index", std::size_t{0});
  const auto bad = [&](const Span& s) {
    return s.begin > s.end || s.end > ex.context.size();
  };
  if (bad(ex.subject_span) || bad(ex.object_span) ||
      ex.context.substr(ex.subject_span.begin, ex.subject_span.size()) !=
          ex.subject ||
      ex.context.substr(ex.object_span.begin, ex.object_span.size()) !=
          ex.object)
    throw DataError("example " + ex.id() + " has inconsistent spans");
  return ex;
}

inline std::vector<RelationExample> read_examples_jsonl(
    const std::string& path) {
  std::vector<RelationExample> out;
  for (const auto& line : read_data_lines(path)) {
    try {
      out.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ": " + e.what());
    }
  }
  return out;
}

// --- corpus directories ----------------------------------------------------

struct CorpusFile {
  std::string path;
  ParseResult parsed;
  std::size_t raw_entries = 0;  // before deduplication
};

// Reads `<root>/<show>/<episode>.txt`, sorted by show then episode. Parsed
// episodes are deduplicated.
inline std::vector<CorpusFile> load_corpus(const std::filesystem::path& root,
                                           const CleaningRules& rules) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root))
    throw DataError("corpus directory " + root.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& show : fs::directory_iterator(root)) {
    if (!show.is_directory()) continue;
    for (const auto& f : fs::directory_iterator(show.path()))
      if (f.is_regular_file() && f.path().extension() == ".txt")
        files.push_back(f.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<CorpusFile> out;
  for (const auto& f : files) {
    CorpusFile cf;
    cf.path = f.string();
    cf.parsed = parse_episode(read_file(cf.path), rules,
                              f.parent_path().filename().string(),
                              f.stem().string());
    cf.raw_entries = cf.parsed.episode.entries.size();
    cf.parsed.episode = deduplicate(std::move(cf.parsed.episode));
    out.push_back(std::move(cf));
  }
  return out;
}

}  // namespace relemb
