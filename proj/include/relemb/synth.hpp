#pragma once

// Planted-structure screenplay corpora. Every ordered pair belongs to one
// relation cluster; clusters come in mirrored couples (lead -> reply and
// reply -> lead) built from the same dialogue templates, so a reversible
// pair (A, B) and its reverse (B, A) land in mirrored clusters.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "relemb/common.hpp"
#include "relemb/evaluation.hpp"

namespace relemb {

struct SynthProfile {
  std::size_t n_pairs = 12;
  double reversible = 1.0;  // target fraction of examples whose reverse pair exists
  std::size_t n_clusters = 6;
  std::size_t examples_per_pair = 200;
  std::size_t exchanges_per_episode = 20;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_pairs == 0) throw std::invalid_argument("profile needs at least one pair");
    if (n_clusters < 2 || n_clusters % 2 != 0)
      throw std::invalid_argument("n_clusters must be even and >= 2");
    if (!(reversible >= 0.0 && reversible <= 1.0))
      throw std::invalid_argument("reversible fraction must lie in [0, 1]");
    if (examples_per_pair == 0 || exchanges_per_episode == 0)
      throw std::invalid_argument("example counts must be positive");
  }
};

struct SynthPair {
  EntityPair pair;
  int cluster = 0;
  bool reversible = false;
  std::size_t examples = 0;
};

struct SynthEpisode {
  std::string show_id;
  std::string episode_id;
  std::string text;
};

struct SynthCorpus {
  SynthProfile profile;
  std::vector<SynthPair> pairs;
  std::vector<SynthEpisode> episodes;
  ClusterLabeling labeling;

  nlohmann::ordered_json metadata() const {
    nlohmann::ordered_json j;
    j["generator"] = "relemb-synth";
    j["seed"] = profile.seed;
    j["n_pairs"] = profile.n_pairs;
    j["reversible"] = profile.reversible;
    j["n_clusters"] = profile.n_clusters;
    j["examples_per_pair"] = profile.examples_per_pair;
    j["episodes"] = episodes.size();
    for (const auto& p : pairs)
      j["pairs"].push_back({{"subject", p.pair.subject},
                            {"object", p.pair.object},
                            {"cluster", p.cluster},
                            {"reversible", p.reversible},
                            {"examples", p.examples}});
    return j;
  }

  // Writes <dir>/corpus/<show>/<episode>.txt, <dir>/labels.csv and
  // <dir>/synth_meta.json.
  void write(const std::filesystem::path& dir, const std::string& header = {}) const {
    namespace fs = std::filesystem;
    for (const auto& e : episodes) {
      const fs::path show = dir / "corpus" / e.show_id;
      fs::create_directories(show);
      std::ofstream out(show / (e.episode_id + ".txt"), std::ios::binary);
      out << e.text;
      if (!out) throw DataError("cannot write synthetic episode " + e.episode_id);
    }
    std::ofstream labels(dir / "labels.csv", std::ios::binary);
    if (!header.empty()) labels << "# " << header << '\n';
    labels << labeling.to_csv();
    std::ofstream meta(dir / "synth_meta.json", std::ios::binary);
    meta << metadata().dump(2) << '\n';
  }
};

namespace detail {

struct RelationTemplates {
  std::vector<std::string> lead;   // words spoken by the subject of the lead cluster
  std::vector<std::string> reply;  // words spoken in answer
};

inline RelationTemplates relation_templates(std::size_t type) {
  static const std::vector<RelationTemplates> builtin = {
      {{"report", "orders", "immediately", "bridge", "status", "command"},
       {"sir", "aye", "acknowledged", "understood", "captain", "complying"}},
      {{"darling", "heart", "miss", "dinner", "beautiful", "together"},
       {"blush", "sweet", "flattered", "perhaps", "tonight", "smile"}},
      {{"fool", "challenge", "never", "defeat", "coward", "duel"},
       {"arrogant", "regret", "prove", "wrong", "bluster", "insolent"}},
  };
  if (type < builtin.size()) return builtin[type];
  RelationTemplates t;
  for (int i = 0; i < 6; ++i) {
    t.lead.push_back("lead" + std::to_string(type) + "w" + std::to_string(i));
    t.reply.push_back("reply" + std::to_string(type) + "w" + std::to_string(i));
  }
  return t;
}

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> words = {
      "the",  "we",    "ship",  "now",    "time",   "know",  "think", "here",
      "about", "that", "you",   "planet", "station", "must",  "will",  "again",
      "there", "what", "sensors", "crew", "really", "just",  "all",   "course"};
  return words;
}

inline std::string character_name(std::size_t i) {
  static const std::vector<std::string> names = {
      "ARVEN", "BOLDT",  "CASSIA", "DORRAN", "ELOWEN", "FARREK", "GAVRA",  "HOLLIS",
      "ISOLDE", "JORIK", "KESTRA", "LUMEN",  "MARROK", "NESSA",  "ORLAN",  "PELLA",
      "QUARIN", "RHESA", "SOVAK",  "TAMSIN", "ULRIC",  "VESNA",  "WYNTER", "XANDER",
      "YSOLDE", "ZORAN", "ABELOV", "BRENNA", "CORVIS", "DALIRA", "EMBER",  "FENRIK"};
  if (i < names.size()) return names[i];
  return names[i % names.size()] + " " + std::to_string(i / names.size());
}

template <typename Rng>
std::string synth_line(const std::vector<std::string>& signature, Rng& rng) {
  std::uniform_int_distribution<std::size_t> sig(0, signature.size() - 1);
  std::uniform_int_distribution<std::size_t> fill(0, filler_words().size() - 1);
  std::uniform_int_distribution<int> extra(2, 4);
  std::vector<std::string> words = {signature[sig(rng)], signature[sig(rng)]};
  for (int i = extra(rng); i > 0; --i) words.push_back(filler_words()[fill(rng)]);
  std::shuffle(words.begin(), words.end(), rng);
  std::string line;
  for (const auto& w : words) line += (line.empty() ? "" : " ") + w;
  line[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(line[0])));
  return line + ".";
}

}  // namespace detail

// Ordered pairs are either members of a reversible couple (A, B) + (B, A) or
// stand-alone pairs whose reverse never occurs. The number of reversible
// pairs is the even count closest to reversible * n_pairs; stand-alone pairs
// get as many examples as needed for the example-level reversible fraction
// to match the profile.
inline SynthCorpus generate_synthetic(const SynthProfile& profile) {
  profile.validate();
  SynthCorpus corpus;
  corpus.profile = profile;
  std::mt19937_64 rng(profile.seed);

  const double target = profile.reversible * static_cast<double>(profile.n_pairs);
  std::size_t n_rev = 2 * static_cast<std::size_t>(std::llround(target / 2.0));
  n_rev = std::min(n_rev, profile.n_pairs - profile.n_pairs % 2);
  const std::size_t n_single = profile.n_pairs - n_rev;
  const std::size_t n_couples = n_rev / 2;
  const std::size_t types = profile.n_clusters / 2;
  const std::size_t per_pair = profile.examples_per_pair;

  std::size_t single_count = per_pair;
  if (n_single > 0 && n_rev > 0 && profile.reversible > 0.0) {
    const double want = static_cast<double>(n_rev * per_pair) * (1.0 - profile.reversible) /
                        (profile.reversible * static_cast<double>(n_single));
    single_count = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(want)));
  }

  std::size_t next_name = 0;
  const std::string show = "synth";
  const std::size_t chunk = profile.exchanges_per_episode;

  for (std::size_t c = 0; c < n_couples; ++c) {
    const std::string a = detail::character_name(next_name++);
    const std::string b = detail::character_name(next_name++);
    const std::size_t type = c % types;
    const auto tpl = detail::relation_templates(type);
    const int lead_cluster = static_cast<int>(2 * type + 1);
    corpus.pairs.push_back({{a, b}, lead_cluster, true, per_pair});
    corpus.pairs.push_back({{b, a}, lead_cluster + 1, true, per_pair});
    corpus.labeling.set({a, b}, lead_cluster);
    corpus.labeling.set({b, a}, lead_cluster + 1);

    // An episode of 2m+1 alternating lines yields m (a, b) and m (b, a)
    // examples.
    std::size_t remaining = per_pair, ep = 0;
    while (remaining > 0) {
      const std::size_t m = std::min(chunk, remaining);
      std::string text;
      for (std::size_t i = 0; i < 2 * m + 1; ++i) {
        const bool lead = i % 2 == 0;
        text += (lead ? a : b) + ": " + detail::synth_line(lead ? tpl.lead : tpl.reply, rng) + "\n";
      }
      char id[64];
      std::snprintf(id, sizeof id, "couple%02zu_ep%03zu", c, ep++);
      corpus.episodes.push_back({show, id, std::move(text)});
      remaining -= m;
    }
  }

  for (std::size_t s = 0; s < n_single; ++s) {
    const std::string a = detail::character_name(next_name++);
    const std::string b = detail::character_name(next_name++);
    const std::size_t type = (n_couples + s) % types;
    const auto tpl = detail::relation_templates(type);
    const int cluster = static_cast<int>(2 * type + 1);
    corpus.pairs.push_back({{a, b}, cluster, false, single_count});
    corpus.labeling.set({a, b}, cluster);
    // Two-line episodes: one (a, b) example each, never the reverse.
    for (std::size_t e = 0; e < single_count; ++e) {
      std::string text = a + ": " + detail::synth_line(tpl.lead, rng) + "\n" + b + ": " +
                         detail::synth_line(tpl.reply, rng) + "\n";
      char id[64];
      std::snprintf(id, sizeof id, "single%02zu_ep%04zu", s, e);
      corpus.episodes.push_back({show, id, std::move(text)});
    }
  }
  return corpus;
}

// Parsed and deduplicated episodes of a generated corpus, without touching
// the filesystem.
inline std::vector<RelationExample> synthetic_examples(const SynthCorpus& corpus) {
  std::vector<RelationExample> out;
  const CleaningRules none;
  for (const auto& e : corpus.episodes) {
    auto parsed = parse_episode(e.text, none, e.show_id, e.episode_id);
    auto examples = build_examples(deduplicate(std::move(parsed.episode)));
    out.insert(out.end(), examples.begin(), examples.end());
  }
  return out;
}

}  // namespace relemb
