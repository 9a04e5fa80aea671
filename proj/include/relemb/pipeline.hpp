#pragma once

// End-to-end stages behind the command-line tool. Every stage reads its
// inputs from the work directory, writes its artifacts there, and is a pure
// function of (inputs, config, seed).

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "relemb/corpus.hpp"
#include "relemb/encoder.hpp"
#include "relemb/evaluation.hpp"
#include "relemb/synth.hpp"
#include "relemb/tokenizer.hpp"
#include "relemb/training.hpp"

namespace relemb {

struct PipelineConfig {
  // paths (not part of the config hash)
  std::string corpus;
  std::string rules;
  std::string labels;
  std::string workdir = "run";
  std::string synth_out;

  std::uint64_t seed = 0;
  std::size_t vocab_size = 5000;
  std::size_t min_per_pair = 5;
  double train_fraction = 0.8;
  std::size_t top_k = 36;
  std::vector<std::string> excluded_pairs;
  TrainConfig train;
  EncoderConfig encoder;
  int precision = 32;  // training arithmetic; checkpoints are always 64-bit
  std::vector<LossMode> modes = {LossMode::EM, LossMode::InvMinus};
  SynthProfile synth;
  double downsample_fraction = 0.5;
  std::size_t downsample_trials = 20;
  std::size_t histogram_bins = 20;
  bool verbose = true;

  std::string canonical() const {
    std::ostringstream s;
    s << "seed=" << seed << ";vocab_size=" << vocab_size << ";min_per_pair=" << min_per_pair
      << ";train_fraction=" << format_real(train_fraction) << ";top_k=" << top_k
      << ";exclude=";
    for (const auto& p : excluded_pairs) s << p << ',';
    s << ";lr=" << format_real(train.learning_rate) << ";batch=" << train.batch_size
      << ";epochs=" << train.epochs << ";k=" << train.samples_per_anchor
      << ";mask=" << format_real(train.mask_prob) << ";wd=" << format_real(train.weight_decay)
      << ";d_model=" << encoder.d_model << ";layers=" << encoder.n_layers
      << ";heads=" << encoder.n_heads << ";d_ff=" << encoder.d_ff << ";max_len=" << encoder.max_len
      << ";precision=" << precision << ";synth=" << synth.n_pairs << ','
      << format_real(synth.reversible) << ',' << synth.n_clusters << ','
      << synth.examples_per_pair << ";downsample=" << format_real(downsample_fraction) << ','
      << downsample_trials << ";bins=" << histogram_bins;
    return s.str();
  }
  std::string config_hash() const { return hex64(fnv1a(canonical())); }

  std::string header(const std::string& stage) const {
    return "relemb stage=" + stage + " config=" + config_hash() + " seed=" + std::to_string(seed);
  }

  std::uint64_t stage_seed(std::string_view stage) const { return derive_seed(seed, stage); }

  std::filesystem::path path(const std::string& name) const {
    return std::filesystem::path(workdir) / name;
  }

  std::vector<EntityPair> excluded() const {
    std::vector<EntityPair> out;
    for (const auto& p : excluded_pairs) out.push_back(parse_pair(p));
    return out;
  }
};

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& p, const std::string& header) {
  std::filesystem::create_directories(p.parent_path().empty() ? "." : p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  if (!header.empty()) out << "# " << header << '\n';
  return out;
}

inline void require(const std::filesystem::path& p, const std::string& what,
                    const std::string& stage) {
  if (!std::filesystem::exists(p))
    throw DataError("missing " + what + " " + p.string() + " (run '" + stage + "' first)");
}

inline void log(const PipelineConfig& cfg, const std::string& msg) {
  if (cfg.verbose) std::cerr << msg << '\n';
}

inline std::vector<RelationExample> select_by_ids(const std::vector<RelationExample>& all,
                                                  const std::filesystem::path& manifest) {
  std::map<std::string, const RelationExample*> by_id;
  for (const auto& ex : all) by_id.emplace(ex.id(), &ex);
  std::vector<RelationExample> out;
  for (const auto& line : read_data_lines(manifest.string())) {
    const auto id = nlohmann::json::parse(line).at("id").get<std::string>();
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("manifest " + manifest.string() + " names unknown example " + id);
    out.push_back(*it->second);
  }
  return out;
}

}  // namespace detail

struct ParseSummary {
  std::size_t episodes = 0;
  std::size_t entries = 0;
  std::size_t examples = 0;
  std::size_t skipped_lines = 0;
};

// corpus dir -> examples.jsonl, parse_episodes.csv, parse_lengths.csv
inline ParseSummary run_parse(const PipelineConfig& cfg) {
  const CleaningRules rules = cfg.rules.empty() ? CleaningRules{} : CleaningRules::load(cfg.rules);
  const auto files = load_corpus(cfg.corpus, rules);
  const std::string header = cfg.header("parse");

  auto examples_out = detail::open_output(cfg.path("examples.jsonl"), header);
  auto episodes_out = detail::open_output(cfg.path("parse_episodes.csv"), header);
  episodes_out << "show,episode,raw_entries,entries,examples,skipped_lines\n";
  std::map<std::size_t, std::size_t> lengths;
  ParseSummary summary;
  for (const auto& f : files) {
    const auto& ep = f.parsed.episode;
    const auto examples = build_examples(ep);
    for (const auto& ex : examples) {
      examples_out << to_json(ex).dump() << '\n';
      ++lengths[ex.token_length()];
    }
    episodes_out << ep.show_id << ',' << ep.episode_id << ',' << f.raw_entries << ','
                 << ep.entries.size() << ',' << examples.size() << ',' << f.parsed.skipped_lines
                 << '\n';
    ++summary.episodes;
    summary.entries += ep.entries.size();
    summary.examples += examples.size();
    summary.skipped_lines += f.parsed.skipped_lines;
  }
  auto lengths_out = detail::open_output(cfg.path("parse_lengths.csv"), header);
  lengths_out << "token_length,count\n";
  for (const auto& [len, count] : lengths) lengths_out << len << ',' << count << '\n';

  if (files.empty()) detail::log(cfg, "warning: corpus " + cfg.corpus + " contains no episodes");
  detail::log(cfg, "parsed " + std::to_string(summary.episodes) + " episodes, " +
                       std::to_string(summary.examples) + " examples, " +
                       std::to_string(summary.skipped_lines) + " skipped lines");
  return summary;
}

// synthetic corpus + labels.csv + synth_meta.json under synth_out
inline SynthCorpus run_synth(const PipelineConfig& cfg) {
  SynthProfile profile = cfg.synth;
  profile.seed = cfg.stage_seed("synth");
  auto corpus = generate_synthetic(profile);
  const std::string out = cfg.synth_out.empty() ? cfg.path("synth").string() : cfg.synth_out;
  corpus.write(out, cfg.header("synth"));
  detail::log(cfg, "wrote " + std::to_string(corpus.episodes.size()) + " synthetic episodes to " + out);
  return corpus;
}

// examples.jsonl -> split manifests, vocab.txt, split_stats.csv
inline DatasetSplits run_build(const PipelineConfig& cfg) {
  const auto examples_path = cfg.path("examples.jsonl");
  detail::require(examples_path, "examples", "parse");
  const auto examples = read_examples_jsonl(examples_path.string());
  auto splits = filter_and_split(examples, cfg.min_per_pair, cfg.train_fraction,
                                 cfg.stage_seed("split"));
  if (splits.empty) throw DataError("every pair has fewer than " + std::to_string(cfg.min_per_pair) + " examples");
  std::vector<RelationExample> kept = splits.train;
  kept.insert(kept.end(), splits.test.begin(), splits.test.end());
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return std::tie(a.show_id, a.episode_id, a.index) < std::tie(b.show_id, b.episode_id, b.index);
  });
  splits.validation = build_validation(kept, cfg.top_k, cfg.excluded());
  splits.refresh_stats();

  const std::string header = cfg.header("build");
  auto manifest = [&](const std::string& name, const std::vector<RelationExample>& split) {
    auto out = detail::open_output(cfg.path("split_" + name + ".jsonl"), header);
    for (const auto& ex : split) out << nlohmann::ordered_json{{"id", ex.id()}}.dump() << '\n';
  };
  manifest("train", splits.train);
  manifest("test", splits.test);
  manifest("validation", splits.validation);

  build_vocab(splits.train, cfg.vocab_size).save(cfg.path("vocab.txt").string());

  auto stats = detail::open_output(cfg.path("split_stats.csv"), header);
  stats << "split,count,mean_length\n";
  for (const auto& s : splits.stats)
    stats << s.name << ',' << s.count << ',' << format_fixed(s.mean_length, 3) << '\n';
  detail::log(cfg, "train " + std::to_string(splits.train.size()) + ", test " +
                       std::to_string(splits.test.size()) + ", validation " +
                       std::to_string(splits.validation.size()));
  return splits;
}

struct BuiltData {
  Vocab vocab;
  std::vector<RelationExample> train, test, validation;
};

inline BuiltData load_built(const PipelineConfig& cfg) {
  for (const char* f : {"examples.jsonl", "vocab.txt", "split_train.jsonl", "split_test.jsonl",
                        "split_validation.jsonl"})
    detail::require(cfg.path(f), "artifact", std::string(f) == "examples.jsonl" ? "parse" : "build");
  BuiltData d;
  d.vocab = Vocab::load(cfg.path("vocab.txt").string());
  const auto all = read_examples_jsonl(cfg.path("examples.jsonl").string());
  d.train = detail::select_by_ids(all, cfg.path("split_train.jsonl"));
  d.test = detail::select_by_ids(all, cfg.path("split_test.jsonl"));
  d.validation = detail::select_by_ids(all, cfg.path("split_validation.jsonl"));
  return d;
}

inline std::string checkpoint_name(LossMode m) { return "model_" + to_string(m) + ".ckpt"; }

template <typename Real>
TrainResult<Real> train_mode(const PipelineConfig& cfg, const BuiltData& data, LossMode mode) {
  EncoderConfig ec = cfg.encoder;
  ec.vocab_size = data.vocab.size();
  ec.seed = cfg.stage_seed("init");
  TrainConfig tc = cfg.train;
  tc.mode = mode;
  tc.seed = cfg.stage_seed("train-" + to_string(mode));
  auto progress = [&](const EpochRecord& r) {
    detail::log(cfg, display_name(mode) + " epoch " + std::to_string(r.epoch) + " train " +
                         format_fixed(r.train_loss, 4) + " test " + format_fixed(r.test_loss, 4));
  };
  return train(Encoder<Real>(ec), data.train, data.test, data.vocab, tc, progress);
}

// splits + vocab -> model_<mode>.ckpt and loss_<mode>.csv per mode
inline void run_train(const PipelineConfig& cfg) {
  const auto data = load_built(cfg);
  for (LossMode mode : cfg.modes) {
    std::vector<EpochRecord> curve;
    std::size_t best_epoch = 0;
    const std::string header = cfg.header("train") + " mode=" + to_string(mode);
    if (cfg.precision == 64) {
      auto r = train_mode<double>(cfg, data, mode);
      r.best.save(cfg.path(checkpoint_name(mode)).string(), header + " best_epoch=" + std::to_string(r.best_epoch));
      curve = r.curve;
      best_epoch = r.best_epoch;
    } else {
      auto r = train_mode<float>(cfg, data, mode);
      r.best.save(cfg.path(checkpoint_name(mode)).string(), header + " best_epoch=" + std::to_string(r.best_epoch));
      curve = r.curve;
      best_epoch = r.best_epoch;
    }
    auto out = detail::open_output(cfg.path("loss_" + to_string(mode) + ".csv"),
                                   header + " best_epoch=" + std::to_string(best_epoch));
    out << "epoch,split,mean_loss\n";
    for (const auto& r : curve) {
      out << r.epoch << ",train," << format_real(r.train_loss) << '\n';
      out << r.epoch << ",test," << format_real(r.test_loss) << '\n';
    }
  }
}

inline Encoder<double> load_model(const PipelineConfig& cfg, LossMode mode) {
  const auto p = cfg.path(checkpoint_name(mode));
  if (!std::filesystem::exists(p))
    throw DataError("missing checkpoint " + p.string() + " (run 'train' first)");
  return Encoder<double>::load(p.string());
}

// validation embeddings per mode -> embeddings_<mode>.csv
inline void run_embed(const PipelineConfig& cfg) {
  const auto data = load_built(cfg);
  for (LossMode mode : cfg.modes) {
    const auto model = load_model(cfg, mode);
    const auto emb = embed_examples(model, data.validation, data.vocab);
    auto out = detail::open_output(cfg.path("embeddings_" + to_string(mode) + ".csv"),
                                   cfg.header("embed") + " mode=" + to_string(mode));
    out << "id,subject,object";
    for (std::size_t j = 0; j < model.config().d_model; ++j) out << ",e" << j;
    out << '\n';
    for (std::size_t i = 0; i < emb.size(); ++i) {
      const auto& ex = data.validation[i];
      out << ex.id() << ',' << ex.subject << ',' << ex.object;
      for (Eigen::Index j = 0; j < emb[i].size(); ++j) out << ',' << format_real(emb[i](j));
      out << '\n';
    }
  }
}

inline ClusterLabeling load_labels(const PipelineConfig& cfg) {
  if (cfg.labels.empty()) throw DataError("no labeling file given (--labels)");
  auto labeling = ClusterLabeling::load(cfg.labels);
  if (labeling.cluster_ids().size() < 2) throw DataError("labeling needs at least two clusters");
  return labeling;
}

// silhouettes per mode -> eval_<mode>_{summary,clusters,samples,stability}.csv
inline std::map<LossMode, EvaluationResult> run_eval(const PipelineConfig& cfg) {
  const auto data = load_built(cfg);
  const auto labeling = load_labels(cfg);
  std::map<LossMode, EvaluationResult> results;
  for (LossMode mode : cfg.modes) {
    const auto model = load_model(cfg, mode);
    std::vector<EntityPair> pairs;
    for (const auto& ex : data.validation) pairs.push_back(ex.pair());
    const auto emb = embed_examples(model, data.validation, data.vocab);
    auto res = evaluate_embeddings(emb, pairs, labeling);
    const std::string tag = to_string(mode);
    const std::string header = cfg.header("eval") + " mode=" + tag;

    auto summary = detail::open_output(cfg.path("eval_" + tag + "_summary.csv"), header);
    summary << "mode,mean,std,n,clusters,zero_norm_vectors\n";
    for (const auto* rep : {&res.character, &res.cluster, &res.composite}) {
      summary << rep->mode << ',' << format_real(rep->mean) << ','
              << format_real(std::sqrt(sample_variance(rep->scores))) << ',' << rep->scores.size()
              << ',' << rep->clusters.size() << ',' << rep->zero_norm_vectors << '\n';
    }

    auto clusters = detail::open_output(cfg.path("eval_" + tag + "_clusters.csv"), header);
    clusters << "cluster,proportional_size,cluster_mean,cluster_variance,composite_mean,"
                "composite_variance,improved_by_composition\n";
    for (const auto& row : res.rows)
      clusters << row.cluster << ',' << format_real(row.proportional_size) << ','
               << format_real(row.examples.mean) << ',' << format_real(row.examples.variance) << ','
               << format_real(row.composite.mean) << ',' << format_real(row.composite.variance) << ','
               << (row.improved_by_composition() ? 1 : 0) << '\n';

    auto samples = detail::open_output(cfg.path("eval_" + tag + "_samples.csv"), header);
    samples << "mode,item,subject,object,cluster,score\n";
    for (std::size_t i = 0; i < data.validation.size(); ++i) {
      const auto& ex = data.validation[i];
      const int c = labeling.at(ex.pair());
      samples << "character," << ex.id() << ',' << ex.subject << ',' << ex.object << ',' << c
              << ',' << format_real(res.character.scores[i]) << '\n';
      samples << "cluster," << ex.id() << ',' << ex.subject << ',' << ex.object << ',' << c << ','
              << format_real(res.cluster.scores[i]) << '\n';
    }
    for (std::size_t i = 0; i < res.composite_pairs.size(); ++i) {
      const auto& p = res.composite_pairs[i];
      samples << "composite," << p.key() << ',' << p.subject << ',' << p.object << ','
              << res.composite.labels[i] << ',' << format_real(res.composite.scores[i]) << '\n';
    }

    auto stability = detail::open_output(cfg.path("eval_" + tag + "_stability.csv"), header);
    stability << "cluster,min,median,max\n";
    std::mt19937_64 rng(cfg.stage_seed("downsample-" + tag));
    try {
      for (const auto& row : downsample_stability(emb, res.cluster.labels, cfg.downsample_fraction,
                                                  cfg.downsample_trials, rng))
        stability << row.cluster << ',' << format_real(row.min) << ',' << format_real(row.median)
                  << ',' << format_real(row.max) << '\n';
    } catch (const DataError& e) {
      stability << "# skipped: " << e.what() << '\n';
      detail::log(cfg, std::string("warning: ") + e.what());
    }
    detail::log(cfg, display_name(mode) + " silhouette character " + format_fixed(res.character.mean, 4) +
                         " cluster " + format_fixed(res.cluster.mean, 4) + " composite " +
                         format_fixed(res.composite.mean, 4));
    results.emplace(mode, std::move(res));
  }
  return results;
}

namespace detail {

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw DataError("missing column " + name);
  }
};

inline CsvTable read_csv(const std::filesystem::path& p) {
  CsvTable t;
  for (const auto& line : read_data_lines(p.string())) {
    if (t.columns.empty())
      t.columns = split(line, ',');
    else
      t.rows.push_back(split(line, ','));
  }
  return t;
}

}  // namespace detail

// eval outputs of every mode -> table3.csv, table4.csv, histogram.csv
inline void run_report(const PipelineConfig& cfg) {
  std::map<LossMode, detail::CsvTable> summaries, clusters, samples;
  for (LossMode mode : cfg.modes) {
    const std::string tag = to_string(mode);
    for (const char* kind : {"summary", "clusters", "samples"})
      detail::require(cfg.path("eval_" + tag + "_" + kind + ".csv"), "evaluation output", "eval");
    summaries[mode] = detail::read_csv(cfg.path("eval_" + tag + "_summary.csv"));
    clusters[mode] = detail::read_csv(cfg.path("eval_" + tag + "_clusters.csv"));
    samples[mode] = detail::read_csv(cfg.path("eval_" + tag + "_samples.csv"));
  }
  const std::string header = cfg.header("report");

  auto t3 = detail::open_output(cfg.path("table3.csv"), header);
  t3 << "mode";
  for (LossMode m : cfg.modes) t3 << ',' << display_name(m) << "_mean," << display_name(m) << "_std";
  t3 << '\n';
  for (const char* mode : {"character", "cluster", "composite"}) {
    t3 << mode;
    for (LossMode m : cfg.modes) {
      const auto& t = summaries[m];
      bool found = false;
      for (const auto& row : t.rows)
        if (row.at(t.col("mode")) == mode) {
          t3 << ',' << row.at(t.col("mean")) << ',' << row.at(t.col("std"));
          found = true;
        }
      if (!found) throw DataError("evaluation summary lacks mode " + std::string(mode));
    }
    t3 << '\n';
  }

  // Per-cluster rows, one column group per model, plus which models
  // improved under composition.
  std::map<int, std::map<LossMode, std::vector<std::string>>> per_cluster;
  std::map<int, std::string> sizes;
  for (LossMode m : cfg.modes) {
    const auto& t = clusters[m];
    for (const auto& row : t.rows) {
      const int c = std::stoi(row.at(t.col("cluster")));
      sizes[c] = row.at(t.col("proportional_size"));
      per_cluster[c][m] = row;
    }
  }
  auto t4 = detail::open_output(cfg.path("table4.csv"), header);
  t4 << "cluster,proportional_size";
  for (LossMode m : cfg.modes) {
    const auto n = display_name(m);
    t4 << ',' << n << "_cluster_mean," << n << "_cluster_variance," << n << "_composite_mean," << n
       << "_composite_variance";
  }
  t4 << ",improved_by_composition\n";
  for (const auto& [c, by_mode] : per_cluster) {
    t4 << c << ',' << sizes[c];
    std::vector<std::string> improved;
    for (LossMode m : cfg.modes) {
      const auto& t = clusters[m];
      auto it = by_mode.find(m);
      if (it == by_mode.end()) {
        t4 << ",,,,";
        continue;
      }
      const auto& row = it->second;
      t4 << ',' << row.at(t.col("cluster_mean")) << ',' << row.at(t.col("cluster_variance")) << ','
         << row.at(t.col("composite_mean")) << ',' << row.at(t.col("composite_variance"));
      if (row.at(t.col("improved_by_composition")) == "1") improved.push_back(display_name(m));
    }
    std::string verdict = improved.empty() ? "None"
                          : improved.size() == cfg.modes.size() && cfg.modes.size() > 1
                              ? "Both"
                              : improved.front();
    for (std::size_t i = 1; i < improved.size() && verdict != "Both"; ++i) verdict += "+" + improved[i];
    t4 << ',' << verdict << '\n';
  }

  // Histogram of per-sample scores over [-1, 1].
  auto hist = detail::open_output(cfg.path("histogram.csv"), header);
  hist << "model,mode,cluster,bin_low,bin_high,count\n";
  const std::size_t bins = std::max<std::size_t>(1, cfg.histogram_bins);
  for (LossMode m : cfg.modes) {
    const auto& t = samples[m];
    std::map<std::pair<std::string, int>, std::vector<std::size_t>> counts;
    for (const auto& row : t.rows) {
      const double s = std::stod(row.at(t.col("score")));
      auto b = static_cast<std::size_t>(std::floor((s + 1.0) / 2.0 * static_cast<double>(bins)));
      b = std::min(b, bins - 1);
      auto& v = counts[{row.at(t.col("mode")), std::stoi(row.at(t.col("cluster")))}];
      v.resize(bins, 0);
      ++v[b];
    }
    for (const auto& [key, v] : counts)
      for (std::size_t b = 0; b < bins; ++b)
        hist << display_name(m) << ',' << key.first << ',' << key.second << ','
             << format_fixed(-1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(bins), 4) << ','
             << format_fixed(-1.0 + 2.0 * static_cast<double>(b + 1) / static_cast<double>(bins), 4)
             << ',' << v[b] << '\n';
  }
  detail::log(cfg, "wrote table3.csv, table4.csv and histogram.csv");
}

}  // namespace relemb
