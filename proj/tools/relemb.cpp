// relemb: screenplay relation-embedding pipeline.
//
//   relemb parse   --corpus DIR [--rules FILE]
//   relemb synth   [--pairs N --reversible F --clusters C --examples-per-pair N]
//   relemb build   [--min-per-pair N --train-fraction F --top-k K --exclude-pair A|B]
//   relemb train   [--mode em|inv|both ...]
//   relemb embed | eval --labels FILE | report
//
// Options may also come from --config FILE (INI/TOML); command-line flags
// override file values, which override defaults.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error.

#include <CLI11.hpp>

#include <iostream>

#include "relemb/pipeline.hpp"

namespace {

void add_options(CLI::App& app, relemb::PipelineConfig& cfg, std::string& mode, bool& quiet) {
  app.set_config("--config", "", "read options from an INI/TOML file");

  auto* paths = "Paths";
  app.add_option("--workdir,-w", cfg.workdir, "directory holding all artifacts")->group(paths)->capture_default_str();
  app.add_option("--corpus", cfg.corpus, "corpus root: <show>/<episode>.txt")->group(paths);
  app.add_option("--rules", cfg.rules, "cleaning rules file (one dropped prefix per line)")->group(paths);
  app.add_option("--labels", cfg.labels, "cluster labels CSV: subject,object,cluster_id")->group(paths);
  app.add_option("--synth-out", cfg.synth_out, "output directory for synth (default <workdir>/synth)")->group(paths);

  auto* data = "Data";
  app.add_option("--seed", cfg.seed, "global seed")->group(data)->capture_default_str();
  app.add_option("--vocab-size", cfg.vocab_size)->group(data)->capture_default_str();
  app.add_option("--min-per-pair", cfg.min_per_pair, "drop ordered pairs with fewer examples")->group(data)->capture_default_str();
  app.add_option("--train-fraction", cfg.train_fraction)->group(data)->capture_default_str();
  app.add_option("--top-k", cfg.top_k, "validation keeps the top-k pairs by count")->group(data)->capture_default_str();
  app.add_option("--exclude-pair", cfg.excluded_pairs, "pair 'SUBJECT|OBJECT' left out of validation")->group(data);

  auto* model = "Model";
  app.add_option("--d-model", cfg.encoder.d_model)->group(model)->capture_default_str();
  app.add_option("--layers", cfg.encoder.n_layers)->group(model)->capture_default_str();
  app.add_option("--heads", cfg.encoder.n_heads)->group(model)->capture_default_str();
  app.add_option("--d-ff", cfg.encoder.d_ff)->group(model)->capture_default_str();
  app.add_option("--max-len", cfg.encoder.max_len)->group(model)->capture_default_str();

  auto* training = "Training";
  app.add_option("--mode", mode, "loss: em, inv or both")
      ->check(CLI::IsMember({"em", "inv", "both"}))->group(training)->capture_default_str();
  app.add_option("--lr", cfg.train.learning_rate)->group(training)->capture_default_str();
  app.add_option("--batch-size", cfg.train.batch_size)->group(training)->capture_default_str();
  app.add_option("--epochs", cfg.train.epochs)->group(training)->capture_default_str();
  app.add_option("--samples-per-anchor", cfg.train.samples_per_anchor)->group(training)->capture_default_str();
  app.add_option("--mask-prob", cfg.train.mask_prob)->group(training)->capture_default_str();
  app.add_option("--weight-decay", cfg.train.weight_decay)->group(training)->capture_default_str();
  app.add_option("--precision", cfg.precision, "training arithmetic: 32 or 64 bit")
      ->check(CLI::IsMember({32, 64}))->group(training)->capture_default_str();

  auto* synth = "Synthetic corpus";
  app.add_option("--pairs", cfg.synth.n_pairs)->group(synth)->capture_default_str();
  app.add_option("--reversible", cfg.synth.reversible, "fraction of examples whose reverse pair exists")->group(synth)->capture_default_str();
  app.add_option("--clusters", cfg.synth.n_clusters)->group(synth)->capture_default_str();
  app.add_option("--examples-per-pair", cfg.synth.examples_per_pair)->group(synth)->capture_default_str();

  auto* eval = "Evaluation";
  app.add_option("--downsample-fraction", cfg.downsample_fraction)->group(eval)->capture_default_str();
  app.add_option("--downsample-trials", cfg.downsample_trials)->group(eval)->capture_default_str();
  app.add_option("--histogram-bins", cfg.histogram_bins)->group(eval)->capture_default_str();

  app.add_flag("--quiet,-q", quiet, "no progress output");
}

}  // namespace

int main(int argc, char** argv) {
  relemb::PipelineConfig cfg;
  std::string mode = "both";
  bool quiet = false;

  CLI::App app{"Relation embeddings for screenplay dialogue"};
  app.require_subcommand(1);
  add_options(app, cfg, mode, quiet);
  auto* parse = app.add_subcommand("parse", "parse a screenplay corpus into relation examples")->fallthrough();
  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus with planted clusters")->fallthrough();
  auto* build = app.add_subcommand("build", "filter pairs, split, build the vocabulary")->fallthrough();
  auto* train = app.add_subcommand("train", "train encoders")->fallthrough();
  auto* embed = app.add_subcommand("embed", "write validation embeddings")->fallthrough();
  auto* eval = app.add_subcommand("eval", "silhouette evaluation")->fallthrough();
  auto* report = app.add_subcommand("report", "comparison tables and histogram")->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    cfg.verbose = !quiet;
    if (mode == "em")
      cfg.modes = {relemb::LossMode::EM};
    else if (mode == "inv")
      cfg.modes = {relemb::LossMode::InvMinus};
    cfg.train.validate();
    cfg.synth.validate();
    if (!(cfg.train_fraction >= 0.0 && cfg.train_fraction <= 1.0))
      throw std::invalid_argument("--train-fraction must lie in [0, 1]");

    if (*parse) {
      if (cfg.corpus.empty()) throw std::invalid_argument("parse needs --corpus");
      relemb::run_parse(cfg);
    } else if (*synth) {
      relemb::run_synth(cfg);
    } else if (*build) {
      relemb::run_build(cfg);
    } else if (*train) {
      relemb::run_train(cfg);
    } else if (*embed) {
      relemb::run_embed(cfg);
    } else if (*eval) {
      relemb::run_eval(cfg);
    } else if (*report) {
      relemb::run_report(cfg);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
