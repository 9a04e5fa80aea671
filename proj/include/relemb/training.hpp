#pragma once

// Contrastive objectives over relation embeddings: the matched-pair baseline
// (EM) and the reflection variant (Inv-) in which reversed-pair examples are
// sampled as a dedicated "hard inverse" group and pushed to the negated
// embedding.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "relemb/corpus.hpp"
#include "relemb/encoder.hpp"
#include "relemb/tokenizer.hpp"

namespace relemb {

enum class LossMode { EM, InvMinus };

inline std::string to_string(LossMode m) { return m == LossMode::EM ? "em" : "inv"; }
inline std::string display_name(LossMode m) { return m == LossMode::EM ? "EM" : "Inv-"; }

inline LossMode parse_loss_mode(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (s == "em") return LossMode::EM;
  if (s == "inv" || s == "inv-") return LossMode::InvMinus;
  throw std::invalid_argument("unknown loss mode '" + s + "' (expected em or inv)");
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// log(sigmoid(x)) without overflow for large |x|.
inline double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

template <typename A, typename B>
double dot(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("embedding dimensions differ");
  return static_cast<double>(a.dot(b));
}

// Probability that two relation statements express the same relation.
template <typename A, typename B>
double prob_same(const Eigen::MatrixBase<A>& r1, const Eigen::MatrixBase<B>& r2) {
  return sigmoid(dot(r1, r2));
}

// Probability that r2 is the reflection (subject and object swapped) of r1,
// i.e. sigmoid(-r1.r2). Written as a complement so the two probabilities sum
// to exactly 1; the loss uses the log-sigmoid form instead.
template <typename A, typename B>
double prob_inverse(const Eigen::MatrixBase<A>& r1, const Eigen::MatrixBase<B>& r2) {
  return 1.0 - prob_same(r1, r2);
}

// Examples of one split grouped by ordered pair. Members of each pair are
// stored contiguously in `order`.
class PairIndex {
 public:
  PairIndex() = default;

  explicit PairIndex(const std::vector<RelationExample>& examples) {
    std::map<EntityPair, std::size_t> ids;
    for (const auto& ex : examples) ids.emplace(ex.pair(), 0);
    std::size_t next = 0;
    for (auto& [pair, id] : ids) {
      id = next++;
      pairs_.push_back(pair);
    }
    pair_of_.reserve(examples.size());
    std::vector<std::size_t> sizes(pairs_.size(), 0);
    for (const auto& ex : examples) {
      pair_of_.push_back(ids.at(ex.pair()));
      ++sizes[pair_of_.back()];
    }
    begin_.assign(pairs_.size() + 1, 0);
    for (std::size_t p = 0; p < pairs_.size(); ++p) begin_[p + 1] = begin_[p] + sizes[p];
    order_.resize(examples.size());
    std::vector<std::size_t> fill(begin_.begin(), begin_.end() - 1);
    for (std::size_t i = 0; i < examples.size(); ++i) order_[fill[pair_of_[i]]++] = i;
    reverse_.resize(pairs_.size());
    for (std::size_t p = 0; p < pairs_.size(); ++p) {
      auto it = ids.find(pairs_[p].reversed());
      if (it != ids.end()) reverse_[p] = it->second;
    }
  }

  std::size_t size() const { return pair_of_.size(); }
  std::size_t pair_count() const { return pairs_.size(); }
  std::size_t pair_of(std::size_t example) const { return pair_of_.at(example); }
  const EntityPair& pair(std::size_t id) const { return pairs_.at(id); }
  std::optional<std::size_t> reverse(std::size_t id) const { return reverse_.at(id); }
  std::size_t group_begin(std::size_t id) const { return begin_.at(id); }
  std::size_t group_size(std::size_t id) const { return begin_.at(id + 1) - begin_.at(id); }
  std::span<const std::size_t> members(std::size_t id) const {
    return std::span<const std::size_t>(order_).subspan(begin_.at(id), group_size(id));
  }
  // Example at a position of the pair-grouped ordering.
  std::size_t ordered(std::size_t position) const { return order_.at(position); }

 private:
  std::vector<EntityPair> pairs_;
  std::vector<std::size_t> pair_of_;
  std::vector<std::size_t> begin_;
  std::vector<std::size_t> order_;
  std::vector<std::optional<std::size_t>> reverse_;
};

// Fraction of examples whose reversed ordered pair has at least one example.
inline double inverse_coverage(const PairIndex& index) {
  if (index.size() == 0) return 0.0;
  std::size_t covered = 0;
  for (std::size_t p = 0; p < index.pair_count(); ++p)
    if (index.reverse(p)) covered += index.group_size(p);
  return static_cast<double>(covered) / static_cast<double>(index.size());
}

// Example indices (into the indexed split) drawn for one anchor.
struct PairBatch {
  std::size_t anchor = 0;
  std::vector<std::size_t> positives;
  std::vector<std::size_t> inverses;
  std::vector<std::size_t> negatives;
};

namespace detail {

// `quota` draws from [0, m): distinct (Floyd's algorithm) when m >= quota,
// otherwise uniform with replacement.
template <typename Rng>
std::vector<std::size_t> draw(std::size_t m, std::size_t quota, Rng& rng) {
  std::vector<std::size_t> out;
  out.reserve(quota);
  if (m == 0 || quota == 0) return out;
  if (m < quota) {
    std::uniform_int_distribution<std::size_t> u(0, m - 1);
    for (std::size_t i = 0; i < quota; ++i) out.push_back(u(rng));
    return out;
  }
  for (std::size_t j = m - quota; j < m; ++j) {
    std::uniform_int_distribution<std::size_t> u(0, j);
    const std::size_t t = u(rng);
    out.push_back(std::find(out.begin(), out.end(), t) == out.end() ? t : j);
  }
  return out;
}

}  // namespace detail

// Noise-contrastive sample for `anchor`: k/2 negatives and k/2 matched-side
// examples. In Inv- mode the matched side is split evenly between positives
// and hard inverses when the reversed pair exists, otherwise it is all
// positives; negatives exclude both the anchor's pair and its reverse. The EM
// baseline has no inverse group and draws negatives from every other pair.
template <typename Rng>
PairBatch nce_sample(std::size_t anchor, const PairIndex& index, std::size_t k, Rng& rng,
                     LossMode mode = LossMode::InvMinus) {
  if (k == 0 || k % 2 != 0) throw std::invalid_argument("samples_per_anchor must be even and positive");
  if (anchor >= index.size()) throw std::out_of_range("anchor outside the index");
  PairBatch batch;
  batch.anchor = anchor;
  const std::size_t pair = index.pair_of(anchor);
  const auto same = index.members(pair);
  std::optional<std::size_t> rev;
  if (mode == LossMode::InvMinus) rev = index.reverse(pair);

  std::vector<std::size_t> pos_candidates;
  pos_candidates.reserve(same.size());
  for (std::size_t e : same)
    if (e != anchor) pos_candidates.push_back(e);
  // A pair with a single example can only match itself.
  if (pos_candidates.empty()) pos_candidates.push_back(anchor);

  const std::size_t matched = k / 2;
  const std::size_t n_inv = rev ? matched / 2 : 0;
  const std::size_t n_pos = matched - n_inv;

  // Negative candidates: the grouped ordering with the excluded pairs' blocks
  // skipped.
  std::vector<std::pair<std::size_t, std::size_t>> excluded{
      {index.group_begin(pair), index.group_size(pair)}};
  if (rev && *rev != pair) excluded.emplace_back(index.group_begin(*rev), index.group_size(*rev));
  std::sort(excluded.begin(), excluded.end());
  std::size_t blocked = 0;
  for (const auto& b : excluded) blocked += b.second;
  const std::size_t eligible = index.size() - blocked;
  if (eligible == 0)
    throw DataError("no negative candidates for pair " + index.pair(pair).key());

  for (std::size_t i : detail::draw(pos_candidates.size(), n_pos, rng))
    batch.positives.push_back(pos_candidates[i]);
  if (rev) {
    const auto inv = index.members(*rev);
    for (std::size_t i : detail::draw(inv.size(), n_inv, rng)) batch.inverses.push_back(inv[i]);
  }
  for (std::size_t r : detail::draw(eligible, k - matched, rng)) {
    for (const auto& [start, len] : excluded)
      if (r >= start) r += len;
    batch.negatives.push_back(index.ordered(r));
  }
  return batch;
}

template <typename Real>
struct LossResult {
  using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
  double loss = 0.0;
  Vector d_anchor;
  std::vector<Vector> d_positives, d_inverses, d_negatives;
};

// Mean cross-entropy over the anchor's sampled pairs:
//   positives  -log p_same
//   inverses   -log p_inv          (Inv-)   /  -log(1 - p_same)  (EM)
//   negatives  -log(1 - p_same)
// with exact gradients w.r.t. every embedding.
template <typename Real>
LossResult<Real> contrastive_loss(const Eigen::Matrix<Real, Eigen::Dynamic, 1>& anchor,
                                  std::span<const Eigen::Matrix<Real, Eigen::Dynamic, 1>> positives,
                                  std::span<const Eigen::Matrix<Real, Eigen::Dynamic, 1>> inverses,
                                  std::span<const Eigen::Matrix<Real, Eigen::Dynamic, 1>> negatives,
                                  LossMode mode) {
  using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
  LossResult<Real> r;
  r.d_anchor = Vector::Zero(anchor.size());
  const std::size_t n = positives.size() + inverses.size() + negatives.size();
  if (n == 0) return r;
  const double scale = 1.0 / static_cast<double>(n);

  // d(term)/d(dot) for each of the three term shapes.
  auto matched = [&](double d, double& grad) {
    grad = (sigmoid(d) - 1.0) * scale;
    return -log_sigmoid(d);
  };
  auto reflected = [&](double d, double& grad) {  // -log p_inv
    grad = sigmoid(d) * scale;
    return -log_sigmoid(-d);
  };
  auto unmatched = [&](double d, double& grad) {  // -log(1 - p_same)
    grad = sigmoid(d) * scale;
    return -log_sigmoid(-d);
  };

  auto group = [&](std::span<const Vector> samples, std::vector<Vector>& grads, auto term) {
    grads.clear();
    for (const auto& s : samples) {
      double g = 0.0;
      r.loss += term(dot(anchor, s), g) * scale;
      r.d_anchor += static_cast<Real>(g) * s;
      grads.push_back(static_cast<Real>(g) * anchor);
    }
  };
  group(positives, r.d_positives, matched);
  if (mode == LossMode::InvMinus)
    group(inverses, r.d_inverses, reflected);
  else
    group(inverses, r.d_inverses, unmatched);
  group(negatives, r.d_negatives, unmatched);
  return r;
}

struct TrainConfig {
  double learning_rate = 3e-5;
  std::size_t batch_size = 32;
  std::size_t epochs = 5;
  std::size_t samples_per_anchor = 8;
  double mask_prob = 0.7;
  LossMode mode = LossMode::InvMinus;
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (samples_per_anchor == 0 || samples_per_anchor % 2 != 0)
      throw std::invalid_argument("samples_per_anchor must be even and positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (mask_prob < 0.0 || mask_prob > 1.0) throw std::invalid_argument("mask_prob must lie in [0, 1]");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  }
};

// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::size_t n, const TrainConfig& cfg)
      : lr_(cfg.learning_rate), b1_(cfg.beta1), b2_(cfg.beta2), eps_(cfg.adam_eps),
        wd_(cfg.weight_decay), m_(n, 0.0), v_(n, 0.0) {}

  template <typename Real>
  void step(std::span<Real> params, std::span<const Real> grad) {
    if (params.size() != m_.size() || grad.size() != m_.size())
      throw std::invalid_argument("optimizer state size mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * g;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * g * g;
      const double update = (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
      const double p = static_cast<double>(params[i]);
      params[i] = static_cast<Real>(p - lr_ * (update + wd_ * p));
    }
  }

  std::size_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_, wd_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// Forward, loss and (optionally) backward for one anchor's PairBatch.
// Gradients are scaled by `grad_scale` and accumulated into `grad`.
template <typename Real, typename Rng>
double anchor_step(const Encoder<Real>& model, const std::vector<RelationExample>& split,
                   const PairBatch& batch, const Vocab& vocab, double mask_prob, LossMode mode,
                   Rng& mask_rng, std::span<Real> grad = {}, double grad_scale = 1.0) {
  using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
  using Cache = typename Encoder<Real>::Cache;
  const std::size_t max_len = model.config().max_len;
  const bool need_grad = !grad.empty();

  struct Item {
    TokenizedExample tokens;
    Cache cache;
    Vector embedding;
  };
  auto make = [&](std::size_t idx) {
    Item it;
    it.tokens = encode(split[idx], vocab, mask_prob, max_len, mask_rng);
    it.embedding = model.embed(it.tokens, need_grad ? &it.cache : nullptr);
    return it;
  };
  Item anchor = make(batch.anchor);
  auto group = [&](const std::vector<std::size_t>& ids) {
    std::vector<Item> items;
    items.reserve(ids.size());
    for (std::size_t i : ids) items.push_back(make(i));
    return items;
  };
  auto pos = group(batch.positives), inv = group(batch.inverses), neg = group(batch.negatives);
  auto embeddings = [](const std::vector<Item>& items) {
    std::vector<Vector> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(it.embedding);
    return out;
  };
  const auto ep = embeddings(pos), ei = embeddings(inv), en = embeddings(neg);
  const auto res = contrastive_loss<Real>(anchor.embedding, ep, ei, en, mode);

  if (need_grad) {
    const auto s = static_cast<Real>(grad_scale);
    model.backward_embedding(anchor.cache, anchor.tokens, (res.d_anchor * s).eval(), grad);
    auto back = [&](const std::vector<Item>& items, const std::vector<Vector>& d) {
      for (std::size_t i = 0; i < items.size(); ++i)
        model.backward_embedding(items[i].cache, items[i].tokens, (d[i] * s).eval(), grad);
    };
    back(pos, res.d_positives);
    back(inv, res.d_inverses);
    back(neg, res.d_negatives);
  }
  return res.loss;
}

// Mean anchor loss over a whole split, sampling against that split's own
// index. Uses a fresh RNG from `seed`, so repeated calls are comparable.
template <typename Real>
double evaluate_loss(const Encoder<Real>& model, const std::vector<RelationExample>& split,
                     const Vocab& vocab, const TrainConfig& cfg, std::uint64_t seed) {
  if (split.empty()) return std::numeric_limits<double>::quiet_NaN();
  const PairIndex index(split);
  std::mt19937_64 sample_rng(derive_seed(seed, "eval-sample"));
  std::mt19937_64 mask_rng(derive_seed(seed, "eval-mask"));
  double total = 0.0;
  for (std::size_t a = 0; a < split.size(); ++a) {
    const auto batch = nce_sample(a, index, cfg.samples_per_anchor, sample_rng, cfg.mode);
    total += anchor_step(model, split, batch, vocab, cfg.mask_prob, cfg.mode, mask_rng);
  }
  return total / static_cast<double>(split.size());
}

// 1-based epoch with the lowest loss (first on ties). NaN entries are
// ignored; if every entry is NaN the last epoch is returned.
inline std::size_t select_best_epoch(const std::vector<double>& test_losses) {
  std::size_t best = test_losses.size();
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < test_losses.size(); ++i)
    if (!std::isnan(test_losses[i]) && test_losses[i] < best_loss) {
      best_loss = test_losses[i];
      best = i + 1;
    }
  return best;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 0 = before the first update
  double train_loss = 0.0;
  double test_loss = 0.0;
};

template <typename Real>
struct TrainResult {
  Encoder<Real> best;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> curve;
};

// Runs cfg.epochs passes over shuffled training anchors. Each optimizer step
// averages the losses of batch_size anchors. Epoch 0 records the losses of
// the untrained model; later epochs record the running mean training loss
// and the test-split loss. The parameters from the epoch with the lowest
// test loss are returned.
template <typename Real>
TrainResult<Real> train(Encoder<Real> model, const std::vector<RelationExample>& train_split,
                        const std::vector<RelationExample>& test_split, const Vocab& vocab,
                        const TrainConfig& cfg,
                        const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train_split.empty()) throw DataError("training split is empty");
  const PairIndex index(train_split);
  std::mt19937_64 order_rng(derive_seed(cfg.seed, "train-order"));
  std::mt19937_64 sample_rng(derive_seed(cfg.seed, "train-sample"));
  std::mt19937_64 mask_rng(derive_seed(cfg.seed, "train-mask"));
  const std::uint64_t eval_seed = derive_seed(cfg.seed, "test-loss");
  const std::uint64_t init_seed = derive_seed(cfg.seed, "initial-train-loss");

  AdamW optimizer(model.parameter_count(), cfg);
  std::vector<Real> grad(model.parameter_count());

  TrainResult<Real> result{model, 0, {}};
  EpochRecord initial{0, evaluate_loss(model, train_split, vocab, cfg, init_seed),
                      evaluate_loss(model, test_split, vocab, cfg, eval_seed)};
  result.curve.push_back(initial);
  if (on_epoch) on_epoch(initial);

  std::vector<std::size_t> anchors(train_split.size());
  std::vector<double> test_losses;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(anchors.begin(), anchors.end(), std::size_t{0});
    std::shuffle(anchors.begin(), anchors.end(), order_rng);
    double epoch_total = 0.0;
    for (std::size_t start = 0; start < anchors.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(anchors.size(), start + cfg.batch_size);
      const double scale = 1.0 / static_cast<double>(end - start);
      std::fill(grad.begin(), grad.end(), Real(0));
      for (std::size_t i = start; i < end; ++i) {
        const auto batch = nce_sample(anchors[i], index, cfg.samples_per_anchor, sample_rng, cfg.mode);
        epoch_total += anchor_step(model, train_split, batch, vocab, cfg.mask_prob, cfg.mode,
                                   mask_rng, std::span<Real>(grad), scale);
      }
      optimizer.step(model.parameters(), std::span<const Real>(grad));
    }
    EpochRecord rec{epoch, epoch_total / static_cast<double>(anchors.size()),
                    evaluate_loss(model, test_split, vocab, cfg, eval_seed)};
    result.curve.push_back(rec);
    test_losses.push_back(rec.test_loss);
    if (select_best_epoch(test_losses) == epoch) {
      result.best = model;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace relemb
