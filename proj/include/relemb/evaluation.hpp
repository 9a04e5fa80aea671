#pragma once

// Cosine-distance silhouette scoring of relation embeddings against
// ground-truth clusters of ordered character pairs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "relemb/common.hpp"
#include "relemb/corpus.hpp"
#include "relemb/encoder.hpp"
#include "relemb/tokenizer.hpp"

namespace relemb {

using Embedding = Eigen::VectorXd;

// 1 - cos(a, b). A zero vector has no direction; its distance to anything is
// 1 and `zero_norm` (when given) is incremented.
template <typename A, typename B>
double cosine_distance(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b,
                       std::size_t* zero_norm = nullptr) {
  if (a.size() != b.size()) throw std::invalid_argument("embedding dimensions differ");
  const double na = static_cast<double>(a.norm());
  const double nb = static_cast<double>(b.norm());
  if (na == 0.0 || nb == 0.0) {
    if (zero_norm) ++*zero_norm;
    return 1.0;
  }
  const double cos = static_cast<double>(a.dot(b)) / (na * nb);
  return 1.0 - std::clamp(cos, -1.0, 1.0);
}

struct ClusterScore {
  int cluster = 0;
  std::size_t size = 0;
  double mean = 0.0;
  double variance = 0.0;  // sample variance (n - 1); 0 for singletons
};

struct SilhouetteReport {
  std::string mode;
  double mean = 0.0;
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<ClusterScore> clusters;  // ascending cluster id
  std::size_t zero_norm_vectors = 0;

  const ClusterScore* cluster(int id) const {
    for (const auto& c : clusters)
      if (c.cluster == id) return &c;
    return nullptr;
  }
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_variance(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Per sample: a = mean distance to the other members of its cluster, b = the
// smallest mean distance to another cluster, s = (b - a) / max(a, b).
// Members of singleton clusters score 0, as does a = b = 0.
inline SilhouetteReport silhouette(const std::vector<Embedding>& embeddings,
                                   const std::vector<int>& labels, std::string mode = {}) {
  if (embeddings.size() != labels.size())
    throw std::invalid_argument("embeddings and labels differ in length");
  std::map<int, std::size_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw std::invalid_argument("silhouette needs at least two clusters");

  const auto n = static_cast<Eigen::Index>(embeddings.size());
  const auto dim = embeddings.front().size();
  SilhouetteReport report;
  report.mode = std::move(mode);
  report.labels = labels;

  // Unit rows; zero vectors stay zero so their cosine distance is 1.
  Eigen::MatrixXd unit(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = embeddings[static_cast<std::size_t>(i)];
    if (e.size() != dim) throw std::invalid_argument("embedding dimensions differ");
    const double norm = e.norm();
    if (norm == 0.0) {
      unit.row(i).setZero();
      ++report.zero_norm_vectors;
    } else {
      unit.row(i) = e.transpose() / norm;
    }
  }
  Eigen::MatrixXd dist = (1.0 - (unit * unit.transpose()).array().min(1.0).max(-1.0)).matrix();

  std::vector<int> ids;
  std::map<int, std::size_t> slot;
  for (const auto& [id, _] : sizes) {
    slot[id] = ids.size();
    ids.push_back(id);
  }
  std::vector<std::size_t> label_slot(labels.size());
  std::vector<double> slot_size(ids.size());
  for (std::size_t i = 0; i < labels.size(); ++i) label_slot[i] = slot[labels[i]];
  for (std::size_t c = 0; c < ids.size(); ++c) slot_size[c] = static_cast<double>(sizes[ids[c]]);

  report.scores.resize(embeddings.size());
  std::vector<double> sums(ids.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) sums[label_slot[static_cast<std::size_t>(j)]] += dist(i, j);
    const std::size_t own = label_slot[static_cast<std::size_t>(i)];
    double s = 0.0;
    if (slot_size[own] > 1) {
      const double a = sums[own] / (slot_size[own] - 1);
      double b = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < ids.size(); ++c)
        if (c != own) b = std::min(b, sums[c] / slot_size[c]);
      const double m = std::max(a, b);
      s = m > 0.0 ? (b - a) / m : 0.0;
    }
    report.scores[static_cast<std::size_t>(i)] = s;
  }
  report.mean = mean_of(report.scores);
  for (int id : ids) {
    std::vector<double> member;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == id) member.push_back(report.scores[i]);
    report.clusters.push_back({id, member.size(), mean_of(member), sample_variance(member)});
  }
  return report;
}

// Mean of the raw embeddings of each ordered pair, in pair order.
inline std::vector<std::pair<EntityPair, Embedding>> composite_embeddings(
    const std::vector<Embedding>& embeddings, const std::vector<EntityPair>& pairs) {
  if (embeddings.size() != pairs.size())
    throw std::invalid_argument("embeddings and pairs differ in length");
  std::map<EntityPair, std::pair<Embedding, std::size_t>> acc;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    auto [it, inserted] = acc.try_emplace(pairs[i], Embedding::Zero(embeddings[i].size()), 0);
    it->second.first += embeddings[i];
    ++it->second.second;
  }
  std::vector<std::pair<EntityPair, Embedding>> out;
  for (auto& [pair, sum] : acc)
    out.emplace_back(pair, sum.first / static_cast<double>(sum.second));
  return out;
}

// Ground-truth cluster of each ordered pair.
class ClusterLabeling {
 public:
  ClusterLabeling() = default;
  explicit ClusterLabeling(std::map<EntityPair, int> clusters) : clusters_(std::move(clusters)) {}

  void set(const EntityPair& pair, int cluster) { clusters_[pair] = cluster; }
  bool contains(const EntityPair& pair) const { return clusters_.contains(pair); }
  int at(const EntityPair& pair) const {
    auto it = clusters_.find(pair);
    if (it == clusters_.end()) throw DataError("pair " + pair.key() + " has no cluster label");
    return it->second;
  }
  const std::map<EntityPair, int>& clusters() const { return clusters_; }
  std::set<int> cluster_ids() const {
    std::set<int> ids;
    for (const auto& [_, c] : clusters_) ids.insert(c);
    return ids;
  }

  // CSV with header subject,object,cluster_id.
  static ClusterLabeling parse_csv(std::string_view text) {
    ClusterLabeling out;
    bool header = true;
    for (const auto& raw : split(text, '\n')) {
      const std::string line(trim(raw));
      if (line.empty() || line.front() == '#') continue;
      const auto cols = split(line, ',');
      if (header) {
        header = false;
        if (cols.size() == 3 && trim(cols[0]) == "subject") continue;
      }
      if (cols.size() != 3) throw DataError("labeling row '" + line + "' needs 3 columns");
      EntityPair p{std::string(trim(cols[0])), std::string(trim(cols[1]))};
      int cluster = 0;
      try {
        cluster = std::stoi(std::string(trim(cols[2])));
      } catch (const std::exception&) {
        throw DataError("labeling row '" + line + "' has a non-integer cluster id");
      }
      if (out.contains(p)) throw DataError("pair " + p.key() + " labeled twice");
      out.set(p, cluster);
    }
    return out;
  }
  static ClusterLabeling load(const std::string& path) { return parse_csv(read_file(path)); }

  std::string to_csv() const {
    std::string out = "subject,object,cluster_id\n";
    for (const auto& [p, c] : clusters_)
      out += p.subject + "," + p.object + "," + std::to_string(c) + "\n";
    return out;
  }

 private:
  std::map<EntityPair, int> clusters_;
};

// One Table-4-style row: cluster-mode versus composite-mode scores.
struct ClusterComparison {
  int cluster = 0;
  double proportional_size = 0.0;  // share of labeled validation pairs
  ClusterScore examples;
  ClusterScore composite;
  bool improved_by_composition() const { return composite.mean > examples.mean; }
};

struct EvaluationResult {
  SilhouetteReport character;  // labels: ordered pair identity
  SilhouetteReport cluster;    // labels: ground-truth cluster per example
  SilhouetteReport composite;  // one averaged embedding per pair, cluster labels
  std::vector<EntityPair> composite_pairs;
  std::vector<ClusterComparison> rows;
};

inline EvaluationResult evaluate_embeddings(const std::vector<Embedding>& embeddings,
                                            const std::vector<EntityPair>& pairs,
                                            const ClusterLabeling& labeling) {
  if (embeddings.empty()) throw DataError("validation set is empty");
  std::map<EntityPair, int> pair_ids;
  for (const auto& p : pairs) pair_ids.emplace(p, 0);
  int next = 0;
  for (auto& [_, id] : pair_ids) id = next++;

  std::vector<int> by_pair, by_cluster;
  for (const auto& p : pairs) {
    by_pair.push_back(pair_ids.at(p));
    by_cluster.push_back(labeling.at(p));
  }
  EvaluationResult r;
  r.character = silhouette(embeddings, by_pair, "character");
  r.cluster = silhouette(embeddings, by_cluster, "cluster");

  const auto comps = composite_embeddings(embeddings, pairs);
  std::vector<Embedding> comp_vecs;
  std::vector<int> comp_labels;
  for (const auto& [p, v] : comps) {
    r.composite_pairs.push_back(p);
    comp_vecs.push_back(v);
    comp_labels.push_back(labeling.at(p));
  }
  r.composite = silhouette(comp_vecs, comp_labels, "composite");

  for (const auto& c : r.cluster.clusters) {
    ClusterComparison row;
    row.cluster = c.cluster;
    row.examples = c;
    if (const auto* cc = r.composite.cluster(c.cluster)) row.composite = *cc;
    row.proportional_size = static_cast<double>(row.composite.size) /
                            static_cast<double>(comps.size());
    r.rows.push_back(row);
  }
  return r;
}

// Relation embeddings with entity masking disabled, so evaluation is
// deterministic.
template <typename Real>
std::vector<Embedding> embed_examples(const Encoder<Real>& model,
                                      const std::vector<RelationExample>& examples,
                                      const Vocab& vocab) {
  std::mt19937_64 unused(0);
  std::vector<Embedding> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto tokens = encode(ex, vocab, 0.0, model.config().max_len, unused);
    out.push_back(model.embed(tokens).template cast<double>());
  }
  return out;
}

template <typename Real>
EvaluationResult evaluate(const Encoder<Real>& model, const std::vector<RelationExample>& validation,
                          const Vocab& vocab, const ClusterLabeling& labeling) {
  std::vector<EntityPair> pairs;
  pairs.reserve(validation.size());
  for (const auto& ex : validation) pairs.push_back(ex.pair());
  return evaluate_embeddings(embed_examples(model, validation, vocab), pairs, labeling);
}

// Mean silhouettes after randomly permuting the labels `shuffles` times.
template <typename Rng>
std::vector<double> shuffled_baseline(const std::vector<Embedding>& embeddings,
                                      std::vector<int> labels, std::size_t shuffles, Rng& rng) {
  std::vector<double> out;
  out.reserve(shuffles);
  for (std::size_t i = 0; i < shuffles; ++i) {
    std::shuffle(labels.begin(), labels.end(), rng);
    out.push_back(silhouette(embeddings, labels).mean);
  }
  return out;
}

struct StabilityRow {
  int cluster = 0;
  double min = 0.0;
  double median = 0.0;
  double max = 0.0;
  std::vector<double> trials;
  double spread() const { return max - min; }
};

// Re-scores per-cluster mean silhouettes on `trials` stratified subsamples
// that keep floor(fraction * size) members of every cluster.
template <typename Rng>
std::vector<StabilityRow> downsample_stability(const std::vector<Embedding>& embeddings,
                                               const std::vector<int>& labels, double fraction,
                                               std::size_t trials, Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("down-sampling fraction must lie in (0, 1]");
  if (embeddings.size() != labels.size())
    throw std::invalid_argument("embeddings and labels differ in length");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);

  std::map<int, std::vector<double>> scores;
  for (std::size_t t = 0; t < trials; ++t) {
    std::vector<Embedding> sub_e;
    std::vector<int> sub_l;
    for (auto& [cluster, idx] : members) {
      const auto keep = static_cast<std::size_t>(
          std::floor(fraction * static_cast<double>(idx.size()) + 1e-9));
      if (keep == 0)
        throw DataError("down-sampling to " + format_fixed(fraction, 3) + " empties cluster " +
                        std::to_string(cluster));
      std::vector<std::size_t> pick = idx;
      std::shuffle(pick.begin(), pick.end(), rng);
      pick.resize(keep);
      std::sort(pick.begin(), pick.end());
      for (std::size_t i : pick) {
        sub_e.push_back(embeddings[i]);
        sub_l.push_back(cluster);
      }
    }
    const auto rep = silhouette(sub_e, sub_l);
    for (const auto& c : rep.clusters) scores[c.cluster].push_back(c.mean);
  }
  std::vector<StabilityRow> out;
  for (auto& [cluster, v] : scores) {
    StabilityRow row;
    row.cluster = cluster;
    row.min = *std::min_element(v.begin(), v.end());
    row.max = *std::max_element(v.begin(), v.end());
    row.median = median_of(v);
    row.trials = v;
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace relemb
