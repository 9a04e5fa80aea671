#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "relemb/encoder.hpp"
#include "relemb/synth.hpp"
#include "relemb/tokenizer.hpp"

using namespace relemb;
using Enc = Encoder<double>;

namespace {

EncoderConfig tiny(std::size_t heads = 1, std::size_t layers = 1) {
  EncoderConfig c;
  c.vocab_size = 12;
  c.d_model = 8;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_ff = 16;
  c.max_len = 10;
  c.seed = 11;
  return c;
}

std::vector<TokenId> padded(std::vector<TokenId> ids, std::size_t max_len) {
  ids.resize(max_len, special::kPad);
  return ids;
}

// Perturb every parameter so that LayerNorm gains and biases are not at
// their special initial values.
void jitter(Enc& m, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (double& p : m.parameters()) p += u(rng);
}

}  // namespace

TEST(Encoder, ConfigValidation) {
  EncoderConfig c = tiny();
  c.n_heads = 3;
  EXPECT_THROW(Enc{c}, std::invalid_argument);
  c = tiny();
  c.d_model = 0;
  EXPECT_THROW(Enc{c}, std::invalid_argument);
  c = tiny();
  c.vocab_size = 3;  // fewer than the reserved tokens
  EXPECT_THROW(Enc{c}, std::invalid_argument);
}

TEST(Encoder, InitIsDeterministicAndShaped) {
  EncoderConfig c = tiny();
  c.vocab_size = 100;
  c.d_model = 64;
  c.n_heads = 4;
  c.max_len = 104;
  const Enc a(c), b(c);
  ASSERT_EQ(a.parameter_count(), b.parameter_count());
  EXPECT_TRUE(std::equal(a.parameters().begin(), a.parameters().end(), b.parameters().begin()));
  const auto& tok = a.tensors().front();
  EXPECT_EQ(tok.name, "tok_emb");
  EXPECT_EQ(tok.rows, 100u);
  EXPECT_EQ(tok.cols, 64u);
  EXPECT_EQ(a.tensors()[1].name, "pos_emb");
  EXPECT_EQ(a.tensors()[1].rows, 104u);
  c.seed = 12;
  const Enc d(c);
  EXPECT_FALSE(std::equal(a.parameters().begin(), a.parameters().end(), d.parameters().begin()));

  std::vector<TokenId> ids(104, special::kPad);
  std::mt19937_64 rng(1);
  for (std::size_t i = 0; i < 40; ++i) ids[i] = static_cast<TokenId>(1 + rng() % 99);
  EXPECT_TRUE(a.forward(ids).allFinite());
}

TEST(Encoder, MatchesNaiveReference) {
  for (std::size_t heads : {1, 2, 4}) {
    Enc m(tiny(heads, 2));
    jitter(m, heads);
    const std::vector<TokenId> ids = {3, 7, 4, 9, 5, 8, 6, 2, 0, 0};
    const auto out = m.forward(ids);
    const auto ref = oracle::ReferenceEncoder(m).forward(ids);
    ASSERT_EQ(ref.size(), 8u);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        EXPECT_NEAR(out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), ref[i][j], 1e-12);
    for (Eigen::Index i = 8; i < 10; ++i) EXPECT_EQ(out.row(i).norm(), 0.0);
  }
}

TEST(Encoder, ZeroLayersIsNormalizedEmbeddingSum) {
  EncoderConfig c = tiny(1, 0);
  Enc m(c);
  jitter(m, 5);
  const std::vector<TokenId> ids = padded({3, 9, 4}, c.max_len);
  const auto out = m.forward(ids);
  Eigen::VectorXd gamma(8), beta(8);
  Eigen::MatrixXd tok(12, 8), pos(10, 8);
  for (const auto& s : m.tensors()) {
    const auto t = m.tensor(s);
    if (s.name == "tok_emb") tok = t;
    if (s.name == "pos_emb") pos = t;
    if (s.name == "final_gamma") gamma = t.row(0).transpose();
    if (s.name == "final_beta") beta = t.row(0).transpose();
  }
  for (int p = 0; p < 3; ++p) {
    const Eigen::VectorXd x = (tok.row(ids[p]) + pos.row(p)).transpose();
    const double mean = x.mean();
    const double var = (x.array() - mean).square().mean();
    const Eigen::VectorXd want =
        ((x.array() - mean) / std::sqrt(var + 1e-5) * gamma.array() + beta.array()).matrix();
    EXPECT_LT((out.row(p).transpose() - want).norm(), 1e-12);
  }
}

TEST(Encoder, PaddingInvariance) {
  EncoderConfig c = tiny(2, 2);
  c.max_len = 20;
  Enc m(c);
  jitter(m, 9);
  // The same four real tokens followed by different amounts of padding give
  // the same outputs; so does a compact sequence with no padding at all.
  const std::vector<TokenId> real = {3, 8, 5, 10};
  const auto base = m.forward_compact(real);
  for (std::size_t pads = 0; pads <= 16; pads += 4) {
    std::vector<TokenId> ids = real;
    ids.resize(real.size() + pads, special::kPad);
    const auto out = m.forward_compact(ids);
    EXPECT_LT((out - base).cwiseAbs().maxCoeff(), 1e-10) << pads;
  }
  const auto full = m.forward(padded(real, c.max_len));
  EXPECT_LT((full.topRows(4) - base).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Encoder, BatchRowsAreIndependent) {
  Enc m(tiny(2));
  jitter(m, 4);
  std::vector<TokenizedExample> batch(3);
  batch[0].ids = padded({3, 5, 7}, 10);
  batch[1].ids = padded({4, 6, 8, 9, 11}, 10);
  batch[2] = batch[0];
  const auto out = m.forward(std::span<const TokenizedExample>(batch));
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ((out[0] - out[2]).norm(), 0.0);
  // permutation equivariance
  std::vector<TokenizedExample> swapped = {batch[1], batch[0], batch[2]};
  const auto out2 = m.forward(std::span<const TokenizedExample>(swapped));
  EXPECT_EQ((out2[0] - out[1]).norm(), 0.0);
  EXPECT_EQ((out2[1] - out[0]).norm(), 0.0);
}

TEST(Encoder, RejectsBadInput) {
  Enc m(tiny());
  EXPECT_THROW(m.forward(std::vector<TokenId>(5, 3)), std::invalid_argument);
  EXPECT_THROW(m.forward(padded({3, 99}, 10)), std::invalid_argument);
  EXPECT_THROW(m.forward_compact(std::vector<TokenId>(11, 3)), std::invalid_argument);
}

TEST(RelationEmbedding, Arithmetic) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(4, 3);
  out.row(1) << 1, 0, 0;
  out.row(3) << 0, 1, 0;
  EXPECT_EQ(relation_embedding(out, 1, 3), Eigen::Vector3d(1, -1, 0));
  EXPECT_EQ(relation_embedding(out, 3, 1), Eigen::Vector3d(-1, 1, 0));
  out.row(2) = out.row(1);
  EXPECT_EQ(relation_embedding(out, 1, 2).norm(), 0.0);
  EXPECT_THROW(relation_embedding(out, 1, 4), std::invalid_argument);

  std::mt19937_64 rng(3);
  std::normal_distribution<double> n;
  const Eigen::MatrixXd r = Eigen::MatrixXd::NullaryExpr(6, 5, [&] { return n(rng); });
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t b = 0; b < 6; ++b)
      EXPECT_EQ(relation_embedding(r, a, b), (-relation_embedding(r, b, a)).eval());
}

TEST(Encoder, EmbedUsesMarkerRows) {
  Enc m(tiny(2));
  jitter(m, 2);
  TokenizedExample ex;
  ex.ids = padded({special::kSubjectOpen, 8, special::kSubjectClose, 9, special::kObjectOpen, 10,
                   special::kObjectClose},
                  10);
  ex.su_pos = 0;
  ex.ob_pos = 4;
  const auto out = m.forward(ex.ids);
  EXPECT_LT((m.embed(ex) - relation_embedding(out, 0, 4)).norm(), 1e-15);
}

TEST(EncoderBackward, ZeroUpstreamGivesZeroGradient) {
  Enc m(tiny(2));
  Enc::Cache cache;
  const auto out = m.forward_compact(std::vector<TokenId>{3, 5, 7}, &cache);
  std::vector<double> grad(m.parameter_count(), 0.0);
  m.backward(cache, Enc::Matrix::Zero(out.rows(), out.cols()), grad);
  for (double g : grad) EXPECT_EQ(g, 0.0);
}

// Analytic gradients of a random linear functional of the outputs against
// central differences, on every parameter.
TEST(EncoderBackward, MatchesFiniteDifferences) {
  for (std::size_t heads : {1, 2}) {
    SCOPED_TRACE(heads);
    Enc m(tiny(heads));
    jitter(m, 20 + heads);
    const std::vector<TokenId> ids = {3, 9, 4, 7, 5, 11, 6, 0, 0, 0};
    Enc::Cache cache;
    const auto out = m.forward_compact(ids, &cache);
    std::mt19937_64 rng(7);
    std::normal_distribution<double> n;
    const Enc::Matrix w = Enc::Matrix::NullaryExpr(out.rows(), out.cols(), [&] { return n(rng); });
    std::vector<double> grad(m.parameter_count(), 0.0);
    m.backward(cache, w, grad);

    const oracle::Vec start(m.parameters().begin(), m.parameters().end());
    auto f = [&](const oracle::Vec& p) {
      Enc probe = m;
      std::copy(p.begin(), p.end(), probe.parameters().begin());
      return probe.forward_compact(ids).cwiseProduct(w).sum();
    };
    const auto numeric = oracle::finite_difference(f, start);
    double worst = 0;
    std::string worst_name;
    for (const auto& s : m.tensors())
      for (std::size_t i = s.offset; i < s.offset + s.size(); ++i) {
        const double e = oracle::relative_error(grad[i], numeric[i]);
        if (e > worst) {
          worst = e;
          worst_name = s.name;
        }
      }
    EXPECT_LT(worst, 1e-4) << worst_name;
  }
}

TEST(EncoderBackward, GradientDescentReducesLoss) {
  // Ten synthetic sequences; pull each relation embedding towards a fixed
  // random target with plain gradient descent.
  EncoderConfig c = tiny(2);
  c.max_len = 12;
  Enc m(c);
  std::mt19937_64 rng(8);
  std::vector<TokenizedExample> batch(10);
  std::vector<Eigen::VectorXd> target(10);
  std::normal_distribution<double> n;
  for (std::size_t b = 0; b < 10; ++b) {
    auto& ex = batch[b];
    ex.ids = {special::kSubjectOpen, TokenId(7 + rng() % 5), special::kSubjectClose, TokenId(7 + rng() % 5),
              special::kObjectOpen,  TokenId(7 + rng() % 5), special::kObjectClose};
    ex.ids.resize(c.max_len, special::kPad);
    ex.su_pos = 0;
    ex.ob_pos = 4;
    target[b] = Eigen::VectorXd::NullaryExpr(8, [&] { return n(rng); });
  }
  auto loss_and_grad = [&](std::vector<double>* grad) {
    double loss = 0;
    for (std::size_t b = 0; b < 10; ++b) {
      Enc::Cache cache;
      const Eigen::VectorXd diff = m.embed(batch[b], &cache) - target[b];
      loss += 0.5 * diff.squaredNorm();
      if (grad) m.backward_embedding(cache, batch[b], diff, *grad);
    }
    return loss;
  };
  const double initial = loss_and_grad(nullptr);
  for (int step = 0; step < 50; ++step) {
    std::vector<double> grad(m.parameter_count(), 0.0);
    loss_and_grad(&grad);
    auto p = m.parameters();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= 0.01 * grad[i];
  }
  EXPECT_LT(loss_and_grad(nullptr), 0.8 * initial);
}

TEST(Checkpoint, RoundTripIsBitwise) {
  Enc m(tiny(2, 2));
  jitter(m, 6);
  const auto path = (std::filesystem::temp_directory_path() / "relemb_ckpt_test.ckpt").string();
  m.save(path, "relemb test");
  const Enc back = Enc::load(path);
  EXPECT_TRUE(std::equal(m.parameters().begin(), m.parameters().end(), back.parameters().begin()));
  EXPECT_EQ(back.config().n_layers, 2u);
  EXPECT_EQ(read_file(path).substr(0, 14), "# relemb test\n");

  // float training copy widens exactly back to double
  const auto f = m.cast<float>();
  f.save(path);
  const Enc widened = Enc::load(path);
  for (std::size_t i = 0; i < m.parameter_count(); ++i)
    EXPECT_EQ(widened.parameters()[i], static_cast<double>(static_cast<float>(m.parameters()[i])));

  // truncated file
  const std::string bytes = read_file(path);
  {
    std::ofstream out(path, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 3);
  }
  EXPECT_THROW(Enc::load(path), DataError);
  std::filesystem::remove(path);
  EXPECT_THROW(Enc::load(path), DataError);
}
