#pragma once

// Pre-norm transformer encoder with hand-written backward pass. Parameters
// live in one flat buffer so optimizers, checkpoints and finite-difference
// checks can treat them uniformly.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "relemb/common.hpp"
#include "relemb/tokenizer.hpp"

namespace relemb {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_len = 104;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < special::kCount)
      throw std::invalid_argument("vocab_size must cover the reserved tokens");
    if (d_model == 0 || n_heads == 0 || d_ff == 0 || max_len == 0)
      throw std::invalid_argument("encoder dimensions must be >= 1");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("d_model must be divisible by n_heads");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Location of one named tensor inside the flat parameter buffer.
struct TensorSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
};

template <typename Real>
class Encoder {
 public:
  using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;
  using Map = Eigen::Map<Matrix>;
  using ConstMap = Eigen::Map<const Matrix>;

  static constexpr Real kLayerNormEps = Real(1e-5);

  // Activations kept for the backward pass of one sequence. Rows correspond
  // to the non-padding positions, in order.
  struct Cache {
    struct Layer {
      Matrix xhat1, h1, q, k, v, attn, xhat2, h2, u, g;
      Vector rstd1, rstd2;
      std::vector<Matrix> probs;  // one n x n matrix per head
    };
    std::vector<TokenId> tokens;
    std::vector<std::size_t> positions;
    std::vector<Layer> layers;
    Matrix xhat_final;
    Vector rstd_final;
  };

  explicit Encoder(const EncoderConfig& config) : config_(config) {
    config_.validate();
    layout();
    initialize();
  }

  const EncoderConfig& config() const { return config_; }
  std::span<Real> parameters() { return params_; }
  std::span<const Real> parameters() const { return params_; }
  const std::vector<TensorSlot>& tensors() const { return slots_; }
  std::size_t parameter_count() const { return params_.size(); }

  ConstMap tensor(const TensorSlot& s) const { return view(s); }

  // Outputs for the non-padding tokens of `ids` (one row per real token).
  Matrix forward_compact(std::span<const TokenId> ids, Cache* cache = nullptr) const {
    if (ids.size() > config_.max_len)
      throw std::invalid_argument("sequence longer than max_len");
    Cache local;
    Cache& c = cache ? *cache : local;
    c.tokens.clear();
    c.positions.clear();
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (ids[p] == special::kPad) continue;
      if (ids[p] < 0 || static_cast<std::size_t>(ids[p]) >= config_.vocab_size)
        throw std::invalid_argument("token id out of vocabulary range");
      c.tokens.push_back(ids[p]);
      c.positions.push_back(p);
    }
    const auto n = static_cast<Eigen::Index>(c.tokens.size());
    const auto d = static_cast<Eigen::Index>(config_.d_model);
    Matrix x(n, d);
    const auto tok = view(tok_emb_);
    const auto pos = view(pos_emb_);
    for (Eigen::Index i = 0; i < n; ++i)
      x.row(i) = tok.row(c.tokens[i]) + pos.row(static_cast<Eigen::Index>(c.positions[i]));

    c.layers.resize(config_.n_layers);
    for (std::size_t l = 0; l < config_.n_layers; ++l)
      forward_layer(layers_[l], c.layers[l], x);

    Matrix y;
    layer_norm(x, view(lnf_g_), view(lnf_b_), c.xhat_final, c.rstd_final, y);
    return y;
  }

  // max_len x d_model outputs; rows at padding positions are zero.
  Matrix forward(std::span<const TokenId> ids) const {
    if (ids.size() != config_.max_len)
      throw std::invalid_argument("sequence length " + std::to_string(ids.size()) +
                                  " does not match max_len " +
                                  std::to_string(config_.max_len));
    Cache c;
    Matrix compact = forward_compact(ids, &c);
    Matrix full = Matrix::Zero(static_cast<Eigen::Index>(config_.max_len),
                               static_cast<Eigen::Index>(config_.d_model));
    for (std::size_t i = 0; i < c.positions.size(); ++i)
      full.row(static_cast<Eigen::Index>(c.positions[i])) = compact.row(static_cast<Eigen::Index>(i));
    return full;
  }

  std::vector<Matrix> forward(std::span<const TokenizedExample> batch) const {
    std::vector<Matrix> out;
    out.reserve(batch.size());
    for (const auto& ex : batch) out.push_back(forward(ex.ids));
    return out;
  }

  // Accumulates d(loss)/d(parameters) into `grad` given d(loss)/d(outputs)
  // for the compact rows of `cache`.
  void backward(const Cache& c, const Matrix& d_out, std::span<Real> grad) const {
    if (grad.size() != params_.size())
      throw std::invalid_argument("gradient buffer has the wrong size");
    if (d_out.rows() != static_cast<Eigen::Index>(c.tokens.size()) ||
        d_out.cols() != static_cast<Eigen::Index>(config_.d_model))
      throw std::invalid_argument("upstream gradient shape mismatch");

    Matrix dx;
    layer_norm_backward(d_out, c.xhat_final, c.rstd_final, view(lnf_g_),
                        gview(grad, lnf_g_), gview(grad, lnf_b_), dx);
    for (std::size_t l = config_.n_layers; l-- > 0;)
      backward_layer(layers_[l], c.layers[l], grad, dx);

    auto dtok = gview(grad, tok_emb_);
    auto dpos = gview(grad, pos_emb_);
    for (std::size_t i = 0; i < c.tokens.size(); ++i) {
      const auto row = dx.row(static_cast<Eigen::Index>(i));
      dtok.row(c.tokens[i]) += row;
      dpos.row(static_cast<Eigen::Index>(c.positions[i])) += row;
    }
  }

  // Compact row of an original sequence position.
  static Eigen::Index row_of(const Cache& c, std::size_t position) {
    for (std::size_t i = 0; i < c.positions.size(); ++i)
      if (c.positions[i] == position) return static_cast<Eigen::Index>(i);
    throw std::invalid_argument("position " + std::to_string(position) +
                                " is padding or out of range");
  }

  // Relation embedding of one encoded example, keeping the cache for
  // backward_embedding.
  Vector embed(const TokenizedExample& ex, Cache* cache = nullptr) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    const Matrix out = forward_compact(ex.ids, &c);
    return (out.row(row_of(c, ex.su_pos)) - out.row(row_of(c, ex.ob_pos))).transpose();
  }

  void backward_embedding(const Cache& c, const TokenizedExample& ex,
                          const Vector& d_embedding, std::span<Real> grad) const {
    Matrix d_out = Matrix::Zero(static_cast<Eigen::Index>(c.tokens.size()),
                                static_cast<Eigen::Index>(config_.d_model));
    d_out.row(row_of(c, ex.su_pos)) += d_embedding.transpose();
    d_out.row(row_of(c, ex.ob_pos)) -= d_embedding.transpose();
    backward(c, d_out, grad);
  }

  // --- checkpoints -------------------------------------------------------
  // Text header (config, tensor names and shapes) followed by the raw
  // parameters as 64-bit little-endian IEEE doubles.
  void save(const std::string& path, const std::string& comment = {}) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path);
    if (!comment.empty()) out << "# " << comment << '\n';
    out << "relemb-checkpoint 1\n"
        << "vocab_size " << config_.vocab_size << '\n'
        << "d_model " << config_.d_model << '\n'
        << "n_layers " << config_.n_layers << '\n'
        << "n_heads " << config_.n_heads << '\n'
        << "d_ff " << config_.d_ff << '\n'
        << "max_len " << config_.max_len << '\n'
        << "seed " << config_.seed << '\n';
    for (const auto& s : slots_)
      out << "tensor " << s.name << ' ' << s.rows << ' ' << s.cols << '\n';
    out << "data " << params_.size() << '\n';
    for (Real p : params_) {
      const auto bits = std::bit_cast<std::uint64_t>(static_cast<double>(p));
      unsigned char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
      out.write(reinterpret_cast<const char*>(bytes), 8);
    }
    if (!out) throw DataError("failed writing checkpoint " + path);
  }

  static Encoder load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("missing checkpoint " + path);
    std::string line;
    EncoderConfig cfg;
    std::vector<TensorSlot> declared;
    std::size_t count = 0;
    bool magic = false;
    while (std::getline(in, line)) {
      if (line.empty() || line.front() == '#') continue;
      std::istringstream ls(line);
      std::string key;
      ls >> key;
      if (key == "relemb-checkpoint") magic = true;
      else if (key == "vocab_size") ls >> cfg.vocab_size;
      else if (key == "d_model") ls >> cfg.d_model;
      else if (key == "n_layers") ls >> cfg.n_layers;
      else if (key == "n_heads") ls >> cfg.n_heads;
      else if (key == "d_ff") ls >> cfg.d_ff;
      else if (key == "max_len") ls >> cfg.max_len;
      else if (key == "seed") ls >> cfg.seed;
      else if (key == "tensor") {
        TensorSlot s;
        ls >> s.name >> s.rows >> s.cols;
        declared.push_back(s);
      } else if (key == "data") {
        ls >> count;
        break;
      } else {
        throw DataError("checkpoint " + path + ": unexpected header line '" + line + "'");
      }
    }
    if (!magic) throw DataError(path + " is not a checkpoint");
    Encoder enc(cfg);
    if (count != enc.params_.size() || declared.size() != enc.slots_.size())
      throw DataError("checkpoint " + path + " does not match its declared config");
    for (std::size_t i = 0; i < declared.size(); ++i)
      if (declared[i].name != enc.slots_[i].name || declared[i].rows != enc.slots_[i].rows ||
          declared[i].cols != enc.slots_[i].cols)
        throw DataError("checkpoint " + path + ": tensor layout mismatch at " + declared[i].name);
    for (auto& p : enc.params_) {
      unsigned char bytes[8];
      if (!in.read(reinterpret_cast<char*>(bytes), 8))
        throw DataError("checkpoint " + path + " is truncated");
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= std::uint64_t{bytes[i]} << (8 * i);
      p = static_cast<Real>(std::bit_cast<double>(bits));
    }
    return enc;
  }

  // Parameters converted to another precision (float training, double
  // evaluation and checks).
  template <typename Other>
  Encoder<Other> cast() const {
    Encoder<Other> out(config_);
    auto dst = out.parameters();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<Other>(params_[i]);
    return out;
  }

 private:
  struct LayerSlots {
    TensorSlot ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  TensorSlot add_slot(const std::string& name, std::size_t rows, std::size_t cols) {
    TensorSlot s{name, total_, rows, cols};
    total_ += rows * cols;
    slots_.push_back(s);
    return s;
  }

  void layout() {
    const auto d = config_.d_model, ff = config_.d_ff;
    tok_emb_ = add_slot("tok_emb", config_.vocab_size, d);
    pos_emb_ = add_slot("pos_emb", config_.max_len, d);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      LayerSlots s;
      s.ln1_g = add_slot(p + "ln1_gamma", 1, d);
      s.ln1_b = add_slot(p + "ln1_beta", 1, d);
      s.wq = add_slot(p + "w_query", d, d);
      s.bq = add_slot(p + "b_query", 1, d);
      s.wk = add_slot(p + "w_key", d, d);
      s.bk = add_slot(p + "b_key", 1, d);
      s.wv = add_slot(p + "w_value", d, d);
      s.bv = add_slot(p + "b_value", 1, d);
      s.wo = add_slot(p + "w_out", d, d);
      s.bo = add_slot(p + "b_out", 1, d);
      s.ln2_g = add_slot(p + "ln2_gamma", 1, d);
      s.ln2_b = add_slot(p + "ln2_beta", 1, d);
      s.w1 = add_slot(p + "w_ff1", d, ff);
      s.b1 = add_slot(p + "b_ff1", 1, ff);
      s.w2 = add_slot(p + "w_ff2", ff, d);
      s.b2 = add_slot(p + "b_ff2", 1, d);
      layers_.push_back(s);
    }
    lnf_g_ = add_slot("final_gamma", 1, d);
    lnf_b_ = add_slot("final_beta", 1, d);
    params_.assign(total_, Real(0));
  }

  // Embeddings ~ U(-0.1, 0.1); weight matrices ~ U(-a, a) with
  // a = sqrt(6 / (fan_in + fan_out)); biases 0; layer-norm gains 1.
  void initialize() {
    std::mt19937_64 rng(config_.seed);
    auto fill = [&](const TensorSlot& s, double bound) {
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (std::size_t i = 0; i < s.size(); ++i)
        params_[s.offset + i] = static_cast<Real>(dist(rng));
    };
    auto ones = [&](const TensorSlot& s) {
      for (std::size_t i = 0; i < s.size(); ++i) params_[s.offset + i] = Real(1);
    };
    auto xavier = [](const TensorSlot& s) {
      return std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
    };
    fill(tok_emb_, 0.1);
    fill(pos_emb_, 0.1);
    for (const auto& s : layers_) {
      ones(s.ln1_g);
      ones(s.ln2_g);
      for (const TensorSlot* w : {&s.wq, &s.wk, &s.wv, &s.wo, &s.w1, &s.w2})
        fill(*w, xavier(*w));
    }
    ones(lnf_g_);
  }

  ConstMap view(const TensorSlot& s) const {
    return ConstMap(params_.data() + s.offset, static_cast<Eigen::Index>(s.rows),
                    static_cast<Eigen::Index>(s.cols));
  }
  static Map gview(std::span<Real> grad, const TensorSlot& s) {
    return Map(grad.data() + s.offset, static_cast<Eigen::Index>(s.rows),
               static_cast<Eigen::Index>(s.cols));
  }

  static void layer_norm(const Matrix& x, const ConstMap& gamma, const ConstMap& beta,
                         Matrix& xhat, Vector& rstd, Matrix& y) {
    const auto n = x.rows();
    const auto d = static_cast<Real>(x.cols());
    xhat.resize(n, x.cols());
    rstd.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Real mean = x.row(i).sum() / d;
      const auto centered = x.row(i).array() - mean;
      const Real var = centered.square().sum() / d;
      rstd(i) = Real(1) / std::sqrt(var + kLayerNormEps);
      xhat.row(i) = centered * rstd(i);
    }
    y = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
  }

  static void layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd,
                                  const ConstMap& gamma, Map dgamma, Map dbeta, Matrix& dx) {
    dgamma.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    dbeta.row(0) += dy.colwise().sum();
    const Matrix dxhat = (dy.array().rowwise() * gamma.row(0).array()).matrix();
    const auto d = static_cast<Real>(dy.cols());
    dx.resize(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      const Real mean_d = dxhat.row(i).sum() / d;
      const Real mean_dx = dxhat.row(i).dot(xhat.row(i)) / d;
      dx.row(i) = rstd(i) * (dxhat.row(i).array() - mean_d - xhat.row(i).array() * mean_dx);
    }
  }

  static Real gelu(Real u) {
    constexpr Real c = Real(0.7978845608028654);  // sqrt(2/pi)
    return Real(0.5) * u * (Real(1) + std::tanh(c * (u + Real(0.044715) * u * u * u)));
  }
  static Real gelu_grad(Real u) {
    constexpr Real c = Real(0.7978845608028654);
    const Real t = std::tanh(c * (u + Real(0.044715) * u * u * u));
    return Real(0.5) * (Real(1) + t) +
           Real(0.5) * u * (Real(1) - t * t) * c * (Real(1) + Real(3 * 0.044715) * u * u);
  }

  void forward_layer(const LayerSlots& s, typename Cache::Layer& c, Matrix& x) const {
    const auto n = x.rows();
    const auto dh = static_cast<Eigen::Index>(config_.d_model / config_.n_heads);
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));

    layer_norm(x, view(s.ln1_g), view(s.ln1_b), c.xhat1, c.rstd1, c.h1);
    c.q = (c.h1 * view(s.wq)).rowwise() + view(s.bq).row(0);
    c.k = (c.h1 * view(s.wk)).rowwise() + view(s.bk).row(0);
    c.v = (c.h1 * view(s.wv)).rowwise() + view(s.bv).row(0);

    c.attn.resize(n, x.cols());
    c.probs.resize(config_.n_heads);
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      Matrix scores = (c.q.middleCols(col, dh) * c.k.middleCols(col, dh).transpose()) * scale;
      for (Eigen::Index i = 0; i < n; ++i) {
        const Real m = scores.row(i).maxCoeff();
        scores.row(i) = (scores.row(i).array() - m).exp();
        scores.row(i) /= scores.row(i).sum();
      }
      c.attn.middleCols(col, dh) = scores * c.v.middleCols(col, dh);
      c.probs[h] = std::move(scores);
    }
    x += (c.attn * view(s.wo)).rowwise() + view(s.bo).row(0);

    layer_norm(x, view(s.ln2_g), view(s.ln2_b), c.xhat2, c.rstd2, c.h2);
    c.u = (c.h2 * view(s.w1)).rowwise() + view(s.b1).row(0);
    c.g = c.u.unaryExpr([](Real u) { return gelu(u); });
    x += (c.g * view(s.w2)).rowwise() + view(s.b2).row(0);
  }

  // On entry dx holds d(loss)/d(layer output); on exit d(loss)/d(layer input).
  void backward_layer(const LayerSlots& s, const typename Cache::Layer& c,
                      std::span<Real> grad, Matrix& dx) const {
    const auto dh = static_cast<Eigen::Index>(config_.d_model / config_.n_heads);
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));

    // feed-forward branch
    gview(grad, s.w2).noalias() += c.g.transpose() * dx;
    gview(grad, s.b2).row(0) += dx.colwise().sum();
    Matrix du = (dx * view(s.w2).transpose()).cwiseProduct(
        c.u.unaryExpr([](Real u) { return gelu_grad(u); }));
    gview(grad, s.w1).noalias() += c.h2.transpose() * du;
    gview(grad, s.b1).row(0) += du.colwise().sum();
    const Matrix dh2 = du * view(s.w1).transpose();
    Matrix dln;
    layer_norm_backward(dh2, c.xhat2, c.rstd2, view(s.ln2_g), gview(grad, s.ln2_g),
                        gview(grad, s.ln2_b), dln);
    dx += dln;

    // attention branch
    gview(grad, s.wo).noalias() += c.attn.transpose() * dx;
    gview(grad, s.bo).row(0) += dx.colwise().sum();
    const Matrix dattn = dx * view(s.wo).transpose();
    Matrix dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
    for (std::size_t h = 0; h < config_.n_heads; ++h) {
      const auto col = static_cast<Eigen::Index>(h) * dh;
      const Matrix& p = c.probs[h];
      const auto da = dattn.middleCols(col, dh);
      dv.middleCols(col, dh) = p.transpose() * da;
      const Matrix dp = da * c.v.middleCols(col, dh).transpose();
      Matrix ds = p.cwiseProduct(dp);
      const Vector row_dot = ds.rowwise().sum();
      ds -= p.cwiseProduct(row_dot.replicate(1, p.cols()));
      ds *= scale;
      dq.middleCols(col, dh) = ds * c.k.middleCols(col, dh);
      dk.middleCols(col, dh) = ds.transpose() * c.q.middleCols(col, dh);
    }
    gview(grad, s.wq).noalias() += c.h1.transpose() * dq;
    gview(grad, s.bq).row(0) += dq.colwise().sum();
    gview(grad, s.wk).noalias() += c.h1.transpose() * dk;
    gview(grad, s.bk).row(0) += dk.colwise().sum();
    gview(grad, s.wv).noalias() += c.h1.transpose() * dv;
    gview(grad, s.bv).row(0) += dv.colwise().sum();
    const Matrix dh1 = dq * view(s.wq).transpose() + dk * view(s.wk).transpose() +
                       dv * view(s.wv).transpose();
    layer_norm_backward(dh1, c.xhat1, c.rstd1, view(s.ln1_g), gview(grad, s.ln1_g),
                        gview(grad, s.ln1_b), dln);
    dx += dln;
  }

  EncoderConfig config_;
  std::vector<Real> params_;
  std::vector<TensorSlot> slots_;
  std::size_t total_ = 0;
  TensorSlot tok_emb_, pos_emb_, lnf_g_, lnf_b_;
  std::vector<LayerSlots> layers_;
};

// Difference of the output rows at the two marker positions.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> relation_embedding(
    const Eigen::MatrixBase<Derived>& outputs, std::size_t su_pos, std::size_t ob_pos) {
  if (su_pos >= static_cast<std::size_t>(outputs.rows()) ||
      ob_pos >= static_cast<std::size_t>(outputs.rows()))
    throw std::invalid_argument("marker position outside the output rows");
  return (outputs.row(static_cast<Eigen::Index>(su_pos)) -
          outputs.row(static_cast<Eigen::Index>(ob_pos)))
      .transpose();
}

}  // namespace relemb
