#include <cmath>
#include <numbers>

#include "emprobe/error.hpp"
#include "emprobe/microlm.hpp"

namespace emprobe::lm {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;

using Index = Eigen::Index;

void fill_normal(RowMatrix& m, Rng& rng, double std) {
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
}

struct LayerNormOut {
  RowMatrix y;
  RowMatrix xhat;
  Vector rstd;
};

LayerNormOut layer_norm(const RowMatrix& x, const RowMatrix& gain, const RowMatrix& bias) {
  LayerNormOut out;
  const Index t = x.rows();
  const Index d = x.cols();
  out.xhat.resize(t, d);
  out.rstd.resize(t);
  for (Index i = 0; i < t; ++i) {
    const double mean = x.row(i).mean();
    const double var = (x.row(i).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    out.rstd[i] = rstd;
    out.xhat.row(i) = (x.row(i).array() - mean) * rstd;
  }
  out.y = (out.xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  return out;
}

/// Returns dx; accumulates into dgain / dbias.
RowMatrix layer_norm_backward(const RowMatrix& dy, const RowMatrix& xhat, const Vector& rstd, const RowMatrix& gain,
                              RowMatrix& dgain, RowMatrix& dbias) {
  dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbias += dy.colwise().sum();
  const RowMatrix dxhat = dy.array().rowwise() * gain.row(0).array();
  RowMatrix dx(dy.rows(), dy.cols());
  for (Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
    dx.row(i) = rstd[i] * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

double gelu_grad(double u) {
  const double th = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

void softmax_rows_inplace(RowMatrix& z) {
  for (Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    z.row(i) = (z.row(i).array() - mx).exp();
    z.row(i) /= z.row(i).sum();
  }
}

struct LayerCache {
  LayerNormOut ln1;
  RowMatrix q, k, v;
  std::vector<RowMatrix> attn;  // per head, T x T, zero above the diagonal
  RowMatrix o;
  LayerNormOut ln2;
  RowMatrix u, z;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  LayerNormOut lnf;
};

}  // namespace

// --- Params ----------------------------------------------------------------

Params Params::zeros(const MicroConfig& c) {
  const auto v = static_cast<Index>(c.vocab_size);
  const auto d = static_cast<Index>(c.d_model);
  const auto f = static_cast<Index>(c.d_ff);
  Params p;
  p.tok_emb = RowMatrix::Zero(v, d);
  p.pos_emb = RowMatrix::Zero(static_cast<Index>(c.context), d);
  p.layers.resize(c.n_layers);
  for (auto& l : p.layers) {
    l.ln1_gain = RowMatrix::Zero(1, d);
    l.ln1_bias = RowMatrix::Zero(1, d);
    l.wq = RowMatrix::Zero(d, d);
    l.wk = RowMatrix::Zero(d, d);
    l.wv = RowMatrix::Zero(d, d);
    l.wo = RowMatrix::Zero(d, d);
    l.ln2_gain = RowMatrix::Zero(1, d);
    l.ln2_bias = RowMatrix::Zero(1, d);
    l.w1 = RowMatrix::Zero(d, f);
    l.b1 = RowMatrix::Zero(1, f);
    l.w2 = RowMatrix::Zero(f, d);
    l.b2 = RowMatrix::Zero(1, d);
  }
  p.lnf_gain = RowMatrix::Zero(1, d);
  p.lnf_bias = RowMatrix::Zero(1, d);
  if (!c.tied) p.out_emb = RowMatrix::Zero(v, static_cast<Index>(c.head_width()));
  return p;
}

void Params::for_each(const std::function<void(const std::string&, RowMatrix&)>& fn) {
  fn("tok_emb", tok_emb);
  fn("pos_emb", pos_emb);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    auto& l = layers[i];
    fn(p + "ln1.gain", l.ln1_gain);
    fn(p + "ln1.bias", l.ln1_bias);
    fn(p + "attn.wq", l.wq);
    fn(p + "attn.wk", l.wk);
    fn(p + "attn.wv", l.wv);
    fn(p + "attn.wo", l.wo);
    fn(p + "ln2.gain", l.ln2_gain);
    fn(p + "ln2.bias", l.ln2_bias);
    fn(p + "ff.w1", l.w1);
    fn(p + "ff.b1", l.b1);
    fn(p + "ff.w2", l.w2);
    fn(p + "ff.b2", l.b2);
  }
  fn("lnf.gain", lnf_gain);
  fn("lnf.bias", lnf_bias);
  if (out_emb.size() > 0) fn("out_emb", out_emb);
}

void Params::for_each(const std::function<void(const std::string&, const RowMatrix&)>& fn) const {
  const_cast<Params*>(this)->for_each([&fn](const std::string& name, RowMatrix& m) { fn(name, m); });
}

// --- Model -----------------------------------------------------------------

Model::Model(const MicroConfig& config) : config_(config), params_(Params::zeros(config)) {
  config_.validate();
  Rng rng(config_.seed);
  const double resid_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
  params_.for_each([&](const std::string& name, RowMatrix& m) {
    if (name.ends_with(".gain")) {
      m.setOnes();
    } else if (name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2")) {
      m.setZero();
    } else if (name.ends_with(".wo") || name.ends_with(".w2")) {
      fill_normal(m, rng, resid_std);
    } else {
      fill_normal(m, rng, kInitStd);
    }
  });
}

Model::Model(const MicroConfig& config, Params params) : config_(config), params_(std::move(params)) {
  config_.validate();
}

Model Model::from_checkpoint(const Checkpoint& checkpoint) {
  checkpoint.validate();
  Params p = Params::zeros(checkpoint.config);
  p.for_each([&](const std::string& name, RowMatrix& m) {
    const RowMatrix& src = checkpoint.param(name);
    if (src.rows() != m.rows() || src.cols() != m.cols()) {
      throw InvariantError("checkpoint parameter '" + name + "' has the wrong shape");
    }
    m = src;
  });
  return Model(checkpoint.config, std::move(p));
}

Checkpoint Model::to_checkpoint(std::uint64_t step, std::string rng_state, std::string metadata) const {
  Checkpoint c;
  c.step = step;
  c.config = config_;
  params_.for_each([&c](const std::string& name, const RowMatrix& m) { c.params.emplace_back(name, m); });
  c.rng_state = std::move(rng_state);
  c.metadata = std::move(metadata);
  return c;
}

void Model::check_tokens(std::span<const TokenId> tokens) const {
  if (tokens.empty()) throw InvariantError("empty token sequence");
  if (tokens.size() > config_.context) {
    throw InvariantError("sequence length " + std::to_string(tokens.size()) + " exceeds context " +
                         std::to_string(config_.context));
  }
  for (TokenId t : tokens) {
    if (t >= config_.vocab_size) throw InvariantError("token id " + std::to_string(t) + " out of range");
  }
}

namespace {

/// Runs the transformer trunk and returns final hidden states (T x head_width).
RowMatrix run_trunk(const MicroConfig& c, const Params& p, std::span<const TokenId> tokens, ForwardCache* cache) {
  const auto t = static_cast<Index>(tokens.size());
  const auto d = static_cast<Index>(c.d_model);
  const auto heads = static_cast<Index>(c.n_heads);
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  RowMatrix x(t, d);
  for (Index i = 0; i < t; ++i) x.row(i) = p.tok_emb.row(tokens[static_cast<std::size_t>(i)]) + p.pos_emb.row(i);

  if (cache) cache->layers.resize(p.layers.size());
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const LayerParams& l = p.layers[li];
    LayerCache local;
    LayerCache& lc = cache ? cache->layers[li] : local;

    lc.ln1 = layer_norm(x, l.ln1_gain, l.ln1_bias);
    const RowMatrix& a = lc.ln1.y;
    lc.q.noalias() = a * l.wq;
    lc.k.noalias() = a * l.wk;
    lc.v.noalias() = a * l.wv;
    lc.o.resize(t, d);
    lc.attn.resize(static_cast<std::size_t>(heads));
    for (Index h = 0; h < heads; ++h) {
      RowMatrix s = (lc.q.middleCols(h * dh, dh) * lc.k.middleCols(h * dh, dh).transpose()) * scale;
      for (Index i = 0; i < t; ++i) {
        const double mx = s.row(i).head(i + 1).maxCoeff();
        s.row(i).head(i + 1) = (s.row(i).head(i + 1).array() - mx).exp();
        s.row(i).head(i + 1) /= s.row(i).head(i + 1).sum();
        s.row(i).tail(t - i - 1).setZero();
      }
      lc.o.middleCols(h * dh, dh).noalias() = s * lc.v.middleCols(h * dh, dh);
      lc.attn[static_cast<std::size_t>(h)] = std::move(s);
    }
    x.noalias() += lc.o * l.wo;

    lc.ln2 = layer_norm(x, l.ln2_gain, l.ln2_bias);
    lc.u = (lc.ln2.y * l.w1).rowwise() + l.b1.row(0);
    lc.z = lc.u.unaryExpr([](double u) { return gelu(u); });
    x.noalias() += lc.z * l.w2;
    x.rowwise() += l.b2.row(0);
  }

  LayerNormOut lnf = layer_norm(x, p.lnf_gain, p.lnf_bias);
  RowMatrix h(t, static_cast<Index>(c.head_width()));
  h.leftCols(d) = lnf.y;
  if (c.head_bias) h.col(d).setOnes();
  if (cache) cache->lnf = std::move(lnf);
  return h;
}

/// Backpropagates dL/dh (T x head_width) through the trunk into `g`.
void backward_trunk(const MicroConfig& c, const Params& p, std::span<const TokenId> tokens, const ForwardCache& cache,
                    const RowMatrix& dh_full, Params& g) {
  const auto t = static_cast<Index>(tokens.size());
  const auto d = static_cast<Index>(c.d_model);
  const auto heads = static_cast<Index>(c.n_heads);
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  RowMatrix dx = layer_norm_backward(dh_full.leftCols(d), cache.lnf.xhat, cache.lnf.rstd, p.lnf_gain, g.lnf_gain,
                                     g.lnf_bias);

  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const LayerParams& l = p.layers[li];
    LayerParams& gl = g.layers[li];
    const LayerCache& lc = cache.layers[li];

    // feed-forward branch
    gl.w2.noalias() += lc.z.transpose() * dx;
    gl.b2 += dx.colwise().sum();
    RowMatrix du = dx * l.w2.transpose();
    du.array() *= lc.u.unaryExpr([](double u) { return gelu_grad(u); }).array();
    gl.w1.noalias() += lc.ln2.y.transpose() * du;
    gl.b1 += du.colwise().sum();
    const RowMatrix dm = du * l.w1.transpose();
    dx += layer_norm_backward(dm, lc.ln2.xhat, lc.ln2.rstd, l.ln2_gain, gl.ln2_gain, gl.ln2_bias);

    // attention branch
    gl.wo.noalias() += lc.o.transpose() * dx;
    const RowMatrix d_o = dx * l.wo.transpose();
    RowMatrix dq(t, d), dk(t, d), dv(t, d);
    for (Index h = 0; h < heads; ++h) {
      const RowMatrix& pa = lc.attn[static_cast<std::size_t>(h)];
      const auto doh = d_o.middleCols(h * dh, dh);
      dv.middleCols(h * dh, dh).noalias() = pa.transpose() * doh;
      RowMatrix dp = doh * lc.v.middleCols(h * dh, dh).transpose();
      for (Index i = 0; i < t; ++i) {
        const double dot = dp.row(i).head(i + 1).dot(pa.row(i).head(i + 1));
        dp.row(i).head(i + 1) = pa.row(i).head(i + 1).array() * (dp.row(i).head(i + 1).array() - dot);
        dp.row(i).tail(t - i - 1).setZero();
      }
      dq.middleCols(h * dh, dh).noalias() = (dp * lc.k.middleCols(h * dh, dh)) * scale;
      dk.middleCols(h * dh, dh).noalias() = (dp.transpose() * lc.q.middleCols(h * dh, dh)) * scale;
    }
    const RowMatrix& a = lc.ln1.y;
    gl.wq.noalias() += a.transpose() * dq;
    gl.wk.noalias() += a.transpose() * dk;
    gl.wv.noalias() += a.transpose() * dv;
    RowMatrix da = dq * l.wq.transpose();
    da.noalias() += dk * l.wk.transpose();
    da.noalias() += dv * l.wv.transpose();
    dx += layer_norm_backward(da, lc.ln1.xhat, lc.ln1.rstd, l.ln1_gain, gl.ln1_gain, gl.ln1_bias);
  }

  for (Index i = 0; i < t; ++i) {
    g.tok_emb.row(tokens[static_cast<std::size_t>(i)]) += dx.row(i);
    g.pos_emb.row(i) += dx.row(i);
  }
}

}  // namespace

RowMatrix Model::hidden(std::span<const TokenId> tokens) const {
  check_tokens(tokens);
  return run_trunk(config_, params_, tokens, nullptr);
}

RowMatrix Model::logits(std::span<const TokenId> tokens) const {
  return hidden(tokens) * output_embedding().transpose();
}

RowMatrix Model::forward(std::span<const TokenId> tokens) const {
  RowMatrix z = logits(tokens);
  softmax_rows_inplace(z);
  return z;
}

double Model::loss_and_grad(std::span<const TokenSeq> inputs, std::span<const TokenSeq> targets, Params* grad) const {
  if (inputs.size() != targets.size() || inputs.empty()) throw InvariantError("batch inputs and targets must pair up");
  std::size_t total = 0;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    if (inputs[b].size() != targets[b].size()) throw InvariantError("input and target lengths differ");
    check_tokens(targets[b]);
    total += inputs[b].size();
  }
  const double inv_n = 1.0 / static_cast<double>(total);
  const RowMatrix& emb = output_embedding();
  RowMatrix* d_emb = grad ? (config_.tied ? &grad->tok_emb : &grad->out_emb) : nullptr;

  double loss = 0.0;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    check_tokens(inputs[b]);
    ForwardCache cache;
    const RowMatrix h = run_trunk(config_, params_, inputs[b], grad ? &cache : nullptr);
    RowMatrix probs = h * emb.transpose();
    for (Index i = 0; i < probs.rows(); ++i) {
      const double mx = probs.row(i).maxCoeff();
      probs.row(i) = (probs.row(i).array() - mx).exp();
      const double z = probs.row(i).sum();
      const TokenId target = targets[b][static_cast<std::size_t>(i)];
      loss -= std::log(probs(i, target) / z);
      probs.row(i) /= z;
    }
    if (!grad) continue;
    for (Index i = 0; i < probs.rows(); ++i) probs(i, targets[b][static_cast<std::size_t>(i)]) -= 1.0;
    probs *= inv_n;  // now dL/dlogits
    d_emb->noalias() += probs.transpose() * h;
    const RowMatrix dh = probs * emb;
    backward_trunk(config_, params_, inputs[b], cache, dh, *grad);
  }
  return loss * inv_n;
}

// --- Decoder ---------------------------------------------------------------

Decoder::Decoder(const Model& model) : model_(model) {
  const auto& c = model.config();
  keys_.assign(c.n_layers, RowMatrix::Zero(static_cast<Index>(c.context), static_cast<Index>(c.d_model)));
  values_ = keys_;
}

Vector Decoder::step(TokenId token) {
  const MicroConfig& c = model_.config();
  const Params& p = model_.params();
  if (length_ >= c.context) throw InvariantError("decoder context is full");
  if (token >= c.vocab_size) throw InvariantError("token id " + std::to_string(token) + " out of range");
  const auto d = static_cast<Index>(c.d_model);
  const auto heads = static_cast<Index>(c.n_heads);
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto pos = static_cast<Index>(length_);

  RowMatrix x = p.tok_emb.row(token) + p.pos_emb.row(pos);
  for (std::size_t li = 0; li < p.layers.size(); ++li) {
    const LayerParams& l = p.layers[li];
    const RowMatrix a = layer_norm(x, l.ln1_gain, l.ln1_bias).y;
    const RowMatrix q = a * l.wq;
    keys_[li].row(pos) = a * l.wk;
    values_[li].row(pos) = a * l.wv;
    RowMatrix o(1, d);
    for (Index h = 0; h < heads; ++h) {
      Vector s = (keys_[li].block(0, h * dh, pos + 1, dh) * q.middleCols(h * dh, dh).transpose()) * scale;
      s = (s.array() - s.maxCoeff()).exp();
      s /= s.sum();
      o.middleCols(h * dh, dh) = s.transpose() * values_[li].block(0, h * dh, pos + 1, dh);
    }
    x += o * l.wo;
    const RowMatrix m = layer_norm(x, l.ln2_gain, l.ln2_bias).y;
    const RowMatrix z = ((m * l.w1).rowwise() + l.b1.row(0)).unaryExpr([](double u) { return gelu(u); });
    x += z * l.w2 + l.b2;
  }
  const RowMatrix hf = layer_norm(x, p.lnf_gain, p.lnf_bias).y;
  RowMatrix h(1, static_cast<Index>(c.head_width()));
  h.leftCols(d) = hf;
  if (c.head_bias) h(0, d) = 1.0;
  ++length_;
  return model_.output_embedding() * h.transpose();
}

}  // namespace emprobe::lm
