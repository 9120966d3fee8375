#include "slotgen/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace slotgen {

using nlohmann::json;
using Eigen::VectorXd;

namespace {
constexpr double kLnEps = 1e-5;
constexpr double kMaskedScore = -1e30;
}  // namespace

const char* to_string(TrainMode m) { return m == TrainMode::Finetune ? "finetune" : "prefix"; }

TrainMode train_mode_from_string(const std::string& name) {
  if (name == "finetune") return TrainMode::Finetune;
  if (name == "prefix") return TrainMode::Prefix;
  throw ValidationError("unknown train mode: " + name);
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw ValidationError("d_model must be a positive multiple of n_heads");
  if (n_encoder_layers == 0 || n_decoder_layers == 0)
    throw ValidationError("encoder and decoder need at least one layer");
  if (prefix_length < 1) throw ValidationError("prefix_length must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must be in [0,1)");
  if (max_input_len == 0 || max_output_len == 0)
    throw ValidationError("sequence length maxima must be positive");
}

// ---------------------------------------------------------------------------
// Activation caches for the backward pass.

struct NormCache {
  Matrix xhat;
  VectorXd inv_std;
};

struct DropCache {
  bool active = false;
  Matrix mask;  // includes the 1/keep scaling
};

struct AttnCache {
  Matrix q_in, kv_in;
  Matrix Q, K, V;          // K and V carry the prefix rows on top
  std::vector<Matrix> A;   // per head, T x (L+S)
  Matrix O;                // head-concatenated context, pre output projection
};

struct FfnCache {
  Matrix x, h;  // h is post-ReLU
};

struct EncLayerCache {
  Matrix x_in;
  NormCache ln1, ln2;
  Matrix ln1_out, ln2_out;
  AttnCache attn;
  DropCache attn_drop;
  Matrix h_mid;
  FfnCache ffn;
  DropCache ffn_drop;
};

struct DecLayerCache {
  Matrix x_in;
  NormCache ln1, ln2, ln3;
  Matrix ln1_out, ln2_out, ln3_out;
  AttnCache self_attn;
  DropCache self_drop;
  Matrix h1;
  AttnCache cross_attn;
  DropCache cross_drop;
  Matrix h2;
  FfnCache ffn;
  DropCache ffn_drop;
};

struct Tape {
  std::vector<int> enc_ids, dec_ids;
  DropCache enc_embed_drop, dec_embed_drop;
  std::vector<EncLayerCache> enc_layers;
  Matrix enc_final_in;
  NormCache enc_final_ln;
  Matrix memory;
  std::vector<DecLayerCache> dec_layers;
  Matrix dec_final_in;
  NormCache dec_final_ln;
  Matrix dec_final_out;
  Matrix d_memory;  // filled by the decoder backward, consumed by the encoder
};

// ---------------------------------------------------------------------------
// Construction.

namespace {

void xavier_init(Matrix& m, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = dist(rng);
}

Matrix sinusoidal_positions(std::size_t max_pos, std::size_t d) {
  Matrix pe(max_pos, d);
  for (std::size_t pos = 0; pos < max_pos; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = double(pos) / std::pow(10000.0, double(i) / double(d));
      pe(pos, i) = std::sin(angle);
      if (i + 1 < d) pe(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

}  // namespace

Seq2SeqModel::Seq2SeqModel(ModelConfig config, Vocab vocab)
    : cfg_(std::move(config)), vocab_(std::move(vocab)) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model;
  const std::size_t ff = cfg_.ff_width;
  const std::size_t V = vocab_.size();
  const std::size_t L = cfg_.prefix_length;
  Rng rng(derive_seed(cfg_.seed, "init"));

  auto add_weight = [&](const std::string& name, std::size_t rows, std::size_t cols,
                        bool prefix = false) {
    std::size_t idx = store_.add(name, rows, cols, prefix);
    xavier_init(store_[idx].value, rows, cols, rng);
    return idx;
  };
  auto add_bias = [&](const std::string& name, std::size_t cols) {
    return store_.add(name, 1, cols, false);  // zeros
  };
  auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    LinearIdx li;
    li.w = add_weight(name + ".w", in, out);
    li.b = add_bias(name + ".b", out);
    return li;
  };
  auto add_norm = [&](const std::string& name) {
    NormIdx ni;
    ni.gain = store_.add(name + ".gain", 1, d, false);
    store_[ni.gain].value.setOnes();
    ni.bias = add_bias(name + ".bias", d);
    return ni;
  };
  auto add_attn = [&](const std::string& name) {
    AttnIdx ai;
    ai.q = add_linear(name + ".q", d, d);
    ai.k = add_linear(name + ".k", d, d);
    ai.v = add_linear(name + ".v", d, d);
    ai.o = add_linear(name + ".o", d, d);
    ai.prefix_k = add_weight(name + ".prefix_k", L, d, /*prefix=*/true);
    ai.prefix_v = add_weight(name + ".prefix_v", L, d, /*prefix=*/true);
    return ai;
  };

  embedding_ = add_weight("embedding", V, d);
  for (std::size_t l = 0; l < cfg_.n_encoder_layers; ++l) {
    const std::string base = "enc." + std::to_string(l);
    EncLayerIdx e;
    e.ln1 = add_norm(base + ".ln1");
    e.attn = add_attn(base + ".self_attn");
    e.ln2 = add_norm(base + ".ln2");
    e.ff1 = add_linear(base + ".ff1", d, ff);
    e.ff2 = add_linear(base + ".ff2", ff, d);
    enc_layers_.push_back(e);
  }
  enc_final_ln_ = add_norm("enc.final_ln");
  for (std::size_t l = 0; l < cfg_.n_decoder_layers; ++l) {
    const std::string base = "dec." + std::to_string(l);
    DecLayerIdx dl;
    dl.ln1 = add_norm(base + ".ln1");
    dl.self_attn = add_attn(base + ".self_attn");
    dl.ln2 = add_norm(base + ".ln2");
    dl.cross_attn = add_attn(base + ".cross_attn");
    dl.ln3 = add_norm(base + ".ln3");
    dl.ff1 = add_linear(base + ".ff1", d, ff);
    dl.ff2 = add_linear(base + ".ff2", ff, d);
    dec_layers_.push_back(dl);
  }
  dec_final_ln_ = add_norm("dec.final_ln");
  out_head_ = add_linear("out_head", d, V);

  const std::size_t max_pos = std::max(cfg_.max_input_len, cfg_.max_output_len + 2);
  positional_ = sinusoidal_positions(max_pos, d);
  store_.set_mode(TrainMode::Finetune);
}

// ---------------------------------------------------------------------------
// Forward primitives.

namespace {

Matrix linear_fwd(const Matrix& x, const Tensor& w, const Tensor& b) {
  return (x * w.value).rowwise() + b.value.row(0);
}

Matrix norm_fwd(const Matrix& x, const Tensor& gain, const Tensor& bias, NormCache* cache) {
  const Eigen::Index d = x.cols();
  Matrix xhat(x.rows(), d);
  VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(r) = (x.row(r).array() - mu) * inv;
    inv_std(r) = inv;
  }
  Matrix y =
      (xhat.array().rowwise() * gain.value.row(0).array()).rowwise() + bias.value.row(0).array();
  if (cache) {
    cache->xhat = xhat;
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Matrix norm_bwd(const Matrix& dy, const NormCache& cache, const Tensor& gain, Tensor& dgain,
                Tensor& dbias) {
  dgain.grad.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  dbias.grad.row(0) += dy.colwise().sum();
  Matrix dxhat = dy.array().rowwise() * gain.value.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).mean();
    const double m2 = (dxhat.row(r).array() * cache.xhat.row(r).array()).mean();
    dx.row(r) =
        cache.inv_std(r) * (dxhat.row(r).array() - m1 - cache.xhat.row(r).array() * m2);
  }
  return dx;
}

Matrix dropout_fwd(const Matrix& x, double p, Rng* rng, DropCache* cache) {
  if (!rng || p <= 0.0) {
    if (cache) cache->active = false;
    return x;
  }
  const double keep = 1.0 - p;
  std::bernoulli_distribution dist(keep);
  Matrix mask(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c) mask(r, c) = dist(*rng) ? 1.0 / keep : 0.0;
  if (cache) {
    cache->active = true;
    cache->mask = mask;
  }
  return x.cwiseProduct(mask);
}

Matrix apply_drop_bwd(const Matrix& dy, const DropCache& cache) {
  return cache.active ? dy.cwiseProduct(cache.mask).eval() : dy;
}

void softmax_rows_masked(Matrix& scores, std::size_t prefix_len, bool causal) {
  // Prefix columns are always visible; with a causal mask, query row t may
  // additionally see sequence columns 0..t.
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    if (causal) {
      for (Eigen::Index c = Eigen::Index(prefix_len) + r + 1; c < scores.cols(); ++c)
        scores(r, c) = kMaskedScore;
    }
    const double mx = scores.row(r).maxCoeff();
    scores.row(r) = (scores.row(r).array() - mx).exp();
    scores.row(r) /= scores.row(r).sum();
  }
}

}  // namespace

Matrix Seq2SeqModel::embed(const std::vector<int>& ids) const {
  const Matrix& E = store_[embedding_].value;
  Matrix x(ids.size(), cfg_.d_model);
  for (std::size_t t = 0; t < ids.size(); ++t)
    x.row(Eigen::Index(t)) = E.row(ids[t]) + positional_.row(Eigen::Index(t));
  return x;
}

namespace {

// Scaled dot-product attention with key/value prefixes. Returns the block
// output; fills the cache when requested.
Matrix attention_fwd(const ParameterStore& store, const Seq2SeqModel* /*unused*/, std::size_t,
                     const Matrix&, const Matrix&, bool, AttnCache*);

}  // namespace

// Attention needs the index struct, so it lives as a private-style free
// function taking explicit tensors.
namespace {

struct AttnTensors {
  const Tensor *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo, *pk, *pv;
};

Matrix attn_fwd(const AttnTensors& p, std::size_t n_heads, const Matrix& q_in,
                const Matrix& kv_in, bool causal, AttnCache* cache) {
  const Eigen::Index d = q_in.cols();
  const Eigen::Index dh = d / Eigen::Index(n_heads);
  const Eigen::Index L = p.pk->value.rows();
  const Eigen::Index S = kv_in.rows();
  const Eigen::Index T = q_in.rows();
  const double scale = 1.0 / std::sqrt(double(dh));

  Matrix Q = (q_in * p.wq->value).rowwise() + p.bq->value.row(0);
  Matrix K(L + S, d), V(L + S, d);
  K.topRows(L) = p.pk->value;
  V.topRows(L) = p.pv->value;
  K.bottomRows(S) = (kv_in * p.wk->value).rowwise() + p.bk->value.row(0);
  V.bottomRows(S) = (kv_in * p.wv->value).rowwise() + p.bv->value.row(0);

  Matrix O(T, d);
  std::vector<Matrix> heads;
  if (cache) heads.reserve(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Eigen::Index c0 = Eigen::Index(h) * dh;
    Matrix scores = Q.middleCols(c0, dh) * K.middleCols(c0, dh).transpose() * scale;
    softmax_rows_masked(scores, std::size_t(L), causal);
    O.middleCols(c0, dh) = scores * V.middleCols(c0, dh);
    if (cache) heads.push_back(std::move(scores));
  }
  if (cache) {
    cache->q_in = q_in;
    cache->kv_in = kv_in;
    cache->Q = std::move(Q);
    cache->K = std::move(K);
    cache->V = std::move(V);
    cache->A = std::move(heads);
    cache->O = O;
  }
  return (O * p.wo->value).rowwise() + p.bo->value.row(0);
}

// Returns (d_q_in, d_kv_in); parameter gradients are accumulated in place.
std::pair<Matrix, Matrix> attn_bwd(const AttnTensors& p, ParameterStore& store,
                                   const AttnTensors& grads_unused, std::size_t n_heads,
                                   const Matrix& d_out, const AttnCache& cache,
                                   Tensor& gwq, Tensor& gbq, Tensor& gwk, Tensor& gbk,
                                   Tensor& gwv, Tensor& gbv, Tensor& gwo, Tensor& gbo,
                                   Tensor& gpk, Tensor& gpv) {
  (void)store;
  (void)grads_unused;
  const Eigen::Index d = cache.q_in.cols();
  const Eigen::Index dh = d / Eigen::Index(n_heads);
  const Eigen::Index L = p.pk->value.rows();
  const Eigen::Index S = cache.kv_in.rows();
  const double scale = 1.0 / std::sqrt(double(dh));

  gwo.grad += cache.O.transpose() * d_out;
  gbo.grad.row(0) += d_out.colwise().sum();
  Matrix dO = d_out * p.wo->value.transpose();

  Matrix dQ = Matrix::Zero(cache.Q.rows(), d);
  Matrix dK = Matrix::Zero(L + S, d);
  Matrix dV = Matrix::Zero(L + S, d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const Eigen::Index c0 = Eigen::Index(h) * dh;
    const Matrix& A = cache.A[h];
    Matrix dOh = dO.middleCols(c0, dh);
    Matrix dA = dOh * cache.V.middleCols(c0, dh).transpose();
    dV.middleCols(c0, dh) += A.transpose() * dOh;
    // softmax backward, row-wise; masked entries carry A == 0 and drop out.
    Matrix dS(A.rows(), A.cols());
    for (Eigen::Index r = 0; r < A.rows(); ++r) {
      const double dot = dA.row(r).dot(A.row(r));
      dS.row(r) = A.row(r).array() * (dA.row(r).array() - dot);
    }
    dQ.middleCols(c0, dh) += dS * cache.K.middleCols(c0, dh) * scale;
    dK.middleCols(c0, dh) += dS.transpose() * cache.Q.middleCols(c0, dh) * scale;
  }

  gpk.grad += dK.topRows(L);
  gpv.grad += dV.topRows(L);
  Matrix dK0 = dK.bottomRows(S);
  Matrix dV0 = dV.bottomRows(S);

  gwq.grad += cache.q_in.transpose() * dQ;
  gbq.grad.row(0) += dQ.colwise().sum();
  gwk.grad += cache.kv_in.transpose() * dK0;
  gbk.grad.row(0) += dK0.colwise().sum();
  gwv.grad += cache.kv_in.transpose() * dV0;
  gbv.grad.row(0) += dV0.colwise().sum();

  Matrix d_q_in = dQ * p.wq->value.transpose();
  Matrix d_kv_in = dK0 * p.wk->value.transpose() + dV0 * p.wv->value.transpose();
  return {std::move(d_q_in), std::move(d_kv_in)};
}

}  // namespace

#define SLOTGEN_ATTN_TENSORS(idx)                                                          \
  AttnTensors {                                                                            \
    &store_[(idx).q.w], &store_[(idx).q.b], &store_[(idx).k.w], &store_[(idx).k.b],        \
        &store_[(idx).v.w], &store_[(idx).v.b], &store_[(idx).o.w], &store_[(idx).o.b],    \
        &store_[(idx).prefix_k], &store_[(idx).prefix_v]                                   \
  }

Matrix Seq2SeqModel::encode(const std::vector<int>& input_ids, Rng* dropout_rng,
                            Tape* tape) const {
  Matrix x = embed(input_ids);
  x = dropout_fwd(x, cfg_.dropout, dropout_rng, tape ? &tape->enc_embed_drop : nullptr);
  if (tape) tape->enc_ids = input_ids;

  for (std::size_t l = 0; l < enc_layers_.size(); ++l) {
    const auto& li = enc_layers_[l];
    EncLayerCache* c = nullptr;
    if (tape) {
      tape->enc_layers.emplace_back();
      c = &tape->enc_layers.back();
      c->x_in = x;
    }
    Matrix a = norm_fwd(x, store_[li.ln1.gain], store_[li.ln1.bias], c ? &c->ln1 : nullptr);
    if (c) c->ln1_out = a;
    Matrix s = attn_fwd(SLOTGEN_ATTN_TENSORS(li.attn), cfg_.n_heads, a, a, /*causal=*/false,
                        c ? &c->attn : nullptr);
    s = dropout_fwd(s, cfg_.dropout, dropout_rng, c ? &c->attn_drop : nullptr);
    Matrix h = x + s;
    if (c) c->h_mid = h;
    Matrix f_in = norm_fwd(h, store_[li.ln2.gain], store_[li.ln2.bias], c ? &c->ln2 : nullptr);
    if (c) c->ln2_out = f_in;
    Matrix hid = linear_fwd(f_in, store_[li.ff1.w], store_[li.ff1.b]).cwiseMax(0.0);
    Matrix f = linear_fwd(hid, store_[li.ff2.w], store_[li.ff2.b]);
    if (c) {
      c->ffn.x = f_in;
      c->ffn.h = hid;
    }
    f = dropout_fwd(f, cfg_.dropout, dropout_rng, c ? &c->ffn_drop : nullptr);
    x = h + f;
  }
  if (tape) tape->enc_final_in = x;
  Matrix memory = norm_fwd(x, store_[enc_final_ln_.gain], store_[enc_final_ln_.bias],
                           tape ? &tape->enc_final_ln : nullptr);
  if (tape) tape->memory = memory;
  return memory;
}

Matrix Seq2SeqModel::decode_logits(const Matrix& memory, const std::vector<int>& dec_input_ids,
                                   Rng* dropout_rng, Tape* tape) const {
  Matrix x = embed(dec_input_ids);
  x = dropout_fwd(x, cfg_.dropout, dropout_rng, tape ? &tape->dec_embed_drop : nullptr);
  if (tape) tape->dec_ids = dec_input_ids;

  for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
    const auto& li = dec_layers_[l];
    DecLayerCache* c = nullptr;
    if (tape) {
      tape->dec_layers.emplace_back();
      c = &tape->dec_layers.back();
      c->x_in = x;
    }
    Matrix a = norm_fwd(x, store_[li.ln1.gain], store_[li.ln1.bias], c ? &c->ln1 : nullptr);
    if (c) c->ln1_out = a;
    Matrix s = attn_fwd(SLOTGEN_ATTN_TENSORS(li.self_attn), cfg_.n_heads, a, a, /*causal=*/true,
                        c ? &c->self_attn : nullptr);
    s = dropout_fwd(s, cfg_.dropout, dropout_rng, c ? &c->self_drop : nullptr);
    Matrix h1 = x + s;
    if (c) c->h1 = h1;

    Matrix q = norm_fwd(h1, store_[li.ln2.gain], store_[li.ln2.bias], c ? &c->ln2 : nullptr);
    if (c) c->ln2_out = q;
    Matrix cr = attn_fwd(SLOTGEN_ATTN_TENSORS(li.cross_attn), cfg_.n_heads, q, memory,
                         /*causal=*/false, c ? &c->cross_attn : nullptr);
    cr = dropout_fwd(cr, cfg_.dropout, dropout_rng, c ? &c->cross_drop : nullptr);
    Matrix h2 = h1 + cr;
    if (c) c->h2 = h2;

    Matrix f_in = norm_fwd(h2, store_[li.ln3.gain], store_[li.ln3.bias], c ? &c->ln3 : nullptr);
    if (c) c->ln3_out = f_in;
    Matrix hid = linear_fwd(f_in, store_[li.ff1.w], store_[li.ff1.b]).cwiseMax(0.0);
    Matrix f = linear_fwd(hid, store_[li.ff2.w], store_[li.ff2.b]);
    if (c) {
      c->ffn.x = f_in;
      c->ffn.h = hid;
    }
    f = dropout_fwd(f, cfg_.dropout, dropout_rng, c ? &c->ffn_drop : nullptr);
    x = h2 + f;
  }
  if (tape) tape->dec_final_in = x;
  Matrix y = norm_fwd(x, store_[dec_final_ln_.gain], store_[dec_final_ln_.bias],
                      tape ? &tape->dec_final_ln : nullptr);
  if (tape) tape->dec_final_out = y;
  return linear_fwd(y, store_[out_head_.w], store_[out_head_.b]);
}

void Seq2SeqModel::backward(Tape& tape, const Matrix& dlogits) {
  // Output head.
  store_[out_head_.w].grad += tape.dec_final_out.transpose() * dlogits;
  store_[out_head_.b].grad.row(0) += dlogits.colwise().sum();
  Matrix dx = dlogits * store_[out_head_.w].value.transpose();
  dx = norm_bwd(dx, tape.dec_final_ln, store_[dec_final_ln_.gain], store_[dec_final_ln_.gain],
                store_[dec_final_ln_.bias]);

  tape.d_memory = Matrix::Zero(tape.memory.rows(), tape.memory.cols());

  // Decoder layers, reverse order.
  for (std::size_t li = dec_layers_.size(); li-- > 0;) {
    const auto& idx = dec_layers_[li];
    DecLayerCache& c = tape.dec_layers[li];

    Matrix df = apply_drop_bwd(dx, c.ffn_drop);
    // FFN backward.
    store_[idx.ff2.w].grad += c.ffn.h.transpose() * df;
    store_[idx.ff2.b].grad.row(0) += df.colwise().sum();
    Matrix dhid = df * store_[idx.ff2.w].value.transpose();
    dhid = dhid.cwiseProduct((c.ffn.h.array() > 0.0).cast<double>().matrix());
    store_[idx.ff1.w].grad += c.ffn.x.transpose() * dhid;
    store_[idx.ff1.b].grad.row(0) += dhid.colwise().sum();
    Matrix df_in = dhid * store_[idx.ff1.w].value.transpose();
    Matrix dh2 = dx + norm_bwd(df_in, c.ln3, store_[idx.ln3.gain], store_[idx.ln3.gain],
                               store_[idx.ln3.bias]);

    Matrix dcr = apply_drop_bwd(dh2, c.cross_drop);
    auto ct = SLOTGEN_ATTN_TENSORS(idx.cross_attn);
    auto [dq_cross, dmem] =
        attn_bwd(ct, store_, ct, cfg_.n_heads, dcr, c.cross_attn, store_[idx.cross_attn.q.w],
                 store_[idx.cross_attn.q.b], store_[idx.cross_attn.k.w],
                 store_[idx.cross_attn.k.b], store_[idx.cross_attn.v.w],
                 store_[idx.cross_attn.v.b], store_[idx.cross_attn.o.w],
                 store_[idx.cross_attn.o.b], store_[idx.cross_attn.prefix_k],
                 store_[idx.cross_attn.prefix_v]);
    tape.d_memory += dmem;
    Matrix dh1 = dh2 + norm_bwd(dq_cross, c.ln2, store_[idx.ln2.gain], store_[idx.ln2.gain],
                                store_[idx.ln2.bias]);

    Matrix ds = apply_drop_bwd(dh1, c.self_drop);
    auto st = SLOTGEN_ATTN_TENSORS(idx.self_attn);
    auto [dq_self, dkv_self] =
        attn_bwd(st, store_, st, cfg_.n_heads, ds, c.self_attn, store_[idx.self_attn.q.w],
                 store_[idx.self_attn.q.b], store_[idx.self_attn.k.w],
                 store_[idx.self_attn.k.b], store_[idx.self_attn.v.w],
                 store_[idx.self_attn.v.b], store_[idx.self_attn.o.w],
                 store_[idx.self_attn.o.b], store_[idx.self_attn.prefix_k],
                 store_[idx.self_attn.prefix_v]);
    Matrix da = dq_self + dkv_self;
    dx = dh1 + norm_bwd(da, c.ln1, store_[idx.ln1.gain], store_[idx.ln1.gain],
                        store_[idx.ln1.bias]);
  }

  // Decoder embedding rows.
  Matrix dx_embed = apply_drop_bwd(dx, tape.dec_embed_drop);
  for (std::size_t t = 0; t < tape.dec_ids.size(); ++t)
    store_[embedding_].grad.row(tape.dec_ids[t]) += dx_embed.row(Eigen::Index(t));

  // Encoder, seeded by the accumulated memory gradient.
  Matrix dmem = norm_bwd(tape.d_memory, tape.enc_final_ln, store_[enc_final_ln_.gain],
                         store_[enc_final_ln_.gain], store_[enc_final_ln_.bias]);
  for (std::size_t li = enc_layers_.size(); li-- > 0;) {
    const auto& idx = enc_layers_[li];
    EncLayerCache& c = tape.enc_layers[li];

    Matrix df = apply_drop_bwd(dmem, c.ffn_drop);
    store_[idx.ff2.w].grad += c.ffn.h.transpose() * df;
    store_[idx.ff2.b].grad.row(0) += df.colwise().sum();
    Matrix dhid = df * store_[idx.ff2.w].value.transpose();
    dhid = dhid.cwiseProduct((c.ffn.h.array() > 0.0).cast<double>().matrix());
    store_[idx.ff1.w].grad += c.ffn.x.transpose() * dhid;
    store_[idx.ff1.b].grad.row(0) += dhid.colwise().sum();
    Matrix df_in = dhid * store_[idx.ff1.w].value.transpose();
    Matrix dh = dmem + norm_bwd(df_in, c.ln2, store_[idx.ln2.gain], store_[idx.ln2.gain],
                                store_[idx.ln2.bias]);

    Matrix ds = apply_drop_bwd(dh, c.attn_drop);
    auto at = SLOTGEN_ATTN_TENSORS(idx.attn);
    auto [dq, dkv] = attn_bwd(at, store_, at, cfg_.n_heads, ds, c.attn, store_[idx.attn.q.w],
                              store_[idx.attn.q.b], store_[idx.attn.k.w], store_[idx.attn.k.b],
                              store_[idx.attn.v.w], store_[idx.attn.v.b], store_[idx.attn.o.w],
                              store_[idx.attn.o.b], store_[idx.attn.prefix_k],
                              store_[idx.attn.prefix_v]);
    Matrix da = dq + dkv;
    dmem = dh + norm_bwd(da, c.ln1, store_[idx.ln1.gain], store_[idx.ln1.gain],
                         store_[idx.ln1.bias]);
  }
  Matrix dx_enc = apply_drop_bwd(dmem, tape.enc_embed_drop);
  for (std::size_t t = 0; t < tape.enc_ids.size(); ++t)
    store_[embedding_].grad.row(tape.enc_ids[t]) += dx_enc.row(Eigen::Index(t));
}

// ---------------------------------------------------------------------------
// Public operations.

void Seq2SeqModel::check_ids(const std::vector<int>& ids, std::size_t max_len,
                             const char* what) const {
  if (ids.size() > max_len)
    throw ValidationError(std::string(what) + " length " + std::to_string(ids.size()) +
                          " exceeds maximum " + std::to_string(max_len));
  for (int id : ids)
    if (id < 0 || std::size_t(id) >= vocab_.size())
      throw ValidationError(std::string(what) + ": token id out of range: " +
                            std::to_string(id));
}

namespace {

// Row-wise log-softmax value at one column, numerically stable.
double log_softmax_at(const Eigen::RowVectorXd& logits, int idx) {
  const double mx = logits.maxCoeff();
  const double lse = std::log((logits.array() - mx).exp().sum()) + mx;
  return logits(idx) - lse;
}

}  // namespace

ScoreResult Seq2SeqModel::score_target(const std::vector<int>& input_ids,
                                       const std::vector<int>& target_ids) const {
  check_ids(input_ids, cfg_.max_input_len, "input");
  check_ids(target_ids, cfg_.max_output_len, "target");

  std::vector<int> dec_in;
  dec_in.reserve(target_ids.size() + 1);
  dec_in.push_back(Vocab::kBos);
  dec_in.insert(dec_in.end(), target_ids.begin(), target_ids.end());
  std::vector<int> scored = target_ids;
  scored.push_back(Vocab::kEos);

  Matrix memory = encode(input_ids, nullptr, nullptr);
  Matrix logits = decode_logits(memory, dec_in, nullptr, nullptr);

  ScoreResult res;
  res.token_log_probs.reserve(scored.size());
  for (std::size_t t = 0; t < scored.size(); ++t) {
    const double lp = log_softmax_at(logits.row(Eigen::Index(t)), scored[t]);
    res.token_log_probs.push_back(lp);
    res.total_log_prob += lp;
  }
  return res;
}

double Seq2SeqModel::eval_loss(const std::vector<int>& input_ids,
                               const std::vector<int>& target_ids) const {
  ScoreResult s = score_target(input_ids, target_ids);
  return -s.total_log_prob / double(s.token_log_probs.size());
}

double Seq2SeqModel::train_step_accumulate(const std::vector<int>& input_ids,
                                           const std::vector<int>& target_ids, Rng* dropout_rng,
                                           double loss_scale) {
  check_ids(input_ids, cfg_.max_input_len, "input");
  check_ids(target_ids, cfg_.max_output_len, "target");

  std::vector<int> dec_in;
  dec_in.reserve(target_ids.size() + 1);
  dec_in.push_back(Vocab::kBos);
  dec_in.insert(dec_in.end(), target_ids.begin(), target_ids.end());
  std::vector<int> scored = target_ids;
  scored.push_back(Vocab::kEos);

  Tape tape;
  Matrix memory = encode(input_ids, dropout_rng, &tape);
  Matrix logits = decode_logits(memory, dec_in, dropout_rng, &tape);

  const double inv_T = 1.0 / double(scored.size());
  double loss = 0.0;
  Matrix dlogits(logits.rows(), logits.cols());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double mx = logits.row(t).maxCoeff();
    Eigen::RowVectorXd p = (logits.row(t).array() - mx).exp();
    p /= p.sum();
    loss -= std::log(std::max(p(scored[std::size_t(t)]), 1e-300));
    dlogits.row(t) = p * (loss_scale * inv_T);
    dlogits(t, scored[std::size_t(t)]) -= loss_scale * inv_T;
  }
  loss *= inv_T;
  backward(tape, dlogits);
  return loss;
}

GenerateResult Seq2SeqModel::generate_greedy(const std::vector<int>& input_ids,
                                             std::size_t max_len) const {
  check_ids(input_ids, cfg_.max_input_len, "input");
  max_len = std::min(max_len, cfg_.max_output_len);

  Matrix memory = encode(input_ids, nullptr, nullptr);
  GenerateResult res;
  std::vector<int> dec_in{Vocab::kBos};
  for (std::size_t step = 0; step < max_len; ++step) {
    Matrix logits = decode_logits(memory, dec_in, nullptr, nullptr);
    Eigen::RowVectorXd row = logits.row(logits.rows() - 1);
    const double mx = row.maxCoeff();
    Eigen::RowVectorXd p = (row.array() - mx).exp();
    p /= p.sum();
    Eigen::Index best;
    p.maxCoeff(&best);
    if (int(best) == Vocab::kEos) break;
    res.token_ids.push_back(int(best));
    res.token_probs.push_back(p(best));
    dec_in.push_back(int(best));
  }
  return res;
}

Eigen::VectorXd Seq2SeqModel::next_token_distribution(const std::vector<int>& input_ids,
                                                      const std::vector<int>& emitted_prefix)
    const {
  check_ids(input_ids, cfg_.max_input_len, "input");
  check_ids(emitted_prefix, cfg_.max_output_len, "prefix");
  Matrix memory = encode(input_ids, nullptr, nullptr);
  std::vector<int> dec_in{Vocab::kBos};
  dec_in.insert(dec_in.end(), emitted_prefix.begin(), emitted_prefix.end());
  Matrix logits = decode_logits(memory, dec_in, nullptr, nullptr);
  Eigen::RowVectorXd row = logits.row(logits.rows() - 1);
  const double mx = row.maxCoeff();
  Eigen::VectorXd p = (row.transpose().array() - mx).exp();
  p /= p.sum();
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON header plus raw little-endian doubles, bit-exact.

namespace {
constexpr char kCkptMagic[8] = {'S', 'G', 'C', 'K', 'P', 'T', '0', '1'};

json config_to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"n_encoder_layers", c.n_encoder_layers},
              {"n_decoder_layers", c.n_decoder_layers},
              {"ff_width", c.ff_width},
              {"dropout", c.dropout},
              {"max_input_len", c.max_input_len},
              {"max_output_len", c.max_output_len},
              {"prefix_length", c.prefix_length},
              {"seed", c.seed}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_encoder_layers = j.at("n_encoder_layers").get<std::size_t>();
  c.n_decoder_layers = j.at("n_decoder_layers").get<std::size_t>();
  c.ff_width = j.at("ff_width").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.max_input_len = j.at("max_input_len").get<std::size_t>();
  c.max_output_len = j.at("max_output_len").get<std::size_t>();
  c.prefix_length = j.at("prefix_length").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}
}  // namespace

void Seq2SeqModel::save_checkpoint(const std::string& path) const {
  json header;
  header["config"] = config_to_json(cfg_);
  header["vocab_words"] = vocab_.words();
  json tensors = json::array();
  for (const auto& t : store_.tensors())
    tensors.push_back(json{{"name", t.name},
                           {"rows", t.value.rows()},
                           {"cols", t.value.cols()},
                           {"prefix_group", t.prefix_group}});
  header["tensors"] = tensors;
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint: " + path);
  out.write(kCkptMagic, sizeof(kCkptMagic));
  const std::uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), std::streamsize(htext.size()));
  for (const auto& t : store_.tensors())
    out.write(reinterpret_cast<const char*>(t.value.data()),
              std::streamsize(sizeof(double) * std::size_t(t.value.size())));
  if (!out) throw ValidationError("failed writing checkpoint: " + path);
}

Seq2SeqModel Seq2SeqModel::load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
    throw ValidationError("not a checkpoint file: " + path);
  std::uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), std::streamsize(hlen));
  json header;
  try {
    header = json::parse(htext);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Seq2SeqModel model(config_from_json(header.at("config")),
                     Vocab(header.at("vocab_words").get<std::vector<std::string>>()));
  const auto& tensors = header.at("tensors");
  if (tensors.size() != model.store_.size())
    throw ValidationError("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < model.store_.size(); ++i) {
    Tensor& t = model.store_[i];
    const auto& meta = tensors[i];
    if (meta.at("name").get<std::string>() != t.name ||
        meta.at("rows").get<Eigen::Index>() != t.value.rows() ||
        meta.at("cols").get<Eigen::Index>() != t.value.cols())
      throw ValidationError("checkpoint tensor mismatch at " + t.name);
    in.read(reinterpret_cast<char*>(t.value.data()),
            std::streamsize(sizeof(double) * std::size_t(t.value.size())));
  }
  if (!in) throw ValidationError("truncated checkpoint: " + path);
  return model;
}

// ---------------------------------------------------------------------------

double finite_difference_check(Seq2SeqModel& model, const std::vector<int>& input_ids,
                               const std::vector<int>& target_ids, double epsilon,
                               std::size_t sample_size, std::uint64_t seed) {
  if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");

  auto& store = model.store();
  store.zero_grads();
  model.train_step_accumulate(input_ids, target_ids, /*dropout_rng=*/nullptr, /*scale=*/1.0);

  // Flat index space over trainable scalars.
  std::vector<std::pair<std::size_t, std::size_t>> slots;  // (tensor, flat offset)
  for (std::size_t ti = 0; ti < store.size(); ++ti) {
    if (!store[ti].trainable) continue;
    for (std::size_t k = 0; k < std::size_t(store[ti].value.size()); ++k)
      slots.emplace_back(ti, k);
  }
  if (slots.empty()) throw ValidationError("no trainable parameters to check");

  Rng rng(derive_seed(seed, "fd-check"));
  std::uniform_int_distribution<std::size_t> pick(0, slots.size() - 1);

  double max_rel = 0.0;
  for (std::size_t s = 0; s < sample_size; ++s) {
    auto [ti, k] = slots[pick(rng)];
    double& theta = store[ti].value.data()[k];
    const double orig = theta;
    theta = orig + epsilon;
    const double lp = model.eval_loss(input_ids, target_ids);
    theta = orig - epsilon;
    const double lm = model.eval_loss(input_ids, target_ids);
    theta = orig;
    const double g_fd = (lp - lm) / (2.0 * epsilon);
    const double g_an = store[ti].grad.data()[k];
    const double rel =
        std::abs(g_an - g_fd) / std::max({std::abs(g_an), std::abs(g_fd), 1e-12});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace slotgen
