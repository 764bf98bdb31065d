#include "iclmark/seq2seq.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "iclmark/digest.hpp"
#include "iclmark/errors.hpp"
#include "iclmark/rng.hpp"

namespace iclmark::model {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kRmsEps = 1e-6;
constexpr double kNegInf = -1e30;

struct AttnWeights {
  MatrixXd wq, wk, wv, wo;  // each d x d
};

struct FfWeights {
  MatrixXd w1;  // d x ff
  MatrixXd w2;  // ff x d
};

struct EncLayer {
  VectorXd ln1, ln2;
  AttnWeights attn;
  FfWeights ff;
};

struct DecLayer {
  VectorXd ln1, ln2, ln3;
  AttnWeights self_attn, cross_attn;
  FfWeights ff;
};

struct Weights {
  MatrixXd emb;   // vocab x d
  MatrixXd wout;  // vocab x d, untied head over the base vocabulary
  std::vector<EncLayer> enc;
  std::vector<DecLayer> dec;
  VectorXd enc_final, dec_final;
};

// Fixed traversal order shared by init, digest and (de)serialization.
template <typename W, typename Fn>
void for_each_param(W& w, Fn&& fn) {
  fn(w.emb);
  for (auto& layer : w.enc) {
    fn(layer.ln1);
    fn(layer.attn.wq);
    fn(layer.attn.wk);
    fn(layer.attn.wv);
    fn(layer.attn.wo);
    fn(layer.ln2);
    fn(layer.ff.w1);
    fn(layer.ff.w2);
  }
  fn(w.enc_final);
  for (auto& layer : w.dec) {
    fn(layer.ln1);
    fn(layer.self_attn.wq);
    fn(layer.self_attn.wk);
    fn(layer.self_attn.wv);
    fn(layer.self_attn.wo);
    fn(layer.ln2);
    fn(layer.cross_attn.wq);
    fn(layer.cross_attn.wk);
    fn(layer.cross_attn.wv);
    fn(layer.cross_attn.wo);
    fn(layer.ln3);
    fn(layer.ff.w1);
    fn(layer.ff.w2);
  }
  fn(w.dec_final);
  fn(w.wout);
}

// --- forward/backward primitives -------------------------------------------

struct RmsCache {
  MatrixXd x;
  VectorXd r;  // per-row rms
};

MatrixXd rmsnorm_fwd(const MatrixXd& x, const VectorXd& g, RmsCache& cache) {
  const auto d = static_cast<double>(x.cols());
  cache.x = x;
  cache.r = ((x.rowwise().squaredNorm() / d).array() + kRmsEps).sqrt().matrix();
  MatrixXd y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    y.row(i) = (x.row(i).array() * g.transpose().array()) / cache.r(i);
  }
  return y;
}

MatrixXd rmsnorm_bwd(const MatrixXd& dy, const VectorXd& g, const RmsCache& cache) {
  const auto d = static_cast<double>(cache.x.cols());
  MatrixXd dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double r = cache.r(i);
    const Eigen::RowVectorXd h = dy.row(i).array() * g.transpose().array();
    const double hx = h.dot(cache.x.row(i));
    dx.row(i) = h / r - cache.x.row(i) * (hx / (d * r * r * r));
  }
  return dx;
}

struct AttnCache {
  MatrixXd q, k, v;           // L x d
  std::vector<MatrixXd> p;    // per head, Lq x Lkv
};

MatrixXd attn_fwd(const MatrixXd& xq_n, const MatrixXd& xkv_n,
                  const AttnWeights& w, bool causal, int heads,
                  AttnCache& cache) {
  const Eigen::Index d = xq_n.cols();
  const Eigen::Index dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  cache.q = xq_n * w.wq;
  cache.k = xkv_n * w.wk;
  cache.v = xkv_n * w.wv;
  cache.p.assign(static_cast<std::size_t>(heads), MatrixXd());

  MatrixXd concat(xq_n.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const auto qh = cache.q.middleCols(h * dk, dk);
    const auto kh = cache.k.middleCols(h * dk, dk);
    const auto vh = cache.v.middleCols(h * dk, dk);
    MatrixXd s = qh * kh.transpose() * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < s.cols(); ++j) s(i, j) = kNegInf;
      }
    }
    MatrixXd& p = cache.p[static_cast<std::size_t>(h)];
    p.resize(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      const double m = s.row(i).maxCoeff();
      Eigen::RowVectorXd e = (s.row(i).array() - m).exp();
      p.row(i) = e / e.sum();
    }
    concat.middleCols(h * dk, dk) = p * vh;
  }
  return concat * w.wo;
}

// Returns (d xq_n, d xkv_n). Self-attention callers add the two.
std::pair<MatrixXd, MatrixXd> attn_bwd(const MatrixXd& dout,
                                       const AttnWeights& w, int heads,
                                       const AttnCache& cache) {
  const Eigen::Index d = dout.cols();
  const Eigen::Index dk = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  const MatrixXd dconcat = dout * w.wo.transpose();
  MatrixXd dq(cache.q.rows(), d), dkm(cache.k.rows(), d), dv(cache.v.rows(), d);
  for (int h = 0; h < heads; ++h) {
    const auto qh = cache.q.middleCols(h * dk, dk);
    const auto kh = cache.k.middleCols(h * dk, dk);
    const auto vh = cache.v.middleCols(h * dk, dk);
    const MatrixXd& p = cache.p[static_cast<std::size_t>(h)];
    const auto doh = dconcat.middleCols(h * dk, dk);

    const MatrixXd dp = doh * vh.transpose();
    dv.middleCols(h * dk, dk) = p.transpose() * doh;

    MatrixXd ds(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double dot = dp.row(i).dot(p.row(i));
      ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
    }
    dq.middleCols(h * dk, dk) = ds * kh * scale;
    dkm.middleCols(h * dk, dk) = ds.transpose() * qh * scale;
  }
  MatrixXd dxq = dq * w.wq.transpose();
  MatrixXd dxkv = dkm * w.wk.transpose() + dv * w.wv.transpose();
  return {std::move(dxq), std::move(dxkv)};
}

struct FfCache {
  MatrixXd h1;  // pre-activation, L x ff
};

MatrixXd ff_fwd(const MatrixXd& x_n, const FfWeights& w, FfCache& cache) {
  cache.h1 = x_n * w.w1;
  return cache.h1.cwiseMax(0.0) * w.w2;
}

MatrixXd ff_bwd(const MatrixXd& dout, const FfWeights& w, const FfCache& cache) {
  MatrixXd dh1 = dout * w.w2.transpose();
  dh1 = (cache.h1.array() > 0.0).select(dh1, MatrixXd::Zero(dh1.rows(), dh1.cols()));
  return dh1 * w.w1.transpose();
}

struct EncLayerCache {
  RmsCache rms1, rms2;
  AttnCache attn;
  FfCache ff;
};

struct EncCache {
  std::vector<EncLayerCache> layers;
  RmsCache final_rms;
  MatrixXd memory;
};

struct DecLayerCache {
  RmsCache rms1, rms2, rms3;
  AttnCache self_a, cross;
  FfCache ff;
};

struct DecCache {
  std::vector<DecLayerCache> layers;
  RmsCache final_rms;
  MatrixXd hidden;
};

}  // namespace

void Seq2SeqConfig::validate() const {
  if (vocab < 1 || d_model < 1 || heads < 1 || ff < 1 || enc_layers < 1 ||
      dec_layers < 1 || context_budget < 1 || max_positions < 1) {
    throw ConfigError("seq2seq config fields must be positive");
  }
  if (d_model % heads != 0) {
    throw ConfigError("d_model must be divisible by the head count");
  }
  if (max_positions < context_budget) {
    throw ConfigError("max_positions must cover the context budget");
  }
}

struct Seq2SeqBackend::Impl {
  Seq2SeqConfig config;
  std::uint64_t weight_seed = 0;
  std::unique_ptr<Tokenizer> tok;
  Weights w;
  MatrixXd pos;  // max_positions x d, sinusoidal
  std::string digest;

  void build_positions() {
    const int d = config.d_model;
    pos.resize(config.max_positions, d);
    for (int p = 0; p < config.max_positions; ++p) {
      for (int i = 0; i < d; i += 2) {
        const double angle =
            p / std::pow(10000.0, static_cast<double>(i) / d);
        pos(p, i) = std::sin(angle);
        if (i + 1 < d) pos(p, i + 1) = std::cos(angle);
      }
    }
  }

  void init_weights() {
    const int d = config.d_model;
    const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
    const double fstd = 1.0 / std::sqrt(static_cast<double>(config.ff));
    std::uint64_t idx = 0;
    auto fill = [&](MatrixXd& m, Eigen::Index rows, Eigen::Index cols, double s) {
      Rng rng(mix_seed(weight_seed, idx++));
      m.resize(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal() * s;
      }
    };
    auto gain = [&](VectorXd& v) { v = VectorXd::Ones(d); };

    fill(w.emb, config.vocab, d, config.emb_init_std);
    w.enc.resize(static_cast<std::size_t>(config.enc_layers));
    for (auto& layer : w.enc) {
      gain(layer.ln1);
      fill(layer.attn.wq, d, d, wstd);
      fill(layer.attn.wk, d, d, wstd);
      fill(layer.attn.wv, d, d, wstd);
      fill(layer.attn.wo, d, d, wstd);
      gain(layer.ln2);
      fill(layer.ff.w1, d, config.ff, wstd);
      fill(layer.ff.w2, config.ff, d, fstd);
    }
    gain(w.enc_final);
    w.dec.resize(static_cast<std::size_t>(config.dec_layers));
    for (auto& layer : w.dec) {
      gain(layer.ln1);
      fill(layer.self_attn.wq, d, d, wstd);
      fill(layer.self_attn.wk, d, d, wstd);
      fill(layer.self_attn.wv, d, d, wstd);
      fill(layer.self_attn.wo, d, d, wstd);
      gain(layer.ln2);
      fill(layer.cross_attn.wq, d, d, wstd);
      fill(layer.cross_attn.wk, d, d, wstd);
      fill(layer.cross_attn.wv, d, d, wstd);
      fill(layer.cross_attn.wo, d, d, wstd);
      gain(layer.ln3);
      fill(layer.ff.w1, d, config.ff, wstd);
      fill(layer.ff.w2, config.ff, d, fstd);
    }
    gain(w.dec_final);
    fill(w.wout, config.vocab, d, wstd);
  }

  std::string hash_params() const {
    Sha256 h;
    h.update(config.model_id);
    for_each_param(w, [&](const auto& m) {
      h.update(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    });
    return h.hex();
  }

  // Encoder input embeddings for a prompt; records where each bank row
  // lands in the sequence so gradients can be scattered back.
  MatrixXd embed_prompt(const SoftTokenBank& bank,
                        const markup::RenderedPrompt& prompt,
                        std::vector<std::pair<int, int>>* soft_slots) const {
    const auto len = static_cast<Eigen::Index>(prompt.elements.size());
    MatrixXd x(len, config.d_model);
    for (Eigen::Index i = 0; i < len; ++i) {
      const markup::Element& el = prompt.elements[static_cast<std::size_t>(i)];
      if (const auto* base = std::get_if<markup::BaseToken>(&el)) {
        if (base->id < 0 || base->id >= config.vocab) {
          throw TokenizerError("token id outside vocabulary: " +
                               std::to_string(base->id));
        }
        x.row(i) = w.emb.row(base->id);
      } else {
        const auto& soft = std::get<markup::SoftToken>(el);
        const int row = bank.row_of(soft.tag, soft.pos);
        x.row(i) = bank.rows.row(row);
        if (soft_slots != nullptr) {
          soft_slots->emplace_back(row, static_cast<int>(i));
        }
      }
    }
    x += pos.topRows(len);
    return x;
  }

  void check_budget(const markup::RenderedPrompt& prompt) const {
    if (static_cast<int>(prompt.elements.size()) > config.context_budget) {
      throw BudgetError("prompt length " + std::to_string(prompt.elements.size()) +
                        " exceeds context budget " +
                        std::to_string(config.context_budget));
    }
    if (prompt.elements.empty()) throw InputError("prompt is empty");
  }

  void check_bank(const SoftTokenBank& bank) const {
    if (bank.dim() != config.d_model) {
      throw ConfigError("bank dimension " + std::to_string(bank.dim()) +
                        " does not match model dimension " +
                        std::to_string(config.d_model));
    }
  }

  EncCache encode(const MatrixXd& x0) const {
    EncCache cache;
    cache.layers.resize(w.enc.size());
    MatrixXd x = x0;
    for (std::size_t l = 0; l < w.enc.size(); ++l) {
      EncLayerCache& lc = cache.layers[l];
      const EncLayer& lw = w.enc[l];
      const MatrixXd xn = rmsnorm_fwd(x, lw.ln1, lc.rms1);
      x += attn_fwd(xn, xn, lw.attn, /*causal=*/false, config.heads, lc.attn);
      const MatrixXd xn2 = rmsnorm_fwd(x, lw.ln2, lc.rms2);
      x += ff_fwd(xn2, lw.ff, lc.ff);
    }
    cache.memory = rmsnorm_fwd(x, w.enc_final, cache.final_rms);
    return cache;
  }

  MatrixXd encode_bwd(const MatrixXd& dmemory, const EncCache& cache) const {
    MatrixXd dx = rmsnorm_bwd(dmemory, w.enc_final, cache.final_rms);
    for (std::size_t l = w.enc.size(); l-- > 0;) {
      const EncLayerCache& lc = cache.layers[l];
      const EncLayer& lw = w.enc[l];
      const MatrixXd dn2 = ff_bwd(dx, lw.ff, lc.ff);
      dx += rmsnorm_bwd(dn2, lw.ln2, lc.rms2);
      auto [dq, dkv] = attn_bwd(dx, lw.attn, config.heads, lc.attn);
      dx += rmsnorm_bwd(dq + dkv, lw.ln1, lc.rms1);
    }
    return dx;
  }

  DecCache decode_fwd(const MatrixXd& y0, const MatrixXd& memory) const {
    DecCache cache;
    cache.layers.resize(w.dec.size());
    MatrixXd y = y0;
    for (std::size_t l = 0; l < w.dec.size(); ++l) {
      DecLayerCache& lc = cache.layers[l];
      const DecLayer& lw = w.dec[l];
      const MatrixXd yn = rmsnorm_fwd(y, lw.ln1, lc.rms1);
      y += attn_fwd(yn, yn, lw.self_attn, /*causal=*/true, config.heads, lc.self_a);
      const MatrixXd yn2 = rmsnorm_fwd(y, lw.ln2, lc.rms2);
      y += attn_fwd(yn2, memory, lw.cross_attn, /*causal=*/false, config.heads,
                    lc.cross);
      const MatrixXd yn3 = rmsnorm_fwd(y, lw.ln3, lc.rms3);
      y += ff_fwd(yn3, lw.ff, lc.ff);
    }
    cache.hidden = rmsnorm_fwd(y, w.dec_final, cache.final_rms);
    return cache;
  }

  // Backward through the decoder; returns the gradient on the encoder
  // memory (decoder input embeddings are all frozen base tokens).
  MatrixXd decode_bwd(const MatrixXd& dhidden, const DecCache& cache,
                      Eigen::Index memory_rows) const {
    MatrixXd dmem = MatrixXd::Zero(memory_rows, config.d_model);
    MatrixXd dy = rmsnorm_bwd(dhidden, w.dec_final, cache.final_rms);
    for (std::size_t l = w.dec.size(); l-- > 0;) {
      const DecLayerCache& lc = cache.layers[l];
      const DecLayer& lw = w.dec[l];
      const MatrixXd dn3 = ff_bwd(dy, lw.ff, lc.ff);
      dy += rmsnorm_bwd(dn3, lw.ln3, lc.rms3);
      auto [dq_cross, dm] = attn_bwd(dy, lw.cross_attn, config.heads, lc.cross);
      dmem += dm;
      dy += rmsnorm_bwd(dq_cross, lw.ln2, lc.rms2);
      auto [dq_self, dkv_self] = attn_bwd(dy, lw.self_attn, config.heads, lc.self_a);
      dy += rmsnorm_bwd(dq_self + dkv_self, lw.ln1, lc.rms1);
    }
    return dmem;
  }

  MatrixXd embed_decoder_input(std::span<const int> ids) const {
    if (static_cast<int>(ids.size()) > config.max_positions) {
      throw BudgetError("decoder sequence exceeds position table");
    }
    MatrixXd y(static_cast<Eigen::Index>(ids.size()), config.d_model);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= config.vocab) {
        throw TokenizerError("decoder token id outside vocabulary: " +
                             std::to_string(ids[i]));
      }
      y.row(static_cast<Eigen::Index>(i)) = w.emb.row(ids[i]);
    }
    y += pos.topRows(static_cast<Eigen::Index>(ids.size()));
    return y;
  }

  // Logits for every decoder position given already-encoded memory.
  MatrixXd decoder_logits(std::span<const int> dec_ids, const MatrixXd& memory,
                          DecCache* cache_out) const {
    const MatrixXd y0 = embed_decoder_input(dec_ids);
    DecCache cache = decode_fwd(y0, memory);
    MatrixXd logits = cache.hidden * w.wout.transpose();
    if (cache_out != nullptr) *cache_out = std::move(cache);
    return logits;
  }
};

Seq2SeqBackend::Seq2SeqBackend(const Seq2SeqConfig& config,
                               std::uint64_t weight_seed,
                               std::unique_ptr<Tokenizer> tokenizer)
    : impl_(std::make_unique<Impl>()) {
  config.validate();
  impl_->config = config;
  impl_->weight_seed = weight_seed;
  impl_->tok = tokenizer != nullptr
                   ? std::move(tokenizer)
                   : std::make_unique<ByteTokenizer>(config.vocab);
  if (impl_->tok->vocab_size() > config.vocab) {
    throw ConfigError("tokenizer vocabulary exceeds model vocabulary");
  }
  impl_->build_positions();
  impl_->init_weights();
  impl_->digest = impl_->hash_params();
}

Seq2SeqBackend::Seq2SeqBackend(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Seq2SeqBackend::~Seq2SeqBackend() = default;
Seq2SeqBackend::Seq2SeqBackend(Seq2SeqBackend&&) noexcept = default;
Seq2SeqBackend& Seq2SeqBackend::operator=(Seq2SeqBackend&&) noexcept = default;

const Seq2SeqConfig& Seq2SeqBackend::config() const { return impl_->config; }
const Tokenizer& Seq2SeqBackend::tokenizer() const { return *impl_->tok; }
int Seq2SeqBackend::context_budget() const { return impl_->config.context_budget; }
int Seq2SeqBackend::embedding_dim() const { return impl_->config.d_model; }
std::string Seq2SeqBackend::model_id() const { return impl_->config.model_id; }
const std::string& Seq2SeqBackend::base_param_digest() const { return impl_->digest; }
std::string Seq2SeqBackend::recompute_digest() const { return impl_->hash_params(); }
double Seq2SeqBackend::embedding_init_std() const {
  return impl_->config.emb_init_std;
}

Eigen::VectorXd Seq2SeqBackend::token_embedding(int token_id) const {
  if (token_id < 0 || token_id >= impl_->config.vocab) {
    throw TokenizerError("token id outside vocabulary: " + std::to_string(token_id));
  }
  return impl_->w.emb.row(token_id).transpose();
}

ForwardResult Seq2SeqBackend::forward_loss(const SoftTokenBank& bank,
                                           const markup::RenderedPrompt& prompt,
                                           std::span<const int> target_ids) const {
  impl_->check_budget(prompt);
  impl_->check_bank(bank);
  if (target_ids.empty()) throw InputError("target sequence is empty");

  std::vector<std::pair<int, int>> soft_slots;
  const MatrixXd x0 = impl_->embed_prompt(bank, prompt, &soft_slots);
  const EncCache enc = impl_->encode(x0);

  // Teacher forcing: decoder sees pad followed by the target minus its
  // last token.
  std::vector<int> dec_ids(target_ids.size());
  dec_ids[0] = impl_->tok->pad_id();
  for (std::size_t i = 1; i < target_ids.size(); ++i) dec_ids[i] = target_ids[i - 1];

  DecCache dec;
  const MatrixXd logits = impl_->decoder_logits(dec_ids, enc.memory, &dec);

  const auto n = static_cast<Eigen::Index>(target_ids.size());
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  MatrixXd dlogits(n, impl_->config.vocab);
  for (Eigen::Index t = 0; t < n; ++t) {
    const int gold = target_ids[static_cast<std::size_t>(t)];
    if (gold < 0 || gold >= impl_->config.vocab) {
      throw TokenizerError("target token id outside vocabulary");
    }
    const double m = logits.row(t).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(t).array() - m).exp();
    const double z = e.sum();
    loss += -(logits(t, gold) - m - std::log(z)) * inv_n;
    dlogits.row(t) = e / z * inv_n;
    dlogits(t, gold) -= inv_n;
  }

  const MatrixXd dhidden = dlogits * impl_->w.wout;
  const MatrixXd dmemory = impl_->decode_bwd(dhidden, dec, enc.memory.rows());
  const MatrixXd dx0 = impl_->encode_bwd(dmemory, enc);

  ForwardResult result;
  result.loss = loss;
  result.grads = MatrixXd::Zero(bank.rows.rows(), bank.rows.cols());
  for (const auto& [bank_row, seq_pos] : soft_slots) {
    result.grads.row(bank_row) += dx0.row(seq_pos);
  }
  return result;
}

std::string Seq2SeqBackend::greedy_decode(const SoftTokenBank& bank,
                                          const markup::RenderedPrompt& prompt,
                                          int max_len) const {
  impl_->check_budget(prompt);
  impl_->check_bank(bank);
  if (max_len < 1) throw InputError("max_len must be >= 1");

  const MatrixXd x0 = impl_->embed_prompt(bank, prompt, nullptr);
  const EncCache enc = impl_->encode(x0);

  std::vector<int> dec_ids{impl_->tok->pad_id()};
  std::vector<int> generated;
  for (int step = 0; step < max_len; ++step) {
    const MatrixXd logits = impl_->decoder_logits(dec_ids, enc.memory, nullptr);
    const Eigen::Index last = logits.rows() - 1;
    // argmax with lowest-id tie break
    int best = 0;
    double best_val = logits(last, 0);
    for (int v = 1; v < impl_->config.vocab; ++v) {
      if (logits(last, v) > best_val) {
        best_val = logits(last, v);
        best = v;
      }
    }
    if (best == impl_->tok->eos_id()) break;
    generated.push_back(best);
    dec_ids.push_back(best);
  }
  return impl_->tok->decode(generated);
}

OptionScore Seq2SeqBackend::score_options(const SoftTokenBank& bank,
                                          const markup::RenderedPrompt& prompt,
                                          std::span<const char> letters) const {
  impl_->check_budget(prompt);
  impl_->check_bank(bank);
  if (letters.empty()) throw InputError("score_options needs at least one letter");

  std::vector<int> letter_ids;
  letter_ids.reserve(letters.size());
  for (char letter : letters) {
    const std::vector<int> ids = impl_->tok->encode(std::string(1, letter));
    if (ids.size() != 1) {
      throw TokenizerError(std::string("option letter '") + letter +
                           "' does not tokenize to a single token");
    }
    letter_ids.push_back(ids[0]);
  }

  const MatrixXd x0 = impl_->embed_prompt(bank, prompt, nullptr);
  const EncCache enc = impl_->encode(x0);
  const std::vector<int> dec_ids{impl_->tok->pad_id()};
  const MatrixXd logits = impl_->decoder_logits(dec_ids, enc.memory, nullptr);

  double m = -std::numeric_limits<double>::infinity();
  for (int id : letter_ids) m = std::max(m, logits(0, id));
  double z = 0.0;
  std::vector<double> exps(letter_ids.size());
  for (std::size_t i = 0; i < letter_ids.size(); ++i) {
    exps[i] = std::exp(logits(0, letter_ids[i]) - m);
    z += exps[i];
  }

  OptionScore score;
  for (std::size_t i = 0; i < letters.size(); ++i) {
    score.per_letter[letters[i]] = exps[i] / z;
  }
  return score;
}

// --- weights file -----------------------------------------------------------

namespace {
constexpr char kModelMagic[8] = {'I', 'C', 'L', 'M', 'K', 'M', 'D', 'L'};
constexpr std::uint32_t kModelVersion = 1;
}  // namespace

void Seq2SeqBackend::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model file: " + path.string());

  nlohmann::json header;
  const Seq2SeqConfig& c = impl_->config;
  header["vocab"] = c.vocab;
  header["d_model"] = c.d_model;
  header["heads"] = c.heads;
  header["ff"] = c.ff;
  header["enc_layers"] = c.enc_layers;
  header["dec_layers"] = c.dec_layers;
  header["context_budget"] = c.context_budget;
  header["max_positions"] = c.max_positions;
  header["emb_init_std"] = c.emb_init_std;
  header["model_id"] = c.model_id;
  header["weight_seed"] = impl_->weight_seed;
  header["tokenizer"] = impl_->tok->id();
  const std::string header_text = header.dump();

  out.write(kModelMagic, sizeof(kModelMagic));
  const auto version = kModelVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const auto header_len = static_cast<std::uint32_t>(header_text.size());
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for_each_param(impl_->w, [&](const auto& m) {
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(sizeof(double) * m.size()));
  });
  if (!out) throw IoError("short write to model file: " + path.string());
}

Seq2SeqBackend Seq2SeqBackend::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read model file: " + path.string());

  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kModelMagic, sizeof(magic)) != 0) {
    throw IoError("not a model file: " + path.string());
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kModelVersion) {
    throw IoError("unsupported model file version");
  }
  std::uint32_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  if (!in) throw IoError("truncated model file header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("corrupt model header: ") + e.what());
  }

  Seq2SeqConfig config;
  config.vocab = header.at("vocab").get<int>();
  config.d_model = header.at("d_model").get<int>();
  config.heads = header.at("heads").get<int>();
  config.ff = header.at("ff").get<int>();
  config.enc_layers = header.at("enc_layers").get<int>();
  config.dec_layers = header.at("dec_layers").get<int>();
  config.context_budget = header.at("context_budget").get<int>();
  config.max_positions = header.at("max_positions").get<int>();
  config.emb_init_std = header.at("emb_init_std").get<double>();
  config.model_id = header.at("model_id").get<std::string>();

  Seq2SeqBackend backend(config, header.at("weight_seed").get<std::uint64_t>());
  for_each_param(backend.impl_->w, [&](auto& m) {
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(double) * m.size()));
  });
  if (!in) throw IoError("truncated model file: " + path.string());
  backend.impl_->digest = backend.impl_->hash_params();
  return backend;
}

}  // namespace iclmark::model
