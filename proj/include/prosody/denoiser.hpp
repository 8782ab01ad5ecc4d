#pragma once

#include "prosody/common.hpp"
#include "prosody/nn.hpp"
#include "prosody/rng.hpp"

#include <string>
#include <vector>

namespace prosody::net {

struct DenoiserConfig {
  int n_blocks = 2;
  int model_dim = 64;
  int n_heads = 4;
  int ff_dim = 128;
  int m = 4;        // prosody token count
  int d = 16;       // prosody channel dim
  int d_s = 32;     // sentence embedding dim
  int ctx_slots = 8;  // 2N interleaved text/prosody slots
  double dropout = 0.0;

  void validate() const {
    if (n_blocks < 1 || model_dim < 2 || n_heads < 1 || ff_dim < 1 || m < 1 ||
        d < 1 || d_s < 1 || ctx_slots < 2 || ctx_slots % 2 != 0)
      throw ConfigError("invalid denoiser dimensions");
    if (model_dim % n_heads != 0)
      throw ConfigError("model_dim must be divisible by n_heads");
    if (model_dim % 2 != 0)
      throw ConfigError("model_dim must be even for the timestep code");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("dropout must lie in [0, 1)");
  }
};

// Raw context slots as assembled upstream: alternating sentence embeddings
// (d_s) and flattened prosody embeddings (m*d). Ablated slots are plain
// zero vectors; the network has no other notion of a missing slot.
template <class S>
struct ContextInput {
  std::vector<Vec<S>> slots;
};

enum class Mode { kDiffusion, kBaseline };

// Noise predictor over the prosody latent. Encoder input is the projected
// current-sentence token followed by the m projected latent tokens; the
// timestep code is added to every token; each block runs self-attention,
// cross-attention over the projected context slots, and a feed-forward,
// all pre-norm with residuals. The baseline reuses the identical trunk with
// a learned constant latent and a fixed t = 0 code, turning the output head
// into a deterministic regressor.
template <class S>
class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& cfg, std::uint64_t seed) { init(cfg, seed); }

  void init(const DenoiserConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    cfg_ = cfg;
    Rng rng(derive_seed(seed, "denoiser/init"));
    const Index dm = cfg.model_dim;
    in_latent_.init(cfg.d, dm, rng);
    in_sentence_.init(cfg.d_s, dm, rng);
    time_proj_.init(dm, dm, rng);
    ctx_text_.init(cfg.d_s, dm, rng);
    ctx_pros_.init(cfg.m * cfg.d, dm, rng);
    ctx_pos_.resize(cfg.ctx_slots, dm);
    nn::init_normal(ctx_pos_, 0.02, rng);
    ctx_type_.resize(2, dm);
    nn::init_normal(ctx_type_, 0.02, rng);
    base_latent_.resize(cfg.m, cfg.d);
    nn::init_normal(base_latent_, 0.02, rng);
    blocks_.assign(static_cast<std::size_t>(cfg.n_blocks), Block{});
    for (auto& blk : blocks_) {
      blk.ln1.init(dm);
      blk.self_attn.init(dm, cfg.n_heads, rng);
      blk.ln2.init(dm);
      blk.cross_attn.init(dm, cfg.n_heads, rng);
      blk.ln3.init(dm);
      blk.ffn.init(dm, cfg.ff_dim, rng);
      blk.drop.rate = static_cast<S>(cfg.dropout);
    }
    final_ln_.init(dm);
    head_.init(dm, cfg.d, rng);
  }

  const DenoiserConfig& config() const { return cfg_; }

  nn::ParamRefs<S> params() {
    nn::ParamRefs<S> refs;
    in_latent_.collect("in_latent", refs);
    in_sentence_.collect("in_sentence", refs);
    time_proj_.collect("time_proj", refs);
    ctx_text_.collect("ctx_text", refs);
    ctx_pros_.collect("ctx_pros", refs);
    refs.emplace_back("ctx_pos", &ctx_pos_);
    refs.emplace_back("ctx_type", &ctx_type_);
    refs.emplace_back("base_latent", &base_latent_);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const std::string p = "block" + std::to_string(b);
      blocks_[b].ln1.collect(p + ".ln1", refs);
      blocks_[b].self_attn.collect(p + ".self", refs);
      blocks_[b].ln2.collect(p + ".ln2", refs);
      blocks_[b].cross_attn.collect(p + ".cross", refs);
      blocks_[b].ln3.collect(p + ".ln3", refs);
      blocks_[b].ffn.collect(p + ".ffn", refs);
    }
    final_ln_.collect("final_ln", refs);
    head_.collect("head", refs);
    return refs;
  }

  struct Trace {
    Mat<S> z;                      // m x d latent fed in (diffusion mode)
    Mat<S> s_row;                  // 1 x d_s
    Mat<S> tsin;                   // 1 x model_dim
    std::vector<Vec<S>> slots;     // raw context inputs
    Mat<S> ctx_tokens;             // ctx_slots x model_dim
    struct BlockCache {
      typename nn::LayerNorm<S>::Cache c1, c2, c3;
      typename nn::MultiHeadAttention<S>::Cache self, cross;
      typename nn::FeedForward<S>::Cache ffn;
      typename nn::Dropout<S>::Cache d1, d2, d3;
    };
    std::vector<BlockCache> blocks;
    typename nn::LayerNorm<S>::Cache cf;
    Mat<S> head_in;                // m x model_dim rows entering the head
    Mode mode = Mode::kDiffusion;
  };

  // eps_hat = f(z_t, s, t, c). Pass a trace to enable a later backward pass;
  // rng enables dropout and is only used while training.
  Mat<S> predict_noise(const Mat<S>& z_t, const Vec<S>& s_current, int t,
                       const ContextInput<S>& ctx, Trace* trace = nullptr,
                       Rng* rng = nullptr) const {
    check_latent(z_t);
    return run(z_t, s_current, t, ctx, Mode::kDiffusion, trace, rng);
  }

  // Baseline regression pass: no latent input, no timestep.
  Mat<S> predict_deterministic(const Vec<S>& s_current,
                               const ContextInput<S>& ctx,
                               Trace* trace = nullptr,
                               Rng* rng = nullptr) const {
    return run(base_latent_.value, s_current, 0, ctx, Mode::kBaseline, trace,
               rng);
  }

  // Backpropagates d_out (shape m x d) through the forward pass recorded in
  // trace, accumulating parameter gradients.
  void backward(const Trace& trace, const Mat<S>& d_out) {
    const Index dm = cfg_.model_dim;
    const Index tokens = cfg_.m + 1;
    Mat<S> dxf = Mat<S>::Zero(tokens, dm);
    dxf.bottomRows(cfg_.m) = head_.backward(trace.head_in, d_out);
    Mat<S> dx = final_ln_.backward(trace.cf, dxf);
    Mat<S> dctx = Mat<S>::Zero(cfg_.ctx_slots, dm);
    for (std::size_t bi = blocks_.size(); bi-- > 0;) {
      Block& blk = blocks_[bi];
      const auto& bc = trace.blocks[bi];
      // x3 = x2 + drop(ffn(ln3(x2)))
      Mat<S> dffn = blk.drop.backward(bc.d3, dx);
      Mat<S> dn3 = blk.ffn.backward(bc.ffn, dffn);
      dx += blk.ln3.backward(bc.c3, dn3);
      // x2 = x1 + drop(cross(ln2(x1), ctx))
      Mat<S> dca = blk.drop.backward(bc.d2, dx);
      Mat<S> dn2 = blk.cross_attn.backward(bc.cross, dca, dctx);
      dx += blk.ln2.backward(bc.c2, dn2);
      // x1 = x0 + drop(self(ln1(x0)))
      Mat<S> dsa = blk.drop.backward(bc.d1, dx);
      Mat<S> dkv = Mat<S>::Zero(tokens, dm);
      Mat<S> dq = blk.self_attn.backward(bc.self, dsa, dkv);
      dx += blk.ln1.backward(bc.c1, (dq + dkv).eval());
    }
    // Timestep code was added to every token.
    Mat<S> dtemb = dx.colwise().sum();
    time_proj_.backward(trace.tsin, dtemb);
    // Row 0 is the sentence token, rows 1..m the latent tokens.
    in_sentence_.backward(trace.s_row, dx.topRows(1));
    Mat<S> dz = in_latent_.backward(trace.z, dx.bottomRows(cfg_.m));
    if (trace.mode == Mode::kBaseline) base_latent_.grad += dz;
    // Context projections and embeddings.
    for (Index i = 0; i < cfg_.ctx_slots; ++i) {
      Mat<S> drow = dctx.row(i);
      if (i % 2 == 0)
        ctx_text_.backward(trace.slots[static_cast<std::size_t>(i)].transpose(),
                           drow);
      else
        ctx_pros_.backward(trace.slots[static_cast<std::size_t>(i)].transpose(),
                           drow);
      ctx_pos_.grad.row(i) += drow.row(0);
      ctx_type_.grad.row(i % 2) += drow.row(0);
    }
  }

 private:
  struct Block {
    nn::LayerNorm<S> ln1;
    nn::MultiHeadAttention<S> self_attn;
    nn::LayerNorm<S> ln2;
    nn::MultiHeadAttention<S> cross_attn;
    nn::LayerNorm<S> ln3;
    nn::FeedForward<S> ffn;
    nn::Dropout<S> drop;
  };

  void check_latent(const Mat<S>& z) const {
    if (z.rows() != cfg_.m || z.cols() != cfg_.d)
      throw DataError("latent shape mismatch: expected " +
                      std::to_string(cfg_.m) + "x" + std::to_string(cfg_.d));
  }

  Mat<S> project_context(const ContextInput<S>& ctx) const {
    if (static_cast<Index>(ctx.slots.size()) != cfg_.ctx_slots)
      throw DataError("context slot count mismatch");
    Mat<S> tokens(cfg_.ctx_slots, cfg_.model_dim);
    for (Index i = 0; i < cfg_.ctx_slots; ++i) {
      const Vec<S>& slot = ctx.slots[static_cast<std::size_t>(i)];
      Mat<S> row;
      if (i % 2 == 0) {
        if (slot.size() != cfg_.d_s) throw DataError("text slot dim mismatch");
        row = ctx_text_.forward(slot.transpose());
      } else {
        if (slot.size() != cfg_.m * cfg_.d)
          throw DataError("prosody slot dim mismatch");
        row = ctx_pros_.forward(slot.transpose());
      }
      tokens.row(i) = row.row(0) + ctx_pos_.value.row(i) +
                      ctx_type_.value.row(i % 2);
    }
    return tokens;
  }

  Mat<S> run(const Mat<S>& z, const Vec<S>& s_current, int t,
             const ContextInput<S>& ctx, Mode mode, Trace* trace,
             Rng* rng) const {
    if (s_current.size() != cfg_.d_s)
      throw DataError("sentence embedding dim mismatch");
    const Index dm = cfg_.model_dim;
    const Index tokens = cfg_.m + 1;
    Mat<S> ctx_tokens = project_context(ctx);
    Mat<S> s_row = s_current.transpose();
    Mat<S> tsin = nn::sinusoid_code<S>(static_cast<double>(t), dm);
    Mat<S> temb = time_proj_.forward(tsin);
    Mat<S> x(tokens, dm);
    x.topRows(1) = in_sentence_.forward(s_row);
    x.bottomRows(cfg_.m) = in_latent_.forward(z);
    for (Index i = 0; i < tokens; ++i) x.row(i) += temb.row(0);
    if (trace) {
      trace->z = z;
      trace->s_row = s_row;
      trace->tsin = tsin;
      trace->slots = ctx.slots;
      trace->ctx_tokens = ctx_tokens;
      trace->blocks.resize(blocks_.size());
      trace->mode = mode;
    }
    for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
      const Block& blk = blocks_[bi];
      auto* bc = trace ? &trace->blocks[bi] : nullptr;
      Mat<S> n1 = blk.ln1.forward(x, bc ? &bc->c1 : nullptr);
      Mat<S> sa = blk.self_attn.forward(n1, n1, bc ? &bc->self : nullptr);
      x += blk.drop.forward(sa, rng, bc ? &bc->d1 : nullptr);
      Mat<S> n2 = blk.ln2.forward(x, bc ? &bc->c2 : nullptr);
      Mat<S> ca =
          blk.cross_attn.forward(n2, ctx_tokens, bc ? &bc->cross : nullptr);
      x += blk.drop.forward(ca, rng, bc ? &bc->d2 : nullptr);
      Mat<S> n3 = blk.ln3.forward(x, bc ? &bc->c3 : nullptr);
      Mat<S> ff = blk.ffn.forward(n3, bc ? &bc->ffn : nullptr);
      x += blk.drop.forward(ff, rng, bc ? &bc->d3 : nullptr);
    }
    Mat<S> xf = final_ln_.forward(x, trace ? &trace->cf : nullptr);
    Mat<S> head_in = xf.bottomRows(cfg_.m);
    Mat<S> out = head_.forward(head_in);
    if (trace) trace->head_in = std::move(head_in);
    if (!out.allFinite())
      throw NumericError("denoiser produced non-finite activations");
    return out;
  }

  DenoiserConfig cfg_;
  nn::Dense<S> in_latent_, in_sentence_, time_proj_, ctx_text_, ctx_pros_;
  nn::Tensor<S> ctx_pos_, ctx_type_, base_latent_;
  std::vector<Block> blocks_;
  nn::LayerNorm<S> final_ln_;
  nn::Dense<S> head_;
};

}  // namespace prosody::net
