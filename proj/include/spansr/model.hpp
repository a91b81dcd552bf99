#pragma once

#include <array>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "spansr/nn_ops.hpp"
#include "spansr/tensor.hpp"

namespace spansr {

enum class Activation : std::uint8_t { kSilu = 0, kLeakyRelu = 1 };

enum class RunMode { kInfer, kTrain };

struct ModelConfig {
  int scale = 4;              // r in {2,3,4}
  index_t img_channels = 3;   // C
  index_t channels = 48;      // C'
  int blocks = 6;             // B
  bool use_residual = true;
  bool use_attention = true;
  bool attention_trainable = false;  // makes (a,b) two shared trainable scalars
  Activation act = Activation::kSilu;
  bool rep_side1x1 = true;   // train-time 1x1 branch in every block conv
  bool rep_identity = true;  // train-time identity branch

  void validate() const {
    if (scale < 1 || scale > 4) throw std::invalid_argument("ModelConfig: scale must be in {1..4}");
    if (channels < 1 || blocks < 1 || img_channels < 1) {
      throw std::invalid_argument("ModelConfig: channels/blocks must be positive");
    }
  }
};

// Multi-branch convolution used during training: 3x3 main branch plus an
// optional 1x1 branch and an optional identity branch, all summed. Fusable
// into one 3x3 kernel for inference.
template <typename T>
struct RepConv {
  ConvKernel<T> main3x3;
  std::optional<ConvKernel<T>> side1x1;
  bool identity = false;

  index_t in_c() const { return main3x3.in_c(); }
  index_t out_c() const { return main3x3.out_c(); }
};

template <typename T>
using SpabParams = std::array<RepConv<T>, 3>;

template <typename T>
struct SpanModel {
  ModelConfig cfg;
  ConvKernel<T> conv_first;            // W_0:  C  -> C', 3x3
  std::vector<SpabParams<T>> blocks;   // per block: C' -> C', 3x3, x3
  ConvKernel<T> conv_cat;              // W_f1: C' -> C', 3x3
  ConvKernel<T> conv_out;              // W_f2: 4C' -> r^2*C, 3x3
  Tensor4<T> att_a{Shape4{1, 1, 1, 1}, T(1)};  // shared attention scalars
  Tensor4<T> att_b{Shape4{1, 1, 1, 1}, T(1)};
  bool fused = false;

  template <typename U>
  SpanModel<U> cast() const {
    SpanModel<U> m;
    m.cfg = cfg;
    m.fused = fused;
    m.conv_first = {conv_first.weights.template cast<U>(), conv_first.bias.template cast<U>()};
    m.conv_cat = {conv_cat.weights.template cast<U>(), conv_cat.bias.template cast<U>()};
    m.conv_out = {conv_out.weights.template cast<U>(), conv_out.bias.template cast<U>()};
    m.att_a = att_a.template cast<U>();
    m.att_b = att_b.template cast<U>();
    for (const auto& blk : blocks) {
      SpabParams<U> b;
      for (int j = 0; j < 3; ++j) {
        b[j].main3x3 = {blk[j].main3x3.weights.template cast<U>(),
                        blk[j].main3x3.bias.template cast<U>()};
        if (blk[j].side1x1) {
          b[j].side1x1 = ConvKernel<U>{blk[j].side1x1->weights.template cast<U>(),
                                       blk[j].side1x1->bias.template cast<U>()};
        }
        b[j].identity = blk[j].identity;
      }
      m.blocks.push_back(std::move(b));
    }
    return m;
  }
};

// ---- activation dispatch -------------------------------------------------

template <typename T>
Tensor4<T> apply_act(Activation act, const Tensor4<T>& x) {
  return act == Activation::kSilu ? act_silu(x) : act_leaky_relu(x);
}

template <typename T>
Tensor4<T> apply_act_backward(Activation act, const Tensor4<T>& x, const Tensor4<T>& d_out) {
  return act == Activation::kSilu ? act_silu_backward(x, d_out)
                                  : act_leaky_relu_backward(x, d_out);
}

// ---- rep-conv forward/backward -------------------------------------------

template <typename T>
Tensor4<T> rep_forward(const Tensor4<T>& x, const RepConv<T>& rc) {
  Tensor4<T> y = conv2d_forward(x, rc.main3x3, (rc.main3x3.k() - 1) / 2);
  if (rc.side1x1) add_inplace(y, conv2d_forward(x, *rc.side1x1, 0));
  if (rc.identity) add_inplace(y, x);
  return y;
}

template <typename T>
Tensor4<T> rep_backward(const Tensor4<T>& x, const RepConv<T>& rc, const Tensor4<T>& d_out,
                        RepConv<T>& grad) {
  ConvGrad<T> gm = conv2d_backward(x, rc.main3x3, d_out, (rc.main3x3.k() - 1) / 2);
  add_inplace(grad.main3x3.weights, gm.d_weights);
  add_inplace(grad.main3x3.bias, gm.d_bias);
  Tensor4<T> d_in = std::move(gm.d_input);
  if (rc.side1x1) {
    ConvGrad<T> gs = conv2d_backward(x, *rc.side1x1, d_out, 0);
    add_inplace(grad.side1x1->weights, gs.d_weights);
    add_inplace(grad.side1x1->bias, gs.d_bias);
    add_inplace(d_in, gs.d_input);
  }
  if (rc.identity) add_inplace(d_in, d_out);
  return d_in;
}

// ---- tape ------------------------------------------------------------------

template <typename T>
struct BlockTape {
  Tensor4<T> o_prev;  // block input O_{i-1}
  Tensor4<T> pre1, a1, pre2, a2;  // conv/act intermediates
  Tensor4<T> feat;    // H_i (third conv output)
  Tensor4<T> pre_att; // U_i
  Tensor4<T> att;     // V_i
  Tensor4<T> out;     // O_i
};

template <typename T>
struct Tape {
  Tensor4<T> input;   // I_LR
  Tensor4<T> pre0;    // W_0 * I_LR before activation
  std::vector<BlockTape<T>> blocks;
  Tensor4<T> cat;     // concat feeding conv_out
};

// ---- SPAB ------------------------------------------------------------------

// H = conv3(act(conv2(act(conv1(O_prev)))));  U = O_prev (+) H;  V = sigma_a(H);
// O = U (.) V, with the residual/attention legs controlled by config flags.
template <typename T>
Tensor4<T> spab_forward(const Tensor4<T>& o_prev, const SpabParams<T>& params,
                        const ModelConfig& cfg, T att_a, T att_b, RunMode mode,
                        BlockTape<T>* tape_entry = nullptr) {
  if (o_prev.c() != cfg.channels) {
    throw std::invalid_argument("spab_forward: input channels " + std::to_string(o_prev.c()) +
                                " != C' " + std::to_string(cfg.channels));
  }
  Tensor4<T> pre1 = rep_forward(o_prev, params[0]);
  Tensor4<T> a1 = apply_act(cfg.act, pre1);
  Tensor4<T> pre2 = rep_forward(a1, params[1]);
  Tensor4<T> a2 = apply_act(cfg.act, pre2);
  Tensor4<T> feat = rep_forward(a2, params[2]);

  Tensor4<T> pre_att = cfg.use_residual ? elementwise_add(o_prev, feat) : feat;
  Tensor4<T> att = cfg.use_attention ? act_attention(feat, att_a, att_b)
                                     : Tensor4<T>::ones(feat.shape());
  Tensor4<T> out = elementwise_mul(pre_att, att);

  if (mode == RunMode::kTrain && tape_entry) {
    tape_entry->o_prev = o_prev;
    tape_entry->pre1 = std::move(pre1);
    tape_entry->a1 = std::move(a1);
    tape_entry->pre2 = std::move(pre2);
    tape_entry->a2 = std::move(a2);
    tape_entry->feat = std::move(feat);
    tape_entry->pre_att = std::move(pre_att);
    tape_entry->att = std::move(att);
    tape_entry->out = out;
  }
  return out;
}

// Elementwise multiplicative factor the attention leg contributes to dO/dH:
//   (H (+) O_prev) (.) sigma_a'(H) + sigma_a(H)   with residual,
//   H (.) sigma_a'(H) + sigma_a(H)                without,
//   all-ones when attention is disabled.
template <typename T>
Tensor4<T> attention_grad_factor(const Tensor4<T>& feat, const Tensor4<T>& o_prev,
                                 const ModelConfig& cfg, T att_a = T(1), T att_b = T(1)) {
  detail::require_same_shape(feat.shape(), o_prev.shape(), "attention_grad_factor");
  if (!cfg.use_attention) return Tensor4<T>::ones(feat.shape());
  Tensor4<T> pre_att = cfg.use_residual ? elementwise_add(o_prev, feat) : feat;
  Tensor4<T> factor = elementwise_mul(pre_att, act_attention_deriv(feat, att_a, att_b));
  add_inplace(factor, act_attention(feat, att_a, att_b));
  return factor;
}

// ---- full network ----------------------------------------------------------

template <typename T>
struct ForwardResult {
  Tensor4<T> output;
  std::optional<Tape<T>> tape;
};

// Concat tap indices into the outputs vector O_0..O_B: literally
// (O_0, O_1, O_{B-1}, conv(O_B)) as written for B=6.
inline std::array<int, 3> concat_taps(int blocks) { return {0, blocks >= 1 ? 1 : 0, blocks - 1}; }

template <typename T>
ForwardResult<T> span_forward(const Tensor4<T>& i_lr, const SpanModel<T>& model, RunMode mode) {
  const ModelConfig& cfg = model.cfg;
  if (i_lr.c() != cfg.img_channels) {
    throw std::invalid_argument("span_forward: expected " + std::to_string(cfg.img_channels) +
                                " input channels, got " + std::to_string(i_lr.c()));
  }
  const T a = model.att_a[0];
  const T b = model.att_b[0];

  ForwardResult<T> res;
  Tape<T> tape;
  const bool record = mode == RunMode::kTrain;
  if (record) tape.blocks.resize(static_cast<std::size_t>(cfg.blocks));

  Tensor4<T> pre0 = conv2d_forward(i_lr, model.conv_first, 1);
  std::vector<Tensor4<T>> outs;
  outs.reserve(static_cast<std::size_t>(cfg.blocks) + 1);
  outs.push_back(apply_act(cfg.act, pre0));

  for (int i = 0; i < cfg.blocks; ++i) {
    BlockTape<T>* entry = record ? &tape.blocks[static_cast<std::size_t>(i)] : nullptr;
    outs.push_back(spab_forward(outs.back(), model.blocks[static_cast<std::size_t>(i)], cfg, a, b,
                                mode, entry));
  }

  const auto taps = concat_taps(cfg.blocks);
  Tensor4<T> tail = conv2d_forward(outs.back(), model.conv_cat, 1);
  Tensor4<T> cat = concat_channels<T>(
      {outs[static_cast<std::size_t>(taps[0])], outs[static_cast<std::size_t>(taps[1])],
       outs[static_cast<std::size_t>(taps[2])], tail});
  Tensor4<T> pre_out = conv2d_forward(cat, model.conv_out, 1);
  res.output = pixel_shuffle(pre_out, cfg.scale);

  if (record) {
    tape.input = i_lr;
    tape.pre0 = std::move(pre0);
    tape.cat = std::move(cat);
    res.tape = std::move(tape);
  }
  return res;
}

// Model-shaped zero gradient container.
template <typename T>
SpanModel<T> make_grads_like(const SpanModel<T>& m) {
  SpanModel<T> g;
  g.cfg = m.cfg;
  g.fused = m.fused;
  auto zero_kernel = [](const ConvKernel<T>& k) {
    return ConvKernel<T>{Tensor4<T>::zeros(k.weights.shape()), Tensor4<T>::zeros(k.bias.shape())};
  };
  g.conv_first = zero_kernel(m.conv_first);
  g.conv_cat = zero_kernel(m.conv_cat);
  g.conv_out = zero_kernel(m.conv_out);
  g.att_a = Tensor4<T>::zeros(Shape4{1, 1, 1, 1});
  g.att_b = Tensor4<T>::zeros(Shape4{1, 1, 1, 1});
  for (const auto& blk : m.blocks) {
    SpabParams<T> gb;
    for (int j = 0; j < 3; ++j) {
      gb[j].main3x3 = zero_kernel(blk[j].main3x3);
      if (blk[j].side1x1) gb[j].side1x1 = zero_kernel(*blk[j].side1x1);
      gb[j].identity = blk[j].identity;
    }
    g.blocks.push_back(std::move(gb));
  }
  return g;
}

namespace detail {

// Backward through one SPAB from the tape. Returns d(O_{i-1}); accumulates
// parameter and attention-scalar gradients.
template <typename T>
Tensor4<T> spab_backward(const BlockTape<T>& t, const SpabParams<T>& params,
                         const ModelConfig& cfg, T att_a, T att_b, const Tensor4<T>& d_out,
                         SpabParams<T>& grads, T& d_att_a, T& d_att_b) {
  Tensor4<T> d_pre_att = cfg.use_attention ? elementwise_mul(d_out, t.att) : d_out;
  Tensor4<T> d_feat = d_pre_att;
  if (cfg.use_attention) {
    Tensor4<T> d_att = elementwise_mul(d_out, t.pre_att);
    AttentionGrad<T> ag = act_attention_backward(t.feat, d_att, att_a, att_b);
    add_inplace(d_feat, ag.d_input);
    d_att_a += ag.d_a;
    d_att_b += ag.d_b;
  }

  Tensor4<T> d_a2 = rep_backward(t.a2, params[2], d_feat, grads[2]);
  Tensor4<T> d_pre2 = apply_act_backward(cfg.act, t.pre2, d_a2);
  Tensor4<T> d_a1 = rep_backward(t.a1, params[1], d_pre2, grads[1]);
  Tensor4<T> d_pre1 = apply_act_backward(cfg.act, t.pre1, d_a1);
  Tensor4<T> d_o_prev = rep_backward(t.o_prev, params[0], d_pre1, grads[0]);
  if (cfg.use_residual) add_inplace(d_o_prev, d_pre_att);
  return d_o_prev;
}

}  // namespace detail

// Exact reverse-mode gradients for every parameter, replayed from the tape.
template <typename T>
SpanModel<T> span_backward(const Tape<T>& tape, const Tensor4<T>& d_ihr,
                           const SpanModel<T>& model) {
  const ModelConfig& cfg = model.cfg;
  if (tape.blocks.size() != static_cast<std::size_t>(cfg.blocks)) {
    throw std::invalid_argument("span_backward: tape does not match model block count");
  }
  const T a = model.att_a[0];
  const T b = model.att_b[0];
  SpanModel<T> grads = make_grads_like(model);

  Tensor4<T> d_pre_out = pixel_unshuffle(d_ihr, cfg.scale);
  ConvGrad<T> g_out = conv2d_backward(tape.cat, model.conv_out, d_pre_out, 1);
  grads.conv_out.weights = std::move(g_out.d_weights);
  grads.conv_out.bias = std::move(g_out.d_bias);

  // Split the concat gradient back onto its four taps.
  const index_t cp = cfg.channels;
  const auto taps = concat_taps(cfg.blocks);
  std::vector<Tensor4<T>> d_outs(static_cast<std::size_t>(cfg.blocks) + 1);
  std::vector<bool> seen(static_cast<std::size_t>(cfg.blocks) + 1, false);
  auto accumulate = [&](int idx, Tensor4<T>&& g) {
    auto& slot = d_outs[static_cast<std::size_t>(idx)];
    if (!seen[static_cast<std::size_t>(idx)]) {
      slot = std::move(g);
      seen[static_cast<std::size_t>(idx)] = true;
    } else {
      add_inplace(slot, g);
    }
  };
  for (int s = 0; s < 3; ++s) {
    accumulate(taps[static_cast<std::size_t>(s)], slice_channels(g_out.d_input, s * cp, cp));
  }
  ConvGrad<T> g_cat = conv2d_backward(tape.blocks.back().out, model.conv_cat,
                                      slice_channels(g_out.d_input, 3 * cp, cp), 1);
  grads.conv_cat.weights = std::move(g_cat.d_weights);
  grads.conv_cat.bias = std::move(g_cat.d_bias);
  accumulate(cfg.blocks, std::move(g_cat.d_input));

  T d_a = T(0), d_b = T(0);
  for (int i = cfg.blocks - 1; i >= 0; --i) {
    Tensor4<T> d_prev = detail::spab_backward(
        tape.blocks[static_cast<std::size_t>(i)], model.blocks[static_cast<std::size_t>(i)], cfg,
        a, b, d_outs[static_cast<std::size_t>(i) + 1], grads.blocks[static_cast<std::size_t>(i)],
        d_a, d_b);
    accumulate(i, std::move(d_prev));
  }
  grads.att_a[0] = d_a;
  grads.att_b[0] = d_b;

  Tensor4<T> d_pre0 = apply_act_backward(cfg.act, tape.pre0, d_outs[0]);
  ConvGrad<T> g_first = conv2d_backward(tape.input, model.conv_first, d_pre0, 1);
  grads.conv_first.weights = std::move(g_first.d_weights);
  grads.conv_first.bias = std::move(g_first.d_bias);
  return grads;
}

// ---- re-parameterization ----------------------------------------------------

// Collapse the branch sum into a single 3x3 kernel: the 1x1 branch lands in
// the center tap, the identity branch becomes a per-channel Dirac kernel.
template <typename T>
ConvKernel<T> fuse_rep(const RepConv<T>& rc) {
  if (rc.identity && rc.in_c() != rc.out_c()) {
    throw std::invalid_argument("fuse_rep: identity branch requires in_c == out_c");
  }
  ConvKernel<T> fused{rc.main3x3.weights, rc.main3x3.bias};
  if (rc.side1x1) {
    for (index_t o = 0; o < rc.out_c(); ++o) {
      for (index_t i = 0; i < rc.in_c(); ++i) {
        fused.weights.at(o, i, 1, 1) += rc.side1x1->weights.at(o, i, 0, 0);
      }
      fused.bias[o] += rc.side1x1->bias[o];
    }
  }
  if (rc.identity) {
    for (index_t o = 0; o < rc.out_c(); ++o) fused.weights.at(o, o, 1, 1) += T(1);
  }
  return fused;
}

template <typename T>
SpanModel<T> fuse_model(const SpanModel<T>& model) {
  if (model.fused) throw std::logic_error("fuse_model: model is already fused");
  SpanModel<T> out = model;
  for (auto& blk : out.blocks) {
    for (auto& conv : blk) {
      conv = RepConv<T>{fuse_rep(conv), std::nullopt, false};
    }
  }
  out.fused = true;
  out.cfg.rep_side1x1 = false;
  out.cfg.rep_identity = false;
  return out;
}

// ---- parameter enumeration ---------------------------------------------------

template <typename T>
struct ParamRef {
  std::string name;
  Tensor4<T>* tensor;
};

template <typename T>
std::vector<ParamRef<T>> parameters(SpanModel<T>& m, bool trainable_only = true) {
  std::vector<ParamRef<T>> out;
  auto push_kernel = [&out](const std::string& name, ConvKernel<T>& k) {
    out.push_back({name + ".w", &k.weights});
    out.push_back({name + ".b", &k.bias});
  };
  push_kernel("conv_first", m.conv_first);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    for (int j = 0; j < 3; ++j) {
      const std::string base = "block" + std::to_string(i) + ".conv" + std::to_string(j);
      push_kernel(base + ".main", m.blocks[i][static_cast<std::size_t>(j)].main3x3);
      if (m.blocks[i][static_cast<std::size_t>(j)].side1x1) {
        push_kernel(base + ".side", *m.blocks[i][static_cast<std::size_t>(j)].side1x1);
      }
    }
  }
  push_kernel("conv_cat", m.conv_cat);
  push_kernel("conv_out", m.conv_out);
  if (!trainable_only || (m.cfg.use_attention && m.cfg.attention_trainable)) {
    out.push_back({"att.a", &m.att_a});
    out.push_back({"att.b", &m.att_b});
  }
  return out;
}

template <typename T>
index_t parameter_count(const SpanModel<T>& m) {
  auto& mm = const_cast<SpanModel<T>&>(m);
  index_t total = 0;
  for (const auto& p : parameters(mm, /*trainable_only=*/true)) total += p.tensor->size();
  // Frozen attention scalars are not parameters; trainable ones were included above.
  return total;
}

// ---- initialization -----------------------------------------------------------

// He-style fan-in normal init, biases zero; deterministic per (cfg, seed) with a
// fixed per-tensor sub-stream order.
template <typename T>
SpanModel<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SpanModel<T> m;
  m.cfg = cfg;
  m.fused = !cfg.rep_side1x1 && !cfg.rep_identity;

  std::uint64_t stream = 0;
  auto init_kernel = [&](index_t out_c, index_t in_c, index_t k) {
    ConvKernel<T> ck(out_c, in_c, k);
    const double stddev = std::sqrt(2.0 / static_cast<double>(in_c * k * k));
    ck.weights = fill_random<T>(ck.weights.shape(), derive_seed(seed, stream++),
                                NormalDist{0.0, stddev});
    return ck;
  };

  m.conv_first = init_kernel(cfg.channels, cfg.img_channels, 3);
  for (int i = 0; i < cfg.blocks; ++i) {
    SpabParams<T> blk;
    for (int j = 0; j < 3; ++j) {
      blk[static_cast<std::size_t>(j)].main3x3 = init_kernel(cfg.channels, cfg.channels, 3);
      if (cfg.rep_side1x1) {
        blk[static_cast<std::size_t>(j)].side1x1 = init_kernel(cfg.channels, cfg.channels, 1);
      }
      blk[static_cast<std::size_t>(j)].identity = cfg.rep_identity;
    }
    m.blocks.push_back(std::move(blk));
  }
  m.conv_cat = init_kernel(cfg.channels, cfg.channels, 3);
  m.conv_out = init_kernel(static_cast<index_t>(cfg.scale) * cfg.scale * cfg.img_channels,
                           4 * cfg.channels, 3);
  return m;
}

// Closed-form conv parameter count for the fused topology; exercised against
// the enumerated count in tests.
inline index_t fused_parameter_count(const ModelConfig& cfg) {
  const index_t c = cfg.img_channels, cp = cfg.channels;
  const index_t r2c = static_cast<index_t>(cfg.scale) * cfg.scale * c;
  index_t total = cp * c * 9 + cp;                       // conv_first
  total += static_cast<index_t>(cfg.blocks) * 3 * (cp * cp * 9 + cp);
  total += cp * cp * 9 + cp;                             // conv_cat
  total += r2c * 4 * cp * 9 + r2c;                       // conv_out
  return total;
}

}  // namespace spansr
