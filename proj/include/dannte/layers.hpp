#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dannte/tape.hpp"

namespace dannte {

enum class Activation { kTanh, kIdentity, kSigmoid };

/// Probabilities are clamped into [kProbClamp, 1-kProbClamp] before any log,
/// keeping the domain loss finite at saturated predictions.
inline constexpr double kProbClamp = 1e-7;

template <typename S>
struct LstmParamsT {
  // gate weights, input->hidden [H,F] and hidden->hidden [H,H], biases [H]
  TensorT<S> Wi, Wf, Wg, Wo;
  TensorT<S> Ui, Uf, Ug, Uo;
  TensorT<S> bi, bf, bg, bo;
  Index hidden = 0;
  Index input = 0;

  static LstmParamsT zeros(Index hidden, Index input) {
    LstmParamsT p;
    p.hidden = hidden;
    p.input = input;
    for (auto* w : {&p.Wi, &p.Wf, &p.Wg, &p.Wo})
      *w = TensorT<S>::zeros({hidden, input});
    for (auto* u : {&p.Ui, &p.Uf, &p.Ug, &p.Uo})
      *u = TensorT<S>::zeros({hidden, hidden});
    for (auto* b : {&p.bi, &p.bf, &p.bg, &p.bo}) *b = TensorT<S>::zeros({hidden});
    return p;
  }
};

template <typename S>
struct DenseLayerT {
  TensorT<S> W;  // [out, in]
  TensorT<S> b;  // [out]
  Activation act = Activation::kIdentity;
};

template <typename S>
struct HeadParamsT {
  std::vector<DenseLayerT<S>> layers;

  Index input() const { return layers.front().W.dim(1); }
  Index output() const { return layers.back().W.dim(0); }
};

enum class ExtractorKind { kLstm, kFeedforward };

/// The two-headed adversarial model: a shared feature extractor feeding a
/// regressor and a sign-reversed domain classifier.
template <typename S>
struct DannteModelT {
  LstmParamsT<S> extractor;
  HeadParamsT<S> ff_extractor;  // used only when kind == kFeedforward
  HeadParamsT<S> regressor;     // ends identity, output 1
  HeadParamsT<S> domain_head;   // ends sigmoid, output 1
  S lambda = S(1.5);
  ExtractorKind kind = ExtractorKind::kLstm;

  Index hidden() const { return extractor.hidden; }
  Index input() const { return extractor.input; }
  Index window() const { return window_; }
  Index window_ = 0;  // sequence length the model was built for
};

// -- parameter enumeration ------------------------------------------------------

/// Visits every trainable tensor in a fixed, documented order. Checkpoints,
/// the optimizer, and gradient collection all rely on this order.
template <typename S, typename Fn>
void for_each_param(DannteModelT<S>& m, Fn&& fn) {
  if (m.kind == ExtractorKind::kLstm) {
    fn("extractor.Wi", m.extractor.Wi);
    fn("extractor.Wf", m.extractor.Wf);
    fn("extractor.Wg", m.extractor.Wg);
    fn("extractor.Wo", m.extractor.Wo);
    fn("extractor.Ui", m.extractor.Ui);
    fn("extractor.Uf", m.extractor.Uf);
    fn("extractor.Ug", m.extractor.Ug);
    fn("extractor.Uo", m.extractor.Uo);
    fn("extractor.bi", m.extractor.bi);
    fn("extractor.bf", m.extractor.bf);
    fn("extractor.bg", m.extractor.bg);
    fn("extractor.bo", m.extractor.bo);
  } else {
    for (std::size_t i = 0; i < m.ff_extractor.layers.size(); ++i) {
      fn("ff_extractor." + std::to_string(i) + ".W", m.ff_extractor.layers[i].W);
      fn("ff_extractor." + std::to_string(i) + ".b", m.ff_extractor.layers[i].b);
    }
  }
  for (std::size_t i = 0; i < m.regressor.layers.size(); ++i) {
    fn("regressor." + std::to_string(i) + ".W", m.regressor.layers[i].W);
    fn("regressor." + std::to_string(i) + ".b", m.regressor.layers[i].b);
  }
  for (std::size_t i = 0; i < m.domain_head.layers.size(); ++i) {
    fn("domain_head." + std::to_string(i) + ".W", m.domain_head.layers[i].W);
    fn("domain_head." + std::to_string(i) + ".b", m.domain_head.layers[i].b);
  }
}

/// Parameters of the inference subset: extractor + regressor, no domain head.
template <typename S, typename Fn>
void for_each_inference_param(DannteModelT<S>& m, Fn&& fn) {
  for_each_param(m, [&](const std::string& name, TensorT<S>& t) {
    if (name.rfind("domain_head.", 0) != 0) fn(name, t);
  });
}

/// Model whose parameters are registered as tape variables; forward passes
/// built from it are differentiable w.r.t. every parameter.
template <typename S>
DannteModelT<S> track(TapeT<S>& tape, const DannteModelT<S>& m) {
  DannteModelT<S> t = m;
  for_each_param(t, [&](const std::string&, TensorT<S>& p) { p = tape.variable(p); });
  return t;
}

// -- initialization ---------------------------------------------------------------

/// Uniform in [-1/sqrt(H), 1/sqrt(H)], forget-gate bias at 1.
template <typename S>
LstmParamsT<S> init_lstm(Index hidden, Index input, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(double(hidden)),
                                              1.0 / std::sqrt(double(hidden)));
  auto draw = [&](Shape shape) {
    ArrayX<S> v(shape_numel(shape));
    for (Index i = 0; i < v.size(); ++i) v[i] = S(dist(rng));
    return TensorT<S>(std::move(shape), std::move(v));
  };
  LstmParamsT<S> p;
  p.hidden = hidden;
  p.input = input;
  p.Wi = draw({hidden, input});
  p.Wf = draw({hidden, input});
  p.Wg = draw({hidden, input});
  p.Wo = draw({hidden, input});
  p.Ui = draw({hidden, hidden});
  p.Uf = draw({hidden, hidden});
  p.Ug = draw({hidden, hidden});
  p.Uo = draw({hidden, hidden});
  p.bi = draw({hidden});
  p.bf = TensorT<S>::full({hidden}, S(1));
  p.bg = draw({hidden});
  p.bo = draw({hidden});
  return p;
}

template <typename S>
HeadParamsT<S> init_head(const std::vector<Index>& dims,
                         const std::vector<Activation>& acts,
                         std::mt19937_64& rng) {
  HeadParamsT<S> head;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const Index in = dims[l], out = dims[l + 1];
    std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(double(in)),
                                                1.0 / std::sqrt(double(in)));
    ArrayX<S> w(out * in), b(out);
    for (Index i = 0; i < w.size(); ++i) w[i] = S(dist(rng));
    for (Index i = 0; i < b.size(); ++i) b[i] = S(dist(rng));
    head.layers.push_back(
        {TensorT<S>({out, in}, std::move(w)), TensorT<S>({out}, std::move(b)), acts[l]});
  }
  return head;
}

/// Default architecture: single LSTM layer, tanh hidden layer in each head,
/// regressor ending identity and domain head ending sigmoid, both width 1.
template <typename S>
DannteModelT<S> make_model(Index hidden, Index input, Index head_hidden, S lambda,
                           std::uint64_t seed,
                           ExtractorKind kind = ExtractorKind::kLstm,
                           Index window = 0) {
  if (lambda < S(0)) throw ContractError("make_model: lambda must be >= 0");
  std::mt19937_64 rng(seed);
  DannteModelT<S> m;
  m.kind = kind;
  m.lambda = lambda;
  m.window_ = window;
  m.extractor = init_lstm<S>(hidden, input, rng);
  if (kind == ExtractorKind::kFeedforward) {
    if (window < 1)
      throw ContractError("make_model: feedforward extractor needs the window length");
    m.ff_extractor = init_head<S>({window * input, hidden, hidden},
                                  {Activation::kTanh, Activation::kTanh}, rng);
  }
  m.regressor = init_head<S>({hidden, head_hidden, 1},
                             {Activation::kTanh, Activation::kIdentity}, rng);
  m.domain_head = init_head<S>({hidden, head_hidden, 1},
                               {Activation::kTanh, Activation::kSigmoid}, rng);
  return m;
}

// -- forward pieces ---------------------------------------------------------------

template <typename S>
struct LstmStateT {
  TensorT<S> h;
  TensorT<S> c;
};

namespace detail {

template <typename S>
TensorT<S> apply_act(const TensorT<S>& z, Activation act) {
  switch (act) {
    case Activation::kTanh: return tanh(z);
    case Activation::kSigmoid: return sigmoid(z);
    case Activation::kIdentity: return z;
  }
  return z;
}

}  // namespace detail

/// One LSTM cell update for a batch of rows: x [B,F], state h,c [B,H].
/// i = s(xWi' + hUi' + bi), f, o likewise, g = tanh(...);
/// c' = f.c + i.g, h' = o.tanh(c').
template <typename S>
LstmStateT<S> lstm_step(const LstmParamsT<S>& p, const LstmStateT<S>& state,
                        const TensorT<S>& x) {
  if (x.ndim() != 2 || x.cols() != p.input)
    throw DimensionError("lstm_step: input " + shape_str(x.shape()) +
                         " does not match input size " + std::to_string(p.input));
  if (state.h.ndim() != 2 || state.h.cols() != p.hidden ||
      state.h.rows() != x.rows() || state.c.shape() != state.h.shape())
    throw DimensionError("lstm_step: state shape mismatch, h " +
                         shape_str(state.h.shape()) + " for x " +
                         shape_str(x.shape()));
  auto gate = [&](const TensorT<S>& W, const TensorT<S>& U, const TensorT<S>& b) {
    return add_rowwise(add(matmul_t(x, W), matmul_t(state.h, U)), b);
  };
  TensorT<S> i = sigmoid(gate(p.Wi, p.Ui, p.bi));
  TensorT<S> f = sigmoid(gate(p.Wf, p.Uf, p.bf));
  TensorT<S> g = tanh(gate(p.Wg, p.Ug, p.bg));
  TensorT<S> o = sigmoid(gate(p.Wo, p.Uo, p.bo));
  TensorT<S> c_next = add(mul(f, state.c), mul(i, g));
  TensorT<S> h_next = mul(o, tanh(c_next));
  return {h_next, c_next};
}

/// Runs the extractor over one [W,F] sequence from zero state; the final
/// hidden state is the shared feature representation.
template <typename S>
TensorT<S> encode(const LstmParamsT<S>& p, const TensorT<S>& seq) {
  if (seq.ndim() != 2 || seq.rows() < 1)
    throw DimensionError("encode: need [W,F] with W >= 1, got " +
                         shape_str(seq.shape()));
  LstmStateT<S> state{TensorT<S>::zeros({1, p.hidden}),
                      TensorT<S>::zeros({1, p.hidden})};
  const Index W = seq.rows(), F = seq.cols();
  for (Index t = 0; t < W; ++t) {
    TensorT<S> x_t(Shape{1, F},
                   ArrayX<S>(seq.values().segment(t * F, F)));
    state = lstm_step(p, state, x_t);
  }
  return reshape(state.h, {p.hidden});
}

template <typename S>
TensorT<S> head_forward(const HeadParamsT<S>& head, TensorT<S> x) {
  for (const auto& layer : head.layers)
    x = detail::apply_act(add_rowwise(matmul_t(x, layer.W), layer.b), layer.act);
  return x;
}

/// Identity forward; passes -lambda * upstream gradient during backward.
template <typename S>
TensorT<S> gradient_reversal(const TensorT<S>& x, S lambda) {
  if (lambda < S(0))
    throw ContractError("gradient_reversal: lambda must be non-negative");
  return grad_scale(x, -lambda);
}

template <typename S>
struct ForwardOutT {
  TensorT<S> y_hat;       // [B]
  TensorT<S> d_prob;      // [B], clamped into (0,1)
  TensorT<S> embeddings;  // [B,H] shared representation (second-last layer)
};

/// Full two-headed pass over a [B,W,F] batch. The domain branch goes through
/// the gradient reversal, so one backward pass trains both heads while the
/// extractor receives the adversarial signal.
template <typename S>
ForwardOutT<S> model_forward(const DannteModelT<S>& m, const TensorT<S>& batch) {
  if (batch.ndim() != 3)
    throw DimensionError("model_forward: need [B,W,F], got " +
                         shape_str(batch.shape()));
  const Index B = batch.dim(0), W = batch.dim(1), F = batch.dim(2);
  if (B < 1) throw DimensionError("model_forward: empty batch");

  TensorT<S> emb;
  if (m.kind == ExtractorKind::kLstm) {
    if (F != m.extractor.input)
      throw DimensionError("model_forward: feature count " + std::to_string(F) +
                           " does not match extractor input " +
                           std::to_string(m.extractor.input));
    LstmStateT<S> state{TensorT<S>::zeros({B, m.extractor.hidden}),
                        TensorT<S>::zeros({B, m.extractor.hidden})};
    for (Index t = 0; t < W; ++t)
      state = lstm_step(m.extractor, state, slice_time(batch, t));
    emb = state.h;
  } else {
    // flat [B, W*F] view of the batch feeds the dense extractor
    TensorT<S> flat(Shape{B, W * F}, batch.values_ptr(), nullptr, -1);
    emb = head_forward(m.ff_extractor, flat);
  }

  TensorT<S> y = reshape(head_forward(m.regressor, emb), {B});
  TensorT<S> reversed = gradient_reversal(emb, m.lambda);
  TensorT<S> d_raw = reshape(head_forward(m.domain_head, reversed), {B});
  TensorT<S> d = clamp(d_raw, S(kProbClamp), S(1) - S(kProbClamp));
  return {y, d, emb};
}

// -- losses -----------------------------------------------------------------------

/// Task loss with the target mask: mean squared error over the samples whose
/// mask is 1. Equals the plain MSE of the source sub-batch.
template <typename S>
TensorT<S> masked_mse(const TensorT<S>& y_hat, const TensorT<S>& y,
                      const TensorT<S>& source_mask) {
  if (y_hat.shape() != y.shape() || y_hat.shape() != source_mask.shape())
    throw DimensionError("masked_mse: shapes " + shape_str(y_hat.shape()) + ", " +
                         shape_str(y.shape()) + ", " +
                         shape_str(source_mask.shape()) + " must agree");
  S total = source_mask.values().sum();
  for (Index i = 0; i < source_mask.numel(); ++i) {
    S v = source_mask[i];
    if (v != S(0) && v != S(1))
      throw ContractError("masked_mse: mask entries must be 0 or 1");
  }
  if (total == S(0))
    throw ContractError("masked_mse: mask has no source samples");
  TensorT<S> diff = sub(y_hat, y);
  TensorT<S> masked = mul(mul(diff, diff), source_mask);
  return mul(reduce_sum(masked), TensorT<S>::scalar(S(1) / total));
}

/// Negative log loss of the domain classifier:
///   L_d = -1/n sum_i [ d_i log p_i + (1 - d_i) log(1 - p_i) ]
/// with d_i = 0 for source and 1 for target samples.
template <typename S>
TensorT<S> domain_bce(const TensorT<S>& d_prob, const TensorT<S>& d_label) {
  if (d_prob.shape() != d_label.shape())
    throw DimensionError("domain_bce: shapes " + shape_str(d_prob.shape()) +
                         " vs " + shape_str(d_label.shape()));
  if ((d_prob.values() <= S(0)).any() || (d_prob.values() >= S(1)).any())
    throw ContractError("domain_bce: probabilities must lie in (0,1)");
  for (Index i = 0; i < d_label.numel(); ++i) {
    S v = d_label[i];
    if (v != S(0) && v != S(1))
      throw ContractError("domain_bce: labels must be 0 or 1");
  }
  TensorT<S> ones = TensorT<S>::full(d_prob.shape(), S(1));
  TensorT<S> pos = mul(d_label, log(d_prob));
  TensorT<S> negt = mul(sub(ones, d_label), log(sub(ones, d_prob)));
  return neg(reduce_mean(add(pos, negt)));
}

/// Reported combined loss of the two heads: L_tot = L_y - lambda * L_d.
/// The optimized graph realizes the minus sign through the reversal layer;
/// this function is the reporting identity.
template <typename S>
S total_loss(S l_y, S l_d, S lambda) {
  return l_y - lambda * l_d;
}

}  // namespace dannte
