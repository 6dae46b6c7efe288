#pragma once

// The differentiable stack around the sparse posterior: embedding lookup
// (optionally a tiny bidirectional recurrent encoder), a one-hidden-layer
// arc scorer, Child-Sum TreeLSTM composition conditioned on a discrete tree,
// output heads for classification / sentence-pair / representation tasks,
// and the mixture p(y|x) = sum_h q(h) p(y|h,x) over the support.
//
// Gradients are hand-written reverse mode: each forward records the
// activations its backward needs, and the parser side chains through
// backward::expectation_backward into the arc scores. No framework.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sparsetree/backward.hpp"
#include "sparsetree/errors.hpp"
#include "sparsetree/inference.hpp"
#include "sparsetree/linalg.hpp"
#include "sparsetree/rng.hpp"
#include "sparsetree/structures.hpp"

namespace sparsetree {

enum class Task { classify, pair, revdict };

// Which distribution over trees feeds the composition: the SparseMAP
// posterior, a boring fixed structure, or an externally supplied tree.
enum class TreeSource { latent, flat, left_to_right, fixed };

struct ModelDims {
  int vocab = 64;
  int d_emb = 16;
  bool use_encoder = false;
  int d_rnn = 8;
  int d_hidden = 16;  // arc scorer hidden width
  int d_lstm = 16;
  int d_pair = 16;    // sentence-pair combiner width
  int n_classes = 2;
  int d_out = 16;     // representation output width

  int encoded_dim() const { return use_encoder ? 2 * d_rnn : d_emb; }
};

struct ModelParams {
  ModelDims dims;
  Task task = Task::classify;

  Mat emb;  // vocab x d_emb

  // Bidirectional tanh recurrences (present when dims.use_encoder).
  Mat enc_fwd_w, enc_fwd_u;
  Vec enc_fwd_b;
  Mat enc_bwd_w, enc_bwd_u;
  Vec enc_bwd_b;

  // Arc scorer: s(h,m) = w2 . tanh(W1 [v_h; v_m] + b1) + b2, with a learned
  // stand-in vector for the root symbol on the head side.
  Vec scorer_root;
  Mat scorer_w1;
  Vec scorer_b1, scorer_w2, scorer_b2;  // scorer_b2 has one entry

  // Child-Sum TreeLSTM gates; the root node consumes a learned input vector.
  Mat lstm_wi, lstm_ui, lstm_wf, lstm_uf, lstm_wo, lstm_uo, lstm_wu, lstm_uu;
  Vec lstm_bi, lstm_bf, lstm_bo, lstm_bu;
  Vec lstm_root_x;

  Mat out_w;   // classifier head (classify: from d_lstm; pair: from d_pair)
  Vec out_b;
  Mat pair_w;  // pair combiner over [vP; vH; vP-vH; vP.vH]
  Vec pair_b;
  Mat proj_w;  // representation projection
  Vec proj_b;
};

struct TensorRef {
  std::string name;
  int rows = 0, cols = 0;
  Vec* data = nullptr;
};

// Every trainable tensor, in a fixed order shared by initialization, the
// optimizer, checkpoints and the gradient checker.
inline std::vector<TensorRef> collect_tensors(ModelParams& p) {
  std::vector<TensorRef> refs;
  auto mat = [&](const char* name, Mat& m) {
    if (m.rows > 0) refs.push_back({name, m.rows, m.cols, &m.a});
  };
  auto vec = [&](const char* name, Vec& v) {
    if (!v.empty()) refs.push_back({name, static_cast<int>(v.size()), 1, &v});
  };
  mat("embeddings", p.emb);
  mat("encoder_fwd_w", p.enc_fwd_w);
  mat("encoder_fwd_u", p.enc_fwd_u);
  vec("encoder_fwd_b", p.enc_fwd_b);
  mat("encoder_bwd_w", p.enc_bwd_w);
  mat("encoder_bwd_u", p.enc_bwd_u);
  vec("encoder_bwd_b", p.enc_bwd_b);
  vec("scorer_root", p.scorer_root);
  mat("scorer_w1", p.scorer_w1);
  vec("scorer_b1", p.scorer_b1);
  vec("scorer_w2", p.scorer_w2);
  vec("scorer_b2", p.scorer_b2);
  mat("lstm_wi", p.lstm_wi);
  mat("lstm_ui", p.lstm_ui);
  vec("lstm_bi", p.lstm_bi);
  mat("lstm_wf", p.lstm_wf);
  mat("lstm_uf", p.lstm_uf);
  vec("lstm_bf", p.lstm_bf);
  mat("lstm_wo", p.lstm_wo);
  mat("lstm_uo", p.lstm_uo);
  vec("lstm_bo", p.lstm_bo);
  mat("lstm_wu", p.lstm_wu);
  mat("lstm_uu", p.lstm_uu);
  vec("lstm_bu", p.lstm_bu);
  vec("lstm_root_x", p.lstm_root_x);
  mat("pair_w", p.pair_w);
  vec("pair_b", p.pair_b);
  mat("out_w", p.out_w);
  vec("out_b", p.out_b);
  mat("proj_w", p.proj_w);
  vec("proj_b", p.proj_b);
  return refs;
}

inline ModelParams make_params(const ModelDims& dims, Task task) {
  ModelParams p;
  p.dims = dims;
  p.task = task;
  const int d_in = dims.encoded_dim();
  p.emb = Mat(dims.vocab, dims.d_emb);
  if (dims.use_encoder) {
    p.enc_fwd_w = Mat(dims.d_rnn, dims.d_emb);
    p.enc_fwd_u = Mat(dims.d_rnn, dims.d_rnn);
    p.enc_fwd_b.assign(dims.d_rnn, 0.0);
    p.enc_bwd_w = Mat(dims.d_rnn, dims.d_emb);
    p.enc_bwd_u = Mat(dims.d_rnn, dims.d_rnn);
    p.enc_bwd_b.assign(dims.d_rnn, 0.0);
  }
  p.scorer_root.assign(d_in, 0.0);
  p.scorer_w1 = Mat(dims.d_hidden, 2 * d_in);
  p.scorer_b1.assign(dims.d_hidden, 0.0);
  p.scorer_w2.assign(dims.d_hidden, 0.0);
  p.scorer_b2.assign(1, 0.0);
  for (Mat* m : {&p.lstm_wi, &p.lstm_wf, &p.lstm_wo, &p.lstm_wu}) *m = Mat(dims.d_lstm, d_in);
  for (Mat* m : {&p.lstm_ui, &p.lstm_uf, &p.lstm_uo, &p.lstm_uu}) *m = Mat(dims.d_lstm, dims.d_lstm);
  for (Vec* v : {&p.lstm_bi, &p.lstm_bf, &p.lstm_bo, &p.lstm_bu}) v->assign(dims.d_lstm, 0.0);
  p.lstm_root_x.assign(d_in, 0.0);
  if (task == Task::classify) {
    p.out_w = Mat(dims.n_classes, dims.d_lstm);
    p.out_b.assign(dims.n_classes, 0.0);
  } else if (task == Task::pair) {
    p.pair_w = Mat(dims.d_pair, 4 * dims.d_lstm);
    p.pair_b.assign(dims.d_pair, 0.0);
    p.out_w = Mat(dims.n_classes, dims.d_pair);
    p.out_b.assign(dims.n_classes, 0.0);
  } else {
    p.proj_w = Mat(dims.d_out, dims.d_lstm);
    p.proj_b.assign(dims.d_out, 0.0);
  }
  return p;
}

inline ModelParams init_params(const ModelDims& dims, Task task, Rng& rng) {
  ModelParams p = make_params(dims, task);
  for (TensorRef& ref : collect_tensors(p)) {
    if (ref.name == "embeddings" || ref.name == "scorer_root" || ref.name == "lstm_root_x") {
      const double limit = std::sqrt(3.0 / p.dims.d_emb);
      for (double& v : *ref.data) v = rng.uniform(-limit, limit);
    } else if (ref.name == "lstm_bf") {
      for (double& v : *ref.data) v = 1.0;  // open forget gates at init
    } else if (ref.cols > 1) {
      const double limit = std::sqrt(6.0 / (ref.rows + ref.cols));
      for (double& v : *ref.data) v = rng.uniform(-limit, limit);
    }  // remaining vectors are biases / output weights, left at zero
  }
  // scorer_w2 at zero would kill the parser gradient; give it a small spread.
  for (double& v : p.scorer_w2) v = rng.uniform(-0.5, 0.5);
  return p;
}

struct GradientTape {
  ModelParams grad;

  void zero() {
    for (TensorRef& ref : collect_tensors(grad))
      std::fill(ref.data->begin(), ref.data->end(), 0.0);
  }
};

inline GradientTape make_tape(const ModelParams& params) {
  GradientTape tape;
  tape.grad = make_params(params.dims, params.task);
  return tape;
}

// params -= scale * tape (shapes must match).
inline void apply_gradient(ModelParams& params, GradientTape& tape, double scale) {
  auto prefs = collect_tensors(params);
  auto grefs = collect_tensors(tape.grad);
  if (prefs.size() != grefs.size()) throw ContractError("apply_gradient: shape mismatch");
  for (size_t i = 0; i < prefs.size(); ++i)
    axpy(-scale, *grefs[i].data, *prefs[i].data);
}

namespace nn {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline Vec affine(const Mat& w, const Vec& x, const Vec& b) {
  Vec y = matvec(w, x);
  for (size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Encoder

struct EncodeTrace {
  std::vector<Vec> emb_rows;
  std::vector<Vec> hf, hb;  // recurrent states (encoder only)
  std::vector<Vec> v;       // token vectors fed to scorer and TreeLSTM
};

inline EncodeTrace encode(const Sentence& sentence, const ModelParams& params) {
  const int n = sentence.n();
  if (n < 1) throw InputError("encode: empty sentence");
  EncodeTrace trace;
  trace.emb_rows.resize(n);
  for (int i = 0; i < n; ++i) {
    const int id = sentence.token_ids[i];
    if (id < 0 || id >= params.dims.vocab)
      throw InputError("encode: token id " + std::to_string(id) + " outside vocabulary");
    Vec row(params.dims.d_emb);
    for (int c = 0; c < params.dims.d_emb; ++c) row[c] = params.emb(id, c);
    trace.emb_rows[i] = std::move(row);
  }
  if (!params.dims.use_encoder) {
    trace.v = trace.emb_rows;
    return trace;
  }
  const int d = params.dims.d_rnn;
  trace.hf.assign(n, Vec(d, 0.0));
  trace.hb.assign(n, Vec(d, 0.0));
  Vec state(d, 0.0);
  for (int i = 0; i < n; ++i) {
    Vec a = nn::affine(params.enc_fwd_w, trace.emb_rows[i], params.enc_fwd_b);
    axpy(1.0, matvec(params.enc_fwd_u, state), a);
    for (double& x : a) x = std::tanh(x);
    trace.hf[i] = a;
    state = trace.hf[i];
  }
  state.assign(d, 0.0);
  for (int i = n - 1; i >= 0; --i) {
    Vec a = nn::affine(params.enc_bwd_w, trace.emb_rows[i], params.enc_bwd_b);
    axpy(1.0, matvec(params.enc_bwd_u, state), a);
    for (double& x : a) x = std::tanh(x);
    trace.hb[i] = a;
    state = trace.hb[i];
  }
  trace.v.assign(n, Vec(2 * d, 0.0));
  for (int i = 0; i < n; ++i) {
    std::copy(trace.hf[i].begin(), trace.hf[i].end(), trace.v[i].begin());
    std::copy(trace.hb[i].begin(), trace.hb[i].end(), trace.v[i].begin() + d);
  }
  return trace;
}

inline void encode_backward(const EncodeTrace& trace, const Sentence& sentence,
                            const ModelParams& params, const std::vector<Vec>& dv,
                            GradientTape& tape) {
  const int n = sentence.n();
  ModelParams& g = tape.grad;
  std::vector<Vec> demb(n, Vec(params.dims.d_emb, 0.0));

  if (!params.dims.use_encoder) {
    for (int i = 0; i < n; ++i) demb[i] = dv[i];
  } else {
    const int d = params.dims.d_rnn;
    // Forward direction: gradient flows from i back to i-1.
    Vec carry(d, 0.0);
    for (int i = n - 1; i >= 0; --i) {
      Vec dh(d);
      for (int k = 0; k < d; ++k) dh[k] = dv[i][k] + carry[k];
      Vec da(d);
      for (int k = 0; k < d; ++k) da[k] = dh[k] * (1.0 - trace.hf[i][k] * trace.hf[i][k]);
      add_outer(g.enc_fwd_w, da, trace.emb_rows[i]);
      if (i > 0) add_outer(g.enc_fwd_u, da, trace.hf[i - 1]);
      axpy(1.0, da, g.enc_fwd_b);
      axpy(1.0, matTvec(params.enc_fwd_w, da), demb[i]);
      carry = matTvec(params.enc_fwd_u, da);
    }
    // Backward direction: gradient flows from i forward to i+1.
    carry.assign(d, 0.0);
    for (int i = 0; i < n; ++i) {
      Vec dh(d);
      for (int k = 0; k < d; ++k) dh[k] = dv[i][d + k] + carry[k];
      Vec da(d);
      for (int k = 0; k < d; ++k) da[k] = dh[k] * (1.0 - trace.hb[i][k] * trace.hb[i][k]);
      add_outer(g.enc_bwd_w, da, trace.emb_rows[i]);
      if (i < n - 1) add_outer(g.enc_bwd_u, da, trace.hb[i + 1]);
      axpy(1.0, da, g.enc_bwd_b);
      axpy(1.0, matTvec(params.enc_bwd_w, da), demb[i]);
      carry = matTvec(params.enc_bwd_u, da);
    }
  }
  for (int i = 0; i < n; ++i) {
    const int id = sentence.token_ids[i];
    for (int c = 0; c < params.dims.d_emb; ++c) g.emb(id, c) += demb[i][c];
  }
}

// ---------------------------------------------------------------------------
// Arc scorer

struct ScoreTrace {
  ArcScores scores;
  std::vector<Vec> hidden;  // tanh layer per arc slot (legal slots only)
};

inline ScoreTrace score_arcs(const std::vector<Vec>& v, const ModelParams& params) {
  const int n = static_cast<int>(v.size());
  ScoreTrace trace;
  trace.scores = ArcScores::zeros(n);
  trace.hidden.assign(arc_slot_count(n), Vec());
  const int d_in = params.dims.encoded_dim();
  Vec z(2 * d_in, 0.0);
  for (int mod = 1; mod <= n; ++mod) {
    for (int head = 0; head <= n; ++head) {
      if (head == mod) continue;
      const Vec& vh = (head == 0) ? params.scorer_root : v[head - 1];
      std::copy(vh.begin(), vh.end(), z.begin());
      std::copy(v[mod - 1].begin(), v[mod - 1].end(), z.begin() + d_in);
      Vec hid = nn::affine(params.scorer_w1, z, params.scorer_b1);
      for (double& x : hid) x = std::tanh(x);
      const int slot = arc_slot(head, mod, n);
      trace.scores.s[slot] = dot(params.scorer_w2, hid) + params.scorer_b2[0];
      trace.hidden[slot] = std::move(hid);
    }
  }
  return trace;
}

inline void score_arcs_backward(const ScoreTrace& trace, const std::vector<Vec>& v,
                                const ModelParams& params, const Vec& dscores,
                                GradientTape& tape, std::vector<Vec>& dv) {
  const int n = static_cast<int>(v.size());
  const int d_in = params.dims.encoded_dim();
  ModelParams& g = tape.grad;
  Vec z(2 * d_in, 0.0);
  for (int mod = 1; mod <= n; ++mod) {
    for (int head = 0; head <= n; ++head) {
      if (head == mod) continue;
      const int slot = arc_slot(head, mod, n);
      const double ds = dscores[slot];
      if (ds == 0.0) continue;
      const Vec& hid = trace.hidden[slot];
      const Vec& vh = (head == 0) ? params.scorer_root : v[head - 1];
      std::copy(vh.begin(), vh.end(), z.begin());
      std::copy(v[mod - 1].begin(), v[mod - 1].end(), z.begin() + d_in);

      Vec da(hid.size());
      for (size_t k = 0; k < hid.size(); ++k)
        da[k] = ds * params.scorer_w2[k] * (1.0 - hid[k] * hid[k]);
      add_outer(g.scorer_w1, da, z);
      axpy(1.0, da, g.scorer_b1);
      axpy(ds, hid, g.scorer_w2);
      g.scorer_b2[0] += ds;

      const Vec dz = matTvec(params.scorer_w1, da);
      if (head == 0) {
        for (int k = 0; k < d_in; ++k) g.scorer_root[k] += dz[k];
      } else {
        for (int k = 0; k < d_in; ++k) dv[head - 1][k] += dz[k];
      }
      for (int k = 0; k < d_in; ++k) dv[mod - 1][k] += dz[d_in + k];
    }
  }
}

// ---------------------------------------------------------------------------
// Child-Sum TreeLSTM

struct TreeTrace {
  std::vector<std::vector<int>> children;  // node 0 is the root symbol
  std::vector<int> order;                  // post-order, root last
  std::vector<Vec> hsum, gi, go, gu, c, h, tanh_c;
  std::vector<std::vector<Vec>> fgate;     // aligned with children lists
  Vec root_h;
};

inline TreeTrace compose_tree(const DepTree& tree, const std::vector<Vec>& v,
                              const ModelParams& params) {
  if (!is_valid_tree(tree)) throw ContractError("compose_tree: invalid tree");
  const int n = tree.n();
  if (static_cast<int>(v.size()) != n)
    throw ContractError("compose_tree: vectors do not match the tree size");
  const int d = params.dims.d_lstm;

  TreeTrace trace;
  trace.children.assign(n + 1, {});
  for (int t = 1; t <= n; ++t) trace.children[tree.head_of(t)].push_back(t);

  trace.order.reserve(n + 1);
  std::vector<int> stack = {0};
  std::vector<int> visit;  // pre-order, then reversed into post-order
  while (!stack.empty()) {
    const int node = stack.back();
    stack.pop_back();
    visit.push_back(node);
    for (int child : trace.children[node]) stack.push_back(child);
  }
  trace.order.assign(visit.rbegin(), visit.rend());

  trace.hsum.assign(n + 1, Vec());
  trace.gi.assign(n + 1, Vec());
  trace.go.assign(n + 1, Vec());
  trace.gu.assign(n + 1, Vec());
  trace.c.assign(n + 1, Vec());
  trace.h.assign(n + 1, Vec());
  trace.tanh_c.assign(n + 1, Vec());
  trace.fgate.assign(n + 1, {});

  for (int node : trace.order) {
    const Vec& x = (node == 0) ? params.lstm_root_x : v[node - 1];
    Vec hsum(d, 0.0);
    for (int child : trace.children[node]) axpy(1.0, trace.h[child], hsum);

    Vec ai = nn::affine(params.lstm_wi, x, params.lstm_bi);
    axpy(1.0, matvec(params.lstm_ui, hsum), ai);
    Vec ao = nn::affine(params.lstm_wo, x, params.lstm_bo);
    axpy(1.0, matvec(params.lstm_uo, hsum), ao);
    Vec au = nn::affine(params.lstm_wu, x, params.lstm_bu);
    axpy(1.0, matvec(params.lstm_uu, hsum), au);
    for (int k = 0; k < d; ++k) {
      ai[k] = nn::sigmoid(ai[k]);
      ao[k] = nn::sigmoid(ao[k]);
      au[k] = std::tanh(au[k]);
    }

    Vec c(d);
    for (int k = 0; k < d; ++k) c[k] = ai[k] * au[k];
    std::vector<Vec> fgates;
    fgates.reserve(trace.children[node].size());
    for (int child : trace.children[node]) {
      Vec af = nn::affine(params.lstm_wf, x, params.lstm_bf);
      axpy(1.0, matvec(params.lstm_uf, trace.h[child]), af);
      for (int k = 0; k < d; ++k) {
        af[k] = nn::sigmoid(af[k]);
        c[k] += af[k] * trace.c[child][k];
      }
      fgates.push_back(std::move(af));
    }

    Vec tc(d), h(d);
    for (int k = 0; k < d; ++k) {
      tc[k] = std::tanh(c[k]);
      h[k] = ao[k] * tc[k];
    }
    trace.hsum[node] = std::move(hsum);
    trace.gi[node] = std::move(ai);
    trace.go[node] = std::move(ao);
    trace.gu[node] = std::move(au);
    trace.c[node] = std::move(c);
    trace.tanh_c[node] = std::move(tc);
    trace.h[node] = std::move(h);
    trace.fgate[node] = std::move(fgates);
  }
  trace.root_h = trace.h[0];
  return trace;
}

// Backpropagates droot (gradient at the root hidden state) through the tree,
// accumulating parameter gradients and per-token vector gradients into dv.
inline void compose_tree_backward(const TreeTrace& trace, const DepTree& tree,
                                  const std::vector<Vec>& v, const ModelParams& params,
                                  const Vec& droot, GradientTape& tape,
                                  std::vector<Vec>& dv) {
  const int n = tree.n();
  const int d = params.dims.d_lstm;
  ModelParams& g = tape.grad;

  std::vector<Vec> dh(n + 1, Vec(d, 0.0)), dc(n + 1, Vec(d, 0.0));
  dh[0] = droot;

  for (auto it = trace.order.rbegin(); it != trace.order.rend(); ++it) {
    const int node = *it;
    const Vec& x = (node == 0) ? params.lstm_root_x : v[node - 1];
    const Vec& gi = trace.gi[node];
    const Vec& go = trace.go[node];
    const Vec& gu = trace.gu[node];
    const Vec& tc = trace.tanh_c[node];

    Vec dao(d), dcc = dc[node];
    for (int k = 0; k < d; ++k) {
      dao[k] = dh[node][k] * tc[k] * go[k] * (1.0 - go[k]);
      dcc[k] += dh[node][k] * go[k] * (1.0 - tc[k] * tc[k]);
    }
    Vec dai(d), dau(d);
    for (int k = 0; k < d; ++k) {
      dai[k] = dcc[k] * gu[k] * gi[k] * (1.0 - gi[k]);
      dau[k] = dcc[k] * gi[k] * (1.0 - gu[k] * gu[k]);
    }

    add_outer(g.lstm_wi, dai, x);
    add_outer(g.lstm_ui, dai, trace.hsum[node]);
    axpy(1.0, dai, g.lstm_bi);
    add_outer(g.lstm_wo, dao, x);
    add_outer(g.lstm_uo, dao, trace.hsum[node]);
    axpy(1.0, dao, g.lstm_bo);
    add_outer(g.lstm_wu, dau, x);
    add_outer(g.lstm_uu, dau, trace.hsum[node]);
    axpy(1.0, dau, g.lstm_bu);

    Vec dx = matTvec(params.lstm_wi, dai);
    axpy(1.0, matTvec(params.lstm_wo, dao), dx);
    axpy(1.0, matTvec(params.lstm_wu, dau), dx);
    Vec dhsum = matTvec(params.lstm_ui, dai);
    axpy(1.0, matTvec(params.lstm_uo, dao), dhsum);
    axpy(1.0, matTvec(params.lstm_uu, dau), dhsum);

    const auto& children = trace.children[node];
    for (size_t ci = 0; ci < children.size(); ++ci) {
      const int child = children[ci];
      const Vec& fg = trace.fgate[node][ci];
      Vec daf(d);
      for (int k = 0; k < d; ++k) {
        daf[k] = dcc[k] * trace.c[child][k] * fg[k] * (1.0 - fg[k]);
        dc[child][k] += dcc[k] * fg[k];
        dh[child][k] += dhsum[k];
      }
      add_outer(g.lstm_wf, daf, x);
      add_outer(g.lstm_uf, daf, trace.h[child]);
      axpy(1.0, daf, g.lstm_bf);
      axpy(1.0, matTvec(params.lstm_wf, daf), dx);
      axpy(1.0, matTvec(params.lstm_uf, daf), dh[child]);
    }

    if (node == 0) {
      axpy(1.0, dx, g.lstm_root_x);
    } else {
      axpy(1.0, dx, dv[node - 1]);
    }
  }
}

// ---------------------------------------------------------------------------
// Baseline structures

inline DepTree flat_tree(int n) {
  if (n < 1) throw InputError("flat_tree: need n >= 1");
  return DepTree{std::vector<int>(n, 0)};
}

inline DepTree left_to_right_tree(int n) {
  if (n < 1) throw InputError("left_to_right_tree: need n >= 1");
  std::vector<int> heads(n);
  for (int i = 0; i < n - 1; ++i) heads[i] = i + 2;
  heads[n - 1] = 0;
  return DepTree{heads};
}

// ---------------------------------------------------------------------------
// Forward / backward through the mixture

struct ForwardConfig {
  SolverConfig solver{};
  double temperature = 1.0;
  TreeSource tree_source = TreeSource::latent;
  DepTree fixed_tree{};  // consumed when tree_source == fixed
};

// Carrier posterior for a forced structure: a point mass whose Jacobian
// vanishes, so no gradient reaches the parser.
inline SparsePosterior point_mass_posterior(const DepTree& tree) {
  if (!is_valid_tree(tree)) throw ContractError("point_mass_posterior: invalid tree");
  SparsePosterior post;
  post.n = tree.n();
  post.support = {tree};
  post.q = {1.0};
  post.u = arc_marginals(post.support, post.q, post.n);
  post.Z = Mat(1, 1);
  post.Z(0, 0) = 1.0 / post.n;
  post.tau = 0.0;
  post.converged = true;
  return post;
}

struct LatentForward {
  EncodeTrace enc;
  ScoreTrace score;        // populated only for the latent source
  SparsePosterior post;
  std::vector<TreeTrace> traces;
  std::vector<Vec> tree_logits;
  std::vector<Vec> tree_probs;  // p(y | h, x) per support tree
  Vec probs;                    // the mixture p(y | x)
  double temperature = 1.0;
  TreeSource source = TreeSource::latent;
};

inline SparsePosterior resolve_posterior(const std::vector<Vec>& v, LatentForward& fwd,
                                         const ForwardConfig& config,
                                         const ModelParams& params) {
  const int n = static_cast<int>(v.size());
  switch (config.tree_source) {
    case TreeSource::latent: {
      fwd.score = score_arcs(v, params);
      const ArcScores scaled = (config.temperature == 1.0)
                                   ? fwd.score.scores
                                   : scale_temperature(fwd.score.scores, config.temperature);
      return sparsemap(scaled, config.solver);
    }
    case TreeSource::flat:
      return point_mass_posterior(flat_tree(n));
    case TreeSource::left_to_right:
      return point_mass_posterior(left_to_right_tree(n));
    case TreeSource::fixed:
      return point_mass_posterior(config.fixed_tree);
  }
  throw ContractError("resolve_posterior: unknown tree source");
}

inline LatentForward forward_latent(const Sentence& sentence, const ModelParams& params,
                                    const ForwardConfig& config = {}) {
  if (params.task != Task::classify)
    throw ContractError("forward_latent: model head is not a classifier");
  LatentForward fwd;
  fwd.temperature = config.temperature;
  fwd.source = config.tree_source;
  fwd.enc = encode(sentence, params);
  fwd.post = resolve_posterior(fwd.enc.v, fwd, config, params);

  fwd.probs.assign(params.dims.n_classes, 0.0);
  for (int i = 0; i < fwd.post.support_size(); ++i) {
    TreeTrace trace = compose_tree(fwd.post.support[i], fwd.enc.v, params);
    Vec logits = nn::affine(params.out_w, trace.root_h, params.out_b);
    Vec probs = softmax(logits);
    axpy(fwd.post.q[i], probs, fwd.probs);
    fwd.traces.push_back(std::move(trace));
    fwd.tree_logits.push_back(std::move(logits));
    fwd.tree_probs.push_back(std::move(probs));
  }
  return fwd;
}

namespace nn {

// d(softmax)/d(logits) applied to an upstream gradient.
inline Vec softmax_backward(const Vec& probs, const Vec& dprobs) {
  const double inner = dot(probs, dprobs);
  Vec dlogits(probs.size());
  for (size_t i = 0; i < probs.size(); ++i) dlogits[i] = probs[i] * (dprobs[i] - inner);
  return dlogits;
}

}  // namespace nn

// Accumulates d(loss)/d(params) given dprobs = d(loss)/d(mixture). The
// classifier side weights each tree's backprop by q(h); the parser side goes
// through expectation_backward into arc scores, the scorer and the encoder.
// Embeddings collect both contributions.
inline void backward_latent(const LatentForward& fwd, const Sentence& sentence,
                            const ModelParams& params, const Vec& dprobs,
                            GradientTape& tape) {
  if (fwd.tree_probs.size() != static_cast<size_t>(fwd.post.support_size()))
    throw ContractError("backward_latent: intermediates do not match the posterior");
  const int n = sentence.n();
  ModelParams& g = tape.grad;
  std::vector<Vec> dv(n, Vec(params.dims.encoded_dim(), 0.0));

  for (int i = 0; i < fwd.post.support_size(); ++i) {
    Vec dtree_probs(dprobs.size());
    for (size_t k = 0; k < dprobs.size(); ++k) dtree_probs[k] = fwd.post.q[i] * dprobs[k];
    const Vec dlogits = nn::softmax_backward(fwd.tree_probs[i], dtree_probs);
    add_outer(g.out_w, dlogits, fwd.traces[i].root_h);
    axpy(1.0, dlogits, g.out_b);
    const Vec droot = matTvec(params.out_w, dlogits);
    compose_tree_backward(fwd.traces[i], fwd.post.support[i], fwd.enc.v, params, droot,
                          tape, dv);
  }

  if (fwd.source == TreeSource::latent) {
    const ExpectationGrad eg = expectation_backward(fwd.post, fwd.tree_probs, dprobs);
    Vec darc = eg.arc_grad;
    if (fwd.temperature != 1.0)
      for (double& x : darc) x /= fwd.temperature;
    score_arcs_backward(fwd.score, fwd.enc.v, params, darc, tape, dv);
  }

  encode_backward(fwd.enc, sentence, params, dv, tape);
}

// ---------------------------------------------------------------------------
// Sentence pairs: nested sum over both supports

struct PairForward {
  EncodeTrace enc_p, enc_h;
  ScoreTrace score_p, score_h;
  SparsePosterior post_p, post_h;
  std::vector<TreeTrace> traces_p, traces_h;
  std::vector<Vec> feats, combos;   // per tree pair, flattened row-major
  std::vector<Vec> pair_probs;      // p(y | h_P, h_H, x) per pair
  Vec probs;
  double temperature = 1.0;
  TreeSource source = TreeSource::latent;
};

inline PairForward pair_forward(const Sentence& premise, const Sentence& hypothesis,
                                const ModelParams& params, const ForwardConfig& config = {}) {
  if (params.task != Task::pair)
    throw ContractError("pair_forward: model head is not a pair classifier");
  if (config.tree_source == TreeSource::fixed)
    throw InputError("pair_forward: externally fixed trees are not supported for pairs");
  PairForward fwd;
  fwd.temperature = config.temperature;
  fwd.source = config.tree_source;

  LatentForward side;  // reuse the posterior plumbing for each sentence
  fwd.enc_p = encode(premise, params);
  fwd.post_p = resolve_posterior(fwd.enc_p.v, side, config, params);
  fwd.score_p = std::move(side.score);
  fwd.enc_h = encode(hypothesis, params);
  fwd.post_h = resolve_posterior(fwd.enc_h.v, side, config, params);
  fwd.score_h = std::move(side.score);

  for (int i = 0; i < fwd.post_p.support_size(); ++i)
    fwd.traces_p.push_back(compose_tree(fwd.post_p.support[i], fwd.enc_p.v, params));
  for (int j = 0; j < fwd.post_h.support_size(); ++j)
    fwd.traces_h.push_back(compose_tree(fwd.post_h.support[j], fwd.enc_h.v, params));

  const int d = params.dims.d_lstm;
  fwd.probs.assign(params.dims.n_classes, 0.0);
  for (int i = 0; i < fwd.post_p.support_size(); ++i) {
    for (int j = 0; j < fwd.post_h.support_size(); ++j) {
      const Vec& vp = fwd.traces_p[i].root_h;
      const Vec& vh = fwd.traces_h[j].root_h;
      Vec feat(4 * d);
      for (int k = 0; k < d; ++k) {
        feat[k] = vp[k];
        feat[d + k] = vh[k];
        feat[2 * d + k] = vp[k] - vh[k];
        feat[3 * d + k] = vp[k] * vh[k];
      }
      Vec combo = nn::affine(params.pair_w, feat, params.pair_b);
      for (double& x : combo) x = std::tanh(x);
      Vec probs = softmax(nn::affine(params.out_w, combo, params.out_b));
      axpy(fwd.post_p.q[i] * fwd.post_h.q[j], probs, fwd.probs);
      fwd.feats.push_back(std::move(feat));
      fwd.combos.push_back(std::move(combo));
      fwd.pair_probs.push_back(std::move(probs));
    }
  }
  return fwd;
}

inline void pair_backward(const PairForward& fwd, const Sentence& premise,
                          const Sentence& hypothesis, const ModelParams& params,
                          const Vec& dprobs, GradientTape& tape) {
  const int d = params.dims.d_lstm;
  const int sp = fwd.post_p.support_size(), sh = fwd.post_h.support_size();
  ModelParams& g = tape.grad;

  std::vector<Vec> droot_p(sp, Vec(d, 0.0)), droot_h(sh, Vec(d, 0.0));
  Vec gbar_p(sp, 0.0), gbar_h(sh, 0.0);

  for (int i = 0; i < sp; ++i) {
    for (int j = 0; j < sh; ++j) {
      const int idx = i * sh + j;
      const double weight = fwd.post_p.q[i] * fwd.post_h.q[j];
      const double upstream = dot(dprobs, fwd.pair_probs[idx]);
      gbar_p[i] += fwd.post_h.q[j] * upstream;
      gbar_h[j] += fwd.post_p.q[i] * upstream;

      Vec dpair(dprobs.size());
      for (size_t k = 0; k < dprobs.size(); ++k) dpair[k] = weight * dprobs[k];
      const Vec dlogits = nn::softmax_backward(fwd.pair_probs[idx], dpair);
      add_outer(g.out_w, dlogits, fwd.combos[idx]);
      axpy(1.0, dlogits, g.out_b);
      Vec dcombo = matTvec(params.out_w, dlogits);
      for (int k = 0; k < params.dims.d_pair; ++k)
        dcombo[k] *= 1.0 - fwd.combos[idx][k] * fwd.combos[idx][k];
      add_outer(g.pair_w, dcombo, fwd.feats[idx]);
      axpy(1.0, dcombo, g.pair_b);
      const Vec dfeat = matTvec(params.pair_w, dcombo);

      const Vec& vp = fwd.traces_p[i].root_h;
      const Vec& vh = fwd.traces_h[j].root_h;
      for (int k = 0; k < d; ++k) {
        droot_p[i][k] += dfeat[k] + dfeat[2 * d + k] + dfeat[3 * d + k] * vh[k];
        droot_h[j][k] += dfeat[d + k] - dfeat[2 * d + k] + dfeat[3 * d + k] * vp[k];
      }
    }
  }

  std::vector<Vec> dv_p(premise.n(), Vec(params.dims.encoded_dim(), 0.0));
  std::vector<Vec> dv_h(hypothesis.n(), Vec(params.dims.encoded_dim(), 0.0));
  for (int i = 0; i < sp; ++i)
    compose_tree_backward(fwd.traces_p[i], fwd.post_p.support[i], fwd.enc_p.v, params,
                          droot_p[i], tape, dv_p);
  for (int j = 0; j < sh; ++j)
    compose_tree_backward(fwd.traces_h[j], fwd.post_h.support[j], fwd.enc_h.v, params,
                          droot_h[j], tape, dv_h);

  if (fwd.source == TreeSource::latent) {
    Vec darc_p = grad_scores(fwd.post_p, gbar_p);
    Vec darc_h = grad_scores(fwd.post_h, gbar_h);
    if (fwd.temperature != 1.0) {
      for (double& x : darc_p) x /= fwd.temperature;
      for (double& x : darc_h) x /= fwd.temperature;
    }
    score_arcs_backward(fwd.score_p, fwd.enc_p.v, params, darc_p, tape, dv_p);
    score_arcs_backward(fwd.score_h, fwd.enc_h.v, params, darc_h, tape, dv_h);
  }

  encode_backward(fwd.enc_p, premise, params, dv_p, tape);
  encode_backward(fwd.enc_h, hypothesis, params, dv_h, tape);
}

// ---------------------------------------------------------------------------
// Expected representation (vector output head)

struct RevdictForward {
  EncodeTrace enc;
  ScoreTrace score;
  SparsePosterior post;
  std::vector<TreeTrace> traces;
  std::vector<Vec> proj;    // pre-normalization projections
  std::vector<double> norm; // their Euclidean norms
  std::vector<Vec> r;       // unit per-tree representations
  Vec rbar;                 // expectation; NOT re-normalized
  double temperature = 1.0;
  TreeSource source = TreeSource::latent;
};

inline RevdictForward expected_representation(const Sentence& sentence,
                                              const ModelParams& params,
                                              const ForwardConfig& config = {}) {
  if (params.task != Task::revdict)
    throw ContractError("expected_representation: model head is not a projector");
  RevdictForward fwd;
  fwd.temperature = config.temperature;
  fwd.source = config.tree_source;
  fwd.enc = encode(sentence, params);
  LatentForward side;
  fwd.post = resolve_posterior(fwd.enc.v, side, config, params);
  fwd.score = std::move(side.score);

  fwd.rbar.assign(params.dims.d_out, 0.0);
  for (int i = 0; i < fwd.post.support_size(); ++i) {
    TreeTrace trace = compose_tree(fwd.post.support[i], fwd.enc.v, params);
    Vec proj = nn::affine(params.proj_w, trace.root_h, params.proj_b);
    const double norm = l2_norm(proj);
    if (norm < 1e-12)
      throw NumericalError("expected_representation: zero vector before normalization");
    Vec r(proj.size());
    for (size_t k = 0; k < proj.size(); ++k) r[k] = proj[k] / norm;
    axpy(fwd.post.q[i], r, fwd.rbar);
    fwd.traces.push_back(std::move(trace));
    fwd.proj.push_back(std::move(proj));
    fwd.norm.push_back(norm);
    fwd.r.push_back(std::move(r));
  }
  return fwd;
}

inline void revdict_backward(const RevdictForward& fwd, const Sentence& sentence,
                             const ModelParams& params, const Vec& drbar,
                             GradientTape& tape) {
  const int n = sentence.n();
  ModelParams& g = tape.grad;
  std::vector<Vec> dv(n, Vec(params.dims.encoded_dim(), 0.0));

  for (int i = 0; i < fwd.post.support_size(); ++i) {
    // Through the unit normalization: dproj = (I - r r^T) dr / ||proj||.
    const Vec& r = fwd.r[i];
    Vec dr(drbar.size());
    for (size_t k = 0; k < drbar.size(); ++k) dr[k] = fwd.post.q[i] * drbar[k];
    const double inner = dot(r, dr);
    Vec dproj(dr.size());
    for (size_t k = 0; k < dr.size(); ++k) dproj[k] = (dr[k] - r[k] * inner) / fwd.norm[i];
    add_outer(g.proj_w, dproj, fwd.traces[i].root_h);
    axpy(1.0, dproj, g.proj_b);
    const Vec droot = matTvec(params.proj_w, dproj);
    compose_tree_backward(fwd.traces[i], fwd.post.support[i], fwd.enc.v, params, droot,
                          tape, dv);
  }

  if (fwd.source == TreeSource::latent) {
    const ExpectationGrad eg = expectation_backward(fwd.post, fwd.r, drbar);
    Vec darc = eg.arc_grad;
    if (fwd.temperature != 1.0)
      for (double& x : darc) x /= fwd.temperature;
    score_arcs_backward(fwd.score, fwd.enc.v, params, darc, tape, dv);
  }

  encode_backward(fwd.enc, sentence, params, dv, tape);
}

// ---------------------------------------------------------------------------
// Losses

struct NllResult {
  double value = 0.0;
  bool clamped = false;  // p(y|x) hit the 1e-12 floor
};

inline NllResult nll_loss(const Vec& probs, int label) {
  if (label < 0 || label >= static_cast<int>(probs.size()))
    throw InputError("nll_loss: label out of range");
  NllResult res;
  const double p = probs[label];
  res.clamped = p < 1e-12;
  res.value = -std::log(std::max(p, 1e-12));
  return res;
}

inline Vec nll_backward(const Vec& probs, int label) {
  Vec d(probs.size(), 0.0);
  d[label] = -1.0 / std::max(probs[label], 1e-12);
  return d;
}

inline double cosine_loss(const Vec& r, const Vec& target) {
  if (r.size() != target.size()) throw InputError("cosine_loss: dimension mismatch");
  const double nr = l2_norm(r), nt = l2_norm(target);
  if (nr < 1e-12 || nt < 1e-12) throw NumericalError("cosine_loss: zero-norm vector");
  return 1.0 - dot(r, target) / (nr * nt);
}

inline Vec cosine_loss_backward(const Vec& r, const Vec& target) {
  const double nr = l2_norm(r), nt = l2_norm(target);
  if (nr < 1e-12 || nt < 1e-12) throw NumericalError("cosine_loss: zero-norm vector");
  const double inner = dot(r, target);
  Vec d(r.size());
  for (size_t k = 0; k < r.size(); ++k)
    d[k] = -(target[k] / (nr * nt) - inner * r[k] / (nr * nr * nr * nt));
  return d;
}

}  // namespace sparsetree
