#include "btgat/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace btgat {

std::size_t ParameterSet::add(std::string name, Tensor value) {
  if (find(name)) throw std::invalid_argument("duplicate parameter name " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<std::size_t> ParameterSet::find(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - names_.begin());
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.size();
  return n;
}

Binding::Binding(const ParameterSet& params, Tape* tape) : tape_(tape) {
  vars_.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    vars_.push_back(tape ? tape->leaf(params.value(i)) : Var(params.value(i)));
}

void Binding::substitute(std::size_t id, Var v) {
  if (v.shape() != vars_.at(id).shape())
    throw ShapeError("Binding::substitute: shape " + shape_str(v.shape()) + " for parameter of shape " +
                     shape_str(vars_.at(id).shape()));
  vars_[id] = std::move(v);
}

std::vector<Tensor> Binding::gradients(const Gradients& grads) const {
  std::vector<Tensor> out;
  out.reserve(vars_.size());
  for (const auto& v : vars_) out.push_back(grads[v]);
  return out;
}

Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& v : t.data()) v = rng.uniform(-limit, limit);
  return t;
}

// ---------------------------------------------------------------------------
// ConvLSTM

ConvLSTMCell make_convlstm_cell(ParameterSet& params, const std::string& prefix,
                                std::size_t cin, std::size_t cout, Rng& rng) {
  if (cin == 0 || cout == 0) throw std::invalid_argument("ConvLSTM channel counts must be >= 1");
  ConvLSTMCell c;
  c.in_channels = cin;
  c.out_channels = cout;
  c.w_input = params.add(prefix + ".w_input",
                         glorot_uniform({3, 3, cin, 4 * cout}, 9 * cin, 9 * 4 * cout, rng));
  c.w_hidden = params.add(prefix + ".w_hidden",
                          glorot_uniform({3, 3, cout, 4 * cout}, 9 * cout, 9 * 4 * cout, rng));
  Tensor bias({4 * cout}, 0.0);
  for (std::size_t i = cout; i < 2 * cout; ++i) bias[i] = 1.0;  // forget gate
  c.bias = params.add(prefix + ".bias", std::move(bias));
  c.norm_gain = params.add(prefix + ".norm_gain", Tensor({cout}, 1.0));
  c.norm_shift = params.add(prefix + ".norm_shift", Tensor({cout}, 0.0));
  c.w_residual =
      params.add(prefix + ".w_residual", glorot_uniform({1, 1, cin, cout}, cin, cout, rng));
  return c;
}

LSTMState convlstm_zero_state(const ConvLSTMCell& cell, std::size_t height, std::size_t width) {
  Tensor z({height, width, cell.out_channels}, 0.0);
  return {Var(z), Var(z)};
}

namespace {

// Gate pre-activations z (..., 4C) -> new state.
LSTMState gate_update(const Var& z, std::size_t C, const LSTMState& state) {
  Var i = ops::sigmoid(ops::slice(z, -1, 0, C));
  Var f = ops::sigmoid(ops::slice(z, -1, C, C));
  Var g = ops::tanh(ops::slice(z, -1, 2 * C, C));
  Var o = ops::sigmoid(ops::slice(z, -1, 3 * C, C));
  Var c = ops::add(ops::mul(f, state.c), ops::mul(i, g));
  Var h = ops::mul(o, ops::tanh(c));
  return {h, c};
}

LSTMState convlstm_recur(const ConvLSTMCell& cell, const Binding& p, const Var& input_gates,
                         const LSTMState& state) {
  Var z = ops::add(ops::add(input_gates, ops::conv2d(state.h, p[cell.w_hidden])), p[cell.bias]);
  return gate_update(z, cell.out_channels, state);
}

Var convlstm_post(const ConvLSTMCell& cell, const Binding& p, const Var& h, const Var& residual) {
  Var normed = ops::add(ops::mul(ops::layer_norm(h), p[cell.norm_gain]), p[cell.norm_shift]);
  return ops::add(normed, residual);
}

void check_channels(const ConvLSTMCell& cell, const Shape& s) {
  if (s.back() != cell.in_channels)
    throw ShapeError("convlstm: expected " + std::to_string(cell.in_channels) +
                     " input channels, got " + shape_str(s));
}

}  // namespace

ConvLSTMStep convlstm_step(const ConvLSTMCell& cell, const Binding& p, const Var& x_t,
                           const LSTMState& state) {
  if (x_t.shape().size() != 3) throw ShapeError("convlstm_step: expected (H,W,Cin), got " + shape_str(x_t.shape()));
  check_channels(cell, x_t.shape());
  const Shape want{x_t.shape()[0], x_t.shape()[1], cell.out_channels};
  if (state.h.shape() != want || state.c.shape() != want)
    throw ShapeError("convlstm_step: state must be " + shape_str(want) + ", got " +
                     shape_str(state.h.shape()));
  LSTMState next = convlstm_recur(cell, p, ops::conv2d(x_t, p[cell.w_input]), state);
  Var out = convlstm_post(cell, p, next.h, ops::conv2d(x_t, p[cell.w_residual]));
  return {out, next};
}

Var convlstm_sequence(const ConvLSTMCell& cell, const Binding& p, const Var& xs,
                      std::span<const std::uint8_t> frame_mask) {
  const Shape& s = xs.shape();
  if (s.size() != 4) throw ShapeError("convlstm_sequence: expected (T,H,W,Cin), got " + shape_str(s));
  check_channels(cell, s);
  const std::size_t T = s[0], H = s[1], W = s[2], C = cell.out_channels;
  if (!frame_mask.empty() && frame_mask.size() != T)
    throw ShapeError("convlstm_sequence: mask length " + std::to_string(frame_mask.size()) +
                     " vs T=" + std::to_string(T));
  auto valid = [&](std::size_t t) { return frame_mask.empty() || frame_mask[t] != 0; };

  Var input_gates = ops::conv2d(xs, p[cell.w_input]);
  Var residual = ops::conv2d(xs, p[cell.w_residual]);
  Tensor zero({1, H, W, C}, 0.0);
  LSTMState state{Var(zero), Var(zero)};
  std::vector<Var> hs;
  hs.reserve(T);
  bool any_masked = false;
  for (std::size_t t = 0; t < T; ++t) {
    if (!valid(t)) {
      any_masked = true;
      hs.emplace_back(zero);
      continue;
    }
    state = convlstm_recur(cell, p, ops::slice(input_gates, 0, t, 1), state);
    hs.push_back(state.h);
  }
  Var out = convlstm_post(cell, p, ops::concat(hs, 0), residual);
  if (any_masked) {
    Tensor m({T, 1, 1, 1}, 0.0);
    for (std::size_t t = 0; t < T; ++t) m[t] = valid(t) ? 1.0 : 0.0;
    out = ops::mul(out, Var(std::move(m)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Graph

GraphSnapshot build_knn_graph(const Tensor& Z, std::size_t k) {
  if (Z.rank() != 2) throw ShapeError("build_knn_graph: expected (N,F), got " + shape_str(Z.shape()));
  if (k == 0) throw std::invalid_argument("build_knn_graph: k must be >= 1");
  const std::size_t N = Z.dim(0), F = Z.dim(1);
  const std::size_t kk = std::min(k, N - 1);
  GraphSnapshot g;
  g.nodes = N;
  g.width = kk + 1;
  g.neighbors.reserve(N * g.width);
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t u = 0; u < N; ++u) {
    cand.clear();
    for (std::size_t v = 0; v < N; ++v) {
      if (v == u) continue;
      double d = 0.0;
      for (std::size_t f = 0; f < F; ++f) {
        const double diff = Z[u * F + f] - Z[v * F + f];
        d += diff * diff;
      }
      cand.emplace_back(d, v);
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(kk), cand.end());
    g.neighbors.push_back(u);
    for (std::size_t j = 0; j < kk; ++j) g.neighbors.push_back(cand[j].second);
  }
  return g;
}

GraphSnapshot stack_snapshots(std::span<const GraphSnapshot> graphs) {
  GraphSnapshot out;
  if (graphs.empty()) return out;
  out.width = graphs[0].width;
  for (const auto& g : graphs) {
    if (g.width != out.width) throw ShapeError("stack_snapshots: neighborhood widths differ");
    for (auto v : g.neighbors) out.neighbors.push_back(v + out.nodes);
    out.nodes += g.nodes;
  }
  return out;
}

GraphAttentionLayer make_graph_attention(ParameterSet& params, const std::string& prefix,
                                         std::size_t features, std::size_t projected,
                                         std::size_t k_neighbors, std::size_t heads, Rng& rng) {
  if (heads == 0) throw std::invalid_argument("graph attention needs at least one head");
  GraphAttentionLayer layer;
  layer.features = features;
  layer.projected = projected;
  layer.k_neighbors = k_neighbors;
  for (std::size_t h = 0; h < heads; ++h) {
    const std::string hp = prefix + ".head" + std::to_string(h);
    GraphAttentionLayer::Head head;
    head.phi = params.add(hp + ".phi", glorot_uniform({features, projected}, features, projected, rng));
    head.a_src = params.add(hp + ".a_src", glorot_uniform({projected, 1}, 2 * projected, 1, rng));
    head.a_dst = params.add(hp + ".a_dst", glorot_uniform({projected, 1}, 2 * projected, 1, rng));
    layer.heads.push_back(head);
  }
  return layer;
}

Var attention_weights(const GraphAttentionLayer& layer, std::size_t head, const Binding& p,
                      const Var& Z, const GraphSnapshot& g) {
  const auto& hd = layer.heads.at(head);
  if (Z.shape().size() != 2 || Z.shape()[0] != g.nodes || Z.shape()[1] != layer.features)
    throw ShapeError("graph_attention: expected (" + std::to_string(g.nodes) + "," +
                     std::to_string(layer.features) + ") features, got " + shape_str(Z.shape()));
  Var proj = ops::matmul(Z, p[hd.phi]);
  Var src = ops::matmul(proj, p[hd.a_src]);  // (N,1)
  Var dst = ops::matmul(proj, p[hd.a_dst]);  // (N,1)
  Var dst_nb = ops::reshape(ops::gather_rows(dst, g.neighbors), {g.nodes, g.width});
  Var scores = ops::add(dst_nb, src);  // (N,width) + (N,1)
  return ops::softmax(scores, 1);
}

Var graph_attention(const GraphAttentionLayer& layer, const Binding& p, const Var& Z,
                    const GraphSnapshot& g) {
  const std::size_t F = layer.features;
  Var gathered = ops::reshape(ops::gather_rows(Z, g.neighbors), {g.nodes, g.width, F});
  Var out;
  for (std::size_t h = 0; h < layer.heads.size(); ++h) {
    Var w = ops::reshape(attention_weights(layer, h, p, Z, g), {g.nodes, g.width, 1});
    Var agg = ops::sum(ops::mul(gathered, w), {1});
    out = h == 0 ? agg : ops::add(out, agg);
  }
  if (layer.heads.size() > 1) out = ops::scale(out, 1.0 / static_cast<double>(layer.heads.size()));
  return out;
}

// ---------------------------------------------------------------------------
// LSTM / BiLSTM / dense

LSTMParams make_lstm(ParameterSet& params, const std::string& prefix, std::size_t input,
                     std::size_t hidden, Rng& rng) {
  LSTMParams c;
  c.input = input;
  c.hidden = hidden;
  c.w_input = params.add(prefix + ".w_input", glorot_uniform({input, 4 * hidden}, input, 4 * hidden, rng));
  c.w_hidden = params.add(prefix + ".w_hidden", glorot_uniform({hidden, 4 * hidden}, hidden, 4 * hidden, rng));
  Tensor bias({4 * hidden}, 0.0);
  for (std::size_t i = hidden; i < 2 * hidden; ++i) bias[i] = 1.0;
  c.bias = params.add(prefix + ".bias", std::move(bias));
  return c;
}

namespace {
LSTMState lstm_recur(const LSTMParams& cell, const Binding& p, const Var& input_gates,
                     const LSTMState& state) {
  Var z = ops::add(ops::add(input_gates, ops::matmul(state.h, p[cell.w_hidden])), p[cell.bias]);
  return gate_update(z, cell.hidden, state);
}
}  // namespace

LSTMState lstm_step(const LSTMParams& cell, const Binding& p, const Var& x_row,
                    const LSTMState& state) {
  return lstm_recur(cell, p, ops::matmul(x_row, p[cell.w_input]), state);
}

BiLSTMEncoder make_bilstm(ParameterSet& params, const std::string& prefix, std::size_t input,
                          std::size_t output_dim, Rng& rng) {
  if (output_dim < 2 || output_dim % 2)
    throw std::invalid_argument("BiLSTM output dimension must be even and >= 2");
  return {make_lstm(params, prefix + ".fwd", input, output_dim / 2, rng),
          make_lstm(params, prefix + ".bwd", input, output_dim / 2, rng)};
}

BiLSTMOutput bilstm_encode(const BiLSTMEncoder& enc, const Binding& p, const Var& G,
                           std::span<const std::uint8_t> frame_mask) {
  const Shape& s = G.shape();
  if (s.size() != 2 || s[1] != enc.forward.input)
    throw ShapeError("bilstm_encode: expected (T," + std::to_string(enc.forward.input) +
                     "), got " + shape_str(s));
  const std::size_t T = s[0];
  if (!frame_mask.empty() && frame_mask.size() != T)
    throw ShapeError("bilstm_encode: mask length does not match T");
  auto valid = [&](std::size_t t) { return frame_mask.empty() || frame_mask[t] != 0; };

  auto run = [&](const LSTMParams& cell, bool reverse) {
    Var gates = ops::matmul(G, p[cell.w_input]);
    Tensor zero({1, cell.hidden}, 0.0);
    LSTMState st{Var(zero), Var(zero)};
    std::vector<Var> rows(T, Var(zero));
    for (std::size_t k = 0; k < T; ++k) {
      const std::size_t t = reverse ? T - 1 - k : k;
      if (!valid(t)) continue;
      st = lstm_recur(cell, p, ops::slice(gates, 0, t, 1), st);
      rows[t] = st.h;
    }
    return std::pair{st.h, ops::concat(rows, 0)};
  };
  auto [fwd_final, fwd_seq] = run(enc.forward, false);
  auto [bwd_final, bwd_seq] = run(enc.backward, true);
  BiLSTMOutput out;
  out.summary = ops::concat(std::vector<Var>{fwd_final, bwd_final}, 1);
  out.sequence = ops::concat(std::vector<Var>{fwd_seq, bwd_seq}, 1);
  return out;
}

Dense make_dense(ParameterSet& params, const std::string& prefix, std::size_t in,
                 std::size_t out, Rng& rng) {
  Dense d;
  d.in = in;
  d.out = out;
  d.weight = params.add(prefix + ".weight", glorot_uniform({in, out}, in, out, rng));
  d.bias = params.add(prefix + ".bias", Tensor({out}, 0.0));
  return d;
}

Var dense(const Dense& layer, const Binding& p, const Var& x) {
  const Shape& s = x.shape();
  if (s.size() == 1) {
    if (s[0] != layer.in) throw ShapeError("dense: expected (" + std::to_string(layer.in) + "), got " + shape_str(s));
    Var y = dense(layer, p, ops::reshape(x, {1, layer.in}));
    return ops::reshape(y, {layer.out});
  }
  if (s.size() != 2 || s[1] != layer.in)
    throw ShapeError("dense: expected (M," + std::to_string(layer.in) + "), got " + shape_str(s));
  return ops::add(ops::matmul(x, p[layer.weight]), p[layer.bias]);
}

}  // namespace btgat
