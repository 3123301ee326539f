#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "btgat/autodiff.hpp"
#include "btgat/random.hpp"

namespace btgat {

/// Named, ordered collection of learnable tensors.
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor value);
  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t id) const { return names_.at(id); }
  Tensor& value(std::size_t id) { return values_.at(id); }
  const Tensor& value(std::size_t id) const { return values_.at(id); }
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t scalar_count() const;

  friend bool operator==(const ParameterSet&, const ParameterSet&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

/// Parameters made available to one forward pass. With a tape every parameter
/// is a gradient leaf; without one they enter as constants.
class Binding {
 public:
  Binding(const ParameterSet& params, Tape* tape);
  const Var& operator[](std::size_t id) const { return vars_.at(id); }
  /// Replaces one parameter with a caller-supplied value of the same shape.
  void substitute(std::size_t id, Var v);
  Tape* tape() const { return tape_; }
  /// Gradient tensor for every parameter, in ParameterSet order.
  std::vector<Tensor> gradients(const Gradients& grads) const;

 private:
  Tape* tape_;
  std::vector<Var> vars_;
};

/// Glorot-uniform initial values.
Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

// ---------------------------------------------------------------------------
// ConvLSTM

struct LSTMState {
  Var h;
  Var c;
};

/// 3x3 ConvLSTM cell followed by channel layer norm (affine) and a 1x1 residual
/// projection of the block input. Gate order in the fused kernels: i, f, g, o.
struct ConvLSTMCell {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t w_input = 0;      // (3,3,Cin,4Co)
  std::size_t w_hidden = 0;     // (3,3,Co,4Co)
  std::size_t bias = 0;         // (4Co)
  std::size_t norm_gain = 0;    // (Co)
  std::size_t norm_shift = 0;   // (Co)
  std::size_t w_residual = 0;   // (1,1,Cin,Co)
};

ConvLSTMCell make_convlstm_cell(ParameterSet& params, const std::string& prefix,
                                std::size_t in_channels, std::size_t out_channels, Rng& rng);

/// Zero (h, c) of shape (H, W, Co).
LSTMState convlstm_zero_state(const ConvLSTMCell& cell, std::size_t height, std::size_t width);

struct ConvLSTMStep {
  Var output;   // normalized + residual block output, (H, W, Co)
  LSTMState state;
};

/// One recurrence step on x_t of shape (H, W, Cin).
ConvLSTMStep convlstm_step(const ConvLSTMCell& cell, const Binding& p, const Var& x_t,
                           const LSTMState& state);

/// Applies the cell over xs (T, H, W, Cin) from a zero state. Frames whose
/// mask entry is 0 leave the state untouched and emit zeros.
Var convlstm_sequence(const ConvLSTMCell& cell, const Binding& p, const Var& xs,
                      std::span<const std::uint8_t> frame_mask = {});

// ---------------------------------------------------------------------------
// Graph attention bottleneck

/// Directed kNN graph with self-loops. Row u of `neighbors` lists u first, then
/// its nearest nodes by Euclidean distance (ties to the lower index).
struct GraphSnapshot {
  std::size_t nodes = 0;
  std::size_t width = 0;  // neighbors per node, = min(k + 1, N)
  std::vector<std::size_t> neighbors;  // nodes * width

  std::span<const std::size_t> of(std::size_t u) const {
    return {neighbors.data() + u * width, width};
  }
};

GraphSnapshot build_knn_graph(const Tensor& features, std::size_t k);

/// Disjoint union; node ids of later snapshots are offset. All widths must match.
GraphSnapshot stack_snapshots(std::span<const GraphSnapshot> graphs);

struct GraphAttentionLayer {
  std::size_t features = 0;
  std::size_t projected = 0;
  std::size_t k_neighbors = 0;
  struct Head {
    std::size_t phi = 0;    // (F, F')
    std::size_t a_src = 0;  // (F', 1)
    std::size_t a_dst = 0;  // (F', 1)
  };
  std::vector<Head> heads;
};

GraphAttentionLayer make_graph_attention(ParameterSet& params, const std::string& prefix,
                                         std::size_t features, std::size_t projected,
                                         std::size_t k_neighbors, std::size_t heads, Rng& rng);

/// Attention weights of one head, (N, width): softmax over each neighborhood of
/// a_src . phi(z_u) + a_dst . phi(z_v).
Var attention_weights(const GraphAttentionLayer& layer, std::size_t head, const Binding& p,
                      const Var& Z, const GraphSnapshot& g);

/// Each node's neighborhood-weighted sum of raw features; heads are averaged. (N, F).
Var graph_attention(const GraphAttentionLayer& layer, const Binding& p, const Var& Z,
                    const GraphSnapshot& g);

// ---------------------------------------------------------------------------
// Recurrent summary and projection

struct LSTMParams {
  std::size_t input = 0;
  std::size_t hidden = 0;
  std::size_t w_input = 0;   // (input, 4h)
  std::size_t w_hidden = 0;  // (h, 4h)
  std::size_t bias = 0;      // (4h)
};

LSTMParams make_lstm(ParameterSet& params, const std::string& prefix, std::size_t input,
                     std::size_t hidden, Rng& rng);

/// Standard LSTM step on a (1, input) row; state rows are (1, hidden).
LSTMState lstm_step(const LSTMParams& cell, const Binding& p, const Var& x_row,
                    const LSTMState& state);

struct BiLSTMEncoder {
  LSTMParams forward;
  LSTMParams backward;
  std::size_t output_dim() const { return forward.hidden + backward.hidden; }
};

BiLSTMEncoder make_bilstm(ParameterSet& params, const std::string& prefix, std::size_t input,
                          std::size_t output_dim, Rng& rng);

struct BiLSTMOutput {
  Var summary;   // (1, d_b): final forward state || final backward state
  Var sequence;  // (T, d_b): per-step forward || backward hidden; zero rows when masked
};

BiLSTMOutput bilstm_encode(const BiLSTMEncoder& enc, const Binding& p, const Var& G,
                           std::span<const std::uint8_t> frame_mask = {});

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight = 0;  // (in, out)
  std::size_t bias = 0;    // (out)
};

Dense make_dense(ParameterSet& params, const std::string& prefix, std::size_t in,
                 std::size_t out, Rng& rng);

/// x W + b for x of shape (in) or (M, in).
Var dense(const Dense& layer, const Binding& p, const Var& x);

}  // namespace btgat
