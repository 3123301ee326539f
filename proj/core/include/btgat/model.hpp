#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "btgat/layers.hpp"

namespace btgat {

struct ModelConfig {
  /// Encoder channel capacities per pyramid level; {64,128,256,512} is the full-size setting.
  std::array<std::size_t, 4> channels{4, 8, 16, 32};
  std::size_t latent_dim = 32;
  std::size_t knn_k = 3;
  /// Total BiLSTM output width d_b (both directions).
  std::size_t bilstm_hidden = 64;
  std::size_t attention_heads = 1;
  std::size_t n_clusters = 7;
  double alpha = 1.0;
  std::size_t window_length = 20;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Spatial layout of the data the model was built for.
struct InputGeometry {
  std::size_t height = 0;    // L (longitudes)
  std::size_t width = 0;     // W (latitudes)
  std::size_t channels = 0;  // n (variables)
  friend bool operator==(const InputGeometry&, const InputGeometry&) = default;
};

/// Inputs in [0,1] are mapped affinely onto [-kInputBound, kInputBound] so the
/// tanh reconstruction head can reach them.
inline constexpr double kInputBound = 0.9;

/// Student's t soft assignment. E is (d) or (M, d), centroids (k, d); result (k) or (M, k).
Var soft_assign(const Var& E, const Var& centroids, double alpha);

class Model {
 public:
  Model(ModelConfig config, InputGeometry geometry, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const InputGeometry& geometry() const { return geometry_; }
  std::uint64_t seed() const { return seed_; }
  /// Spatial extents after zero-padding to a multiple of 8.
  std::size_t padded_height() const { return padded_h_; }
  std::size_t padded_width() const { return padded_w_; }

  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }
  std::size_t centroid_param() const { return centroids_; }

  struct Encoding {
    Var frame_embeddings;  // (T, d); rows of masked frames are meaningless
    Var window_code;       // (1, d)
    std::array<Var, 4> skips;
    Var graph_sequence;    // G, (T, C4)
  };

  /// x is the prepared window (T, Hp, Wp, C).
  Encoding encode(const Binding& p, const Var& x, std::span<const std::uint8_t> frame_mask) const;
  /// Reconstruction in (-1, 1), shape (T, Hp, Wp, C). Each frame's decoder
  /// seed is projected from its own code row, (T, d).
  Var decode(const Binding& p, const Var& frame_codes, const std::array<Var, 4>& skips,
             std::span<const std::uint8_t> frame_mask) const;

  struct Output {
    Var reconstruction;               // (T, Hp, Wp, C), tanh range
    Var embeddings;                   // (V, d) for the V valid frames
    Var q;                            // (V, k)
    std::vector<std::size_t> valid;   // window positions of the rows of q
    Encoding encoding;
  };

  /// raw_window is (T, H, W, C) in [0,1].
  Output forward(const Binding& p, const Tensor& raw_window,
                 std::span<const std::uint8_t> frame_mask) const;

  /// Pads to (T, Hp, Wp, C) and maps [0,1] onto [-0.9, 0.9].
  Tensor prepare_input(const Tensor& raw_window) const;
  /// 1 on cells of valid frames inside the original grid, else 0; (T, Hp, Wp, C).
  Tensor loss_mask(std::size_t frames, std::span<const std::uint8_t> frame_mask) const;
  /// Crops a reconstruction back to (T, H, W, C) in data units.
  Tensor restore_output(const Tensor& reconstruction) const;

  /// Layer records, exposed for tests and diagnostics.
  const std::array<ConvLSTMCell, 4>& encoder_cells() const { return encoder_; }
  const std::array<ConvLSTMCell, 4>& decoder_cells() const { return decoder_; }
  const ConvLSTMCell& output_head() const { return head_; }
  const GraphAttentionLayer& attention() const { return attention_; }
  const BiLSTMEncoder& bilstm() const { return bilstm_; }
  const Dense& latent_projection() const { return latent_; }
  const Dense& seed_projection() const { return seed_proj_; }

 private:
  ModelConfig config_;
  InputGeometry geometry_;
  std::uint64_t seed_;
  std::size_t padded_h_ = 0;
  std::size_t padded_w_ = 0;
  ParameterSet params_;
  std::array<ConvLSTMCell, 4> encoder_;
  GraphAttentionLayer attention_;
  BiLSTMEncoder bilstm_;
  Dense latent_;
  Dense seed_proj_;
  std::array<ConvLSTMCell, 4> decoder_;
  ConvLSTMCell head_;
  std::size_t centroids_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: text header echoing the configuration, then a length-prefixed
// little-endian section of named float64 tensors.

struct Checkpoint {
  ModelConfig config;
  InputGeometry geometry;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  ParameterSet params;
};

std::string serialize_checkpoint(const Model& model, std::uint64_t step);
Checkpoint parse_checkpoint(const std::string& bytes);
void save_checkpoint(const Model& model, std::uint64_t step, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);
/// Rebuilds the model and installs the stored parameter values.
Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace btgat
