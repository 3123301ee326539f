#include "btgat/model.hpp"

#include <algorithm>

namespace btgat {

void ModelConfig::validate() const {
  for (auto c : channels)
    if (c == 0) throw std::invalid_argument("channel capacities must be >= 1");
  if (latent_dim < 1) throw std::invalid_argument("latent_dim must be >= 1");
  if (n_clusters < 2) throw std::invalid_argument("n_clusters must be >= 2");
  if (!(alpha > 0.0)) throw std::invalid_argument("alpha must be > 0");
  if (knn_k < 1) throw std::invalid_argument("knn_k must be >= 1");
  if (bilstm_hidden < 2 || bilstm_hidden % 2) throw std::invalid_argument("bilstm_hidden must be even and >= 2");
  if (attention_heads < 1) throw std::invalid_argument("attention_heads must be >= 1");
  if (window_length < 2) throw std::invalid_argument("window_length must be >= 2");
}

Var soft_assign(const Var& E, const Var& centroids, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("soft_assign: alpha must be > 0");
  if (E.shape().size() == 1) {
    Var q = soft_assign(ops::reshape(E, {1, E.shape()[0]}), centroids, alpha);
    return ops::reshape(q, {centroids.shape()[0]});
  }
  const auto& es = E.shape();
  const auto& cs = centroids.shape();
  if (es.size() != 2 || cs.size() != 2 || es[1] != cs[1])
    throw ShapeError("soft_assign: embeddings " + shape_str(es) + " vs centroids " + shape_str(cs));
  const std::size_t M = es[0], k = cs[0], d = es[1];
  Var diff = ops::sub(ops::reshape(E, {M, 1, d}), ops::reshape(centroids, {1, k, d}));
  Var dist2 = ops::sum(ops::square(diff), {2});
  Var kernel = ops::pow(ops::add_scalar(ops::scale(dist2, 1.0 / alpha), 1.0), -(alpha + 1.0) / 2.0);
  return ops::div(kernel, ops::sum(kernel, {1}, true));
}

Model::Model(ModelConfig config, InputGeometry geometry, std::uint64_t seed)
    : config_(config), geometry_(geometry), seed_(seed) {
  config_.validate();
  if (geometry.height < 8 || geometry.width < 8)
    throw ShapeError("model input must be at least 8x8 spatially, got " +
                     std::to_string(geometry.height) + "x" + std::to_string(geometry.width));
  if (geometry.channels < 1) throw ShapeError("model input needs at least one variable");
  padded_h_ = (geometry.height + 7) / 8 * 8;
  padded_w_ = (geometry.width + 7) / 8 * 8;

  Rng rng(seed);
  const auto& ch = config_.channels;
  std::size_t cin = geometry.channels;
  for (std::size_t l = 0; l < 4; ++l) {
    encoder_[l] = make_convlstm_cell(params_, "encoder" + std::to_string(l + 1), cin, ch[l], rng);
    cin = ch[l];
  }
  const std::size_t nodes = (padded_h_ / 8) * (padded_w_ / 8);
  attention_ = make_graph_attention(params_, "bottleneck.attention", ch[3], ch[3], config_.knn_k,
                                    config_.attention_heads, rng);
  bilstm_ = make_bilstm(params_, "bottleneck.bilstm", ch[3], config_.bilstm_hidden, rng);
  latent_ = make_dense(params_, "bottleneck.latent", config_.bilstm_hidden, config_.latent_dim, rng);
  seed_proj_ = make_dense(params_, "decoder.seed", config_.latent_dim, nodes * ch[3], rng);
  decoder_[3] = make_convlstm_cell(params_, "decoder4", 2 * ch[3], ch[3], rng);
  decoder_[2] = make_convlstm_cell(params_, "decoder3", ch[3] + ch[2], ch[2], rng);
  decoder_[1] = make_convlstm_cell(params_, "decoder2", ch[2] + ch[1], ch[1], rng);
  decoder_[0] = make_convlstm_cell(params_, "decoder1", ch[1] + ch[0], ch[0], rng);
  head_ = make_convlstm_cell(params_, "decoder.head", ch[0], geometry.channels, rng);
  centroids_ = params_.add("cluster.centroids", Tensor({config_.n_clusters, config_.latent_dim}, 0.0));
}

Model::Encoding Model::encode(const Binding& p, const Var& x,
                              std::span<const std::uint8_t> frame_mask) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != padded_h_ || s[2] != padded_w_ || s[3] != geometry_.channels)
    throw ShapeError("encode: expected (T," + std::to_string(padded_h_) + "," +
                     std::to_string(padded_w_) + "," + std::to_string(geometry_.channels) +
                     "), got " + shape_str(s));
  const std::size_t T = s[0];
  Encoding enc;
  Var level = x;
  for (std::size_t l = 0; l < 4; ++l) {
    if (l > 0) level = ops::max_pool2d(level);
    level = convlstm_sequence(encoder_[l], p, level, frame_mask);
    enc.skips[l] = level;
  }

  // Bottleneck: one kNN graph per time slice over the H4*W4 nodes.
  const std::size_t C4 = config_.channels[3];
  const std::size_t N = (padded_h_ / 8) * (padded_w_ / 8);
  Var nodes = ops::reshape(level, {T * N, C4});
  std::vector<GraphSnapshot> graphs;
  graphs.reserve(T);
  const auto& values = nodes.value();
  for (std::size_t t = 0; t < T; ++t) {
    Tensor slice({N, C4});
    std::copy_n(values.data().data() + t * N * C4, N * C4, slice.data().data());
    graphs.push_back(build_knn_graph(slice, config_.knn_k));
  }
  Var attended = graph_attention(attention_, p, nodes, stack_snapshots(graphs));
  enc.graph_sequence = ops::mean(ops::reshape(attended, {T, N, C4}), {1});

  BiLSTMOutput b = bilstm_encode(bilstm_, p, enc.graph_sequence, frame_mask);
  enc.frame_embeddings = dense(latent_, p, b.sequence);
  enc.window_code = dense(latent_, p, b.summary);
  return enc;
}

Var Model::decode(const Binding& p, const Var& codes, const std::array<Var, 4>& skips,
                  std::span<const std::uint8_t> frame_mask) const {
  const auto& ch = config_.channels;
  const std::size_t T = skips[0].shape()[0];
  for (std::size_t l = 0; l < 4; ++l) {
    const Shape want{T, padded_h_ >> l, padded_w_ >> l, ch[l]};
    if (skips[l].shape() != want)
      throw ShapeError("decode: skip " + std::to_string(l + 1) + " expected " + shape_str(want) +
                       ", got " + shape_str(skips[l].shape()));
  }
  const std::size_t H4 = padded_h_ / 8, W4 = padded_w_ / 8;
  if (codes.shape() != Shape{T, config_.latent_dim})
    throw ShapeError("decode: expected (" + std::to_string(T) + "," + std::to_string(config_.latent_dim) +
                     ") frame codes, got " + shape_str(codes.shape()));
  Var level = ops::reshape(dense(seed_proj_, p, codes), {T, H4, W4, ch[3]});
  for (std::size_t l = 4; l-- > 0;) {
    if (l < 3) level = ops::nearest_upsample2d(level);
    level = convlstm_sequence(decoder_[l], p, ops::concat(std::vector<Var>{level, skips[l]}, 3),
                              frame_mask);
  }
  return ops::tanh(convlstm_sequence(head_, p, level, frame_mask));
}

Model::Output Model::forward(const Binding& p, const Tensor& raw_window,
                             std::span<const std::uint8_t> frame_mask) const {
  const std::size_t T = raw_window.dim(0);
  if (!frame_mask.empty() && frame_mask.size() != T)
    throw ShapeError("forward: mask length does not match window length");
  Output out;
  out.encoding = encode(p, Var(prepare_input(raw_window)), frame_mask);
  out.reconstruction = decode(p, out.encoding.frame_embeddings, out.encoding.skips, frame_mask);
  for (std::size_t t = 0; t < T; ++t)
    if (frame_mask.empty() || frame_mask[t]) out.valid.push_back(t);
  if (out.valid.size() == T) {
    out.embeddings = out.encoding.frame_embeddings;
  } else if (!out.valid.empty()) {
    out.embeddings = ops::gather_rows(out.encoding.frame_embeddings, out.valid);
  }
  if (!out.valid.empty()) out.q = soft_assign(out.embeddings, p[centroids_], config_.alpha);
  return out;
}

Tensor Model::prepare_input(const Tensor& raw) const {
  if (raw.rank() != 4 || raw.dim(1) != geometry_.height || raw.dim(2) != geometry_.width ||
      raw.dim(3) != geometry_.channels)
    throw ShapeError("prepare_input: expected (T," + std::to_string(geometry_.height) + "," +
                     std::to_string(geometry_.width) + "," + std::to_string(geometry_.channels) +
                     "), got " + shape_str(raw.shape()));
  const std::size_t T = raw.dim(0), H = geometry_.height, W = geometry_.width, C = geometry_.channels;
  Tensor out({T, padded_h_, padded_w_, C}, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < C; ++c)
          out[((t * padded_h_ + y) * padded_w_ + x) * C + c] =
              (2.0 * raw[((t * H + y) * W + x) * C + c] - 1.0) * kInputBound;
  return out;
}

Tensor Model::loss_mask(std::size_t T, std::span<const std::uint8_t> frame_mask) const {
  const std::size_t C = geometry_.channels;
  Tensor m({T, padded_h_, padded_w_, C}, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    if (!frame_mask.empty() && !frame_mask[t]) continue;
    for (std::size_t y = 0; y < geometry_.height; ++y)
      for (std::size_t x = 0; x < geometry_.width; ++x)
        for (std::size_t c = 0; c < C; ++c) m[((t * padded_h_ + y) * padded_w_ + x) * C + c] = 1.0;
  }
  return m;
}

Tensor Model::restore_output(const Tensor& rec) const {
  const std::size_t T = rec.dim(0), H = geometry_.height, W = geometry_.width, C = geometry_.channels;
  Tensor out({T, H, W, C});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t c = 0; c < C; ++c)
          out[((t * H + y) * W + x) * C + c] =
              (rec[((t * padded_h_ + y) * padded_w_ + x) * C + c] / kInputBound + 1.0) / 2.0;
  return out;
}

}  // namespace btgat
