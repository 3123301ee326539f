#include "btgat/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace btgat {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::matmul: return "matmul";
    case Op::conv2d: return "conv2d";
    case Op::max_pool2d: return "max_pool2d";
    case Op::nearest_upsample2d: return "nearest_upsample2d";
    case Op::concat: return "concat";
    case Op::sigmoid: return "sigmoid";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::softmax: return "softmax";
    case Op::layer_norm: return "layer_norm";
    case Op::mean: return "mean";
    case Op::sum: return "sum";
    case Op::square: return "square";
    case Op::sqrt: return "sqrt";
    case Op::log: return "log";
    case Op::exp: return "exp";
    case Op::pow: return "pow";
    case Op::clamp_min: return "clamp_min";
    case Op::broadcast: return "broadcast";
    case Op::reshape: return "reshape";
    case Op::transpose: return "transpose";
    case Op::slice: return "slice";
    case Op::gather_rows: return "gather_rows";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::leaf(Tensor value) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  Var v(std::move(value));
  v.tape_ = this;
  v.node_ = nodes_.size();
  nodes_.push_back(Node{Op::leaf, {}, nullptr, v.shape()});
  return v;
}

Var Tape::record(Op kind, Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  Node node{kind, {}, std::move(fn), value.shape()};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (in.tape_ && in.tape_ != this)
      throw std::logic_error(std::string(op_name(kind)) + ": inputs recorded on different tapes");
    node.inputs.push_back(in.tape_ ? std::optional<std::size_t>(in.node_) : std::nullopt);
  }
  Var v(std::move(value));
  v.tape_ = this;
  v.node_ = nodes_.size();
  nodes_.push_back(std::move(node));
  return v;
}

Gradients Tape::backward(const Var& root) {
  if (consumed_) throw std::logic_error("backward() on a consumed tape");
  if (root.tape_ != this) throw std::logic_error("backward root is not recorded on this tape");
  if (root.value().size() != 1)
    throw ShapeError("backward root must be scalar, got " + shape_str(root.shape()));

  std::vector<std::optional<Tensor>> grads(nodes_.size());
  grads[root.node_] = Tensor(root.shape(), 1.0);

  std::vector<Tensor*> slots;
  for (std::size_t i = root.node_ + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!grads[i] || node.kind == Op::leaf) continue;
    slots.assign(node.inputs.size(), nullptr);
    for (std::size_t j = 0; j < node.inputs.size(); ++j) {
      if (!node.inputs[j]) continue;
      auto& g = grads[*node.inputs[j]];
      if (!g) g = Tensor(nodes_[*node.inputs[j]].shape, 0.0);
      slots[j] = &*g;
    }
    node.fn(*grads[i], slots);
    grads[i].reset();
    node.fn = nullptr;
  }

  Gradients out;
  out.tape_ = this;
  out.by_node_.resize(nodes_.size());
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind != Op::leaf) continue;
    out.by_node_[i] = grads[i] ? std::move(*grads[i]) : Tensor(nodes_[i].shape, 0.0);
  }
  for (auto& n : nodes_) n.fn = nullptr;
  consumed_ = true;
  return out;
}

const Tensor& Gradients::operator[](const Var& leaf) const {
  if (leaf.tape() != tape_ || !leaf.tape_id() || *leaf.tape_id() >= by_node_.size() ||
      !by_node_[*leaf.tape_id()])
    throw std::logic_error("gradient requested for a value that is not a leaf of this tape");
  return *by_node_[*leaf.tape_id()];
}

bool Gradients::contains(const Var& leaf) const {
  return leaf.tape() == tape_ && leaf.tape_id() && *leaf.tape_id() < by_node_.size() &&
         by_node_[*leaf.tape_id()].has_value();
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

using Slots = std::span<Tensor* const>;

bool any_grad(std::initializer_list<const Var*> xs) {
  for (auto* x : xs)
    if (x->requires_grad()) return true;
  return false;
}

Tape* tape_of(std::initializer_list<const Var*> xs) {
  for (auto* x : xs)
    if (x->requires_grad()) return x->tape();
  return nullptr;
}

[[noreturn]] void shape_fail(Op kind, const std::string& expected, const Shape& actual) {
  throw ShapeError(std::string(op_name(kind)) + ": expected " + expected + ", got " +
                   shape_str(actual));
}

std::size_t norm_axis(Op kind, int axis, std::size_t rank) {
  int a = axis < 0 ? axis + static_cast<int>(rank) : axis;
  if (a < 0 || a >= static_cast<int>(rank))
    throw ShapeError(std::string(op_name(kind)) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(a);
}

// Right-aligned broadcasting of a and b into an output shape; per-output-axis
// strides into a and b with 0 on broadcast axes.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
  bool same = false;
};

Broadcast plan_broadcast(Op kind, const Shape& a, const Shape& b) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  auto stra = strides_of(a);
  auto strb = strides_of(b);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t ea = 1, eb = 1, ka = 0, kb = 0;
    bool has_a = i + a.size() >= r, has_b = i + b.size() >= r;
    if (has_a) {
      ka = i + a.size() - r;
      ea = a[ka];
    }
    if (has_b) {
      kb = i + b.size() - r;
      eb = b[kb];
    }
    if (ea != eb && ea != 1 && eb != 1)
      throw ShapeError(std::string(op_name(kind)) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b));
    p.out[i] = std::max(ea, eb);
    p.sa[i] = (has_a && ea != 1) ? stra[ka] : 0;
    p.sb[i] = (has_b && eb != 1) ? strb[kb] : 0;
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t n = shape_size(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  // Fast path: innermost axis contiguous or broadcast in both operands.
  const std::size_t inner = p.out[r - 1];
  const std::size_t ia = p.sa[r - 1], ib = p.sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t j = 0; j < inner; ++j) f(o + j, oa + j * ia, ob + j * ib);
    // advance the outer multi-index
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      oa += p.sa[ax];
      ob += p.sb[ax];
      if (idx[ax] < p.out[ax]) break;
      oa -= p.sa[ax] * idx[ax];
      ob -= p.sb[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

template <typename Fwd, typename Bwd>
Var binary(Op kind, const Var& a, const Var& b, Fwd fwd, Bwd bwd) {
  auto p = plan_broadcast(kind, a.shape(), b.shape());
  Tensor out(p.out);
  {
    auto A = a.value().data();
    auto B = b.value().data();
    auto O = out.data();
    for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t j) { O[o] = fwd(A[i], B[j]); });
  }
  if (!any_grad({&a, &b})) return Var(std::move(out));
  auto av = a.value_ptr(), bv = b.value_ptr();
  return tape_of({&a, &b})->record(
      kind, std::move(out), {a, b},
      [p = std::move(p), av, bv, bwd](const Tensor& g, Slots slots) {
        auto G = g.data();
        auto A = av->data();
        auto B = bv->data();
        double* ga = slots[0] ? slots[0]->data().data() : nullptr;
        double* gb = slots[1] ? slots[1]->data().data() : nullptr;
        for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t j) {
          bwd(G[o], A[i], B[j], ga ? &ga[i] : nullptr, gb ? &gb[j] : nullptr);
        });
      });
}

// Elementwise unary op; bwd(g, x, y) returns dL/dx.
template <typename Fwd, typename Bwd>
Var unary(Op kind, const Var& x, Fwd fwd, Bwd bwd) {
  Tensor out(x.shape());
  auto X = x.value().data();
  auto O = out.data();
  for (std::size_t i = 0; i < O.size(); ++i) O[i] = fwd(X[i]);
  if (!x.requires_grad()) return Var(std::move(out));
  auto xv = x.value_ptr();
  auto yv = std::make_shared<const Tensor>(out);
  return x.tape()->record(kind, std::move(out), {x}, [xv, yv, bwd](const Tensor& g, Slots s) {
    auto G = g.data();
    auto X = xv->data();
    auto Y = yv->data();
    auto GX = s[0]->data();
    for (std::size_t i = 0; i < G.size(); ++i) GX[i] += bwd(G[i], X[i], Y[i]);
  });
}

struct Reduction {
  Shape kept;                       // input shape with reduced axes set to 1
  std::vector<std::size_t> stride;  // per input axis stride into the kept tensor (0 if reduced)
  std::size_t count = 1;            // elements folded into each output
};

Reduction plan_reduction(Op kind, const Shape& in, std::vector<std::size_t> axes) {
  if (axes.empty()) {
    axes.resize(in.size());
    std::iota(axes.begin(), axes.end(), 0);
  }
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  Reduction r;
  r.kept = in;
  for (auto ax : axes) {
    if (ax >= in.size())
      throw ShapeError(std::string(op_name(kind)) + ": axis " + std::to_string(ax) +
                       " out of range for " + shape_str(in));
    r.count *= in[ax];
    r.kept[ax] = 1;
  }
  auto ks = strides_of(r.kept);
  r.stride.resize(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) r.stride[i] = r.kept[i] == 1 ? 0 : ks[i];
  return r;
}

template <typename F>
void for_each_reduced(const Shape& in, const std::vector<std::size_t>& stride, F&& f) {
  const std::size_t n = shape_size(in);
  const std::size_t r = in.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t o = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, o);
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      o += stride[ax];
      if (idx[ax] < in[ax]) break;
      o -= stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

Shape squeeze_reduced(const Shape& in, const Reduction& r, bool keepdims,
                      const std::vector<std::size_t>& axes) {
  if (keepdims) return r.kept;
  Shape out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    bool reduced = axes.empty() || std::find(axes.begin(), axes.end(), i) != axes.end();
    if (!reduced) out.push_back(in[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

Var reduce(Op kind, const Var& x, std::vector<std::size_t> axes, bool keepdims, bool average) {
  auto r = plan_reduction(kind, x.shape(), axes);
  Tensor kept(r.kept, 0.0);
  {
    auto X = x.value().data();
    auto K = kept.data();
    for_each_reduced(x.shape(), r.stride, [&](std::size_t i, std::size_t o) { K[o] += X[i]; });
    if (average)
      for (auto& v : K) v /= static_cast<double>(r.count);
  }
  Tensor out = kept.reshaped(squeeze_reduced(x.shape(), r, keepdims, axes));
  if (!x.requires_grad()) return Var(std::move(out));
  const double factor = average ? 1.0 / static_cast<double>(r.count) : 1.0;
  return x.tape()->record(kind, std::move(out), {x},
                          [r = std::move(r), in = x.shape(), factor](const Tensor& g, Slots s) {
                            auto G = g.data();
                            auto GX = s[0]->data();
                            for_each_reduced(in, r.stride, [&](std::size_t i, std::size_t o) {
                              GX[i] += G[o] * factor;
                            });
                          });
}

Shape spatial_check(Op kind, const Shape& s) {
  if (s.size() != 3 && s.size() != 4) shape_fail(kind, "(H,W,C) or (N,H,W,C)", s);
  return s;
}

// (N, H, W, C) view of a rank-3 or rank-4 spatial tensor.
struct Spatial {
  std::size_t n, h, w, c;
};
Spatial spatial_of(const Shape& s) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  return {s[0], s[1], s[2], s[3]};
}

}  // namespace

// ---------------------------------------------------------------------------
// Primitives

namespace ops {

Var add(const Var& a, const Var& b) {
  return binary(
      Op::add, a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      Op::sub, a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double* ga, double* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      Op::mul, a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Var div(const Var& a, const Var& b) {
  return binary(
      Op::div, a, b, [](double x, double y) { return x / y; },
      [](double g, double x, double y, double* ga, double* gb) {
        if (ga) *ga += g / y;
        if (gb) *gb -= g * x / (y * y);
      });
}

Var scale(const Var& a, double s) { return mul(a, Var(Tensor::scalar(s))); }
Var add_scalar(const Var& a, double s) { return add(a, Var(Tensor::scalar(s))); }

Var matmul(const Var& a, const Var& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2) shape_fail(Op::matmul, "rank-2 lhs", sa);
  if (sb.size() != 2 || sb[0] != sa[1])
    shape_fail(Op::matmul, "rhs (" + std::to_string(sa[1]) + ",N)", sb);
  const std::size_t M = sa[0], K = sa[1], N = sb[1];
  Tensor out({M, N}, 0.0);
  {
    auto A = a.value().data();
    auto B = b.value().data();
    auto O = out.data();
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        const double av = A[i * K + k];
        const double* brow = &B[k * N];
        double* orow = &O[i * N];
        for (std::size_t j = 0; j < N; ++j) orow[j] += av * brow[j];
      }
  }
  if (!any_grad({&a, &b})) return Var(std::move(out));
  auto av = a.value_ptr(), bv = b.value_ptr();
  return tape_of({&a, &b})->record(Op::matmul, std::move(out), {a, b},
                                   [av, bv, M, K, N](const Tensor& g, Slots s) {
                                     auto G = g.data();
                                     auto A = av->data();
                                     auto B = bv->data();
                                     if (s[0]) {
                                       auto GA = s[0]->data();
                                       for (std::size_t i = 0; i < M; ++i)
                                         for (std::size_t k = 0; k < K; ++k) {
                                           double acc = 0.0;
                                           for (std::size_t j = 0; j < N; ++j)
                                             acc += G[i * N + j] * B[k * N + j];
                                           GA[i * K + k] += acc;
                                         }
                                     }
                                     if (s[1]) {
                                       auto GB = s[1]->data();
                                       for (std::size_t i = 0; i < M; ++i)
                                         for (std::size_t k = 0; k < K; ++k) {
                                           const double av_ik = A[i * K + k];
                                           for (std::size_t j = 0; j < N; ++j)
                                             GB[k * N + j] += av_ik * G[i * N + j];
                                         }
                                     }
                                   });
}

Var conv2d(const Var& x, const Var& w) {
  spatial_check(Op::conv2d, x.shape());
  const auto X = spatial_of(x.shape());
  const auto& ws = w.shape();
  if (ws.size() != 4 || ws[2] != X.c || ws[0] % 2 == 0 || ws[1] % 2 == 0)
    shape_fail(Op::conv2d, "kernel (odd,odd," + std::to_string(X.c) + ",Co)", ws);
  const std::size_t KH = ws[0], KW = ws[1], CI = ws[2], CO = ws[3];
  const std::ptrdiff_t PH = static_cast<std::ptrdiff_t>(KH / 2), PW = static_cast<std::ptrdiff_t>(KW / 2);
  Shape out_shape = x.shape();
  out_shape.back() = CO;
  Tensor out(out_shape, 0.0);

  // Visits every (output pixel, kernel tap) pair inside the image.
  auto sweep = [=](auto&& tap) {
    for (std::size_t n = 0; n < X.n; ++n)
      for (std::size_t y = 0; y < X.h; ++y)
        for (std::size_t xx = 0; xx < X.w; ++xx) {
          const std::size_t o = ((n * X.h + y) * X.w + xx) * CO;
          for (std::size_t ky = 0; ky < KH; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - PH;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(X.h)) continue;
            for (std::size_t kx = 0; kx < KW; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx + kx) - PW;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(X.w)) continue;
              const std::size_t i = ((n * X.h + static_cast<std::size_t>(iy)) * X.w +
                                     static_cast<std::size_t>(ix)) * CI;
              const std::size_t k = (ky * KW + kx) * CI * CO;
              tap(o, i, k);
            }
          }
        }
  };

  {
    const double* XV = x.value().data().data();
    const double* WV = w.value().data().data();
    double* O = out.data().data();
    sweep([&](std::size_t o, std::size_t i, std::size_t k) {
      double* orow = O + o;
      for (std::size_t ci = 0; ci < CI; ++ci) {
        const double xv = XV[i + ci];
        const double* wrow = WV + k + ci * CO;
        for (std::size_t co = 0; co < CO; ++co) orow[co] += xv * wrow[co];
      }
    });
  }
  if (!any_grad({&x, &w})) return Var(std::move(out));
  auto xv = x.value_ptr(), wv = w.value_ptr();
  return tape_of({&x, &w})->record(
      Op::conv2d, std::move(out), {x, w}, [xv, wv, sweep, CI, CO](const Tensor& g, Slots s) {
        const double* G = g.data().data();
        const double* XV = xv->data().data();
        const double* WV = wv->data().data();
        double* GX = s[0] ? s[0]->data().data() : nullptr;
        double* GW = s[1] ? s[1]->data().data() : nullptr;
        sweep([&](std::size_t o, std::size_t i, std::size_t k) {
          const double* grow = G + o;
          for (std::size_t ci = 0; ci < CI; ++ci) {
            const double* wrow = WV + k + ci * CO;
            if (GX) {
              double acc = 0.0;
              for (std::size_t co = 0; co < CO; ++co) acc += grow[co] * wrow[co];
              GX[i + ci] += acc;
            }
            if (GW) {
              const double xval = XV[i + ci];
              double* gwrow = GW + k + ci * CO;
              for (std::size_t co = 0; co < CO; ++co) gwrow[co] += xval * grow[co];
            }
          }
        });
      });
}

Var max_pool2d(const Var& x) {
  spatial_check(Op::max_pool2d, x.shape());
  const auto X = spatial_of(x.shape());
  if (X.h % 2 || X.w % 2) shape_fail(Op::max_pool2d, "even spatial extents", x.shape());
  Shape out_shape = x.shape();
  const std::size_t r = out_shape.size();
  out_shape[r - 3] = X.h / 2;
  out_shape[r - 2] = X.w / 2;
  Tensor out(out_shape);
  std::vector<std::size_t> argmax(out.size());
  auto XV = x.value().data();
  auto O = out.data();
  const std::size_t OH = X.h / 2, OW = X.w / 2;
  for (std::size_t n = 0; n < X.n; ++n)
    for (std::size_t y = 0; y < OH; ++y)
      for (std::size_t xx = 0; xx < OW; ++xx)
        for (std::size_t c = 0; c < X.c; ++c) {
          const std::size_t o = ((n * OH + y) * OW + xx) * X.c + c;
          std::size_t best = 0;
          double bv = 0.0;
          bool first = true;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t i = ((n * X.h + 2 * y + dy) * X.w + 2 * xx + dx) * X.c + c;
              if (first || XV[i] > bv) {
                bv = XV[i];
                best = i;
                first = false;
              }
            }
          O[o] = bv;
          argmax[o] = best;
        }
  if (!x.requires_grad()) return Var(std::move(out));
  return x.tape()->record(Op::max_pool2d, std::move(out), {x},
                          [argmax = std::move(argmax)](const Tensor& g, Slots s) {
                            auto G = g.data();
                            auto GX = s[0]->data();
                            for (std::size_t o = 0; o < G.size(); ++o) GX[argmax[o]] += G[o];
                          });
}

Var nearest_upsample2d(const Var& x) {
  spatial_check(Op::nearest_upsample2d, x.shape());
  const auto X = spatial_of(x.shape());
  Shape out_shape = x.shape();
  const std::size_t r = out_shape.size();
  out_shape[r - 3] = X.h * 2;
  out_shape[r - 2] = X.w * 2;
  Tensor out(out_shape);
  const std::size_t OH = 2 * X.h, OW = 2 * X.w;
  // Calls f(out_index, in_index) for every output element.
  auto sweep = [=](auto&& f) {
    for (std::size_t n = 0; n < X.n; ++n)
      for (std::size_t y = 0; y < OH; ++y)
        for (std::size_t xx = 0; xx < OW; ++xx) {
          const std::size_t o = ((n * OH + y) * OW + xx) * X.c;
          const std::size_t i = ((n * X.h + y / 2) * X.w + xx / 2) * X.c;
          for (std::size_t c = 0; c < X.c; ++c) f(o + c, i + c);
        }
  };
  {
    auto XV = x.value().data();
    auto O = out.data();
    sweep([&](std::size_t o, std::size_t i) { O[o] = XV[i]; });
  }
  if (!x.requires_grad()) return Var(std::move(out));
  return x.tape()->record(Op::nearest_upsample2d, std::move(out), {x},
                          [sweep](const Tensor& g, Slots s) {
                            auto G = g.data();
                            auto GX = s[0]->data();
                            sweep([&](std::size_t o, std::size_t i) { GX[i] += G[o]; });
                          });
}

Var concat(std::span<const Var> xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = xs[0].shape();
  const std::size_t ax = norm_axis(Op::concat, axis, s0.size());
  Shape out_shape = s0;
  out_shape[ax] = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != ax && s[i] != s0[i]) ok = false;
    if (!ok) {
      Shape expect = s0;
      expect[ax] = s.size() > ax ? s[ax] : 0;
      shape_fail(Op::concat, shape_str(expect), s);
    }
    out_shape[ax] += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s0[i];
  for (std::size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
  const std::size_t out_row = out_shape[ax] * inner;
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  {
    auto O = out.data();
    std::size_t off = 0;
    for (const auto& x : xs) {
      offsets.push_back(off);
      const std::size_t chunk = x.shape()[ax] * inner;
      auto XV = x.value().data();
      for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(&XV[o * chunk], chunk, &O[o * out_row + off]);
      off += chunk;
    }
  }
  bool grad = false;
  for (const auto& x : xs) grad = grad || x.requires_grad();
  if (!grad) return Var(std::move(out));
  Tape* tape = nullptr;
  std::vector<std::size_t> chunks;
  for (const auto& x : xs) {
    if (x.requires_grad()) tape = x.tape();
    chunks.push_back(x.shape()[ax] * inner);
  }
  return tape->record(Op::concat, std::move(out), std::vector<Var>(xs.begin(), xs.end()),
                      [offsets, chunks, outer, out_row](const Tensor& g, Slots s) {
                        auto G = g.data();
                        for (std::size_t k = 0; k < s.size(); ++k) {
                          if (!s[k]) continue;
                          auto GX = s[k]->data();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t j = 0; j < chunks[k]; ++j)
                              GX[o * chunks[k] + j] += G[o * out_row + offsets[k] + j];
                        }
                      });
}

Var slice(const Var& x, int axis, std::size_t start, std::size_t length) {
  const Shape& s = x.shape();
  const std::size_t ax = norm_axis(Op::slice, axis, s.size());
  if (length == 0 || start + length > s[ax])
    shape_fail(Op::slice,
               "axis " + std::to_string(ax) + " extent >= " + std::to_string(start + length), s);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[ax] = length;
  Tensor out(out_shape);
  const std::size_t in_row = s[ax] * inner, out_row = length * inner, off = start * inner;
  {
    auto XV = x.value().data();
    auto O = out.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(&XV[o * in_row + off], out_row, &O[o * out_row]);
  }
  if (!x.requires_grad()) return Var(std::move(out));
  return x.tape()->record(Op::slice, std::move(out), {x},
                          [outer, in_row, out_row, off](const Tensor& g, Slots sl) {
                            auto G = g.data();
                            auto GX = sl[0]->data();
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t j = 0; j < out_row; ++j)
                                GX[o * in_row + off + j] += G[o * out_row + j];
                          });
}

Var reshape(const Var& x, Shape shape) {
  if (shape_size(shape) != x.value().size())
    shape_fail(Op::reshape, std::to_string(x.value().size()) + " elements", shape);
  Tensor out = x.value().reshaped(std::move(shape));
  if (!x.requires_grad()) return Var(std::move(out));
  return x.tape()->record(Op::reshape, std::move(out), {x}, [](const Tensor& g, Slots s) {
    auto G = g.data();
    auto GX = s[0]->data();
    for (std::size_t i = 0; i < G.size(); ++i) GX[i] += G[i];
  });
}

Var transpose(const Var& x, std::vector<std::size_t> perm) {
  const Shape& s = x.shape();
  {
    auto sorted = perm;
    std::sort(sorted.begin(), sorted.end());
    bool ok = sorted.size() == s.size();
    for (std::size_t i = 0; ok && i < sorted.size(); ++i) ok = sorted[i] == i;
    if (!ok) shape_fail(Op::transpose, "permutation of rank " + std::to_string(s.size()), Shape(perm.begin(), perm.end()));
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[perm[i]];
  // Stride into the input for each output axis.
  auto in_strides = strides_of(s);
  std::vector<std::size_t> src(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) src[i] = in_strides[perm[i]];
  Tensor out(out_shape);
  {
    auto XV = x.value().data();
    auto O = out.data();
    for_each_reduced(out_shape, src, [&](std::size_t o, std::size_t i) { O[o] = XV[i]; });
  }
  if (!x.requires_grad()) return Var(std::move(out));
  return x.tape()->record(Op::transpose, std::move(out), {x},
                          [out_shape, src](const Tensor& g, Slots sl) {
                            auto G = g.data();
                            auto GX = sl[0]->data();
                            for_each_reduced(out_shape, src,
                                             [&](std::size_t o, std::size_t i) { GX[i] += G[o]; });
                          });
}

Var broadcast(const Var& x, Shape shape) {
  auto p = plan_broadcast(Op::broadcast, x.shape(), shape);
  if (p.out != shape) shape_fail(Op::broadcast, "broadcastable to " + shape_str(shape), x.shape());
  Tensor out(shape);
  {
    auto XV = x.value().data();
    auto O = out.data();
    for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t) { O[o] = XV[i]; });
  }
  if (!x.requires_grad()) return Var(std::move(out));
  return x.tape()->record(Op::broadcast, std::move(out), {x},
                          [p = std::move(p)](const Tensor& g, Slots s) {
                            auto G = g.data();
                            auto GX = s[0]->data();
                            for_each_broadcast(p, [&](std::size_t o, std::size_t i, std::size_t) {
                              GX[i] += G[o];
                            });
                          });
}

Var gather_rows(const Var& x, std::vector<std::size_t> indices) {
  const Shape& s = x.shape();
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  const std::size_t row = x.value().size() / s[0];
  for (auto i : indices)
    if (i >= s[0])
      shape_fail(Op::gather_rows, "row index < " + std::to_string(s[0]) + " (got " + std::to_string(i) + ")", s);
  Shape out_shape = s;
  out_shape[0] = indices.size();
  Tensor out(out_shape);
  {
    auto XV = x.value().data();
    auto O = out.data();
    for (std::size_t r = 0; r < indices.size(); ++r)
      std::copy_n(&XV[indices[r] * row], row, &O[r * row]);
  }
  if (!x.requires_grad()) return Var(std::move(out));
  return x.tape()->record(Op::gather_rows, std::move(out), {x},
                          [indices = std::move(indices), row](const Tensor& g, Slots sl) {
                            auto G = g.data();
                            auto GX = sl[0]->data();
                            for (std::size_t r = 0; r < indices.size(); ++r)
                              for (std::size_t j = 0; j < row; ++j)
                                GX[indices[r] * row + j] += G[r * row + j];
                          });
}

Var sigmoid(const Var& x) {
  return unary(
      Op::sigmoid, x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Var tanh(const Var& x) {
  return unary(
      Op::tanh, x, [](double v) { return std::tanh(v); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

Var relu(const Var& x) {
  return unary(
      Op::relu, x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double g, double v, double) { return v > 0.0 ? g : 0.0; });
}

Var square(const Var& x) {
  return unary(
      Op::square, x, [](double v) { return v * v; },
      [](double g, double v, double) { return 2.0 * v * g; });
}

Var sqrt(const Var& x) {
  return unary(
      Op::sqrt, x, [](double v) { return std::sqrt(v); },
      [](double g, double, double y) { return g / (2.0 * y); });
}

Var log(const Var& x) {
  return unary(
      Op::log, x, [](double v) { return std::log(v); },
      [](double g, double v, double) { return g / v; });
}

Var exp(const Var& x) {
  return unary(
      Op::exp, x, [](double v) { return std::exp(v); },
      [](double g, double, double y) { return g * y; });
}

Var pow(const Var& x, double exponent) {
  return unary(
      Op::pow, x, [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double g, double v, double) { return g * exponent * std::pow(v, exponent - 1.0); });
}

Var clamp_min(const Var& x, double floor) {
  return unary(
      Op::clamp_min, x, [floor](double v) { return v < floor ? floor : v; },
      [floor](double g, double v, double) { return v < floor ? 0.0 : g; });
}

Var softmax(const Var& x, int axis) {
  const Shape& s = x.shape();
  const std::size_t ax = norm_axis(Op::softmax, axis, s.size());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  Tensor out(s);
  {
    auto XV = x.value().data();
    auto O = out.data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double mx = XV[base];
        for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, XV[base + j * inner]);
        double z = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          O[base + j * inner] = std::exp(XV[base + j * inner] - mx);
          z += O[base + j * inner];
        }
        for (std::size_t j = 0; j < len; ++j) O[base + j * inner] /= z;
      }
  }
  if (!x.requires_grad()) return Var(std::move(out));
  auto yv = std::make_shared<const Tensor>(out);
  return x.tape()->record(Op::softmax, std::move(out), {x},
                          [yv, outer, inner, len](const Tensor& g, Slots sl) {
                            auto G = g.data();
                            auto Y = yv->data();
                            auto GX = sl[0]->data();
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t in = 0; in < inner; ++in) {
                                const std::size_t base = o * len * inner + in;
                                double dot = 0.0;
                                for (std::size_t j = 0; j < len; ++j)
                                  dot += G[base + j * inner] * Y[base + j * inner];
                                for (std::size_t j = 0; j < len; ++j) {
                                  const std::size_t i = base + j * inner;
                                  GX[i] += Y[i] * (G[i] - dot);
                                }
                              }
                          });
}

Var layer_norm(const Var& x) {
  const Shape& s = x.shape();
  const std::size_t C = s.back();
  const std::size_t rows = x.value().size() / C;
  Tensor out(s);
  std::vector<double> inv_std(rows);
  {
    auto XV = x.value().data();
    auto O = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = &XV[r * C];
      double mu = 0.0;
      for (std::size_t c = 0; c < C; ++c) mu += xr[c];
      mu /= static_cast<double>(C);
      double var = 0.0;
      for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
      var /= static_cast<double>(C);
      const double is = 1.0 / std::sqrt(var + kLayerNormEps);
      inv_std[r] = is;
      for (std::size_t c = 0; c < C; ++c) O[r * C + c] = (xr[c] - mu) * is;
    }
  }
  if (!x.requires_grad()) return Var(std::move(out));
  auto yv = std::make_shared<const Tensor>(out);
  return x.tape()->record(
      Op::layer_norm, std::move(out), {x},
      [yv, inv_std = std::move(inv_std), rows, C](const Tensor& g, Slots sl) {
        auto G = g.data();
        auto Y = yv->data();
        auto GX = sl[0]->data();
        const double inv_c = 1.0 / static_cast<double>(C);
        for (std::size_t r = 0; r < rows; ++r) {
          double gm = 0.0, gy = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            gm += G[r * C + c];
            gy += G[r * C + c] * Y[r * C + c];
          }
          gm *= inv_c;
          gy *= inv_c;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t i = r * C + c;
            GX[i] += inv_std[r] * (G[i] - gm - Y[i] * gy);
          }
        }
      });
}

Var sum(const Var& x, std::vector<std::size_t> axes, bool keepdims) {
  return reduce(Op::sum, x, std::move(axes), keepdims, false);
}

Var mean(const Var& x, std::vector<std::size_t> axes, bool keepdims) {
  return reduce(Op::mean, x, std::move(axes), keepdims, true);
}

}  // namespace ops

Var apply_primitive(Op kind, std::span<const Var> in, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                       " inputs, got " + std::to_string(in.size()));
  };
  Var out;
  switch (kind) {
    case Op::leaf: throw std::invalid_argument("leaf is not an applicable primitive");
    case Op::add: need(2); out = ops::add(in[0], in[1]); break;
    case Op::sub: need(2); out = ops::sub(in[0], in[1]); break;
    case Op::mul: need(2); out = ops::mul(in[0], in[1]); break;
    case Op::div: need(2); out = ops::div(in[0], in[1]); break;
    case Op::matmul: need(2); out = ops::matmul(in[0], in[1]); break;
    case Op::conv2d: need(2); out = ops::conv2d(in[0], in[1]); break;
    case Op::max_pool2d: need(1); out = ops::max_pool2d(in[0]); break;
    case Op::nearest_upsample2d: need(1); out = ops::nearest_upsample2d(in[0]); break;
    case Op::concat: out = ops::concat(in, attrs.axis); break;
    case Op::sigmoid: need(1); out = ops::sigmoid(in[0]); break;
    case Op::tanh: need(1); out = ops::tanh(in[0]); break;
    case Op::relu: need(1); out = ops::relu(in[0]); break;
    case Op::softmax: need(1); out = ops::softmax(in[0], attrs.axis); break;
    case Op::layer_norm: need(1); out = ops::layer_norm(in[0]); break;
    case Op::mean: need(1); out = ops::mean(in[0], attrs.axes, attrs.keepdims); break;
    case Op::sum: need(1); out = ops::sum(in[0], attrs.axes, attrs.keepdims); break;
    case Op::square: need(1); out = ops::square(in[0]); break;
    case Op::sqrt: need(1); out = ops::sqrt(in[0]); break;
    case Op::log: need(1); out = ops::log(in[0]); break;
    case Op::exp: need(1); out = ops::exp(in[0]); break;
    case Op::pow: need(1); out = ops::pow(in[0], attrs.exponent); break;
    case Op::clamp_min: need(1); out = ops::clamp_min(in[0], attrs.floor); break;
    case Op::broadcast: need(1); out = ops::broadcast(in[0], attrs.shape); break;
    case Op::reshape: need(1); out = ops::reshape(in[0], attrs.shape); break;
    case Op::transpose: need(1); out = ops::transpose(in[0], attrs.perm); break;
    case Op::slice: need(1); out = ops::slice(in[0], attrs.axis, attrs.start, attrs.length); break;
    case Op::gather_rows: need(1); out = ops::gather_rows(in[0], attrs.indices); break;
  }
  if (attrs.check_finite && !out.value().all_finite())
    throw NonFiniteError(std::string(op_name(kind)) + ": non-finite output");
  return out;
}

}  // namespace btgat
