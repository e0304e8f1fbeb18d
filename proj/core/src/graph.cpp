#include "tense/graph.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <set>

#include <Eigen/Core>

#include "tense/fft.hpp"

namespace tense {

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::AddBias: return "add_bias";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Sum: return "sum";
    case OpKind::Dot: return "dot";
    case OpKind::NormL1: return "norm_l1";
    case OpKind::NormL2: return "norm_l2";
    case OpKind::BatchNorm: return "batch_norm";
    case OpKind::Resize: return "resize";
    case OpKind::Reshape: return "reshape";
    case OpKind::Flatten: return "flatten";
    case OpKind::SelectPosition: return "select_position";
    case OpKind::Ifft2Real: return "ifft2_real";
    case OpKind::PolarToComplex: return "polar_to_complex";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::DotCosine: return "dot_cosine";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Construction

NodeId Graph::push(OpKind op, std::vector<NodeId> inputs, OpAttrs attrs) {
  for (NodeId in : inputs)
    if (in.index >= nodes_.size()) throw InvalidArgument("graph input refers to a later node");
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.attrs = std::move(attrs);
  nodes_.push_back(std::move(n));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId Graph::input(std::string name) {
  if (find_input(name)) throw InvalidArgument("duplicate graph input '" + name + "'");
  NodeId id = push(OpKind::Input, {});
  nodes_.back().name = std::move(name);
  return id;
}

NodeId Graph::constant(Tensor value, std::string name) {
  NodeId id = push(OpKind::Constant, {});
  nodes_.back().name = std::move(name);
  nodes_.back().constant = std::make_shared<const Tensor>(std::move(value));
  return id;
}

NodeId Graph::add(NodeId a, NodeId b) { return push(OpKind::Add, {a, b}); }
NodeId Graph::sub(NodeId a, NodeId b) { return push(OpKind::Sub, {a, b}); }
NodeId Graph::mul(NodeId a, NodeId b) { return push(OpKind::Mul, {a, b}); }
NodeId Graph::scale(NodeId a, double factor) {
  OpAttrs at;
  at.scalar = factor;
  return push(OpKind::Scale, {a}, at);
}
NodeId Graph::add_bias(NodeId x, NodeId bias) { return push(OpKind::AddBias, {x, bias}); }
NodeId Graph::matmul(NodeId a, NodeId b) { return push(OpKind::MatMul, {a, b}); }
NodeId Graph::transpose(NodeId a) { return push(OpKind::Transpose, {a}); }
NodeId Graph::conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding) {
  if (stride == 0) throw InvalidArgument("conv2d stride must be positive");
  OpAttrs at;
  at.stride = stride;
  at.padding = padding;
  return push(OpKind::Conv2d, {x, w}, at);
}
NodeId Graph::relu(NodeId x) { return push(OpKind::Relu, {x}); }
NodeId Graph::sigmoid(NodeId x) { return push(OpKind::Sigmoid, {x}); }
NodeId Graph::sum(NodeId x) { return push(OpKind::Sum, {x}); }
NodeId Graph::dot(NodeId a, NodeId b) { return push(OpKind::Dot, {a, b}); }
NodeId Graph::norm_l1(NodeId x) { return push(OpKind::NormL1, {x}); }
NodeId Graph::norm_l2(NodeId x) { return push(OpKind::NormL2, {x}); }
NodeId Graph::batch_norm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean,
                         NodeId running_var, BatchNormMode mode, double eps) {
  OpAttrs at;
  at.scalar = eps;
  at.bn_mode = mode;
  return push(OpKind::BatchNorm, {x, gamma, beta, running_mean, running_var}, at);
}
NodeId Graph::resize(NodeId x, NodeId box, std::size_t out_rows, std::size_t out_cols) {
  OpAttrs at;
  at.shape = {out_rows, out_cols};
  return push(OpKind::Resize, {x, box}, at);
}
NodeId Graph::reshape(NodeId x, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return push(OpKind::Reshape, {x}, at);
}
NodeId Graph::flatten(NodeId x) { return push(OpKind::Flatten, {x}); }
NodeId Graph::select_position(NodeId x, std::size_t row, std::size_t col) {
  OpAttrs at;
  at.row = row;
  at.col = col;
  return push(OpKind::SelectPosition, {x}, at);
}
NodeId Graph::ifft2_real(NodeId spectrum) { return push(OpKind::Ifft2Real, {spectrum}); }
NodeId Graph::polar_to_complex(NodeId magnitude, NodeId phase) {
  return push(OpKind::PolarToComplex, {magnitude, phase});
}
NodeId Graph::softmax_cross_entropy(NodeId logits, NodeId target) {
  return push(OpKind::SoftmaxCrossEntropy, {logits, target});
}
NodeId Graph::dot_cosine(NodeId h, NodeId s, double power) {
  if (power < 0) throw InvalidArgument("dot_cosine power must be >= 0");
  OpAttrs at;
  at.scalar = power;
  return push(OpKind::DotCosine, {h, s}, at);
}

void Graph::set_output(std::string name, NodeId id) {
  if (id.index >= nodes_.size()) throw InvalidArgument("output refers to a missing node");
  outputs_[std::move(name)] = id;
}

std::optional<NodeId> Graph::find_input(std::string_view name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].op == OpKind::Input && nodes_[i].name == name)
      return NodeId{static_cast<std::uint32_t>(i)};
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using Ten = BasicTensor<T>;

struct ConvGeom {
  std::size_t n, c, h, w, o, kh, kw, oh, ow, stride, pad;
};

ConvGeom conv_geom(const Shape& xs, const Shape& ws, std::size_t stride, std::size_t pad,
                   long node) {
  if (xs.size() != 4 || ws.size() != 4)
    throw ShapeError("conv2d expects x[N,C,H,W] and w[O,C,KH,KW], got " + shape_str(xs) + " and " +
                         shape_str(ws),
                     node);
  if (xs[1] != ws[1])
    throw ShapeError("conv2d channel mismatch " + shape_str(xs) + " vs " + shape_str(ws), node);
  if (xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3])
    throw ShapeError("conv2d kernel larger than padded input", node);
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], 0, 0, stride, pad};
  g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
  g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

// Valid output range [lo, hi) along one axis for kernel offset k.
inline void conv_range(std::size_t k, std::size_t stride, std::size_t pad, std::size_t in,
                       std::size_t out, std::size_t& lo, std::size_t& hi) {
  // need 0 <= o*stride - pad + k < in
  const long kk = static_cast<long>(k) - static_cast<long>(pad);
  long l = kk >= 0 ? 0 : (-kk + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  long h = (static_cast<long>(in) - 1 - kk);
  h = h < 0 ? 0 : h / static_cast<long>(stride) + 1;
  lo = static_cast<std::size_t>(std::max(0L, l));
  hi = std::min(out, static_cast<std::size_t>(std::max(0L, h)));
  if (lo > hi) lo = hi;
}

template <typename T>
void conv_forward(const ConvGeom& g, const T* x, const T* w, T* y) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      T* yo = y + (n * g.o + o) * g.oh * g.ow;
      for (std::size_t c = 0; c < g.c; ++c) {
        const T* xc = x + (n * g.c + c) * g.h * g.w;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          std::size_t r0, r1;
          conv_range(ki, g.stride, g.pad, g.h, g.oh, r0, r1);
          for (std::size_t kj = 0; kj < g.kw; ++kj) {
            std::size_t c0, c1;
            conv_range(kj, g.stride, g.pad, g.w, g.ow, c0, c1);
            const T wv = w[((o * g.c + c) * g.kh + ki) * g.kw + kj];
            for (std::size_t r = r0; r < r1; ++r) {
              const T* xr = xc + (r * g.stride + ki - g.pad) * g.w;
              T* yr = yo + r * g.ow;
              for (std::size_t q = c0; q < c1; ++q) yr[q] += wv * xr[q * g.stride + kj - g.pad];
            }
          }
        }
      }
    }
}

template <typename T>
void conv_backward(const ConvGeom& g, const T* x, const T* w, const T* gy, T* gx, T* gw) {
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t o = 0; o < g.o; ++o) {
      const T* go = gy + (n * g.o + o) * g.oh * g.ow;
      for (std::size_t c = 0; c < g.c; ++c) {
        const T* xc = x + (n * g.c + c) * g.h * g.w;
        T* gxc = gx ? gx + (n * g.c + c) * g.h * g.w : nullptr;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          std::size_t r0, r1;
          conv_range(ki, g.stride, g.pad, g.h, g.oh, r0, r1);
          for (std::size_t kj = 0; kj < g.kw; ++kj) {
            std::size_t c0, c1;
            conv_range(kj, g.stride, g.pad, g.w, g.ow, c0, c1);
            const std::size_t widx = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
            const T wv = w[widx];
            T acc = 0;
            for (std::size_t r = r0; r < r1; ++r) {
              const std::size_t off = (r * g.stride + ki - g.pad) * g.w;
              const T* gr = go + r * g.ow;
              const T* xr = xc + off;
              if (gxc) {
                T* gxr = gxc + off;
                for (std::size_t q = c0; q < c1; ++q) gxr[q * g.stride + kj - g.pad] += wv * gr[q];
              }
              for (std::size_t q = c0; q < c1; ++q) acc += xr[q * g.stride + kj - g.pad] * gr[q];
            }
            if (gw) gw[widx] += acc;
          }
        }
      }
    }
}

struct BilinearTap {
  std::size_t i0, i1;
  double w0, w1;
};

inline BilinearTap bilinear_tap(double pos, std::size_t size) {
  const double maxp = static_cast<double>(size - 1);
  pos = std::clamp(pos, 0.0, maxp);
  const double f = std::floor(pos);
  BilinearTap t;
  t.i0 = static_cast<std::size_t>(f);
  t.i1 = std::min(t.i0 + 1, size - 1);
  t.w1 = pos - f;
  t.w0 = 1.0 - t.w1;
  return t;
}

// Source coordinate for output index o when mapping [start, start+len) onto out samples.
inline double resample_pos(std::size_t o, double start, double len, std::size_t out) {
  return start + (static_cast<double>(o) + 0.5) * (len / static_cast<double>(out)) - 0.5;
}

template <typename T>
void resize_forward(const T* x, std::size_t planes, std::size_t h, std::size_t w, const double box[4],
                    std::size_t oh, std::size_t ow, T* y) {
  std::vector<BilinearTap> rt(oh), ct(ow);
  for (std::size_t r = 0; r < oh; ++r) rt[r] = bilinear_tap(resample_pos(r, box[0], box[2], oh), h);
  for (std::size_t c = 0; c < ow; ++c) ct[c] = bilinear_tap(resample_pos(c, box[1], box[3], ow), w);
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = x + p * h * w;
    T* yp = y + p * oh * ow;
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        const auto& a = rt[r];
        const auto& b = ct[c];
        const double v = a.w0 * (b.w0 * xp[a.i0 * w + b.i0] + b.w1 * xp[a.i0 * w + b.i1]) +
                         a.w1 * (b.w0 * xp[a.i1 * w + b.i0] + b.w1 * xp[a.i1 * w + b.i1]);
        yp[r * ow + c] = static_cast<T>(v);
      }
  }
}

template <typename T>
void resize_backward(const T* gy, std::size_t planes, std::size_t h, std::size_t w,
                     const double box[4], std::size_t oh, std::size_t ow, T* gx) {
  std::vector<BilinearTap> rt(oh), ct(ow);
  for (std::size_t r = 0; r < oh; ++r) rt[r] = bilinear_tap(resample_pos(r, box[0], box[2], oh), h);
  for (std::size_t c = 0; c < ow; ++c) ct[c] = bilinear_tap(resample_pos(c, box[1], box[3], ow), w);
  for (std::size_t p = 0; p < planes; ++p) {
    T* gp = gx + p * h * w;
    const T* yp = gy + p * oh * ow;
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        const auto& a = rt[r];
        const auto& b = ct[c];
        const double g = yp[r * ow + c];
        gp[a.i0 * w + b.i0] += static_cast<T>(g * a.w0 * b.w0);
        gp[a.i0 * w + b.i1] += static_cast<T>(g * a.w0 * b.w1);
        gp[a.i1 * w + b.i0] += static_cast<T>(g * a.w1 * b.w0);
        gp[a.i1 * w + b.i1] += static_cast<T>(g * a.w1 * b.w1);
      }
  }
}

template <typename T>
void read_box(const Ten<T>& box, double out[4], long node) {
  if (box.size() != 4) throw ShapeError("resize box must hold 4 values", node);
  for (int i = 0; i < 4; ++i) out[i] = static_cast<double>(box[static_cast<std::size_t>(i)]);
  if (out[2] <= 0 || out[3] <= 0) throw ShapeError("resize box must have positive extent", node);
}

// Orthonormal 2-D inverse DFT, real part, per channel. z[C, H, W, 2] -> [C, H, W].
template <typename T>
Ten<T> ifft_forward(const Ten<T>& z, long node) {
  const Shape& s = z.shape();
  if (s.size() != 4 || s[3] != 2) throw ShapeError("ifft2_real expects [C,H,W,2]", node);
  if (!fft::is_power_of_two(s[1]) || !fft::is_power_of_two(s[2]))
    throw ShapeError("ifft2_real needs power-of-two spatial size", node);
  const std::size_t hw = s[1] * s[2];
  const double norm = 1.0 / std::sqrt(static_cast<double>(hw));
  Ten<T> out(Shape{s[0], s[1], s[2]});
  std::vector<std::complex<double>> buf(hw);
  for (std::size_t c = 0; c < s[0]; ++c) {
    for (std::size_t i = 0; i < hw; ++i) buf[i] = {z[(c * hw + i) * 2], z[(c * hw + i) * 2 + 1]};
    fft::transform_2d(buf, s[1], s[2], true);
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = static_cast<T>(buf[i].real() * norm);
  }
  return out;
}

template <typename T>
void ifft_backward(const Ten<T>& gy, const Shape& zs, Ten<T>& gz) {
  const std::size_t hw = zs[1] * zs[2];
  const double norm = 1.0 / std::sqrt(static_cast<double>(hw));
  std::vector<std::complex<double>> buf(hw);
  for (std::size_t c = 0; c < zs[0]; ++c) {
    for (std::size_t i = 0; i < hw; ++i) buf[i] = {static_cast<double>(gy[c * hw + i]), 0.0};
    fft::transform_2d(buf, zs[1], zs[2], false);
    for (std::size_t i = 0; i < hw; ++i) {
      gz[(c * hw + i) * 2] += static_cast<T>(buf[i].real() * norm);
      gz[(c * hw + i) * 2 + 1] += static_cast<T>(buf[i].imag() * norm);
    }
  }
}

inline double signed_pow(double x, double p) {
  return x < 0 ? -std::pow(-x, p) : std::pow(x, p);
}

// Channel layout helper: [N, C, rest...] -> (N, C, inner).
inline void channel_layout(const Shape& s, std::size_t& n, std::size_t& c, std::size_t& inner) {
  n = s[0];
  c = s[1];
  inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
}

template <typename T>
void require_same(const Ten<T>& a, const Ten<T>& b, std::string_view op, long node) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + " shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()),
                     node);
}

template <typename T>
void accumulate(Ten<T>& dst, const Ten<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward

template <typename T>
BasicEvaluation<T> Graph::evaluate(
    const std::map<std::string, BasicTensor<T>, std::less<>>& inputs) const {
  BasicEvaluation<T> ev;
  ev.graph_ = this;
  ev.values_.resize(nodes_.size());
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& nd = nodes_[id];
    const long nid = static_cast<long>(id);
    auto in = [&](std::size_t k) -> const Ten<T>& { return ev.values_[nd.inputs[k].index]; };
    Ten<T> out;
    switch (nd.op) {
      case OpKind::Input: {
        auto it = inputs.find(nd.name);
        if (it == inputs.end()) throw InvalidArgument("graph input '" + nd.name + "' not bound");
        out = it->second;
        break;
      }
      case OpKind::Constant:
        out = tensor_cast<T>(*nd.constant);
        break;
      case OpKind::Add:
      case OpKind::Sub:
      case OpKind::Mul: {
        const auto& a = in(0);
        const auto& b = in(1);
        require_same(a, b, op_name(nd.op), nid);
        out = Ten<T>(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i)
          out[i] = nd.op == OpKind::Add ? a[i] + b[i] : nd.op == OpKind::Sub ? a[i] - b[i] : a[i] * b[i];
        break;
      }
      case OpKind::Scale: {
        out = in(0);
        const T f = static_cast<T>(nd.attrs.scalar);
        for (auto& v : out.data()) v *= f;
        break;
      }
      case OpKind::AddBias: {
        const auto& x = in(0);
        const auto& b = in(1);
        if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1))
          throw ShapeError("add_bias expects x[N,C,...] and b[C], got " + shape_str(x.shape()) +
                               " and " + shape_str(b.shape()),
                           nid);
        std::size_t n, c, inner;
        channel_layout(x.shape(), n, c, inner);
        out = x;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            T* p = out.data().data() + (i * c + j) * inner;
            for (std::size_t k = 0; k < inner; ++k) p[k] += b[j];
          }
        break;
      }
      case OpKind::MatMul: {
        const auto& a = in(0);
        const auto& b = in(1);
        if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
          throw ShapeError("matmul shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()),
                           nid);
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        out = Ten<T>(Shape{m, n});
        const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
        MatMap<T>(out.data().data(), ei(m), ei(n)).noalias() =
            ConstMatMap<T>(a.data().data(), ei(m), ei(k)) * ConstMatMap<T>(b.data().data(), ei(k), ei(n));
        break;
      }
      case OpKind::Transpose: {
        const auto& a = in(0);
        if (a.rank() != 2) throw ShapeError("transpose expects a matrix", nid);
        const std::size_t r = a.dim(0), c = a.dim(1);
        out = Ten<T>(Shape{c, r});
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
        break;
      }
      case OpKind::Conv2d: {
        const auto g = conv_geom(in(0).shape(), in(1).shape(), nd.attrs.stride, nd.attrs.padding, nid);
        out = Ten<T>(Shape{g.n, g.o, g.oh, g.ow});
        conv_forward(g, in(0).data().data(), in(1).data().data(), out.data().data());
        break;
      }
      case OpKind::Relu: {
        out = in(0);
        for (auto& v : out.data()) v = v > T{0} ? v : T{0};
        break;
      }
      case OpKind::Sigmoid: {
        out = in(0);
        for (auto& v : out.data()) {
          const double x = v;
          v = static_cast<T>(x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)));
        }
        break;
      }
      case OpKind::Sum: {
        double s = 0;
        for (T v : in(0).data()) s += v;
        out = Ten<T>::scalar(static_cast<T>(s));
        break;
      }
      case OpKind::Dot: {
        require_same(in(0), in(1), "dot", nid);
        double s = 0;
        for (std::size_t i = 0; i < in(0).size(); ++i)
          s += static_cast<double>(in(0)[i]) * static_cast<double>(in(1)[i]);
        out = Ten<T>::scalar(static_cast<T>(s));
        break;
      }
      case OpKind::NormL1: {
        double s = 0;
        for (T v : in(0).data()) s += std::abs(static_cast<double>(v));
        out = Ten<T>::scalar(static_cast<T>(s));
        break;
      }
      case OpKind::NormL2: {
        double s = 0;
        for (T v : in(0).data()) s += static_cast<double>(v) * v;
        out = Ten<T>::scalar(static_cast<T>(std::sqrt(s)));
        break;
      }
      case OpKind::BatchNorm: {
        const auto& x = in(0);
        if (x.rank() < 2) throw ShapeError("batch_norm expects [N,C,...]", nid);
        std::size_t n, c, inner;
        channel_layout(x.shape(), n, c, inner);
        for (std::size_t k = 1; k < 5; ++k)
          if (in(k).rank() != 1 || in(k).dim(0) != c)
            throw ShapeError("batch_norm parameter " + std::to_string(k) + " must have shape [" +
                                 std::to_string(c) + "]",
                             nid);
        const double eps = nd.attrs.scalar;
        std::vector<double> mean(c), var(c);
        if (nd.attrs.bn_mode == BatchNormMode::Training) {
          const double cnt = static_cast<double>(n * inner);
          for (std::size_t j = 0; j < c; ++j) {
            double s = 0, s2 = 0;
            for (std::size_t i = 0; i < n; ++i) {
              const T* p = x.data().data() + (i * c + j) * inner;
              for (std::size_t k = 0; k < inner; ++k) s += p[k];
            }
            mean[j] = s / cnt;
            for (std::size_t i = 0; i < n; ++i) {
              const T* p = x.data().data() + (i * c + j) * inner;
              for (std::size_t k = 0; k < inner; ++k) s2 += (p[k] - mean[j]) * (p[k] - mean[j]);
            }
            var[j] = s2 / cnt;
          }
          ev.bn_stats_[static_cast<std::uint32_t>(id)] = BatchStats{mean, var};
        } else {
          for (std::size_t j = 0; j < c; ++j) {
            mean[j] = in(3)[j];
            var[j] = in(4)[j];
          }
        }
        out = Ten<T>(x.shape());
        for (std::size_t j = 0; j < c; ++j) {
          const double inv = 1.0 / std::sqrt(var[j] + eps);
          const double gm = in(1)[j], bt = in(2)[j];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t base = (i * c + j) * inner;
            for (std::size_t k = 0; k < inner; ++k)
              out[base + k] = static_cast<T>(gm * (x[base + k] - mean[j]) * inv + bt);
          }
        }
        break;
      }
      case OpKind::Resize: {
        const auto& x = in(0);
        if (x.rank() != 4) throw ShapeError("resize expects [N,C,H,W]", nid);
        double box[4];
        read_box(in(1), box, nid);
        const std::size_t oh = nd.attrs.shape[0], ow = nd.attrs.shape[1];
        out = Ten<T>(Shape{x.dim(0), x.dim(1), oh, ow});
        resize_forward(x.data().data(), x.dim(0) * x.dim(1), x.dim(2), x.dim(3), box, oh, ow,
                       out.data().data());
        break;
      }
      case OpKind::Reshape: {
        if (numel(nd.attrs.shape) != in(0).size())
          throw ShapeError("cannot reshape " + shape_str(in(0).shape()) + " to " +
                               shape_str(nd.attrs.shape),
                           nid);
        out = in(0).reshaped(nd.attrs.shape);
        break;
      }
      case OpKind::Flatten: {
        const auto& x = in(0);
        if (x.rank() < 1) throw ShapeError("flatten expects a batch dimension", nid);
        out = x.reshaped(Shape{x.dim(0), x.size() / std::max<std::size_t>(1, x.dim(0))});
        break;
      }
      case OpKind::SelectPosition: {
        const auto& x = in(0);
        if (x.rank() != 4 || nd.attrs.row >= x.dim(2) || nd.attrs.col >= x.dim(3))
          throw ShapeError("select_position (" + std::to_string(nd.attrs.row) + "," +
                               std::to_string(nd.attrs.col) + ") outside " + shape_str(x.shape()),
                           nid);
        const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
        out = Ten<T>(Shape{n, c});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j)
            out[i * c + j] = x[((i * c + j) * h + nd.attrs.row) * w + nd.attrs.col];
        break;
      }
      case OpKind::Ifft2Real:
        out = ifft_forward(in(0), nid);
        break;
      case OpKind::PolarToComplex: {
        require_same(in(0), in(1), "polar_to_complex", nid);
        Shape s = in(0).shape();
        s.push_back(2);
        out = Ten<T>(s);
        for (std::size_t i = 0; i < in(0).size(); ++i) {
          const double m = in(0)[i], ph = in(1)[i];
          out[2 * i] = static_cast<T>(m * std::cos(ph));
          out[2 * i + 1] = static_cast<T>(m * std::sin(ph));
        }
        break;
      }
      case OpKind::SoftmaxCrossEntropy: {
        const auto& z = in(0);
        require_same(z, in(1), "softmax_cross_entropy", nid);
        if (z.rank() != 2) throw ShapeError("softmax_cross_entropy expects [N,K]", nid);
        const std::size_t n = z.dim(0), k = z.dim(1);
        double total = 0;
        for (std::size_t i = 0; i < n; ++i) {
          double mx = z[i * k];
          for (std::size_t j = 1; j < k; ++j) mx = std::max<double>(mx, z[i * k + j]);
          double se = 0;
          for (std::size_t j = 0; j < k; ++j) se += std::exp(z[i * k + j] - mx);
          const double lse = mx + std::log(se);
          for (std::size_t j = 0; j < k; ++j) total -= in(1)[i * k + j] * (z[i * k + j] - lse);
        }
        out = Ten<T>::scalar(static_cast<T>(total / static_cast<double>(std::max<std::size_t>(n, 1))));
        break;
      }
      case OpKind::DotCosine: {
        const auto& h = in(0);
        const auto& s = in(1);
        if (h.size() != s.size())
          throw ShapeError("dot_cosine size mismatch " + shape_str(h.shape()) + " vs " +
                               shape_str(s.shape()),
                           nid);
        double d = 0, hh = 0, ss = 0;
        for (std::size_t i = 0; i < h.size(); ++i) {
          d += static_cast<double>(h[i]) * s[i];
          hh += static_cast<double>(h[i]) * h[i];
          ss += static_cast<double>(s[i]) * s[i];
        }
        const double p = nd.attrs.scalar;
        double v = 0;
        if (hh > 0 && ss > 0) v = signed_pow(d, p + 1) / std::pow(std::sqrt(hh) * std::sqrt(ss), p);
        out = Ten<T>::scalar(static_cast<T>(v));
        break;
      }
    }
    if (nd.op != OpKind::Input && nd.op != OpKind::Constant && !out.all_finite())
      throw NonFiniteError(std::string(op_name(nd.op)) + " produced a non-finite value", nid);
    ev.values_[id] = std::move(out);
  }
  return ev;
}

Evaluation Graph::evaluate(const TensorMap& inputs) const { return evaluate<float>(inputs); }

template <typename T>
const BatchStats* BasicEvaluation<T>::batch_stats(NodeId id) const {
  auto it = bn_stats_.find(id.index);
  return it == bn_stats_.end() ? nullptr : &it->second;
}

// ---------------------------------------------------------------------------
// Backward

template <typename T>
BasicGradients<T> BasicEvaluation<T>::backward(NodeId output, std::span<const NodeId> wrt) const {
  const auto& nodes = *graph_;
  const std::size_t count = nodes.size();
  if (output.index >= count) throw InvalidArgument("backward output out of range");
  if (values_[output.index].size() != 1)
    throw ShapeError("backward needs a single-element output, got " +
                         shape_str(values_[output.index].shape()),
                     output.index);

  std::vector<char> reach(count, 0), needs(count, 0), requested(count, 0);
  for (NodeId w : wrt) {
    if (w.index >= count) throw InvalidArgument("backward request out of range");
    requested[w.index] = 1;
  }
  reach[output.index] = 1;
  for (std::size_t i = output.index + 1; i-- > 0;)
    if (reach[i])
      for (NodeId in : nodes.node(NodeId{static_cast<std::uint32_t>(i)}).inputs) reach[in.index] = 1;
  for (std::size_t i = 0; i <= output.index; ++i) {
    if (!reach[i]) continue;
    needs[i] = requested[i];
    for (NodeId in : nodes.node(NodeId{static_cast<std::uint32_t>(i)}).inputs)
      if (needs[in.index]) needs[i] = 1;
  }

  std::vector<Ten<T>> adj(count);
  std::vector<char> has(count, 0);
  auto grad_of = [&](NodeId id) -> Ten<T>* {
    if (!needs[id.index]) return nullptr;
    if (!has[id.index]) {
      adj[id.index] = Ten<T>(values_[id.index].shape());
      has[id.index] = 1;
    }
    return &adj[id.index];
  };
  adj[output.index] = Ten<T>(values_[output.index].shape(), T{1});
  has[output.index] = 1;

  for (std::size_t id = output.index + 1; id-- > 0;) {
    if (!has[id] || !needs[id]) continue;
    const Node& nd = nodes.node(NodeId{static_cast<std::uint32_t>(id)});
    if (nd.op == OpKind::Input || nd.op == OpKind::Constant) continue;
    const Ten<T>& g = adj[id];
    const Ten<T>& y = values_[id];
    auto in = [&](std::size_t k) -> const Ten<T>& { return values_[nd.inputs[k].index]; };
    auto gin = [&](std::size_t k) { return grad_of(nd.inputs[k]); };
    switch (nd.op) {
      case OpKind::Input:
      case OpKind::Constant:
        break;
      case OpKind::Add:
      case OpKind::Sub: {
        if (auto* ga = gin(0)) accumulate(*ga, g);
        if (auto* gb = gin(1))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += nd.op == OpKind::Add ? g[i] : -g[i];
        break;
      }
      case OpKind::Mul: {
        if (auto* ga = gin(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * in(1)[i];
        if (auto* gb = gin(1))
          for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * in(0)[i];
        break;
      }
      case OpKind::Scale: {
        if (auto* ga = gin(0)) {
          const T f = static_cast<T>(nd.attrs.scalar);
          for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * f;
        }
        break;
      }
      case OpKind::AddBias: {
        if (auto* gx = gin(0)) accumulate(*gx, g);
        if (auto* gb = gin(1)) {
          std::size_t n, c, inner;
          channel_layout(g.shape(), n, c, inner);
          for (std::size_t j = 0; j < c; ++j) {
            double s = 0;
            for (std::size_t i = 0; i < n; ++i) {
              const T* p = g.data().data() + (i * c + j) * inner;
              for (std::size_t k = 0; k < inner; ++k) s += p[k];
            }
            (*gb)[j] += static_cast<T>(s);
          }
        }
        break;
      }
      case OpKind::MatMul: {
        const auto& a = in(0);
        const auto& b = in(1);
        const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
        const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
        const ConstMatMap<T> G(g.data().data(), ei(m), ei(n));
        if (auto* ga = gin(0))
          MatMap<T>(ga->data().data(), ei(m), ei(k)).noalias() +=
              G * ConstMatMap<T>(b.data().data(), ei(k), ei(n)).transpose();
        if (auto* gb = gin(1))
          MatMap<T>(gb->data().data(), ei(k), ei(n)).noalias() +=
              ConstMatMap<T>(a.data().data(), ei(m), ei(k)).transpose() * G;
        break;
      }
      case OpKind::Transpose: {
        if (auto* ga = gin(0)) {
          const std::size_t r = in(0).dim(0), c = in(0).dim(1);
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*ga)[i * c + j] += g[j * r + i];
        }
        break;
      }
      case OpKind::Conv2d: {
        auto* gx = gin(0);
        auto* gw = gin(1);
        if (gx || gw) {
          const auto geo = conv_geom(in(0).shape(), in(1).shape(), nd.attrs.stride,
                                     nd.attrs.padding, static_cast<long>(id));
          conv_backward(geo, in(0).data().data(), in(1).data().data(), g.data().data(),
                        gx ? gx->data().data() : nullptr, gw ? gw->data().data() : nullptr);
        }
        break;
      }
      case OpKind::Relu: {
        if (auto* gx = gin(0))
          for (std::size_t i = 0; i < g.size(); ++i)
            if (in(0)[i] > T{0}) (*gx)[i] += g[i];
        break;
      }
      case OpKind::Sigmoid: {
        if (auto* gx = gin(0))
          for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * y[i] * (T{1} - y[i]);
        break;
      }
      case OpKind::Sum: {
        if (auto* gx = gin(0))
          for (auto& v : gx->data()) v += g[0];
        break;
      }
      case OpKind::Dot: {
        if (auto* ga = gin(0))
          for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0] * in(1)[i];
        if (auto* gb = gin(1))
          for (std::size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g[0] * in(0)[i];
        break;
      }
      case OpKind::NormL1: {
        if (auto* gx = gin(0))
          for (std::size_t i = 0; i < gx->size(); ++i) {
            const T v = in(0)[i];
            (*gx)[i] += v > 0 ? g[0] : v < 0 ? -g[0] : T{0};
          }
        break;
      }
      case OpKind::NormL2: {
        if (auto* gx = gin(0)) {
          const double nrm = y[0];
          if (nrm > 0)
            for (std::size_t i = 0; i < gx->size(); ++i)
              (*gx)[i] += static_cast<T>(g[0] * in(0)[i] / nrm);
        }
        break;
      }
      case OpKind::BatchNorm: {
        const auto& x = in(0);
        std::size_t n, c, inner;
        channel_layout(x.shape(), n, c, inner);
        const double eps = nd.attrs.scalar;
        const bool training = nd.attrs.bn_mode == BatchNormMode::Training;
        const BatchStats* st = training ? batch_stats(NodeId{static_cast<std::uint32_t>(id)}) : nullptr;
        auto* gx = gin(0);
        auto* ggamma = gin(1);
        auto* gbeta = gin(2);
        auto* gmean = training ? nullptr : gin(3);
        auto* gvar = training ? nullptr : gin(4);
        const double cnt = static_cast<double>(n * inner);
        for (std::size_t j = 0; j < c; ++j) {
          const double mean = training ? st->mean[j] : static_cast<double>(in(3)[j]);
          const double var = training ? st->var[j] : static_cast<double>(in(4)[j]);
          const double inv = 1.0 / std::sqrt(var + eps);
          const double gm = in(1)[j];
          double sg = 0, sgx = 0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t base = (i * c + j) * inner;
            for (std::size_t k = 0; k < inner; ++k) {
              const double xh = (x[base + k] - mean) * inv;
              sg += g[base + k];
              sgx += g[base + k] * xh;
            }
          }
          if (ggamma) (*ggamma)[j] += static_cast<T>(sgx);
          if (gbeta) (*gbeta)[j] += static_cast<T>(sg);
          if (gx) {
            for (std::size_t i = 0; i < n; ++i) {
              const std::size_t base = (i * c + j) * inner;
              for (std::size_t k = 0; k < inner; ++k) {
                double v;
                if (training) {
                  const double xh = (x[base + k] - mean) * inv;
                  v = gm * inv * (g[base + k] - sg / cnt - xh * sgx / cnt);
                } else {
                  v = gm * inv * g[base + k];
                }
                (*gx)[base + k] += static_cast<T>(v);
              }
            }
          }
          if (gmean) (*gmean)[j] += static_cast<T>(-gm * inv * sg);
          if (gvar) (*gvar)[j] += static_cast<T>(-0.5 * gm * sgx / (var + eps));
        }
        break;
      }
      case OpKind::Resize: {
        if (auto* gx = gin(0)) {
          double box[4];
          read_box(in(1), box, static_cast<long>(id));
          const auto& x = in(0);
          resize_backward(g.data().data(), x.dim(0) * x.dim(1), x.dim(2), x.dim(3), box,
                          nd.attrs.shape[0], nd.attrs.shape[1], gx->data().data());
        }
        break;
      }
      case OpKind::Reshape:
      case OpKind::Flatten: {
        if (auto* gx = gin(0)) accumulate(*gx, g);
        break;
      }
      case OpKind::SelectPosition: {
        if (auto* gx = gin(0)) {
          const auto& x = in(0);
          const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j)
              (*gx)[((i * c + j) * h + nd.attrs.row) * w + nd.attrs.col] += g[i * c + j];
        }
        break;
      }
      case OpKind::Ifft2Real: {
        if (auto* gz = gin(0)) ifft_backward(g, in(0).shape(), *gz);
        break;
      }
      case OpKind::PolarToComplex: {
        auto* gm = gin(0);
        auto* gp = gin(1);
        for (std::size_t i = 0; i < in(0).size(); ++i) {
          const double m = in(0)[i], ph = in(1)[i];
          const double g0 = g[2 * i], g1 = g[2 * i + 1];
          if (gm) (*gm)[i] += static_cast<T>(g0 * std::cos(ph) + g1 * std::sin(ph));
          if (gp) (*gp)[i] += static_cast<T>(-g0 * m * std::sin(ph) + g1 * m * std::cos(ph));
        }
        break;
      }
      case OpKind::SoftmaxCrossEntropy: {
        const auto& z = in(0);
        const auto& t = in(1);
        const std::size_t n = z.dim(0), k = z.dim(1);
        auto* gz = gin(0);
        auto* gt = gin(1);
        const double scale = g[0] / static_cast<double>(std::max<std::size_t>(n, 1));
        for (std::size_t i = 0; i < n; ++i) {
          double mx = z[i * k];
          for (std::size_t j = 1; j < k; ++j) mx = std::max<double>(mx, z[i * k + j]);
          double se = 0, tsum = 0;
          for (std::size_t j = 0; j < k; ++j) {
            se += std::exp(z[i * k + j] - mx);
            tsum += t[i * k + j];
          }
          const double lse = mx + std::log(se);
          for (std::size_t j = 0; j < k; ++j) {
            const double logp = z[i * k + j] - lse;
            if (gz) (*gz)[i * k + j] += static_cast<T>(scale * (std::exp(logp) * tsum - t[i * k + j]));
            if (gt) (*gt)[i * k + j] += static_cast<T>(-scale * logp);
          }
        }
        break;
      }
      case OpKind::DotCosine: {
        const auto& h = in(0);
        const auto& s = in(1);
        double d = 0, hh = 0, ss = 0;
        for (std::size_t i = 0; i < h.size(); ++i) {
          d += static_cast<double>(h[i]) * s[i];
          hh += static_cast<double>(h[i]) * h[i];
          ss += static_cast<double>(s[i]) * s[i];
        }
        if (hh <= 0 || ss <= 0) break;
        const double p = nd.attrs.scalar;
        const double denom = std::pow(std::sqrt(hh) * std::sqrt(ss), p);
        const double value = signed_pow(d, p + 1) / denom;
        const double lead = (p + 1) * std::pow(std::abs(d), p) / denom;
        const double go = g[0];
        if (auto* gh = gin(0))
          for (std::size_t i = 0; i < h.size(); ++i)
            (*gh)[i] += static_cast<T>(go * (lead * s[i] - p * value * h[i] / hh));
        if (auto* gs = gin(1))
          for (std::size_t i = 0; i < s.size(); ++i)
            (*gs)[i] += static_cast<T>(go * (lead * h[i] - p * value * s[i] / ss));
        break;
      }
    }
  }

  BasicGradients<T> result;
  for (NodeId w : wrt) {
    if (reach[w.index] && has[w.index]) {
      result.values.push_back(adj[w.index]);
    } else {
      result.values.emplace_back(values_[w.index].shape());
    }
    result.connected.push_back(reach[w.index] != 0);
  }
  return result;
}

template class BasicEvaluation<float>;
template class BasicEvaluation<double>;
template BasicEvaluation<float> Graph::evaluate<float>(
    const std::map<std::string, BasicTensor<float>, std::less<>>&) const;
template BasicEvaluation<double> Graph::evaluate<double>(
    const std::map<std::string, BasicTensor<double>, std::less<>>&) const;

// ---------------------------------------------------------------------------

TensorMap forward_eval(const Graph& graph, const TensorMap& inputs) {
  auto ev = graph.evaluate(inputs);
  TensorMap out;
  for (const auto& [name, id] : graph.outputs()) out.emplace(name, ev.value(id));
  return out;
}

namespace {

std::vector<char> relu_mask(const Graph& graph, const BasicEvaluation<double>& ev) {
  std::vector<char> mask;
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const Node& nd = graph.node(NodeId{static_cast<std::uint32_t>(i)});
    if (nd.op != OpKind::Relu) continue;
    for (double v : ev.value(nd.inputs[0]).data()) mask.push_back(v > 0 ? 1 : v < 0 ? 2 : 0);
  }
  return mask;
}

}  // namespace

GradCheckResult grad_check(const Graph& graph, const TensorMap& inputs, NodeId output, NodeId probe,
                           double step) {
  if (step <= 0) throw InvalidArgument("grad_check step must be positive");
  const Node& pn = graph.node(probe);
  if (pn.op != OpKind::Input) throw InvalidArgument("grad_check probe must be an input node");

  std::map<std::string, TensorD, std::less<>> dinputs;
  for (const auto& [name, t] : inputs) dinputs.emplace(name, tensor_cast<double>(t));

  const auto base = graph.evaluate(dinputs);
  const auto analytic = base.backward(output, std::span<const NodeId>(&probe, 1)).values[0];
  const auto base_mask = relu_mask(graph, base);

  GradCheckResult result;
  TensorD& x = dinputs.at(pn.name);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const auto plus = graph.evaluate(dinputs);
    x[i] = orig - step;
    const auto minus = graph.evaluate(dinputs);
    x[i] = orig;
    // Masks are three-valued, so a ReLU input sitting exactly at 0 that moves
    // under the perturbation also counts as a kink.
    const bool kink = relu_mask(graph, plus) != base_mask || relu_mask(graph, minus) != base_mask;
    if (kink) {
      ++result.skipped_kink;
      continue;
    }
    const double numeric = (plus.value(output)[0] - minus.value(output)[0]) / (2 * step);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-8);
    result.max_rel_error = std::max(result.max_rel_error, err);
    ++result.checked;
  }
  return result;
}

Tensor resize_bilinear(const Tensor& chw, std::size_t out_rows, std::size_t out_cols) {
  if (chw.rank() != 3) throw ShapeError("resize_bilinear expects [C,H,W]");
  const double box[4] = {0, 0, static_cast<double>(chw.dim(1)), static_cast<double>(chw.dim(2))};
  Tensor out(Shape{chw.dim(0), out_rows, out_cols});
  resize_forward(chw.data().data(), chw.dim(0), chw.dim(1), chw.dim(2), box, out_rows, out_cols,
                 out.data().data());
  return out;
}

}  // namespace tense
