#include "msod/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace msod {

namespace {

int shape_product(const Shape& s) {
  long long n = 1;
  for (int e : s) {
    if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got " + shape_str(s));
    n *= e;
  }
  if (n > (1LL << 31) - 1) throw std::invalid_argument("tensor too large: " + shape_str(s));
  return static_cast<int>(n);
}

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

using detail::Node;
using detail::NodePtr;

NodePtr make_node(Shape shape, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data.assign(shape_product(n->shape), 0.0);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return n;
}

// Records the backward rule when grads are wanted and a tape is listening.
void maybe_record(std::vector<NodePtr> nodes, std::function<void()> fn) {
  Tape* t = Tape::active();
  if (t != nullptr) t->push(std::move(nodes), std::move(fn));
}

bool wants_grad(std::initializer_list<const Tensor*> ins) {
  if (Tape::active() == nullptr) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(make_node(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = make_node(std::move(shape), requires_grad);
  std::fill(n->data.begin(), n->data.end(), value);
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  if (static_cast<int>(values.size()) != shape_product(n->shape))
    shape_error("Tensor::from", "got " + std::to_string(values.size()) +
                                    " values for shape " + shape_str(n->shape));
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }
int Tensor::size() const { return node_->size(); }
int Tensor::extent(int axis) const { return node_->shape.at(axis); }
const std::vector<double>& Tensor::data() const { return node_->data; }

double Tensor::value() const {
  if (size() != 1) shape_error("Tensor::value", "tensor " + shape_str(shape()) + " is not scalar");
  return node_->data[0];
}

double Tensor::at(std::initializer_list<int> index) const {
  if (static_cast<int>(index.size()) != rank())
    shape_error("Tensor::at", "index rank mismatch for " + shape_str(shape()));
  int flat = 0, axis = 0;
  for (int i : index) {
    if (i < 0 || i >= node_->shape[axis])
      shape_error("Tensor::at", "index out of range for " + shape_str(shape()));
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() const {
  node_->grad.assign(node_->data.size(), 0.0);
}

// ---- Tape ----

namespace {
thread_local std::vector<Tape*> g_tape_stack;
}

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() {
  return g_tape_stack.empty() ? nullptr : g_tape_stack.back();
}

void Tape::push(std::vector<detail::NodePtr> nodes, std::function<void()> fn) {
  entries_.push_back(Entry{std::move(nodes), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw std::invalid_argument("Tape::backward: loss must be a scalar tensor");
  for (Entry& e : entries_)
    for (detail::NodePtr& n : e.nodes) {
      n->ensure_grad();
      std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    shape_error("matmul", "expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
  if (k != k2)
    shape_error("matmul", "inner extents disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  bool rg = wants_grad({&a, &b});
  auto out = make_node({m, n}, false);
  out->requires_grad = a.requires_grad() || b.requires_grad();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out->data.data();
  for (int i = 0; i < m; ++i)
    for (int kk = 0; kk < k; ++kk) {
      const double av = pa[i * k + kk];
      const double* brow = pb + kk * n;
      double* orow = po + i * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  Tensor result(out);
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out;
    maybe_record({an, bn, on}, [an, bn, on, m, k, n] {
      const double* g = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        double* da = an->grad.data();
        const double* pb2 = bn->data.data();
        // dA += dOut * B^T
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            double acc = 0.0;
            const double* grow = g + i * n;
            const double* brow = pb2 + kk * n;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            da[i * k + kk] += acc;
          }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        double* db = bn->grad.data();
        const double* pa2 = an->data.data();
        // dB += A^T * dOut
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const double av = pa2[i * k + kk];
            const double* grow = g + i * n;
            double* drow = db + kk * n;
            for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
          }
      }
    });
  }
  return result;
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank())
    shape_error("softmax", "axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const Shape& s = x.shape();
  int outer = 1, inner = 1;
  const int len = s[axis];
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  bool rg = wants_grad({&x});
  auto out = make_node(s, false);
  out->requires_grad = x.requires_grad();
  const double* px = x.data().data();
  double* po = out->data.data();
  for (int o = 0; o < outer; ++o)
    for (int in = 0; in < inner; ++in) {
      const int base = o * len * inner + in;
      double mx = px[base];
      for (int l = 1; l < len; ++l) mx = std::max(mx, px[base + l * inner]);
      double sum = 0.0;
      for (int l = 0; l < len; ++l) {
        const double e = std::exp(px[base + l * inner] - mx);
        po[base + l * inner] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (int l = 0; l < len; ++l) po[base + l * inner] *= inv;
    }
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), on = out;
    maybe_record({xn, on}, [xn, on, outer, inner, len] {
      xn->ensure_grad();
      const double* g = on->grad.data();
      const double* sm = on->data.data();
      double* dx = xn->grad.data();
      for (int o = 0; o < outer; ++o)
        for (int in = 0; in < inner; ++in) {
          const int base = o * len * inner + in;
          double dot = 0.0;
          for (int l = 0; l < len; ++l) dot += g[base + l * inner] * sm[base + l * inner];
          for (int l = 0; l < len; ++l) {
            const int idx = base + l * inner;
            dx[idx] += sm[idx] * (g[idx] - dot);
          }
        }
    });
  }
  return result;
}

namespace {

// Copies a CxHxW plane set into a zero-padded buffer of Cx(H+2p)x(W+2p).
void pad_input(const double* x, int c, int h, int w, int p, std::vector<double>& out) {
  const int hp = h + 2 * p, wp = w + 2 * p;
  out.assign(static_cast<std::size_t>(c) * hp * wp, 0.0);
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < h; ++y) {
      const double* src = x + (static_cast<std::size_t>(ci) * h + y) * w;
      double* dst = out.data() + (static_cast<std::size_t>(ci) * hp + y + p) * wp + p;
      std::copy(src, src + w, dst);
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, Padding padding) {
  if (x.rank() != 3) shape_error("conv2d", "input must be CxHxW, got " + shape_str(x.shape()));
  if (w.rank() != 4) shape_error("conv2d", "kernel must be OxIxKxK, got " + shape_str(w.shape()));
  const int cin = x.extent(0), h = x.extent(1), wd = x.extent(2);
  const int cout = w.extent(0), kcin = w.extent(1), kh = w.extent(2), kw = w.extent(3);
  if (kcin != cin)
    shape_error("conv2d", "kernel expects " + std::to_string(kcin) + " input channels, input has " + std::to_string(cin));
  if (kh != kw || kh % 2 == 0) shape_error("conv2d", "kernel must be square with odd size, got " + shape_str(w.shape()));
  if (b.rank() != 1 || b.extent(0) != cout)
    shape_error("conv2d", "bias shape " + shape_str(b.shape()) + " does not match " + std::to_string(cout) + " output channels");
  if (stride < 1) shape_error("conv2d", "stride must be >= 1");
  const int p = padding == Padding::kSame ? (kh - 1) / 2 : 0;
  const int ho = (h + 2 * p - kh) / stride + 1;
  const int wo = (wd + 2 * p - kw) / stride + 1;
  if (ho < 1 || wo < 1)
    shape_error("conv2d", "kernel " + shape_str(w.shape()) + " too large for input " + shape_str(x.shape()));
  const int hp = h + 2 * p, wp = wd + 2 * p;

  bool rg = wants_grad({&x, &w, &b});
  auto out = make_node({cout, ho, wo}, false);
  out->requires_grad = x.requires_grad() || w.requires_grad() || b.requires_grad();

  std::vector<double> xpad;
  pad_input(x.data().data(), cin, h, wd, p, xpad);
  const double* pw = w.data().data();
  const double* pbias = b.data().data();
  double* po = out->data.data();
  for (int co = 0; co < cout; ++co) {
    double* oplane = po + static_cast<std::size_t>(co) * ho * wo;
    std::fill(oplane, oplane + static_cast<std::size_t>(ho) * wo, pbias[co]);
    for (int ci = 0; ci < cin; ++ci) {
      const double* xplane = xpad.data() + static_cast<std::size_t>(ci) * hp * wp;
      const double* wbase = pw + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          const double wv = wbase[ky * kw + kx];
          if (stride == 1) {
            for (int y = 0; y < ho; ++y) {
              const double* xr = xplane + (y + ky) * wp + kx;
              double* orow = oplane + y * wo;
              for (int xo = 0; xo < wo; ++xo) orow[xo] += wv * xr[xo];
            }
          } else {
            for (int y = 0; y < ho; ++y) {
              const double* xr = xplane + (y * stride + ky) * wp + kx;
              double* orow = oplane + y * wo;
              for (int xo = 0; xo < wo; ++xo) orow[xo] += wv * xr[xo * stride];
            }
          }
        }
    }
  }
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), wn = w.node(), bn = b.node(), on = out;
    maybe_record({xn, wn, bn, on}, [xn, wn, bn, on, cin, h, wd, cout, kh, kw, p, stride, ho, wo, hp, wp] {
      const double* g = on->grad.data();
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int co = 0; co < cout; ++co) {
          const double* gp = g + static_cast<std::size_t>(co) * ho * wo;
          double acc = 0.0;
          for (int i = 0; i < ho * wo; ++i) acc += gp[i];
          bn->grad[co] += acc;
        }
      }
      std::vector<double> xpad2;
      if (wn->requires_grad) {
        pad_input(xn->data.data(), cin, h, wd, p, xpad2);
        wn->ensure_grad();
        double* dw = wn->grad.data();
        for (int co = 0; co < cout; ++co) {
          const double* gplane = g + static_cast<std::size_t>(co) * ho * wo;
          for (int ci = 0; ci < cin; ++ci) {
            const double* xplane = xpad2.data() + static_cast<std::size_t>(ci) * hp * wp;
            double* dwbase = dw + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                double a4 = 0.0, a5 = 0.0, a6 = 0.0, a7 = 0.0;
                for (int y = 0; y < ho; ++y) {
                  const double* __restrict xr = xplane + (y * stride + ky) * wp + kx;
                  const double* __restrict gr = gplane + y * wo;
                  int xo = 0;
                  if (stride == 1) {
                    for (; xo + 8 <= wo; xo += 8) {
                      a0 += xr[xo] * gr[xo];
                      a1 += xr[xo + 1] * gr[xo + 1];
                      a2 += xr[xo + 2] * gr[xo + 2];
                      a3 += xr[xo + 3] * gr[xo + 3];
                      a4 += xr[xo + 4] * gr[xo + 4];
                      a5 += xr[xo + 5] * gr[xo + 5];
                      a6 += xr[xo + 6] * gr[xo + 6];
                      a7 += xr[xo + 7] * gr[xo + 7];
                    }
                  }
                  for (; xo < wo; ++xo) a0 += xr[xo * stride] * gr[xo];
                }
                dwbase[ky * kw + kx] += ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7));
              }
          }
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        std::vector<double> dxpad(static_cast<std::size_t>(cin) * hp * wp, 0.0);
        const double* pw2 = wn->data.data();
        for (int co = 0; co < cout; ++co) {
          const double* gplane = g + static_cast<std::size_t>(co) * ho * wo;
          for (int ci = 0; ci < cin; ++ci) {
            double* dxplane = dxpad.data() + static_cast<std::size_t>(ci) * hp * wp;
            const double* wbase = pw2 + ((static_cast<std::size_t>(co) * cin + ci) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const double wv = wbase[ky * kw + kx];
                for (int y = 0; y < ho; ++y) {
                  double* __restrict dxr = dxplane + (y * stride + ky) * wp + kx;
                  const double* __restrict gr = gplane + y * wo;
                  if (stride == 1) {
                    for (int xo = 0; xo < wo; ++xo) dxr[xo] += wv * gr[xo];
                  } else {
                    for (int xo = 0; xo < wo; ++xo) dxr[xo * stride] += wv * gr[xo];
                  }
                }
              }
          }
        }
        double* dx = xn->grad.data();
        for (int ci = 0; ci < cin; ++ci)
          for (int y = 0; y < h; ++y) {
            const double* src = dxpad.data() + (static_cast<std::size_t>(ci) * hp + y + p) * wp + p;
            double* dst = dx + (static_cast<std::size_t>(ci) * h + y) * wd;
            for (int xx = 0; xx < wd; ++xx) dst[xx] += src[xx];
          }
      }
    });
  }
  return result;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise_unary(const char* /*name*/, const Tensor& x, Fwd fwd, Bwd make_bwd) {
  bool rg = wants_grad({&x});
  auto out = make_node(x.shape(), false);
  out->requires_grad = x.requires_grad();
  const double* px = x.data().data();
  double* po = out->data.data();
  const int n = x.size();
  for (int i = 0; i < n; ++i) po[i] = fwd(px[i]);
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), on = out;
    maybe_record({xn, on}, make_bwd(xn, on, n));
  }
  return result;
}

}  // namespace

Tensor relu(const Tensor& x) {
  return elementwise_unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](detail::NodePtr xn, detail::NodePtr on, int n) {
        return [xn, on, n] {
          xn->ensure_grad();
          for (int i = 0; i < n; ++i)
            if (xn->data[i] > 0.0) xn->grad[i] += on->grad[i];
        };
      });
}

Tensor sigmoid(const Tensor& x) {
  return elementwise_unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](detail::NodePtr xn, detail::NodePtr on, int n) {
        return [xn, on, n] {
          xn->ensure_grad();
          for (int i = 0; i < n; ++i) {
            const double s = on->data[i];
            xn->grad[i] += on->grad[i] * s * (1.0 - s);
          }
        };
      });
}

Tensor softplus(const Tensor& x) {
  return elementwise_unary(
      "softplus", x,
      [](double v) {
        // log(1 + e^v) without overflow
        return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
      },
      [](detail::NodePtr xn, detail::NodePtr on, int n) {
        return [xn, on, n] {
          xn->ensure_grad();
          for (int i = 0; i < n; ++i) {
            const double v = xn->data[i];
            const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
            xn->grad[i] += on->grad[i] * s;
          }
        };
      });
}

Tensor upsample_bilinear(const Tensor& x, int target_h, int target_w) {
  if (x.rank() != 3) shape_error("upsample_bilinear", "input must be CxHxW, got " + shape_str(x.shape()));
  if (target_h < 1 || target_w < 1) shape_error("upsample_bilinear", "target extents must be >= 1");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  bool rg = wants_grad({&x});
  auto out = make_node({c, target_h, target_w}, false);
  out->requires_grad = x.requires_grad();

  // corner-aligned sampling grid
  const double sy = target_h > 1 ? static_cast<double>(h - 1) / (target_h - 1) : 0.0;
  const double sx = target_w > 1 ? static_cast<double>(w - 1) / (target_w - 1) : 0.0;
  std::vector<int> y0(target_h), y1(target_h), x0(target_w), x1(target_w);
  std::vector<double> wy(target_h), wx(target_w);
  for (int y = 0; y < target_h; ++y) {
    const double src = y * sy;
    y0[y] = std::min(static_cast<int>(src), h - 1);
    y1[y] = std::min(y0[y] + 1, h - 1);
    wy[y] = src - y0[y];
  }
  for (int xx = 0; xx < target_w; ++xx) {
    const double src = xx * sx;
    x0[xx] = std::min(static_cast<int>(src), w - 1);
    x1[xx] = std::min(x0[xx] + 1, w - 1);
    wx[xx] = src - x0[xx];
  }
  const double* px = x.data().data();
  double* po = out->data.data();
  for (int ci = 0; ci < c; ++ci) {
    const double* plane = px + static_cast<std::size_t>(ci) * h * w;
    double* oplane = po + static_cast<std::size_t>(ci) * target_h * target_w;
    for (int y = 0; y < target_h; ++y)
      for (int xx = 0; xx < target_w; ++xx) {
        const double v00 = plane[y0[y] * w + x0[xx]];
        const double v01 = plane[y0[y] * w + x1[xx]];
        const double v10 = plane[y1[y] * w + x0[xx]];
        const double v11 = plane[y1[y] * w + x1[xx]];
        const double top = v00 + wx[xx] * (v01 - v00);
        const double bot = v10 + wx[xx] * (v11 - v10);
        oplane[y * target_w + xx] = top + wy[y] * (bot - top);
      }
  }
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), on = out;
    maybe_record({xn, on}, [xn, on, c, h, w, target_h, target_w, y0, y1, x0, x1, wy, wx] {
      xn->ensure_grad();
      const double* g = on->grad.data();
      double* dx = xn->grad.data();
      for (int ci = 0; ci < c; ++ci) {
        double* dplane = dx + static_cast<std::size_t>(ci) * h * w;
        const double* gplane = g + static_cast<std::size_t>(ci) * target_h * target_w;
        for (int y = 0; y < target_h; ++y)
          for (int xx = 0; xx < target_w; ++xx) {
            const double gv = gplane[y * target_w + xx];
            const double wyv = wy[y], wxv = wx[xx];
            dplane[y0[y] * w + x0[xx]] += gv * (1.0 - wyv) * (1.0 - wxv);
            dplane[y0[y] * w + x1[xx]] += gv * (1.0 - wyv) * wxv;
            dplane[y1[y] * w + x0[xx]] += gv * wyv * (1.0 - wxv);
            dplane[y1[y] * w + x1[xx]] += gv * wyv * wxv;
          }
      }
    });
  }
  return result;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) shape_error("global_avg_pool", "input must be CxHxW, got " + shape_str(x.shape()));
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  bool rg = wants_grad({&x});
  auto out = make_node({c}, false);
  out->requires_grad = x.requires_grad();
  const double inv = 1.0 / (static_cast<double>(h) * w);
  const double* px = x.data().data();
  for (int ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    const double* plane = px + static_cast<std::size_t>(ci) * h * w;
    for (int i = 0; i < h * w; ++i) acc += plane[i];
    out->data[ci] = acc * inv;
  }
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), on = out;
    maybe_record({xn, on}, [xn, on, c, h, w, inv] {
      xn->ensure_grad();
      for (int ci = 0; ci < c; ++ci) {
        const double gv = on->grad[ci] * inv;
        double* dplane = xn->grad.data() + static_cast<std::size_t>(ci) * h * w;
        for (int i = 0; i < h * w; ++i) dplane[i] += gv;
      }
    });
  }
  return result;
}

Tensor fully_connected(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 1) shape_error("fully_connected", "input must be rank-1, got " + shape_str(x.shape()));
  if (w.rank() != 2) shape_error("fully_connected", "weights must be rank-2, got " + shape_str(w.shape()));
  const int din = x.extent(0), dout = w.extent(0);
  if (w.extent(1) != din)
    shape_error("fully_connected", "weights " + shape_str(w.shape()) + " do not match input " + shape_str(x.shape()));
  if (b.rank() != 1 || b.extent(0) != dout)
    shape_error("fully_connected", "bias " + shape_str(b.shape()) + " does not match " + std::to_string(dout) + " outputs");
  bool rg = wants_grad({&x, &w, &b});
  auto out = make_node({dout}, false);
  out->requires_grad = x.requires_grad() || w.requires_grad() || b.requires_grad();
  const double* px = x.data().data();
  const double* pw = w.data().data();
  for (int o = 0; o < dout; ++o) {
    double acc = b.data()[o];
    const double* row = pw + static_cast<std::size_t>(o) * din;
    for (int i = 0; i < din; ++i) acc += row[i] * px[i];
    out->data[o] = acc;
  }
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), wn = w.node(), bn = b.node(), on = out;
    maybe_record({xn, wn, bn, on}, [xn, wn, bn, on, din, dout] {
      const double* g = on->grad.data();
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int o = 0; o < dout; ++o) bn->grad[o] += g[o];
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        for (int o = 0; o < dout; ++o) {
          double* row = wn->grad.data() + static_cast<std::size_t>(o) * din;
          for (int i = 0; i < din; ++i) row[i] += g[o] * xn->data[i];
        }
      }
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int o = 0; o < dout; ++o) {
          const double* row = wn->data.data() + static_cast<std::size_t>(o) * din;
          for (int i = 0; i < din; ++i) xn->grad[i] += g[o] * row[i];
        }
      }
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& xs) {
  if (xs.empty()) shape_error("concat", "needs at least one input");
  const Shape& first = xs[0].shape();
  int total0 = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != static_cast<int>(first.size()))
      shape_error("concat", "rank mismatch: " + shape_str(first) + " vs " + shape_str(t.shape()));
    for (int ax = 1; ax < t.rank(); ++ax)
      if (t.extent(ax) != first[ax])
        shape_error("concat", "trailing extents disagree: " + shape_str(first) + " vs " + shape_str(t.shape()));
    total0 += t.extent(0);
  }
  Shape oshape = first;
  oshape[0] = total0;
  bool rg = false;
  for (const Tensor& t : xs) rg = rg || t.requires_grad();
  auto out = make_node(oshape, false);
  out->requires_grad = rg;
  rg = rg && Tape::active() != nullptr;
  int offset = 0;
  for (const Tensor& t : xs) {
    std::copy(t.data().begin(), t.data().end(), out->data.begin() + offset);
    offset += t.size();
  }
  Tensor result(out);
  if (rg) {
    std::vector<detail::NodePtr> nodes;
    for (const Tensor& t : xs) nodes.push_back(t.node());
    auto inputs = nodes;
    nodes.push_back(out);
    auto on = out;
    maybe_record(nodes, [inputs, on] {
      int off = 0;
      for (const auto& xn : inputs) {
        const int n = xn->size();
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (int i = 0; i < n; ++i) xn->grad[i] += on->grad[off + i];
        }
        off += n;
      }
    });
  }
  return result;
}

namespace {

template <typename Op>
Tensor elementwise_binary(const char* name, const Tensor& a, const Tensor& b, Op op,
                          double da_coeff, double db_coeff, bool grad_needs_values) {
  if (a.shape() != b.shape())
    shape_error(name, "shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool rg = wants_grad({&a, &b});
  auto out = make_node(a.shape(), false);
  out->requires_grad = a.requires_grad() || b.requires_grad();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  const int n = a.size();
  for (int i = 0; i < n; ++i) out->data[i] = op(pa[i], pb[i]);
  Tensor result(out);
  if (rg) {
    auto an = a.node(), bn = b.node(), on = out;
    if (!grad_needs_values) {
      maybe_record({an, bn, on}, [an, bn, on, n, da_coeff, db_coeff] {
        if (an->requires_grad) {
          an->ensure_grad();
          for (int i = 0; i < n; ++i) an->grad[i] += da_coeff * on->grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int i = 0; i < n; ++i) bn->grad[i] += db_coeff * on->grad[i];
        }
      });
    } else {
      maybe_record({an, bn, on}, [an, bn, on, n] {
        if (an->requires_grad) {
          an->ensure_grad();
          for (int i = 0; i < n; ++i) an->grad[i] += bn->data[i] * on->grad[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int i = 0; i < n; ++i) bn->grad[i] += an->data[i] * on->grad[i];
        }
      });
    }
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary("add", a, b, [](double x, double y) { return x + y; }, 1.0, 1.0, false);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary("sub", a, b, [](double x, double y) { return x - y; }, 1.0, -1.0, false);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary("mul", a, b, [](double x, double y) { return x * y; }, 0.0, 0.0, true);
}

Tensor add_scalar(const Tensor& x, double c) {
  return elementwise_unary(
      "add_scalar", x, [c](double v) { return v + c; },
      [](detail::NodePtr xn, detail::NodePtr on, int n) {
        return [xn, on, n] {
          xn->ensure_grad();
          for (int i = 0; i < n; ++i) xn->grad[i] += on->grad[i];
        };
      });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return elementwise_unary(
      "mul_scalar", x, [c](double v) { return v * c; },
      [c](detail::NodePtr xn, detail::NodePtr on, int n) {
        return [xn, on, n, c] {
          xn->ensure_grad();
          for (int i = 0; i < n; ++i) xn->grad[i] += c * on->grad[i];
        };
      });
}

Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) shape_error("transpose2d", "input must be rank-2, got " + shape_str(x.shape()));
  const int m = x.extent(0), n = x.extent(1);
  bool rg = wants_grad({&x});
  auto out = make_node({n, m}, false);
  out->requires_grad = x.requires_grad();
  const double* px = x.data().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->data[j * m + i] = px[i * n + j];
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), on = out;
    maybe_record({xn, on}, [xn, on, m, n] {
      xn->ensure_grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) xn->grad[i * n + j] += on->grad[j * m + i];
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_product(shape) != x.size())
    shape_error("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  bool rg = wants_grad({&x});
  auto out = make_node(shape, false);
  out->requires_grad = x.requires_grad();
  out->data = x.data();
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), on = out;
    const int n = x.size();
    maybe_record({xn, on}, [xn, on, n] {
      xn->ensure_grad();
      for (int i = 0; i < n; ++i) xn->grad[i] += on->grad[i];
    });
  }
  return result;
}

Tensor maxpool2d(const Tensor& x, int window) {
  if (x.rank() != 3) shape_error("maxpool2d", "input must be CxHxW, got " + shape_str(x.shape()));
  if (window != 2) shape_error("maxpool2d", "only 2x2 pooling is supported");
  const int c = x.extent(0), h = x.extent(1), w = x.extent(2);
  // Extent-1 axes pass through; otherwise extents must be even.
  const int ho = h == 1 ? 1 : h / 2;
  const int wo = w == 1 ? 1 : w / 2;
  if ((h > 1 && h % 2) || (w > 1 && w % 2))
    shape_error("maxpool2d", "spatial extents must be even or 1, got " + shape_str(x.shape()));
  bool rg = wants_grad({&x});
  auto out = make_node({c, ho, wo}, false);
  out->requires_grad = x.requires_grad();
  const int yspan = h == 1 ? 1 : 2, xspan = w == 1 ? 1 : 2;
  std::vector<int> argmax(static_cast<std::size_t>(c) * ho * wo);
  const double* px = x.data().data();
  for (int ci = 0; ci < c; ++ci)
    for (int y = 0; y < ho; ++y)
      for (int xx = 0; xx < wo; ++xx) {
        int best = -1;
        double bv = 0.0;
        for (int dy = 0; dy < yspan; ++dy)
          for (int dx = 0; dx < xspan; ++dx) {
            const int idx = (ci * h + y * yspan + dy) * w + xx * xspan + dx;
            if (best < 0 || px[idx] > bv) {
              best = idx;
              bv = px[idx];
            }
          }
        const int oidx = (ci * ho + y) * wo + xx;
        out->data[oidx] = bv;
        argmax[oidx] = best;
      }
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), on = out;
    maybe_record({xn, on}, [xn, on, argmax] {
      xn->ensure_grad();
      for (std::size_t i = 0; i < argmax.size(); ++i) xn->grad[argmax[i]] += on->grad[i];
    });
  }
  return result;
}

Tensor reduce_sum(const Tensor& x) {
  bool rg = wants_grad({&x});
  auto out = make_node({1}, false);
  out->requires_grad = x.requires_grad();
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out->data[0] = acc;
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), on = out;
    const int n = x.size();
    maybe_record({xn, on}, [xn, on, n] {
      xn->ensure_grad();
      const double g = on->grad[0];
      for (int i = 0; i < n; ++i) xn->grad[i] += g;
    });
  }
  return result;
}

Tensor scale_channels(const Tensor& x, const Tensor& g) {
  if (x.rank() != 3) shape_error("scale_channels", "input must be CxHxW, got " + shape_str(x.shape()));
  if (g.rank() != 1 || g.extent(0) != x.extent(0))
    shape_error("scale_channels", "gate " + shape_str(g.shape()) + " does not match " + shape_str(x.shape()));
  const int c = x.extent(0), hw = x.extent(1) * x.extent(2);
  bool rg = wants_grad({&x, &g});
  auto out = make_node(x.shape(), false);
  out->requires_grad = x.requires_grad() || g.requires_grad();
  const double* px = x.data().data();
  const double* pg = g.data().data();
  for (int ci = 0; ci < c; ++ci) {
    const double gv = pg[ci];
    const double* plane = px + static_cast<std::size_t>(ci) * hw;
    double* oplane = out->data.data() + static_cast<std::size_t>(ci) * hw;
    for (int i = 0; i < hw; ++i) oplane[i] = plane[i] * gv;
  }
  Tensor result(out);
  if (rg) {
    auto xn = x.node(), gn = g.node(), on = out;
    maybe_record({xn, gn, on}, [xn, gn, on, c, hw] {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
          const double gv = gn->data[ci];
          const double* go = on->grad.data() + static_cast<std::size_t>(ci) * hw;
          double* dxp = xn->grad.data() + static_cast<std::size_t>(ci) * hw;
          for (int i = 0; i < hw; ++i) dxp[i] += go[i] * gv;
        }
      }
      if (gn->requires_grad) {
        gn->ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
          const double* go = on->grad.data() + static_cast<std::size_t>(ci) * hw;
          const double* xp = xn->data.data() + static_cast<std::size_t>(ci) * hw;
          double acc = 0.0;
          for (int i = 0; i < hw; ++i) acc += go[i] * xp[i];
          gn->grad[ci] += acc;
        }
      }
    });
  }
  return result;
}

}  // namespace msod
