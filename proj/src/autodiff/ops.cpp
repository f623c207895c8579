#include "mltr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mltr/kernels.hpp"

namespace mltr::ad {
namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradTape<T>::active()) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> make(Shape shape, std::vector<T> values) {
  return Tensor<T>::from(std::move(shape), std::move(values));
}

// Marks `out` as differentiable and records its backward closure.
template <typename T, typename F>
void record(const Tensor<T>& out, std::vector<Tensor<T>> inputs, F&& fn) {
  out.node()->requires_grad = true;
  out.node()->leaf = false;
  std::vector<NodePtr<T>> nodes;
  nodes.reserve(inputs.size());
  for (auto& t : inputs) {
    if (t.defined()) nodes.push_back(t.node());
  }
  GradTape<T>::active()->record(out.node(), std::move(nodes), std::forward<F>(fn));
}

void require_matrix(const Shape& s, const char* op) {
  if (s.size() != 2) throw ShapeError(std::string(op) + " expects a matrix, got " + to_string(s));
}

// Returns true when `b` broadcasts onto `a` under the documented rule.
bool broadcastable(const Shape& a, const Shape& b) {
  if (a == b) return true;
  if (numel(b) == 1) return true;
  std::size_t lead = 0;
  while (lead < b.size() && b[lead] == 1) ++lead;
  std::size_t rest = b.size() - lead;
  if (rest > a.size()) return false;
  return std::equal(b.begin() + static_cast<std::ptrdiff_t>(lead), b.end(),
                    a.end() - static_cast<std::ptrdiff_t>(rest));
}

void check_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (!broadcastable(a, b)) {
    throw ShapeError(std::string(op) + ": shape " + to_string(b) + " does not broadcast to " +
                     to_string(a));
  }
}

enum class Binary { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, Binary kind, const char* name) {
  check_broadcast(a.shape(), b.shape(), name);
  const std::size_t n = a.numel();
  const std::size_t m = b.numel();
  std::vector<T> out(n);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  for (std::size_t i = 0; i < n; i += m) {
    for (std::size_t j = 0; j < m; ++j) {
      switch (kind) {
        case Binary::kAdd: out[i + j] = pa[i + j] + pb[j]; break;
        case Binary::kSub: out[i + j] = pa[i + j] - pb[j]; break;
        case Binary::kMul: out[i + j] = pa[i + j] * pb[j]; break;
      }
    }
  }
  Tensor<T> r = make(a.shape(), std::move(out));
  if (tracking({&a, &b})) {
    Node<T>* na = a.node().get();
    Node<T>* nb = b.node().get();
    Node<T>* no = r.node().get();
    record(r, {a, b}, [na, nb, no, n, m, kind] {
      const T* go = no->grad.data();
      if (na->requires_grad) {
        T* ga = na->g();
        if (kind == Binary::kMul) {
          const T* pb = nb->d();
          for (std::size_t i = 0; i < n; i += m)
            for (std::size_t j = 0; j < m; ++j) ga[i + j] += go[i + j] * pb[j];
        } else {
          for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
        }
      }
      if (nb->requires_grad) {
        T* gb = nb->g();
        const T* pa = na->d();
        for (std::size_t i = 0; i < n; i += m) {
          for (std::size_t j = 0; j < m; ++j) {
            switch (kind) {
              case Binary::kAdd: gb[j] += go[i + j]; break;
              case Binary::kSub: gb[j] -= go[i + j]; break;
              case Binary::kMul: gb[j] += go[i + j] * pa[i + j]; break;
            }
          }
        }
      }
    });
  }
  return r;
}

template <typename T>
T erf_t(T x) {
  return std::erf(x);
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "matmul");
  require_matrix(b.shape(), "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner dimensions differ, " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  kernels::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  Tensor<T> r = make({m, n}, std::move(out));
  if (tracking({&a, &b})) {
    Node<T>* na = a.node().get();
    Node<T>* nb = b.node().get();
    Node<T>* no = r.node().get();
    record(r, {a, b}, [na, nb, no, m, n, k] {
      const T* go = no->grad.data();
      if (na->requires_grad) kernels::gemm_nt(m, k, n, go, nb->d(), na->g());
      if (nb->requires_grad) kernels::gemm_tn(k, n, m, na->d(), go, nb->g());
    });
  }
  return r;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "matmul_nt");
  require_matrix(b.shape(), "matmul_nt");
  if (a.dim(1) != b.dim(1)) {
    throw ShapeError("matmul_nt: inner dimensions differ, " + to_string(a.shape()) + " x " +
                     to_string(b.shape()) + "^T");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  std::vector<T> out(m * n, T(0));
  kernels::gemm_nt(m, n, k, a.data().data(), b.data().data(), out.data());
  Tensor<T> r = make({m, n}, std::move(out));
  if (tracking({&a, &b})) {
    Node<T>* na = a.node().get();
    Node<T>* nb = b.node().get();
    Node<T>* no = r.node().get();
    record(r, {a, b}, [na, nb, no, m, n, k] {
      const T* go = no->grad.data();
      // C = A B^T: dA = dC B, dB = dC^T A
      if (na->requires_grad) kernels::gemm_nn(m, k, n, go, nb->d(), na->g());
      if (nb->requires_grad) kernels::gemm_tn(n, k, m, go, na->d(), nb->g());
    });
  }
  return r;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a.shape(), "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  const T* pa = a.data().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = pa[i * n + j];
  Tensor<T> r = make({n, m}, std::move(out));
  if (tracking({&a})) {
    Node<T>* na = a.node().get();
    Node<T>* no = r.node().get();
    record(r, {a}, [na, no, m, n] {
      T* ga = na->g();
      const T* go = no->grad.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    });
  }
  return r;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kAdd, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kSub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, Binary::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  Tensor<T> r = make(a.shape(), std::move(out));
  if (tracking({&a})) {
    Node<T>* na = a.node().get();
    Node<T>* no = r.node().get();
    record(r, {a}, [na, no, s] {
      T* ga = na->g();
      for (std::size_t i = 0; i < no->size(); ++i) ga[i] += s * no->grad[i];
    });
  }
  return r;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += s;
  Tensor<T> r = make(a.shape(), std::move(out));
  if (tracking({&a})) {
    Node<T>* na = a.node().get();
    Node<T>* no = r.node().get();
    record(r, {a}, [na, no] {
      T* ga = na->g();
      for (std::size_t i = 0; i < no->size(); ++i) ga[i] += no->grad[i];
    });
  }
  return r;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> r = Tensor<T>::scalar(acc);
  if (tracking({&a})) {
    Node<T>* na = a.node().get();
    Node<T>* no = r.node().get();
    record(r, {a}, [na, no] {
      T* ga = na->g();
      const T g = no->grad[0];
      for (std::size_t i = 0; i < na->size(); ++i) ga[i] += g;
    });
  }
  return r;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mse: shapes differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t n = a.numel();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a[i] - b[i];
    acc += d * d;
  }
  Tensor<T> r = Tensor<T>::scalar(acc / static_cast<T>(n));
  if (tracking({&a, &b})) {
    Node<T>* na = a.node().get();
    Node<T>* nb = b.node().get();
    Node<T>* no = r.node().get();
    record(r, {a, b}, [na, nb, no, n] {
      const T g = no->grad[0] * T(2) / static_cast<T>(n);
      const T* pa = na->d();
      const T* pb = nb->d();
      if (na->requires_grad) {
        T* ga = na->g();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g * (pa[i] - pb[i]);
      }
      if (nb->requires_grad) {
        T* gb = nb->g();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (pa[i] - pb[i]);
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const auto rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw IndexError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     to_string(x.shape()));
  }
  const auto ax = static_cast<std::size_t>(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(ax);
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, px[base + j * inner]);
      T z = 0;
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(px[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
    }
  }
  Tensor<T> r = make(x.shape(), std::move(out));
  if (tracking({&x})) {
    Node<T>* nx = x.node().get();
    Node<T>* no = r.node().get();
    record(r, {x}, [nx, no, outer, inner, len] {
      T* gx = nx->g();
      const T* y = no->d();
      const T* gy = no->grad.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * len * inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < len; ++j) dot += gy[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t k = base + j * inner;
            gx[k] += y[k] * (gy[k] - dot);
          }
        }
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, T eps) {
  if (x.rank() == 0 || x.shape().back() == 0) {
    throw ShapeError("layer_norm: empty last axis in " + to_string(x.shape()));
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> inv_std(rows);
  const T* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (row[j] - mu) * is;
  }
  Tensor<T> res = make(x.shape(), std::move(out));
  if (tracking({&x})) {
    Node<T>* nx = x.node().get();
    Node<T>* no = res.node().get();
    record(res, {x}, [nx, no, rows, d, inv_std = std::move(inv_std)] {
      T* gx = nx->g();
      const T* y = no->d();
      const T* gy = no->grad.data();
      const T invd = T(1) / static_cast<T>(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* yr = y + r * d;
        const T* gr = gy + r * d;
        T mg = 0, mgy = 0;
        for (std::size_t j = 0; j < d; ++j) {
          mg += gr[j];
          mgy += gr[j] * yr[j];
        }
        mg *= invd;
        mgy *= invd;
        for (std::size_t j = 0; j < d; ++j) {
          gx[r * d + j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
        }
      }
    });
  }
  return res;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  std::vector<T> out(x.numel());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = T(0.5) * px[i] * (T(1) + erf_t(px[i] * inv_sqrt2));
  }
  Tensor<T> r = make(x.shape(), std::move(out));
  if (tracking({&x})) {
    Node<T>* nx = x.node().get();
    Node<T>* no = r.node().get();
    record(r, {x}, [nx, no, inv_sqrt2] {
      T* gx = nx->g();
      const T* px = nx->d();
      const T inv_sqrt_2pi = T(0.5) * std::numbers::inv_sqrtpi_v<T> * std::numbers::sqrt2_v<T>;
      for (std::size_t i = 0; i < nx->size(); ++i) {
        const T v = px[i];
        const T cdf = T(0.5) * (T(1) + erf_t(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += no->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  if (x.rank() != 3) throw ShapeError("conv2d: input must be [C x H x W], got " + to_string(x.shape()));
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) {
    throw ShapeError("conv2d: weight must be [Cout x Cin x k x k], got " + to_string(w.shape()));
  }
  if (w.dim(1) != x.dim(0)) {
    throw ShapeError("conv2d: input channels " + std::to_string(x.dim(0)) + " vs weight " +
                     to_string(w.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (k > h + 2 * padding || k > wd + 2 * padding) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                     to_string(x.shape()) + " (padding " + std::to_string(padding) + ")");
  }
  if (bias.defined() && bias.numel() != cout) {
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " for " + std::to_string(cout) +
                     " output channels");
  }
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (wd + 2 * padding - k) / stride + 1;
  const kernels::ConvGeometry geo{cin, h, wd, k, stride, padding, ho, wo};
  std::vector<T> cols(cin * k * k * ho * wo);
  kernels::im2col(geo, x.data().data(), cols.data());
  std::vector<T> out(cout * ho * wo, T(0));
  kernels::gemm_nn(cout, ho * wo, cin * k * k, w.data().data(), cols.data(), out.data());
  if (bias.defined()) {
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t p = 0; p < ho * wo; ++p) out[c * ho * wo + p] += bias[c];
  }
  Tensor<T> r = make({cout, ho, wo}, std::move(out));
  if (tracking({&x, &w, &bias})) {
    Node<T>* nx = x.node().get();
    Node<T>* nw = w.node().get();
    Node<T>* nb = bias.defined() ? bias.node().get() : nullptr;
    Node<T>* no = r.node().get();
    record(r, {x, w, bias}, [nx, nw, nb, no, geo, cout, cols = std::move(cols)] {
      const std::size_t spatial = geo.out_h * geo.out_w;
      const std::size_t patch = geo.channels * geo.kernel * geo.kernel;
      const T* go = no->grad.data();
      if (nw->requires_grad) kernels::gemm_nt(cout, patch, spatial, go, cols.data(), nw->g());
      if (nb && nb->requires_grad) {
        T* gb = nb->g();
        for (std::size_t c = 0; c < cout; ++c)
          for (std::size_t p = 0; p < spatial; ++p) gb[c] += go[c * spatial + p];
      }
      if (nx->requires_grad) {
        std::vector<T> dcols(patch * spatial, T(0));
        kernels::gemm_tn(patch, spatial, cout, nw->d(), go, dcols.data());
        kernels::col2im(geo, dcols.data(), nx->g());
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 3 || x.dim(1) == 0 || x.dim(2) == 0) {
    throw ShapeError("adaptive_avg_pool: expects non-empty [C x H x W], got " + to_string(x.shape()));
  }
  const std::size_t c = x.dim(0), area = x.dim(1) * x.dim(2);
  std::vector<T> out(c);
  const T* px = x.data().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t i = 0; i < area; ++i) acc += px[ch * area + i];
    out[ch] = acc / static_cast<T>(area);
  }
  Tensor<T> r = make({c, 1, 1}, std::move(out));
  if (tracking({&x})) {
    Node<T>* nx = x.node().get();
    Node<T>* no = r.node().get();
    record(r, {x}, [nx, no, c, area] {
      T* gx = nx->g();
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T g = no->grad[ch] / static_cast<T>(area);
        for (std::size_t i = 0; i < area; ++i) gx[ch * area + i] += g;
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  }
  Tensor<T> r = make(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (tracking({&x})) {
    Node<T>* nx = x.node().get();
    Node<T>* no = r.node().get();
    record(r, {x}, [nx, no] {
      T* gx = nx->g();
      for (std::size_t i = 0; i < no->size(); ++i) gx[i] += no->grad[i];
    });
  }
  return r;
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, std::span<const std::size_t> idx) {
  require_matrix(x.shape(), "index_select");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  for (std::size_t i : idx) {
    if (i >= rows) {
      throw IndexError("index_select: index " + std::to_string(i) + " out of range for " +
                       std::to_string(rows) + " rows");
    }
  }
  std::vector<T> out(idx.size() * d);
  const T* px = x.data().data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(px + idx[i] * d, d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Tensor<T> r = make({idx.size(), d}, std::move(out));
  if (tracking({&x})) {
    Node<T>* nx = x.node().get();
    Node<T>* no = r.node().get();
    record(r, {x}, [nx, no, d, idx = std::vector<std::size_t>(idx.begin(), idx.end())] {
      T* gx = nx->g();
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gx[idx[i] * d + j] += no->grad[i * d + j];
    });
  }
  return r;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, std::vector<std::size_t> idx, Shape shape) {
  if (numel(shape) != idx.size()) {
    throw ShapeError("gather: " + std::to_string(idx.size()) + " indices for shape " + to_string(shape));
  }
  const std::size_t n = x.numel();
  std::vector<T> out(idx.size());
  const T* px = x.data().data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) {
      throw IndexError("gather: index " + std::to_string(idx[i]) + " out of range for " +
                       std::to_string(n) + " elements");
    }
    out[i] = px[idx[i]];
  }
  Tensor<T> r = make(std::move(shape), std::move(out));
  if (tracking({&x})) {
    Node<T>* nx = x.node().get();
    Node<T>* no = r.node().get();
    record(r, {x}, [nx, no, idx = std::move(idx)] {
      T* gx = nx->g();
      for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += no->grad[i];
    });
  }
  return r;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_matrix(x.shape(), "slice_rows");
  if (begin > end || end > x.dim(0)) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for " + to_string(x.shape()));
  }
  const std::size_t d = x.dim(1);
  auto first = x.data().begin() + static_cast<std::ptrdiff_t>(begin * d);
  Tensor<T> r = make({end - begin, d}, std::vector<T>(first, first + static_cast<std::ptrdiff_t>((end - begin) * d)));
  if (tracking({&x})) {
    Node<T>* nx = x.node().get();
    Node<T>* no = r.node().get();
    record(r, {x}, [nx, no, begin, d] {
      T* gx = nx->g() + begin * d;
      for (std::size_t i = 0; i < no->size(); ++i) gx[i] += no->grad[i];
    });
  }
  return r;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  require_matrix(x.shape(), "slice_cols");
  if (begin > end || end > x.dim(1)) {
    throw IndexError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for " + to_string(x.shape()));
  }
  const std::size_t rows = x.dim(0), d = x.dim(1), w = end - begin;
  std::vector<T> out(rows * w);
  const T* px = x.data().data();
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(px + i * d + begin, w, out.begin() + static_cast<std::ptrdiff_t>(i * w));
  Tensor<T> r = make({rows, w}, std::move(out));
  if (tracking({&x})) {
    Node<T>* nx = x.node().get();
    Node<T>* no = r.node().get();
    record(r, {x}, [nx, no, rows, d, w, begin] {
      T* gx = nx->g();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < w; ++j) gx[i * d + begin + j] += no->grad[i * w + j];
    });
  }
  return r;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts.front().rank() == 2 ? parts.front().dim(1) : 0;
  std::size_t rows = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_matrix(p.shape(), "concat_rows");
    if (p.dim(1) != d) {
      throw ShapeError("concat_rows: width " + std::to_string(p.dim(1)) + " vs " + std::to_string(d));
    }
    rows += p.dim(0);
    track = track || tracking({&p});
  }
  std::vector<T> out;
  out.reserve(rows * d);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  Tensor<T> r = make({rows, d}, std::move(out));
  if (track) {
    std::vector<Node<T>*> nodes;
    for (const auto& p : parts) nodes.push_back(p.node().get());
    Node<T>* no = r.node().get();
    record(r, parts, [nodes, no] {
      std::size_t off = 0;
      for (Node<T>* n : nodes) {
        if (n->requires_grad) {
          T* g = n->g();
          for (std::size_t i = 0; i < n->size(); ++i) g[i] += no->grad[off + i];
        }
        off += n->size();
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rank() == 2 ? parts.front().dim(0) : 0;
  std::size_t width = 0;
  bool track = false;
  for (const auto& p : parts) {
    require_matrix(p.shape(), "concat_cols");
    if (p.dim(0) != rows) {
      throw ShapeError("concat_cols: height " + std::to_string(p.dim(0)) + " vs " + std::to_string(rows));
    }
    width += p.dim(1);
    track = track || tracking({&p});
  }
  std::vector<T> out(rows * width);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(p.data().data() + i * w, w, out.begin() + static_cast<std::ptrdiff_t>(i * width + off));
    off += w;
  }
  Tensor<T> r = make({rows, width}, std::move(out));
  if (track) {
    std::vector<Node<T>*> nodes;
    for (const auto& p : parts) nodes.push_back(p.node().get());
    Node<T>* no = r.node().get();
    record(r, parts, [nodes, no, rows, width] {
      std::size_t off = 0;
      for (Node<T>* n : nodes) {
        const std::size_t w = n->shape[1];
        if (n->requires_grad) {
          T* g = n->g();
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < w; ++j) g[i * w + j] += no->grad[i * width + off + j];
        }
        off += w;
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> broadcast_rows(const Tensor<T>& row, std::size_t n) {
  if (row.rank() != 2 || row.dim(0) != 1) {
    throw ShapeError("broadcast_rows: expects [1 x D], got " + to_string(row.shape()));
  }
  const std::size_t d = row.dim(1);
  std::vector<T> out(n * d);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(row.data().data(), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  Tensor<T> r = make({n, d}, std::move(out));
  if (tracking({&row})) {
    Node<T>* nr = row.node().get();
    Node<T>* no = r.node().get();
    record(r, {row}, [nr, no, n, d] {
      T* g = nr->g();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) g[j] += no->grad[i * d + j];
    });
  }
  return r;
}

template <typename T>
Tensor<T> select_rows(std::span<const std::uint8_t> keep, const Tensor<T>& a, const Tensor<T>& b) {
  require_matrix(a.shape(), "select_rows");
  if (a.shape() != b.shape()) {
    throw ShapeError("select_rows: shapes differ, " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  if (keep.size() != a.dim(0)) {
    throw ShapeError("select_rows: mask length " + std::to_string(keep.size()) + " for " +
                     std::to_string(a.dim(0)) + " rows");
  }
  const std::size_t rows = a.dim(0), d = a.dim(1);
  std::vector<T> out(rows * d);
  for (std::size_t i = 0; i < rows; ++i) {
    const T* src = (keep[i] ? a : b).data().data() + i * d;
    std::copy_n(src, d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  Tensor<T> r = make(a.shape(), std::move(out));
  if (tracking({&a, &b})) {
    Node<T>* na = a.node().get();
    Node<T>* nb = b.node().get();
    Node<T>* no = r.node().get();
    record(r, {a, b}, [na, nb, no, rows, d, keep = std::vector<std::uint8_t>(keep.begin(), keep.end())] {
      for (std::size_t i = 0; i < rows; ++i) {
        Node<T>* n = keep[i] ? na : nb;
        if (!n->requires_grad) continue;
        T* g = n->g();
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += no->grad[i * d + j];
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t target) {
  const std::size_t k = logits.numel();
  if (target >= k) {
    throw IndexError("cross_entropy: class " + std::to_string(target) + " out of range for " +
                     std::to_string(k) + " logits");
  }
  const T* p = logits.data().data();
  T mx = *std::max_element(p, p + k);
  T z = 0;
  for (std::size_t i = 0; i < k; ++i) z += std::exp(p[i] - mx);
  const T lse = mx + std::log(z);
  Tensor<T> r = Tensor<T>::scalar(lse - p[target]);
  if (tracking({&logits})) {
    Node<T>* nl = logits.node().get();
    Node<T>* no = r.node().get();
    record(r, {logits}, [nl, no, k, target, lse] {
      T* g = nl->g();
      const T* p = nl->d();
      const T go = no->grad[0];
      for (std::size_t i = 0; i < k; ++i) {
        g[i] += go * (std::exp(p[i] - lse) - (i == target ? T(1) : T(0)));
      }
    });
  }
  return r;
}

#define MLTR_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> transpose(const Tensor<T>&);                                             \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                         \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> softmax(const Tensor<T>&, int);                                          \
  template Tensor<T> layer_norm(const Tensor<T>&, T);                                         \
  template Tensor<T> gelu(const Tensor<T>&);                                                  \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                            std::size_t, std::size_t);                                        \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&);                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> index_select(const Tensor<T>&, std::span<const std::size_t>);            \
  template Tensor<T> gather(const Tensor<T>&, std::vector<std::size_t>, Shape);               \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                              \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                              \
  template Tensor<T> broadcast_rows(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> select_rows(std::span<const std::uint8_t>, const Tensor<T>&,             \
                                 const Tensor<T>&);                                           \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::size_t);

MLTR_INSTANTIATE_OPS(float)
MLTR_INSTANTIATE_OPS(double)

}  // namespace mltr::ad
