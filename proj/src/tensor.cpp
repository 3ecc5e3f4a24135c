#include "dysp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "tensor_impl.hpp"

namespace dysp {

namespace {

thread_local bool g_grad_enabled = true;

using detail::Node;

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  return node;
}

// Second operand broadcast: identical shape or trailing suffix.
std::size_t broadcast_period(const Shape& a, const Shape& b, const char* op) {
  if (b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) return shape_numel(b);
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " +
                       shape_str(a));
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Tensor unary(const Tensor& x, const char* op, double (*f)(double), double (*df)(double, double)) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return detail::make_result(x.shape(), std::move(out), {x},
                             [df](Node& self) {
                               const auto& xd = detail::parent_data(self, 0);
                               auto& gx = detail::parent_grad(self, 0);
                               for (std::size_t i = 0; i < xd.size(); ++i)
                                 gx[i] += self.grad[i] * df(xd[i], self.data[i]);
                             },
                             op);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward, const char* op) {
  auto node = new_node(std::move(shape), std::move(data));
  node->op = op;
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.defined() && p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (auto& p : parents) node->parents.push_back(p.node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Tensor::wrap(std::move(node));
}

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  // Four output rows share each pass over a row of b; every c[i][j] still
  // accumulates its k terms in increasing order.
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double a0 = a[i * k + kk], a1 = a[(i + 1) * k + kk], a2 = a[(i + 2) * k + kk],
                   a3 = a[(i + 3) * k + kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = brow[j];
        c0[j] += a0 * bj;
        c1[j] += a1 * bj;
        c2[j] += a2 * bj;
        c3[j] += a3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = a[i * k + kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      c[i * n + j] += acc;
    }
  }
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t kk = 0; kk < k; ++kk) {
    const double* brow = b + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double aki = a[kk * m + i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor handle

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  auto t = wrap(new_node(std::move(shape), std::vector<double>(n, value)));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  auto t = wrap(new_node(std::move(shape), std::move(data)));
  t.node_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }
void Tensor::zero_grad() { node_->grad.clear(); }

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) throw DimensionError("index out of range");
    flat = flat * node_->shape[axis++] + i;
  }
  return node_->data[flat];
}

void Tensor::backward() const {
  if (numel() != 1)
    throw DimensionError("backward() needs a single-element tensor, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

Tensor Tensor::detach() const { return from(shape(), node_->data); }
Tensor Tensor::clone() const { return from(shape(), node_->data, node_->requires_grad); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  const auto period = broadcast_period(a.shape(), b.shape(), "add");
  const auto ad = a.data(), bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i % period];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [period](Node& self) {
                               if (detail::wants_grad(self, 0)) {
                                 auto& ga = detail::parent_grad(self, 0);
                                 for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                               }
                               if (detail::wants_grad(self, 1)) {
                                 auto& gb = detail::parent_grad(self, 1);
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   gb[i % period] += self.grad[i];
                               }
                             },
                             "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto period = broadcast_period(a.shape(), b.shape(), "sub");
  const auto ad = a.data(), bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] - bd[i % period];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [period](Node& self) {
                               if (detail::wants_grad(self, 0)) {
                                 auto& ga = detail::parent_grad(self, 0);
                                 for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                               }
                               if (detail::wants_grad(self, 1)) {
                                 auto& gb = detail::parent_grad(self, 1);
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   gb[i % period] -= self.grad[i];
                               }
                             },
                             "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto period = broadcast_period(a.shape(), b.shape(), "mul");
  const auto ad = a.data(), bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i % period];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [period](Node& self) {
                               const auto& ad = detail::parent_data(self, 0);
                               const auto& bd = detail::parent_data(self, 1);
                               if (detail::wants_grad(self, 0)) {
                                 auto& ga = detail::parent_grad(self, 0);
                                 for (std::size_t i = 0; i < ga.size(); ++i)
                                   ga[i] += self.grad[i] * bd[i % period];
                               }
                               if (detail::wants_grad(self, 1)) {
                                 auto& gb = detail::parent_grad(self, 1);
                                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   gb[i % period] += self.grad[i] * ad[i];
                               }
                             },
                             "mul");
}

Tensor div(const Tensor& a, const Tensor& b) {
  const auto period = broadcast_period(a.shape(), b.shape(), "div");
  const auto ad = a.data(), bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] / bd[i % period];
  return detail::make_result(a.shape(), std::move(out), {a, b},
                             [period](Node& self) {
                               const auto& ad = detail::parent_data(self, 0);
                               const auto& bd = detail::parent_data(self, 1);
                               if (detail::wants_grad(self, 0)) {
                                 auto& ga = detail::parent_grad(self, 0);
                                 for (std::size_t i = 0; i < ga.size(); ++i)
                                   ga[i] += self.grad[i] / bd[i % period];
                               }
                               if (detail::wants_grad(self, 1)) {
                                 auto& gb = detail::parent_grad(self, 1);
                                 for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                   const double d = bd[i % period];
                                   gb[i % period] -= self.grad[i] * ad[i] / (d * d);
                                 }
                               }
                             },
                             "div");
}

Tensor scale(const Tensor& a, double factor) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * factor;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [factor](Node& self) {
                               auto& ga = detail::parent_grad(self, 0);
                               for (std::size_t i = 0; i < ga.size(); ++i)
                                 ga[i] += self.grad[i] * factor;
                             },
                             "scale");
}

Tensor add_scalar(const Tensor& a, double value) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + value;
  return detail::make_result(a.shape(), std::move(out), {a},
                             [](Node& self) {
                               auto& ga = detail::parent_grad(self, 0);
                               for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                             },
                             "add_scalar");
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); },
      [](double v, double) {
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * M_PI);
        return 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) + v * pdf;
      });
}

Tensor log(const Tensor& x) {
  return unary(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = xd[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xd[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) {
        const double e = std::exp(xd[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [s](Node& self) {
                               auto& gx = detail::parent_grad(self, 0);
                               const auto& y = self.data;
                               const auto& g = self.grad;
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                 for (std::size_t in = 0; in < s.inner; ++in) {
                                   const std::size_t base = o * s.len * s.inner + in;
                                   double dot = 0.0;
                                   for (std::size_t l = 0; l < s.len; ++l)
                                     dot += g[base + l * s.inner] * y[base + l * s.inner];
                                   for (std::size_t l = 0; l < s.len; ++l) {
                                     const std::size_t i = base + l * s.inner;
                                     gx[i] += y[i] * (g[i] - dot);
                                   }
                                 }
                               }
                             },
                             "softmax");
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis);
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = xd[base];
      for (std::size_t l = 1; l < s.len; ++l) mx = std::max(mx, xd[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.len; ++l) total += std::exp(xd[base + l * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = xd[base + l * s.inner] - lse;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x},
                             [s](Node& self) {
                               auto& gx = detail::parent_grad(self, 0);
                               const auto& y = self.data;
                               const auto& g = self.grad;
                               for (std::size_t o = 0; o < s.outer; ++o) {
                                 for (std::size_t in = 0; in < s.inner; ++in) {
                                   const std::size_t base = o * s.len * s.inner + in;
                                   double gsum = 0.0;
                                   for (std::size_t l = 0; l < s.len; ++l) gsum += g[base + l * s.inner];
                                   for (std::size_t l = 0; l < s.len; ++l) {
                                     const std::size_t i = base + l * s.inner;
                                     gx[i] += g[i] - std::exp(y[i]) * gsum;
                                   }
                                 }
                               }
                             },
                             "log_softmax");
}

// ---------------------------------------------------------------------------
// Products

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {a, b},
                             [m, k, n](Node& self) {
                               if (detail::wants_grad(self, 0))
                                 detail::gemm_nt(self.grad.data(), detail::parent_data(self, 1).data(),
                                                 detail::parent_grad(self, 0).data(), m, n, k);
                               if (detail::wants_grad(self, 1))
                                 detail::gemm_tn(detail::parent_data(self, 0).data(), self.grad.data(),
                                                 detail::parent_grad(self, 1).data(), k, m, n);
                             },
                             "matmul");
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(bs * m * n, 0.0);
  for (std::size_t i = 0; i < bs; ++i)
    detail::gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n,
                    m, k, n);
  return detail::make_result(
      {bs, m, n}, std::move(out), {a, b},
      [bs, m, k, n](Node& self) {
        const bool ga = detail::wants_grad(self, 0), gb = detail::wants_grad(self, 1);
        for (std::size_t i = 0; i < bs; ++i) {
          const double* g = self.grad.data() + i * m * n;
          if (ga)
            detail::gemm_nt(g, detail::parent_data(self, 1).data() + i * k * n,
                            detail::parent_grad(self, 0).data() + i * m * k, m, n, k);
          if (gb)
            detail::gemm_tn(detail::parent_data(self, 0).data() + i * m * k, g,
                            detail::parent_grad(self, 1).data() + i * k * n, k, m, n);
        }
      },
      "bmm");
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() == 0 || w.rank() != 2 || x.shape().back() != w.dim(0))
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()));
  const std::size_t k = w.dim(0), n = w.dim(1);
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor y = reshape(matmul(reshape(x, {x.numel() / k, k}), w), out_shape);
  return bias.defined() ? add(y, bias) : y;
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result(std::move(shape), std::move(out), {x},
                             [](Node& self) {
                               auto& gx = detail::parent_grad(self, 0);
                               for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                             },
                             "reshape");
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const auto& in_shape = x.shape();
  const std::size_t r = in_shape.size();
  if (order.size() != r) throw DimensionError("permute: order rank mismatch for " + shape_str(in_shape));
  std::vector<bool> seen(r, false);
  for (auto o : order) {
    if (o >= r || seen[o]) throw DimensionError("permute: invalid axis order");
    seen[o] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[order[i]];
    src_stride[i] = in_strides[order[i]];
  }
  const std::size_t n = x.numel();
  // Gather map: out[i] = in[map[i]].
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*map)[i] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      src += src_stride[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= src_stride[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
  const auto xd = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[(*map)[i]];
  return detail::make_result(std::move(out_shape), std::move(out), {x},
                             [map](Node& self) {
                               auto& gx = detail::parent_grad(self, 0);
                               for (std::size_t i = 0; i < map->size(); ++i)
                                 gx[(*map)[i]] += self.grad[i];
                             },
                             "permute");
}

Tensor transpose(const Tensor& x, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> order(x.rank());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (axis0 >= order.size() || axis1 >= order.size())
    throw DimensionError("transpose: axis out of range for " + shape_str(x.shape()));
  std::swap(order[axis0], order[axis1]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) ok = false;
    if (!ok)
      throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first) +
                           " along axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
    lens.push_back(s[axis]);
  }
  const auto split = split_at(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pd = parts[p].data();
    const std::size_t chunk = lens[p] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(pd.begin() + o * chunk, chunk,
                  out.begin() + o * split.len * split.inner + offset * split.inner);
    offset += lens[p];
  }
  return detail::make_result(std::move(out_shape), std::move(out), parts,
                             [split, lens](Node& self) {
                               std::size_t offset = 0;
                               for (std::size_t p = 0; p < lens.size(); ++p) {
                                 const std::size_t chunk = lens[p] * split.inner;
                                 if (detail::wants_grad(self, p)) {
                                   auto& gp = detail::parent_grad(self, p);
                                   for (std::size_t o = 0; o < split.outer; ++o) {
                                     const double* g = self.grad.data() + o * split.len * split.inner +
                                                       offset * split.inner;
                                     for (std::size_t i = 0; i < chunk; ++i) gp[o * chunk + i] += g[i];
                                   }
                                 }
                                 offset += lens[p];
                               }
                             },
                             "concat");
}

// ---------------------------------------------------------------------------
// Reductions (fixed left-to-right order)

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return detail::make_result({}, {total}, {x},
                             [](Node& self) {
                               auto& gx = detail::parent_grad(self, 0);
                               for (auto& g : gx) g += self.grad[0];
                             },
                             "sum");
}

Tensor sum(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  const auto xd = x.data();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += xd[(o * s.len + l) * s.inner + in];
  return detail::make_result(std::move(out_shape), std::move(out), {x},
                             [s](Node& self) {
                               auto& gx = detail::parent_grad(self, 0);
                               for (std::size_t o = 0; o < s.outer; ++o)
                                 for (std::size_t l = 0; l < s.len; ++l)
                                   for (std::size_t in = 0; in < s.inner; ++in)
                                     gx[(o * s.len + l) * s.inner + in] += self.grad[o * s.inner + in];
                             },
                             "sum_axis");
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean(const Tensor& x, std::size_t axis) {
  const double len = static_cast<double>(split_at(x.shape(), axis).len);
  return scale(sum(x, axis), 1.0 / len);
}

Tensor gradient_reversal(const Tensor& x, double lambda) {
  if (lambda < 0.0) throw ConfigError("gradient_reversal: lambda must be >= 0");
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result(x.shape(), std::move(out), {x},
                             [lambda](Node& self) {
                               auto& gx = detail::parent_grad(self, 0);
                               for (std::size_t i = 0; i < gx.size(); ++i)
                                 gx[i] += -lambda * self.grad[i];
                             },
                             "gradient_reversal");
}

}  // namespace dysp
