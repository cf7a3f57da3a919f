// SPDX-License-Identifier: Apache-2.0
#include "cfphys/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "cfphys/error.hpp"

namespace cfphys::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

void require(bool cond, const char* op, const std::string& what) {
    if (!cond) throw UsageError(std::string(op) + ": " + what);
}

Tensor make(const char* op, Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> parents) {
    for (double v : value)
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    if (g_grad_enabled) {
        for (const Tensor* p : parents)
            if (p->defined() && p->requires_grad()) n->requires_grad = true;
        if (n->requires_grad)
            for (const Tensor* p : parents) n->parents.push_back(p->defined() ? p->ptr() : nullptr);
    }
    return Tensor(std::move(n));
}

Tensor make(const char* op, Shape shape, std::vector<double> value, const std::vector<Tensor>& parents) {
    for (double v : value)
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    if (g_grad_enabled) {
        for (const Tensor& p : parents)
            if (p.requires_grad()) n->requires_grad = true;
        if (n->requires_grad)
            for (const Tensor& p : parents) n->parents.push_back(p.ptr());
    }
    return Tensor(std::move(n));
}

// Parent gradient buffer or nullptr when that parent needs none.
std::vector<double>* pg(Node& self, std::size_t i) {
    Node* p = self.parents[i].get();
    return p && p->requires_grad ? &p->g() : nullptr;
}

template <class F, class D>
Tensor unary(const char* op, const Tensor& a, F f, D dfdx) {
    std::vector<double> out(a.size());
    const auto& x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    Tensor r = make(op, a.shape(), std::move(out), {&a});
    if (r.requires_grad())
        r.node()->backward = [dfdx](Node& self) {
            auto* ga = pg(self, 0);
            if (!ga) return;
            const auto& x = self.parents[0]->value;
            for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += self.grad[i] * dfdx(x[i], self.value[i]);
        };
    return r;
}

std::size_t inner_size(const Shape& s, int axis) {
    std::size_t n = 1;
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) n *= static_cast<std::size_t>(s[i]);
    return n;
}

std::size_t outer_size(const Shape& s, int axis) {
    std::size_t n = 1;
    for (int i = 0; i < axis; ++i) n *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
    return n;
}

struct Lerp {
    int i0, i1;
    double f;
};

std::vector<Lerp> upsample_table(int in) {
    std::vector<Lerp> t(static_cast<std::size_t>(2 * in));
    for (int o = 0; o < 2 * in; ++o) {
        const double src = std::clamp((o + 0.5) / 2.0 - 0.5, 0.0, in - 1.0);
        const int i0 = static_cast<int>(src);
        t[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in - 1), src - i0};
    }
    return t;
}

} // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::vector<double>& Node::g() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) { return full(shape, 0.0, requires_grad); }

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
    return from(shape, std::vector<double>(numel(shape), v), requires_grad);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
    if (values.size() != numel(shape))
        throw UsageError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

int Tensor::dim(int i) const {
    if (i < 0) i += rank();
    if (i < 0 || i >= rank()) throw UsageError("tensor: dim index out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
    if (size() != 1) throw UsageError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), data(), false); }

void Tensor::backward() {
    if (!node_->requires_grad) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    auto& g = node_->g();
    std::fill(g.begin(), g.end(), 1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Tensor r = make("add", a.shape(), std::move(out), {&a, &b});
    if (r.requires_grad())
        r.node()->backward = [](Node& self) {
            for (std::size_t p = 0; p < 2; ++p)
                if (auto* g = pg(self, p))
                    for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        };
    return r;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "sub", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    Tensor r = make("sub", a.shape(), std::move(out), {&a, &b});
    if (r.requires_grad())
        r.node()->backward = [](Node& self) {
            if (auto* g = pg(self, 0))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
            if (auto* g = pg(self, 1))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
        };
    return r;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mul", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tensor r = make("mul", a.shape(), std::move(out), {&a, &b});
    if (r.requires_grad())
        r.node()->backward = [](Node& self) {
            const auto& av = self.parents[0]->value;
            const auto& bv = self.parents[1]->value;
            if (auto* g = pg(self, 0))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
            if (auto* g = pg(self, 1))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
        };
    return r;
}

Tensor scale(const Tensor& a, double s) {
    return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
    return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& a) {
    return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        "sigmoid", a,
        [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
    return unary(
        "softplus", a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
        [](double x, double) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

Tensor square(const Tensor& a) {
    return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor one_minus(const Tensor& a) {
    return unary("one_minus", a, [](double x) { return 1.0 - x; }, [](double, double) { return -1.0; });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
    const int d = b.dim(-1);
    require(b.rank() == 1 && x.dim(-1) == d, "add_bias", "bias " + shape_str(b.shape()) + " vs input " + shape_str(x.shape()));
    std::vector<double> out(x.data());
    const auto D = static_cast<std::size_t>(d);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % D];
    Tensor r = make("add_bias", x.shape(), std::move(out), {&x, &b});
    if (r.requires_grad())
        r.node()->backward = [D](Node& self) {
            if (auto* g = pg(self, 0))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
            if (auto* g = pg(self, 1))
                for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % D] += self.grad[i];
        };
    return r;
}

Tensor scale_rows(const Tensor& x, const Tensor& s) {
    const std::size_t rows = s.size();
    require(rows > 0 && x.size() % rows == 0, "scale_rows",
            "cannot split " + shape_str(x.shape()) + " into " + std::to_string(rows) + " rows");
    const std::size_t L = x.size() / rows;
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < L; ++j) out[r * L + j] = x[r * L + j] * s[r];
    Tensor res = make("scale_rows", x.shape(), std::move(out), {&x, &s});
    if (res.requires_grad())
        res.node()->backward = [rows, L](Node& self) {
            const auto& xv = self.parents[0]->value;
            const auto& sv = self.parents[1]->value;
            auto* gx = pg(self, 0);
            auto* gs = pg(self, 1);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < L; ++j) {
                    const double g = self.grad[r * L + j];
                    if (gx) (*gx)[r * L + j] += g * sv[r];
                    if (gs) (*gs)[r] += g * xv[r * L + j];
                }
        };
    return res;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0), "matmul",
            "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(n) * static_cast<std::size_t>(m));
    MapMat(out.data(), n, m).noalias() = CMapMat(a.data().data(), n, k) * CMapMat(b.data().data(), k, m);
    Tensor r = make("matmul", {n, m}, std::move(out), {&a, &b});
    if (r.requires_grad())
        r.node()->backward = [n, k, m](Node& self) {
            CMapMat g(self.grad.data(), n, m);
            if (auto* ga = pg(self, 0))
                MapMat(ga->data(), n, k).noalias() += g * CMapMat(self.parents[1]->value.data(), k, m).transpose();
            if (auto* gb = pg(self, 1))
                MapMat(gb->data(), k, m).noalias() += CMapMat(self.parents[0]->value.data(), n, k).transpose() * g;
        };
    return r;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

Tensor transpose(const Tensor& x) {
    require(x.rank() == 2, "transpose", "expects a matrix");
    const int n = x.dim(0), m = x.dim(1);
    std::vector<double> out(x.size());
    MapMat(out.data(), m, n) = CMapMat(x.data().data(), n, m).transpose();
    Tensor r = make("transpose", {m, n}, std::move(out), {&x});
    if (r.requires_grad())
        r.node()->backward = [n, m](Node& self) {
            if (auto* g = pg(self, 0)) MapMat(g->data(), n, m) += CMapMat(self.grad.data(), m, n).transpose();
        };
    return r;
}

Tensor softmax_rows(const Tensor& x) {
    require(x.rank() == 2 && x.dim(1) > 0, "softmax_rows", "expects [N, L]");
    const auto n = static_cast<std::size_t>(x.dim(0)), L = static_cast<std::size_t>(x.dim(1));
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = x.data().data() + r * L;
        const double m = *std::max_element(row, row + L);
        double z = 0.0;
        for (std::size_t j = 0; j < L; ++j) z += (out[r * L + j] = std::exp(row[j] - m));
        for (std::size_t j = 0; j < L; ++j) out[r * L + j] /= z;
    }
    Tensor res = make("softmax_rows", x.shape(), std::move(out), {&x});
    if (res.requires_grad())
        res.node()->backward = [n, L](Node& self) {
            auto* g = pg(self, 0);
            if (!g) return;
            for (std::size_t r = 0; r < n; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < L; ++j) dot += self.grad[r * L + j] * self.value[r * L + j];
                for (std::size_t j = 0; j < L; ++j) (*g)[r * L + j] += self.value[r * L + j] * (self.grad[r * L + j] - dot);
            }
        };
    return res;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    require(numel(shape) == x.size(), "reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
    Tensor r = make("reshape", shape, x.data(), {&x});
    if (r.requires_grad())
        r.node()->backward = [](Node& self) {
            if (auto* g = pg(self, 0))
                for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
        };
    return r;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    require(!parts.empty(), "concat", "no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis < 0) axis += static_cast<int>(s0.size());
    require(axis >= 0 && axis < static_cast<int>(s0.size()), "concat", "axis out of range");
    Shape shape = s0;
    shape[static_cast<std::size_t>(axis)] = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        Shape s = p.shape();
        require(s.size() == s0.size(), "concat", "rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            require(static_cast<int>(i) == axis || s[i] == s0[i], "concat",
                    shape_str(s) + " incompatible with " + shape_str(s0));
        shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
        widths.push_back(static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]) * inner_size(s, axis));
    }
    const std::size_t outer = outer_size(s0, axis);
    std::size_t total = 0;
    for (auto w : widths) total += w;
    std::vector<double> out(outer * total);
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& v = parts[p].data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(o * widths[p]), widths[p],
                        out.begin() + static_cast<std::ptrdiff_t>(o * total + off));
        off += widths[p];
    }
    Tensor r = make("concat", shape, std::move(out), parts);
    if (r.requires_grad())
        r.node()->backward = [widths, outer, total](Node& self) {
            std::size_t off = 0;
            for (std::size_t p = 0; p < widths.size(); ++p) {
                if (auto* g = pg(self, p))
                    for (std::size_t o = 0; o < outer; ++o)
                        for (std::size_t j = 0; j < widths[p]; ++j) (*g)[o * widths[p] + j] += self.grad[o * total + off + j];
                off += widths[p];
            }
        };
    return r;
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
    if (axis < 0) axis += x.rank();
    require(axis >= 0 && axis < x.rank(), "slice", "axis out of range");
    const int extent = x.dim(axis);
    require(start >= 0 && length >= 0 && start + length <= extent, "slice",
            "range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside " +
                shape_str(x.shape()));
    Shape shape = x.shape();
    shape[static_cast<std::size_t>(axis)] = length;
    const std::size_t outer = outer_size(x.shape(), axis), inner = inner_size(x.shape(), axis);
    const std::size_t src_w = static_cast<std::size_t>(extent) * inner, dst_w = static_cast<std::size_t>(length) * inner;
    const std::size_t off = static_cast<std::size_t>(start) * inner;
    std::vector<double> out(outer * dst_w);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(o * src_w + off), dst_w,
                    out.begin() + static_cast<std::ptrdiff_t>(o * dst_w));
    Tensor r = make("slice", shape, std::move(out), {&x});
    if (r.requires_grad())
        r.node()->backward = [outer, src_w, dst_w, off](Node& self) {
            if (auto* g = pg(self, 0))
                for (std::size_t o = 0; o < outer; ++o)
                    for (std::size_t j = 0; j < dst_w; ++j) (*g)[o * src_w + off + j] += self.grad[o * dst_w + j];
        };
    return r;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& index) {
    require(x.rank() >= 1, "gather_rows", "scalar input");
    const int n = x.dim(0);
    const std::size_t w = x.size() / static_cast<std::size_t>(std::max(n, 1));
    Shape shape = x.shape();
    shape[0] = static_cast<int>(index.size());
    std::vector<double> out(index.size() * w);
    for (std::size_t i = 0; i < index.size(); ++i) {
        require(index[i] >= 0 && index[i] < n, "gather_rows", "index out of range");
        std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(index[i]) * w), w,
                    out.begin() + static_cast<std::ptrdiff_t>(i * w));
    }
    Tensor r = make("gather_rows", shape, std::move(out), {&x});
    if (r.requires_grad())
        r.node()->backward = [index, w](Node& self) {
            if (auto* g = pg(self, 0))
                for (std::size_t i = 0; i < index.size(); ++i)
                    for (std::size_t j = 0; j < w; ++j) (*g)[static_cast<std::size_t>(index[i]) * w + j] += self.grad[i * w + j];
        };
    return r;
}

Tensor scatter_add_rows(const Tensor& x, const std::vector<int>& index, int rows) {
    require(x.rank() >= 1 && static_cast<std::size_t>(x.dim(0)) == index.size(), "scatter_add_rows",
            "one index per input row");
    Shape shape = x.shape();
    shape[0] = rows;
    const std::size_t w = index.empty() ? numel(shape) / static_cast<std::size_t>(std::max(rows, 1))
                                        : x.size() / index.size();
    std::vector<double> out(static_cast<std::size_t>(rows) * w, 0.0);
    for (std::size_t i = 0; i < index.size(); ++i) {
        require(index[i] >= 0 && index[i] < rows, "scatter_add_rows", "index out of range");
        for (std::size_t j = 0; j < w; ++j) out[static_cast<std::size_t>(index[i]) * w + j] += x[i * w + j];
    }
    Tensor r = make("scatter_add_rows", shape, std::move(out), {&x});
    if (r.requires_grad())
        r.node()->backward = [index, w](Node& self) {
            if (auto* g = pg(self, 0))
                for (std::size_t i = 0; i < index.size(); ++i)
                    for (std::size_t j = 0; j < w; ++j) (*g)[i * w + j] += self.grad[static_cast<std::size_t>(index[i]) * w + j];
        };
    return r;
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor r = make("sum", {1}, {s}, {&x});
    if (r.requires_grad())
        r.node()->backward = [](Node& self) {
            if (auto* g = pg(self, 0))
                for (double& v : *g) v += self.grad[0];
        };
    return r;
}

Tensor mean(const Tensor& x) {
    require(x.size() > 0, "mean", "empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "mse", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const double n = static_cast<double>(a.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    Tensor r = make("mse", {1}, {s / n}, {&a, &b});
    if (r.requires_grad())
        r.node()->backward = [n](Node& self) {
            const auto& av = self.parents[0]->value;
            const auto& bv = self.parents[1]->value;
            const double k = 2.0 * self.grad[0] / n;
            if (auto* g = pg(self, 0))
                for (std::size_t i = 0; i < av.size(); ++i) (*g)[i] += k * (av[i] - bv[i]);
            if (auto* g = pg(self, 1))
                for (std::size_t i = 0; i < av.size(); ++i) (*g)[i] -= k * (av[i] - bv[i]);
        };
    return r;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    require(logits.shape() == targets.shape(), "bce_with_logits", "shape mismatch");
    const double n = static_cast<double>(logits.size());
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double z = logits[i], t = targets[i];
        s += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    }
    Tensor r = make("bce_with_logits", {1}, {s / n}, {&logits, &targets});
    if (r.requires_grad())
        r.node()->backward = [n](Node& self) {
            const auto& z = self.parents[0]->value;
            const auto& t = self.parents[1]->value;
            if (auto* g = pg(self, 0))
                for (std::size_t i = 0; i < z.size(); ++i) {
                    const double p = z[i] >= 0 ? 1.0 / (1.0 + std::exp(-z[i])) : std::exp(z[i]) / (1.0 + std::exp(z[i]));
                    (*g)[i] += self.grad[0] * (p - t[i]) / n;
                }
            if (auto* g = pg(self, 1))
                for (std::size_t i = 0; i < z.size(); ++i) (*g)[i] -= self.grad[0] * z[i] / n;
        };
    return r;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    require(x.rank() == 4 && w.rank() == 4, "conv2d", "expects x[B,C,H,W] and w[O,C,k,k]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int O = w.dim(0), k = w.dim(2);
    require(w.dim(1) == C && w.dim(3) == k, "conv2d",
            "weight " + shape_str(w.shape()) + " does not match input " + shape_str(x.shape()));
    require(!b.defined() || (b.rank() == 1 && b.dim(0) == O), "conv2d", "bias must be [O]");
    require(stride >= 1 && pad >= 0, "conv2d", "bad stride/pad");
    const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    require(Ho > 0 && Wo > 0, "conv2d", "output would be empty");
    const int rows = C * k * k, cols = Ho * Wo;

    // im2col per batch item, kept for the backward pass.
    auto cols_buf = std::make_shared<std::vector<double>>(static_cast<std::size_t>(B) * rows * cols, 0.0);
    for (int bi = 0; bi < B; ++bi) {
        double* col = cols_buf->data() + static_cast<std::size_t>(bi) * rows * cols;
        const double* xb = x.data().data() + static_cast<std::size_t>(bi) * C * H * W;
        for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    double* dst = col + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride - pad + kx;
                            if (ix >= 0 && ix < W) dst[oy * Wo + ox] = xb[(c * H + iy) * W + ix];
                        }
                    }
                }
    }
    std::vector<double> out(static_cast<std::size_t>(B) * O * cols);
    CMapMat wm(w.data().data(), O, rows);
    for (int bi = 0; bi < B; ++bi) {
        MapMat ob(out.data() + static_cast<std::size_t>(bi) * O * cols, O, cols);
        ob.noalias() = wm * CMapMat(cols_buf->data() + static_cast<std::size_t>(bi) * rows * cols, rows, cols);
        if (b.defined())
            for (int o = 0; o < O; ++o) ob.row(o).array() += b[static_cast<std::size_t>(o)];
    }
    Tensor r = make("conv2d", {B, O, Ho, Wo}, std::move(out), {&x, &w, &b});
    if (r.requires_grad())
        r.node()->backward = [=](Node& self) {
            auto* gx = pg(self, 0);
            auto* gw = pg(self, 1);
            auto* gb = self.parents[2] ? pg(self, 2) : nullptr;
            CMapMat wm(self.parents[1]->value.data(), O, rows);
            RowMat dcol(rows, cols);
            for (int bi = 0; bi < B; ++bi) {
                CMapMat g(self.grad.data() + static_cast<std::size_t>(bi) * O * cols, O, cols);
                CMapMat col(cols_buf->data() + static_cast<std::size_t>(bi) * rows * cols, rows, cols);
                if (gw) MapMat(gw->data(), O, rows).noalias() += g * col.transpose();
                if (gb)
                    for (int o = 0; o < O; ++o) (*gb)[static_cast<std::size_t>(o)] += g.row(o).sum();
                if (!gx) continue;
                dcol.noalias() = wm.transpose() * g;
                double* xb = gx->data() + static_cast<std::size_t>(bi) * C * H * W;
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const double* src = dcol.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols;
                            for (int oy = 0; oy < Ho; ++oy) {
                                const int iy = oy * stride - pad + ky;
                                if (iy < 0 || iy >= H) continue;
                                for (int ox = 0; ox < Wo; ++ox) {
                                    const int ix = ox * stride - pad + kx;
                                    if (ix >= 0 && ix < W) xb[(c * H + iy) * W + ix] += src[oy * Wo + ox];
                                }
                            }
                        }
            }
        };
    return r;
}

Tensor upsample2x(const Tensor& x) {
    require(x.rank() == 4, "upsample2x", "expects x[B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto ty = upsample_table(H), tx = upsample_table(W);
    const int Ho = 2 * H, Wo = 2 * W;
    std::vector<double> out(static_cast<std::size_t>(B) * C * Ho * Wo);
    for (int p = 0; p < B * C; ++p) {
        const double* src = x.data().data() + static_cast<std::size_t>(p) * H * W;
        double* dst = out.data() + static_cast<std::size_t>(p) * Ho * Wo;
        for (int oy = 0; oy < Ho; ++oy) {
            const Lerp& ly = ty[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < Wo; ++ox) {
                const Lerp& lx = tx[static_cast<std::size_t>(ox)];
                const double top = src[ly.i0 * W + lx.i0] * (1 - lx.f) + src[ly.i0 * W + lx.i1] * lx.f;
                const double bot = src[ly.i1 * W + lx.i0] * (1 - lx.f) + src[ly.i1 * W + lx.i1] * lx.f;
                dst[oy * Wo + ox] = top * (1 - ly.f) + bot * ly.f;
            }
        }
    }
    Tensor r = make("upsample2x", {B, C, Ho, Wo}, std::move(out), {&x});
    if (r.requires_grad())
        r.node()->backward = [=](Node& self) {
            auto* g = pg(self, 0);
            if (!g) return;
            for (int p = 0; p < B * C; ++p) {
                const double* go = self.grad.data() + static_cast<std::size_t>(p) * Ho * Wo;
                double* gi = g->data() + static_cast<std::size_t>(p) * H * W;
                for (int oy = 0; oy < Ho; ++oy) {
                    const Lerp& ly = ty[static_cast<std::size_t>(oy)];
                    for (int ox = 0; ox < Wo; ++ox) {
                        const Lerp& lx = tx[static_cast<std::size_t>(ox)];
                        const double v = go[oy * Wo + ox];
                        gi[ly.i0 * W + lx.i0] += v * (1 - ly.f) * (1 - lx.f);
                        gi[ly.i0 * W + lx.i1] += v * (1 - ly.f) * lx.f;
                        gi[ly.i1 * W + lx.i0] += v * ly.f * (1 - lx.f);
                        gi[ly.i1 * W + lx.i1] += v * ly.f * lx.f;
                    }
                }
            }
        };
    return r;
}

Tensor channel_affine(const Tensor& x, const Tensor& scale_t, const Tensor& shift) {
    require(x.rank() == 4 && scale_t.rank() == 1 && shift.rank() == 1 && scale_t.dim(0) == x.dim(1) &&
                shift.dim(0) == x.dim(1),
            "channel_affine", "expects x[B,C,H,W], scale[C], shift[C]");
    const int B = x.dim(0), C = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * static_cast<std::size_t>(x.dim(3));
    std::vector<double> out(x.size());
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) out[base + i] = x[base + i] * scale_t[c] + shift[c];
        }
    Tensor r = make("channel_affine", x.shape(), std::move(out), {&x, &scale_t, &shift});
    if (r.requires_grad())
        r.node()->backward = [B, C, hw](Node& self) {
            const auto& xv = self.parents[0]->value;
            const auto& sv = self.parents[1]->value;
            auto* gx = pg(self, 0);
            auto* gs = pg(self, 1);
            auto* gt = pg(self, 2);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const std::size_t base = (static_cast<std::size_t>(b) * C + c) * hw;
                    double ds = 0.0, dt = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const double g = self.grad[base + i];
                        if (gx) (*gx)[base + i] += g * sv[static_cast<std::size_t>(c)];
                        ds += g * xv[base + i];
                        dt += g;
                    }
                    if (gs) (*gs)[static_cast<std::size_t>(c)] += ds;
                    if (gt) (*gt)[static_cast<std::size_t>(c)] += dt;
                }
        };
    return r;
}

Tensor forward_diff(const Tensor& x, int axis) {
    require(x.rank() == 4 && (axis == 2 || axis == 3), "forward_diff", "expects x[B,C,H,W] and axis 2 or 3");
    const int P = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Ho = axis == 2 ? H - 1 : H, Wo = axis == 3 ? W - 1 : W;
    require(Ho > 0 && Wo > 0, "forward_diff", "axis too short");
    const int step = axis == 3 ? 1 : W;
    std::vector<double> out(static_cast<std::size_t>(P) * Ho * Wo);
    for (int p = 0; p < P; ++p)
        for (int y = 0; y < Ho; ++y)
            for (int xx = 0; xx < Wo; ++xx) {
                const std::size_t s = static_cast<std::size_t>(p) * H * W + static_cast<std::size_t>(y * W + xx);
                out[(static_cast<std::size_t>(p) * Ho + y) * Wo + xx] = x[s + step] - x[s];
            }
    Tensor r = make("forward_diff", {x.dim(0), x.dim(1), Ho, Wo}, std::move(out), {&x});
    if (r.requires_grad())
        r.node()->backward = [=](Node& self) {
            auto* g = pg(self, 0);
            if (!g) return;
            for (int p = 0; p < P; ++p)
                for (int y = 0; y < Ho; ++y)
                    for (int xx = 0; xx < Wo; ++xx) {
                        const std::size_t s = static_cast<std::size_t>(p) * H * W + static_cast<std::size_t>(y * W + xx);
                        const double v = self.grad[(static_cast<std::size_t>(p) * Ho + y) * Wo + xx];
                        (*g)[s + static_cast<std::size_t>(step)] += v;
                        (*g)[s] -= v;
                    }
        };
    return r;
}

Tensor spatial_softargmax(const Tensor& x, int height, int width) {
    const std::size_t hw = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    require(hw > 0 && x.size() % hw == 0, "spatial_softargmax", "input is not a stack of H x W maps");
    const std::size_t n = x.size() / hw;
    auto probs = std::make_shared<std::vector<double>>(x.size());
    std::vector<double> out(2 * n);
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = x.data().data() + r * hw;
        const double m = *std::max_element(row, row + hw);
        double z = 0.0;
        for (std::size_t j = 0; j < hw; ++j) z += ((*probs)[r * hw + j] = std::exp(row[j] - m));
        double ex = 0.0, ey = 0.0;
        for (std::size_t j = 0; j < hw; ++j) {
            const double p = ((*probs)[r * hw + j] /= z);
            ex += p * ((static_cast<double>(j % static_cast<std::size_t>(width)) + 0.5) / width);
            ey += p * ((static_cast<double>(j / static_cast<std::size_t>(width)) + 0.5) / height);
        }
        out[2 * r] = ex;
        out[2 * r + 1] = ey;
    }
    Tensor res = make("spatial_softargmax", {static_cast<int>(n), 2}, std::move(out), {&x});
    if (res.requires_grad())
        res.node()->backward = [=](Node& self) {
            auto* g = pg(self, 0);
            if (!g) return;
            for (std::size_t r = 0; r < n; ++r) {
                const double gx = self.grad[2 * r], gy = self.grad[2 * r + 1];
                const double ex = self.value[2 * r], ey = self.value[2 * r + 1];
                for (std::size_t j = 0; j < hw; ++j) {
                    const double cx = (static_cast<double>(j % static_cast<std::size_t>(width)) + 0.5) / width;
                    const double cy = (static_cast<double>(j / static_cast<std::size_t>(width)) + 0.5) / height;
                    (*g)[r * hw + j] += (*probs)[r * hw + j] * (gx * (cx - ex) + gy * (cy - ey));
                }
            }
        };
    return res;
}

Tensor gaussian_maps(const Tensor& k, int height, int width, double sigma) {
    require(k.rank() == 2 && k.dim(1) == 2, "gaussian_maps", "expects keypoints [N, 2]");
    require(sigma > 0.0, "gaussian_maps", "sigma must be > 0");
    const auto n = static_cast<std::size_t>(k.dim(0));
    const std::size_t hw = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    const double inv = 1.0 / (sigma * sigma);
    std::vector<double> out(n * hw);
    for (std::size_t r = 0; r < n; ++r)
        for (int y = 0; y < height; ++y) {
            const double dy = (y + 0.5) / height - k[2 * r + 1];
            for (int x = 0; x < width; ++x) {
                const double dx = (x + 0.5) / width - k[2 * r];
                out[r * hw + static_cast<std::size_t>(y * width + x)] = std::exp(-(dx * dx + dy * dy) * inv);
            }
        }
    Tensor res = make("gaussian_maps", {static_cast<int>(n), height * width}, std::move(out), {&k});
    if (res.requires_grad())
        res.node()->backward = [=](Node& self) {
            auto* g = pg(self, 0);
            if (!g) return;
            const auto& kv = self.parents[0]->value;
            for (std::size_t r = 0; r < n; ++r) {
                double gx = 0.0, gy = 0.0;
                for (int y = 0; y < height; ++y)
                    for (int x = 0; x < width; ++x) {
                        const std::size_t i = r * hw + static_cast<std::size_t>(y * width + x);
                        const double v = self.grad[i] * self.value[i] * 2.0 * inv;
                        gx += v * ((x + 0.5) / width - kv[2 * r]);
                        gy += v * ((y + 0.5) / height - kv[2 * r + 1]);
                    }
                (*g)[2 * r] += gx;
                (*g)[2 * r + 1] += gy;
            }
        };
    return res;
}

Tensor spatial_mean(const Tensor& x) {
    require(x.rank() == 4, "spatial_mean", "expects x[B,C,H,W]");
    const int B = x.dim(0), C = x.dim(1);
    const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * static_cast<std::size_t>(x.dim(3));
    std::vector<double> out(static_cast<std::size_t>(B) * C);
    for (std::size_t p = 0; p < out.size(); ++p) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
        out[p] = s / static_cast<double>(hw);
    }
    Tensor r = make("spatial_mean", {B, C}, std::move(out), {&x});
    if (r.requires_grad())
        r.node()->backward = [hw](Node& self) {
            if (auto* g = pg(self, 0))
                for (std::size_t p = 0; p < self.grad.size(); ++p)
                    for (std::size_t i = 0; i < hw; ++i) (*g)[p * hw + i] += self.grad[p] / static_cast<double>(hw);
        };
    return r;
}

} // namespace cfphys::nn
