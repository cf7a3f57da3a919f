// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode autodiff over dense float64 tensors.
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cfphys::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    /// Gradient buffer, zero-filled on first access.
    std::vector<double>& g();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v) { return full({1}, v); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::size_t size() const { return node_->value.size(); }
    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& grad() { return node_->g(); }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    double item() const;
    double operator[](std::size_t i) const { return node_->value[i]; }
    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& ptr() const { return node_; }

    /// Copy with no graph linkage.
    Tensor detach() const;
    void zero_grad() { node_->grad.clear(); }

    /// Backpropagates from this tensor; seeds with ones (use on scalars).
    void backward();

private:
    std::shared_ptr<Node> node_;
};

/// Disables graph recording on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor square(const Tensor& a);
/// 1 - a
Tensor one_minus(const Tensor& a);

/// x[..., D] + b[D]
Tensor add_bias(const Tensor& x, const Tensor& b);
/// x viewed as [rows, L] with rows = s.size(); row r is multiplied by s[r].
Tensor scale_rows(const Tensor& x, const Tensor& s);
/// a[N, K] @ b[K, M]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[N, in] @ w[in, out] + b[out]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& x);
/// Softmax over each row of x[N, L].
Tensor softmax_rows(const Tensor& x);

Tensor reshape(const Tensor& x, const Shape& shape);
/// Concatenation along `axis` (all other dims equal).
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int length);
/// Rows of x[N, ...] picked by index.
Tensor gather_rows(const Tensor& x, const std::vector<int>& index);
/// out[index[i]] += x[i]; out has `rows` rows.
Tensor scatter_add_rows(const Tensor& x, const std::vector<int>& index, int rows);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// mean((a - b)^2)
Tensor mse(const Tensor& a, const Tensor& b);
/// Mean binary cross-entropy on logits against 0/1 targets.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

/// x[B, C, H, W] (*) w[O, C, k, k] + b[O]; cross-correlation. b may be undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
/// Bilinear 2x upsampling with half-pixel centers and edge clamping.
Tensor upsample2x(const Tensor& x);
/// x[B, C, H, W] * scale[C] + shift[C]
Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift);
/// Forward differences along W (axis 3) or H (axis 2) of x[B, C, H, W].
Tensor forward_diff(const Tensor& x, int axis);
/// Per-row softmax over H*W logits x[N, H*W]; returns expected (x, y) at
/// pixel centers, shape [N, 2].
Tensor spatial_softargmax(const Tensor& x, int height, int width);
/// exp(-|p - k|^2 / sigma^2) for keypoints k[N, 2]; shape [N, H*W].
Tensor gaussian_maps(const Tensor& k, int height, int width, double sigma);
/// Mean over H, W of x[B, C, H, W] -> [B, C].
Tensor spatial_mean(const Tensor& x);

} // namespace cfphys::nn
