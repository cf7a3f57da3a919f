// SPDX-License-Identifier: Apache-2.0
//
// Parameter storage, Adam, checkpoints and the layers built on the tensor ops.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cfphys/tensor.hpp"

namespace cfphys::nn {

enum class Init { zeros, ones, glorot };

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct Param {
    Tensor value;
    bool trainable = true;
    std::vector<double> m;
    std::vector<double> v;
};

/// Named parameters with their Adam moments. Iteration order is the name
/// order, which keeps initialization and checkpoints deterministic.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

    /// Registers a new parameter; UsageError if the name exists.
    Tensor create(const std::string& name, const Shape& shape, Init init, bool trainable = true);
    Tensor get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.contains(name); }
    std::vector<std::string> names() const;
    const std::map<std::string, Param>& params() const { return params_; }
    /// Total number of trainable scalars.
    std::size_t trainable_size() const;

    void zero_grad();
    /// One bias-corrected Adam update of every trainable parameter; a
    /// parameter without a gradient is treated as having a zero gradient.
    void adam_step(double lr, const AdamConfig& cfg = {});
    std::uint64_t step() const { return step_; }

    void save(std::ostream& out) const;
    void save(const std::filesystem::path& path) const;
    /// Reads a checkpoint into a fresh store.
    static ParamStore load(std::istream& in);
    static ParamStore load(const std::filesystem::path& path);
    /// Overwrites values and moments of this store in place, so tensors held
    /// by modules stay valid. Names and shapes must match exactly.
    void assign(const ParamStore& other);

    /// Bitwise equality of names, shapes, flags, values, moments and step.
    bool same_as(const ParamStore& other) const;

    std::mt19937_64& rng() { return rng_; }

private:
    std::map<std::string, Param> params_;
    std::uint64_t step_ = 0;
    std::mt19937_64 rng_;
};

class Linear {
public:
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, Init weight_init = Init::glorot);
    Tensor operator()(const Tensor& x) const { return linear(x, w_, b_); }
    int in() const { return w_.dim(0); }
    int out() const { return w_.dim(1); }

private:
    Tensor w_, b_;
};

/// Linear layers with ReLU between them (none after the last).
class Mlp {
public:
    Mlp() = default;
    Mlp(ParamStore& ps, const std::string& name, int in, const std::vector<int>& hidden, int out);
    Tensor operator()(const Tensor& x) const;
    int out() const { return layers_.back().out(); }

private:
    std::vector<Linear> layers_;
};

class Conv2d {
public:
    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int in, int out, int kernel, int stride, int pad);
    Tensor operator()(const Tensor& x) const { return conv2d(x, w_, b_, stride_, pad_); }

private:
    Tensor w_, b_;
    int stride_ = 1, pad_ = 0;
};

/// Per-channel affine with normalization statistics frozen from the first
/// batch it sees. The statistics live in the store as non-trainable entries.
class FrozenNorm {
public:
    FrozenNorm() = default;
    FrozenNorm(ParamStore& ps, const std::string& name, int channels);
    Tensor operator()(const Tensor& x) const;
    bool initialized() const { return flag_[0] != 0.0; }

private:
    Tensor gamma_, beta_, mean_, inv_std_, flag_;
};

/// Conv, frozen norm, ReLU.
class ConvBlock {
public:
    ConvBlock() = default;
    ConvBlock(ParamStore& ps, const std::string& name, int in, int out, int kernel, int stride, int pad);
    Tensor operator()(const Tensor& x) const { return relu(norm_(conv_(x))); }

private:
    Conv2d conv_;
    FrozenNorm norm_;
};

/// Gated recurrent cell:
///   r = s(x Wr + h Ur + br), u = s(x Wu + h Uu + bu),
///   c = tanh(x Wc + (r * h) Uc + bc), h' = (1 - u) * h + u * c.
class GruCell {
public:
    GruCell() = default;
    GruCell(ParamStore& ps, const std::string& name, int in, int hidden);
    Tensor operator()(const Tensor& x, const Tensor& h) const;
    int hidden() const { return hidden_; }

private:
    Tensor wx_, wh_ru_, wh_c_, b_;
    int hidden_ = 0;
};

/// Stacked GRU cells sharing one time step.
class Gru {
public:
    Gru() = default;
    Gru(ParamStore& ps, const std::string& name, int in, int hidden, int layers);
    /// Advances every layer; `state` holds one [N, hidden] tensor per layer.
    Tensor step(const Tensor& x, std::vector<Tensor>& state) const;
    std::vector<Tensor> zero_state(int n) const;
    int hidden() const { return cells_.front().hidden(); }

private:
    std::vector<GruCell> cells_;
};

/// Fully connected message passing over groups of K nodes:
///   out_k = g([x_k, sum_{i != k} f([x_i, x_k])]).
class GraphNet {
public:
    GraphNet() = default;
    GraphNet(ParamStore& ps, const std::string& name, int in, int out, const std::vector<int>& hidden,
             int message = -1);
    /// nodes: [G * K, in], groups laid out contiguously.
    Tensor operator()(const Tensor& nodes, int k) const;
    int out() const { return g_.out(); }

private:
    Mlp f_, g_;
};

/// Aborts training when the loss stays above factor * initial for `patience` steps.
class DivergenceGuard {
public:
    explicit DivergenceGuard(double factor = 10.0, int patience = 100) : factor_(factor), patience_(patience) {}
    void observe(double loss, const std::string& stage);

private:
    double factor_;
    int patience_;
    double initial_ = -1.0;
    int over_ = 0;
    std::size_t steps_ = 0;
};

} // namespace cfphys::nn
