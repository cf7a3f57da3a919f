// SPDX-License-Identifier: Apache-2.0
#include "cfphys/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cfphys/error.hpp"

namespace cfphys::nn {
namespace {

constexpr char kMagic[8] = {'C', 'F', 'P', 'H', 'Y', 'S', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw IoError("checkpoint: truncated file");
    return v;
}

void put_doubles(std::ostream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> take_doubles(std::istream& in, std::size_t n) {
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw IoError("checkpoint: truncated payload");
    return v;
}

bool bit_equal(const std::vector<double>& a, const std::vector<double>& b) {
    return a.size() == b.size() && (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0);
}

} // namespace

Tensor ParamStore::create(const std::string& name, const Shape& shape, Init init, bool trainable) {
    if (params_.contains(name)) throw UsageError("parameter '" + name + "' already exists");
    const std::size_t n = numel(shape);
    std::vector<double> values(n, init == Init::ones ? 1.0 : 0.0);
    if (init == Init::glorot) {
        double fan_in = 1.0, fan_out = 1.0;
        if (shape.size() == 2) {
            fan_in = shape[0];
            fan_out = shape[1];
        } else if (shape.size() == 4) {
            const double rf = static_cast<double>(shape[2]) * shape[3];
            fan_in = shape[1] * rf;
            fan_out = shape[0] * rf;
        } else if (shape.size() == 1) {
            fan_in = fan_out = shape[0];
        }
        const double a = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-a, a);
        for (double& v : values) v = dist(rng_);
    }
    Param p;
    p.value = Tensor::from(shape, std::move(values), trainable);
    p.trainable = trainable;
    p.m.assign(n, 0.0);
    p.v.assign(n, 0.0);
    auto [it, ok] = params_.emplace(name, std::move(p));
    (void)ok;
    return it->second.value;
}

Tensor ParamStore::get(const std::string& name) const {
    const auto it = params_.find(name);
    if (it == params_.end()) throw UsageError("parameter '" + name + "' not found");
    return it->second.value;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
}

std::size_t ParamStore::trainable_size() const {
    std::size_t n = 0;
    for (const auto& [k, p] : params_)
        if (p.trainable) n += p.value.size();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [k, p] : params_) p.value.zero_grad();
}

void ParamStore::adam_step(double lr, const AdamConfig& cfg) {
    ++step_;
    const double t = static_cast<double>(step_);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (auto& [name, p] : params_) {
        if (!p.trainable) continue;
        auto& theta = p.value.data();
        const bool has = p.value.has_grad();
        const std::vector<double>* g = has ? &p.value.grad() : nullptr;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            const double gi = g ? (*g)[i] : 0.0;
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * gi;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * gi * gi;
            theta[i] -= lr * (p.m[i] / c1) / (std::sqrt(p.v[i] / c2) + cfg.eps);
        }
        if (!std::isfinite(theta.empty() ? 0.0 : theta[0])) throw NumericError("adam: parameter '" + name + "' diverged");
    }
}

void ParamStore::save(std::ostream& out) const {
    out.write(kMagic, sizeof kMagic);
    put(out, kVersion);
    put(out, step_);
    put(out, static_cast<std::uint64_t>(params_.size()));
    for (const auto& [name, p] : params_) {
        put(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put(out, static_cast<std::uint8_t>(p.trainable ? 1 : 0));
        put(out, static_cast<std::uint32_t>(p.value.rank()));
        for (int d : p.value.shape()) put(out, static_cast<std::int32_t>(d));
        put_doubles(out, p.value.data());
        put_doubles(out, p.m);
        put_doubles(out, p.v);
    }
    if (!out) throw IoError("checkpoint: write failed");
}

void ParamStore::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open " + path.string());
    save(out);
}

ParamStore ParamStore::load(std::istream& in) {
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw IoError("checkpoint: bad magic");
    const auto version = take<std::uint32_t>(in);
    if (version != kVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
    ParamStore ps;
    ps.step_ = take<std::uint64_t>(in);
    const auto count = take<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = take<std::uint32_t>(in);
        std::string name(len, '\0');
        in.read(name.data(), len);
        const bool trainable = take<std::uint8_t>(in) != 0;
        const auto rank = take<std::uint32_t>(in);
        if (rank > 8) throw IoError("checkpoint: implausible rank for '" + name + "'");
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(take<std::int32_t>(in));
        const std::size_t n = numel(shape);
        Param p;
        p.value = Tensor::from(shape, take_doubles(in, n), trainable);
        p.trainable = trainable;
        p.m = take_doubles(in, n);
        p.v = take_doubles(in, n);
        ps.params_.emplace(std::move(name), std::move(p));
    }
    return ps;
}

ParamStore ParamStore::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw PrereqError("checkpoint not found: " + path.string());
    return load(in);
}

void ParamStore::assign(const ParamStore& other) {
    if (other.params_.size() != params_.size()) throw UsageError("checkpoint: parameter count differs from model");
    for (auto& [name, p] : params_) {
        const auto it = other.params_.find(name);
        if (it == other.params_.end()) throw UsageError("checkpoint: missing parameter '" + name + "'");
        if (it->second.value.shape() != p.value.shape())
            throw UsageError("checkpoint: shape mismatch for '" + name + "'");
        p.value.data() = it->second.value.data();
        p.m = it->second.m;
        p.v = it->second.v;
    }
    step_ = other.step_;
}

bool ParamStore::same_as(const ParamStore& other) const {
    if (step_ != other.step_ || params_.size() != other.params_.size()) return false;
    for (const auto& [name, p] : params_) {
        const auto it = other.params_.find(name);
        if (it == other.params_.end()) return false;
        const Param& q = it->second;
        if (p.trainable != q.trainable || p.value.shape() != q.value.shape()) return false;
        if (!bit_equal(p.value.data(), q.value.data()) || !bit_equal(p.m, q.m) || !bit_equal(p.v, q.v)) return false;
    }
    return true;
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, Init weight_init)
    : w_(ps.create(name + ".w", {in, out}, weight_init)), b_(ps.create(name + ".b", {out}, Init::zeros)) {}

Mlp::Mlp(ParamStore& ps, const std::string& name, int in, const std::vector<int>& hidden, int out) {
    int prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        layers_.emplace_back(ps, name + ".l" + std::to_string(i), prev, hidden[i]);
        prev = hidden[i];
    }
    layers_.emplace_back(ps, name + ".l" + std::to_string(hidden.size()), prev, out);
}

Tensor Mlp::operator()(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        h = layers_[i](h);
        if (i + 1 < layers_.size()) h = relu(h);
    }
    return h;
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int in, int out, int kernel, int stride, int pad)
    : w_(ps.create(name + ".w", {out, in, kernel, kernel}, Init::glorot)),
      b_(ps.create(name + ".b", {out}, Init::zeros)), stride_(stride), pad_(pad) {}

FrozenNorm::FrozenNorm(ParamStore& ps, const std::string& name, int channels)
    : gamma_(ps.create(name + ".gamma", {channels}, Init::ones)),
      beta_(ps.create(name + ".beta", {channels}, Init::zeros)),
      mean_(ps.create(name + ".mean", {channels}, Init::zeros, false)),
      inv_std_(ps.create(name + ".inv_std", {channels}, Init::ones, false)),
      flag_(ps.create(name + ".frozen", {1}, Init::zeros, false)) {}

Tensor FrozenNorm::operator()(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != gamma_.dim(0)) throw UsageError("frozen_norm: channel mismatch");
    if (!initialized()) {
        const int B = x.dim(0), C = x.dim(1);
        const std::size_t hw = static_cast<std::size_t>(x.dim(2)) * static_cast<std::size_t>(x.dim(3));
        Tensor mean = mean_, inv = inv_std_, flag = flag_;
        for (int c = 0; c < C; ++c) {
            double s = 0.0, s2 = 0.0;
            for (int b = 0; b < B; ++b)
                for (std::size_t i = 0; i < hw; ++i) {
                    const double v = x[(static_cast<std::size_t>(b) * C + c) * hw + i];
                    s += v;
                    s2 += v * v;
                }
            const double n = static_cast<double>(B) * static_cast<double>(hw);
            const double mu = s / n;
            const double var = std::max(s2 / n - mu * mu, 0.0);
            mean.data()[static_cast<std::size_t>(c)] = mu;
            inv.data()[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + 1e-5);
        }
        flag.data()[0] = 1.0;
    }
    const Tensor s = mul(gamma_, inv_std_);
    return channel_affine(x, s, sub(beta_, mul(mean_, s)));
}

ConvBlock::ConvBlock(ParamStore& ps, const std::string& name, int in, int out, int kernel, int stride, int pad)
    : conv_(ps, name + ".conv", in, out, kernel, stride, pad), norm_(ps, name + ".norm", out) {}

GruCell::GruCell(ParamStore& ps, const std::string& name, int in, int hidden)
    : wx_(ps.create(name + ".wx", {in, 3 * hidden}, Init::glorot)),
      wh_ru_(ps.create(name + ".wh_ru", {hidden, 2 * hidden}, Init::glorot)),
      wh_c_(ps.create(name + ".wh_c", {hidden, hidden}, Init::glorot)),
      b_(ps.create(name + ".b", {3 * hidden}, Init::zeros)), hidden_(hidden) {}

Tensor GruCell::operator()(const Tensor& x, const Tensor& h) const {
    if (h.rank() != 2 || h.dim(1) != hidden_ || x.dim(0) != h.dim(0)) throw UsageError("gru: state shape mismatch");
    const Tensor xg = linear(x, wx_, b_);
    const Tensor ru = sigmoid(add(slice(xg, 1, 0, 2 * hidden_), matmul(h, wh_ru_)));
    const Tensor r = slice(ru, 1, 0, hidden_);
    const Tensor u = slice(ru, 1, hidden_, hidden_);
    const Tensor c = tanh(add(slice(xg, 1, 2 * hidden_, hidden_), matmul(mul(r, h), wh_c_)));
    return add(mul(one_minus(u), h), mul(u, c));
}

Gru::Gru(ParamStore& ps, const std::string& name, int in, int hidden, int layers) {
    if (layers < 1) throw UsageError("gru: needs at least one layer");
    for (int l = 0; l < layers; ++l) cells_.emplace_back(ps, name + ".cell" + std::to_string(l), l ? hidden : in, hidden);
}

Tensor Gru::step(const Tensor& x, std::vector<Tensor>& state) const {
    if (state.size() != cells_.size()) throw UsageError("gru: one state per layer");
    Tensor in = x;
    for (std::size_t l = 0; l < cells_.size(); ++l) in = state[l] = cells_[l](in, state[l]);
    return in;
}

std::vector<Tensor> Gru::zero_state(int n) const {
    std::vector<Tensor> s;
    for (const auto& c : cells_) s.push_back(Tensor::zeros({n, c.hidden()}));
    return s;
}

GraphNet::GraphNet(ParamStore& ps, const std::string& name, int in, int out, const std::vector<int>& hidden,
                   int message) {
    const int msg = message > 0 ? message : (hidden.empty() ? out : hidden.back());
    f_ = Mlp(ps, name + ".f", 2 * in, hidden, msg);
    g_ = Mlp(ps, name + ".g", in + msg, hidden, out);
}

Tensor GraphNet::operator()(const Tensor& nodes, int k) const {
    if (k < 1) throw UsageError("graphnet: K must be >= 1");
    if (nodes.rank() != 2 || nodes.dim(0) % k != 0) throw UsageError("graphnet: nodes must be [G*K, d]");
    const int n = nodes.dim(0);
    std::vector<int> src, dst;
    for (int g0 = 0; g0 < n; g0 += k)
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j)
                if (i != j) {
                    src.push_back(g0 + i);
                    dst.push_back(g0 + j);
                }
    Tensor agg;
    if (src.empty()) {
        agg = Tensor::zeros({n, f_.out()});
    } else {
        const Tensor msg = f_(concat({gather_rows(nodes, src), gather_rows(nodes, dst)}, 1));
        agg = scatter_add_rows(msg, dst, n);
    }
    return g_(concat({nodes, agg}, 1));
}

void DivergenceGuard::observe(double loss, const std::string& stage) {
    if (!std::isfinite(loss)) throw NumericError(stage + ": non-finite loss at step " + std::to_string(steps_));
    ++steps_;
    if (initial_ < 0.0) {
        initial_ = loss;
        return;
    }
    over_ = loss > factor_ * initial_ ? over_ + 1 : 0;
    if (over_ >= patience_) {
        std::ostringstream os;
        os << stage << ": diverged (loss " << loss << " > " << factor_ << "x initial " << initial_ << " for "
           << patience_ << " steps)";
        throw NumericError(os.str());
    }
}

} // namespace cfphys::nn
