// SPDX-License-Identifier: Apache-2.0
#include "cfphys/derender.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cfphys/error.hpp"

namespace cfphys::derender {

using nn::Tensor;

void DerenderConfig::validate() const {
    auto need = [](bool ok, const char* field, const char* what) {
        if (!ok) throw UsageError(std::string("derender config: ") + field + " " + what);
    };
    need(keypoints >= 1, "keypoints", "must be >= 1");
    need(coefficients >= 1, "coefficients", "must be >= 1");
    need(gamma1 > 0, "gamma1", "must be > 0");
    need(gamma2 > 0, "gamma2", "must be > 0");
    need(lr > 0, "lr", "must be > 0");
    need(frame_size >= 8, "frame_size", "must be >= 8");
    need(feature_size * 2 == frame_size || feature_size * 4 == frame_size, "feature_size",
         "must be frame_size / 2 or frame_size / 4");
    need(width1 >= 1 && width2 >= 1 && refine_width >= 2, "width", "must be positive");
    need(sigma > 0, "sigma", "must be > 0");
    need(batch >= 1, "batch", "must be >= 1");
    need(steps >= 0, "steps", "must be >= 0");
}

Derenderer::Derenderer(const DerenderConfig& cfg) : cfg_(cfg), ps_(cfg.seed) {
    cfg_.validate();
    const int down = cfg_.frame_size / cfg_.feature_size;
    backbone_.emplace_back(ps_, "enc.b0", 3, cfg_.width1, 3, 1, 1);
    backbone_.emplace_back(ps_, "enc.b1", cfg_.width1, cfg_.width1, 3, 2, 1);
    backbone_.emplace_back(ps_, "enc.b2", cfg_.width1, cfg_.width2, 3, down == 4 ? 2 : 1, 1);
    backbone_.emplace_back(ps_, "enc.b3", cfg_.width2, cfg_.width2, 3, 1, 1);
    kp_head_ = nn::Conv2d(ps_, "enc.kp", cfg_.width2, cfg_.keypoints, 1, 1, 0);
    if (cfg_.use_coefficients) {
        coef_hidden_ = nn::Conv2d(ps_, "enc.coef0", cfg_.width2, cfg_.width2, 1, 1, 0);
        coef_out_ = nn::Conv2d(ps_, "enc.coef1", cfg_.width2, cfg_.coefficient_width(), 1, 1, 0);
    }

    const int maps = cfg_.use_coefficients ? cfg_.keypoints * cfg_.coefficients : cfg_.keypoints;
    int width = cfg_.refine_width;
    refine_.emplace_back(ps_, "dec.r0", cfg_.width2 + maps, width, 3, 1, 1);
    for (int u = 0, f = down; f > 1; ++u, f /= 2) {
        const int next = std::max(4, width / 2);
        refine_.emplace_back(ps_, "dec.up" + std::to_string(u), width, next, 3, 1, 1);
        width = next;
    }
    refine_.emplace_back(ps_, "dec.out", width, 3, 3, 1, 1);

    if (cfg_.use_coefficients) {
        const auto bank = render::make_filter_bank(cfg_.coefficients);
        std::vector<double> w;
        for (const auto& k : bank.kernels) w.insert(w.end(), k.begin(), k.end());
        bank_ = Tensor::from({cfg_.coefficients, 1, bank.size, bank.size}, std::move(w));
    }
    const int h = cfg_.feature_size;
    std::vector<double> c;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < h; ++x) {
            c.push_back((x + 0.5) / h);
            c.push_back((y + 0.5) / h);
        }
    coords_ = Tensor::from({h * h, 2}, std::move(c));
}

Encoding Derenderer::encode_batch(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != cfg_.frame_size || images.dim(3) != cfg_.frame_size)
        throw UsageError("encode: expected [N, 3, " + std::to_string(cfg_.frame_size) + ", " +
                         std::to_string(cfg_.frame_size) + "], got " + nn::shape_str(images.shape()));
    const int n = images.dim(0), K = cfg_.keypoints, hw = cfg_.feature_size * cfg_.feature_size;
    Tensor h = images;
    for (const auto& b : backbone_) h = b(h);
    Encoding enc;
    enc.features = h;
    const Tensor probs = nn::softmax_rows(nn::reshape(kp_head_(h), {n * K, hw}));
    enc.keypoints = nn::matmul(probs, coords_);
    if (cfg_.use_coefficients) {
        const int cw = cfg_.coefficient_width();
        const Tensor maps = nn::reshape(coef_out_(nn::relu(coef_hidden_(h))), {n * cw, hw});
        std::vector<Tensor> rows;
        for (int b = 0; b < n; ++b) {
            // Attention-pooled per-keypoint coefficient logits.
            rows.push_back(nn::matmul(nn::slice(probs, 0, b * K, K), nn::transpose(nn::slice(maps, 0, b * cw, cw))));
        }
        enc.coefficients = nn::sigmoid(n == 1 ? rows[0] : nn::concat(rows, 0));
    }
    return enc;
}

Tensor Derenderer::decode_batch(const Tensor& features, const Tensor& keypoints, const Tensor& coefficients) const {
    const int n = features.dim(0), K = cfg_.keypoints, h = cfg_.feature_size;
    if (keypoints.rank() != 2 || keypoints.dim(0) != n * K)
        throw UsageError("decode: keypoints do not match the feature batch");
    const Tensor g = nn::gaussian_maps(keypoints, h, h, cfg_.sigma);
    Tensor shape_maps;
    if (cfg_.use_coefficients) {
        const int C = cfg_.coefficients;
        if (!coefficients.defined() || coefficients.dim(0) != n * K || coefficients.dim(1) != C + 1)
            throw UsageError("decode: coefficients must be [N * K, C + 1]");
        const Tensor filtered = nn::conv2d(nn::reshape(g, {n * K, 1, h, h}), bank_, Tensor{}, 1, bank_.dim(2) / 2);
        const Tensor gate = nn::reshape(nn::slice(coefficients, 1, C, 1), {n * K});
        const Tensor weights = nn::scale_rows(nn::slice(coefficients, 1, 0, C), gate);
        shape_maps = nn::reshape(nn::scale_rows(nn::reshape(filtered, {n * K * C, h * h}), nn::reshape(weights, {n * K * C})),
                                 {n, K * C, h, h});
    } else {
        shape_maps = nn::reshape(g, {n, K, h, h});
    }
    Tensor x = nn::relu(refine_[0](nn::concat({features, shape_maps}, 1)));
    for (std::size_t i = 1; i + 1 < refine_.size(); ++i) x = nn::relu(refine_[i](nn::upsample2x(x)));
    return nn::add_scalar(nn::scale(nn::tanh(refine_.back()(x)), 0.5), 0.5);
}

EncodedImage Derenderer::encode(const render::Frame& frame) const {
    const Encoding enc = encode_batch(to_tensor(std::span<const render::Frame>(&frame, 1)));
    EncodedImage out;
    out.features = enc.features;
    const int cw = cfg_.coefficient_width();
    for (int k = 0; k < cfg_.keypoints; ++k) {
        render::Keypoint kp;
        kp.position = {enc.keypoints[static_cast<std::size_t>(2 * k)], enc.keypoints[static_cast<std::size_t>(2 * k + 1)]};
        for (int j = 0; j < cw; ++j) kp.coefficients.push_back(enc.coefficients[static_cast<std::size_t>(k * cw + j)]);
        out.state.keypoints.push_back(std::move(kp));
    }
    return out;
}

render::Frame Derenderer::decode(const Tensor& source_features, const render::KeypointState& state) const {
    if (state.keypoints.size() != static_cast<std::size_t>(cfg_.keypoints))
        throw UsageError("decode: state has " + std::to_string(state.keypoints.size()) + " keypoints, model expects " +
                         std::to_string(cfg_.keypoints));
    const int cw = cfg_.coefficient_width();
    std::vector<double> kp, coef;
    for (const auto& k : state.keypoints) {
        if (k.coefficients.size() != static_cast<std::size_t>(cw)) throw UsageError("decode: coefficient width mismatch");
        kp.push_back(k.position.x);
        kp.push_back(k.position.y);
        coef.insert(coef.end(), k.coefficients.begin(), k.coefficients.end());
    }
    const Tensor kt = Tensor::from({cfg_.keypoints, 2}, std::move(kp));
    const Tensor ct = cw ? Tensor::from({cfg_.keypoints, cw}, std::move(coef)) : Tensor{};
    return to_frame(decode_batch(source_features, kt, ct), 0);
}

Tensor to_tensor(std::span<const render::Frame> frames) {
    if (frames.empty()) throw UsageError("to_tensor: no frames");
    const int h = frames[0].height, w = frames[0].width;
    const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    std::vector<double> v(frames.size() * 3 * plane);
    for (std::size_t n = 0; n < frames.size(); ++n) {
        if (frames[n].height != h || frames[n].width != w) throw UsageError("to_tensor: mixed frame sizes");
        for (std::size_t p = 0; p < plane; ++p)
            for (std::size_t c = 0; c < 3; ++c) v[(n * 3 + c) * plane + p] = frames[n].pixels[p * 3 + c];
    }
    return Tensor::from({static_cast<int>(frames.size()), 3, h, w}, std::move(v));
}

render::Frame to_frame(const Tensor& images, int index) {
    const int h = images.dim(2), w = images.dim(3);
    const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    render::Frame f(h, w);
    const std::size_t base = static_cast<std::size_t>(index) * 3 * plane;
    for (std::size_t p = 0; p < plane; ++p)
        for (std::size_t c = 0; c < 3; ++c) f.pixels[p * 3 + c] = images[base + c * plane + p];
    return f;
}

Tensor reconstruction_loss(const Tensor& pred, const Tensor& target, double gamma1, double gamma2) {
    Tensor loss = nn::scale(nn::mse(pred, target), gamma1);
    if (gamma2 == 0.0) return loss;
    const Tensor gx = nn::mse(nn::forward_diff(pred, 3), nn::forward_diff(target, 3));
    const Tensor gy = nn::mse(nn::forward_diff(pred, 2), nn::forward_diff(target, 2));
    return nn::add(loss, nn::scale(nn::add(gx, gy), gamma2));
}

std::size_t tail_length(std::size_t frames) { return frames / 6; }

FramePair sample_pair(std::size_t frames, std::mt19937_64& rng) {
    if (frames < 6) throw UsageError("sample_pair: trajectory needs at least 6 frames, has " + std::to_string(frames));
    const std::size_t tail = tail_length(frames);
    FramePair p;
    p.source = std::uniform_int_distribution<std::size_t>(0, frames - tail - 1)(rng);
    p.target = std::uniform_int_distribution<std::size_t>(frames - tail, frames - 1)(rng);
    return p;
}

FramePair eval_pair(std::size_t frames) {
    if (frames < 6) throw UsageError("eval_pair: trajectory needs at least 6 frames, has " + std::to_string(frames));
    return {frames / 6, frames / 3};
}

render::Frame cd_frame(const bench::Experiment& e, std::size_t index, int size) {
    if (index >= e.traj_cd.frame_count()) throw UsageError("cd_frame: index out of range");
    return render::rasterize(render::pose(e.scene_c, e.traj_cd.frames[index]), size, size);
}

std::pair<double, double> evaluate_reconstruction(const Derenderer& model, std::span<const bench::Experiment> heldout) {
    if (heldout.empty()) return {0.0, 0.0};
    nn::NoGradGuard ng;
    const int size = model.config().frame_size;
    const std::size_t chunk = static_cast<std::size_t>(model.config().batch);
    double rec = 0.0, copy = 0.0;
    for (std::size_t i0 = 0; i0 < heldout.size(); i0 += chunk) {
        const std::size_t n = std::min(chunk, heldout.size() - i0);
        std::vector<render::Frame> frames;  // sources then targets
        for (std::size_t i = 0; i < n; ++i) frames.push_back(cd_frame(heldout[i0 + i], eval_pair(heldout[i0 + i].traj_cd.frame_count()).source, size));
        for (std::size_t i = 0; i < n; ++i) frames.push_back(cd_frame(heldout[i0 + i], eval_pair(heldout[i0 + i].traj_cd.frame_count()).target, size));
        const Encoding enc = model.encode_batch(to_tensor(frames));
        const int ni = static_cast<int>(n), K = model.config().keypoints;
        const Tensor out = model.decode_batch(
            nn::slice(enc.features, 0, 0, ni), nn::slice(enc.keypoints, 0, ni * K, ni * K),
            enc.coefficients.defined() ? nn::slice(enc.coefficients, 0, ni * K, ni * K) : Tensor{});
        for (std::size_t i = 0; i < n; ++i) {
            rec += render::psnr(to_frame(out, static_cast<int>(i)), frames[n + i]);
            copy += render::psnr(frames[i], frames[n + i]);
        }
    }
    return {rec / static_cast<double>(heldout.size()), copy / static_cast<double>(heldout.size())};
}

TrainReport train_derender(Derenderer& model, std::span<const bench::Experiment> train,
                           std::span<const bench::Experiment> heldout) {
    if (train.empty()) throw UsageError("train_derender: empty training set");
    const DerenderConfig& cfg = model.config();
    std::mt19937_64 rng(bench::derive_seed(cfg.seed, 0x5EED));
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    nn::DivergenceGuard guard;
    TrainReport rep;
    const int B = cfg.batch, K = cfg.keypoints;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<render::Frame> frames(2 * static_cast<std::size_t>(B));
        for (std::size_t b = 0; b < static_cast<std::size_t>(B); ++b) {
            const auto& e = train[pick(rng)];
            const FramePair p = sample_pair(e.traj_cd.frame_count(), rng);
            frames[b] = cd_frame(e, p.source, cfg.frame_size);
            frames[static_cast<std::size_t>(B) + b] = cd_frame(e, p.target, cfg.frame_size);
        }
        const Tensor images = to_tensor(frames);
        model.params().zero_grad();
        const Encoding enc = model.encode_batch(images);
        const Tensor pred = model.decode_batch(
            nn::slice(enc.features, 0, 0, B), nn::slice(enc.keypoints, 0, B * K, B * K),
            enc.coefficients.defined() ? nn::slice(enc.coefficients, 0, B * K, B * K) : Tensor{});
        Tensor loss = reconstruction_loss(pred, nn::slice(images, 0, B, B), cfg.gamma1, cfg.gamma2);
        guard.observe(loss.item(), "derender");
        rep.losses.push_back(loss.item());
        loss.backward();
        model.params().adam_step(cfg.lr);
    }
    std::tie(rep.heldout_psnr, rep.copy_source_psnr) = evaluate_reconstruction(model, heldout);
    return rep;
}

StateSequence with_derivatives(std::vector<render::KeypointState> states) {
    StateSequence seq;
    seq.states = std::move(states);
    for (std::size_t t = 0; t < seq.states.size(); ++t) {
        render::KeypointState d = seq.states[t];
        for (std::size_t k = 0; k < d.keypoints.size(); ++k) {
            auto& kp = d.keypoints[k];
            if (t == 0) {
                kp.position = {};
                std::fill(kp.coefficients.begin(), kp.coefficients.end(), 0.0);
                continue;
            }
            const auto& prev = seq.states[t - 1].keypoints.at(k);
            kp.position = kp.position - prev.position;
            for (std::size_t j = 0; j < kp.coefficients.size(); ++j) kp.coefficients[j] -= prev.coefficients.at(j);
        }
        seq.derivatives.push_back(std::move(d));
    }
    return seq;
}

StateSequence encode_trajectory(const Derenderer& model, std::span<const render::Frame> frames) {
    nn::NoGradGuard ng;
    std::vector<render::KeypointState> states;
    states.reserve(frames.size());
    for (const auto& f : frames) states.push_back(model.encode(f).state);
    return with_derivatives(std::move(states));
}

void write_state_csv(const std::filesystem::path& path, const StateSequence& seq) {
    std::ofstream out(path);
    if (!out) throw IoError("state csv: cannot open " + path.string());
    const std::size_t cw = seq.states.empty() || seq.states[0].keypoints.empty()
                               ? 0
                               : seq.states[0].keypoints[0].coefficients.size();
    out << "t,kp,x,y";
    for (std::size_t j = 1; j <= cw; ++j) out << ",c" << j;
    out << ",dx,dy";
    for (std::size_t j = 1; j <= cw; ++j) out << ",dc" << j;
    out << '\n';
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, ",%.17g", v);
        out << buf;
    };
    for (std::size_t t = 0; t < seq.size(); ++t)
        for (std::size_t k = 0; k < seq.states[t].keypoints.size(); ++k) {
            const auto& s = seq.states[t].keypoints[k];
            const auto& d = seq.derivatives[t].keypoints[k];
            out << t << ',' << k;
            num(s.position.x);
            num(s.position.y);
            for (double c : s.coefficients) num(c);
            num(d.position.x);
            num(d.position.y);
            for (double c : d.coefficients) num(c);
            out << '\n';
        }
    if (!out) throw IoError("state csv: write failed");
}

StateSequence read_state_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("state csv: cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line.rfind("t,kp,x,y", 0) != 0) throw IoError("state csv: bad header");
    const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
    if (columns < 6 || (columns - 6) % 2 != 0) throw IoError("state csv: bad header");
    const std::size_t cw = (columns - 6) / 2;
    StateSequence seq;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::vector<double> v;
        std::string cell;
        while (std::getline(ls, cell, ',')) {
            try {
                v.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw IoError("state csv: bad number at line " + std::to_string(row));
            }
        }
        if (v.size() != columns) throw IoError("state csv: wrong column count at line " + std::to_string(row));
        const auto t = static_cast<std::size_t>(v[0]);
        const auto k = static_cast<std::size_t>(v[1]);
        if (t == seq.states.size()) {
            seq.states.emplace_back();
            seq.derivatives.emplace_back();
        }
        if (t + 1 != seq.states.size() || k != seq.states.back().keypoints.size())
            throw IoError("state csv: rows out of order at line " + std::to_string(row));
        render::Keypoint s, d;
        s.position = {v[2], v[3]};
        s.coefficients.assign(v.begin() + 4, v.begin() + 4 + static_cast<std::ptrdiff_t>(cw));
        d.position = {v[4 + cw], v[5 + cw]};
        d.coefficients.assign(v.begin() + 6 + static_cast<std::ptrdiff_t>(cw), v.end());
        seq.states.back().keypoints.push_back(std::move(s));
        seq.derivatives.back().keypoints.push_back(std::move(d));
    }
    return seq;
}

} // namespace cfphys::derender
