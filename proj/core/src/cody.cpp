// SPDX-License-Identifier: Apache-2.0
#include "cfphys/cody.hpp"

#include <algorithm>
#include <random>

#include "cfphys/error.hpp"

namespace cfphys::cody {

using nn::Tensor;

void CodyConfig::validate() const {
    auto need = [](bool ok, const char* field, const char* what) {
        if (!ok) throw UsageError(std::string("cody config: ") + field + " " + what);
    };
    need(d_u >= 1, "d_u", "must be >= 1");
    need(d_sigma >= 1, "d_sigma", "must be >= 1");
    for (int w : gn_hidden) need(w >= 1, "gn_hidden", "widths must be >= 1");
    need(gru_hidden >= 1, "gru_hidden", "must be >= 1");
    need(gru_layers >= 1, "gru_layers", "must be >= 1");
    need(gamma3 >= 0, "gamma3", "must be >= 0");
    need(lr > 0, "lr", "must be > 0");
    need(batch >= 1, "batch", "must be >= 1");
    need(steps >= 0, "steps", "must be >= 0");
    need(curriculum_start >= 0, "curriculum_start", "must be >= 0");
}

namespace {

std::vector<double> flatten(const render::KeypointState& s) {
    std::vector<double> row;
    for (const auto& k : s.keypoints) {
        row.push_back(k.position.x);
        row.push_back(k.position.y);
        row.insert(row.end(), k.coefficients.begin(), k.coefficients.end());
    }
    return row;
}

int state_width(const render::KeypointState& s) {
    return s.keypoints.empty() ? 0 : 2 + static_cast<int>(s.keypoints[0].coefficients.size());
}

// Runs one pipeline stage, prefixing any library error with the stage name
// while keeping its type.
template <class F>
auto stage(const char* name, F&& f) {
    const std::string prefix = std::string("predict_cd/") + name + ": ";
    try {
        return f();
    } catch (const UsageError& e) {
        throw UsageError(prefix + e.what());
    } catch (const NumericError& e) {
        throw NumericError(prefix + e.what());
    } catch (const PrereqError& e) {
        throw PrereqError(prefix + e.what());
    }
}

Tensor rows_tensor(const std::vector<const std::vector<double>*>& rows, int k, int width) {
    std::vector<double> v;
    v.reserve(rows.size() * static_cast<std::size_t>(k * width));
    for (const auto* r : rows) v.insert(v.end(), r->begin(), r->end());
    return Tensor::from({static_cast<int>(rows.size()) * k, width}, std::move(v));
}

} // namespace

Observation observe(const derender::StateSequence& ab, const render::KeypointState& c) {
    if (ab.size() < 2) throw UsageError("observe: AB needs at least 2 frames");
    Observation obs;
    obs.keypoints = static_cast<int>(c.keypoints.size());
    obs.width = state_width(c);
    for (std::size_t t = 0; t < ab.size(); ++t) {
        const auto& s = ab.states[t];
        const auto& d = ab.derivatives[t];
        if (s.keypoints.size() != c.keypoints.size() || state_width(s) != obs.width)
            throw UsageError("observe: AB and C states disagree in shape");
        std::vector<double> row;
        for (std::size_t k = 0; k < s.keypoints.size(); ++k) {
            const render::KeypointState one_s{{s.keypoints[k]}}, one_d{{d.keypoints[k]}};
            const auto fs = flatten(one_s), fd = flatten(one_d);
            row.insert(row.end(), fs.begin(), fs.end());
            row.insert(row.end(), fd.begin(), fd.end());
        }
        obs.ab.push_back(std::move(row));
    }
    obs.c = flatten(c);
    return obs;
}

Episode make_episode(const std::string& id, const derender::StateSequence& ab, const derender::StateSequence& cd) {
    if (cd.size() < 2) throw UsageError("make_episode: CD needs at least 2 frames");
    Episode e;
    e.id = id;
    e.obs = observe(ab, cd.states[0]);
    e.cd = flatten_states(cd.states);
    return e;
}

derender::StateSequence oracle_states(const sim::Scene& scene, const sim::Trajectory& traj, int keypoints, int c,
                                      const render::KeypointState* fallback) {
    std::vector<render::KeypointState> states;
    for (const auto& f : traj.frames)
        states.push_back(render::oracle_state(scene, f, static_cast<std::size_t>(keypoints), c, fallback));
    return derender::with_derivatives(std::move(states));
}

Episode oracle_episode(const bench::Experiment& e, int keypoints, int c) {
    const auto ab = oracle_states(e.scene_a, e.traj_ab, keypoints, c);
    const auto cd = oracle_states(e.scene_c, e.traj_cd, keypoints, c, &ab.states.at(0));
    return make_episode(e.id, ab, cd);
}

std::vector<std::vector<double>> flatten_states(const std::vector<render::KeypointState>& states) {
    std::vector<std::vector<double>> rows;
    rows.reserve(states.size());
    for (const auto& s : states) rows.push_back(flatten(s));
    return rows;
}

std::vector<render::KeypointState> unflatten_states(const std::vector<std::vector<double>>& rows, int keypoints,
                                                    int width) {
    std::vector<render::KeypointState> out;
    for (const auto& r : rows) {
        if (r.size() != static_cast<std::size_t>(keypoints * width)) throw UsageError("unflatten_states: row width");
        render::KeypointState s;
        for (int k = 0; k < keypoints; ++k) {
            const auto* p = r.data() + static_cast<std::ptrdiff_t>(k * width);
            s.keypoints.push_back(render::Keypoint{{p[0], p[1]}, std::vector<double>(p + 2, p + width)});
        }
        out.push_back(std::move(s));
    }
    return out;
}

Batch make_batch(std::span<const Observation* const> observations) {
    if (observations.empty()) throw UsageError("make_batch: no observations");
    const Observation& o0 = *observations[0];
    Batch b;
    for (const auto* o : observations)
        if (o->keypoints != o0.keypoints || o->width != o0.width || o->ab.size() != o0.ab.size())
            throw UsageError("make_batch: observations differ in shape or length");
    for (std::size_t t = 0; t < o0.ab.size(); ++t) {
        std::vector<const std::vector<double>*> rows;
        for (const auto* o : observations) rows.push_back(&o->ab[t]);
        b.ab.push_back(rows_tensor(rows, o0.keypoints, 2 * o0.width));
    }
    std::vector<const std::vector<double>*> rows;
    for (const auto* o : observations) rows.push_back(&o->c);
    b.c = rows_tensor(rows, o0.keypoints, o0.width);
    return b;
}

Batch make_batch(std::span<const Episode* const> episodes) {
    std::vector<const Observation*> obs;
    for (const auto* e : episodes) obs.push_back(&e->obs);
    Batch b = make_batch(obs);
    const auto frames = episodes[0]->cd.size();
    for (std::size_t t = 0; t < frames; ++t) {
        std::vector<const std::vector<double>*> rows;
        for (const auto* e : episodes) {
            if (e->cd.size() != frames) throw UsageError("make_batch: CD lengths differ");
            rows.push_back(&e->cd[t]);
        }
        b.cd.push_back(rows_tensor(rows, episodes[0]->obs.keypoints, episodes[0]->obs.width));
    }
    return b;
}

Cody::Cody(const CodyConfig& cfg, int keypoints, int width) : cfg_(cfg), k_(keypoints), width_(width), ps_(cfg.seed) {
    cfg_.validate();
    if (keypoints < 1 || width < 2) throw UsageError("cody: needs K >= 1 and state width >= 2");
    const int h = cfg_.gru_hidden, L = latent_width();
    cf_gn_ = nn::GraphNet(ps_, "cf.gn", 2 * width, h, cfg_.gn_hidden);
    cf_gru_ = nn::Gru(ps_, "cf.gru", h, cfg_.d_u, cfg_.gru_layers);
    if (cfg_.use_encoder) {
        enc_ = nn::GraphNet(ps_, "enc.gn", width, L, cfg_.gn_hidden);
        dec_gru_ = nn::Gru(ps_, "dec.gru", L, h, cfg_.gru_layers);
        dec_gn_ = nn::GraphNet(ps_, "dec.gn", h, width, cfg_.gn_hidden);
    }
    dyn_gn_ = nn::GraphNet(ps_, "dyn.gn", L + cfg_.d_u, h, cfg_.gn_hidden);
    dyn_gru_ = nn::Gru(ps_, "dyn.gru", h, h, cfg_.gru_layers);
    // Zero head: an untrained model keeps sigma constant over the rollout.
    head_ = nn::Linear(ps_, "dyn.head", h, L, nn::Init::zeros);
}

Tensor Cody::estimate_confounders(std::span<const Tensor> ab) const {
    if (ab.size() < 2) throw UsageError("estimate_confounders: AB needs at least 2 frames");
    const int rows = ab[0].dim(0);
    auto state = cf_gru_.zero_state(rows);
    Tensor u;
    for (const auto& x : ab) {
        if (x.rank() != 2 || x.dim(0) != rows || x.dim(1) != 2 * width_)
            throw UsageError("estimate_confounders: frame of shape " + nn::shape_str(x.shape()));
        u = cf_gru_.step(cf_gn_(x, k_), state);
    }
    return u;
}

Tensor Cody::encode_state(const Tensor& s) const {
    if (s.rank() != 2 || s.dim(1) != width_ || s.dim(0) % k_ != 0)
        throw UsageError("encode_state: expected [N * " + std::to_string(k_) + ", " + std::to_string(width_) + "], got " +
                         nn::shape_str(s.shape()));
    return cfg_.use_encoder ? enc_(s, k_) : s;
}

std::vector<Tensor> Cody::decode_states(std::span<const Tensor> sigma) const {
    if (!cfg_.use_encoder) return {sigma.begin(), sigma.end()};
    std::vector<Tensor> out;
    if (sigma.empty()) return out;
    auto state = dec_gru_.zero_state(sigma[0].dim(0));
    for (const auto& s : sigma) {
        if (s.rank() != 2 || s.dim(1) != latent_width()) throw UsageError("decode_states: latent width mismatch");
        out.push_back(dec_gn_(dec_gru_.step(s, state), k_));
    }
    return out;
}

std::vector<Tensor> Cody::rollout(const Tensor& sigma0, const Tensor& u, int steps) const {
    if (steps < 1) throw UsageError("rollout: steps must be >= 1");
    if (sigma0.dim(0) != u.dim(0)) throw UsageError("rollout: sigma and u disagree in rows");
    std::vector<Tensor> seq{sigma0};
    auto state = dyn_gru_.zero_state(sigma0.dim(0));
    for (int t = 0; t < steps; ++t) {
        const Tensor& s = seq.back();
        try {
            const Tensor v = dyn_gru_.step(dyn_gn_(nn::concat({s, u}, 1), k_), state);
            seq.push_back(nn::add(s, head_(v)));
        } catch (const NumericError& e) {
            throw NumericError("rollout step " + std::to_string(t + 1) + ": " + e.what());
        }
    }
    return seq;
}

std::vector<Tensor> Cody::predict(const Batch& batch, int frames) const {
    if (frames < 2) throw UsageError("predict: need at least 2 frames");
    const Tensor u = estimate_confounders(batch.ab);
    return decode_states(rollout(encode_state(batch.c), u, frames - 1));
}

std::vector<std::vector<double>> Cody::predict(const Observation& obs, int frames) const {
    if (obs.keypoints != k_ || obs.width != width_) throw UsageError("predict: observation shape does not match model");
    nn::NoGradGuard ng;
    const Observation* p = &obs;
    const auto seq = predict(make_batch(std::span<const Observation* const>(&p, 1)), frames);
    std::vector<std::vector<double>> rows;
    for (const auto& s : seq) rows.push_back(s.data());
    return rows;
}

Tensor cody_loss(const Cody& model, const Batch& batch, int frames) {
    const auto pred = model.predict(batch, frames);
    Tensor loss;
    for (int t = 0; t < frames; ++t) {
        const Tensor e = nn::mse(pred[static_cast<std::size_t>(t)], batch.cd[static_cast<std::size_t>(t)]);
        loss = loss.defined() ? nn::add(loss, e) : e;
    }
    loss = nn::scale(loss, 1.0 / frames);
    if (!model.config().use_encoder || model.config().gamma3 == 0.0) return loss;
    std::vector<Tensor> sig;
    for (int t = 0; t < frames; ++t) sig.push_back(model.encode_state(batch.cd[static_cast<std::size_t>(t)]));
    const auto rec = model.decode_states(sig);
    Tensor ae;
    for (int t = 0; t < frames; ++t) {
        const Tensor e = nn::mse(rec[static_cast<std::size_t>(t)], batch.cd[static_cast<std::size_t>(t)]);
        ae = ae.defined() ? nn::add(ae, e) : e;
    }
    return nn::add(loss, nn::scale(ae, model.config().gamma3 / frames));
}

TrainReport train_cody(Cody& model, std::span<const Episode> train) {
    if (train.empty()) throw UsageError("train_cody: empty training set");
    const CodyConfig& cfg = model.config();
    std::mt19937_64 rng(bench::derive_seed(cfg.seed, 0xC0DE));
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    const int full = static_cast<int>(train[0].cd.size());
    nn::DivergenceGuard guard;
    TrainReport rep;
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<const Episode*> eps;
        for (int b = 0; b < cfg.batch; ++b) eps.push_back(&train[pick(rng)]);
        int frames = full;
        if (cfg.curriculum_start > 0)
            frames = std::min(full, cfg.curriculum_start + (full - cfg.curriculum_start) * step / std::max(1, cfg.steps - 1));
        frames = std::max(frames, 2);
        const Batch batch = make_batch(eps);
        model.params().zero_grad();
        Tensor loss = cody_loss(model, batch, frames);
        guard.observe(loss.item(), "cody");
        if (step == 0) rep.initial_loss = loss.item();
        rep.losses.push_back(loss.item());
        loss.backward();
        model.params().adam_step(cfg.lr);
    }
    return rep;
}

double sequence_mse(const std::vector<std::vector<double>>& pred, const std::vector<std::vector<double>>& truth) {
    if (pred.size() != truth.size() || truth.size() < 2) throw UsageError("sequence_mse: length mismatch");
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 1; t < truth.size(); ++t) {
        if (pred[t].size() != truth[t].size()) throw UsageError("sequence_mse: width mismatch");
        for (std::size_t i = 0; i < truth[t].size(); ++i) {
            const double d = pred[t][i] - truth[t][i];
            s += d * d;
        }
        n += truth[t].size();
    }
    return s / static_cast<double>(n);
}

double keypoint_mse(const Cody& model, std::span<const Episode> episodes) {
    if (episodes.empty()) return 0.0;
    nn::NoGradGuard ng;
    double total = 0.0;
    const auto chunk = static_cast<std::size_t>(model.config().batch);
    for (std::size_t i0 = 0; i0 < episodes.size(); i0 += chunk) {
        std::vector<const Episode*> eps;
        for (std::size_t i = i0; i < std::min(episodes.size(), i0 + chunk); ++i) eps.push_back(&episodes[i]);
        const auto frames = static_cast<int>(eps[0]->cd.size());
        const auto pred = model.predict(make_batch(eps), frames);
        const auto row = static_cast<std::size_t>(model.keypoints() * model.width());
        for (std::size_t b = 0; b < eps.size(); ++b) {
            std::vector<std::vector<double>> p;
            for (const auto& s : pred)
                p.emplace_back(s.data().begin() + static_cast<std::ptrdiff_t>(b * row),
                               s.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * row));
            total += sequence_mse(p, eps[b]->cd);
        }
    }
    return total / static_cast<double>(episodes.size());
}

ExperimentFrames render_frames(const bench::Experiment& e, int size) {
    return {render::rasterize_trajectory(e.scene_a, e.traj_ab, size, size),
            render::rasterize_trajectory(e.scene_c, e.traj_cd, size, size)};
}

Prediction predict_cd(const ExperimentFrames& frames, const derender::Derenderer& encoder, const Cody& model) {
    if (frames.ab.size() < 2 || frames.cd.empty()) throw UsageError("predict_cd: need AB frames and the C frame");
    nn::NoGradGuard ng;
    Prediction out;
    const auto ab = stage("encode", [&] {
        std::vector<render::KeypointState> states;
        for (std::size_t t = 0; t < frames.ab.size(); ++t) {
            out.trace.push_back("ab:" + std::to_string(t));
            states.push_back(encoder.encode(frames.ab[t]).state);
        }
        return derender::with_derivatives(std::move(states));
    });
    const auto c = stage("encode", [&] {
        out.trace.push_back("cd:0");
        return encoder.encode(frames.cd[0]);
    });
    const auto rows =
        stage("dynamics", [&] { return model.predict(observe(ab, c.state), static_cast<int>(frames.ab.size())); });
    out.states = unflatten_states(rows, model.keypoints(), model.width());
    stage("decode", [&] {
        for (const auto& s : out.states) out.frames.push_back(encoder.decode(c.features, s));
        return 0;
    });
    return out;
}

std::vector<AblationRow> ablate(std::span<const Variant> variants, std::span<const Episode> train,
                                std::span<const Episode> test) {
    if (train.empty()) throw UsageError("ablate: empty training set");
    std::vector<AblationRow> rows;
    for (const auto& v : variants) {
        Cody model(v.config, train[0].obs.keypoints, train[0].obs.width);
        const auto rep = train_cody(model, train);
        rows.push_back({v.name, keypoint_mse(model, test), rep.losses.empty() ? 0.0 : rep.losses.back()});
    }
    return rows;
}

} // namespace cfphys::cody
