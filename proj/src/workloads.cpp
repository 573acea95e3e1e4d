// SPDX-License-Identifier: Apache-2.0

#include "clora/workloads.hpp"

#include <cmath>
#include <fmt/format.h>
#include <numbers>

#include "clora/attention.hpp"
#include "clora/rng.hpp"

namespace clora::work {

// ---------------------------------------------------------------- concepts

std::array<double, 2> ConceptTask::mean() const {
    std::array<double, 2> m{};
    for (const auto& c : mixture) {
        m[0] += c.weight * c.mean[0];
        m[1] += c.weight * c.mean[1];
    }
    return m;
}

void validate(const ConceptTask& task) {
    if (task.mixture.empty()) {
        throw std::invalid_argument(fmt::format("concept {}: empty mixture", task.task_id));
    }
    double total = 0.0;
    for (const auto& c : task.mixture) {
        if (c.weight < 0.0) {
            throw std::invalid_argument(fmt::format("concept {}: negative weight", task.task_id));
        }
        total += c.weight;
        const auto& s = c.cov;
        if (s.rows() != 2 || s.cols() != 2 || s(0, 1) != s(1, 0) || !(s(0, 0) > 0.0) ||
            !(s(0, 0) * s(1, 1) - s(0, 1) * s(1, 0) > 0.0)) {
            throw std::invalid_argument(fmt::format("concept {}: covariance is not SPD", task.task_id));
        }
    }
    if (std::fabs(total - 1.0) > 1e-12) {
        throw std::invalid_argument(fmt::format("concept {}: weights sum to {}", task.task_id, total));
    }
}

ConceptTask make_concept_task(int task_id, std::uint64_t seed, std::size_t n_train) {
    Rng rng(seed);
    ConceptTask task;
    task.task_id = task_id;
    task.seed = seed;
    task.n_train = n_train;
    const auto k = static_cast<std::size_t>(rng.uniform_int(2, 3));
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        MixtureComponent c;
        c.mean = {rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0)};
        c.cov = num::scale(Matrix::identity(2), 0.2);
        c.weight = rng.uniform(0.5, 1.5);
        total += c.weight;
        task.mixture.push_back(std::move(c));
    }
    for (auto& c : task.mixture) {
        c.weight /= total;
    }
    // Renormalise so the weights sum to exactly 1 in floating point.
    double head = 0.0;
    for (std::size_t i = 0; i + 1 < k; ++i) {
        head += task.mixture[i].weight;
    }
    task.mixture.back().weight = 1.0 - head;
    return task;
}

ConceptTask standard_normal_task(int task_id) {
    ConceptTask task;
    task.task_id = task_id;
    task.mixture.push_back({{0.0, 0.0}, Matrix::identity(2), 1.0});
    return task;
}

Matrix sample_concept(const ConceptTask& task, std::size_t n, std::uint64_t seed) {
    if (n == 0) {
        throw std::invalid_argument("sample_concept: n must be >= 1");
    }
    // Cholesky factors of each 2×2 covariance.
    struct Chol {
        double l00, l10, l11;
    };
    std::vector<Chol> chol;
    for (const auto& c : task.mixture) {
        const double l00 = std::sqrt(c.cov(0, 0));
        const double l10 = c.cov(1, 0) / l00;
        const double l11 = std::sqrt(c.cov(1, 1) - l10 * l10);
        chol.push_back({l00, l10, l11});
    }
    Rng rng(seed);
    Matrix out(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
        const double pick = rng.uniform();
        std::size_t k = 0;
        double cum = task.mixture[0].weight;
        while (pick >= cum && k + 1 < task.mixture.size()) {
            ++k;
            cum += task.mixture[k].weight;
        }
        const double z0 = rng.normal();
        const double z1 = rng.normal();
        const auto& c = task.mixture[k];
        out(i, 0) = c.mean[0] + chol[k].l00 * z0;
        out(i, 1) = c.mean[1] + chol[k].l10 * z0 + chol[k].l11 * z1;
    }
    return out;
}

// ------------------------------------------------------------------ tokens

TokenTable::TokenTable(std::size_t d_c, std::uint64_t object_seed) : d_c_(d_c) {
    Rng rng(object_seed);
    embeddings_.emplace(kObjectId, rng.normal_matrix(1, d_c, kRandomStd));
}

void TokenTable::init_concept_token(int id, std::uint64_t seed, TokenInit strategy) {
    if (embeddings_.contains(id)) {
        throw TokenError(fmt::format("token {} is already initialized", id));
    }
    Rng rng(seed);
    if (strategy == TokenInit::Random) {
        embeddings_.emplace(id, rng.normal_matrix(1, d_c_, kRandomStd));
        return;
    }
    Matrix e = embedding(kObjectId);
    const double jitter = std::sqrt(kWordJitterVar);
    for (double& v : e.data()) {
        v += rng.normal(0.0, jitter);
    }
    embeddings_.emplace(id, std::move(e));
}

Matrix TokenTable::compose_condition(int id, bool include_object) const {
    const Matrix& token = embedding(id);
    if (!include_object) {
        return token;
    }
    const std::array<Matrix, 2> rows{token, embedding(kObjectId)};
    return num::concat_rows(rows);
}

const Matrix& TokenTable::embedding(int id) const {
    auto it = embeddings_.find(id);
    if (it == embeddings_.end()) {
        throw TokenError(fmt::format("token {} is not initialized", id));
    }
    return it->second;
}

Matrix& TokenTable::embedding_mut(int id) {
    if (frozen(id)) {
        throw TokenError(fmt::format("token {} is frozen", id));
    }
    auto it = embeddings_.find(id);
    if (it == embeddings_.end()) {
        throw TokenError(fmt::format("token {} is not initialized", id));
    }
    return it->second;
}

void TokenTable::freeze(int id) {
    (void)embedding(id);
    frozen_[id] = true;
}

// --------------------------------------------------------------- diffusion

DiffusionSchedule linear_schedule(std::size_t steps, double beta_start, double beta_end) {
    if (steps == 0) {
        throw std::invalid_argument("linear_schedule: steps must be >= 1");
    }
    if (!(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0)) {
        throw std::invalid_argument("linear_schedule: betas must lie in (0, 1)");
    }
    DiffusionSchedule s;
    double cum = 1.0;
    for (std::size_t i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
        const double beta = beta_start + (beta_end - beta_start) * frac;
        s.betas.push_back(beta);
        s.alphas.push_back(1.0 - beta);
        cum *= 1.0 - beta;
        s.alpha_bars.push_back(cum);
    }
    return s;
}

Matrix timestep_embedding(std::span<const int> steps, std::size_t total_steps, std::size_t dim) {
    const std::size_t half = dim / 2;
    Matrix out(steps.size(), dim);
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const double pos = static_cast<double>(steps[i]) / static_cast<double>(total_steps) * 100.0;
        for (std::size_t k = 0; k < half; ++k) {
            const double freq = std::exp(-std::log(100.0) * static_cast<double>(k) / static_cast<double>(half));
            out(i, k) = std::sin(pos * freq);
            out(i, half + k) = std::cos(pos * freq);
        }
    }
    return out;
}

Var diffusion_loss(Tape& tape, const EpsPredictor& model, const DiffusionSchedule& schedule, const Matrix& batch,
                   Var cond, std::uint64_t seed) {
    if (batch.cols() != 2) {
        throw num::ShapeError(fmt::format("diffusion_loss: batch rows must be 2-vectors, got {}", batch.shape_str()));
    }
    Rng rng(seed);
    const std::size_t n = batch.rows();
    std::vector<int> steps(n);
    Matrix eps(n, 2);
    Matrix noisy(n, 2);
    const auto t_max = static_cast<std::int64_t>(schedule.steps());
    for (std::size_t i = 0; i < n; ++i) {
        steps[i] = static_cast<int>(rng.uniform_int(1, t_max));
        const double ab = schedule.alpha_bar(steps[i]);
        for (std::size_t j = 0; j < 2; ++j) {
            eps(i, j) = rng.normal();
            noisy(i, j) = std::sqrt(ab) * batch(i, j) + std::sqrt(1.0 - ab) * eps(i, j);
        }
    }
    const Var pred = model(tape, tape.constant(std::move(noisy)), steps, cond);
    const Var err = tape.sub(pred, tape.constant(std::move(eps)));
    return tape.scale(tape.frobenius_sq(err), 1.0 / static_cast<double>(2 * n));
}

Matrix ddpm_sample(const EpsPredictor& model, const DiffusionSchedule& schedule, const Matrix& cond, std::size_t n,
                   std::uint64_t seed) {
    Rng rng(seed);
    Matrix x = rng.normal_matrix(n, 2);
    std::vector<int> steps(n);
    for (auto u = static_cast<int>(schedule.steps()); u >= 1; --u) {
        std::ranges::fill(steps, u);
        Tape tape;
        const Var eps = model(tape, tape.constant(x), steps, tape.constant(cond));
        const Matrix& e = tape.value(eps);
        const auto idx = static_cast<std::size_t>(u - 1);
        const double beta = schedule.betas[idx];
        const double coef = beta / std::sqrt(1.0 - schedule.alpha_bars[idx]);
        const double inv_sqrt_alpha = 1.0 / std::sqrt(schedule.alphas[idx]);
        const double sigma = std::sqrt(beta);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < 2; ++j) {
                double v = inv_sqrt_alpha * (x(i, j) - coef * e(i, j));
                if (u > 1) {
                    v += sigma * rng.normal();
                }
                x(i, j) = v;
            }
        }
    }
    return x;
}

ParamMap init_denoiser(const DenoiserDims& dims, std::uint64_t seed) {
    Rng rng(seed);
    auto dense = [&](std::size_t in, std::size_t out) {
        return rng.normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)));
    };
    ParamMap p;
    p["w1"] = dense(2 + dims.temb, dims.hidden);
    p["b1"] = Matrix::zeros(1, dims.hidden);
    p["w2"] = dense(dims.hidden, dims.d_f);
    p["b2"] = Matrix::zeros(1, dims.d_f);
    p["wq"] = dense(dims.d_f, dims.d_f);
    p["wk"] = dense(dims.d_c, dims.d_f);
    p["wv"] = dense(dims.d_c, dims.d_f);
    p["w3"] = dense(dims.d_f, dims.hidden);
    p["b3"] = Matrix::zeros(1, dims.hidden);
    p["w4"] = dense(dims.hidden, 2);
    p["b4"] = Matrix::zeros(1, 2);
    return p;
}

DenoiserVars bind_denoiser_constants(Tape& tape, const ParamMap& p) {
    auto c = [&](const char* name) { return tape.constant(p.at(name)); };
    return {c("w1"), c("b1"), c("w2"), c("b2"), c("wq"), c("wk"), c("wv"), c("w3"), c("b3"), c("w4"), c("b4")};
}

Var denoiser_forward(Tape& tape, const DenoiserVars& w, Var x_t, std::span<const int> steps, std::size_t total_steps,
                     std::size_t temb_dim, Var cond) {
    const Var temb = tape.constant(timestep_embedding(steps, total_steps, temb_dim));
    const std::array<Var, 2> parts{x_t, temb};
    const Var in = tape.concat_cols(parts);
    const Var h1 = tape.silu(tape.add_row(tape.matmul(in, w.w1), w.b1));
    const Var f = tape.add_row(tape.matmul(h1, w.w2), w.b2);
    const Var a = attn::attention(tape, f, cond, w.wq, w.wk, w.wv);
    const Var h = tape.add(f, a);
    const Var h3 = tape.silu(tape.add_row(tape.matmul(h, w.w3), w.b3));
    return tape.add_row(tape.matmul(h3, w.w4), w.b4);
}

// ---------------------------------------------------------- classification

std::vector<ClassTask> make_classification_tasks(const ClassTaskSpec& spec, std::uint64_t seed) {
    if (spec.n_tasks < 2) {
        throw std::invalid_argument("make_classification_tasks: need at least 2 tasks");
    }
    Rng rng(seed);
    std::vector<ClassTask> tasks;
    int next_class = spec.first_class;
    for (std::size_t t = 0; t < spec.n_tasks; ++t) {
        ClassTask task;
        task.task_id = static_cast<int>(t) + 1;
        std::vector<Matrix> train_parts;
        std::vector<Matrix> test_parts;
        for (std::size_t k = 0; k < spec.classes_per_task; ++k) {
            const int cls = next_class++;
            task.classes.push_back(cls);
            Matrix mean = rng.normal_matrix(1, spec.dim);
            const double norm = std::sqrt(num::frobenius_sq(mean));
            mean = num::scale(mean, spec.radius / norm);
            auto draw = [&](std::size_t n) {
                Matrix x = rng.normal_matrix(n, spec.dim);
                for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t j = 0; j < spec.dim; ++j) {
                        x(i, j) += mean(0, j);
                    }
                }
                return x;
            };
            train_parts.push_back(draw(spec.n_train_per_class));
            task.y_train.insert(task.y_train.end(), spec.n_train_per_class, cls);
            test_parts.push_back(draw(spec.n_test_per_class));
            task.y_test.insert(task.y_test.end(), spec.n_test_per_class, cls);
        }
        task.x_train = num::concat_rows(train_parts);
        task.x_test = num::concat_rows(test_parts);
        tasks.push_back(std::move(task));
    }
    return tasks;
}

ParamMap init_classifier(const ClassifierDims& dims, std::uint64_t seed) {
    if (dims.input % dims.chunks != 0) {
        throw num::ShapeError(fmt::format("classifier: input {} not divisible into {} chunks", dims.input, dims.chunks));
    }
    Rng rng(seed);
    const std::size_t chunk = dims.input / dims.chunks;
    auto dense = [&](std::size_t in, std::size_t out) {
        return rng.normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)));
    };
    ParamMap p;
    p["proj"] = dense(dims.input, dims.input);
    for (std::size_t k = 0; k < dims.chunks; ++k) {
        p[fmt::format("embed{}", k)] = dense(chunk, dims.d_model);
    }
    p["wq"] = dense(dims.d_model, dims.d_model);
    p["wk"] = dense(dims.d_model, dims.d_model);
    p["wv"] = dense(dims.d_model, dims.d_model);
    return p;
}

ClassifierVars bind_classifier_constants(Tape& tape, const ParamMap& params, std::size_t chunks) {
    ClassifierVars v;
    v.proj = tape.constant(params.at("proj"));
    for (std::size_t k = 0; k < chunks; ++k) {
        v.embed.push_back(tape.constant(params.at(fmt::format("embed{}", k))));
    }
    v.wq = tape.constant(params.at("wq"));
    v.wk = tape.constant(params.at("wk"));
    v.wv = tape.constant(params.at("wv"));
    return v;
}

Matrix block_mask(std::size_t batch, std::size_t block) {
    constexpr double kBlocked = -1e9;
    const std::size_t n = batch * block;
    Matrix m(n, n, kBlocked);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < block; ++i) {
            for (std::size_t j = 0; j < block; ++j) {
                m(b * block + i, b * block + j) = 0.0;
            }
        }
    }
    return m;
}

Var classifier_features(Tape& tape, const ClassifierVars& w, Var x, const ClassifierDims& dims) {
    const std::size_t batch = tape.value(x).rows();
    const std::size_t chunk = dims.input / dims.chunks;
    const Var z = tape.matmul(x, w.proj);
    std::vector<Var> tokens;
    tokens.reserve(dims.chunks);
    for (std::size_t k = 0; k < dims.chunks; ++k) {
        tokens.push_back(tape.matmul(tape.slice_cols(z, k * chunk, chunk), w.embed[k]));
    }
    // Row b*chunks + k holds chunk k of sample b.
    const Var seq = tape.reshape(tape.concat_cols(tokens), batch * dims.chunks, dims.d_model);

    thread_local std::map<std::size_t, Matrix> masks;
    auto it = masks.find(batch);
    if (it == masks.end()) {
        it = masks.emplace(batch, block_mask(batch, dims.chunks)).first;
    }
    const Var att = attn::attention(tape, seq, seq, w.wq, w.wk, w.wv, &it->second);
    const Var mixed = tape.add(seq, att);
    const Var wide = tape.reshape(mixed, batch, dims.chunks * tape.value(att).cols());
    const std::size_t width = tape.value(att).cols();
    Var pooled = tape.slice_cols(wide, 0, width);
    for (std::size_t k = 1; k < dims.chunks; ++k) {
        pooled = tape.add(pooled, tape.slice_cols(wide, k * width, width));
    }
    return tape.scale(pooled, 1.0 / static_cast<double>(dims.chunks));
}

}  // namespace clora::work
