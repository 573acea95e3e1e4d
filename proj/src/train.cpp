// SPDX-License-Identifier: Apache-2.0

#include "clora/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fmt/format.h>
#include <mutex>
#include <numeric>
#include <thread>

#include "clora/attention.hpp"
#include "clora/checkpoint.hpp"

namespace clora::train {

NonFiniteLoss::NonFiniteLoss(int task_, std::size_t step_, double loss_, double grad_norm_)
    : std::runtime_error(fmt::format("non-finite loss at task {} step {}: loss={} grad_norm={}", task_, step_, loss_,
                                     grad_norm_)),
      task(task_), step(step_), loss(loss_), grad_norm(grad_norm_) {}

// ------------------------------------------------------------------- Adam

void Adam::step(const std::string& key, Matrix& param, const Matrix& grad) {
    auto& s = state_[key];
    if (s.m.empty()) {
        s.m = Matrix::zeros(param.rows(), param.cols());
        s.v = Matrix::zeros(param.rows(), param.cols());
    }
    if (!grad.same_shape(param)) {
        throw num::ShapeError(fmt::format("adam {}: grad {} vs param {}", key, grad.shape_str(), param.shape_str()));
    }
    ++s.t;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
    auto p = param.data();
    auto g = grad.data();
    auto m = s.m.data();
    auto v = s.v.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
}

// -------------------------------------------------------------------- EWC

double EwcState::penalty_value(const ParamMap& params) const {
    double acc = 0.0;
    for (const auto& [name, f] : fisher) {
        const Matrix d = num::sub(params.at(name), anchor.at(name));
        acc += num::sum(num::hadamard(f, num::hadamard(d, d)));
    }
    return acc;
}

Var EwcState::penalty(Tape& tape, const std::map<std::string, Var>& vars) const {
    Var total = tape.scalar(0.0);
    for (const auto& [name, f] : fisher) {
        auto it = vars.find(name);
        if (it == vars.end()) {
            continue;
        }
        const Var d = tape.sub(it->second, tape.constant(anchor.at(name)));
        total = tape.add(total, tape.sum(tape.hadamard(tape.constant(f), tape.hadamard(d, d))));
    }
    return total;
}

void ewc_prepare(EwcState& state, std::span<const ParamMap> batch_grads, const ParamMap& params) {
    if (batch_grads.empty()) {
        throw std::invalid_argument("ewc_prepare: no gradient batches");
    }
    const double inv = 1.0 / static_cast<double>(batch_grads.size());
    for (const auto& [name, first] : batch_grads.front()) {
        Matrix mean_sq = Matrix::zeros(first.rows(), first.cols());
        for (const auto& grads : batch_grads) {
            const Matrix& g = grads.at(name);
            num::axpy_inplace(mean_sq, inv, num::hadamard(g, g));
        }
        auto it = state.fisher.find(name);
        if (it == state.fisher.end()) {
            state.fisher.emplace(name, std::move(mean_sq));
        } else {
            num::add_inplace(it->second, mean_sq);
        }
        state.anchor[name] = params.at(name);
    }
}

// ----------------------------------------------------------------- replay

std::size_t ReplayBatch::replay_rows() const {
    std::size_t n = 0;
    for (const auto& [id, rows] : replay) {
        n += rows.rows();
    }
    return n;
}

namespace {

Matrix draw_rows(const Matrix& pool, std::size_t n, Rng& rng) {
    Matrix out(n, pool.cols());
    const auto last = static_cast<std::int64_t>(pool.rows()) - 1;
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = static_cast<std::size_t>(rng.uniform_int(0, last));
        std::ranges::copy(pool.row(r), out.row(i).begin());
    }
    return out;
}

}  // namespace

ReplayBatch gen_replay_step(const Matrix& fresh_pool, const std::map<int, Matrix>& pools, std::size_t batch,
                            double mix_ratio, Rng& rng) {
    if (!(mix_ratio >= 0.0 && mix_ratio <= 1.0)) {
        throw std::invalid_argument("gen_replay_step: mix_ratio must lie in [0, 1]");
    }
    std::size_t n_replay = pools.empty() ? 0 : static_cast<std::size_t>(std::floor(mix_ratio * static_cast<double>(batch)));
    ReplayBatch out;
    out.fresh = draw_rows(fresh_pool, batch - n_replay, rng);
    if (n_replay == 0) {
        return out;
    }
    const std::size_t groups = pools.size();
    std::size_t g = 0;
    for (const auto& [id, pool] : pools) {
        const std::size_t rows = n_replay / groups + (g < n_replay % groups ? 1 : 0);
        if (rows > 0) {
            out.replay.emplace_back(id, draw_rows(pool, rows, rng));
        }
        ++g;
    }
    return out;
}

// ------------------------------------------------------------ shared bits

namespace {

constexpr std::size_t kLossWindow = 100;
constexpr std::size_t kReplayPool = 256;
constexpr std::size_t kPretrainPool = 512;

// Which dense tensors become trainable leaves: none, the adapted attention
// projections, or the whole backbone.
enum class Dense { None, Sites, All };

std::uint64_t step_key(std::size_t task, std::size_t step) { return (static_cast<std::uint64_t>(task) << 24) + step; }

double grad_norm(const num::Gradients& g, std::span<const Var> vars) {
    double acc = 0.0;
    for (Var v : vars) {
        acc += num::frobenius_sq(g.of(v));
    }
    return std::sqrt(acc);
}

double window_mean(const std::vector<double>& losses) {
    const std::size_t n = std::min(kLossWindow, losses.size());
    if (n == 0) {
        return 0.0;
    }
    return std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(n), losses.end(), 0.0) / static_cast<double>(n);
}

std::size_t param_count(const ParamMap& p) {
    std::size_t n = 0;
    for (const auto& [name, m] : p) {
        n += m.size();
    }
    return n;
}

Json token_json(int id, const Matrix& e) {
    return {{"id", id}, {"embedding", std::vector<double>(e.data().begin(), e.data().end())}};
}

Json delta_json(const std::string& site, const Matrix& d) {
    Json j = lora::matrix_to_json(d);
    j["site"] = site;
    return j;
}

// Bookkeeping shared by both workloads.
class RunBase {
public:
    RunBase(const ExperimentConfig& cfg, const LogSink& sink) : cfg_(cfg), sink_(sink) { art_.config = cfg; }

protected:
    void log(const std::string& line) {
        art_.log_lines.push_back(line);
        if (sink_) {
            sink_(line);
        }
    }

    void log_step(const StepLog& s) {
        art_.steps.push_back(s);
        log(fmt::format("task={} step={} loss={:.6e} penalty={:.6e} grad_norm={:.6e}", s.task, s.step, s.loss,
                        s.penalty, s.grad_norm));
    }

    [[nodiscard]] Dense dense_mode() const {
        if (trains_full_backbone(cfg_.method)) return Dense::All;
        return trains_backbone(cfg_.method) ? Dense::Sites : Dense::None;
    }

    [[nodiscard]] bool should_log(std::size_t step) const {
        return step % cfg_.log_every == 0 || step + 1 == cfg_.steps_per_task;
    }

    [[nodiscard]] std::uint64_t seed(std::string_view stage, std::uint64_t index = 0) const {
        return derive_seed(cfg_.seed, stage, index);
    }

    void check_finite(int task, std::size_t step, double loss, double norm) const {
        if (!std::isfinite(loss) || !std::isfinite(norm)) {
            throw NonFiniteLoss(task, step, loss, norm);
        }
    }

    void record_storage(std::span<const lora::AdapterStack> stacks, std::size_t backbone_params, int task) {
        if (!uses_adapters(cfg_.method)) {
            return;
        }
        const auto plan = lora::storage_plan(stacks, backbone_params);
        art_.storage.push_back(plan);
        log(fmt::format("storage task={} per_task={} full_delta={} stored={}", task, plan.per_task_params,
                        plan.full_delta_params, plan.stored_params));
    }

    // Percentages of the backbone parameter count; storage counts the backbone
    // itself as 100 plus whatever a method keeps beyond it.
    void fill_common_report(std::size_t backbone_params, std::size_t site_params) {
        auto& r = art_.report;
        r.method = to_string(cfg_.method);
        r.seed = cfg_.seed;
        r.workload = to_string(cfg_.workload);
        r.config_hash = config_hash(cfg_);
        r.interference = metrics::interference_stats(art_.deltas);
        r.interference_magnitude = metrics::mean_interference_magnitude(r.interference);
        const double sites = 100.0 * static_cast<double>(site_params) / static_cast<double>(backbone_params);
        r.n_param_train_pct = 0.0;
        r.n_param_store_pct = 100.0;
        if (uses_adapters(cfg_.method) && !art_.storage.empty()) {
            const auto& plan = art_.storage.back();
            r.n_param_train_pct = 100.0 * plan.trained_fraction;
            r.n_param_store_pct = 100.0 + 100.0 * plan.stored_fraction;
        } else if (trains_full_backbone(cfg_.method)) {
            r.n_param_train_pct = 100.0;
        } else if (trains_backbone(cfg_.method)) {
            r.n_param_train_pct = sites;
            if (cfg_.method == Method::Ewc) {
                r.n_param_store_pct += sites;  // anchor copy
            }
        }
    }

    const ExperimentConfig& cfg_;
    LogSink sink_;
    RunArtifacts art_;
};

// ------------------------------------------------------------- diffusion

class DiffusionRun : RunBase {
public:
    DiffusionRun(const ExperimentConfig& cfg, const LogSink& sink) : RunBase(cfg, sink) {
        const auto& d = cfg.diffusion;
        dims_ = {d.d_f, d.d_c, d.hidden, 16};
        sched_ = work::linear_schedule(d.timesteps, d.beta_start, d.beta_end);
    }

    RunArtifacts run() {
        pretrain();
        for (std::size_t t = 1; t <= cfg_.n_tasks; ++t) {
            train_task(t);
        }
        evaluate();
        if (adapters()) {
            art_.stacks = {k_, v_};
        }
        return std::move(art_);
    }

private:
    struct Bound {
        work::DenoiserVars w;
        std::map<std::string, Var> leaves;
        std::optional<lora::ActiveVars> k_act;
        std::optional<lora::ActiveVars> v_act;
    };

    [[nodiscard]] bool adapters() const { return uses_adapters(cfg_.method); }
    Bound bind(Tape& tape, Dense dense, bool train_adapters) const {
        Bound b;
        auto get = [&](const char* name, bool site = false) {
            if (dense == Dense::All || (dense == Dense::Sites && site)) {
                const Var v = tape.leaf(backbone_.at(name));
                b.leaves.emplace(name, v);
                return v;
            }
            return tape.constant(backbone_.at(name));
        };
        b.w = {get("w1"), get("b1"), get("w2"), get("b2"), get("wq"), {}, {}, get("w3"), get("b3"), get("w4"),
               get("b4")};
        if (adapters() && stacks_ready_) {
            if (k_.has_active()) {
                b.k_act = k_.bind_active(tape, train_adapters);
                b.v_act = v_.bind_active(tape, train_adapters);
            }
            b.w.wk = k_.effective_weight(tape, b.k_act);
            b.w.wv = v_.effective_weight(tape, b.v_act);
        } else {
            b.w.wk = get("wk", true);
            b.w.wv = get("wv", true);
        }
        return b;
    }

    [[nodiscard]] work::EpsPredictor predictor_for(const work::DenoiserVars& w) const {
        const std::size_t total = sched_.steps();
        const std::size_t temb = dims_.temb;
        return [w, total, temb](Tape& tape, Var x, std::span<const int> steps, Var cond) {
            return work::denoiser_forward(tape, w, x, steps, total, temb, cond);
        };
    }

    // Predictor with every weight bound as a constant at call time.
    [[nodiscard]] work::EpsPredictor frozen_predictor() const {
        return [this](Tape& tape, Var x, std::span<const int> steps, Var cond) {
            const Bound b = bind(tape, Dense::None, false);
            return work::denoiser_forward(tape, b.w, x, steps, sched_.steps(), dims_.temb, cond);
        };
    }

    [[nodiscard]] Matrix condition(int id) const {
        return tokens_.compose_condition(id, cfg_.ablations.prompt_concept);
    }

    [[nodiscard]] Matrix sample(int id, std::size_t n, std::uint64_t s) const {
        return work::ddpm_sample(frozen_predictor(), sched_, condition(id), n, s);
    }

    void pretrain() {
        const auto& d = cfg_.diffusion;
        backbone_ = work::init_denoiser(dims_, seed("backbone-init"));
        backbone_params_ = param_count(backbone_);
        tokens_ = work::TokenTable(dims_.d_c, seed("object-token"));

        std::vector<std::pair<int, Matrix>> pools;
        pools.emplace_back(work::TokenTable::kObjectId,
                           work::sample_concept(work::standard_normal_task(), kPretrainPool, seed("pretrain-data", 0)));
        for (std::size_t i = 1; i <= d.pretrain_concepts; ++i) {
            const int id = -static_cast<int>(i);
            const auto task = work::make_concept_task(id, seed("pretrain-concept", i), kPretrainPool);
            pools.emplace_back(id, work::sample_concept(task, kPretrainPool, seed("pretrain-data", i)));
            tokens_.init_concept_token(id, seed("pretrain-token", i), work::TokenInit::Random);
        }

        Adam adam(d.pretrain_lr);
        std::vector<double> losses;
        for (std::size_t step = 0; step < d.pretrain_steps; ++step) {
            const auto& [id, pool] = pools[step % pools.size()];
            Rng rng(seed("pretrain-batch", step));
            const Matrix batch = draw_rows(pool, cfg_.batch_size, rng);
            Tape tape;
            const Bound b = bind(tape, Dense::All, false);
            const Var tok = tape.leaf(tokens_.embedding(id));
            const Var loss = work::diffusion_loss(tape, predictor_for(b.w), sched_, batch, tok,
                                                  seed("pretrain-noise", step));
            const auto grads = tape.backward(loss);
            std::vector<Var> vars{tok};
            for (const auto& [name, v] : b.leaves) {
                vars.push_back(v);
            }
            const double value = tape.scalar_value(loss);
            check_finite(0, step, value, grad_norm(grads, vars));
            losses.push_back(value);
            for (const auto& [name, v] : b.leaves) {
                adam.step(name, backbone_.at(name), grads.of(v));
            }
            adam.step(fmt::format("token{}", id), tokens_.embedding_mut(id), grads.of(tok));
        }
        for (const auto& [id, pool] : pools) {
            tokens_.freeze(id);
        }
        base_pool_ = pools.front().second;
        log(fmt::format("pretrain steps={} final_loss={:.6e}", d.pretrain_steps, window_mean(losses)));

        k_ = lora::AdapterStack("attn.k", backbone_.at("wk"));
        v_ = lora::AdapterStack("attn.v", backbone_.at("wv"));
        stacks_ready_ = true;
        site_params_ = backbone_.at("wk").size() + backbone_.at("wv").size();

        for (std::size_t t = 1; t <= cfg_.n_tasks; ++t) {
            auto task = work::make_concept_task(static_cast<int>(t), seed("concept", t), d.n_train);
            train_sets_.push_back(work::sample_concept(task, d.n_train, seed("train-data", t)));
            tasks_.push_back(std::move(task));
        }
    }

    void train_task(std::size_t t) {
        const int id = static_cast<int>(t);
        const auto strategy = cfg_.ablations.token_init ? work::TokenInit::WordInit : work::TokenInit::Random;
        tokens_.init_concept_token(id, seed("token", t), strategy);
        if (adapters()) {
            k_.new_task_pair(cfg_.rank, seed("lora-k", t), id);
            v_.new_task_pair(cfg_.rank, seed("lora-v", t), id);
        }
        const Matrix wk_before = backbone_.at("wk");
        const Matrix wv_before = backbone_.at("wv");
        const Matrix& train = train_sets_[t - 1];
        const double lambda = cfg_.penalty_weight();
        const auto batch_size = static_cast<double>(cfg_.batch_size);
        const bool replay = cfg_.method == Method::GenReplay && t > 1 && cfg_.diffusion.replay_mix > 0.0;

        Adam adam(cfg_.learning_rate);
        std::map<int, Matrix> pools;
        std::vector<double> losses;
        for (std::size_t step = 0; step < cfg_.steps_per_task; ++step) {
            const std::uint64_t key = step_key(t, step);
            if (replay && step % cfg_.diffusion.replay_refresh == 0) {
                for (int j = 1; j < id; ++j) {
                    pools[j] = sample(j, kReplayPool, seed("replay", key * 64 + static_cast<std::uint64_t>(j)));
                }
            }
            Rng rng(seed("batch", key));
            Tape tape;
            const Bound b = bind(tape, dense_mode(), true);
            const auto model = predictor_for(b.w);
            const Var tok = tape.leaf(tokens_.embedding(id));
            Var cond = tok;
            if (cfg_.ablations.prompt_concept) {
                const std::array<Var, 2> rows{tok, tape.constant(tokens_.embedding(work::TokenTable::kObjectId))};
                cond = tape.concat_rows(rows);
            }

            Var total;
            if (replay) {
                const ReplayBatch rb = gen_replay_step(train, pools, cfg_.batch_size, cfg_.diffusion.replay_mix, rng);
                total = tape.scale(work::diffusion_loss(tape, model, sched_, rb.fresh, cond, seed("noise", key)),
                                   static_cast<double>(rb.fresh.rows()) / batch_size);
                std::uint64_t g = 0;
                for (const auto& [old_id, rows] : rb.replay) {
                    const Var old_cond = tape.constant(condition(old_id));
                    const Var l = work::diffusion_loss(tape, model, sched_, rows, old_cond,
                                                       seed("noise-replay", key * 64 + g++));
                    total = tape.add(total, tape.scale(l, static_cast<double>(rows.rows()) / batch_size));
                }
            } else {
                const Matrix batch = draw_rows(train, cfg_.batch_size, rng);
                total = work::diffusion_loss(tape, model, sched_, batch, cond, seed("noise", key));
            }
            if (cfg_.diffusion.prior_preservation) {
                const Matrix prior = draw_rows(base_pool_, cfg_.batch_size, rng);
                const Var obj_cond = tape.constant(tokens_.embedding(work::TokenTable::kObjectId));
                total = tape.add(total,
                                 work::diffusion_loss(tape, model, sched_, prior, obj_cond, seed("noise-prior", key)));
            }
            const double workload = tape.scalar_value(total);

            Var objective = total;
            double penalty = 0.0;
            if (cfg_.method == Method::CLora && lambda > 0.0) {
                const Var p = tape.add(k_.forgetting_penalty(tape, *b.k_act), v_.forgetting_penalty(tape, *b.v_act));
                penalty = tape.scalar_value(p);
                objective = tape.add(objective, tape.scale(p, lambda));
            } else if (cfg_.method == Method::Ewc && lambda > 0.0 && !ewc_.empty()) {
                const Var p = ewc_.penalty(tape, b.leaves);
                penalty = tape.scalar_value(p);
                objective = tape.add(objective, tape.scale(p, lambda));
            }

            const auto grads = tape.backward(objective);
            std::vector<Var> vars{tok};
            if (b.k_act) {
                vars.insert(vars.end(), {b.k_act->a, b.k_act->b, b.v_act->a, b.v_act->b});
            }
            for (const auto& [name, v] : b.leaves) {
                vars.push_back(v);
            }
            const double norm = grad_norm(grads, vars);
            check_finite(id, step, tape.scalar_value(objective), norm);
            losses.push_back(workload);

            adam.step("token", tokens_.embedding_mut(id), grads.of(tok));
            if (b.k_act) {
                adam.step("k.a", k_.active_mut().a, grads.of(b.k_act->a));
                adam.step("k.b", k_.active_mut().b, grads.of(b.k_act->b));
                adam.step("v.a", v_.active_mut().a, grads.of(b.v_act->a));
                adam.step("v.b", v_.active_mut().b, grads.of(b.v_act->b));
            }
            for (const auto& [name, v] : b.leaves) {
                adam.step(name, backbone_.at(name), grads.of(v));
            }
            if (should_log(step)) {
                log_step({id, step, workload, penalty, norm});
            }
        }
        art_.task_losses.push_back(window_mean(losses));
        tokens_.freeze(id);

        if (adapters()) {
            k_.freeze_task();
            v_.freeze_task();
            art_.deltas.push_back({k_.past().back().delta(), v_.past().back().delta()});
        } else {
            art_.deltas.push_back({num::sub(backbone_.at("wk"), wk_before), num::sub(backbone_.at("wv"), wv_before)});
        }
        if (cfg_.method == Method::Ewc) {
            prepare_ewc(t);
        }
        const std::array<lora::AdapterStack, 2> stacks{k_, v_};
        record_storage(stacks, backbone_params_, id);

        art_.own_snapshots.push_back(sample(id, cfg_.samples_per_snapshot, seed("snapshot", t)));
        write_checkpoint(t);
    }

    void prepare_ewc(std::size_t t) {
        std::vector<ParamMap> grads;
        for (std::size_t i = 0; i < cfg_.fisher_batches; ++i) {
            Rng rng(seed("fisher", step_key(t, i)));
            const Matrix batch = draw_rows(train_sets_[t - 1], cfg_.batch_size, rng);
            Tape tape;
            const Bound b = bind(tape, Dense::Sites, false);
            const Var cond = tape.constant(condition(static_cast<int>(t)));
            const Var loss =
                work::diffusion_loss(tape, predictor_for(b.w), sched_, batch, cond, seed("fisher-noise", step_key(t, i)));
            const auto g = tape.backward(loss);
            ParamMap m;
            for (const auto& [name, v] : b.leaves) {
                m.emplace(name, g.of(v));
            }
            grads.push_back(std::move(m));
        }
        if (!grads.empty()) {
            ewc_prepare(ewc_, grads, backbone_);
        }
    }

    void write_checkpoint(std::size_t t) {
        Json ck;
        ck["task"] = t;
        ck["method"] = to_string(cfg_.method);
        ck["workload"] = to_string(cfg_.workload);
        ck["sites"] = Json::array();
        ck["deltas"] = Json::array();
        if (adapters()) {
            ck["sites"].push_back(lora::stack_to_json(k_));
            ck["sites"].push_back(lora::stack_to_json(v_));
        } else {
            ck["deltas"].push_back(delta_json("attn.k", art_.deltas.back()[0]));
            ck["deltas"].push_back(delta_json("attn.v", art_.deltas.back()[1]));
        }
        ck["tokens"] = Json::array({token_json(static_cast<int>(t), tokens_.embedding(static_cast<int>(t)))});
        art_.checkpoints.push_back(std::move(ck));
    }

    void evaluate() {
        const std::size_t n = cfg_.n_tasks;
        for (std::size_t j = 1; j <= n; ++j) {
            art_.final_snapshots.push_back(sample(static_cast<int>(j), cfg_.samples_per_snapshot, seed("snapshot", j)));
            art_.references.push_back(
                work::sample_concept(tasks_[j - 1], cfg_.samples_per_snapshot, seed("reference", j)));
        }
        const auto embedder = cfg_.embedder == "identity"
                                  ? metrics::FeatureEmbedder::identity()
                                  : metrics::FeatureEmbedder::random_map(2, cfg_.embedder_dim, cfg_.embedder_seed);
        const metrics::MmdSettings mmd{cfg_.kernel, cfg_.mmd_estimator};
        auto& r = art_.report;
        fill_common_report(backbone_params_, site_params_);
        r.a_mmd = std::max(0.0, metrics::a_mmd(art_.final_snapshots, art_.references, embedder, mmd)) *
                  metrics::kMmdReportScale;
        if (n >= 2) {
            r.f_mmd = std::max(0.0, metrics::f_mmd(art_.own_snapshots, art_.final_snapshots, embedder, mmd)) *
                      metrics::kMmdReportScale;
        }
        r.final_task_loss = eval_loss(train_sets_.back(), static_cast<int>(n));
        log(format_metrics_line(r));
    }

    // Workload loss of the current model over a whole data set, averaged over
    // a fixed set of noise draws shared by every run.
    double eval_loss(const Matrix& data, int id) const {
        constexpr std::size_t kDraws = 8;
        double acc = 0.0;
        for (std::size_t i = 0; i < kDraws; ++i) {
            Tape tape;
            const Var cond = tape.constant(condition(id));
            const Var l = work::diffusion_loss(tape, frozen_predictor(), sched_, data, cond,
                                               derive_seed(0xE7A1, "final-loss", i));
            acc += tape.scalar_value(l);
        }
        return acc / static_cast<double>(kDraws);
    }

    work::DenoiserDims dims_;
    work::DiffusionSchedule sched_;
    ParamMap backbone_;
    std::size_t backbone_params_ = 0;
    std::size_t site_params_ = 0;
    bool stacks_ready_ = false;
    lora::AdapterStack k_;
    lora::AdapterStack v_;
    work::TokenTable tokens_;
    std::vector<work::ConceptTask> tasks_;
    std::vector<Matrix> train_sets_;
    Matrix base_pool_;
    EwcState ewc_;
};

// -------------------------------------------------------- classification

class ClassificationRun : RunBase {
public:
    ClassificationRun(const ExperimentConfig& cfg, const LogSink& sink) : RunBase(cfg, sink) {
        const auto& k = cfg.classification;
        dims_ = {k.feature_dim, k.chunks, k.d_model};
    }

    RunArtifacts run() {
        pretrain();
        for (std::size_t t = 1; t <= cfg_.n_tasks; ++t) {
            train_task(t);
        }
        evaluate();
        if (adapters()) {
            art_.stacks = {q_, k_, v_};
        }
        return std::move(art_);
    }

private:
    struct Head {
        Matrix w;
        Matrix b;
    };

    struct Bound {
        work::ClassifierVars w;
        std::map<std::string, Var> leaves;
        std::optional<lora::ActiveVars> q_act;
        std::optional<lora::ActiveVars> k_act;
        std::optional<lora::ActiveVars> v_act;
    };

    [[nodiscard]] bool adapters() const { return uses_adapters(cfg_.method); }
    Bound bind(Tape& tape, Dense dense, bool train_adapters) const {
        Bound b;
        auto get = [&](const std::string& name, bool site = false) {
            if (dense == Dense::All || (dense == Dense::Sites && site)) {
                const Var v = tape.leaf(params_.at(name));
                b.leaves.emplace(name, v);
                return v;
            }
            return tape.constant(params_.at(name));
        };
        b.w.proj = tape.constant(params_.at("proj"));
        for (std::size_t k = 0; k < dims_.chunks; ++k) {
            b.w.embed.push_back(get(fmt::format("embed{}", k)));
        }
        if (adapters() && stacks_ready_) {
            if (k_.has_active()) {
                b.q_act = q_.bind_active(tape, train_adapters);
                b.k_act = k_.bind_active(tape, train_adapters);
                b.v_act = v_.bind_active(tape, train_adapters);
            }
            b.w.wq = q_.effective_weight(tape, b.q_act);
            b.w.wk = k_.effective_weight(tape, b.k_act);
            b.w.wv = v_.effective_weight(tape, b.v_act);
        } else {
            b.w.wq = get("wq", true);
            b.w.wk = get("wk", true);
            b.w.wv = get("wv", true);
        }
        return b;
    }

    void pretrain() {
        const auto& k = cfg_.classification;
        params_ = work::init_classifier(dims_, seed("backbone-init"));
        backbone_params_ = param_count(params_);

        work::ClassTaskSpec pre;
        pre.n_tasks = k.pretrain_classes;
        pre.classes_per_task = 1;
        pre.dim = k.feature_dim;
        pre.n_train_per_class = k.n_train_per_class;
        pre.n_test_per_class = 1;
        pre.radius = k.class_radius;
        const auto base = work::make_classification_tasks(pre, seed("pretrain-classes"));
        std::vector<Matrix> parts;
        std::vector<int> labels;
        for (std::size_t c = 0; c < base.size(); ++c) {
            parts.push_back(base[c].x_train);
            labels.insert(labels.end(), base[c].x_train.rows(), static_cast<int>(c));
        }
        const Matrix x = num::concat_rows(parts);

        Rng init(seed("pretrain-head"));
        Head head{init.normal_matrix(dims_.d_model, k.pretrain_classes, 0.01), Matrix::zeros(1, k.pretrain_classes)};
        Adam adam(k.pretrain_lr);
        std::vector<double> losses;
        for (std::size_t step = 0; step < k.pretrain_steps; ++step) {
            Rng rng(seed("pretrain-batch", step));
            auto [batch, y] = draw_labeled(x, labels, rng);
            Tape tape;
            const Bound b = bind(tape, Dense::All, false);
            const Var hw = tape.leaf(head.w);
            const Var hb = tape.leaf(head.b);
            const Var logits = tape.add_row(tape.matmul(features(tape, b, batch), hw), hb);
            const Var loss = tape.cross_entropy(logits, y);
            const auto grads = tape.backward(loss);
            std::vector<Var> vars{hw, hb};
            for (const auto& [name, v] : b.leaves) {
                vars.push_back(v);
            }
            check_finite(0, step, tape.scalar_value(loss), grad_norm(grads, vars));
            losses.push_back(tape.scalar_value(loss));
            for (const auto& [name, v] : b.leaves) {
                adam.step(name, params_.at(name), grads.of(v));
            }
            adam.step("head.w", head.w, grads.of(hw));
            adam.step("head.b", head.b, grads.of(hb));
        }
        log(fmt::format("pretrain steps={} final_loss={:.6e}", k.pretrain_steps, window_mean(losses)));

        q_ = lora::AdapterStack("attn.q", params_.at("wq"));
        k_ = lora::AdapterStack("attn.k", params_.at("wk"));
        v_ = lora::AdapterStack("attn.v", params_.at("wv"));
        stacks_ready_ = true;
        site_params_ = params_.at("wq").size() + params_.at("wk").size() + params_.at("wv").size();

        work::ClassTaskSpec spec;
        spec.n_tasks = cfg_.n_tasks;
        spec.classes_per_task = k.classes_per_task;
        spec.dim = k.feature_dim;
        spec.n_train_per_class = k.n_train_per_class;
        spec.n_test_per_class = k.n_test_per_class;
        spec.radius = k.class_radius;
        tasks_ = work::make_classification_tasks(spec, seed("class-tasks"));
    }

    std::pair<Matrix, std::vector<int>> draw_labeled(const Matrix& x, std::span<const int> labels, Rng& rng) const {
        Matrix batch(cfg_.batch_size, x.cols());
        std::vector<int> y(cfg_.batch_size);
        const auto last = static_cast<std::int64_t>(x.rows()) - 1;
        for (std::size_t i = 0; i < cfg_.batch_size; ++i) {
            const auto r = static_cast<std::size_t>(rng.uniform_int(0, last));
            std::ranges::copy(x.row(r), batch.row(i).begin());
            y[i] = labels[r];
        }
        return {std::move(batch), std::move(y)};
    }

    Var features(Tape& tape, const Bound& b, const Matrix& x) const {
        return work::classifier_features(tape, b.w, tape.constant(x), dims_);
    }

    [[nodiscard]] std::vector<int> local_labels(const work::ClassTask& task, std::span<const int> global) const {
        std::vector<int> out;
        out.reserve(global.size());
        for (int g : global) {
            out.push_back(static_cast<int>(std::ranges::find(task.classes, g) - task.classes.begin()));
        }
        return out;
    }

    void train_task(std::size_t t) {
        const int id = static_cast<int>(t);
        const auto& task = tasks_[t - 1];
        const std::size_t classes = task.classes.size();
        Rng init(seed("head", t));
        heads_.push_back({init.normal_matrix(dims_.d_model, classes, 0.01), Matrix::zeros(1, classes)});
        Head& head = heads_.back();
        if (adapters()) {
            q_.new_task_pair(cfg_.rank, seed("lora-q", t), id);
            k_.new_task_pair(cfg_.rank, seed("lora-k", t), id);
            v_.new_task_pair(cfg_.rank, seed("lora-v", t), id);
        }
        const ParamMap before = params_;
        const std::vector<int> y_local = local_labels(task, task.y_train);
        const double lambda = cfg_.penalty_weight();

        Adam adam(cfg_.learning_rate);
        std::vector<double> losses;
        for (std::size_t step = 0; step < cfg_.steps_per_task; ++step) {
            const std::uint64_t key = step_key(t, step);
            Rng rng(seed("batch", key));
            auto [batch, y] = draw_labeled(task.x_train, y_local, rng);
            Tape tape;
            const Bound b = bind(tape, dense_mode(), true);
            const Var hw = tape.leaf(head.w);
            const Var hb = tape.leaf(head.b);
            const Var logits = tape.add_row(tape.matmul(features(tape, b, batch), hw), hb);
            const Var loss = tape.cross_entropy(logits, y);
            const double workload = tape.scalar_value(loss);

            Var objective = loss;
            double penalty = 0.0;
            if (cfg_.method == Method::CLora && lambda > 0.0) {
                Var p = tape.add(q_.forgetting_penalty(tape, *b.q_act), k_.forgetting_penalty(tape, *b.k_act));
                p = tape.add(p, v_.forgetting_penalty(tape, *b.v_act));
                penalty = tape.scalar_value(p);
                objective = tape.add(objective, tape.scale(p, lambda));
            } else if (cfg_.method == Method::Ewc && lambda > 0.0 && !ewc_.empty()) {
                const Var p = ewc_.penalty(tape, b.leaves);
                penalty = tape.scalar_value(p);
                objective = tape.add(objective, tape.scale(p, lambda));
            }

            const auto grads = tape.backward(objective);
            std::vector<Var> vars{hw, hb};
            if (b.q_act) {
                for (const auto* act : {&b.q_act, &b.k_act, &b.v_act}) {
                    vars.push_back((*act)->a);
                    vars.push_back((*act)->b);
                }
            }
            for (const auto& [name, v] : b.leaves) {
                vars.push_back(v);
            }
            const double norm = grad_norm(grads, vars);
            check_finite(id, step, tape.scalar_value(objective), norm);
            losses.push_back(workload);

            adam.step("head.w", head.w, grads.of(hw));
            adam.step("head.b", head.b, grads.of(hb));
            if (b.q_act) {
                adam.step("q.a", q_.active_mut().a, grads.of(b.q_act->a));
                adam.step("q.b", q_.active_mut().b, grads.of(b.q_act->b));
                adam.step("k.a", k_.active_mut().a, grads.of(b.k_act->a));
                adam.step("k.b", k_.active_mut().b, grads.of(b.k_act->b));
                adam.step("v.a", v_.active_mut().a, grads.of(b.v_act->a));
                adam.step("v.b", v_.active_mut().b, grads.of(b.v_act->b));
            }
            for (const auto& [name, v] : b.leaves) {
                adam.step(name, params_.at(name), grads.of(v));
            }
            if (should_log(step)) {
                log_step({id, step, workload, penalty, norm});
            }
        }
        art_.task_losses.push_back(window_mean(losses));

        if (adapters()) {
            q_.freeze_task();
            k_.freeze_task();
            v_.freeze_task();
            art_.deltas.push_back({q_.past().back().delta(), k_.past().back().delta(), v_.past().back().delta()});
        } else {
            art_.deltas.push_back({num::sub(params_.at("wq"), before.at("wq")),
                                   num::sub(params_.at("wk"), before.at("wk")),
                                   num::sub(params_.at("wv"), before.at("wv"))});
        }
        if (cfg_.method == Method::Ewc) {
            prepare_ewc(t, y_local);
        }
        const std::array<lora::AdapterStack, 3> stacks{q_, k_, v_};
        record_storage(stacks, backbone_params_, id);

        std::vector<double> row;
        for (std::size_t j = 1; j <= t; ++j) {
            row.push_back(accuracy(tasks_[j - 1], t));
        }
        log(fmt::format("accuracy task={} row=[{}]", t, [&] {
                            std::string s;
                            for (double v : row) s += fmt::format("{}{:.4f}", s.empty() ? "" : " ", v);
                            return s;
                        }()));
        art_.accuracy.push_back(std::move(row));
        write_checkpoint(t);
    }

    void prepare_ewc(std::size_t t, std::span<const int> y_local) {
        std::vector<ParamMap> grads;
        const auto& task = tasks_[t - 1];
        const Head& head = heads_[t - 1];
        for (std::size_t i = 0; i < cfg_.fisher_batches; ++i) {
            Rng rng(seed("fisher", step_key(t, i)));
            auto [batch, y] = draw_labeled(task.x_train, y_local, rng);
            Tape tape;
            const Bound b = bind(tape, Dense::Sites, false);
            const Var logits =
                tape.add_row(tape.matmul(features(tape, b, batch), tape.constant(head.w)), tape.constant(head.b));
            const auto g = tape.backward(tape.cross_entropy(logits, y));
            ParamMap m;
            for (const auto& [name, v] : b.leaves) {
                m.emplace(name, g.of(v));
            }
            grads.push_back(std::move(m));
        }
        if (!grads.empty()) {
            ewc_prepare(ewc_, grads, params_);
        }
    }

    // Class-incremental accuracy on `task` using every head trained so far.
    double accuracy(const work::ClassTask& task, std::size_t heads_seen) const {
        std::vector<int> order;
        for (std::size_t h = 0; h < heads_seen; ++h) {
            order.insert(order.end(), tasks_[h].classes.begin(), tasks_[h].classes.end());
        }
        std::size_t correct = 0;
        const std::size_t n = task.x_test.rows();
        for (std::size_t begin = 0; begin < n; begin += cfg_.batch_size) {
            const std::size_t count = std::min(cfg_.batch_size, n - begin);
            Tape tape;
            const Bound b = bind(tape, Dense::None, false);
            const Var feat = features(tape, b, num::slice_rows(task.x_test, begin, count));
            std::vector<Var> cols;
            for (std::size_t h = 0; h < heads_seen; ++h) {
                cols.push_back(tape.add_row(tape.matmul(feat, tape.constant(heads_[h].w)), tape.constant(heads_[h].b)));
            }
            const Matrix& logits = tape.value(tape.concat_cols(cols));
            for (std::size_t i = 0; i < count; ++i) {
                const auto row = logits.row(i);
                const auto best = static_cast<std::size_t>(std::ranges::max_element(row) - row.begin());
                if (order[best] == task.y_test[begin + i]) {
                    ++correct;
                }
            }
        }
        return static_cast<double>(correct) / static_cast<double>(n);
    }

    double eval_loss(const work::ClassTask& task, const Head& head) const {
        const std::vector<int> y = local_labels(task, task.y_train);
        const std::size_t n = task.x_train.rows();
        double acc = 0.0;
        for (std::size_t begin = 0; begin < n; begin += cfg_.batch_size) {
            const std::size_t count = std::min(cfg_.batch_size, n - begin);
            Tape tape;
            const Bound b = bind(tape, Dense::None, false);
            const Var feat = features(tape, b, num::slice_rows(task.x_train, begin, count));
            const Var logits = tape.add_row(tape.matmul(feat, tape.constant(head.w)), tape.constant(head.b));
            const std::span<const int> ys(y.data() + begin, count);
            acc += tape.scalar_value(tape.cross_entropy(logits, ys)) * static_cast<double>(count);
        }
        return acc / static_cast<double>(n);
    }

    void write_checkpoint(std::size_t t) {
        Json ck;
        ck["task"] = t;
        ck["method"] = to_string(cfg_.method);
        ck["workload"] = to_string(cfg_.workload);
        ck["sites"] = Json::array();
        ck["deltas"] = Json::array();
        if (adapters()) {
            ck["sites"].push_back(lora::stack_to_json(q_));
            ck["sites"].push_back(lora::stack_to_json(k_));
            ck["sites"].push_back(lora::stack_to_json(v_));
        } else {
            const auto& d = art_.deltas.back();
            ck["deltas"].push_back(delta_json("attn.q", d[0]));
            ck["deltas"].push_back(delta_json("attn.k", d[1]));
            ck["deltas"].push_back(delta_json("attn.v", d[2]));
        }
        ck["head"] = {{"w", lora::matrix_to_json(heads_.back().w)}, {"b", lora::matrix_to_json(heads_.back().b)}};
        ck["tokens"] = Json::array();
        art_.checkpoints.push_back(std::move(ck));
    }

    void evaluate() {
        auto& r = art_.report;
        fill_common_report(backbone_params_, site_params_);
        const auto s = metrics::a_n_f_n(art_.accuracy, cfg_.forgetting);
        r.a_n = 100.0 * s.a_n;
        r.f_n = 100.0 * s.f_n;
        r.final_task_loss = eval_loss(tasks_.back(), heads_.back());
        log(format_metrics_line(r));
    }

    work::ClassifierDims dims_;
    ParamMap params_;
    std::size_t backbone_params_ = 0;
    std::size_t site_params_ = 0;
    bool stacks_ready_ = false;
    lora::AdapterStack q_;
    lora::AdapterStack k_;
    lora::AdapterStack v_;
    std::vector<work::ClassTask> tasks_;
    std::vector<Head> heads_;
    EwcState ewc_;
};

}  // namespace

RunArtifacts run_experiment(const ExperimentConfig& config, const LogSink& sink) {
    validate(config);
    if (config.method == Method::GenReplay && config.workload != Workload::Diffusion) {
        throw UnsupportedMethod("generative replay needs the diffusion workload");
    }
    if (config.workload == Workload::Diffusion) {
        return DiffusionRun(config, sink).run();
    }
    return ClassificationRun(config, sink).run();
}

// ------------------------------------------------------------------ sweeps

SweepParam parse_sweep_param(const std::string& s) {
    if (s == "lambda") return SweepParam::Lambda;
    if (s == "rank") return SweepParam::Rank;
    if (s == "lr") return SweepParam::LearningRate;
    throw ConfigError("param", fmt::format("unknown sweep parameter '{}'", s));
}

std::string to_string(SweepParam p) {
    switch (p) {
    case SweepParam::Lambda: return "lambda";
    case SweepParam::Rank: return "rank";
    case SweepParam::LearningRate: return "lr";
    }
    return "?";
}

ExperimentConfig with_param(ExperimentConfig base, SweepParam p, double value) {
    switch (p) {
    case SweepParam::Lambda: base.lambda = value; break;
    case SweepParam::Rank: base.rank = static_cast<std::size_t>(value); break;
    case SweepParam::LearningRate: base.learning_rate = value; break;
    }
    validate(base);
    return base;
}

std::vector<SweepRow> hyper_sweep(const ExperimentConfig& base, SweepParam param, std::span<const double> grid,
                                  std::size_t threads) {
    if (grid.empty()) {
        throw std::invalid_argument("hyper_sweep: empty grid");
    }
    std::vector<ExperimentConfig> configs;
    for (double v : grid) {
        configs.push_back(with_param(base, param, v));
    }
    std::vector<SweepRow> rows(grid.size());
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::exception_ptr error;
    auto worker = [&] {
        for (std::size_t i = next++; i < configs.size(); i = next++) {
            try {
                auto art = run_experiment(configs[i]);
                rows[i].value = grid[i];
                rows[i].report = std::move(art.report);
                rows[i].report.sweep = metrics::SweepTag{to_string(param), grid[i]};
            } catch (...) {
                const std::scoped_lock lock(error_mutex);
                if (!error) {
                    error = std::current_exception();
                }
            }
        }
    };
    const std::size_t n = std::clamp<std::size_t>(threads, 1, configs.size());
    {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < n; ++i) {
            pool.emplace_back(worker);
        }
    }
    if (error) {
        std::rethrow_exception(error);
    }
    return rows;
}

std::vector<double> default_lr_grid() { return {5e-2, 5e-3, 5e-4, 5e-5, 5e-6, 5e-7, 5e-8}; }

}  // namespace clora::train
