// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale continual-learning workloads.
//
//  * Generation: a conditional epsilon-prediction DDPM over 2-D Gaussian
//    mixtures. Each concept is a mixture identified by its own token; the
//    denoiser reads the token through one cross-attention block.
//  * Classification: class-incremental Gaussian classes read by a
//    self-attention block over chunks of the input.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "clora/matrix.hpp"
#include "clora/tape.hpp"

namespace clora::work {

using num::Matrix;
using num::Tape;
using num::Var;

/// Named dense parameters; std::map keeps iteration order deterministic.
using ParamMap = std::map<std::string, Matrix>;

// ---------------------------------------------------------------- concepts

struct MixtureComponent {
    std::array<double, 2> mean{};
    Matrix cov;  // 2×2 SPD
    double weight = 0.0;
};

struct ConceptTask {
    int task_id = 0;
    std::uint64_t seed = 0;
    std::vector<MixtureComponent> mixture;
    std::size_t n_train = 0;

    [[nodiscard]] std::array<double, 2> mean() const;
};

/// Throws std::invalid_argument if weights do not sum to 1 or a covariance is
/// not SPD.
void validate(const ConceptTask& task);

/// 2–3 components, means uniform in [-4, 4]², covariance 0.2·I.
ConceptTask make_concept_task(int task_id, std::uint64_t seed, std::size_t n_train);

/// Standard normal in 2-D as a one-component mixture.
ConceptTask standard_normal_task(int task_id = 0);

/// n i.i.d. draws (n×2), deterministic in seed.
Matrix sample_concept(const ConceptTask& task, std::size_t n, std::uint64_t seed);

// ------------------------------------------------------------------ tokens

enum class TokenInit { Random, WordInit };

class TokenError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Condition-token embeddings. Id 0 is the shared object word; concept tokens
/// use ids >= 1 and pretraining tokens negative ids.
class TokenTable {
public:
    static constexpr int kObjectId = 0;
    static constexpr double kRandomStd = 0.02;
    static constexpr double kWordJitterVar = 1e-4;

    TokenTable() = default;
    TokenTable(std::size_t d_c, std::uint64_t object_seed);

    /// random: N(0, 0.02²) per coordinate; word-init: object embedding plus
    /// N(0, 1e-4) jitter. Throws TokenError when id already exists.
    void init_concept_token(int id, std::uint64_t seed, TokenInit strategy);
    /// [V*_id] (1×d_c) or [V*_id ; object] (2×d_c).
    [[nodiscard]] Matrix compose_condition(int id, bool include_object) const;

    [[nodiscard]] bool contains(int id) const { return embeddings_.contains(id); }
    [[nodiscard]] const Matrix& embedding(int id) const;
    /// Mutable access; throws TokenError once the token is frozen.
    [[nodiscard]] Matrix& embedding_mut(int id);
    void freeze(int id);
    [[nodiscard]] bool frozen(int id) const { return frozen_.contains(id); }
    [[nodiscard]] std::size_t dim() const noexcept { return d_c_; }
    [[nodiscard]] const std::map<int, Matrix>& all() const noexcept { return embeddings_; }

private:
    std::size_t d_c_ = 0;
    std::map<int, Matrix> embeddings_;
    std::map<int, bool> frozen_;
};

// --------------------------------------------------------------- diffusion

struct DiffusionSchedule {
    std::vector<double> betas;       // index u-1 for timestep u in [1, T]
    std::vector<double> alphas;
    std::vector<double> alpha_bars;  // cumulative products

    [[nodiscard]] std::size_t steps() const noexcept { return betas.size(); }
    [[nodiscard]] double alpha_bar(int u) const { return alpha_bars.at(static_cast<std::size_t>(u - 1)); }
};

/// Linear betas from beta_start to beta_end over T steps.
DiffusionSchedule linear_schedule(std::size_t steps, double beta_start, double beta_end);

/// Sinusoidal embedding of timesteps u/T, one row per entry (n×dim).
Matrix timestep_embedding(std::span<const int> steps, std::size_t total_steps, std::size_t dim);

/// Predicts epsilon (n×2) for noisy points x_t at the given timesteps under
/// condition rows `cond`.
using EpsPredictor = std::function<Var(Tape&, Var x_t, std::span<const int> steps, Var cond)>;

/// Draws per-row timesteps and noise from seed, noises the batch and returns
/// the mean squared error of the epsilon prediction (mean over all entries).
Var diffusion_loss(Tape& tape, const EpsPredictor& model, const DiffusionSchedule& schedule, const Matrix& batch,
                   Var cond, std::uint64_t seed);

/// Ancestral DDPM sampling from x_T ~ N(0, I) down to x_0.
Matrix ddpm_sample(const EpsPredictor& model, const DiffusionSchedule& schedule, const Matrix& cond, std::size_t n,
                   std::uint64_t seed);

struct DenoiserDims {
    std::size_t d_f = 32;     // latent width, also d'
    std::size_t d_c = 16;     // token width
    std::size_t hidden = 64;
    std::size_t temb = 16;
};

/// Fresh backbone: w1,b1,w2,b2 (embed), wq,wk,wv (cross-attention), w3,b3,w4,b4 (head).
ParamMap init_denoiser(const DenoiserDims& dims, std::uint64_t seed);

/// Tape handles for one forward pass of the denoiser.
struct DenoiserVars {
    Var w1, b1, w2, b2, wq, wk, wv, w3, b3, w4, b4;
};

/// Binds every backbone tensor as a constant; callers override the entries
/// they train.
DenoiserVars bind_denoiser_constants(Tape& tape, const ParamMap& params);

/// f = MLP([x_t, temb(u)]); h = f + cross_attention(f, cond); eps = MLP(h).
Var denoiser_forward(Tape& tape, const DenoiserVars& w, Var x_t, std::span<const int> steps, std::size_t total_steps,
                     std::size_t temb_dim, Var cond);

// ---------------------------------------------------------- classification

struct ClassTask {
    int task_id = 0;
    std::vector<int> classes;  // global class ids
    Matrix x_train;
    std::vector<int> y_train;  // global ids
    Matrix x_test;
    std::vector<int> y_test;
};

struct ClassTaskSpec {
    std::size_t n_tasks = 10;
    std::size_t classes_per_task = 2;
    std::size_t dim = 32;
    std::size_t n_train_per_class = 100;
    std::size_t n_test_per_class = 100;
    double radius = 5.0;
    int first_class = 0;
};

/// Class-incremental tasks; class means on a sphere of the given radius,
/// identity covariance. Throws std::invalid_argument for n_tasks < 2.
std::vector<ClassTask> make_classification_tasks(const ClassTaskSpec& spec, std::uint64_t seed);

struct ClassifierDims {
    std::size_t input = 32;
    std::size_t chunks = 4;
    std::size_t d_model = 16;  // token width, also d'
};

/// Frozen random input map "proj", per-chunk token embeddings "embed0..",
/// and "wq","wk","wv".
ParamMap init_classifier(const ClassifierDims& dims, std::uint64_t seed);

struct ClassifierVars {
    Var proj;
    std::vector<Var> embed;
    Var wq, wk, wv;
};

ClassifierVars bind_classifier_constants(Tape& tape, const ParamMap& params, std::size_t chunks);

/// Mean-pooled self-attention features (B×d') for a batch of inputs (B×input).
Var classifier_features(Tape& tape, const ClassifierVars& w, Var x, const ClassifierDims& dims);

/// Additive mask restricting attention to each sample's own chunk block.
Matrix block_mask(std::size_t batch, std::size_t block);

}  // namespace clora::work
