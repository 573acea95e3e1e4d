// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: one flat-ish JSON document resolved against
// method- and workload-dependent defaults. Unknown keys are rejected.

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "clora/metrics.hpp"

namespace clora {

using Json = nlohmann::ordered_json;

/// Invalid configuration; `key` names the offending entry.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string key, const std::string& what)
        : std::invalid_argument(what), key_(std::move(key)) {}
    [[nodiscard]] const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

enum class Method { CLora, LoraSeq, FullFtSeq, Ewc, GenReplay, TokenOnly };
enum class Workload { Diffusion, Classification };

std::string to_string(Method m);
std::string to_string(Workload w);
Method parse_method(const std::string& s);
Workload parse_workload(const std::string& s);

/// True for methods training LoRA pairs on the attention sites.
bool uses_adapters(Method m);
/// True for methods that train dense weights: the whole backbone
/// (full_ft_seq) or just the adapted attention projections (ewc, gen_replay).
bool trains_backbone(Method m);
bool trains_full_backbone(Method m);

struct Ablations {
    bool token_init = false;      // word-init tokens instead of random
    bool prompt_concept = false;  // condition on [V*, object] instead of [V*]
    bool eq3 = false;             // drop the forgetting penalty, keep stacks
};

struct DiffusionSettings {
    std::size_t timesteps = 50;
    double beta_start = 0.002;
    double beta_end = 0.4;
    std::size_t n_train = 256;
    std::size_t d_f = 32;
    std::size_t d_c = 16;
    std::size_t hidden = 64;
    std::size_t pretrain_steps = 3000;
    double pretrain_lr = 2e-3;
    std::size_t pretrain_concepts = 32;
    double replay_mix = 0.5;
    std::size_t replay_refresh = 500;
    bool prior_preservation = false;
};

struct ClassificationSettings {
    std::size_t classes_per_task = 2;
    std::size_t feature_dim = 32;
    std::size_t chunks = 4;
    std::size_t d_model = 16;
    double class_radius = 5.0;
    std::size_t n_train_per_class = 100;
    std::size_t n_test_per_class = 100;
    std::size_t pretrain_steps = 2000;
    double pretrain_lr = 2e-3;
    std::size_t pretrain_classes = 100;
};

struct ExperimentConfig {
    Method method = Method::CLora;
    Workload workload = Workload::Diffusion;
    std::uint64_t seed = 0;
    double lambda = 0.0;
    std::size_t rank = 16;
    double learning_rate = 5e-4;
    std::size_t steps_per_task = 1500;
    std::size_t batch_size = 64;
    std::size_t n_tasks = 5;
    std::size_t samples_per_snapshot = 200;
    Ablations ablations;
    metrics::PolyKernel kernel;
    metrics::Estimator mmd_estimator = metrics::Estimator::Biased;
    std::string embedder = "identity";  // identity | random_map
    std::size_t embedder_dim = 16;
    std::uint64_t embedder_seed = 7;
    metrics::ForgettingMode forgetting = metrics::ForgettingMode::MaxDrop;
    std::size_t fisher_batches = 16;
    std::size_t log_every = 50;
    DiffusionSettings diffusion;
    ClassificationSettings classification;
    std::string out_dir;

    /// λ actually multiplying the penalty term (0 when ablated or unused).
    [[nodiscard]] double penalty_weight() const;
};

/// Parses and resolves a config document. Throws ConfigError.
ExperimentConfig parse_config(const Json& doc);
/// Fully resolved document; parse_config(to_json(c)) reproduces c.
Json to_json(const ExperimentConfig& c);
/// Default config for a method/workload pair.
ExperimentConfig default_config(Method m, Workload w);
/// Rejects unsupported method/workload combinations and out-of-range values.
void validate(const ExperimentConfig& c);

/// Stable hash of the resolved config with seed and out_dir removed.
std::uint64_t config_hash(const ExperimentConfig& c);

}  // namespace clora
