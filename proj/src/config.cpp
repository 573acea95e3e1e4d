// SPDX-License-Identifier: Apache-2.0

#include "clora/config.hpp"

#include <algorithm>
#include <fmt/format.h>
#include <functional>
#include <map>

#include "clora/rng.hpp"

namespace clora {

std::string to_string(Method m) {
    switch (m) {
    case Method::CLora: return "clora";
    case Method::LoraSeq: return "lora_seq";
    case Method::FullFtSeq: return "full_ft_seq";
    case Method::Ewc: return "ewc";
    case Method::GenReplay: return "gen_replay";
    case Method::TokenOnly: return "token_only";
    }
    return "?";
}

std::string to_string(Workload w) { return w == Workload::Diffusion ? "diffusion" : "classification"; }

Method parse_method(const std::string& s) {
    static const std::map<std::string, Method> names{
        {"clora", Method::CLora},         {"lora_seq", Method::LoraSeq},     {"full_ft_seq", Method::FullFtSeq},
        {"ewc", Method::Ewc},             {"gen_replay", Method::GenReplay}, {"token_only", Method::TokenOnly},
    };
    auto it = names.find(s);
    if (it == names.end()) {
        throw ConfigError("method", fmt::format("unknown method '{}'", s));
    }
    return it->second;
}

Workload parse_workload(const std::string& s) {
    if (s == "diffusion") return Workload::Diffusion;
    if (s == "classification") return Workload::Classification;
    throw ConfigError("workload", fmt::format("unknown workload '{}'", s));
}

bool uses_adapters(Method m) { return m == Method::CLora || m == Method::LoraSeq; }

bool trains_backbone(Method m) { return m == Method::FullFtSeq || m == Method::Ewc || m == Method::GenReplay; }

bool trains_full_backbone(Method m) { return m == Method::FullFtSeq; }

double ExperimentConfig::penalty_weight() const {
    if (method == Method::CLora) {
        return ablations.eq3 ? 0.0 : lambda;
    }
    if (method == Method::Ewc) {
        return lambda;
    }
    return 0.0;
}

ExperimentConfig default_config(Method m, Workload w) {
    ExperimentConfig c;
    c.method = m;
    c.workload = w;
    c.lambda = m == Method::CLora ? 1e8 : (m == Method::Ewc ? 1e6 : 0.0);
    if (w == Workload::Diffusion) {
        c.rank = 16;
        c.steps_per_task = 1500;
        c.n_tasks = 5;
    } else {
        c.rank = 8;
        c.steps_per_task = 500;
        c.n_tasks = 10;
    }
    return c;
}

namespace {

// Typed readers that report the dotted key path on failure.
struct Reader {
    std::string prefix;

    [[nodiscard]] std::string path(const std::string& key) const { return prefix.empty() ? key : prefix + "." + key; }

    double number(const std::string& key, const Json& v) const {
        if (!v.is_number()) {
            throw ConfigError(path(key), fmt::format("{} must be a number", path(key)));
        }
        return v.get<double>();
    }
    std::size_t count(const std::string& key, const Json& v) const {
        if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
            throw ConfigError(path(key), fmt::format("{} must be a non-negative integer", path(key)));
        }
        return v.get<std::size_t>();
    }
    bool flag(const std::string& key, const Json& v) const {
        if (!v.is_boolean()) {
            throw ConfigError(path(key), fmt::format("{} must be a boolean", path(key)));
        }
        return v.get<bool>();
    }
    std::string text(const std::string& key, const Json& v) const {
        if (!v.is_string()) {
            throw ConfigError(path(key), fmt::format("{} must be a string", path(key)));
        }
        return v.get<std::string>();
    }
};

using Handler = std::function<void(const Json&)>;

void apply(const Json& obj, const std::string& prefix, const std::map<std::string, Handler>& handlers) {
    if (!obj.is_object()) {
        throw ConfigError(prefix, fmt::format("{} must be an object", prefix.empty() ? "config" : prefix));
    }
    for (const auto& [key, value] : obj.items()) {
        auto it = handlers.find(key);
        if (it == handlers.end()) {
            const std::string full = prefix.empty() ? key : prefix + "." + key;
            throw ConfigError(full, fmt::format("unknown config key '{}'", full));
        }
        it->second(value);
    }
}

}  // namespace

ExperimentConfig parse_config(const Json& doc) {
    if (!doc.is_object()) {
        throw ConfigError("", "config must be a JSON object");
    }
    const Reader top{""};
    Method method = Method::CLora;
    Workload workload = Workload::Diffusion;
    if (doc.contains("method")) method = parse_method(top.text("method", doc["method"]));
    if (doc.contains("workload")) workload = parse_workload(top.text("workload", doc["workload"]));
    ExperimentConfig c = default_config(method, workload);

    const Reader ab{"ablations"};
    const std::map<std::string, Handler> ablation_keys{
        {"token_init", [&](const Json& v) { c.ablations.token_init = ab.flag("token_init", v); }},
        {"prompt_concept", [&](const Json& v) { c.ablations.prompt_concept = ab.flag("prompt_concept", v); }},
        {"eq3", [&](const Json& v) { c.ablations.eq3 = ab.flag("eq3", v); }},
    };
    const Reader kr{"kernel"};
    const std::map<std::string, Handler> kernel_keys{
        {"degree", [&](const Json& v) { c.kernel.degree = static_cast<int>(kr.count("degree", v)); }},
        {"coef0", [&](const Json& v) { c.kernel.coef0 = kr.number("coef0", v); }},
        {"scale",
         [&](const Json& v) {
             if (v.is_null()) {
                 c.kernel.scale.reset();
             } else {
                 c.kernel.scale = kr.number("scale", v);
             }
         }},
    };
    auto& d = c.diffusion;
    const Reader dr{"diffusion"};
    const std::map<std::string, Handler> diffusion_keys{
        {"timesteps", [&](const Json& v) { d.timesteps = dr.count("timesteps", v); }},
        {"beta_start", [&](const Json& v) { d.beta_start = dr.number("beta_start", v); }},
        {"beta_end", [&](const Json& v) { d.beta_end = dr.number("beta_end", v); }},
        {"n_train", [&](const Json& v) { d.n_train = dr.count("n_train", v); }},
        {"d_f", [&](const Json& v) { d.d_f = dr.count("d_f", v); }},
        {"d_c", [&](const Json& v) { d.d_c = dr.count("d_c", v); }},
        {"hidden", [&](const Json& v) { d.hidden = dr.count("hidden", v); }},
        {"pretrain_steps", [&](const Json& v) { d.pretrain_steps = dr.count("pretrain_steps", v); }},
        {"pretrain_lr", [&](const Json& v) { d.pretrain_lr = dr.number("pretrain_lr", v); }},
        {"pretrain_concepts", [&](const Json& v) { d.pretrain_concepts = dr.count("pretrain_concepts", v); }},
        {"replay_mix", [&](const Json& v) { d.replay_mix = dr.number("replay_mix", v); }},
        {"replay_refresh", [&](const Json& v) { d.replay_refresh = dr.count("replay_refresh", v); }},
        {"prior_preservation", [&](const Json& v) { d.prior_preservation = dr.flag("prior_preservation", v); }},
    };
    auto& k = c.classification;
    const Reader cr{"classification"};
    const std::map<std::string, Handler> class_keys{
        {"classes_per_task", [&](const Json& v) { k.classes_per_task = cr.count("classes_per_task", v); }},
        {"feature_dim", [&](const Json& v) { k.feature_dim = cr.count("feature_dim", v); }},
        {"chunks", [&](const Json& v) { k.chunks = cr.count("chunks", v); }},
        {"d_model", [&](const Json& v) { k.d_model = cr.count("d_model", v); }},
        {"class_radius", [&](const Json& v) { k.class_radius = cr.number("class_radius", v); }},
        {"n_train_per_class", [&](const Json& v) { k.n_train_per_class = cr.count("n_train_per_class", v); }},
        {"n_test_per_class", [&](const Json& v) { k.n_test_per_class = cr.count("n_test_per_class", v); }},
        {"pretrain_steps", [&](const Json& v) { k.pretrain_steps = cr.count("pretrain_steps", v); }},
        {"pretrain_lr", [&](const Json& v) { k.pretrain_lr = cr.number("pretrain_lr", v); }},
        {"pretrain_classes", [&](const Json& v) { k.pretrain_classes = cr.count("pretrain_classes", v); }},
    };

    const std::map<std::string, Handler> top_keys{
        {"method", [](const Json&) {}},
        {"workload", [](const Json&) {}},
        {"seed", [&](const Json& v) { c.seed = top.count("seed", v); }},
        {"lambda",
         [&](const Json& v) {
             if (!v.is_null()) c.lambda = top.number("lambda", v);
         }},
        {"rank",
         [&](const Json& v) {
             if (!v.is_null()) c.rank = top.count("rank", v);
         }},
        {"learning_rate",
         [&](const Json& v) {
             if (!v.is_null()) c.learning_rate = top.number("learning_rate", v);
         }},
        {"steps_per_task",
         [&](const Json& v) {
             if (!v.is_null()) c.steps_per_task = top.count("steps_per_task", v);
         }},
        {"batch_size", [&](const Json& v) { c.batch_size = top.count("batch_size", v); }},
        {"n_tasks",
         [&](const Json& v) {
             if (!v.is_null()) c.n_tasks = top.count("n_tasks", v);
         }},
        {"samples_per_snapshot", [&](const Json& v) { c.samples_per_snapshot = top.count("samples_per_snapshot", v); }},
        {"ablations", [&](const Json& v) { apply(v, "ablations", ablation_keys); }},
        {"kernel", [&](const Json& v) { apply(v, "kernel", kernel_keys); }},
        {"mmd_estimator",
         [&](const Json& v) {
             const auto s = top.text("mmd_estimator", v);
             if (s == "biased") {
                 c.mmd_estimator = metrics::Estimator::Biased;
             } else if (s == "unbiased") {
                 c.mmd_estimator = metrics::Estimator::Unbiased;
             } else {
                 throw ConfigError("mmd_estimator", fmt::format("unknown estimator '{}'", s));
             }
         }},
        {"embedder", [&](const Json& v) { c.embedder = top.text("embedder", v); }},
        {"embedder_dim", [&](const Json& v) { c.embedder_dim = top.count("embedder_dim", v); }},
        {"embedder_seed", [&](const Json& v) { c.embedder_seed = top.count("embedder_seed", v); }},
        {"forgetting",
         [&](const Json& v) {
             const auto s = top.text("forgetting", v);
             if (s == "max_drop") {
                 c.forgetting = metrics::ForgettingMode::MaxDrop;
             } else if (s == "diag_drop") {
                 c.forgetting = metrics::ForgettingMode::DiagDrop;
             } else {
                 throw ConfigError("forgetting", fmt::format("unknown forgetting mode '{}'", s));
             }
         }},
        {"fisher_batches", [&](const Json& v) { c.fisher_batches = top.count("fisher_batches", v); }},
        {"log_every", [&](const Json& v) { c.log_every = top.count("log_every", v); }},
        {"diffusion", [&](const Json& v) { apply(v, "diffusion", diffusion_keys); }},
        {"classification", [&](const Json& v) { apply(v, "classification", class_keys); }},
        {"out_dir", [&](const Json& v) { c.out_dir = top.text("out_dir", v); }},
    };
    apply(doc, "", top_keys);

    if (method != Method::CLora && method != Method::Ewc) {
        c.lambda = 0.0;
    }
    validate(c);
    return c;
}

void validate(const ExperimentConfig& c) {
    if (c.method == Method::GenReplay && c.workload == Workload::Classification) {
        throw ConfigError("method", "gen_replay is not supported for the classification workload");
    }
    if (!(c.lambda >= 0.0)) throw ConfigError("lambda", "lambda must be >= 0");
    if (!(c.learning_rate > 0.0)) throw ConfigError("learning_rate", "learning_rate must be > 0");
    if (c.batch_size == 0) throw ConfigError("batch_size", "batch_size must be >= 1");
    if (c.samples_per_snapshot < 2) throw ConfigError("samples_per_snapshot", "samples_per_snapshot must be >= 2");
    if (c.log_every == 0) throw ConfigError("log_every", "log_every must be >= 1");
    if (c.kernel.degree < 1) throw ConfigError("kernel.degree", "kernel.degree must be >= 1");
    if (c.embedder != "identity" && c.embedder != "random_map") {
        throw ConfigError("embedder", fmt::format("unknown embedder '{}'", c.embedder));
    }
    if (c.embedder == "random_map" && c.embedder_dim == 0) {
        throw ConfigError("embedder_dim", "embedder_dim must be >= 1");
    }
    const std::size_t max_rank = c.workload == Workload::Diffusion
                                     ? std::min(c.diffusion.d_c, c.diffusion.d_f)
                                     : c.classification.d_model;
    if (c.rank < 1 || c.rank > max_rank) {
        throw ConfigError("rank", fmt::format("rank must lie in [1, {}]", max_rank));
    }
    if (c.workload == Workload::Diffusion) {
        const auto& d = c.diffusion;
        if (c.n_tasks < 1) throw ConfigError("n_tasks", "n_tasks must be >= 1");
        if (d.timesteps < 1) throw ConfigError("diffusion.timesteps", "timesteps must be >= 1");
        if (!(d.beta_start > 0.0 && d.beta_start < 1.0)) {
            throw ConfigError("diffusion.beta_start", "beta_start must lie in (0, 1)");
        }
        if (!(d.beta_end > 0.0 && d.beta_end < 1.0)) {
            throw ConfigError("diffusion.beta_end", "beta_end must lie in (0, 1)");
        }
        if (d.n_train < 1) throw ConfigError("diffusion.n_train", "n_train must be >= 1");
        if (d.d_f < 1 || d.d_c < 1 || d.hidden < 1) throw ConfigError("diffusion.d_f", "model widths must be >= 1");
        if (!(d.replay_mix >= 0.0 && d.replay_mix <= 1.0)) {
            throw ConfigError("diffusion.replay_mix", "replay_mix must lie in [0, 1]");
        }
        if (d.replay_refresh < 1) throw ConfigError("diffusion.replay_refresh", "replay_refresh must be >= 1");
    } else {
        const auto& k = c.classification;
        if (c.n_tasks < 2) throw ConfigError("n_tasks", "classification needs n_tasks >= 2");
        if (k.classes_per_task < 1) throw ConfigError("classification.classes_per_task", "classes_per_task must be >= 1");
        if (k.chunks < 1 || k.feature_dim % k.chunks != 0) {
            throw ConfigError("classification.chunks", "feature_dim must divide into chunks");
        }
        if (k.n_train_per_class < 1 || k.n_test_per_class < 1) {
            throw ConfigError("classification.n_train_per_class", "per-class sample counts must be >= 1");
        }
        if (k.pretrain_classes < 2) throw ConfigError("classification.pretrain_classes", "pretrain_classes must be >= 2");
    }
}

Json to_json(const ExperimentConfig& c) {
    Json j;
    j["method"] = to_string(c.method);
    j["workload"] = to_string(c.workload);
    j["seed"] = c.seed;
    j["lambda"] = c.lambda;
    j["rank"] = c.rank;
    j["learning_rate"] = c.learning_rate;
    j["steps_per_task"] = c.steps_per_task;
    j["batch_size"] = c.batch_size;
    j["n_tasks"] = c.n_tasks;
    j["samples_per_snapshot"] = c.samples_per_snapshot;
    j["ablations"] = {{"token_init", c.ablations.token_init},
                      {"prompt_concept", c.ablations.prompt_concept},
                      {"eq3", c.ablations.eq3}};
    Json kernel;
    kernel["degree"] = c.kernel.degree;
    kernel["coef0"] = c.kernel.coef0;
    kernel["scale"] = c.kernel.scale ? Json(*c.kernel.scale) : Json(nullptr);
    j["kernel"] = kernel;
    j["mmd_estimator"] = c.mmd_estimator == metrics::Estimator::Biased ? "biased" : "unbiased";
    j["embedder"] = c.embedder;
    j["embedder_dim"] = c.embedder_dim;
    j["embedder_seed"] = c.embedder_seed;
    j["forgetting"] = c.forgetting == metrics::ForgettingMode::MaxDrop ? "max_drop" : "diag_drop";
    j["fisher_batches"] = c.fisher_batches;
    j["log_every"] = c.log_every;
    const auto& d = c.diffusion;
    j["diffusion"] = {{"timesteps", d.timesteps},
                      {"beta_start", d.beta_start},
                      {"beta_end", d.beta_end},
                      {"n_train", d.n_train},
                      {"d_f", d.d_f},
                      {"d_c", d.d_c},
                      {"hidden", d.hidden},
                      {"pretrain_steps", d.pretrain_steps},
                      {"pretrain_lr", d.pretrain_lr},
                      {"pretrain_concepts", d.pretrain_concepts},
                      {"replay_mix", d.replay_mix},
                      {"replay_refresh", d.replay_refresh},
                      {"prior_preservation", d.prior_preservation}};
    const auto& k = c.classification;
    j["classification"] = {{"classes_per_task", k.classes_per_task},
                           {"feature_dim", k.feature_dim},
                           {"chunks", k.chunks},
                           {"d_model", k.d_model},
                           {"class_radius", k.class_radius},
                           {"n_train_per_class", k.n_train_per_class},
                           {"n_test_per_class", k.n_test_per_class},
                           {"pretrain_steps", k.pretrain_steps},
                           {"pretrain_lr", k.pretrain_lr},
                           {"pretrain_classes", k.pretrain_classes}};
    j["out_dir"] = c.out_dir;
    return j;
}

std::uint64_t config_hash(const ExperimentConfig& c) {
    Json j = to_json(c);
    j.erase("seed");
    j.erase("out_dir");
    return fnv1a(j.dump());
}

}  // namespace clora
