#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "graphsc/nicp.hpp"
#include "graphsc/synth.hpp"
#include "graphsc/training.hpp"

namespace graphsc {

/// Every tunable of the pipeline as one flat key-value document.
struct PipelineConfig {
  GraphParams graph;         // sigma_n, k, sigma_d
  double tau_s = 0.4;        // inlier score threshold
  SolverConfig solver;       // lambda_c, lambda_r, lambda_m, iterations, sigma_g, k_g
  TrainConfig train;         // epochs, lr, decay, tau_d, gamma, lambda, seed
  Architecture arch;
  std::uint64_t model_seed = 0;

  void validate() const {
    if (!(graph.coverage > 0.0)) fail_validation("sigma_n must be positive");
    if (graph.k < 1) fail_validation("k must be at least 1");
    if (!(graph.sigma_d > 0.0)) fail_validation("sigma_d must be positive");
    if (!(tau_s >= 0.0 && tau_s <= 1.0)) fail_validation("tau_s must lie in [0,1]");
    solver.validate();
    train.validate();
    arch.validate();
  }
};

namespace detail {

struct ConfigKey {
  std::function<void(PipelineConfig&, const nlohmann::json&)> set;
  std::function<nlohmann::json(const PipelineConfig&)> get;
};

template <class T, class Field>
ConfigKey config_key(Field field, std::function<bool(T)> ok, const char* range) {
  ConfigKey k;
  k.set = [field, ok, range](PipelineConfig& c, const nlohmann::json& v) {
    if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
      if (!detail::is_count(v)) throw std::out_of_range("a non-negative integer");
    }
    T value = v.get<T>();
    if (!ok(value)) throw std::out_of_range(range);
    field(c) = value;
  };
  k.get = [field](const PipelineConfig& c) { return nlohmann::json(field(c)); };
  return k;
}

inline const std::map<std::string, ConfigKey>& config_keys() {
  auto positive = [](double v) { return std::isfinite(v) && v > 0.0; };
  auto non_negative = [](double v) { return std::isfinite(v) && v >= 0.0; };
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  auto count = [](std::size_t v) { return v >= 1; };
  auto any_seed = [](std::uint64_t) { return true; };
  auto any_bool = [](bool) { return true; };
  static const std::map<std::string, ConfigKey> keys = {
      {"sigma_n", config_key<double>([](auto& c) -> auto& { return c.graph.coverage; }, positive, "> 0")},
      {"k", config_key<std::size_t>([](auto& c) -> auto& { return c.graph.k; }, count, ">= 1")},
      {"sigma_d", config_key<double>([](auto& c) -> auto& { return c.graph.sigma_d; }, positive, "> 0")},
      {"tau_s", config_key<double>([](auto& c) -> auto& { return c.tau_s; }, unit, "in [0,1]")},
      {"sigma_g", config_key<double>([](auto& c) -> auto& { return c.solver.graph_coverage; }, positive, "> 0")},
      {"k_g", config_key<std::size_t>([](auto& c) -> auto& { return c.solver.graph_k; }, count, ">= 1")},
      {"lambda_c", config_key<double>([](auto& c) -> auto& { return c.solver.lambda_corr; }, positive, "> 0")},
      {"lambda_r", config_key<double>([](auto& c) -> auto& { return c.solver.lambda_reg; }, positive, "> 0")},
      {"lambda_m", config_key<double>([](auto& c) -> auto& { return c.solver.marquardt; }, positive, "> 0")},
      {"max_iterations",
       config_key<std::size_t>([](auto& c) -> auto& { return c.solver.max_iterations; }, count, ">= 1")},
      {"cost_tolerance",
       config_key<double>([](auto& c) -> auto& { return c.solver.cost_tolerance; }, positive, "> 0")},
      {"step_tolerance",
       config_key<double>([](auto& c) -> auto& { return c.solver.step_tolerance; }, positive, "> 0")},
      {"epochs", config_key<std::size_t>([](auto& c) -> auto& { return c.train.epochs; }, count, ">= 1")},
      {"learning_rate",
       config_key<double>([](auto& c) -> auto& { return c.train.learning_rate; }, non_negative, ">= 0")},
      {"lr_decay", config_key<double>([](auto& c) -> auto& { return c.train.lr_decay_per_epoch; },
                                      [](double v) { return v >= 0.0 && v < 1.0; }, "in [0,1)")},
      {"weight_decay",
       config_key<double>([](auto& c) -> auto& { return c.train.weight_decay; }, non_negative, ">= 0")},
      {"focal_gamma", config_key<double>([](auto& c) -> auto& { return c.train.focal_gamma; }, non_negative, ">= 0")},
      {"tau_d", config_key<double>([](auto& c) -> auto& { return c.train.label_tau_d; }, positive, "> 0")},
      {"loss_lambda", config_key<double>([](auto& c) -> auto& { return c.train.loss_lambda; }, non_negative, ">= 0")},
      {"augment", config_key<bool>([](auto& c) -> auto& { return c.train.augment; }, any_bool, "boolean")},
      {"train_seed", config_key<std::uint64_t>([](auto& c) -> auto& { return c.train.seed; }, any_seed, "")},
      {"model_seed", config_key<std::uint64_t>([](auto& c) -> auto& { return c.model_seed; }, any_seed, "")},
      {"blocks", config_key<std::size_t>([](auto& c) -> auto& { return c.arch.blocks; }, count, ">= 1")},
      {"units_per_block",
       config_key<std::size_t>([](auto& c) -> auto& { return c.arch.units_per_block; }, count, ">= 1")},
      {"norm_groups", config_key<std::size_t>([](auto& c) -> auto& { return c.arch.norm_groups; }, count, ">= 1")},
      {"leaky_slope", config_key<double>([](auto& c) -> auto& { return c.arch.leaky_slope; },
                                         [](double v) { return v >= 0.0 && v < 1.0; }, "in [0,1)")},
  };
  return keys;
}

}  // namespace detail

/// Applies the keys of `j` on top of `base`. Unknown keys and out-of-range
/// values raise validation errors naming the key.
inline PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig base = {}) {
  if (!j.is_object()) fail_validation("config must be a JSON object");
  const auto& keys = detail::config_keys();
  for (const auto& [key, value] : j.items()) {
    if (key == "feature_width") {
      if (!detail::is_count(value) || value.get<std::size_t>() < 1) {
        fail_validation("feature_width: must be a positive integer");
      }
      const auto d = value.get<std::size_t>();
      base.arch.init_widths = {d, d, d};
      continue;
    }
    const auto it = keys.find(key);
    if (it == keys.end()) fail_validation("unknown config key '" + key + "'");
    try {
      it->second.set(base, value);
    } catch (const nlohmann::json::exception&) {
      fail_validation(key + ": wrong value type");
    } catch (const std::out_of_range& e) {
      fail_validation(key + ": must be " + e.what());
    }
  }
  base.validate();
  return base;
}

inline PipelineConfig read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail_io("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_validation(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j;
  for (const auto& [key, k] : detail::config_keys()) j[key] = k.get(c);
  j["feature_width"] = c.arch.feature_width();
  return j;
}

}  // namespace graphsc
