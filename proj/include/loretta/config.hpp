#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "loretta/container.hpp"
#include "loretta/datagen.hpp"
#include "loretta/errors.hpp"
#include "loretta/evaluation.hpp"
#include "loretta/model.hpp"
#include "loretta/training.hpp"

namespace loretta {

struct EvalConfig {
  ProbeConfig probe;
  double sigma = 3.0;
  std::string subset = "test";
  std::string probe_pool = "probe";
  int cycle_samples = 200;
  int bootstrap_resamples = 1000;
};

inline void to_json(nlohmann::json& j, const EvalConfig& e) {
  j = {{"probe", e.probe},           {"sigma", e.sigma},
       {"subset", e.subset},         {"probe_pool", e.probe_pool},
       {"cycle_samples", e.cycle_samples}, {"bootstrap_resamples", e.bootstrap_resamples}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& e) {
  e.probe = j.at("probe").get<ProbeConfig>();
  e.sigma = j.at("sigma").get<double>();
  e.subset = j.at("subset").get<std::string>();
  e.probe_pool = j.at("probe_pool").get<std::string>();
  e.cycle_samples = j.at("cycle_samples").get<int>();
  e.bootstrap_resamples = j.at("bootstrap_resamples").get<int>();
}

// Everything a run can configure. Model vocabulary size and modality count
// come from the dataset and are not part of the file.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GenDataOptions data;
  EvalConfig eval;

  nlohmann::json to_json() const {
    return {{"model",
             {{"n_layers", model.n_layers},
              {"n_heads", model.n_heads},
              {"d_model", model.d_model},
              {"max_context", model.max_context},
              {"mlp_ratio", model.mlp_ratio},
              {"norm_eps", model.norm_eps}}},
            {"train", train},
            {"data", {{"split", data.split}, {"generator", data.generator}, {"tokenizer", tokenizer_json()}}},
            {"eval", eval}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    const auto& m = j.at("model");
    c.model.n_layers = m.at("n_layers").get<int>();
    c.model.n_heads = m.at("n_heads").get<int>();
    c.model.d_model = m.at("d_model").get<int>();
    c.model.max_context = m.at("max_context").get<int>();
    c.model.mlp_ratio = m.at("mlp_ratio").get<int>();
    c.model.norm_eps = m.at("norm_eps").get<double>();
    c.train = j.at("train").get<TrainConfig>();
    const auto& d = j.at("data");
    c.data.split = d.at("split").get<SplitSpec>();
    c.data.generator = d.at("generator").get<GeneratorParams>();
    const auto& t = d.at("tokenizer");
    c.data.tokenizer.image_levels = t.at("image_levels").get<int>();
    c.data.tokenizer.wave_patch = t.at("wave_patch").get<int>();
    c.data.tokenizer.wave_pca_dim = t.at("wave_pca_dim").get<int>();
    c.data.tokenizer.wave_codebook = t.at("wave_codebook").get<int>();
    c.eval = j.at("eval").get<EvalConfig>();
    return c;
  }

 private:
  // The k-means seed is derived from the data seed, so it is not a knob.
  nlohmann::json tokenizer_json() const {
    return {{"image_levels", data.tokenizer.image_levels},
            {"wave_patch", data.tokenizer.wave_patch},
            {"wave_pca_dim", data.tokenizer.wave_pca_dim},
            {"wave_codebook", data.tokenizer.wave_codebook}};
  }
};

// Overlays `patch` onto `base`; every key of `patch` must already exist in
// `base` with the same kind of value.
inline void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& path = "") {
  if (!patch.is_object()) throw UsageError("config: expected an object at '" + (path.empty() ? "/" : path) + "'");
  for (const auto& [k, v] : patch.items()) {
    const auto where = path.empty() ? k : path + "." + k;
    if (!base.contains(k)) throw UsageError("config: unknown key '" + where + "'");
    auto& slot = base[k];
    if (slot.is_object()) {
      merge_strict(slot, v, where);
    } else {
      const bool ok = slot.is_number_integer() ? v.is_number_integer()
                      : slot.is_number()       ? v.is_number()
                                               : slot.type() == v.type();
      if (!ok) throw UsageError("config: key '" + where + "' has the wrong type");
      slot = v;
    }
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  nlohmann::json patch;
  try {
    patch = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path.string() + ": " + e.what());
  }
  auto j = RunConfig{}.to_json();
  merge_strict(j, patch);
  try {
    return RunConfig::from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
}

}  // namespace loretta
