#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "loretta/container.hpp"
#include "loretta/datagen.hpp"
#include "loretta/model.hpp"
#include "loretta/optim.hpp"
#include "loretta/sequence.hpp"

namespace loretta {

// Model weights plus everything needed to resume: optimizer moments, step,
// strategy, training config, loader positions and tokenizer artifacts.
struct Checkpoint {
  ModelConfig model;
  TokenLayout layout;
  std::string strategy;
  std::int64_t step = 0;
  nlohmann::json train = nlohmann::json::object();
  nlohmann::json state = nlohmann::json::object();  // loader positions, counters
  Parameters<float> params;
  std::optional<OptimizerState<float>> optimizer;
  std::optional<TriModalTokenizer> tokenizer;

  Container to_container() const {
    Container c;
    c.meta = {{"kind", "loretta-checkpoint"}, {"model", model},  {"token_layout", layout.to_json()},
              {"strategy", strategy},         {"step", step},    {"train", train},
              {"state", state},               {"has_optimizer", optimizer.has_value()}};
    const auto& lay = params.layout();
    auto add = [&](const std::string& prefix, const TensorInfo& t, const float* base) {
      NamedTensor nt{prefix + t.name, {t.rows, t.cols}, DType::kF32, {}};
      nt.values.assign(base + t.offset, base + t.offset + t.size());
      c.tensors.push_back(std::move(nt));
    };
    for (const auto& t : lay.tensors()) add("", t, params.data().data());
    if (optimizer) {
      c.meta["optimizer_step"] = optimizer->step;
      for (const auto& t : lay.tensors()) add("adam.m.", t, optimizer->m.data());
      for (const auto& t : lay.tensors()) add("adam.v.", t, optimizer->v.data());
    }
    if (tokenizer) tokenizer->write_into(c);
    return c;
  }

  static Checkpoint from_container(const Container& c) {
    Checkpoint ck;
    try {
      if (c.meta.value("kind", "") != "loretta-checkpoint") throw FormatError("not a loretta checkpoint");
      ck.model = c.meta.at("model").get<ModelConfig>();
      ck.model.validate();
      ck.layout = TokenLayout::from_json(c.meta.at("token_layout"));
      if (static_cast<std::uint32_t>(ck.model.vocab_total) != ck.layout.vocab_total())
        throw FormatError("checkpoint: model vocabulary disagrees with token layout");
      ck.strategy = c.meta.at("strategy").get<std::string>();
      ck.step = c.meta.at("step").get<std::int64_t>();
      ck.train = c.meta.at("train");
      ck.state = c.meta.at("state");
      ck.params = Parameters<float>(ck.model);
      const auto& lay = ck.params.layout();
      auto read = [&](const std::string& prefix, const TensorInfo& t, float* base) {
        const auto& nt = c.tensor(prefix + t.name);
        if (nt.shape != std::vector<std::int64_t>{t.rows, t.cols} || nt.dtype != DType::kF32)
          throw FormatError("checkpoint: tensor " + nt.name + " has wrong shape or dtype");
        for (std::size_t i = 0; i < t.size(); ++i) base[t.offset + i] = static_cast<float>(nt.values[i]);
      };
      for (const auto& t : lay.tensors()) read("", t, ck.params.data().data());
      if (c.meta.at("has_optimizer").get<bool>()) {
        OptimizerState<float> st(lay.total());
        st.step = c.meta.at("optimizer_step").get<std::int64_t>();
        for (const auto& t : lay.tensors()) read("adam.m.", t, st.m.data());
        for (const auto& t : lay.tensors()) read("adam.v.", t, st.v.data());
        ck.optimizer = std::move(st);
      }
      if (c.meta.contains("tokenizer")) ck.tokenizer = TriModalTokenizer::read_from(c);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint header: ") + e.what());
    } catch (const InputError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
    for (float v : ck.params.data())
      if (!std::isfinite(v)) throw FormatError("checkpoint: non-finite parameter");
    return ck;
  }

  void save(const std::filesystem::path& path) const { to_container().save(path); }
  static Checkpoint load(const std::filesystem::path& path) { return from_container(Container::load(path)); }
};

}  // namespace loretta
