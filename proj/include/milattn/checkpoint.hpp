#pragma once

// Model checkpoints: one JSON document holding the architecture, every
// parameter tensor as nested arrays, and the optimizer state. Doubles are
// written in shortest round-trip form, so load(save(x)) is bit-exact.

#include "milattn/dataset_io.hpp"
#include "milattn/training.hpp"

namespace milattn {

struct Checkpoint {
  ModelParams model;
  AdamState adam;
};

inline json to_json(const ModelConfig& c) {
  return json{{"feature_dim", c.feature_dim},
              {"hidden_dim", c.hidden_dim},
              {"attention_dim", c.attention_dim},
              {"heads", c.heads},
              {"class_count", c.class_count},
              {"pooling", to_string(c.pooling)},
              {"normalization", to_string(c.normalization)},
              {"gated", c.gated},
              {"classifier", to_string(c.classifier)},
              {"experts", c.experts},
              {"context_gate", c.context_gate}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.feature_dim = j.at("feature_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.attention_dim = j.at("attention_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.class_count = j.at("class_count").get<int>();
  c.pooling = parse_pooling(j.at("pooling").get<std::string>());
  c.normalization = parse_normalization(j.at("normalization").get<std::string>());
  c.gated = j.at("gated").get<bool>();
  c.classifier = parse_classifier(j.at("classifier").get<std::string>());
  c.experts = j.at("experts").get<int>();
  c.context_gate = j.at("context_gate").get<bool>();
  c.validate();
  return c;
}

namespace io {

template <class T>
json tensor_to_json(const T& t) {
  if constexpr (T::ColsAtCompileTime == 1)
    return vector_to_json(t);
  else
    return matrix_to_json(t);
}

inline json params_to_json(const ModelParams& p) {
  json tensors = json::object();
  for_each_tensor([&](const std::string& name, const auto& t) { tensors[name] = tensor_to_json(t); }, p);
  return tensors;
}

/// Fills the tensors of `p` (already shaped by init_model) from `j`.
inline void params_from_json(ModelParams& p, const json& j) {
  for_each_tensor(
      [&](const std::string& name, auto& t) {
        if (!j.contains(name)) throw Error("checkpoint is missing tensor " + name);
        using T = std::decay_t<decltype(t)>;
        if constexpr (T::ColsAtCompileTime == 1) {
          t = vector_from_json(j[name], name, t.size());
        } else {
          Matrix m = matrix_from_json(j[name], name, t.cols());
          if (m.rows() != t.rows()) throw Error(name + " has " + std::to_string(m.rows()) + " rows, want " +
                                                std::to_string(t.rows()));
          t = std::move(m);
        }
      },
      p);
}

}  // namespace io

inline json to_json(const Checkpoint& c) {
  return json{{"format", "milattn-checkpoint-1"},
              {"config", to_json(c.model.config)},
              {"params", io::params_to_json(c.model)},
              {"optimizer",
               {{"lr", c.adam.lr},
                {"beta1", c.adam.beta1},
                {"beta2", c.adam.beta2},
                {"epsilon", c.adam.epsilon},
                {"step", c.adam.step},
                {"m", io::params_to_json(c.adam.m)},
                {"v", io::params_to_json(c.adam.v)}}}};
}

inline Checkpoint checkpoint_from_json(const json& j) {
  try {
    Checkpoint c;
    const auto cfg = model_config_from_json(j.at("config"));
    c.model = init_model(cfg, 0);
    io::params_from_json(c.model, j.at("params"));
    const auto& opt = j.at("optimizer");
    c.adam = AdamState::fresh(c.model, opt.at("lr").get<double>());
    c.adam.beta1 = opt.at("beta1").get<double>();
    c.adam.beta2 = opt.at("beta2").get<double>();
    c.adam.epsilon = opt.at("epsilon").get<double>();
    c.adam.step = opt.at("step").get<long long>();
    io::params_from_json(c.adam.m, opt.at("m"));
    io::params_from_json(c.adam.v, opt.at("v"));
    return c;
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 0);
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 0);
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  write_file_atomic(path, to_json(c).dump() + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what(), 0);
  }
  return checkpoint_from_json(j);
}

}  // namespace milattn
