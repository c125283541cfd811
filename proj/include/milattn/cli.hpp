#pragma once

// `milattn` command-line driver. Each subcommand writes its outputs
// atomically and a <output>.manifest.json describing the run.
//
// Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 numeric failure.

#include "milattn/checkpoint.hpp"
#include "milattn/evaluation.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <sstream>

namespace milattn::cli {

inline constexpr const char* kVersion = "milattn 1.0.0";

enum ExitCode { kOk = 0, kCheckFailed = 1, kUsage = 2, kNumeric = 3 };

namespace detail {

/// Appends `--key value` for every entry of the JSON object in --config that
/// is not already given on the command line (flags > config > defaults).
inline std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  json cfg;
  try {
    cfg = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!cfg.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
  auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
  };
  std::vector<std::string> extra;
  for (const auto& [key, value] : cfg.items()) {
    const std::string flag = "--" + key;
    if (key == "config" || given(flag)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) extra.push_back(flag);
    } else if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
      extra.insert(extra.end(), {flag, joined});
    } else {
      extra.insert(extra.end(), {flag, value.is_string() ? value.get<std::string>() : value.dump()});
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

inline std::vector<double> parse_weights(const std::string& s) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    std::size_t used = 0;
    double w = 0.0;
    try {
      w = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ConfigError("bad weight '" + item + "'");
    out.push_back(w);
  }
  return out;
}

struct Manifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();

  void write(const std::filesystem::path& path) const {
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    json j{{"command", command}, {"config", config},   {"seed", seed},   {"inputs", inputs},
           {"outputs", outputs}, {"version", kVersion}, {"duration_s", secs}};
    write_file_atomic(path, j.dump(2) + "\n");
  }
};

inline std::filesystem::path manifest_path(const std::filesystem::path& output) {
  auto p = output;
  p += ".manifest.json";
  return p;
}

inline std::string loss_trace_csv(const std::vector<double>& trace) {
  std::string out = "step,loss\n";
  for (std::size_t i = 0; i < trace.size(); ++i)
    out += std::to_string(i) + "," + milattn::detail::format_double(trace[i]) + "\n";
  return out;
}

}  // namespace detail

struct ModelOptions {
  std::string pooling = "gated-attention";
  int heads = 8;
  std::string norm = "softmax";
  std::string classifier = "logistic";
  int experts = 2;
  int hidden = 32;
  int attention_dim = 16;
  bool no_context_gate = false;
  bool ungated = false;

  void add_to(CLI::App* app) {
    app->add_option("--pooling", pooling, "mean|max|attention|gated-attention|multi-attention");
    app->add_option("--heads", heads, "attention heads for multi-attention");
    app->add_option("--norm", norm, "softmax|sparsemax");
    app->add_option("--classifier", classifier, "logistic|moe");
    app->add_option("--experts", experts, "mixture-of-experts expert count");
    app->add_option("--hidden", hidden, "projected feature dimension D'");
    app->add_option("--attn-dim", attention_dim, "attention hidden size L");
    app->add_flag("--no-context-gate", no_context_gate, "disable context gating");
    app->add_flag("--ungated", ungated, "multi-attention heads without the sigmoid gate");
  }

  ModelConfig resolve(int feature_dim, int class_count) const {
    ModelConfig c;
    c.feature_dim = feature_dim;
    c.class_count = class_count;
    c.hidden_dim = hidden;
    c.attention_dim = attention_dim;
    c.heads = heads;
    c.pooling = parse_pooling(pooling);
    c.normalization = parse_normalization(norm);
    c.gated = !ungated;
    c.classifier = parse_classifier(classifier);
    c.experts = experts;
    c.context_gate = !no_context_gate;
    c.validate();
    return c;
  }
};

inline void add_train_options(CLI::App* app, TrainConfig& tc, std::string& sampling, bool phase1) {
  int& steps = phase1 ? tc.phase1_steps : tc.phase2_steps;
  app->add_option("--steps", steps, "optimizer steps");
  app->add_option("--batch", tc.batch_size, "batch size");
  app->add_option("--lr", tc.lr, "Adam learning rate");
  app->add_option("--seed", tc.seed, "random seed");
  if (phase1) app->add_option("--sampling", sampling, "random:N|one-in-five");
}

inline json train_config_json(const TrainConfig& tc, int steps) {
  return json{{"steps", steps},       {"batch", tc.batch_size},       {"lr", tc.lr},
              {"beta1", tc.beta1},    {"beta2", tc.beta2},            {"adam_epsilon", tc.adam_epsilon},
              {"seed", tc.seed},      {"sampling", tc.sampling.to_string()}};
}

/// Random instance for gradcheck: resampled until every non-smooth point is
/// at least `margin` away so central differences are meaningful.
inline std::tuple<ModelParams, Matrix, Vector> tiny_instance(ModelConfig cfg, std::uint64_t seed,
                                                             double margin = 1e-3) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, 0x71717, attempt));
    ModelParams model = init_model(cfg, rng.next());
    // Nonzero biases so every tensor sees a generic point.
    for_each_tensor(
        [&](const std::string&, auto& t) {
          for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += 0.3 * rng.normal();
        },
        model);
    const Eigen::Index k = 2 + static_cast<Eigen::Index>(rng.index(5));
    Matrix frames(k, cfg.feature_dim);
    for (Eigen::Index i = 0; i < frames.size(); ++i) frames.data()[i] = rng.normal();
    Vector labels(cfg.class_count);
    for (Eigen::Index c = 0; c < labels.size(); ++c) labels(c) = rng.uniform() < 0.5 ? 1.0 : 0.0;
    if (attempt < 1000 && smoothness_margin(model, forward_trace(model, frames)) < margin) continue;
    return {std::move(model), std::move(frames), std::move(labels)};
  }
}

inline int run(std::vector<std::string> args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Attention-based multiple-instance learning for temporal localization", "milattn"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  std::string config_path;
  auto add_config = [&](CLI::App* sub) { sub->add_option("--config", config_path, "JSON file mirroring the flags"); };

  // gen-data
  SyntheticConfig gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate the synthetic planted-segment corpus");
  gen_cmd->add_option("--out", gen_out, "output directory")->required();
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--classes", gen.class_count);
  gen_cmd->add_option("--dim", gen.feature_dim);
  gen_cmd->add_option("--bags", gen.bags_per_split, "bags per split");
  gen_cmd->add_option("--frames-min", gen.min_frames);
  gen_cmd->add_option("--frames-max", gen.max_frames);
  gen_cmd->add_option("--labels-min", gen.min_labels);
  gen_cmd->add_option("--labels-max", gen.max_labels);
  gen_cmd->add_option("--snr", gen.prototype_strength, "prototype strength");
  gen_cmd->add_option("--segments-per-bag", gen.segments_per_bag);
  gen_cmd->add_option("--localizable", gen.localizable_classes, "size of the evaluation subset (0 = 4n/5)");
  gen_cmd->add_option("--localizable-weight", gen.localizable_weight);
  add_config(gen_cmd);

  // train
  ModelOptions model_opts;
  TrainConfig train_cfg;
  std::string sampling = "random:120";
  std::string train_path, vocab_path, out_path, trace_path;
  auto* train_cmd = app.add_subcommand("train", "phase 1: train on bag-level labels");
  train_cmd->add_option("--train", train_path, "bag file")->required();
  train_cmd->add_option("--vocab", vocab_path)->required();
  train_cmd->add_option("--out", out_path, "checkpoint path")->required();
  train_cmd->add_option("--loss-trace", trace_path, "loss CSV (default <out>.loss.csv)");
  model_opts.add_to(train_cmd);
  add_train_options(train_cmd, train_cfg, sampling, true);
  add_config(train_cmd);

  // finetune
  std::string model_path, segments_path;
  TrainConfig ft_cfg;
  ft_cfg.lr = 1e-4;
  bool fresh_optimizer = false;
  auto* ft_cmd = app.add_subcommand("finetune", "phase 2: fine-tune on labeled segments");
  ft_cmd->add_option("--model", model_path)->required();
  ft_cmd->add_option("--segments", segments_path)->required();
  ft_cmd->add_option("--vocab", vocab_path)->required();
  ft_cmd->add_option("--out", out_path)->required();
  ft_cmd->add_option("--loss-trace", trace_path);
  add_train_options(ft_cmd, ft_cfg, sampling, false);
  ft_cmd->add_flag("--fresh-optimizer", fresh_optimizer, "reset Adam moments instead of resuming the checkpoint's");
  add_config(ft_cmd);

  // predict
  auto* pred_cmd = app.add_subcommand("predict", "score segments into a submission CSV");
  pred_cmd->add_option("--model", model_path)->required();
  pred_cmd->add_option("--segments", segments_path)->required();
  pred_cmd->add_option("--vocab", vocab_path)->required();
  pred_cmd->add_option("--out", out_path)->required();
  add_config(pred_cmd);

  // eval
  std::string submission_path;
  std::size_t top_k = kDefaultTopK;
  auto* eval_cmd = app.add_subcommand("eval", "MAP@K of a submission against labeled segments");
  eval_cmd->add_option("--submission", submission_path)->required();
  eval_cmd->add_option("--segments", segments_path, "ground-truth segment file")->required();
  eval_cmd->add_option("--vocab", vocab_path)->required();
  eval_cmd->add_option("--top-k", top_k, "rank cutoff K_s")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--out", out_path, "metric JSON")->required();
  add_config(eval_cmd);

  // ensemble
  std::string inputs_arg, weights_arg;
  auto* ens_cmd = app.add_subcommand("ensemble", "weighted blend of submission files");
  ens_cmd->add_option("--inputs", inputs_arg, "comma-separated submission files")->required();
  ens_cmd->add_option("--weights", weights_arg, "comma-separated weights summing to 1")->required();
  ens_cmd->add_option("--out", out_path)->required();
  add_config(ens_cmd);

  // gradcheck
  ModelOptions gc_model;
  gc_model.heads = 2;
  gc_model.hidden = 3;
  gc_model.attention_dim = 2;
  double tolerance = 1e-4;
  std::uint64_t gc_seed = 1;
  int gc_dim = 4, gc_classes = 3;
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference check of the full model gradient");
  gc_model.add_to(gc_cmd);
  gc_cmd->add_option("--dim", gc_dim);
  gc_cmd->add_option("--classes", gc_classes);
  gc_cmd->add_option("--seed", gc_seed);
  gc_cmd->add_option("--tolerance", tolerance);
  gc_cmd->add_option("--out", out_path, "report JSON (default stdout)");
  add_config(gc_cmd);

  // inspect-attention
  std::string bags_path, bag_id;
  auto* ins_cmd = app.add_subcommand("inspect-attention", "dump per-head attention weights over a bag");
  ins_cmd->add_option("--model", model_path)->required();
  ins_cmd->add_option("--bags", bags_path, "bag file")->required();
  ins_cmd->add_option("--bag-id", bag_id)->required();
  ins_cmd->add_option("--out", out_path, "JSON output (default stdout)");
  add_config(ins_cmd);

  try {
    args = detail::expand_config(std::move(args));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const CLI::App* failing = &app;
    for (auto* sub : app.get_subcommands()) failing = sub;
    err << failing->help();
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  detail::Manifest manifest;
  try {
    if (gen_cmd->parsed()) {
      manifest.command = "gen-data";
      manifest.seed = gen.seed;
      manifest.config = {{"classes", gen.class_count},
                         {"dim", gen.feature_dim},
                         {"bags", gen.bags_per_split},
                         {"frames_min", gen.min_frames},
                         {"frames_max", gen.max_frames},
                         {"labels_min", gen.min_labels},
                         {"labels_max", gen.max_labels},
                         {"snr", gen.prototype_strength},
                         {"segment_length", gen.planted_segment_length},
                         {"segments_per_bag", gen.segments_per_bag},
                         {"localizable", gen.resolved_localizable()},
                         {"localizable_weight", gen.localizable_weight}};
      const auto corpus = generate_synthetic_corpus(gen);
      const std::filesystem::path dir = gen_out;
      save_dataset(dir / "train.jsonl", corpus.train_bags);
      save_dataset(dir / "segments.jsonl", corpus.labeled_segments);
      save_dataset(dir / "test.jsonl", corpus.test_segments);
      save_dataset(dir / "val_bags.jsonl", corpus.validation_bags);
      save_dataset(dir / "test_bags.jsonl", corpus.test_bags);
      save_vocabulary(dir / "vocab.json", corpus.vocab);
      write_file_atomic(dir / "plants.json", plants_to_json(corpus.plants).dump() + "\n");
      for (const char* f : {"train.jsonl", "segments.jsonl", "test.jsonl", "val_bags.jsonl", "test_bags.jsonl",
                            "vocab.json", "plants.json"})
        manifest.outputs.push_back((dir / f).string());
      manifest.write(dir / "manifest.json");
      out << "train bags: " << corpus.train_bags.size() << ", labeled segments: " << corpus.labeled_segments.size()
          << ", test segments: " << corpus.test_segments.size() << "\n";
      return kOk;
    }

    if (train_cmd->parsed()) {
      train_cfg.sampling = SamplingScheme::parse(sampling);
      const auto vocab = load_vocabulary(vocab_path);
      const auto bags = load_bags(train_path);
      if (bags.empty()) throw ConfigError("no bags in " + train_path);
      const auto mcfg = model_opts.resolve(static_cast<int>(bags.front().frames.cols()), vocab.class_count);
      const auto init = init_model(mcfg, derive_seed(train_cfg.seed, 0x1417));
      auto result = train_phase1(init, bags, vocab, train_cfg);
      if (trace_path.empty()) trace_path = out_path + ".loss.csv";
      save_checkpoint(out_path, {result.model, result.adam});
      write_file_atomic(trace_path, detail::loss_trace_csv(result.loss_trace));
      manifest.command = "train";
      manifest.seed = train_cfg.seed;
      manifest.config = {{"model", to_json(mcfg)}, {"train", train_config_json(train_cfg, train_cfg.phase1_steps)}};
      manifest.inputs = {train_path, vocab_path};
      manifest.outputs = {out_path, trace_path};
      manifest.write(detail::manifest_path(out_path));
      if (!result.loss_trace.empty()) out << "final loss: " << result.loss_trace.back() << "\n";
      return kOk;
    }

    if (ft_cmd->parsed()) {
      const auto vocab = load_vocabulary(vocab_path);
      const auto segments = load_segments(segments_path);
      const auto ckpt = load_checkpoint(model_path);
      auto result = finetune_phase2(ckpt.model, segments, vocab, ft_cfg, fresh_optimizer ? nullptr : &ckpt.adam);
      if (trace_path.empty()) trace_path = out_path + ".loss.csv";
      save_checkpoint(out_path, {result.model, result.adam});
      write_file_atomic(trace_path, detail::loss_trace_csv(result.loss_trace));
      manifest.command = "finetune";
      manifest.seed = ft_cfg.seed;
      json tc = train_config_json(ft_cfg, ft_cfg.phase2_steps);
      tc.erase("sampling");
      tc["resume_optimizer"] = !fresh_optimizer;
      manifest.config = {{"model", to_json(ckpt.model.config)}, {"train", tc}};
      manifest.inputs = {model_path, segments_path, vocab_path};
      manifest.outputs = {out_path, trace_path};
      manifest.write(detail::manifest_path(out_path));
      if (!result.loss_trace.empty()) out << "final loss: " << result.loss_trace.back() << "\n";
      return kOk;
    }

    if (pred_cmd->parsed()) {
      const auto vocab = load_vocabulary(vocab_path);
      const auto segments = load_segments(segments_path);
      const auto ckpt = load_checkpoint(model_path);
      write_submission(predict_segments(ckpt.model, segments, vocab), out_path);
      manifest.command = "predict";
      manifest.config = {{"model", to_json(ckpt.model.config)}};
      manifest.inputs = {model_path, segments_path, vocab_path};
      manifest.outputs = {out_path};
      manifest.write(detail::manifest_path(out_path));
      return kOk;
    }

    if (eval_cmd->parsed()) {
      const auto vocab = load_vocabulary(vocab_path);
      const auto gt = GroundTruth::from_segments(load_segments(segments_path), vocab);
      MetricConfig mc;
      mc.top_k = top_k;
      mc.classes = vocab.localizable_ids();
      const auto report = map_at_k(read_submission(submission_path), gt, mc);
      write_file_atomic(out_path, to_json(report).dump(2) + "\n");
      manifest.command = "eval";
      manifest.config = {{"top_k", top_k}};
      manifest.inputs = {submission_path, segments_path, vocab_path};
      manifest.outputs = {out_path};
      manifest.write(detail::manifest_path(out_path));
      out << "MAP@" << top_k << ": " << report.map << "\n";
      return kOk;
    }

    if (ens_cmd->parsed()) {
      const auto inputs = detail::split_list(inputs_arg);
      const auto weights = detail::parse_weights(weights_arg);
      std::vector<PredictionSet> sets;
      for (const auto& p : inputs) sets.push_back(read_submission(p));
      write_submission(ensemble_blend(sets, weights), out_path);
      manifest.command = "ensemble";
      manifest.config = {{"weights", weights}};
      manifest.inputs = inputs;
      manifest.outputs = {out_path};
      manifest.write(detail::manifest_path(out_path));
      return kOk;
    }

    if (gc_cmd->parsed()) {
      const auto mcfg = gc_model.resolve(gc_dim, gc_classes);
      auto [model, frames, labels] = tiny_instance(mcfg, gc_seed);
      const Vector weights = Vector::Ones(gc_classes);
      const auto report = gradient_check(model, frames, labels, weights, tolerance);
      json groups = json::array();
      for (const auto& g : report.groups)
        groups.push_back({{"name", g.name}, {"entries", g.entries}, {"max_rel_error", g.max_rel_error}});
      const json j{{"max_rel_error", report.max_rel_error},
                   {"worst_parameter", report.worst_parameter},
                   {"tolerance", tolerance},
                   {"passed", report.passed},
                   {"model", to_json(mcfg)},
                   {"groups", groups}};
      if (out_path.empty()) {
        out << j.dump(2) << "\n";
      } else {
        write_file_atomic(out_path, j.dump(2) + "\n");
        manifest.command = "gradcheck";
        manifest.seed = gc_seed;
        manifest.config = {{"model", to_json(mcfg)}, {"tolerance", tolerance}};
        manifest.outputs = {out_path};
        manifest.write(detail::manifest_path(out_path));
      }
      return report.passed ? kOk : kCheckFailed;
    }

    if (ins_cmd->parsed()) {
      const auto ckpt = load_checkpoint(model_path);
      const auto bags = load_bags(bags_path);
      auto it = std::find_if(bags.begin(), bags.end(), [&](const Bag& b) { return b.id == bag_id; });
      if (it == bags.end()) throw ConfigError("bag '" + bag_id + "' not found in " + bags_path);
      const auto fr = forward(ckpt.model, it->frames);
      json heads = json::object();
      for (std::size_t m = 0; m < fr.head_weights.size(); ++m)
        heads[std::to_string(m)] = io::vector_to_json(fr.head_weights[m]);
      const json j{{"bag_id", bag_id},
                   {"frames", it->frame_count()},
                   {"pooling", to_string(ckpt.model.config.pooling)},
                   {"heads", heads}};
      if (out_path.empty()) {
        out << j.dump() << "\n";
      } else {
        write_file_atomic(out_path, j.dump() + "\n");
        manifest.command = "inspect-attention";
        manifest.config = {{"bag_id", bag_id}};
        manifest.inputs = {model_path, bags_path};
        manifest.outputs = {out_path};
        manifest.write(detail::manifest_path(out_path));
      }
      return kOk;
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), out, err);
}

}  // namespace milattn::cli
