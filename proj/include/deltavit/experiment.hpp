#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include "json.hpp"

#include "deltavit/checkpoint.hpp"
#include "deltavit/classifier.hpp"
#include "deltavit/common.hpp"
#include "deltavit/encoder.hpp"
#include "deltavit/protocol.hpp"
#include "deltavit/synthetic.hpp"
#include "deltavit/trainer.hpp"

// Experiment assembly: a strict JSON config schema (unknown keys rejected,
// errors name the offending field), deterministic seed fan-out to every
// stochastic component, and machine-readable result emission. Two runs with
// the same config and seed produce byte-identical results.json except for
// the "timing" object.

namespace deltavit {

// ---------------------------------------------------------------------------
// Config model
// ---------------------------------------------------------------------------

struct ProtocolConfig {
  std::size_t base_classes = 20;
  std::size_t ways = 5;
  std::size_t shots = 5;
  std::size_t incremental_sessions = 4;

  void validate() const {
    if (base_classes == 0)
      throw ConfigError("protocol.base_classes: must be positive");
    if (incremental_sessions > 0 && ways == 0)
      throw ConfigError("protocol.ways: must be positive when sessions are scheduled");
    if (incremental_sessions > 0 && shots == 0)
      throw ConfigError("protocol.shots: must be positive when sessions are scheduled");
  }
};

enum class DataSource { synthetic, file };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  SyntheticConfig synthetic;  // image geometry is tied to the encoder config
  std::string path;           // dataset binary, when source == file

  void validate() const {
    if (source == DataSource::file && path.empty())
      throw ConfigError("data.path: required when data.source is \"file\"");
  }
};

struct ExperimentConfig {
  EncoderConfig encoder;
  TrainConfig trainer;
  ProtocolConfig protocol;
  DataConfig data;
  Precision precision = Precision::float64;
  std::uint64_t seed = 0;
  unsigned workers = 1;
  std::string output = "out";

  void validate() const {
    encoder.validate();
    trainer.validate();
    protocol.validate();
    data.validate();
    if (data.source == DataSource::synthetic) {
      SyntheticConfig s = data.synthetic;
      s.image_size = encoder.image_size;
      s.channels = encoder.channels;
      s.validate();
    }
    if (workers == 0) throw ConfigError("workers: must be positive");
    if (output.empty()) throw ConfigError("output: must not be empty");
  }
};

// ---------------------------------------------------------------------------
// Strict JSON parsing
// ---------------------------------------------------------------------------

namespace detail {

inline void require_object(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object())
    throw ConfigError(path + ": expected an object, got " + std::string(j.type_name()));
}

inline void reject_unknown(const nlohmann::json& j, const std::string& path,
                           std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known |= (key == a);
    if (!known) throw ConfigError(path + "." + key + ": unknown field");
  }
}

inline std::uint64_t get_uint(const nlohmann::json& j, const std::string& path,
                              const char* key, std::uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    throw ConfigError(path + "." + key + ": expected a non-negative integer");
  return v.get<std::uint64_t>();
}

inline double get_number(const nlohmann::json& j, const std::string& path,
                         const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_number()) throw ConfigError(path + "." + key + ": expected a number");
  return v.get<double>();
}

inline bool get_bool(const nlohmann::json& j, const std::string& path,
                     const char* key, bool fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_boolean()) throw ConfigError(path + "." + key + ": expected a boolean");
  return v.get<bool>();
}

inline std::string get_string(const nlohmann::json& j, const std::string& path,
                              const char* key, const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  const auto& v = j.at(key);
  if (!v.is_string()) throw ConfigError(path + "." + key + ": expected a string");
  return v.get<std::string>();
}

inline const nlohmann::json& require_field(const nlohmann::json& j,
                                           const std::string& path,
                                           const char* key) {
  if (!j.contains(key)) throw ConfigError(path + "." + key + ": missing required field");
  return j.at(key);
}

}  // namespace detail

inline EncoderConfig parse_encoder_config(const nlohmann::json& j,
                                          const std::string& path) {
  detail::require_object(j, path);
  detail::reject_unknown(j, path,
                         {"image_size", "channels", "patch_size", "embed_dim",
                          "depth", "heads", "mlp_hidden", "adapted_blocks",
                          "update_target", "share_updates", "layer_norm_eps"});
  EncoderConfig c;
  c.image_size = detail::get_uint(j, path, "image_size", c.image_size);
  c.channels = detail::get_uint(j, path, "channels", c.channels);
  c.patch_size = detail::get_uint(j, path, "patch_size", c.patch_size);
  c.embed_dim = detail::get_uint(j, path, "embed_dim", c.embed_dim);
  c.depth = detail::get_uint(j, path, "depth", c.depth);
  c.heads = detail::get_uint(j, path, "heads", c.heads);
  c.mlp_hidden = detail::get_uint(j, path, "mlp_hidden", c.mlp_hidden);
  c.adapted_blocks = j.contains("adapted_blocks")
                         ? detail::get_uint(j, path, "adapted_blocks", 0)
                         : c.depth;
  const std::string target =
      detail::get_string(j, path, "update_target", "attention_qkv");
  if (target == "attention_qkv") {
    c.update_target = UpdateTarget::attention_qkv;
  } else if (target == "mlp") {
    c.update_target = UpdateTarget::mlp;
  } else {
    throw ConfigError(path + ".update_target: expected \"attention_qkv\" or \"mlp\"");
  }
  c.share_updates = detail::get_bool(j, path, "share_updates", c.share_updates);
  c.layer_norm_eps = detail::get_number(j, path, "layer_norm_eps", c.layer_norm_eps);
  return c;
}

inline TrainConfig parse_trainer_config(const nlohmann::json& j,
                                        const std::string& path) {
  detail::require_object(j, path);
  detail::reject_unknown(
      j, path, {"epochs", "batch_size", "learning_rate", "momentum", "temperature"});
  TrainConfig c;
  c.epochs = detail::get_uint(j, path, "epochs", c.epochs);
  c.batch_size = detail::get_uint(j, path, "batch_size", c.batch_size);
  c.learning_rate = detail::get_number(j, path, "learning_rate", c.learning_rate);
  c.momentum = detail::get_number(j, path, "momentum", c.momentum);
  c.temperature = detail::get_number(j, path, "temperature", c.temperature);
  return c;
}

inline ProtocolConfig parse_protocol_config(const nlohmann::json& j,
                                            const std::string& path) {
  detail::require_object(j, path);
  detail::reject_unknown(j, path,
                         {"base_classes", "ways", "shots", "incremental_sessions"});
  ProtocolConfig c;
  detail::require_field(j, path, "base_classes");
  detail::require_field(j, path, "ways");
  detail::require_field(j, path, "shots");
  detail::require_field(j, path, "incremental_sessions");
  c.base_classes = detail::get_uint(j, path, "base_classes", 0);
  c.ways = detail::get_uint(j, path, "ways", 0);
  c.shots = detail::get_uint(j, path, "shots", 0);
  c.incremental_sessions = detail::get_uint(j, path, "incremental_sessions", 0);
  return c;
}

inline DataConfig parse_data_config(const nlohmann::json& j,
                                    const std::string& path) {
  detail::require_object(j, path);
  detail::reject_unknown(j, path, {"source", "synthetic", "path"});
  DataConfig c;
  const std::string source =
      detail::get_string(j, path, "source", "synthetic");
  if (source == "synthetic") {
    c.source = DataSource::synthetic;
  } else if (source == "file") {
    c.source = DataSource::file;
  } else {
    throw ConfigError(path + ".source: expected \"synthetic\" or \"file\"");
  }
  if (j.contains("synthetic")) {
    const auto& s = j.at("synthetic");
    const std::string spath = path + ".synthetic";
    detail::require_object(s, spath);
    detail::reject_unknown(s, spath,
                           {"classes", "samples_per_class", "separation",
                            "noise_std", "nuisance_dims", "nuisance_std",
                            "train_fraction"});
    c.synthetic.classes = detail::get_uint(s, spath, "classes", c.synthetic.classes);
    c.synthetic.samples_per_class =
        detail::get_uint(s, spath, "samples_per_class", c.synthetic.samples_per_class);
    c.synthetic.separation =
        detail::get_number(s, spath, "separation", c.synthetic.separation);
    c.synthetic.noise_std =
        detail::get_number(s, spath, "noise_std", c.synthetic.noise_std);
    c.synthetic.nuisance_dims =
        detail::get_uint(s, spath, "nuisance_dims", c.synthetic.nuisance_dims);
    c.synthetic.nuisance_std =
        detail::get_number(s, spath, "nuisance_std", c.synthetic.nuisance_std);
    c.synthetic.train_fraction =
        detail::get_number(s, spath, "train_fraction", c.synthetic.train_fraction);
  }
  c.path = detail::get_string(j, path, "path", "");
  return c;
}

/// Parses and validates a full experiment config. Field errors carry the
/// dotted path of the offending key.
inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  detail::require_object(j, "config");
  detail::reject_unknown(j, "config",
                         {"encoder", "trainer", "protocol", "data", "seed",
                          "precision", "workers", "output"});
  ExperimentConfig c;
  if (j.contains("encoder")) c.encoder = parse_encoder_config(j.at("encoder"), "encoder");
  if (j.contains("trainer")) c.trainer = parse_trainer_config(j.at("trainer"), "trainer");
  c.protocol =
      parse_protocol_config(detail::require_field(j, "config", "protocol"), "protocol");
  c.data = parse_data_config(detail::require_field(j, "config", "data"), "data");
  c.seed = detail::get_uint(j, "config", "seed", 0);
  const std::string precision = detail::get_string(j, "config", "precision", "float64");
  if (precision == "float64") {
    c.precision = Precision::float64;
  } else if (precision == "float32") {
    c.precision = Precision::float32;
  } else {
    throw ConfigError("config.precision: expected \"float64\" or \"float32\"");
  }
  c.workers = static_cast<unsigned>(detail::get_uint(j, "config", "workers", 1));
  c.output = detail::get_string(j, "config", "output", c.output);
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("config file " + file + " cannot be opened");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + file + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

/// Round-trip serialization: parse_experiment_config(config_to_json(c))
/// reproduces c field for field.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["encoder"] = {
      {"image_size", c.encoder.image_size},
      {"channels", c.encoder.channels},
      {"patch_size", c.encoder.patch_size},
      {"embed_dim", c.encoder.embed_dim},
      {"depth", c.encoder.depth},
      {"heads", c.encoder.heads},
      {"mlp_hidden", c.encoder.mlp_hidden},
      {"adapted_blocks", c.encoder.adapted_blocks},
      {"update_target", c.encoder.update_target == UpdateTarget::attention_qkv
                            ? "attention_qkv"
                            : "mlp"},
      {"share_updates", c.encoder.share_updates},
      {"layer_norm_eps", c.encoder.layer_norm_eps},
  };
  j["trainer"] = {
      {"epochs", c.trainer.epochs},
      {"batch_size", c.trainer.batch_size},
      {"learning_rate", c.trainer.learning_rate},
      {"momentum", c.trainer.momentum},
      {"temperature", c.trainer.temperature},
  };
  j["protocol"] = {
      {"base_classes", c.protocol.base_classes},
      {"ways", c.protocol.ways},
      {"shots", c.protocol.shots},
      {"incremental_sessions", c.protocol.incremental_sessions},
  };
  j["data"] = {
      {"source", c.data.source == DataSource::synthetic ? "synthetic" : "file"},
      {"synthetic",
       {
           {"classes", c.data.synthetic.classes},
           {"samples_per_class", c.data.synthetic.samples_per_class},
           {"separation", c.data.synthetic.separation},
           {"noise_std", c.data.synthetic.noise_std},
           {"nuisance_dims", c.data.synthetic.nuisance_dims},
           {"nuisance_std", c.data.synthetic.nuisance_std},
           {"train_fraction", c.data.synthetic.train_fraction},
       }},
  };
  if (!c.data.path.empty()) j["data"]["path"] = c.data.path;
  j["seed"] = c.seed;
  j["precision"] = c.precision == Precision::float64 ? "float64" : "float32";
  j["workers"] = c.workers;
  j["output"] = c.output;
  return j;
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// Everything a run emits, in serializable form (precision-independent).
struct RunOutput {
  nlohmann::json results;  // full document; timing lives under "timing" only
  nlohmann::json plan;
  std::vector<StepRecord> steps;
  SessionReport report;
  ParamCounts parameters;
  double base_train_accuracy = 0.0;
};

/// Synthetic geometry always follows the encoder's input contract.
inline SyntheticConfig resolved_synthetic(const ExperimentConfig& cfg) {
  SyntheticConfig s = cfg.data.synthetic;
  s.image_size = cfg.encoder.image_size;
  s.channels = cfg.encoder.channels;
  return s;
}

template <typename S>
std::vector<LabeledSample<S>> materialize_dataset(const ExperimentConfig& cfg) {
  if (cfg.data.source == DataSource::file) {
    return load_dataset<S>(cfg.data.path);
  }
  return generate_synthetic_dataset<S>(resolved_synthetic(cfg),
                                       derive_seed(cfg.seed, seeds::kData));
}

template <typename S>
RunOutput execute_experiment(const ExperimentConfig& cfg) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();

  std::vector<LabeledSample<S>> dataset = materialize_dataset<S>(cfg);
  SessionPlan<S> plan = build_session_plan(
      dataset, cfg.protocol.base_classes, cfg.protocol.ways, cfg.protocol.shots,
      cfg.protocol.incremental_sessions, derive_seed(cfg.seed, seeds::kPlan));
  EncoderModel<S> model =
      make_encoder<S>(cfg.encoder, derive_seed(cfg.seed, seeds::kEncoder));
  ClassifierState<S> classifier = make_classifier<S>(
      plan.sessions.front().class_ids, cfg.encoder.embed_dim,
      static_cast<S>(cfg.trainer.temperature), derive_seed(cfg.seed, seeds::kClassifier));

  ExperimentResult<S> result = run_full_experiment(model, classifier, plan,
                                                   cfg.trainer, cfg.seed, cfg.workers);

  RunOutput out;
  out.steps = std::move(result.steps);
  out.report = result.report;
  out.parameters = result.parameters;
  out.base_train_accuracy = result.base_train_accuracy;
  out.plan = plan_to_json(plan);

  nlohmann::json sessions = nlohmann::json::array();
  std::size_t classes_seen = 0;
  std::size_t tests_seen = 0;
  for (std::size_t t = 0; t < plan.sessions.size(); ++t) {
    classes_seen += plan.sessions[t].class_ids.size();
    tests_seen += plan.sessions[t].test.size();
    sessions.push_back({{"index", t},
                        {"new_classes", plan.sessions[t].class_ids.size()},
                        {"classes_seen", classes_seen},
                        {"test_samples", tests_seen},
                        {"accuracy", out.report.per_session_accuracy[t]}});
  }

  nlohmann::json doc;
  doc["config"] = config_to_json(cfg);
  doc["sessions"] = sessions;
  doc["metrics"] = {{"s_base", out.report.s_base},
                    {"s_last", out.report.s_last},
                    {"s_avg", out.report.s_avg},
                    {"pd", out.report.pd}};
  doc["parameters"] = {
      {"delta", out.parameters.delta_params},
      {"bias", out.parameters.bias_params},
      {"classifier", out.parameters.classifier_params},
      {"total", out.parameters.delta_params + out.parameters.bias_params +
                    out.parameters.classifier_params}};
  doc["base_train_accuracy"] = out.base_train_accuracy;
  doc["timing"] = {
      {"base_train_seconds", result.base_train_seconds},
      {"session_seconds", result.session_seconds},
      {"total_seconds", std::chrono::duration<double>(clock::now() - t0).count()}};
  out.results = std::move(doc);
  return out;
}

inline RunOutput execute_experiment(const ExperimentConfig& cfg) {
  return cfg.precision == Precision::float64 ? execute_experiment<double>(cfg)
                                             : execute_experiment<float>(cfg);
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed on " + path.string());
}

inline std::string pct2(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * fraction);
  return buf;
}

}  // namespace detail

/// Writes results.json, sessions.csv, train_log.jsonl, and plan.json into dir.
inline void write_run_outputs(const std::filesystem::path& dir, const RunOutput& out) {
  std::filesystem::create_directories(dir);
  detail::write_text(dir / "results.json", out.results.dump(2) + "\n");
  detail::write_text(dir / "plan.json", out.plan.dump(2) + "\n");

  std::string csv = "session,new_classes,classes_seen,test_samples,accuracy_pct\n";
  for (const auto& row : out.results.at("sessions")) {
    csv += std::to_string(row.at("index").get<std::size_t>()) + ',' +
           std::to_string(row.at("new_classes").get<std::size_t>()) + ',' +
           std::to_string(row.at("classes_seen").get<std::size_t>()) + ',' +
           std::to_string(row.at("test_samples").get<std::size_t>()) + ',' +
           detail::pct2(row.at("accuracy").get<double>()) + '\n';
  }
  detail::write_text(dir / "sessions.csv", csv);

  std::string log;
  for (const auto& s : out.steps) {
    nlohmann::json line = {
        {"session", s.session}, {"epoch", s.epoch}, {"step", s.step}, {"loss", s.loss}};
    log += line.dump() + '\n';
  }
  detail::write_text(dir / "train_log.jsonl", log);
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

enum class SweepAxis { adapted_blocks, update_target };

inline SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "adapted_blocks") return SweepAxis::adapted_blocks;
  if (name == "update_target") return SweepAxis::update_target;
  throw ConfigError("sweep axis: expected \"adapted_blocks\" or \"update_target\", got \"" +
                    name + "\"");
}

/// The base config with one axis value substituted.
inline ExperimentConfig sweep_variant(const ExperimentConfig& base, SweepAxis axis,
                                      const std::string& value) {
  ExperimentConfig cfg = base;
  if (axis == SweepAxis::adapted_blocks) {
    std::size_t blocks = 0;
    try {
      std::size_t pos = 0;
      blocks = std::stoull(value, &pos);
      if (pos != value.size()) throw std::invalid_argument(value);
    } catch (const std::exception&) {
      throw ConfigError("sweep value \"" + value +
                        "\": expected a non-negative integer for adapted_blocks");
    }
    cfg.encoder.adapted_blocks = blocks;
  } else {
    if (value == "attention_qkv") {
      cfg.encoder.update_target = UpdateTarget::attention_qkv;
    } else if (value == "mlp") {
      cfg.encoder.update_target = UpdateTarget::mlp;
    } else {
      throw ConfigError("sweep value \"" + value +
                        "\": expected \"attention_qkv\" or \"mlp\"");
    }
  }
  cfg.validate();
  return cfg;
}

/// Runs every axis value on the shared dataset/plan seeds and writes one
/// result directory per value plus comparison.csv. The per-value metrics are
/// identical to standalone runs of the substituted configs: every derived
/// seed depends only on (config seed, component), never on the sweep context.
inline void run_sweep(const ExperimentConfig& base, SweepAxis axis,
                      const std::vector<std::string>& values,
                      const std::filesystem::path& out_dir) {
  if (values.empty()) throw ConfigError("sweep values: at least one value required");
  const char* axis_name =
      axis == SweepAxis::adapted_blocks ? "adapted_blocks" : "update_target";
  std::string csv = "value,s_base,s_last,s_avg,pd,delta_params\n";
  for (const std::string& value : values) {
    ExperimentConfig cfg = sweep_variant(base, axis, value);
    RunOutput out = execute_experiment(cfg);
    write_run_outputs(out_dir / (std::string(axis_name) + "_" + value), out);
    csv += value + ',' + detail::pct2(out.report.s_base) + ',' +
           detail::pct2(out.report.s_last) + ',' + detail::pct2(out.report.s_avg) +
           ',' + detail::pct2(out.report.pd) + ',' +
           std::to_string(out.parameters.delta_params) + '\n';
  }
  std::filesystem::create_directories(out_dir);
  detail::write_text(out_dir / "comparison.csv", csv);
}

}  // namespace deltavit
