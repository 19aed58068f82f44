// SPDX-License-Identifier: Apache-2.0
//
// JSON forms of specs, configs, checkpoints and run records, plus the CSV
// tables written by the command-line tool.
//
// Checkpoint layout (format "tsc-checkpoint", version 1):
//   {
//     "format": "tsc-checkpoint", "version": 1,
//     "network": <spec>, "controller": <controller config>, "reduction": r,
//     "parameters": [{"name": ..., "shape": [...], "data": [...]}, ...],
//     "buffers": [{"mean": [...], "var": [...]}, ...],   // batch-norm running stats, build order
//     "baked_steps": null | [[Δt per channel], ...]       // one list per block
//   }
// Doubles are written with round-trip precision, so save/load is bit-exact.
#pragma once

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "tsc/train.hpp"

namespace tsc::io {

using json = nlohmann::json;

inline constexpr const char* kCheckpointFormat = "tsc-checkpoint";
inline constexpr int kCheckpointVersion = 1;

// ---- network spec -------------------------------------------------------

inline json to_json(const NetworkSpec& s) {
  json stages = json::array();
  for (const auto& st : s.stages) {
    stages.push_back({{"blocks", st.num_blocks},
                      {"channels", st.channels},
                      {"kind", to_string(st.kind)},
                      {"downsample", st.downsample_entry}});
  }
  return {{"stages", stages},
          {"input_channels", s.input_channels},
          {"num_classes", s.num_classes},
          {"stem", to_string(s.stem)},
          {"stem_channels", s.stem_channels},
          {"input_height", s.input_height},
          {"input_width", s.input_width}};
}

/// Accepts {"preset": 18|34|50|101}, a CIFAR-style shorthand
/// {"cifar_style": {"input_channels", "height", "width", "num_classes",
/// "channels": [...], "blocks_per_stage", "kind"}}, or the full inline form.
inline NetworkSpec spec_from_json(const json& j) {
  NetworkSpec s;
  if (j.contains("preset")) {
    s = resnet_preset(j.at("preset").get<int>());
  } else if (j.contains("cifar_style")) {
    const json& c = j.at("cifar_style");
    s = cifar_style_spec(c.at("input_channels").get<std::size_t>(), c.at("height").get<std::size_t>(),
                         c.at("width").get<std::size_t>(), c.at("num_classes").get<std::size_t>(),
                         c.at("channels").get<std::vector<std::size_t>>(), c.at("blocks_per_stage").get<std::size_t>(),
                         block_kind_from_string(c.value("kind", std::string("basic"))));
  } else {
    for (const json& st : j.at("stages")) {
      s.stages.push_back(StageSpec{st.at("blocks").get<std::size_t>(), st.at("channels").get<std::size_t>(),
                                   block_kind_from_string(st.value("kind", std::string("basic"))),
                                   st.value("downsample", false)});
    }
    s.input_channels = j.value("input_channels", s.input_channels);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.stem = stem_kind_from_string(j.value("stem", std::string("cifar")));
    s.stem_channels = j.value("stem_channels", s.stem_channels);
    s.input_height = j.value("input_height", s.input_height);
    s.input_width = j.value("input_width", s.input_width);
  }
  s.validate();
  return s;
}

// ---- controller ---------------------------------------------------------

inline json to_json(const ctrl::ControllerConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"fixed_step", c.fixed_step},
          {"reduction", c.reduction},
          {"init", c.init == ctrl::ControllerInit::zero ? "zero" : "fan_in"},
          {"detach_projection", c.detach_projection}};
}

inline ctrl::ControllerConfig controller_from_json(const json& j) {
  ctrl::ControllerConfig c;
  c.kind = controller_kind_from_string(j.value("kind", std::string(to_string(c.kind))));
  c.fixed_step = j.value("fixed_step", c.fixed_step);
  c.reduction = j.value("reduction", c.reduction);
  const std::string init = j.value("init", std::string("fan_in"));
  if (init == "zero") {
    c.init = ctrl::ControllerInit::zero;
  } else if (init == "fan_in") {
    c.init = ctrl::ControllerInit::fan_in;
  } else {
    throw std::invalid_argument("controller init must be 'fan_in' or 'zero', got '" + init + "'");
  }
  c.detach_projection = j.value("detach_projection", false);
  return c;
}

// ---- dataset and training config ---------------------------------------

inline json to_json(const data::DatasetConfig& d) {
  return {{"kind", data::to_string(d.kind)}, {"num_samples", d.num_samples}, {"test_fraction", d.test_fraction},
          {"noise", d.noise},                {"turns", d.turns},             {"num_classes", d.num_classes},
          {"dim", d.dim},                    {"separation", d.separation},   {"path", d.path},
          {"channels", d.channels},          {"height", d.height},           {"width", d.width},
          {"normalize", d.normalize},        {"random_flip", d.random_flip}};
}

inline data::DatasetConfig dataset_from_json(const json& j) {
  data::DatasetConfig d;
  d.kind = data::dataset_kind_from_string(j.value("kind", std::string(data::to_string(d.kind))));
  d.num_samples = j.value("num_samples", d.num_samples);
  d.test_fraction = j.value("test_fraction", d.test_fraction);
  d.noise = j.value("noise", d.noise);
  d.turns = j.value("turns", d.turns);
  d.num_classes = j.value("num_classes", d.num_classes);
  d.dim = j.value("dim", d.dim);
  d.separation = j.value("separation", d.separation);
  d.path = j.value("path", d.path);
  d.channels = j.value("channels", d.channels);
  d.height = j.value("height", d.height);
  d.width = j.value("width", d.width);
  d.normalize = j.value("normalize", d.normalize);
  d.random_flip = j.value("random_flip", d.random_flip);
  return d;
}

inline json to_json(const TrainConfig& c) {
  return {{"network", to_json(c.spec)},
          {"controller", to_json(c.controller)},
          {"dataset", to_json(c.dataset)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", {{"initial", c.lr.initial}, {"milestones", c.lr.milestones}, {"factor", c.lr.factor}}},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed}};
}

/// Missing keys keep their defaults. Without explicit milestones the rate
/// drops at 50% and 75% of `epochs`.
inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  if (j.contains("network")) c.spec = spec_from_json(j.at("network"));
  if (j.contains("controller")) c.controller = controller_from_json(j.at("controller"));
  if (j.contains("dataset")) c.dataset = dataset_from_json(j.at("dataset"));
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  const json lr = j.value("lr", json::object());
  const double initial = lr.value("initial", 0.1);
  const double factor = lr.value("factor", 0.1);
  if (lr.contains("milestones")) {
    c.lr = optim::LrSchedule{initial, lr.at("milestones").get<std::vector<std::size_t>>(), factor};
  } else {
    c.lr = optim::LrSchedule::halves_and_quarters(initial, c.epochs, factor);
  }
  return c;
}

// ---- files --------------------------------------------------------------

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path);
}

// ---- checkpoints --------------------------------------------------------

inline json tensor_json(const std::string& name, const Tensor& t) {
  return {{"name", name}, {"shape", t.shape()}, {"data", t.storage()}};
}

inline Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

inline json checkpoint_json(const Network& net) {
  json params = json::array();
  for (const auto& p : net.params) params.push_back(tensor_json(p.name, p.value));
  json buffers = json::array();
  for (const auto& s : net.bn_stats) buffers.push_back({{"mean", s.mean.storage()}, {"var", s.var.storage()}});
  json baked = nullptr;
  if (net.baked()) {
    baked = json::array();
    for (const Tensor& t : *net.baked_steps) baked.push_back(t.storage());
  }
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"network", to_json(net.spec)},
          {"controller", to_json(net.controller)},
          {"reduction", net.reduction},
          {"parameters", params},
          {"buffers", buffers},
          {"baked_steps", baked}};
}

/// Rebuilds the architecture from the stored spec and overwrites every
/// tensor by name; any missing, extra or misshapen entry is an error.
inline Network network_from_checkpoint(const json& j) {
  if (j.value("format", std::string()) != kCheckpointFormat) {
    throw std::runtime_error("not a checkpoint (format field is not '" + std::string(kCheckpointFormat) + "')");
  }
  const int version = j.value("version", -1);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  ctrl::ControllerConfig cc = controller_from_json(j.at("controller"));
  cc.reduction = j.at("reduction").get<std::size_t>();
  Network net = build_network(spec_from_json(j.at("network")), cc, 0);
  const json& baked = j.at("baked_steps");
  if (!baked.is_null()) {
    net = bake(net);
    if (baked.size() != net.blocks.size()) throw std::runtime_error("checkpoint: baked_steps has wrong block count");
    for (std::size_t i = 0; i < baked.size(); ++i) {
      Tensor t = Tensor::vector(baked[i].get<std::vector<double>>());
      if (t.shape() != (*net.baked_steps)[i].shape()) {
        throw std::runtime_error("checkpoint: baked_steps[" + std::to_string(i) + "] has wrong length");
      }
      (*net.baked_steps)[i] = std::move(t);
    }
  }
  const json& params = j.at("parameters");
  if (params.size() != net.params.size()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(net.params.size()) + " parameters, found " +
                             std::to_string(params.size()));
  }
  std::set<std::string> seen;
  for (const json& p : params) {
    const std::string name = p.at("name").get<std::string>();
    if (!seen.insert(name).second) throw std::runtime_error("checkpoint: duplicate parameter '" + name + "'");
    Parameter& dst = net.params[net.find(name)];
    Tensor t = tensor_from_json(p);
    if (t.shape() != dst.value.shape()) {
      throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " + shape_str(t.shape()) +
                               ", expected " + shape_str(dst.value.shape()));
    }
    dst.value = std::move(t);
  }
  const json& buffers = j.at("buffers");
  if (buffers.size() != net.bn_stats.size()) throw std::runtime_error("checkpoint: wrong number of buffers");
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    Tensor mean = Tensor::vector(buffers[i].at("mean").get<std::vector<double>>());
    Tensor var = Tensor::vector(buffers[i].at("var").get<std::vector<double>>());
    if (mean.shape() != net.bn_stats[i].mean.shape() || var.shape() != net.bn_stats[i].var.shape()) {
      throw std::runtime_error("checkpoint: buffer " + std::to_string(i) + " has the wrong channel count");
    }
    net.bn_stats[i] = ad::BatchNormStats{std::move(mean), std::move(var)};
  }
  return net;
}

inline void save_checkpoint(const Network& net, const std::string& path) {
  write_text_file(path, checkpoint_json(net).dump());
}

inline Network load_checkpoint(const std::string& path) { return network_from_checkpoint(read_json_file(path)); }

// ---- run records and tables ---------------------------------------------

inline json to_json(const RunRecord& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"lr", e.lr},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"test_loss", e.test_loss},
                      {"test_accuracy", e.test_accuracy},
                      {"evolution_time", e.evolution_time}});
  }
  json steps = json::array();
  for (const auto& s : r.final_steps) {
    steps.push_back(
        {{"stage", s.stage}, {"block", s.block}, {"mean", s.mean}, {"min", s.min}, {"max", s.max}, {"dt", s.dt}});
  }
  return {{"initial_loss", r.initial_loss},
          {"epochs", epochs},
          {"final_steps", steps},
          {"wall_time_seconds", r.wall_time_seconds}};
}

inline RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.initial_loss = j.at("initial_loss").get<double>();
  for (const json& e : j.at("epochs")) {
    r.epochs.push_back(EpochRecord{e.at("epoch").get<std::size_t>(), e.at("lr").get<double>(),
                                   e.at("train_loss").get<double>(), e.at("train_accuracy").get<double>(),
                                   e.at("test_loss").get<double>(), e.at("test_accuracy").get<double>(),
                                   e.at("evolution_time").get<double>()});
  }
  for (const json& s : j.at("final_steps")) {
    r.final_steps.push_back(StepSummary{s.at("stage").get<std::size_t>(), s.at("block").get<std::size_t>(),
                                        s.at("mean").get<double>(), s.at("min").get<double>(),
                                        s.at("max").get<double>(), s.at("dt").get<std::vector<double>>()});
  }
  r.wall_time_seconds = j.value("wall_time_seconds", 0.0);
  return r;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// One row per epoch.
inline std::string run_record_csv(const RunRecord& r) {
  std::ostringstream os;
  os << "epoch,lr,train_loss,train_accuracy,test_loss,test_accuracy,evolution_time\n";
  for (const auto& e : r.epochs) {
    os << e.epoch << ',' << fmt(e.lr) << ',' << fmt(e.train_loss) << ',' << fmt(e.train_accuracy) << ','
       << fmt(e.test_loss) << ',' << fmt(e.test_accuracy) << ',' << fmt(e.evolution_time) << '\n';
  }
  return os.str();
}

inline std::string step_table_csv(std::span<const StepRow> rows) {
  std::ostringstream os;
  os << "stage,block,mean,min,max\n";
  for (const auto& r : rows) {
    os << r.stage << ',' << r.block << ',' << fmt(r.mean) << ',' << fmt(r.min) << ',' << fmt(r.max) << '\n';
  }
  return os.str();
}

}  // namespace tsc::io
