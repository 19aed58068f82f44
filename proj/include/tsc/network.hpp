// SPDX-License-Identifier: Apache-2.0
//
// Staged residual networks whose residual branches are scaled channel-wise by
// step sizes: y_{d+1} = shortcut(y_d) + F(y_d, w_d) ⊗ Δt_d. Step sizes come
// from a controller evaluated on the current weights (training) or from
// vectors stored by bake() (inference).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsc/architecture.hpp"
#include "tsc/autodiff.hpp"
#include "tsc/controllers.hpp"
#include "tsc/rng.hpp"

namespace tsc {

enum class Mode { train, eval };

enum class ParamRole { conv, bn_gamma, bn_beta, fc_weight, fc_bias, ctrl_weight, ctrl_bias, step_logit };

struct Parameter {
  std::string name;
  Tensor value;
  ParamRole role = ParamRole::conv;
  bool controller = false;  ///< dropped by bake()

  /// Weight decay applies to weight matrices and kernels only.
  bool decays() const {
    return role == ParamRole::conv || role == ParamRole::fc_weight || role == ParamRole::ctrl_weight;
  }
};

struct BnSlot {
  std::size_t gamma = 0;
  std::size_t beta = 0;
  std::size_t stats = 0;  ///< index into Network::bn_stats
};

struct BlockLayout {
  BlockGeometry geom;
  std::vector<std::size_t> convs;       ///< parameter indices, branch order
  std::vector<BnSlot> bns;              ///< one per conv when batch norm is used
  std::optional<std::size_t> proj;      ///< shortcut projection kernel
  std::optional<BnSlot> proj_bn;
  std::vector<std::size_t> controller;  ///< indp: {logit}; 2fc: {w_in, b_in, w_out, b_out}
};

struct StageLayout {
  std::vector<std::size_t> blocks;  ///< indices into Network::blocks
  std::size_t channels = 0;
  std::size_t hidden = 0;           ///< controller width C/r (0 when unused)
  /// Shared LSTM parameters: w_in, b_in, w_i, w_f, w_g, w_o, b_i, b_f, b_g, b_o, w_out, b_out.
  std::vector<std::size_t> lstm;
};

struct StemLayout {
  StemGeometry geom;
  std::size_t conv = 0;
  std::optional<BnSlot> bn;
};

class Network {
 public:
  NetworkSpec spec;
  ctrl::ControllerConfig controller;
  std::size_t reduction = 4;
  std::vector<Parameter> params;
  std::vector<ad::BatchNormStats> bn_stats;
  StemLayout stem;
  std::vector<BlockLayout> blocks;
  std::vector<StageLayout> stages;
  std::size_t fc_weight = 0;
  std::size_t fc_bias = 0;
  /// Per-block Δt stored by bake(); when present the controller is gone.
  std::optional<std::vector<Tensor>> baked_steps;

  bool baked() const { return baked_steps.has_value(); }

  std::size_t network_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params)
      if (!p.controller) n += p.value.size();
    return n;
  }

  std::size_t controller_parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params)
      if (p.controller) n += p.value.size();
    return n;
  }

  std::size_t baked_step_count() const {
    std::size_t n = 0;
    if (baked_steps)
      for (const auto& t : *baked_steps) n += t.size();
    return n;
  }

  /// Everything stored: weights, controller parameters and baked step vectors.
  std::size_t parameter_count() const {
    return network_parameter_count() + controller_parameter_count() + baked_step_count();
  }

  std::size_t find(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return i;
    throw std::out_of_range("Network: no parameter named '" + name + "'");
  }
};

struct BuildOptions {
  bool zero_classifier = false;  ///< zero fc weights and bias
};

namespace detail {

inline void he_normal(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.storage()) v = normal(rng, 0.0, sd);
}

inline void fan_in_uniform(Tensor& t, std::size_t fan_in, Rng& rng) {
  const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.storage()) v = uniform(rng, -b, b);
}

class Builder {
 public:
  Builder(Network& net, Rng& rng) : net_(net), rng_(rng) {}

  std::size_t add(std::string name, Shape shape, ParamRole role, bool controller = false) {
    net_.params.push_back(Parameter{std::move(name), Tensor(std::move(shape)), role, controller});
    return net_.params.size() - 1;
  }

  std::size_t conv(const std::string& name, const ConvShape& c) {
    const std::size_t i = add(name, Shape{c.out_ch, c.in_ch, c.kernel, c.kernel}, ParamRole::conv);
    he_normal(net_.params[i].value, c.in_ch * c.kernel * c.kernel, rng_);
    return i;
  }

  BnSlot bn(const std::string& name, std::size_t channels) {
    BnSlot s;
    s.gamma = add(name + ".gamma", Shape{channels}, ParamRole::bn_gamma);
    net_.params[s.gamma].value.fill(1.0);
    s.beta = add(name + ".beta", Shape{channels}, ParamRole::bn_beta);
    net_.bn_stats.push_back(ad::BatchNormStats::fresh(channels));
    s.stats = net_.bn_stats.size() - 1;
    return s;
  }

  std::size_t ctrl_weight(const std::string& name, std::size_t out, std::size_t in, bool zero) {
    const std::size_t i = add(name, Shape{out, in}, ParamRole::ctrl_weight, true);
    if (!zero) fan_in_uniform(net_.params[i].value, in, rng_);
    return i;
  }

  std::size_t ctrl_bias(const std::string& name, std::size_t n) {
    return add(name, Shape{n}, ParamRole::ctrl_bias, true);
  }

 private:
  Network& net_;
  Rng& rng_;
};

}  // namespace detail

/// Builds a network with He-initialized kernels, unit/zero batch-norm affine
/// terms and one controller per stage. Controller weights are fan-in uniform
/// except the output transform, which starts at zero so every controller
/// initially emits Δt = σ(0) = 0.5 while remaining trainable.
inline Network build_network(const NetworkSpec& spec, const ctrl::ControllerConfig& controller, std::uint64_t seed,
                             const BuildOptions& options = {}) {
  spec.validate();
  Network net;
  net.spec = spec;
  net.controller = controller;
  net.reduction = controller.reduction ? controller.reduction : default_reduction(spec);
  Rng rng(seed);
  detail::Builder b(net, rng);

  net.stem.geom = stem_geometry(spec);
  net.stem.conv = b.conv("stem.conv", net.stem.geom.conv);
  if (net.stem.geom.batch_norm) net.stem.bn = b.bn("stem.bn", net.stem.geom.conv.out_ch);

  const auto geoms = block_geometry(spec);
  net.stages.resize(spec.stages.size());
  for (std::size_t s = 0; s < spec.stages.size(); ++s) net.stages[s].channels = spec.stages[s].channels;
  for (const BlockGeometry& g : geoms) {
    BlockLayout L;
    L.geom = g;
    const std::string prefix = "stage" + std::to_string(g.stage) + ".block" + std::to_string(g.index);
    for (std::size_t c = 0; c < g.convs.size(); ++c) {
      L.convs.push_back(b.conv(prefix + ".conv" + std::to_string(c + 1), g.convs[c]));
      if (g.batch_norm) L.bns.push_back(b.bn(prefix + ".bn" + std::to_string(c + 1), g.convs[c].out_ch));
    }
    if (g.projection) {
      L.proj = b.conv(prefix + ".shortcut.conv", *g.projection);
      if (g.batch_norm) L.proj_bn = b.bn(prefix + ".shortcut.bn", g.out_ch);
    }
    net.stages[g.stage].blocks.push_back(net.blocks.size());
    net.blocks.push_back(std::move(L));
  }

  const std::size_t last_ch = spec.stages.back().channels;
  net.fc_weight = b.add("fc.weight", Shape{spec.num_classes, last_ch}, ParamRole::fc_weight);
  net.fc_bias = b.add("fc.bias", Shape{spec.num_classes}, ParamRole::fc_bias);
  if (!options.zero_classifier) detail::fan_in_uniform(net.params[net.fc_weight].value, last_ch, rng);

  // Controller parameters go last so bake() can drop them as a suffix.
  const bool zero = controller.init == ctrl::ControllerInit::zero;
  const ControllerKind kind = controller.kind;
  if (kind == ControllerKind::twofc || kind == ControllerKind::lstm) {
    for (std::size_t s = 0; s < net.stages.size(); ++s) {
      const std::size_t C = net.stages[s].channels;
      if (C % net.reduction != 0) {
        throw std::invalid_argument("build_network: stage " + std::to_string(s) + " width " + std::to_string(C) +
                                    " is not divisible by reduction " + std::to_string(net.reduction));
      }
      net.stages[s].hidden = C / net.reduction;
    }
  }
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    StageLayout& st = net.stages[s];
    const std::string sp = "stage" + std::to_string(s) + ".controller";
    if (kind == ControllerKind::lstm) {
      const std::size_t h = st.hidden;
      const std::size_t in = net.blocks[st.blocks.front()].geom.projected_length();
      st.lstm.push_back(b.ctrl_weight(sp + ".w_in", h, in, zero));
      st.lstm.push_back(b.ctrl_bias(sp + ".b_in", h));
      for (const char* gname : {"i", "f", "g", "o"}) st.lstm.push_back(b.ctrl_weight(sp + ".w_" + gname, h, 2 * h, zero));
      for (const char* gname : {"i", "f", "g", "o"}) st.lstm.push_back(b.ctrl_bias(sp + ".b_" + gname, h));
      st.lstm.push_back(b.ctrl_weight(sp + ".w_out", st.channels, h, true));
      st.lstm.push_back(b.ctrl_bias(sp + ".b_out", st.channels));
    }
    for (std::size_t bi : st.blocks) {
      BlockLayout& L = net.blocks[bi];
      const std::string bp = "stage" + std::to_string(s) + ".block" + std::to_string(L.geom.index) + ".controller";
      if (kind == ControllerKind::indp) {
        L.controller.push_back(b.add(bp + ".logit", Shape{L.geom.out_ch}, ParamRole::step_logit, true));
      } else if (kind == ControllerKind::twofc) {
        const std::size_t h = st.hidden;
        L.controller.push_back(b.ctrl_weight(bp + ".w_in", h, L.geom.projected_length(), zero));
        L.controller.push_back(b.ctrl_bias(bp + ".b_in", h));
        L.controller.push_back(b.ctrl_weight(bp + ".w_out", L.geom.out_ch, h, true));
        L.controller.push_back(b.ctrl_bias(bp + ".b_out", L.geom.out_ch));
      }
    }
  }
  return net;
}

struct ForwardOptions {
  Mode mode = Mode::train;
  std::optional<double> step_override = std::nullopt;  ///< force every Δt entry to this value
  double step_scale = 1.0;  ///< multiply every Δt by this factor
  std::optional<bool> requires_grad = std::nullopt;  ///< defaults to mode == train
};

struct ForwardResult {
  ad::Var logits;
  std::vector<ad::Var> params;  ///< one node per Network::params entry
  std::vector<ad::Var> steps;   ///< Δt per block
  std::vector<ad::Var> block_inputs;
  std::vector<ad::Var> block_outputs;
};

/// Registers every parameter on the tape (as leaves when gradients are wanted).
inline std::vector<ad::Var> register_params(const Network& net, ad::Tape& tape, bool requires_grad) {
  std::vector<ad::Var> vars;
  vars.reserve(net.params.size());
  for (const auto& p : net.params) vars.push_back(requires_grad ? tape.leaf(p.value) : tape.constant(p.value));
  return vars;
}

/// Δt for every block from the controller (or baked vectors), before any override.
inline std::vector<ad::Var> controller_steps(const Network& net, ad::Tape& tape, std::span<const ad::Var> pv) {
  std::vector<ad::Var> steps(net.blocks.size());
  if (net.baked()) {
    for (std::size_t i = 0; i < net.blocks.size(); ++i) steps[i] = tape.constant((*net.baked_steps)[i]);
    return steps;
  }
  auto projected = [&](const BlockLayout& L) {
    std::vector<ad::Var> convs;
    for (std::size_t ci : L.convs) {
      convs.push_back(net.controller.detach_projection ? tape.constant(pv[ci].value()) : pv[ci]);
    }
    return ctrl::project_weights(convs, L.geom.projected).values;
  };
  switch (net.controller.kind) {
    case ControllerKind::fixed:
      for (std::size_t i = 0; i < net.blocks.size(); ++i) {
        steps[i] = tape.constant(Tensor(Shape{net.blocks[i].geom.out_ch}, net.controller.fixed_step));
      }
      break;
    case ControllerKind::indp:
      for (std::size_t i = 0; i < net.blocks.size(); ++i) steps[i] = ctrl::indp_step(pv[net.blocks[i].controller[0]]);
      break;
    case ControllerKind::twofc:
      for (std::size_t i = 0; i < net.blocks.size(); ++i) {
        const auto& c = net.blocks[i].controller;
        ctrl::TwoFcParams p{pv[c[0]], pv[c[1]], pv[c[2]], pv[c[3]]};
        steps[i] = ctrl::twofc_step(p, projected(net.blocks[i]));
      }
      break;
    case ControllerKind::lstm:
      for (const StageLayout& st : net.stages) {
        const auto& l = st.lstm;
        ctrl::LstmParams p{pv[l[0]],
                           pv[l[1]],
                           {pv[l[2]], pv[l[3]], pv[l[4]], pv[l[5]]},
                           {pv[l[6]], pv[l[7]], pv[l[8]], pv[l[9]]},
                           pv[l[10]],
                           pv[l[11]]};
        std::vector<ad::Var> wbars;
        for (std::size_t bi : st.blocks) wbars.push_back(projected(net.blocks[bi]));
        const auto s = ctrl::stage_run(p, wbars);
        for (std::size_t k = 0; k < st.blocks.size(); ++k) steps[st.blocks[k]] = s[k];
      }
      break;
  }
  return steps;
}

namespace detail {

inline ad::Var bn_apply(Network& net, std::span<const ad::Var> pv, const BnSlot& s, ad::Var x, Mode mode) {
  return ad::batch_norm(x, pv[s.gamma], pv[s.beta], net.bn_stats[s.stats], mode == Mode::train);
}

}  // namespace detail

/// Residual branch F(y, w) of one block, before the step multiply.
inline ad::Var residual_branch(Network& net, std::span<const ad::Var> pv, std::size_t block, ad::Var y, Mode mode) {
  const BlockLayout& L = net.blocks.at(block);
  const auto& g = L.geom;
  auto conv_bn = [&](std::size_t c, ad::Var x) {
    ad::Var out = ad::conv2d(x, pv[L.convs[c]], g.convs[c].stride, g.convs[c].pad);
    return g.batch_norm ? detail::bn_apply(net, pv, L.bns[c], out, mode) : out;
  };
  switch (g.kind) {
    case BlockKind::plain:
      return ad::relu(conv_bn(0, y));
    case BlockKind::basic:
      return conv_bn(1, ad::relu(conv_bn(0, y)));
    case BlockKind::bottleneck:
      return conv_bn(2, ad::relu(conv_bn(1, ad::relu(conv_bn(0, y)))));
  }
  throw std::logic_error("residual_branch: unknown block kind");
}

inline ad::Var shortcut(Network& net, std::span<const ad::Var> pv, std::size_t block, ad::Var y, Mode mode) {
  const BlockLayout& L = net.blocks.at(block);
  if (!L.proj) return y;
  ad::Var out = ad::conv2d(y, pv[*L.proj], L.geom.projection->stride, 0);
  return L.proj_bn ? detail::bn_apply(net, pv, *L.proj_bn, out, mode) : out;
}

/// shortcut(y) + F(y, w) ⊗ Δt.
inline ad::Var block_forward(Network& net, std::span<const ad::Var> pv, std::size_t block, ad::Var y, ad::Var dt,
                             Mode mode) {
  const std::size_t channels = net.blocks.at(block).geom.out_ch;
  if (dt.value().size() != channels) {
    throw std::invalid_argument("block_forward: step vector has " + std::to_string(dt.value().size()) +
                                " entries, block has " + std::to_string(channels) + " channels");
  }
  const std::size_t ch_axis = y.value().rank() == 4 ? 1 : 0;
  if (y.value().rank() < 3 || y.value().dim(ch_axis) != net.blocks[block].geom.in_ch) {
    throw std::invalid_argument("block_forward: input " + shape_str(y.value().shape()) + " does not match block " +
                                std::to_string(block));
  }
  ad::Var f = residual_branch(net, pv, block, y, mode);
  ad::Var sc = shortcut(net, pv, block, y, mode);
  return ad::add(sc, ad::mul(f, dt));
}

/// Stem plus residual trunk up to (and excluding) pooling. Returns the trunk
/// input; block inputs/outputs are appended to `result`.
inline ad::Var stem_forward(Network& net, std::span<const ad::Var> pv, ad::Var x, Mode mode) {
  if (net.stem.geom.max_pool) {
    throw std::logic_error("ImageNet stems are supported for counting only, not for forward evaluation");
  }
  const ConvShape& c = net.stem.geom.conv;
  ad::Var y = ad::conv2d(x, pv[net.stem.conv], c.stride, c.pad);
  if (net.stem.bn) y = detail::bn_apply(net, pv, *net.stem.bn, y, mode);
  return ad::relu(y);
}

inline void check_batch(const Network& net, const Tensor& batch) {
  const auto& s = batch.shape();
  if (s.size() != 4 || s[1] != net.spec.input_channels || s[2] != net.spec.input_height ||
      s[3] != net.spec.input_width) {
    throw std::invalid_argument("network_forward: batch " + shape_str(s) + " does not match [N," +
                                std::to_string(net.spec.input_channels) + "," + std::to_string(net.spec.input_height) +
                                "," + std::to_string(net.spec.input_width) + "]");
  }
}

/// Forward pass using caller-supplied parameter nodes (one per
/// Network::params entry). Lets finite-difference checks substitute values.
inline ForwardResult forward_with_params(Network& net, ad::Tape& tape, const Tensor& batch,
                                         std::vector<ad::Var> params, const ForwardOptions& options = {}) {
  check_batch(net, batch);
  if (params.size() != net.params.size()) {
    throw std::invalid_argument("forward_with_params: expected " + std::to_string(net.params.size()) +
                                " parameter nodes, got " + std::to_string(params.size()));
  }
  ForwardResult r;
  r.params = std::move(params);
  r.steps = controller_steps(net, tape, r.params);
  for (std::size_t i = 0; i < r.steps.size(); ++i) {
    if (options.step_override) {
      r.steps[i] = tape.constant(Tensor(Shape{net.blocks[i].geom.out_ch}, *options.step_override));
    } else if (options.step_scale != 1.0) {
      r.steps[i] = ad::scale(r.steps[i], options.step_scale);
    }
  }
  ad::Var y = stem_forward(net, r.params, tape.constant(batch), options.mode);
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    r.block_inputs.push_back(y);
    try {
      y = block_forward(net, r.params, i, y, r.steps[i], options.mode);
    } catch (const NumericError& e) {
      throw NumericError("block " + std::to_string(i) + " (stage " + std::to_string(net.blocks[i].geom.stage) +
                         "): " + e.what());
    }
    r.block_outputs.push_back(y);
  }
  r.logits = ad::linear(ad::global_avg_pool(y), r.params[net.fc_weight], r.params[net.fc_bias]);
  return r;
}

/// Full forward pass on a batch [N, C, H, W]. Controllers are re-evaluated
/// from the current weights on every call.
inline ForwardResult network_forward(Network& net, ad::Tape& tape, const Tensor& batch,
                                     const ForwardOptions& options = {}) {
  const bool grad = options.requires_grad.value_or(options.mode == Mode::train);
  return forward_with_params(net, tape, batch, register_params(net, tape, grad), options);
}

struct StepRow {
  std::size_t stage = 0;
  std::size_t block = 0;  ///< position within the stage
  Tensor dt;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

/// Current step sizes of every block in depth order.
inline std::vector<StepRow> export_step_sizes(const Network& net) {
  ad::Tape tape;
  const auto pv = register_params(net, tape, false);
  const auto steps = controller_steps(net, tape, pv);
  std::vector<StepRow> rows;
  for (std::size_t i = 0; i < net.blocks.size(); ++i) {
    StepRow row;
    row.stage = net.blocks[i].geom.stage;
    row.block = net.blocks[i].geom.index;
    row.dt = steps[i].value();
    const auto d = row.dt.data();
    double s = 0.0;
    for (double v : d) s += v;
    row.mean = s / static_cast<double>(d.size());
    row.min = *std::min_element(d.begin(), d.end());
    row.max = *std::max_element(d.begin(), d.end());
    rows.push_back(std::move(row));
  }
  return rows;
}

/// T = Σ_d mean(Δt_d).
inline double evolution_time(std::span<const StepRow> rows) {
  double t = 0.0;
  for (const auto& r : rows) t += r.mean;
  return t;
}

inline double evolution_time(const Network& net) { return evolution_time(export_step_sizes(net)); }

/// Stores the current Δt of every block and drops the controller parameters.
inline Network bake(const Network& net) {
  Network out = net;
  std::vector<Tensor> steps;
  for (auto& row : export_step_sizes(net)) steps.push_back(std::move(row.dt));
  std::size_t keep = 0;
  while (keep < out.params.size() && !out.params[keep].controller) ++keep;
  for (std::size_t i = keep; i < out.params.size(); ++i) {
    if (!out.params[i].controller) throw std::logic_error("bake: controller parameters must form a suffix");
  }
  out.params.resize(keep);
  for (auto& b : out.blocks) b.controller.clear();
  for (auto& s : out.stages) s.lstm.clear();
  out.baked_steps = std::move(steps);
  return out;
}

struct GradientProfileEntry {
  std::size_t stage = 0;
  std::size_t block = 0;
  double grad_norm = 0.0;  ///< ‖∂L/∂y_n‖ at the block input
  double deviation = 0.0;  ///< ‖∂L/∂y_n − ∂L/∂y_D‖ against the stage output
  bool comparable = true;  ///< false when the block input and stage output differ in shape
};

/// Per-block gradient norms with respect to block inputs after one
/// forward/backward pass of the mean cross-entropy.
inline std::vector<GradientProfileEntry> layer_gradient_profile(Network& net, const Tensor& batch,
                                                                std::span<const int> labels,
                                                                ForwardOptions options = {}) {
  options.requires_grad = true;
  ad::Tape tape;
  ForwardResult r = network_forward(net, tape, batch, options);
  ad::Var loss = ad::softmax_cross_entropy(r.logits, labels);
  tape.backward(loss);
  std::vector<GradientProfileEntry> out;
  for (const StageLayout& st : net.stages) {
    const Tensor gD = tape.grad(r.block_outputs[st.blocks.back()]);
    for (std::size_t bi : st.blocks) {
      GradientProfileEntry e;
      e.stage = net.blocks[bi].geom.stage;
      e.block = net.blocks[bi].geom.index;
      const Tensor gn = tape.grad(r.block_inputs[bi]);
      e.grad_norm = l2_norm(gn.data());
      e.comparable = gn.shape() == gD.shape();
      if (e.comparable) {
        double s = 0.0;
        for (std::size_t k = 0; k < gn.size(); ++k) s += (gn[k] - gD[k]) * (gn[k] - gD[k]);
        e.deviation = std::sqrt(s);
      } else {
        e.deviation = std::numeric_limits<double>::quiet_NaN();
      }
      out.push_back(e);
    }
  }
  return out;
}

}  // namespace tsc
