// SPDX-License-Identifier: Apache-2.0
//
// Staged residual architecture descriptions and the per-block layout derived
// from them. Shared by the network builder and the complexity counters so both
// see exactly the same convolutions.
#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsc {

enum class BlockKind { plain, basic, bottleneck };
enum class StemKind { cifar, imagenet };
enum class ControllerKind { fixed, indp, twofc, lstm };

inline const char* to_string(BlockKind k) {
  switch (k) {
    case BlockKind::plain: return "plain";
    case BlockKind::basic: return "basic";
    case BlockKind::bottleneck: return "bottleneck";
  }
  return "?";
}

inline const char* to_string(StemKind k) { return k == StemKind::cifar ? "cifar" : "imagenet"; }

inline const char* to_string(ControllerKind k) {
  switch (k) {
    case ControllerKind::fixed: return "fixed";
    case ControllerKind::indp: return "indp";
    case ControllerKind::twofc: return "2fc";
    case ControllerKind::lstm: return "lstm";
  }
  return "?";
}

inline BlockKind block_kind_from_string(const std::string& s) {
  if (s == "plain") return BlockKind::plain;
  if (s == "basic") return BlockKind::basic;
  if (s == "bottleneck") return BlockKind::bottleneck;
  throw std::invalid_argument("unknown block kind '" + s + "'");
}

inline StemKind stem_kind_from_string(const std::string& s) {
  if (s == "cifar") return StemKind::cifar;
  if (s == "imagenet") return StemKind::imagenet;
  throw std::invalid_argument("unknown stem kind '" + s + "'");
}

inline ControllerKind controller_kind_from_string(const std::string& s) {
  if (s == "fixed") return ControllerKind::fixed;
  if (s == "indp") return ControllerKind::indp;
  if (s == "2fc" || s == "twofc") return ControllerKind::twofc;
  if (s == "lstm") return ControllerKind::lstm;
  throw std::invalid_argument("unknown controller kind '" + s + "'");
}

struct StageSpec {
  std::size_t num_blocks = 1;
  std::size_t channels = 16;
  BlockKind kind = BlockKind::basic;
  bool downsample_entry = false;

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct NetworkSpec {
  std::vector<StageSpec> stages;
  std::size_t input_channels = 3;
  std::size_t num_classes = 10;
  StemKind stem = StemKind::cifar;
  std::size_t stem_channels = 16;
  std::size_t input_height = 32;
  std::size_t input_width = 32;

  bool uses_batch_norm() const {
    for (const auto& s : stages)
      if (s.kind != BlockKind::plain) return true;
    return false;
  }

  std::size_t total_blocks() const {
    std::size_t n = 0;
    for (const auto& s : stages) n += s.num_blocks;
    return n;
  }

  void validate() const {
    if (stages.empty()) throw std::invalid_argument("NetworkSpec: at least one stage required");
    if (input_channels == 0 || num_classes == 0 || stem_channels == 0 || input_height == 0 || input_width == 0) {
      throw std::invalid_argument("NetworkSpec: channel, class and size counts must be positive");
    }
    for (std::size_t b = 0; b < stages.size(); ++b) {
      const auto& s = stages[b];
      if (s.num_blocks == 0) throw std::invalid_argument("NetworkSpec: stage " + std::to_string(b) + " has no blocks");
      if (s.channels == 0) throw std::invalid_argument("NetworkSpec: stage " + std::to_string(b) + " has zero channels");
      if (s.kind == BlockKind::bottleneck && s.channels % 4 != 0) {
        throw std::invalid_argument("NetworkSpec: bottleneck stage " + std::to_string(b) +
                                    " needs channels divisible by 4");
      }
    }
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct ConvShape {
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t params() const { return in_ch * out_ch * kernel * kernel; }
  std::size_t out_size(std::size_t in) const { return (in + 2 * pad - kernel) / stride + 1; }
};

struct BlockGeometry {
  BlockKind kind = BlockKind::basic;
  std::size_t stage = 0;
  std::size_t index = 0;  ///< position within its stage
  std::size_t in_ch = 0;
  std::size_t out_ch = 0;
  std::size_t stride = 1;
  std::vector<ConvShape> convs;          ///< residual branch, in order
  std::optional<ConvShape> projection;   ///< 1x1 strided shortcut when the shape changes
  bool batch_norm = true;
  std::vector<std::size_t> projected;    ///< convs averaged into the controller input

  /// Length of the controller input: Σ k1·k2·C_out over the projected convs.
  std::size_t projected_length() const {
    std::size_t n = 0;
    for (std::size_t i : projected) n += convs[i].kernel * convs[i].kernel * convs[i].out_ch;
    return n;
  }
};

struct StemGeometry {
  ConvShape conv;
  bool batch_norm = true;
  bool max_pool = false;  ///< 3x3 stride-2 pad-1 max pool (ImageNet stem)
};

inline StemGeometry stem_geometry(const NetworkSpec& spec) {
  StemGeometry g;
  if (spec.stem == StemKind::cifar) {
    g.conv = ConvShape{spec.input_channels, spec.stem_channels, 3, 1, 1};
  } else {
    g.conv = ConvShape{spec.input_channels, spec.stem_channels, 7, 2, 3};
    g.max_pool = true;
  }
  g.batch_norm = spec.uses_batch_norm();
  return g;
}

/// Blocks in depth order. Bottleneck blocks carry their stride on the first
/// 1x1 convolution.
inline std::vector<BlockGeometry> block_geometry(const NetworkSpec& spec) {
  spec.validate();
  const bool bn = spec.uses_batch_norm();
  std::vector<BlockGeometry> blocks;
  std::size_t in_ch = spec.stem_channels;
  for (std::size_t b = 0; b < spec.stages.size(); ++b) {
    const StageSpec& st = spec.stages[b];
    for (std::size_t l = 0; l < st.num_blocks; ++l) {
      BlockGeometry g;
      g.kind = st.kind;
      g.stage = b;
      g.index = l;
      g.in_ch = in_ch;
      g.out_ch = st.channels;
      g.stride = (l == 0 && st.downsample_entry) ? 2 : 1;
      g.batch_norm = bn;
      const std::size_t C = st.channels;
      switch (st.kind) {
        case BlockKind::plain:
          g.convs = {ConvShape{in_ch, C, 3, g.stride, 1}};
          g.projected = {0};
          break;
        case BlockKind::basic:
          g.convs = {ConvShape{in_ch, C, 3, g.stride, 1}, ConvShape{C, C, 3, 1, 1}};
          g.projected = {0, 1};
          break;
        case BlockKind::bottleneck:
          g.convs = {ConvShape{in_ch, C / 4, 1, g.stride, 0}, ConvShape{C / 4, C / 4, 3, 1, 1},
                     ConvShape{C / 4, C, 1, 1, 0}};
          g.projected = {0, 2};
          break;
      }
      if (g.stride != 1 || in_ch != C) g.projection = ConvShape{in_ch, C, 1, g.stride, 0};
      blocks.push_back(std::move(g));
      in_ch = C;
    }
  }
  return blocks;
}

/// Hidden-width divisor of the controllers: 8 for bottleneck networks, 4 otherwise.
inline std::size_t default_reduction(const NetworkSpec& spec) {
  for (const auto& s : spec.stages)
    if (s.kind == BlockKind::bottleneck) return 8;
  return 4;
}

/// Standard ImageNet ResNets (224x224 input, 1000 classes).
inline NetworkSpec resnet_preset(int depth) {
  NetworkSpec spec;
  spec.input_channels = 3;
  spec.num_classes = 1000;
  spec.stem = StemKind::imagenet;
  spec.stem_channels = 64;
  spec.input_height = spec.input_width = 224;
  std::vector<std::size_t> layers;
  BlockKind kind = BlockKind::basic;
  switch (depth) {
    case 18: layers = {2, 2, 2, 2}; break;
    case 34: layers = {3, 4, 6, 3}; break;
    case 50: layers = {3, 4, 6, 3}; kind = BlockKind::bottleneck; break;
    case 101: layers = {3, 4, 23, 3}; kind = BlockKind::bottleneck; break;
    default: throw std::invalid_argument("resnet_preset: supported depths are 18, 34, 50, 101");
  }
  const std::size_t mult = kind == BlockKind::bottleneck ? 4 : 1;
  const std::size_t widths[] = {64, 128, 256, 512};
  for (std::size_t b = 0; b < 4; ++b) spec.stages.push_back(StageSpec{layers[b], widths[b] * mult, kind, b > 0});
  return spec;
}

/// CIFAR-style three-stage network with 1x1-or-larger inputs; used for the
/// desk-scale experiments.
inline NetworkSpec cifar_style_spec(std::size_t input_channels, std::size_t height, std::size_t width,
                                    std::size_t num_classes, std::vector<std::size_t> channels,
                                    std::size_t blocks_per_stage, BlockKind kind = BlockKind::basic) {
  NetworkSpec spec;
  spec.input_channels = input_channels;
  spec.num_classes = num_classes;
  spec.stem = StemKind::cifar;
  spec.stem_channels = kind == BlockKind::bottleneck ? channels.front() / 4 : channels.front();
  spec.input_height = height;
  spec.input_width = width;
  for (std::size_t b = 0; b < channels.size(); ++b) {
    spec.stages.push_back(StageSpec{blocks_per_stage, channels[b], kind, b > 0});
  }
  return spec;
}

}  // namespace tsc
