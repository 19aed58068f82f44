// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale datasets: two interleaved spirals, Gaussian blobs, and small
// images read from CSV. Samples are stored as [N, C, H, W] tensors.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsc/rng.hpp"
#include "tsc/tensor.hpp"

namespace tsc::data {

enum class DatasetKind { two_spirals, gaussian_blobs, csv_images };

inline const char* to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::two_spirals: return "two-spirals";
    case DatasetKind::gaussian_blobs: return "gaussian-blobs";
    case DatasetKind::csv_images: return "csv-images";
  }
  return "?";
}

inline DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "two-spirals") return DatasetKind::two_spirals;
  if (s == "gaussian-blobs") return DatasetKind::gaussian_blobs;
  if (s == "csv-images") return DatasetKind::csv_images;
  throw std::invalid_argument("unknown dataset kind '" + s + "' (two-spirals, gaussian-blobs, csv-images)");
}

struct DatasetConfig {
  DatasetKind kind = DatasetKind::two_spirals;
  std::size_t num_samples = 2000;  ///< total before the split (generated kinds)
  double test_fraction = 0.2;
  double noise = 0.05;             ///< spiral jitter, in units of the outer radius
  double turns = 1.5;              ///< spiral revolutions
  std::size_t num_classes = 2;     ///< blobs; csv uses this when nonzero
  std::size_t dim = 2;             ///< blob feature count
  double separation = 10.0;        ///< blob centre distance from the origin, in σ
  std::string path;                ///< csv-images source
  std::size_t channels = 1;        ///< csv-images sample shape
  std::size_t height = 1;
  std::size_t width = 1;
  bool normalize = true;
  bool random_flip = false;        ///< horizontal flips during training (csv-images)

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct Dataset {
  Tensor features;  ///< [N, C, H, W]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  std::vector<double> channel_mean;  ///< applied normalization (empty when none)
  std::vector<double> channel_std;
  bool normalized = false;
  std::string split;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return Shape(features.shape().begin() + 1, features.shape().end()); }
  std::size_t sample_size() const { return features.size() / labels.size(); }

  void validate() const {
    if (features.rank() != 4 || features.dim(0) != labels.size()) {
      throw std::invalid_argument("Dataset: features must be [N,C,H,W] with one label per sample");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
        throw std::invalid_argument("Dataset: label " + std::to_string(l) + " outside [0," +
                                    std::to_string(num_classes) + ")");
      }
    }
  }
};

struct DataSplit {
  Dataset train;
  Dataset test;
};

/// Samples selected by index, in the given order.
inline Dataset subset(const Dataset& d, std::span<const std::size_t> idx, std::string split = {}) {
  Shape shape = d.features.shape();
  shape[0] = idx.size();
  Dataset out{Tensor(shape), {}, d.num_classes, d.channel_mean, d.channel_std, d.normalized,
              split.empty() ? d.split : std::move(split)};
  const std::size_t s = d.sample_size();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(d.features.storage().begin() + static_cast<std::ptrdiff_t>(idx[i] * s), s,
                out.features.storage().begin() + static_cast<std::ptrdiff_t>(i * s));
    out.labels.push_back(d.labels[idx[i]]);
  }
  return out;
}

/// Two interleaved spirals in the plane, one per class, as 2-channel 1×1 samples.
inline Dataset two_spirals(std::size_t n, double turns, double noise, Rng& rng) {
  if (n < 2) throw std::invalid_argument("two_spirals: need at least two samples");
  Dataset d{Tensor(Shape{n, 2, 1, 1}), std::vector<int>(n), 2, {}, {}, false, "all"};
  const double span = 2 * std::numbers::pi * turns;
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 2);
    // sqrt spreads points evenly along the arc instead of bunching them at the centre.
    const double t = std::sqrt(uniform(rng, 0.0, 1.0)) * span;
    const double r = t / span;
    const double phase = cls * std::numbers::pi;
    d.features[2 * i] = r * std::cos(t + phase) + normal(rng, 0.0, noise);
    d.features[2 * i + 1] = r * std::sin(t + phase) + normal(rng, 0.0, noise);
    d.labels[i] = cls;
  }
  return d;
}

/// Isotropic unit-variance blobs centred at separation·e_k (k-th axis, wrapping).
inline Dataset gaussian_blobs(std::size_t n, std::size_t classes, std::size_t dim, double separation, Rng& rng) {
  if (classes < 2 || dim == 0) throw std::invalid_argument("gaussian_blobs: need >= 2 classes and dim >= 1");
  if (classes > 2 * dim) throw std::invalid_argument("gaussian_blobs: at most 2·dim classes fit on the axes");
  Dataset d{Tensor(Shape{n, dim, 1, 1}), std::vector<int>(n), classes, {}, {}, false, "all"};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    // Classes beyond dim reuse the axes with the opposite sign.
    const std::size_t axis = c % dim;
    const double sign = c < dim ? 1.0 : -1.0;
    for (std::size_t k = 0; k < dim; ++k) {
      d.features[i * dim + k] = normal(rng) + (k == axis ? sign * separation : 0.0);
    }
    d.labels[i] = static_cast<int>(c);
  }
  return d;
}

/// Reads "label,x0,x1,..." rows (header line required) into [N, C, H, W].
/// `num_classes == 0` infers max label + 1.
inline Dataset read_csv_images(const std::string& path, std::size_t channels, std::size_t height, std::size_t width,
                               std::size_t num_classes = 0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_csv_images: cannot open " + path);
  const std::size_t per = channels * height * width;
  if (per == 0) throw std::invalid_argument("read_csv_images: empty sample shape");
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  if (line.rfind("label", 0) != 0) throw std::runtime_error(path + ":1: expected header starting with 'label'");
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t col = 0;
    while (std::getline(ss, cell, ',')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cell.size() || !std::isfinite(v)) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad number '" + cell + "' in column " +
                                 std::to_string(col + 1));
      }
      if (col == 0) {
        if (v < 0 || v != std::floor(v)) {
          throw std::runtime_error(path + ":" + std::to_string(lineno) + ": label must be a non-negative integer");
        }
        labels.push_back(static_cast<int>(v));
      } else {
        values.push_back(v);
      }
      ++col;
    }
    if (col != per + 1) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(per + 1) +
                               " columns, found " + std::to_string(col));
    }
  }
  if (labels.empty()) throw std::runtime_error(path + ": no samples");
  const std::size_t inferred = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
  Dataset d{Tensor(Shape{labels.size(), channels, height, width}, std::move(values)), std::move(labels),
            num_classes ? num_classes : inferred, {}, {}, false, "all"};
  d.validate();
  return d;
}

/// Writes a dataset in the format read_csv_images accepts; values use
/// round-trip precision.
inline void write_csv_images(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_csv_images: cannot open " + path);
  const std::size_t per = d.sample_size();
  out << "label";
  for (std::size_t k = 0; k < per; ++k) out << ",x" << k;
  out << '\n';
  char buf[32];
  for (std::size_t i = 0; i < d.size(); ++i) {
    out << d.labels[i];
    for (std::size_t k = 0; k < per; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", d.features[i * per + k]);
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("write_csv_images: write failed for " + path);
}

/// Per-channel mean and (population) standard deviation over all samples and pixels.
inline void channel_stats(const Dataset& d, std::vector<double>& mean, std::vector<double>& stddev) {
  const std::size_t N = d.features.dim(0), C = d.features.dim(1), HW = d.features.dim(2) * d.features.dim(3);
  mean.assign(C, 0.0);
  stddev.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) s += d.features[(n * C + c) * HW + p];
    mean[c] = s / static_cast<double>(N * HW);
    double v = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) {
        const double e = d.features[(n * C + c) * HW + p] - mean[c];
        v += e * e;
      }
    stddev[c] = std::sqrt(v / static_cast<double>(N * HW));
    if (stddev[c] == 0.0) stddev[c] = 1.0;
  }
}

inline void apply_normalization(Dataset& d, const std::vector<double>& mean, const std::vector<double>& stddev) {
  if (d.normalized) throw std::logic_error("apply_normalization: dataset '" + d.split + "' is already normalized");
  const std::size_t N = d.features.dim(0), C = d.features.dim(1), HW = d.features.dim(2) * d.features.dim(3);
  if (mean.size() != C || stddev.size() != C) throw std::invalid_argument("apply_normalization: channel mismatch");
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) {
        double& v = d.features[(n * C + c) * HW + p];
        v = (v - mean[c]) / stddev[c];
      }
  d.channel_mean = mean;
  d.channel_std = stddev;
  d.normalized = true;
}

/// Seeded permutation split; when `normalize` is set both halves are
/// standardized with the training statistics.
inline DataSplit split_dataset(const Dataset& all, double test_fraction, bool normalize, Rng& rng) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("split_dataset: test_fraction must be in (0,1)");
  }
  std::vector<std::size_t> perm(all.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(all.size())));
  if (n_test == 0 || n_test >= all.size()) throw std::invalid_argument("split_dataset: split leaves an empty half");
  const std::span<const std::size_t> p(perm);
  DataSplit s{subset(all, p.subspan(n_test), "train"), subset(all, p.first(n_test), "test")};
  if (normalize) {
    std::vector<double> mean, stddev;
    channel_stats(s.train, mean, stddev);
    apply_normalization(s.train, mean, stddev);
    apply_normalization(s.test, mean, stddev);
  }
  return s;
}

/// Generates or loads the configured dataset and splits it; deterministic in `seed`.
inline DataSplit make_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  Rng gen(fork_seed(seed, 0));
  Dataset all;
  switch (cfg.kind) {
    case DatasetKind::two_spirals: all = two_spirals(cfg.num_samples, cfg.turns, cfg.noise, gen); break;
    case DatasetKind::gaussian_blobs:
      all = gaussian_blobs(cfg.num_samples, cfg.num_classes, cfg.dim, cfg.separation, gen);
      break;
    case DatasetKind::csv_images:
      all = read_csv_images(cfg.path, cfg.channels, cfg.height, cfg.width, cfg.num_classes);
      break;
  }
  Rng split_rng(fork_seed(seed, 1));
  return split_dataset(all, cfg.test_fraction, cfg.normalize, split_rng);
}

/// Batch of the samples listed in `order`; their labels go to `labels`.
inline Tensor gather_batch(const Dataset& d, std::span<const std::size_t> order, std::vector<int>& labels) {
  Shape shape = d.features.shape();
  shape[0] = order.size();
  Tensor batch(shape);
  const std::size_t s = d.sample_size();
  labels.clear();
  for (std::size_t i = 0; i < order.size(); ++i) {
    std::copy_n(d.features.storage().begin() + static_cast<std::ptrdiff_t>(order[i] * s), s,
                batch.storage().begin() + static_cast<std::ptrdiff_t>(i * s));
    labels.push_back(d.labels[order[i]]);
  }
  return batch;
}

/// Mirrors each sample left-right with probability 1/2.
inline void random_horizontal_flip(Tensor& batch, Rng& rng) {
  const std::size_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  for (std::size_t n = 0; n < N; ++n) {
    if ((rng() & 1u) == 0) continue;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h) {
        double* row = &batch[((n * C + c) * H + h) * W];
        std::reverse(row, row + W);
      }
  }
}

}  // namespace tsc::data
