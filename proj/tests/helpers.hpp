#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "mifomo/rng.hpp"
#include "mifomo/tensor.hpp"

namespace testing {

inline mifomo::Tensor random_tensor(mifomo::Shape shape, mifomo::Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(mifomo::shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return mifomo::Tensor(std::move(shape), std::move(v));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Scratch path under the system temp dir, removed on destruction.
struct TempPath {
  std::filesystem::path path;
  explicit TempPath(const std::string& name)
      : path(std::filesystem::temp_directory_path() / ("mifomo_test_" + std::to_string(::getpid()) + "_" + name)) {}
  ~TempPath() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
};

}  // namespace testing

#include "mifomo/pipeline.hpp"

namespace testing {

/// A run small enough for unit tests: 24×24 scene, one-layer encoder, a few
/// episodes everywhere.
inline mifomo::RunConfig tiny_config() {
  mifomo::RunConfig cfg;
  mifomo::apply_config_text(cfg, R"(
trials = 2
k_shot = 4
q_query = 4
k_s = 2
k_q = 2
source_episodes = 6
warmup_episodes = 3
e_outer = 2
e_inner = 2
pseudo_batch = 32
smoothing_batch = 64
pca_bands = 8
encoder.depth = 1
encoder.embed_dim = 8
encoder.heads = 2
encoder.mlp_dim = 8
encoder.spectral_tokens = 4
encoder.patch_radius = 1
generator.height = 24
generator.width = 24
generator.raw_bands = 16
generator.source_classes = 5
generator.target_classes = 3
)");
  cfg.validate();
  return cfg;
}

}  // namespace testing
