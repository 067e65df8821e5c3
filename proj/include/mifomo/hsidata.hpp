#pragma once

// Hyperspectral cubes: the HSIC file format, a synthetic source/target
// generator, PCA band reduction, mirrored patch extraction and PPM maps.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mifomo/episodic.hpp"
#include "mifomo/rng.hpp"
#include "mifomo/tensor.hpp"

namespace mifomo {

struct CubeDataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  /// (h, w, c) order. Files store f32; memory keeps doubles so that derived
  /// cubes (PCA output) are not rounded until written.
  std::vector<double> cube;
  /// h·W + w → class in [1, n_classes], 0 for background. Empty when the cube
  /// carries no labels.
  std::vector<std::uint32_t> labels;
  std::vector<std::string> class_names;
  std::size_t patch_radius = 4;

  bool has_labels() const noexcept { return !labels.empty(); }
  std::size_t n_classes() const noexcept { return class_names.size(); }
  std::size_t pixels() const noexcept { return height * width; }
  double at(std::size_t h, std::size_t w, std::size_t c) const { return cube[(h * width + w) * bands + c]; }
  std::uint32_t label(std::size_t h, std::size_t w) const { return labels[h * width + w]; }

  /// Throws ValidationError when sizes or label values are inconsistent.
  void validate() const;
};

// HSIC file: "HSIC", u32 version, u32 H, u32 W, u32 C, u32 has_labels; when
// has_labels: u32 n_classes, per class (u32 length, bytes), then H·W u32
// labels; then H·W·C f32 values in (h, w, c) order. All little-endian.
inline constexpr std::uint32_t kCubeVersion = 1;

std::vector<unsigned char> serialize_cube(const CubeDataset& ds);
CubeDataset deserialize_cube(std::span<const unsigned char> bytes);
void write_cube(const CubeDataset& ds, const std::string& path);
CubeDataset read_cube(const std::string& path);

/// FNV-1a over the serialized bytes.
std::uint64_t cube_checksum(const CubeDataset& ds);

struct DistortionSpec {
  /// Band axis warp: λ' = stretch·λ + shift on the normalized axis [0, 1].
  double band_shift = 0.04;
  double band_stretch = 1.08;
  double gain = 0.8;
  double offset = 0.15;
  /// Std of the band-correlated noise and its correlation length in bands.
  double corr_noise = 0.04;
  double corr_length = 6.0;
  /// Spatial drift and white-noise levels used in place of the generator's
  /// own values on the distorted domain.
  double drift = 0.5;
  double noise = 0.1;
};

struct GeneratorSpec {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t raw_bands = 64;
  std::size_t source_classes = 12;
  std::size_t target_classes = 6;
  std::size_t regions_per_class = 3;
  /// Pixels this close to a region border (in seed-distance difference) are
  /// left unlabeled.
  double border = 1.0;
  /// Gaussian bumps per signature.
  std::size_t bumps = 3;
  double bump_width = 0.08;
  /// Strength of the smooth per-pixel illumination and within-class drift.
  double illumination = 0.25;
  double drift = 0.15;
  double noise = 0.02;
  DistortionSpec distortion;
  bool distort = true;

  void validate() const;
};

/// Source and target cubes with independent class signatures (disjoint label
/// spaces). The target passes through the spectral distortion.
std::pair<CubeDataset, CubeDataset> synth_domain_pair(const GeneratorSpec& spec, Rng& rng);

struct PcaModel {
  std::size_t in_bands = 0;
  std::size_t out_bands = 0;
  std::vector<double> mean;
  /// in_bands × out_bands, row-major, orthonormal columns.
  std::vector<double> components;
  std::vector<double> explained_variance;
};

/// Eigendecomposition of the population band covariance over all pixels.
/// Each component is signed so its largest-magnitude entry is positive.
PcaModel fit_pca(const CubeDataset& ds, std::size_t out_bands);
CubeDataset apply_pca(const PcaModel& model, const CubeDataset& ds);
/// Maps reduced pixels back to the input bands.
std::vector<double> reconstruct_pca(const PcaModel& model, const CubeDataset& reduced);

/// Reflects an out-of-range index into [0, n) without repeating the edge.
std::size_t mirror_index(std::ptrdiff_t i, std::size_t n);

/// (2r+1) × (2r+1) × C window centred at (row, col), mirrored at the borders.
Tensor extract_patch(const CubeDataset& ds, std::size_t row, std::size_t col);
/// [B × (2r+1) × (2r+1) × C] for the pixels h·W + w in `pixels`.
Tensor extract_patches(const CubeDataset& ds, std::span<const std::size_t> pixels);

/// Class id → labeled pixel indices.
LabeledPool labeled_pool(const CubeDataset& ds);

using Rgb = std::array<std::uint8_t, 3>;

/// Distinct colours for classes 1..n.
std::vector<Rgb> default_palette(std::size_t n);
/// Binary PPM; 0 is black, class c uses palette[c − 1].
std::vector<unsigned char> render_map(std::span<const std::uint32_t> labels, std::size_t height, std::size_t width,
                                      std::span<const Rgb> palette);
void write_file(const std::string& path, std::span<const unsigned char> bytes);
std::vector<unsigned char> read_file(const std::string& path);

}  // namespace mifomo
