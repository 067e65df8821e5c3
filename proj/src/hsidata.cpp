#include "mifomo/hsidata.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "bytes.hpp"
#include "mifomo/error.hpp"

namespace mifomo {

void CubeDataset::validate() const {
  if (cube.size() != height * width * bands) {
    throw ValidationError("cube has " + std::to_string(cube.size()) + " values, expected " +
                          std::to_string(height * width * bands));
  }
  if (!labels.empty()) {
    if (labels.size() != height * width) throw ValidationError("label raster size does not match the cube");
    for (auto l : labels) {
      if (l > class_names.size()) {
        throw ValidationError("label " + std::to_string(l) + " exceeds class count " +
                              std::to_string(class_names.size()));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// HSIC files

std::vector<unsigned char> serialize_cube(const CubeDataset& ds) {
  ds.validate();
  std::vector<unsigned char> out{'H', 'S', 'I', 'C'};
  out.reserve(32 + ds.labels.size() * 4 + ds.cube.size() * 4);
  bytes::put_u32(out, kCubeVersion);
  bytes::put_u32(out, static_cast<std::uint32_t>(ds.height));
  bytes::put_u32(out, static_cast<std::uint32_t>(ds.width));
  bytes::put_u32(out, static_cast<std::uint32_t>(ds.bands));
  bytes::put_u32(out, ds.has_labels() ? 1u : 0u);
  if (ds.has_labels()) {
    bytes::put_u32(out, static_cast<std::uint32_t>(ds.class_names.size()));
    for (const auto& name : ds.class_names) bytes::put_str(out, name);
    for (auto l : ds.labels) bytes::put_u32(out, l);
  }
  for (double v : ds.cube) bytes::put_f32(out, static_cast<float>(v));
  return out;
}

CubeDataset deserialize_cube(std::span<const unsigned char> data) {
  bytes::Reader rd(data);
  if (rd.str(4, "magic") != "HSIC") throw FormatError(0, "bad cube magic");
  const std::uint32_t version = rd.u32("version");
  if (version != kCubeVersion) throw FormatError(4, "unsupported cube version " + std::to_string(version));
  CubeDataset ds;
  ds.height = rd.u32("height");
  ds.width = rd.u32("width");
  ds.bands = rd.u32("bands");
  const std::size_t flag_at = rd.pos();
  const std::uint32_t has_labels = rd.u32("label flag");
  if (has_labels > 1) throw FormatError(flag_at, "label flag must be 0 or 1");
  if (ds.height == 0 || ds.width == 0 || ds.bands == 0) throw FormatError(8, "zero cube extent");
  if (has_labels) {
    const std::size_t at = rd.pos();
    const std::uint32_t n = rd.u32("class count");
    if (n > rd.remaining() / 4) throw FormatError(at, "implausible class count");
    for (std::uint32_t i = 0; i < n; ++i) {
      const std::size_t len_at = rd.pos();
      const std::uint32_t len = rd.u32("class name length");
      if (len > rd.remaining()) throw FormatError(len_at, "truncated class name");
      ds.class_names.push_back(rd.str(len, "class name"));
    }
    const std::size_t px = ds.height * ds.width;
    if (px > rd.remaining() / 4) throw FormatError(rd.pos(), "truncated label raster");
    ds.labels.resize(px);
    for (std::size_t i = 0; i < px; ++i) {
      const std::size_t at_l = rd.pos();
      ds.labels[i] = rd.u32("label raster");
      if (ds.labels[i] > n) throw FormatError(at_l, "label " + std::to_string(ds.labels[i]) + " exceeds class count");
    }
  }
  const std::size_t n = ds.height * ds.width * ds.bands;
  if (n > rd.remaining() / 4) throw FormatError(rd.pos(), "truncated cube payload");
  ds.cube.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.cube[i] = rd.f32("cube payload");
  if (!rd.done()) throw FormatError(rd.pos(), "trailing bytes after cube payload");
  return ds;
}

void write_file(const std::string& path, std::span<const unsigned char> data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!os) throw IoError("write failed for " + path);
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_cube(const CubeDataset& ds, const std::string& path) { write_file(path, serialize_cube(ds)); }

CubeDataset read_cube(const std::string& path) { return deserialize_cube(read_file(path)); }

std::uint64_t cube_checksum(const CubeDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char b : serialize_cube(ds)) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Synthetic domains

void GeneratorSpec::validate() const {
  if (height < 8) throw ConfigError("generator.height", "must be >= 8");
  if (width < 8) throw ConfigError("generator.width", "must be >= 8");
  if (raw_bands < 2) throw ConfigError("generator.raw_bands", "must be >= 2");
  if (target_classes == 0) throw ConfigError("generator.target_classes", "must be >= 1");
  if (source_classes < target_classes) throw ConfigError("generator.source_classes", "must be >= target_classes");
  if (regions_per_class == 0) throw ConfigError("generator.regions_per_class", "must be >= 1");
  if (!(border >= 0.0)) throw ConfigError("generator.border", "must be >= 0");
  if (bumps == 0) throw ConfigError("generator.bumps", "must be >= 1");
  if (!(bump_width > 0.0)) throw ConfigError("generator.bump_width", "must be > 0");
  if (!(illumination >= 0.0)) throw ConfigError("generator.illumination", "must be >= 0");
  if (!(drift >= 0.0)) throw ConfigError("generator.drift", "must be >= 0");
  if (!(noise >= 0.0)) throw ConfigError("generator.noise", "must be >= 0");
  if (!(distortion.band_stretch > 0.0)) throw ConfigError("generator.band_stretch", "must be > 0");
  if (!(distortion.corr_noise >= 0.0)) throw ConfigError("generator.corr_noise", "must be >= 0");
  if (!(distortion.corr_length > 0.0)) throw ConfigError("generator.corr_length", "must be > 0");
  if (!(distortion.drift >= 0.0)) throw ConfigError("generator.target_drift", "must be >= 0");
  if (!(distortion.noise >= 0.0)) throw ConfigError("generator.target_noise", "must be >= 0");
}

namespace {

struct Bump {
  double amp, centre, width;
};

/// Baseline plus Gaussian bumps over the normalized band axis.
struct Signature {
  double base = 0.0;
  double slope = 0.0;
  std::vector<Bump> bumps;

  double operator()(double x) const {
    double v = base + slope * x;
    for (const auto& b : bumps) {
      const double t = (x - b.centre) / b.width;
      v += b.amp * std::exp(-0.5 * t * t);
    }
    return v;
  }
};

Signature random_signature(const GeneratorSpec& spec, Rng& rng) {
  Signature s;
  s.base = rng.uniform(0.2, 0.5);
  s.slope = rng.uniform(-0.2, 0.2);
  for (std::size_t m = 0; m < spec.bumps; ++m) {
    s.bumps.push_back({rng.uniform(0.2, 1.0), rng.uniform(0.0, 1.0), spec.bump_width * rng.uniform(0.6, 1.6)});
  }
  return s;
}

/// Sum of low-frequency plane waves on [0,1]², scaled to unit RMS amplitude.
struct SmoothField {
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  double norm = 1.0;

  double operator()(double y, double x) const {
    double v = 0.0;
    for (const auto& w : waves) v += w.amp * std::cos(2.0 * std::numbers::pi * (w.fx * x + w.fy * y) + w.phase);
    return v * norm;
  }
};

SmoothField random_field(Rng& rng, std::size_t waves = 4) {
  SmoothField f;
  double power = 0.0;
  for (std::size_t k = 0; k < waves; ++k) {
    SmoothField::Wave w{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(0.0, 2.0 * std::numbers::pi),
                        rng.uniform(0.5, 1.0)};
    power += 0.5 * w.amp * w.amp;
    f.waves.push_back(w);
  }
  f.norm = 1.0 / std::sqrt(power);
  return f;
}

struct Layout {
  std::vector<std::uint32_t> labels;  // with borders zeroed
  std::vector<std::uint32_t> owner;   // nearest-seed class, never zero
};

Layout voronoi_layout(const GeneratorSpec& spec, std::size_t classes, Rng& rng) {
  const std::size_t seeds = classes * spec.regions_per_class;
  std::vector<std::uint32_t> seed_class(seeds);
  for (std::size_t s = 0; s < seeds; ++s) seed_class[s] = static_cast<std::uint32_t>(s % classes + 1);
  rng.shuffle(seed_class);
  std::vector<double> sy(seeds), sx(seeds);
  for (std::size_t s = 0; s < seeds; ++s) {
    sy[s] = rng.uniform(0.0, static_cast<double>(spec.height));
    sx[s] = rng.uniform(0.0, static_cast<double>(spec.width));
  }
  Layout out;
  out.labels.resize(spec.height * spec.width);
  out.owner.resize(spec.height * spec.width);
  for (std::size_t h = 0; h < spec.height; ++h) {
    for (std::size_t w = 0; w < spec.width; ++w) {
      std::vector<double> dist(seeds);
      std::size_t best = 0;
      for (std::size_t s = 0; s < seeds; ++s) {
        const double dy = static_cast<double>(h) + 0.5 - sy[s], dx = static_cast<double>(w) + 0.5 - sx[s];
        dist[s] = std::sqrt(dy * dy + dx * dx);
        if (dist[s] < dist[best]) best = s;
      }
      // Border width is measured against the nearest seed of another class.
      const double d1 = dist[best];
      double d2 = INFINITY;
      for (std::size_t s = 0; s < seeds; ++s) {
        if (seed_class[s] != seed_class[best]) d2 = std::min(d2, dist[s]);
      }
      const std::size_t i = h * spec.width + w;
      out.owner[i] = seed_class[best];
      out.labels[i] = (d2 - d1) < spec.border ? 0u : seed_class[best];
    }
  }
  return out;
}

/// Band-correlated noise: white noise smoothed by a Gaussian kernel along the
/// bands, rescaled to unit variance.
std::vector<double> correlated_noise(std::size_t bands, double length, Rng& rng) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * length));
  std::vector<double> kernel;
  double k2 = 0.0;
  for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
    const double v = std::exp(-0.5 * static_cast<double>(t * t) / (length * length));
    kernel.push_back(v);
    k2 += v * v;
  }
  const std::size_t n = bands + 2 * static_cast<std::size_t>(radius);
  std::vector<double> white(n);
  for (auto& v : white) v = rng.normal();
  std::vector<double> out(bands, 0.0);
  for (std::size_t b = 0; b < bands; ++b) {
    for (std::size_t k = 0; k < kernel.size(); ++k) out[b] += kernel[k] * white[b + k];
    out[b] /= std::sqrt(k2);
  }
  return out;
}

CubeDataset make_domain(const GeneratorSpec& spec, std::size_t classes, const std::string& prefix,
                        const DistortionSpec* distortion, Rng& rng) {
  Rng sig_rng = rng.fork(1), layout_rng = rng.fork(2), field_rng = rng.fork(3), noise_rng = rng.fork(4);
  std::vector<Signature> sigs, drift_dirs;
  for (std::size_t c = 0; c < classes; ++c) {
    sigs.push_back(random_signature(spec, sig_rng));
    drift_dirs.push_back(random_signature(spec, sig_rng));
  }
  const Layout layout = voronoi_layout(spec, classes, layout_rng);
  const SmoothField illum = random_field(field_rng);
  std::vector<SmoothField> drift_fields;
  for (std::size_t c = 0; c < classes; ++c) drift_fields.push_back(random_field(field_rng));

  const std::size_t nb = spec.raw_bands;
  std::vector<double> axis(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    double x = static_cast<double>(b) / static_cast<double>(nb - 1);
    if (distortion) x = distortion->band_stretch * x + distortion->band_shift;
    axis[b] = x;
  }
  // Class curves are sampled once on the (possibly warped) axis.
  std::vector<std::vector<double>> sig_val(classes, std::vector<double>(nb)), dir_val(classes, std::vector<double>(nb));
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t b = 0; b < nb; ++b) {
      sig_val[c][b] = sigs[c](axis[b]);
      dir_val[c][b] = drift_dirs[c](axis[b]) - drift_dirs[c].base;
    }
  }

  const double drift_level = distortion ? distortion->drift : spec.drift;
  const double noise_level = distortion ? distortion->noise : spec.noise;

  CubeDataset ds;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.bands = nb;
  ds.cube.resize(spec.height * spec.width * nb);
  ds.labels = layout.labels;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::string idx = std::to_string(c + 1);
    ds.class_names.push_back(prefix + (idx.size() < 2 ? "0" : "") + idx);
  }
  for (std::size_t h = 0; h < spec.height; ++h) {
    const double fy = static_cast<double>(h) / static_cast<double>(spec.height);
    for (std::size_t w = 0; w < spec.width; ++w) {
      const double fx = static_cast<double>(w) / static_cast<double>(spec.width);
      const std::size_t i = h * spec.width + w;
      const std::size_t c = layout.owner[i] - 1;
      const double light = 1.0 + spec.illumination * illum(fy, fx);
      const double drift = drift_level * drift_fields[c](fy, fx);
      std::vector<double> extra;
      if (distortion && distortion->corr_noise > 0.0) extra = correlated_noise(nb, distortion->corr_length, noise_rng);
      for (std::size_t b = 0; b < nb; ++b) {
        double v = light * sig_val[c][b] + drift * dir_val[c][b] + noise_level * noise_rng.normal();
        if (distortion) {
          v = distortion->gain * v + distortion->offset;
          if (!extra.empty()) v += distortion->corr_noise * extra[b];
        }
        // Values are kept f32-representable so a write/read cycle is exact.
        ds.cube[i * nb + b] = static_cast<double>(static_cast<float>(v));
      }
    }
  }
  return ds;
}

}  // namespace

std::pair<CubeDataset, CubeDataset> synth_domain_pair(const GeneratorSpec& spec, Rng& rng) {
  spec.validate();
  Rng src_rng = rng.fork(11), tgt_rng = rng.fork(12);
  CubeDataset source = make_domain(spec, spec.source_classes, "source-", nullptr, src_rng);
  CubeDataset target =
      make_domain(spec, spec.target_classes, "target-", spec.distort ? &spec.distortion : nullptr, tgt_rng);
  return {std::move(source), std::move(target)};
}

// ---------------------------------------------------------------------------
// PCA

PcaModel fit_pca(const CubeDataset& ds, std::size_t out_bands) {
  ds.validate();
  if (out_bands == 0 || out_bands > ds.bands) {
    throw ConfigError("pca.out_bands", std::to_string(out_bands) + " must lie in [1, " + std::to_string(ds.bands) + "]");
  }
  const auto c = static_cast<Eigen::Index>(ds.bands);
  const auto n = static_cast<Eigen::Index>(ds.pixels());
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> x(ds.cube.data(), n, c);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const Eigen::MatrixXd centred = x.rowwise() - mean;
  const Eigen::MatrixXd cov = (centred.transpose() * centred) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("fit_pca: eigendecomposition failed");

  PcaModel m;
  m.in_bands = ds.bands;
  m.out_bands = out_bands;
  m.mean.assign(mean.data(), mean.data() + c);
  m.components.assign(ds.bands * out_bands, 0.0);
  for (std::size_t k = 0; k < out_bands; ++k) {
    // Eigen orders eigenvalues ascending.
    const Eigen::Index src = c - 1 - static_cast<Eigen::Index>(k);
    Eigen::VectorXd v = eig.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    m.explained_variance.push_back(std::max(eig.eigenvalues()(src), 0.0));
    for (Eigen::Index b = 0; b < c; ++b) m.components[static_cast<std::size_t>(b) * out_bands + k] = v(b);
  }
  return m;
}

CubeDataset apply_pca(const PcaModel& model, const CubeDataset& ds) {
  ds.validate();
  if (ds.bands != model.in_bands) {
    throw DimensionError("apply_pca: cube has " + std::to_string(ds.bands) + " bands, model expects " +
                         std::to_string(model.in_bands));
  }
  CubeDataset out;
  out.height = ds.height;
  out.width = ds.width;
  out.bands = model.out_bands;
  out.labels = ds.labels;
  out.class_names = ds.class_names;
  out.patch_radius = ds.patch_radius;
  out.cube.assign(ds.pixels() * model.out_bands, 0.0);
  std::vector<double> centred(ds.bands);
  for (std::size_t p = 0; p < ds.pixels(); ++p) {
    for (std::size_t b = 0; b < ds.bands; ++b) centred[b] = ds.cube[p * ds.bands + b] - model.mean[b];
    for (std::size_t k = 0; k < model.out_bands; ++k) {
      double s = 0.0;
      for (std::size_t b = 0; b < ds.bands; ++b) s += centred[b] * model.components[b * model.out_bands + k];
      out.cube[p * model.out_bands + k] = s;
    }
  }
  return out;
}

std::vector<double> reconstruct_pca(const PcaModel& model, const CubeDataset& reduced) {
  if (reduced.bands != model.out_bands) throw DimensionError("reconstruct_pca: band count mismatch");
  std::vector<double> out(reduced.pixels() * model.in_bands);
  for (std::size_t p = 0; p < reduced.pixels(); ++p) {
    for (std::size_t b = 0; b < model.in_bands; ++b) {
      double s = model.mean[b];
      for (std::size_t k = 0; k < model.out_bands; ++k)
        s += reduced.cube[p * model.out_bands + k] * model.components[b * model.out_bands + k];
      out[p * model.in_bands + b] = s;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patches

std::size_t mirror_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  std::ptrdiff_t m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<std::ptrdiff_t>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

namespace {

void copy_window(const CubeDataset& ds, std::size_t row, std::size_t col, double* dst) {
  const auto r = static_cast<std::ptrdiff_t>(ds.patch_radius);
  for (std::ptrdiff_t dy = -r; dy <= r; ++dy) {
    const std::size_t h = mirror_index(static_cast<std::ptrdiff_t>(row) + dy, ds.height);
    for (std::ptrdiff_t dx = -r; dx <= r; ++dx) {
      const std::size_t w = mirror_index(static_cast<std::ptrdiff_t>(col) + dx, ds.width);
      const double* src = ds.cube.data() + (h * ds.width + w) * ds.bands;
      dst = std::copy(src, src + ds.bands, dst);
    }
  }
}

}  // namespace

Tensor extract_patch(const CubeDataset& ds, std::size_t row, std::size_t col) {
  if (row >= ds.height || col >= ds.width) {
    throw ContractError("extract_patch: (" + std::to_string(row) + ", " + std::to_string(col) + ") outside " +
                        std::to_string(ds.height) + "x" + std::to_string(ds.width));
  }
  const std::size_t side = 2 * ds.patch_radius + 1;
  std::vector<double> out(side * side * ds.bands);
  copy_window(ds, row, col, out.data());
  return Tensor({side, side, ds.bands}, std::move(out));
}

Tensor extract_patches(const CubeDataset& ds, std::span<const std::size_t> pixels) {
  const std::size_t side = 2 * ds.patch_radius + 1;
  const std::size_t each = side * side * ds.bands;
  std::vector<double> out(pixels.size() * each);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    if (pixels[i] >= ds.pixels()) throw ContractError("extract_patches: pixel index out of range");
    copy_window(ds, pixels[i] / ds.width, pixels[i] % ds.width, out.data() + i * each);
  }
  return Tensor({pixels.size(), side, side, ds.bands}, std::move(out));
}

LabeledPool labeled_pool(const CubeDataset& ds) {
  if (!ds.has_labels()) throw ContractError("labeled_pool: dataset has no labels");
  LabeledPool pool;
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    if (ds.labels[i] != 0) pool.add(static_cast<int>(ds.labels[i]), i);
  }
  return pool;
}

// ---------------------------------------------------------------------------
// Maps

std::vector<Rgb> default_palette(std::size_t n) {
  static const Rgb base[] = {{230, 25, 75},  {60, 180, 75},   {255, 225, 25}, {0, 130, 200},  {245, 130, 48},
                             {145, 30, 180}, {70, 240, 240},  {240, 50, 230}, {210, 245, 60}, {250, 190, 212},
                             {0, 128, 128},  {220, 190, 255}, {170, 110, 40}, {255, 250, 200}, {128, 0, 0},
                             {170, 255, 195}};
  std::vector<Rgb> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < std::size(base)) {
      out.push_back(base[i]);
      continue;
    }
    // Golden-ratio hue walk, full saturation-ish.
    const double hue = std::fmod(static_cast<double>(i) * 0.6180339887498949, 1.0) * 6.0;
    const double f = hue - std::floor(hue);
    const auto hi = static_cast<int>(std::floor(hue)) % 6;
    const auto v = std::uint8_t{235}, p = std::uint8_t{60};
    const auto q = static_cast<std::uint8_t>(235 - 175 * f), t = static_cast<std::uint8_t>(60 + 175 * f);
    const Rgb table[] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
    out.push_back(table[hi]);
  }
  return out;
}

std::vector<unsigned char> render_map(std::span<const std::uint32_t> labels, std::size_t height, std::size_t width,
                                      std::span<const Rgb> palette) {
  if (labels.size() != height * width) throw DimensionError("render_map: raster size mismatch");
  const std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(header.size() + 3 * labels.size());
  for (auto l : labels) {
    if (l == 0) {
      out.insert(out.end(), {0, 0, 0});
      continue;
    }
    if (l > palette.size()) {
      throw RenderError("render_map: class " + std::to_string(l) + " has no palette entry (" +
                        std::to_string(palette.size()) + " colours)");
    }
    const Rgb& c = palette[l - 1];
    out.insert(out.end(), c.begin(), c.end());
  }
  return out;
}

}  // namespace mifomo
