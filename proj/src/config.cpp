#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "mifomo/error.hpp"
#include "mifomo/pipeline.hpp"

namespace mifomo {

const char* error_kind_name(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Numeric: return "numeric error";
    case ErrorKind::Contract: return "contract error";
    case ErrorKind::Validation: return "validation error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Format: return "format error";
    case ErrorKind::Sampling: return "sampling error";
    case ErrorKind::Render: return "render error";
    case ErrorKind::Io: return "io error";
  }
  return "error";
}

const char* variant_name(Variant v) noexcept {
  switch (v) {
    case Variant::SourceOnly: return "source-only";
    case Variant::NoIntermediate: return "no-intermediate";
    case Variant::NoSmoothing: return "no-smoothing";
    case Variant::Full: return "full";
  }
  return "full";
}

Variant parse_variant(const std::string& name) {
  for (Variant v : {Variant::SourceOnly, Variant::NoIntermediate, Variant::NoSmoothing, Variant::Full}) {
    if (name == variant_name(v)) return v;
  }
  throw ConfigError("variant", "unknown variant '" + name + "' (source-only, no-intermediate, no-smoothing, full)");
}

std::size_t RunConfig::ways() const noexcept {
  return n_way != 0 ? n_way : std::min(generator.source_classes, generator.target_classes);
}

void RunConfig::validate() const {
  if (trials == 0) throw ConfigError("trials", "must be >= 1");
  if (k_shot < 2) throw ConfigError("k_shot", "must be >= 2 so the support can be split");
  if (q_query == 0) throw ConfigError("q_query", "must be >= 1");
  if (ways() < 2) throw ConfigError("n_way", "must be >= 2");
  if (ways() > std::min(generator.source_classes, generator.target_classes)) {
    throw ConfigError("n_way", "exceeds the class count of a domain");
  }
  if (warmup_episodes > source_episodes) throw ConfigError("warmup_episodes", "cannot exceed source_episodes");
  if (!(warmup_lr > 0.0)) throw ConfigError("warmup_lr", "must be > 0");
  if (!(lr > 0.0)) throw ConfigError("lr", "must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum", "must lie in [0, 1)");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm", "must be >= 0");
  if (e_outer == 0) throw ConfigError("e_outer", "must be >= 1");
  if (k_s == 0) throw ConfigError("k_s", "must be >= 1");
  if (k_q == 0) throw ConfigError("k_q", "must be >= 1");
  if (k_s + k_q != k_shot) throw ConfigError("k_s", "k_s + k_q must equal k_shot");
  if (pseudo_batch < 2) throw ConfigError("pseudo_batch", "must be >= 2");
  if (smoothing_batch < 1) throw ConfigError("smoothing_batch", "must be >= 1");
  if (embed_batch < 1) throw ConfigError("embed_batch", "must be >= 1");
  if (pca_bands == 0 || pca_bands > generator.raw_bands) {
    throw ConfigError("pca_bands", "must lie in [1, generator.raw_bands]");
  }
  if (encoder.bands != pca_bands) throw ConfigError("encoder.bands", "must equal pca_bands");
  encoder.validate();
  mixup.validate();
  if (mixup.total_steps != e_outer) throw ConfigError("mixup.total_steps", "must equal e_outer");
  propagation.validate();
  generator.validate();
}

namespace {

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end || !std::isfinite(out)) throw ConfigError(key, "expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key, "expected true or false, got '" + v + "'");
}

// Shortest text that reads back to the same double.
std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string& key, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_FIELD(name, expr)                                                                              \
  Field {                                                                                                   \
    name, [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = to_u64(k, v); },         \
        [](const RunConfig& c) { return std::to_string(c.expr); }                                           \
  }
#define REAL_FIELD(name, expr)                                                                              \
  Field {                                                                                                   \
    name, [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = to_double(k, v); },      \
        [](const RunConfig& c) { return fmt(c.expr); }                                                      \
  }
#define BOOL_FIELD(name, expr)                                                                              \
  Field {                                                                                                   \
    name, [](RunConfig& c, const std::string& k, const std::string& v) { c.expr = to_bool(k, v); },        \
        [](const RunConfig& c) { return std::string(c.expr ? "true" : "false"); }                          \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SIZE_FIELD("seed", seed),
      SIZE_FIELD("trials", trials),
      Field{"variant", [](RunConfig& c, const std::string&, const std::string& v) { c.variant = parse_variant(v); },
            [](const RunConfig& c) { return std::string(variant_name(c.variant)); }},
      SIZE_FIELD("n_way", n_way),
      SIZE_FIELD("k_shot", k_shot),
      SIZE_FIELD("q_query", q_query),
      SIZE_FIELD("source_episodes", source_episodes),
      SIZE_FIELD("warmup_episodes", warmup_episodes),
      REAL_FIELD("warmup_lr", warmup_lr),
      // The schedule length follows the number of intermediate epochs.
      Field{"e_outer",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              c.e_outer = to_u64(k, v);
              c.mixup.total_steps = c.e_outer;
            },
            [](const RunConfig& c) { return std::to_string(c.e_outer); }},
      SIZE_FIELD("e_inner", e_inner),
      SIZE_FIELD("k_s", k_s),
      SIZE_FIELD("k_q", k_q),
      REAL_FIELD("lr", lr),
      REAL_FIELD("momentum", momentum),
      REAL_FIELD("clip_norm", clip_norm),
      SIZE_FIELD("topk_per_class", topk_per_class),
      SIZE_FIELD("pseudo_batch", pseudo_batch),
      SIZE_FIELD("smoothing_batch", smoothing_batch),
      SIZE_FIELD("embed_batch", embed_batch),
      // pca_bands also fixes the encoder input width.
      Field{"pca_bands",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              c.pca_bands = to_u64(k, v);
              c.encoder.bands = c.pca_bands;
            },
            [](const RunConfig& c) { return std::to_string(c.pca_bands); }},
      SIZE_FIELD("encoder.depth", encoder.depth),
      SIZE_FIELD("encoder.embed_dim", encoder.embed_dim),
      SIZE_FIELD("encoder.heads", encoder.heads),
      SIZE_FIELD("encoder.mlp_dim", encoder.mlp_dim),
      SIZE_FIELD("encoder.patch_size", encoder.patch_size),
      SIZE_FIELD("encoder.spectral_tokens", encoder.spectral_tokens),
      SIZE_FIELD("encoder.patch_radius", encoder.patch_radius),
      REAL_FIELD("encoder.ln_eps", encoder.ln_eps),
      REAL_FIELD("mixup.beta_alpha", mixup.beta_alpha),
      REAL_FIELD("mixup.tau", mixup.tau),
      REAL_FIELD("mixup.sigma_perturb", mixup.sigma_perturb),
      SIZE_FIELD("mixup.projections", mixup.projections),
      REAL_FIELD("propagation.alpha", propagation.alpha),
      Field{"propagation.sigma",
            [](RunConfig& c, const std::string& k, const std::string& v) {
              if (v == "median") {
                c.propagation.sigma_mode = SigmaMode::MedianHeuristic;
              } else {
                c.propagation.sigma_mode = SigmaMode::Fixed;
                c.propagation.sigma = to_double(k, v);
              }
            },
            [](const RunConfig& c) {
              return c.propagation.sigma_mode == SigmaMode::MedianHeuristic ? std::string("median")
                                                                            : fmt(c.propagation.sigma);
            }},
      REAL_FIELD("propagation.median_scale", propagation.median_scale),
      REAL_FIELD("propagation.ridge_eps", propagation.ridge_eps),
      SIZE_FIELD("propagation.max_iters", propagation.max_iters),
      REAL_FIELD("propagation.conv_tol", propagation.conv_tol),
      SIZE_FIELD("generator.height", generator.height),
      SIZE_FIELD("generator.width", generator.width),
      SIZE_FIELD("generator.raw_bands", generator.raw_bands),
      SIZE_FIELD("generator.source_classes", generator.source_classes),
      SIZE_FIELD("generator.target_classes", generator.target_classes),
      SIZE_FIELD("generator.regions_per_class", generator.regions_per_class),
      REAL_FIELD("generator.border", generator.border),
      SIZE_FIELD("generator.bumps", generator.bumps),
      REAL_FIELD("generator.bump_width", generator.bump_width),
      REAL_FIELD("generator.illumination", generator.illumination),
      REAL_FIELD("generator.drift", generator.drift),
      REAL_FIELD("generator.noise", generator.noise),
      BOOL_FIELD("generator.distort", generator.distort),
      REAL_FIELD("generator.band_shift", generator.distortion.band_shift),
      REAL_FIELD("generator.band_stretch", generator.distortion.band_stretch),
      REAL_FIELD("generator.gain", generator.distortion.gain),
      REAL_FIELD("generator.offset", generator.distortion.offset),
      REAL_FIELD("generator.corr_noise", generator.distortion.corr_noise),
      REAL_FIELD("generator.corr_length", generator.distortion.corr_length),
      REAL_FIELD("generator.target_drift", generator.distortion.drift),
      REAL_FIELD("generator.target_noise", generator.distortion.noise),
  };
  return table;
}

#undef SIZE_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD

}  // namespace

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(cfg, key, value);
      return;
    }
  }
  throw ConfigError(key, "unknown key");
}

void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno), "expected 'key = value', got '" + line + "'");
    }
    set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  RunConfig cfg;
  apply_config_text(cfg, buf.str());
  return cfg;
}

std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) {
    out.emplace_back(f.key, f.key == std::string("e_outer") ? std::to_string(cfg.e_outer) : f.get(cfg));
  }
  return out;
}

std::string config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : config_entries(cfg)) out += k + " = " + v + "\n";
  return out;
}

}  // namespace mifomo
