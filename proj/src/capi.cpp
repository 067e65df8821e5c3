#include "mifomo/mifomo.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <new>
#include <utility>
#include <sstream>
#include <string>

#include "mifomo/error.hpp"
#include "mifomo/pipeline.hpp"

struct mifomo_config {
  mifomo::RunConfig cfg;
};

struct mifomo_dataset {
  mifomo::CubeDataset ds;
};

struct mifomo_model {
  mifomo::EncoderParams params;
};

struct mifomo_report {
  mifomo::RunReport report;
};

namespace {

thread_local std::string g_error;
thread_local std::string g_error_key;

mifomo_status status_of(mifomo::ErrorKind kind) {
  using mifomo::ErrorKind;
  switch (kind) {
    case ErrorKind::Dimension: return MIFOMO_ERR_DIMENSION;
    case ErrorKind::Numeric: return MIFOMO_ERR_NUMERIC;
    case ErrorKind::Contract: return MIFOMO_ERR_CONTRACT;
    case ErrorKind::Validation: return MIFOMO_ERR_VALIDATION;
    case ErrorKind::Config: return MIFOMO_ERR_CONFIG;
    case ErrorKind::Format: return MIFOMO_ERR_FORMAT;
    case ErrorKind::Sampling: return MIFOMO_ERR_SAMPLING;
    case ErrorKind::Render: return MIFOMO_ERR_RENDER;
    case ErrorKind::Io: return MIFOMO_ERR_IO;
  }
  return MIFOMO_ERR_INTERNAL;
}

template <class Fn>
mifomo_status guard(Fn&& fn) {
  g_error.clear();
  g_error_key.clear();
  try {
    fn();
    return MIFOMO_OK;
  } catch (const mifomo::ConfigError& e) {
    g_error = e.what();
    g_error_key = e.key();
    return MIFOMO_ERR_CONFIG;
  } catch (const mifomo::Error& e) {
    g_error = std::string(mifomo::error_kind_name(e.kind())) + ": " + e.what();
    return status_of(e.kind());
  } catch (const std::bad_alloc&) {
    g_error = "out of memory";
    return MIFOMO_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_error = e.what();
    return MIFOMO_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void write_text(const char* path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw mifomo::IoError(std::string("cannot open ") + path + " for writing");
  os << text;
  if (!os) throw mifomo::IoError(std::string("write failed for ") + path);
}

mifomo::Datasets datasets_of(const mifomo_dataset* source, const mifomo_dataset* target,
                             const mifomo::RunConfig& cfg) {
  mifomo::Datasets d{source->ds, target->ds};
  d.source.patch_radius = d.target.patch_radius = cfg.encoder.patch_radius;
  return d;
}

}  // namespace

extern "C" {

const char* mifomo_version(void) { return "1.0.0"; }

const char* mifomo_status_name(mifomo_status s) {
  switch (s) {
    case MIFOMO_OK: return "ok";
    case MIFOMO_ERR_DIMENSION: return "dimension error";
    case MIFOMO_ERR_NUMERIC: return "numeric error";
    case MIFOMO_ERR_CONTRACT: return "contract error";
    case MIFOMO_ERR_VALIDATION: return "validation error";
    case MIFOMO_ERR_CONFIG: return "config error";
    case MIFOMO_ERR_FORMAT: return "format error";
    case MIFOMO_ERR_SAMPLING: return "sampling error";
    case MIFOMO_ERR_RENDER: return "render error";
    case MIFOMO_ERR_IO: return "io error";
    case MIFOMO_ERR_ARGUMENT: return "invalid argument";
    case MIFOMO_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* mifomo_last_error(void) { return g_error.c_str(); }
const char* mifomo_last_error_key(void) { return g_error_key.c_str(); }
void mifomo_string_free(char* s) { std::free(s); }

}  // extern "C"

namespace {

mifomo_status bad_argument(std::string message) {
  g_error = std::move(message);
  g_error_key.clear();
  return MIFOMO_ERR_ARGUMENT;
}

mifomo_status null_argument() { return bad_argument("required argument is NULL"); }

template <class Fn>
mifomo_status call(Fn&& fn) {
  try {
    return guard(std::forward<Fn>(fn));
  } catch (...) {
    g_error = "unexpected failure";
    return MIFOMO_ERR_INTERNAL;
  }
}

}  // namespace

extern "C" {

mifomo_status mifomo_config_new(mifomo_config** out) {
  if (!out) return null_argument();
  return call([&] { *out = new mifomo_config{}; });
}

mifomo_status mifomo_config_load(const char* path, mifomo_config** out) {
  if (!path || !out) return null_argument();
  return call([&] { *out = new mifomo_config{mifomo::load_config(path)}; });
}

mifomo_status mifomo_config_set(mifomo_config* cfg, const char* key, const char* value) {
  if (!cfg || !key || !value) return null_argument();
  return call([&] { mifomo::set_config_value(cfg->cfg, key, value); });
}

mifomo_status mifomo_config_get(const mifomo_config* cfg, const char* key, char** value) {
  if (!cfg || !key || !value) return null_argument();
  return call([&] {
    for (const auto& [k, v] : mifomo::config_entries(cfg->cfg)) {
      if (k == key) {
        *value = dup_string(v);
        return;
      }
    }
    throw mifomo::ConfigError(key, "unknown key");
  });
}

mifomo_status mifomo_config_validate(const mifomo_config* cfg) {
  if (!cfg) return null_argument();
  return call([&] { cfg->cfg.validate(); });
}

mifomo_status mifomo_config_dump(const mifomo_config* cfg, char** text) {
  if (!cfg || !text) return null_argument();
  return call([&] { *text = dup_string(mifomo::config_text(cfg->cfg)); });
}

void mifomo_config_free(mifomo_config* cfg) { delete cfg; }

mifomo_status mifomo_generate(const mifomo_config* cfg, mifomo_dataset** source, mifomo_dataset** target) {
  if (!cfg || !source || !target) return null_argument();
  return call([&] {
    cfg->cfg.validate();
    mifomo::Rng rng = mifomo::Rng(cfg->cfg.seed).fork(1);
    auto [s, t] = mifomo::synth_domain_pair(cfg->cfg.generator, rng);
    auto* ps = new mifomo_dataset{std::move(s)};
    *target = new mifomo_dataset{std::move(t)};
    *source = ps;
  });
}

mifomo_status mifomo_dataset_read(const char* path, mifomo_dataset** out) {
  if (!path || !out) return null_argument();
  return call([&] { *out = new mifomo_dataset{mifomo::read_cube(path)}; });
}

mifomo_status mifomo_dataset_write(const mifomo_dataset* ds, const char* path) {
  if (!ds || !path) return null_argument();
  return call([&] { mifomo::write_cube(ds->ds, path); });
}

mifomo_status mifomo_dataset_pca(const mifomo_dataset* in, size_t out_bands, mifomo_dataset** out) {
  if (!in || !out) return null_argument();
  return call([&] { *out = new mifomo_dataset{mifomo::apply_pca(mifomo::fit_pca(in->ds, out_bands), in->ds)}; });
}

mifomo_status mifomo_dataset_info(const mifomo_dataset* ds, size_t* height, size_t* width, size_t* bands,
                                  size_t* classes, size_t* labeled) {
  if (!ds) return null_argument();
  return call([&] {
    if (height) *height = ds->ds.height;
    if (width) *width = ds->ds.width;
    if (bands) *bands = ds->ds.bands;
    if (classes) *classes = ds->ds.n_classes();
    if (labeled) {
      std::size_t n = 0;
      for (auto l : ds->ds.labels) n += l != 0;
      *labeled = n;
    }
  });
}

mifomo_status mifomo_dataset_checksum(const mifomo_dataset* ds, uint64_t* out) {
  if (!ds || !out) return null_argument();
  return call([&] { *out = mifomo::cube_checksum(ds->ds); });
}

mifomo_status mifomo_dataset_render_labels(const mifomo_dataset* ds, const char* path) {
  if (!ds || !path) return null_argument();
  return call([&] {
    if (!ds->ds.has_labels()) throw mifomo::ContractError("dataset has no labels to render");
    const auto pal = mifomo::default_palette(ds->ds.n_classes());
    mifomo::write_file(path, mifomo::render_map(ds->ds.labels, ds->ds.height, ds->ds.width, pal));
  });
}

void mifomo_dataset_free(mifomo_dataset* ds) { delete ds; }

mifomo_status mifomo_train_source(const mifomo_config* cfg, const mifomo_dataset* source, const char* loss_trace_path,
                                  mifomo_model** out) {
  if (!cfg || !source || !out) return null_argument();
  return call([&] {
    mifomo::CubeDataset ds = source->ds;
    ds.patch_radius = cfg->cfg.encoder.patch_radius;
    auto res = mifomo::run_source_phase(cfg->cfg, ds);
    if (loss_trace_path) {
      std::ostringstream os;
      os.precision(17);
      os << "episode,loss\n";
      for (std::size_t i = 0; i < res.losses.size(); ++i) os << i << ',' << res.losses[i] << '\n';
      write_text(loss_trace_path, os.str());
    }
    *out = new mifomo_model{std::move(res.params)};
  });
}

mifomo_status mifomo_adapt(const mifomo_config* cfg, const mifomo_model* checkpoint, const mifomo_dataset* source,
                           const mifomo_dataset* target, size_t trial, int smoothing, const char* schedule_path,
                           const char* audit_path, mifomo_model** out) {
  if (!cfg || !checkpoint || !source || !target || !out) return null_argument();
  return call([&] {
    const auto data = datasets_of(source, target, cfg->cfg);
    auto res = mifomo::adapt_trial(cfg->cfg, checkpoint->params, data, trial, smoothing != 0);
    if (schedule_path) {
      std::ostringstream os;
      mifomo::write_schedule_trace(os, res.schedule);
      write_text(schedule_path, os.str());
    }
    if (audit_path) {
      std::string text;
      for (const auto& line : res.audit) text += line + "\n";
      write_text(audit_path, text);
    }
    *out = new mifomo_model{std::move(res.params)};
  });
}

mifomo_status mifomo_model_read(const char* path, mifomo_model** out) {
  if (!path || !out) return null_argument();
  return call([&] { *out = new mifomo_model{mifomo::read_checkpoint(path)}; });
}

mifomo_status mifomo_model_write(const mifomo_model* model, const char* path) {
  if (!model || !path) return null_argument();
  return call([&] { mifomo::write_checkpoint(model->params, path); });
}

mifomo_status mifomo_model_counts(const mifomo_model* model, size_t* trainable, size_t* total) {
  if (!model) return null_argument();
  return call([&] {
    if (trainable) *trainable = model->params.trainable_count();
    if (total) *total = model->params.parameter_count();
  });
}

mifomo_status mifomo_dump_embeddings(const mifomo_model* model, const mifomo_dataset* ds, const char* path) {
  if (!model || !ds || !path) return null_argument();
  return call([&] {
    mifomo::CubeDataset data = ds->ds;
    data.patch_radius = model->params.config.patch_radius;
    std::vector<std::size_t> pixels;
    for (std::size_t p = 0; p < data.pixels(); ++p) {
      if (!data.has_labels() || data.labels[p] != 0) pixels.push_back(p);
    }
    const mifomo::Tensor z = mifomo::embed_pixels(model->params, data, pixels, 256);
    const std::size_t d = model->params.config.embed_dim;
    std::ostringstream os;
    os.precision(17);
    os << "pixel,label";
    for (std::size_t k = 0; k < d; ++k) os << ",z" << k;
    os << '\n';
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      os << pixels[i] << ',' << (data.has_labels() ? data.labels[pixels[i]] : 0u);
      for (std::size_t k = 0; k < d; ++k) os << ',' << z[i * d + k];
      os << '\n';
    }
    write_text(path, os.str());
  });
}

void mifomo_model_free(mifomo_model* model) { delete model; }

mifomo_status mifomo_evaluate(const mifomo_config* cfg, const mifomo_model* model, const mifomo_dataset* target,
                              int smoothing, const char* map_path, mifomo_report** out) {
  if (!cfg || !model || !target || !out) return null_argument();
  return call([&] {
    mifomo::Datasets data;
    data.target = target->ds;
    data.target.patch_radius = cfg->cfg.encoder.patch_radius;
    mifomo::ExperimentHooks hooks;
    std::vector<std::uint32_t> map;
    hooks.on_prediction_map = [&map](const std::vector<std::uint32_t>& m) { map = m; };
    const auto variant = smoothing ? mifomo::Variant::NoIntermediate : mifomo::Variant::SourceOnly;
    auto report = mifomo::run_trials(cfg->cfg, variant, data, model->params, hooks);
    report.variant = smoothing ? "evaluate-smoothed" : "evaluate";
    if (map_path) {
      const auto pal = mifomo::default_palette(data.target.n_classes());
      mifomo::write_file(map_path, mifomo::render_map(map, data.target.height, data.target.width, pal));
    }
    *out = new mifomo_report{std::move(report)};
  });
}

mifomo_status mifomo_run_variant(const mifomo_config* cfg, const char* variant, const mifomo_model* source_ckpt,
                                 const mifomo_dataset* source, const mifomo_dataset* target, const char* map_path,
                                 const char* schedule_path, mifomo_report** out) {
  if (!cfg || !variant || !source_ckpt || !source || !target || !out) return null_argument();
  return call([&] {
    const auto v = mifomo::parse_variant(variant);
    const auto data = datasets_of(source, target, cfg->cfg);
    mifomo::ExperimentHooks hooks;
    std::vector<std::uint32_t> map;
    hooks.on_prediction_map = [&map](const std::vector<std::uint32_t>& m) { map = m; };
    auto report = mifomo::run_trials(cfg->cfg, v, data, source_ckpt->params, hooks);
    if (map_path) {
      const auto pal = mifomo::default_palette(data.target.n_classes());
      mifomo::write_file(map_path, mifomo::render_map(map, data.target.height, data.target.width, pal));
    }
    if (schedule_path && !report.schedule.empty()) {
      std::ostringstream os;
      mifomo::write_schedule_trace(os, report.schedule);
      write_text(schedule_path, os.str());
      report.schedule_path = schedule_path;
    }
    *out = new mifomo_report{std::move(report)};
  });
}

mifomo_status mifomo_report_text(const mifomo_report* r, char** text) {
  if (!r || !text) return null_argument();
  return call([&] { *text = dup_string(mifomo::report_text(r->report)); });
}

mifomo_status mifomo_report_kv(const mifomo_report* r, char** text) {
  if (!r || !text) return null_argument();
  return call([&] { *text = dup_string(mifomo::report_kv(r->report)); });
}

mifomo_status mifomo_report_metric(const mifomo_report* r, const char* metric, double* mean, double* stddev) {
  if (!r || !metric) return null_argument();
  const std::string m = metric;
  const auto& R = r->report;
  double mv, sv;
  if (m == "oa") {
    mv = R.mean.oa;
    sv = R.stddev.oa;
  } else if (m == "aa") {
    mv = R.mean.aa;
    sv = R.stddev.aa;
  } else if (m == "kc") {
    mv = R.mean.kc;
    sv = R.stddev.kc;
  } else {
    return bad_argument("unknown metric '" + m + "' (oa, aa, kc)");
  }
  if (mean) *mean = mv;
  if (stddev) *stddev = sv;
  return MIFOMO_OK;
}

mifomo_status mifomo_report_timings(const mifomo_report* r, char** text) {
  if (!r || !text) return null_argument();
  return call([&] {
    std::ostringstream os;
    for (const auto& [name, secs] : r->report.timings) os << name << "_seconds=" << secs << '\n';
    *text = dup_string(os.str());
  });
}

void mifomo_report_free(mifomo_report* r) { delete r; }

mifomo_status mifomo_gradcheck(int all_groups, double* worst, int* passed, char** text) {
  return call([&] {
    mifomo::GradcheckOptions opt;
    opt.all_groups = all_groups != 0;
    const auto rep = mifomo::gradcheck(opt);
    if (worst) *worst = rep.worst;
    if (passed) *passed = rep.passed ? 1 : 0;
    if (text) {
      std::ostringstream os;
      os.precision(3);
      for (const auto& g : rep.groups) {
        os << g.name << ' ';
        if (g.skipped) {
          os << "skipped (frozen)";
        } else {
          os << std::scientific << g.rel_error << std::defaultfloat;
        }
        os << '\n';
      }
      *text = dup_string(os.str());
    }
  });
}

}  // extern "C"
