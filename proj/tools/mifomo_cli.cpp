// mifomo-cli: data generation, band reduction, training, adaptation and
// evaluation from the command line. Talks to the library through mifomo.h only.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mifomo/mifomo.h"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kConfig = 1, kNumeric = 2, kAcceptance = 3, kOther = 4 };

struct Failure {
  int code;
};

int exit_code(mifomo_status s) {
  switch (s) {
    case MIFOMO_OK: return kOk;
    case MIFOMO_ERR_CONFIG: return kConfig;
    case MIFOMO_ERR_NUMERIC: return kNumeric;
    default: return kOther;
  }
}

void check(mifomo_status s, const char* what) {
  if (s == MIFOMO_OK) return;
  std::cerr << "mifomo-cli: " << what << " failed: " << mifomo_last_error();
  const std::string key = mifomo_last_error_key();
  if (!key.empty()) std::cerr << " [key " << key << "]";
  std::cerr << '\n';
  throw Failure{exit_code(s)};
}

template <class T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Config = std::unique_ptr<mifomo_config, Deleter<mifomo_config, mifomo_config_free>>;
using Dataset = std::unique_ptr<mifomo_dataset, Deleter<mifomo_dataset, mifomo_dataset_free>>;
using Model = std::unique_ptr<mifomo_model, Deleter<mifomo_model, mifomo_model_free>>;
using Report = std::unique_ptr<mifomo_report, Deleter<mifomo_report, mifomo_report_free>>;

std::string take_string(char* s) {
  std::string out = s ? s : "";
  mifomo_string_free(s);
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  os << text;
  if (!os) {
    std::cerr << "mifomo-cli: cannot write " << path << '\n';
    throw Failure{kOther};
  }
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<unsigned long long> seed;
  std::optional<std::size_t> trials;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "key = value run configuration file");
    app->add_option("-s,--set", overrides, "override one setting, key=value")->allow_extra_args(false);
    app->add_option("--seed", seed, "shorthand for --set seed=N");
    app->add_option("--trials", trials, "shorthand for --set trials=N");
  }

  Config load() const {
    mifomo_config* raw = nullptr;
    if (config_path.empty()) {
      check(mifomo_config_new(&raw), "config");
    } else {
      check(mifomo_config_load(config_path.c_str(), &raw), "loading config");
    }
    Config cfg(raw);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) {
        std::cerr << "mifomo-cli: --set expects key=value, got '" << kv << "'\n";
        throw Failure{kConfig};
      }
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t");
        const auto e = s.find_last_not_of(" \t");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      check(mifomo_config_set(cfg.get(), trim(kv.substr(0, eq)).c_str(), trim(kv.substr(eq + 1)).c_str()),
            "config override");
    }
    if (seed) check(mifomo_config_set(cfg.get(), "seed", std::to_string(*seed).c_str()), "config override");
    if (trials) check(mifomo_config_set(cfg.get(), "trials", std::to_string(*trials).c_str()), "config override");
    check(mifomo_config_validate(cfg.get()), "config validation");
    return cfg;
  }
};

std::size_t config_size(const mifomo_config* cfg, const char* key) {
  char* v = nullptr;
  check(mifomo_config_get(cfg, key, &v), "config lookup");
  return std::stoull(take_string(v));
}

Dataset read_dataset(const std::string& path) {
  mifomo_dataset* d = nullptr;
  check(mifomo_dataset_read(path.c_str(), &d), ("reading " + path).c_str());
  return Dataset(d);
}

Model read_model(const std::string& path) {
  mifomo_model* m = nullptr;
  check(mifomo_model_read(path.c_str(), &m), ("reading " + path).c_str());
  return Model(m);
}

void describe(const char* name, const mifomo_dataset* ds) {
  std::size_t h = 0, w = 0, b = 0, c = 0, n = 0;
  std::uint64_t sum = 0;
  check(mifomo_dataset_info(ds, &h, &w, &b, &c, &n), "dataset info");
  check(mifomo_dataset_checksum(ds, &sum), "checksum");
  std::printf("%s: %zux%zu, %zu bands, %zu classes, %zu labeled pixels, checksum %016llx\n", name, h, w, b, c, n,
              static_cast<unsigned long long>(sum));
}

void emit_report(const mifomo_report* r, const std::string& stem) {
  char* text = nullptr;
  char* kv = nullptr;
  char* timings = nullptr;
  check(mifomo_report_text(r, &text), "report");
  check(mifomo_report_kv(r, &kv), "report");
  check(mifomo_report_timings(r, &timings), "report");
  const std::string t = take_string(text);
  std::cout << t;
  std::cout << take_string(timings);
  if (!stem.empty()) {
    write_text(stem + ".txt", t);
    write_text(stem + ".kv", take_string(kv));
  } else {
    mifomo_string_free(kv);
  }
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-domain few-shot hyperspectral classification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mifomo_version()));

  Common common;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic source/target pair (raw bands)");
  std::string gen_dir = ".";
  bool gen_maps = false;
  common.attach(gen);
  gen->add_option("-o,--out-dir", gen_dir, "output directory");
  gen->add_flag("--maps", gen_maps, "also render ground-truth maps");

  auto* pca = app.add_subcommand("pca", "reduce a cube's bands with PCA");
  std::string pca_in, pca_out;
  std::optional<std::size_t> pca_bands;
  common.attach(pca);
  pca->add_option("-i,--input", pca_in, "input cube")->required();
  pca->add_option("-o,--output", pca_out, "output cube")->required();
  pca->add_option("-b,--bands", pca_bands, "components to keep (default: pca_bands)");

  auto* train = app.add_subcommand("train-source", "episodic training on the source domain");
  std::string train_src, train_out, train_trace;
  common.attach(train);
  train->add_option("--source", train_src, "band-reduced source cube")->required();
  train->add_option("-o,--output", train_out, "checkpoint to write")->required();
  train->add_option("--loss-trace", train_trace, "CSV of per-episode loss");

  auto* adapt = app.add_subcommand("adapt", "target adaptation for one trial");
  std::string ad_ckpt, ad_src, ad_tgt, ad_out, ad_sched, ad_audit;
  std::size_t ad_trial = 0;
  bool ad_raw = false;
  common.attach(adapt);
  adapt->add_option("--checkpoint", ad_ckpt, "source checkpoint")->required();
  adapt->add_option("--source", ad_src, "band-reduced source cube")->required();
  adapt->add_option("--target", ad_tgt, "band-reduced target cube")->required();
  adapt->add_option("-o,--output", ad_out, "adapted checkpoint")->required();
  adapt->add_option("--trial", ad_trial, "trial index (selects the support)");
  adapt->add_flag("--no-smoothing", ad_raw, "raw nearest-prototype pseudo-labels");
  adapt->add_option("--schedule", ad_sched, "schedule trace CSV");
  adapt->add_option("--audit", ad_audit, "pseudo-label audit");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on the target over the configured trials");
  std::string ev_ckpt, ev_tgt, ev_map, ev_report;
  bool ev_smooth = false;
  common.attach(eval);
  eval->add_option("--checkpoint", ev_ckpt, "checkpoint")->required();
  eval->add_option("--target", ev_tgt, "band-reduced target cube")->required();
  eval->add_flag("--smoothing", ev_smooth, "smooth predictions over each evaluation batch");
  eval->add_option("--map", ev_map, "PPM classification map of trial 0");
  eval->add_option("--report", ev_report, "report stem; writes STEM.txt and STEM.kv");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the encoder gradients");
  bool grad_all = false;
  grad->add_flag("--all", grad_all, "include the backbone groups");

  auto* dump = app.add_subcommand("dump-embeddings", "CSV of embeddings of every labeled pixel");
  std::string du_ckpt, du_data, du_out;
  dump->add_option("--checkpoint", du_ckpt, "checkpoint")->required();
  dump->add_option("--data", du_data, "band-reduced cube")->required();
  dump->add_option("-o,--output", du_out, "CSV path")->required();

  auto* run = app.add_subcommand("run", "generate, reduce, train and run one or all variants");
  std::string run_dir = "run";
  std::string run_variant = "full";
  common.attach(run);
  run->add_option("-o,--out-dir", run_dir, "output directory");
  run->add_option("--variant", run_variant, "source-only, no-intermediate, no-smoothing, full or all");

  auto* show = app.add_subcommand("config", "print the effective configuration");
  common.attach(show);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*show) {
      Config cfg = common.load();
      char* text = nullptr;
      check(mifomo_config_dump(cfg.get(), &text), "config dump");
      std::cout << take_string(text);
    } else if (*gen) {
      Config cfg = common.load();
      fs::create_directories(gen_dir);
      mifomo_dataset *s = nullptr, *t = nullptr;
      check(mifomo_generate(cfg.get(), &s, &t), "generation");
      Dataset src(s), tgt(t);
      const std::string sp = (fs::path(gen_dir) / "source.hsic").string();
      const std::string tp = (fs::path(gen_dir) / "target.hsic").string();
      check(mifomo_dataset_write(src.get(), sp.c_str()), "writing source");
      check(mifomo_dataset_write(tgt.get(), tp.c_str()), "writing target");
      describe(sp.c_str(), src.get());
      describe(tp.c_str(), tgt.get());
      if (gen_maps) {
        check(mifomo_dataset_render_labels(src.get(), (fs::path(gen_dir) / "source_gt.ppm").c_str()), "map");
        check(mifomo_dataset_render_labels(tgt.get(), (fs::path(gen_dir) / "target_gt.ppm").c_str()), "map");
      }
    } else if (*pca) {
      Config cfg = common.load();
      const std::size_t bands = pca_bands ? *pca_bands : config_size(cfg.get(), "pca_bands");
      Dataset in = read_dataset(pca_in);
      mifomo_dataset* o = nullptr;
      check(mifomo_dataset_pca(in.get(), bands, &o), "pca");
      Dataset out(o);
      check(mifomo_dataset_write(out.get(), pca_out.c_str()), "writing cube");
      describe(pca_out.c_str(), out.get());
    } else if (*train) {
      Config cfg = common.load();
      Dataset src = read_dataset(train_src);
      const auto t0 = Clock::now();
      mifomo_model* m = nullptr;
      check(mifomo_train_source(cfg.get(), src.get(), train_trace.empty() ? nullptr : train_trace.c_str(), &m),
            "source training");
      Model model(m);
      check(mifomo_model_write(model.get(), train_out.c_str()), "writing checkpoint");
      std::size_t trainable = 0, total = 0;
      check(mifomo_model_counts(model.get(), &trainable, &total), "model counts");
      std::printf("checkpoint %s: %zu parameters, %zu trainable\nsource_seconds=%.3f\n", train_out.c_str(), total,
                  trainable, seconds_since(t0));
    } else if (*adapt) {
      Config cfg = common.load();
      Model ckpt = read_model(ad_ckpt);
      Dataset src = read_dataset(ad_src), tgt = read_dataset(ad_tgt);
      const auto t0 = Clock::now();
      mifomo_model* m = nullptr;
      check(mifomo_adapt(cfg.get(), ckpt.get(), src.get(), tgt.get(), ad_trial, ad_raw ? 0 : 1,
                         ad_sched.empty() ? nullptr : ad_sched.c_str(), ad_audit.empty() ? nullptr : ad_audit.c_str(),
                         &m),
            "adaptation");
      Model model(m);
      check(mifomo_model_write(model.get(), ad_out.c_str()), "writing checkpoint");
      std::printf("adapted checkpoint %s\nadapt_seconds=%.3f\n", ad_out.c_str(), seconds_since(t0));
    } else if (*eval) {
      Config cfg = common.load();
      Model ckpt = read_model(ev_ckpt);
      Dataset tgt = read_dataset(ev_tgt);
      mifomo_report* r = nullptr;
      check(mifomo_evaluate(cfg.get(), ckpt.get(), tgt.get(), ev_smooth ? 1 : 0,
                            ev_map.empty() ? nullptr : ev_map.c_str(), &r),
            "evaluation");
      Report report(r);
      emit_report(report.get(), ev_report);
    } else if (*grad) {
      double worst = 0.0;
      int passed = 0;
      char* text = nullptr;
      check(mifomo_gradcheck(grad_all ? 1 : 0, &worst, &passed, &text), "gradcheck");
      std::cout << take_string(text);
      std::printf("worst relative error %.3e: %s\n", worst, passed ? "PASS" : "FAIL");
      if (!passed) return kAcceptance;
    } else if (*dump) {
      Model ckpt = read_model(du_ckpt);
      Dataset data = read_dataset(du_data);
      check(mifomo_dump_embeddings(ckpt.get(), data.get(), du_out.c_str()), "embedding dump");
    } else if (*run) {
      Config cfg = common.load();
      fs::create_directories(run_dir);
      const fs::path dir(run_dir);
      const std::size_t bands = config_size(cfg.get(), "pca_bands");

      auto t0 = Clock::now();
      mifomo_dataset *s = nullptr, *t = nullptr;
      check(mifomo_generate(cfg.get(), &s, &t), "generation");
      Dataset src_raw(s), tgt_raw(t);
      mifomo_dataset *sr = nullptr, *tr = nullptr;
      check(mifomo_dataset_pca(src_raw.get(), bands, &sr), "pca");
      Dataset src(sr);
      check(mifomo_dataset_pca(tgt_raw.get(), bands, &tr), "pca");
      Dataset tgt(tr);
      const double data_s = seconds_since(t0);

      t0 = Clock::now();
      mifomo_model* m = nullptr;
      check(mifomo_train_source(cfg.get(), src.get(), (dir / "source_loss.csv").c_str(), &m), "source training");
      Model ckpt(m);
      check(mifomo_model_write(ckpt.get(), (dir / "source.ckpt").c_str()), "writing checkpoint");
      const double source_s = seconds_since(t0);
      std::printf("data_seconds=%.3f\nsource_seconds=%.3f\n", data_s, source_s);

      std::vector<std::string> variants;
      if (run_variant == "all") {
        variants = {"source-only", "no-intermediate", "no-smoothing", "full"};
      } else {
        variants = {run_variant};
      }
      for (const auto& v : variants) {
        const std::string map = (dir / (v + "_map.ppm")).string();
        const std::string sched = (dir / (v + "_schedule.csv")).string();
        mifomo_report* r = nullptr;
        check(mifomo_run_variant(cfg.get(), v.c_str(), ckpt.get(), src.get(), tgt.get(), map.c_str(), sched.c_str(),
                                 &r),
              ("variant " + v).c_str());
        Report report(r);
        emit_report(report.get(), (dir / ("report_" + v)).string());
      }
    }
  } catch (const Failure& f) {
    return f.code;
  } catch (const std::exception& e) {
    std::cerr << "mifomo-cli: " << e.what() << '\n';
    return kOther;
  }
  return kOk;
}
