#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <unistd.h>

#include "doctest.h"
#include "mifomo/mifomo.h"

namespace {

std::filesystem::path scratch(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mifomo_capi_" + std::to_string(::getpid()) + "_" + name);
}

mifomo_config* tiny_config() {
  mifomo_config* cfg = nullptr;
  REQUIRE(mifomo_config_new(&cfg) == MIFOMO_OK);
  const char* settings[][2] = {
      {"trials", "1"},          {"k_shot", "4"},          {"q_query", "4"},
      {"k_s", "2"},             {"k_q", "2"},             {"source_episodes", "4"},
      {"warmup_episodes", "2"}, {"e_outer", "1"},         {"e_inner", "2"},
      {"pseudo_batch", "32"},   {"pca_bands", "8"},       {"encoder.depth", "1"},
      {"encoder.embed_dim", "8"}, {"encoder.heads", "2"}, {"encoder.mlp_dim", "8"},
      {"encoder.spectral_tokens", "4"}, {"encoder.patch_radius", "1"}, {"generator.height", "20"},
      {"generator.width", "20"}, {"generator.raw_bands", "12"}, {"generator.source_classes", "4"},
      {"generator.target_classes", "3"},
  };
  for (const auto& kv : settings) REQUIRE(mifomo_config_set(cfg, kv[0], kv[1]) == MIFOMO_OK);
  REQUIRE(mifomo_config_validate(cfg) == MIFOMO_OK);
  return cfg;
}

}  // namespace

TEST_CASE("version and status names") {
  CHECK(std::strlen(mifomo_version()) > 0);
  CHECK(std::string(mifomo_status_name(MIFOMO_OK)) == "ok");
  CHECK(std::string(mifomo_status_name(MIFOMO_ERR_CONFIG)) == "config error");
}

TEST_CASE("config errors carry the offending key") {
  mifomo_config* cfg = nullptr;
  REQUIRE(mifomo_config_new(&cfg) == MIFOMO_OK);
  CHECK(mifomo_config_set(cfg, "encoder.nope", "1") == MIFOMO_ERR_CONFIG);
  CHECK(std::string(mifomo_last_error_key()) == "encoder.nope");
  CHECK(std::strlen(mifomo_last_error()) > 0);

  CHECK(mifomo_config_set(cfg, "k_s", "4") == MIFOMO_OK);
  CHECK(mifomo_config_validate(cfg) == MIFOMO_ERR_CONFIG);
  CHECK(std::string(mifomo_last_error_key()) == "k_s");

  char* value = nullptr;
  REQUIRE(mifomo_config_get(cfg, "k_s", &value) == MIFOMO_OK);
  CHECK(std::string(value) == "4");
  mifomo_string_free(value);
  mifomo_config_free(cfg);
}

TEST_CASE("null arguments and missing files") {
  CHECK(mifomo_config_new(nullptr) == MIFOMO_ERR_ARGUMENT);
  mifomo_dataset* ds = nullptr;
  CHECK(mifomo_dataset_read(scratch("missing.hsic").c_str(), &ds) == MIFOMO_ERR_IO);
  CHECK(ds == nullptr);

  const auto bad = scratch("bad.hsic");
  std::ofstream(bad, std::ios::binary) << "HSIX garbage";
  CHECK(mifomo_dataset_read(bad.c_str(), &ds) == MIFOMO_ERR_FORMAT);
  CHECK(std::string(mifomo_last_error()).find("offset 0") != std::string::npos);
  std::filesystem::remove(bad);
}

TEST_CASE("gradient check through the C interface") {
  double worst = 1.0;
  int passed = 0;
  char* text = nullptr;
  REQUIRE(mifomo_gradcheck(0, &worst, &passed, &text) == MIFOMO_OK);
  CHECK(passed == 1);
  CHECK(worst <= 1e-4);
  CHECK(std::strlen(text) > 0);
  mifomo_string_free(text);
}

TEST_CASE("generate, reduce, train, adapt and evaluate") {
  mifomo_config* cfg = tiny_config();
  mifomo_dataset *src = nullptr, *tgt = nullptr;
  REQUIRE(mifomo_generate(cfg, &src, &tgt) == MIFOMO_OK);

  size_t h = 0, w = 0, bands = 0, classes = 0, labeled = 0;
  REQUIRE(mifomo_dataset_info(tgt, &h, &w, &bands, &classes, &labeled) == MIFOMO_OK);
  CHECK(h == 20);
  CHECK(bands == 12);
  CHECK(classes == 3);
  CHECK(labeled > 0);

  const auto path = scratch("tgt.hsic");
  REQUIRE(mifomo_dataset_write(tgt, path.c_str()) == MIFOMO_OK);
  mifomo_dataset* back = nullptr;
  REQUIRE(mifomo_dataset_read(path.c_str(), &back) == MIFOMO_OK);
  uint64_t c1 = 0, c2 = 0;
  mifomo_dataset_checksum(tgt, &c1);
  mifomo_dataset_checksum(back, &c2);
  CHECK(c1 == c2);
  mifomo_dataset_free(back);
  std::filesystem::remove(path);

  mifomo_dataset *rs = nullptr, *rt = nullptr;
  REQUIRE(mifomo_dataset_pca(src, 8, &rs) == MIFOMO_OK);
  REQUIRE(mifomo_dataset_pca(tgt, 8, &rt) == MIFOMO_OK);

  mifomo_model* model = nullptr;
  REQUIRE(mifomo_train_source(cfg, rs, nullptr, &model) == MIFOMO_OK);
  size_t trainable = 0, total = 0;
  mifomo_model_counts(model, &trainable, &total);
  CHECK(trainable > 0);
  CHECK(trainable < total);

  mifomo_model* adapted = nullptr;
  REQUIRE(mifomo_adapt(cfg, model, rs, rt, 0, 1, nullptr, nullptr, &adapted) == MIFOMO_OK);

  mifomo_report* report = nullptr;
  REQUIRE(mifomo_run_variant(cfg, "full", model, rs, rt, nullptr, nullptr, &report) == MIFOMO_OK);
  double oa = -1, sd = -1;
  REQUIRE(mifomo_report_metric(report, "oa", &oa, &sd) == MIFOMO_OK);
  CHECK(oa >= 0.0);
  CHECK(oa <= 100.0);
  CHECK(mifomo_report_metric(report, "f1", &oa, &sd) == MIFOMO_ERR_ARGUMENT);
  char* kv = nullptr;
  REQUIRE(mifomo_report_kv(report, &kv) == MIFOMO_OK);
  CHECK(std::string(kv).find("oa") != std::string::npos);
  mifomo_string_free(kv);

  mifomo_report* bad = nullptr;
  CHECK(mifomo_run_variant(cfg, "fancy", model, rs, rt, nullptr, nullptr, &bad) == MIFOMO_ERR_CONFIG);
  CHECK(std::string(mifomo_last_error_key()) == "variant");

  mifomo_report_free(report);
  mifomo_model_free(adapted);
  mifomo_model_free(model);
  mifomo_dataset_free(rs);
  mifomo_dataset_free(rt);
  mifomo_dataset_free(src);
  mifomo_dataset_free(tgt);
  mifomo_config_free(cfg);
}
