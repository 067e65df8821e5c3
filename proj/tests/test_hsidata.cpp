#include <cmath>
#include <cstring>

#include "doctest.h"
#include "helpers.hpp"
#include "mifomo/error.hpp"
#include "mifomo/hsidata.hpp"
#include "mifomo/mixup.hpp"

using namespace mifomo;

namespace {

CubeDataset random_cube(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  CubeDataset ds;
  ds.height = h;
  ds.width = w;
  ds.bands = c;
  ds.cube.resize(h * w * c);
  for (auto& v : ds.cube) v = static_cast<double>(static_cast<float>(rng.uniform()));
  return ds;
}

/// Cyclic Jacobi eigensolver for a small symmetric matrix; eigenpairs sorted
/// by descending eigenvalue.
void jacobi_eigen(std::vector<std::vector<double>> a, std::vector<double>& values,
                  std::vector<std::vector<double>>& vectors) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    }
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a[x][x] > a[y][y]; });
  values.clear();
  vectors.clear();
  for (std::size_t i : order) {
    values.push_back(a[i][i]);
    std::vector<double> col(n);
    for (std::size_t k = 0; k < n; ++k) col[k] = v[k][i];
    vectors.push_back(col);
  }
}

}  // namespace

TEST_SUITE("hsidata") {
  TEST_CASE("2x2x3 cube round trip") {
    CubeDataset ds;
    ds.height = 2;
    ds.width = 2;
    ds.bands = 3;
    ds.cube = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};
    ds.labels = {1, 0, 2, 1};
    ds.class_names = {"a", "bb"};
    const CubeDataset back = deserialize_cube(serialize_cube(ds));
    CHECK(back.cube == ds.cube);
    CHECK(back.labels == ds.labels);
    CHECK(back.class_names == ds.class_names);
    CHECK(back.at(1, 0, 2) == 8.0);

    testing::TempPath tmp("cube.hsic");
    write_cube(ds, tmp.str());
    CHECK(serialize_cube(read_cube(tmp.str())) == serialize_cube(ds));
  }

  TEST_CASE("unlabeled cubes round trip") {
    const CubeDataset ds = random_cube(3, 4, 2, 70);
    const CubeDataset back = deserialize_cube(serialize_cube(ds));
    CHECK_FALSE(back.has_labels());
    CHECK(back.cube == ds.cube);
  }

  TEST_CASE("corrupted files report the byte offset") {
    CubeDataset ds = random_cube(2, 2, 3, 71);
    auto bytes = serialize_cube(ds);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    try {
      deserialize_cube(bad_magic);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 0);
    }

    auto bad_version = bytes;
    bad_version[4] = 9;
    try {
      deserialize_cube(bad_version);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(e.offset() == 4);
      CHECK(std::string(e.what()).find("offset 4") != std::string::npos);
    }

    auto truncated = bytes;
    truncated.resize(truncated.size() - 3);
    CHECK_THROWS_AS(deserialize_cube(truncated), FormatError);

    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(deserialize_cube(trailing), FormatError);
  }

  TEST_CASE("out-of-range labels are rejected") {
    CubeDataset ds = random_cube(1, 2, 1, 72);
    ds.labels = {1, 3};
    ds.class_names = {"a", "b"};
    CHECK_THROWS_AS(ds.validate(), ValidationError);
  }

  TEST_CASE("checksum of a fixed random cube") {
    const CubeDataset ds = random_cube(64, 64, 50, 2024);
    CHECK(cube_checksum(ds) == 0xf1ec1510ccb0d9b8ULL);
    const auto bytes = serialize_cube(ds);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
    CHECK(cube_checksum(ds) == h);
  }

  TEST_CASE("PCA matches an independent eigensolver") {
    const CubeDataset ds = random_cube(16, 16, 10, 73);
    const PcaModel m = fit_pca(ds, 4);
    const std::size_t n = ds.pixels(), c = ds.bands;
    std::vector<double> mu(c, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t k = 0; k < c; ++k) mu[k] += ds.cube[p * c + k];
    }
    for (auto& v : mu) v /= static_cast<double>(n);
    std::vector<std::vector<double>> cov(c, std::vector<double>(c, 0.0));
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t i = 0; i < c; ++i) {
        for (std::size_t j = 0; j < c; ++j) cov[i][j] += (ds.cube[p * c + i] - mu[i]) * (ds.cube[p * c + j] - mu[j]);
      }
    }
    for (auto& row : cov) {
      for (auto& v : row) v /= static_cast<double>(n);
    }
    std::vector<double> values;
    std::vector<std::vector<double>> vectors;
    jacobi_eigen(cov, values, vectors);
    for (std::size_t k = 0; k < 4; ++k) {
      CHECK(std::abs(m.explained_variance[k] - values[k]) <= 1e-10);
      auto& v = vectors[k];
      const auto big = std::max_element(v.begin(), v.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
      if (*big < 0) {
        for (auto& x : v) x = -x;
      }
      for (std::size_t i = 0; i < c; ++i) CHECK(std::abs(m.components[i * 4 + k] - v[i]) <= 1e-8);
    }
  }

  TEST_CASE("PCA components are orthonormal and the full basis reconstructs") {
    const CubeDataset ds = random_cube(8, 8, 6, 74);
    const PcaModel m = fit_pca(ds, 6);
    for (std::size_t a = 0; a < 6; ++a) {
      for (std::size_t b = 0; b < 6; ++b) {
        double dot = 0.0;
        for (std::size_t i = 0; i < 6; ++i) dot += m.components[i * 6 + a] * m.components[i * 6 + b];
        CHECK(std::abs(dot - (a == b ? 1.0 : 0.0)) <= 1e-12);
      }
    }
    const auto rec = reconstruct_pca(m, apply_pca(m, ds));
    CHECK(testing::max_abs_diff(rec, ds.cube) <= 1e-12);
  }

  TEST_CASE("rank-one cube has one nonzero component") {
    CubeDataset ds;
    ds.height = 4;
    ds.width = 4;
    ds.bands = 3;
    const double dir[] = {1, 2, 2};
    for (std::size_t p = 0; p < 16; ++p) {
      for (double d : dir) ds.cube.push_back(static_cast<double>(p) * d / 3.0);
    }
    const PcaModel m = fit_pca(ds, 2);
    CHECK(m.explained_variance[0] > 1.0);
    CHECK(std::abs(m.explained_variance[1]) <= 1e-10);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(m.components[i * 2] - dir[i] / 3.0) <= 1e-12);
  }

  TEST_CASE("PCA is idempotent on its own output") {
    const CubeDataset ds = random_cube(8, 8, 6, 75);
    const CubeDataset once = apply_pca(fit_pca(ds, 3), ds);
    const CubeDataset twice = apply_pca(fit_pca(once, 3), once);
    for (std::size_t i = 0; i < once.cube.size(); ++i) {
      CHECK(std::abs(std::abs(twice.cube[i]) - std::abs(once.cube[i])) <= 1e-10);
    }
  }

  TEST_CASE("mirror padding reflects without repeating the edge") {
    CHECK(mirror_index(-1, 5) == 1);
    CHECK(mirror_index(-2, 5) == 2);
    CHECK(mirror_index(5, 5) == 3);
    CHECK(mirror_index(6, 5) == 2);
    CHECK(mirror_index(3, 5) == 3);

    CubeDataset ds = random_cube(4, 4, 2, 76);
    ds.patch_radius = 1;
    const Tensor p = extract_patch(ds, 0, 0);
    CHECK(p.shape() == Shape{3, 3, 2});
    CHECK(p[0] == ds.at(1, 1, 0));
    CHECK(p[(1 * 3 + 1) * 2 + 1] == ds.at(0, 0, 1));
    CHECK(p[(0 * 3 + 2) * 2] == ds.at(1, 1, 0));
    CHECK(p[(2 * 3 + 0) * 2] == ds.at(1, 1, 0));
  }

  TEST_CASE("PPM bytes") {
    const std::vector<std::uint32_t> labels = {0, 1, 2, 1};
    const std::vector<Rgb> palette = {Rgb{255, 0, 0}, Rgb{0, 0, 255}};
    const auto bytes = render_map(labels, 2, 2, palette);
    const std::string header = "P6\n2 2\n255\n";
    REQUIRE(bytes.size() == header.size() + 12);
    CHECK(std::string(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header.size())) == header);
    const std::vector<unsigned char> px(bytes.begin() + static_cast<std::ptrdiff_t>(header.size()), bytes.end());
    CHECK(px == std::vector<unsigned char>{0, 0, 0, 255, 0, 0, 0, 0, 255, 255, 0, 0});
    const std::vector<std::uint32_t> bad = {3};
    CHECK_THROWS_AS(render_map(bad, 1, 1, palette), RenderError);
  }

  TEST_CASE("palette colours are distinct") {
    const auto p = default_palette(16);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(p[i] != Rgb{0, 0, 0});
      for (std::size_t j = i + 1; j < p.size(); ++j) CHECK(p[i] != p[j]);
    }
  }

  TEST_CASE("generator is deterministic and produces disjoint label spaces") {
    GeneratorSpec spec;
    spec.height = 24;
    spec.width = 24;
    spec.raw_bands = 16;
    Rng a(77), b(77);
    const auto [s1, t1] = synth_domain_pair(spec, a);
    const auto [s2, t2] = synth_domain_pair(spec, b);
    CHECK(cube_checksum(s1) == cube_checksum(s2));
    CHECK(cube_checksum(t1) == cube_checksum(t2));
    CHECK(s1.n_classes() == spec.source_classes);
    CHECK(t1.n_classes() == spec.target_classes);
    CHECK(labeled_pool(t1).class_count() == spec.target_classes);
    s1.validate();
    t1.validate();
  }

  TEST_CASE("the distorted domain is far from the source") {
    const GeneratorSpec spec;
    Rng rng(78);
    const auto [s, t] = synth_domain_pair(spec, rng);
    // Raw spectra of the even or odd pixels serve as the embedding.
    auto half = [](const CubeDataset& d, std::size_t start) {
      std::vector<double> v;
      std::size_t n = 0;
      for (std::size_t p = start; p < d.pixels(); p += 2, ++n) {
        v.insert(v.end(), d.cube.begin() + static_cast<std::ptrdiff_t>(p * d.bands),
                 d.cube.begin() + static_cast<std::ptrdiff_t>((p + 1) * d.bands));
      }
      return Tensor({n, d.bands}, std::move(v));
    };
    Rng proj(79);
    const double cross = domain_distance(half(s, 0), half(t, 1), 64, proj);
    const double halves = domain_distance(half(s, 0), half(s, 1), 64, proj);
    CHECK(cross > 5.0 * halves);
  }
}
