#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "iavae/models.hpp"
#include "iavae/synthetic.hpp"

using namespace iavae;
namespace fs = std::filesystem;

TEST_CASE("noiseless data sits exactly on the decoder") {
  const SyntheticDataset d = generate(500, 0.0, 3);
  REQUIRE(d.size() == 500);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto& z = d.z_true[i];
    CHECK(d.x[i][0] == z[0]);
    CHECK(d.x[i][1] == z[1]);
    CHECK(d.x[i][2] == z[0] + z[1] + z[0] * z[1]);
  }
}

TEST_CASE("latent moments") {
  const SyntheticDataset d = generate(5000, 0.1, 0);
  double m[2] = {0, 0}, c[2][2] = {{0, 0}, {0, 0}};
  for (const auto& z : d.z_true)
    for (int a = 0; a < 2; ++a) m[a] += z[a] / 5000.0;
  for (const auto& z : d.z_true)
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b) c[a][b] += (z[a] - m[a]) * (z[b] - m[b]) / 4999.0;
  CHECK(std::abs(m[0]) < 0.05);
  CHECK(std::abs(m[1]) < 0.05);
  CHECK(std::abs(c[0][0] - 1) < 0.05);
  CHECK(std::abs(c[1][1] - 1) < 0.05);
  CHECK(std::abs(c[0][1]) < 0.05);
}

TEST_CASE("observation noise has the requested scale") {
  const SyntheticDataset d = generate(5000, 0.1, 1);
  double ss = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto mean = decoder_true(d.z_true[i]);
    for (int k = 0; k < 3; ++k) ss += (d.x[i][k] - mean[k]) * (d.x[i][k] - mean[k]);
  }
  CHECK(std::sqrt(ss / 15000.0) == doctest::Approx(0.1).epsilon(0.03));
}

TEST_CASE("seeds and sigma") {
  const SyntheticDataset a = generate(100, 0.1, 7);
  const SyntheticDataset b = generate(100, 0.1, 7);
  const SyntheticDataset c = generate(100, 0.1, 8);
  CHECK(a.x == b.x);
  CHECK(a.z_true == b.z_true);
  CHECK(a.x != c.x);
  // latents do not depend on sigma
  CHECK(generate(100, 0.5, 7).z_true == a.z_true);
  CHECK(generate(50, 0.1, 7).z_true[49] == a.z_true[49]);
}

TEST_CASE("generate rejects bad arguments") {
  CHECK_THROWS_AS(generate(0, 0.1, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate(10, -0.1, 0), std::invalid_argument);
}

TEST_CASE("dataset csv round trip") {
  const fs::path dir = fs::temp_directory_path() / "iavae_test_synthetic";
  fs::create_directories(dir);
  const SyntheticDataset d = generate(64, 0.1, 21);
  write_dataset(d, dir / "dataset.csv", dir / "dataset.json");
  std::ifstream in(dir / "dataset.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "x1,x2,x3,z1,z2");
  const SyntheticDataset r = read_dataset(dir / "dataset.csv", dir / "dataset.json");
  CHECK(r.x == d.x);
  CHECK(r.z_true == d.z_true);
  CHECK(r.sigma == d.sigma);
  CHECK(r.seed == d.seed);

  std::ofstream(dir / "bad.csv") << "a,b,c\n1,2,3\n";
  CHECK_THROWS(read_dataset(dir / "bad.csv", dir / "dataset.json"));
  fs::remove_all(dir);
}
