#include "iavae/synthetic.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "iavae/format.hpp"
#include "iavae/models.hpp"
#include "iavae/rng.hpp"

namespace iavae {

SyntheticDataset generate(std::size_t n, double sigma, std::uint64_t seed) {
  if (n == 0) throw std::invalid_argument("generate: N must be at least 1");
  if (!(sigma >= 0.0)) throw std::invalid_argument("generate: sigma must be non-negative");
  SyntheticDataset data;
  data.sigma = sigma;
  data.seed = seed;
  data.x.resize(n);
  data.z_true.resize(n);
  Rng latents(seed, Stream::kLatents);
  Rng noise(seed, Stream::kObservationNoise);
  for (std::size_t i = 0; i < n; ++i) {
    auto& z = data.z_true[i];
    z[0] = latents.normal();
    z[1] = latents.normal();
    const std::array<double, 3> mean = decoder_true(z);
    for (std::size_t j = 0; j < 3; ++j) data.x[i][j] = mean[j] + sigma * noise.normal();
  }
  return data;
}

void write_dataset(const SyntheticDataset& data, const std::filesystem::path& csv,
                   const std::filesystem::path& sidecar) {
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  out << "x1,x2,x3,z1,z2\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& x = data.x[i];
    const auto& z = data.z_true[i];
    out << fmt_double(x[0]) << ',' << fmt_double(x[1]) << ',' << fmt_double(x[2]) << ','
        << fmt_double(z[0]) << ',' << fmt_double(z[1]) << '\n';
  }
  nlohmann::ordered_json meta;
  meta["N"] = data.size();
  meta["sigma"] = data.sigma;
  meta["seed"] = data.seed;
  std::ofstream side(sidecar);
  if (!side) throw std::runtime_error("cannot write " + sidecar.string());
  side << meta.dump(2) << '\n';
}

SyntheticDataset read_dataset(const std::filesystem::path& csv,
                              const std::filesystem::path& sidecar) {
  std::ifstream side(sidecar);
  if (!side) throw std::runtime_error("cannot read " + sidecar.string());
  const nlohmann::json meta = nlohmann::json::parse(side);
  SyntheticDataset data;
  data.sigma = meta.at("sigma").get<double>();
  data.seed = meta.at("seed").get<std::uint64_t>();

  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot read " + csv.string());
  std::string line;
  std::getline(in, line);
  if (line != "x1,x2,x3,z1,z2") throw std::runtime_error(csv.string() + ": unexpected header");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::array<double, 5> row{};
    std::istringstream fields(line);
    std::string cell;
    for (double& v : row) {
      if (!std::getline(fields, cell, ',')) throw std::runtime_error(csv.string() + ": short row");
      v = std::stod(cell);
    }
    data.x.push_back({row[0], row[1], row[2]});
    data.z_true.push_back({row[3], row[4]});
  }
  const auto expected = meta.at("N").get<std::size_t>();
  if (data.size() != expected)
    throw std::runtime_error(csv.string() + ": " + std::to_string(data.size()) +
                             " rows, sidecar says " + std::to_string(expected));
  return data;
}

}  // namespace iavae
