#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace iavae {

// z ~ N(0, I2), x = decoder_true(z) + sigma * eta, eta ~ N(0, I3).
struct SyntheticDataset {
  std::vector<std::array<double, 3>> x;
  std::vector<std::array<double, 2>> z_true;
  double sigma = 0.1;
  std::uint64_t seed = 0;

  std::size_t size() const { return x.size(); }
};

// Latents come from the (seed, kLatents) stream and noise from
// (seed, kObservationNoise), so sigma does not change Z_true.
SyntheticDataset generate(std::size_t n, double sigma, std::uint64_t seed);

// CSV columns x1,x2,x3,z1,z2 plus a JSON sidecar {N, sigma, seed}.
void write_dataset(const SyntheticDataset& data, const std::filesystem::path& csv,
                   const std::filesystem::path& sidecar);
SyntheticDataset read_dataset(const std::filesystem::path& csv,
                              const std::filesystem::path& sidecar);

}  // namespace iavae
