#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "iavae/checkpoint.hpp"
#include "iavae/hypernet.hpp"
#include "iavae/rng.hpp"

using namespace iavae;
namespace fs = std::filesystem;

namespace {

void check_same(const EncoderParams& a, const EncoderParams& b) {
  CHECK(a.arch.hidden_width == b.arch.hidden_width);
  REQUIRE(a.blocks.size() == b.blocks.size());
  for (std::size_t l = 0; l < a.blocks.size(); ++l) {
    CHECK(a.blocks[l].name == b.blocks[l].name);
    CHECK(a.blocks[l].shape().dims() == b.blocks[l].shape().dims());
    CHECK(a.blocks[l].values.values() == b.blocks[l].values.values());
  }
}

EncoderParams awkward_encoder(std::size_t h, std::uint64_t seed) {
  EncoderParams p = make_encoder(h, seed);
  Rng rng(seed);
  // values whose decimal form is long
  for (ParamBlock& b : p.blocks)
    for (double& v : b.values.data()) v = rng.normal() / 3.0 + 1e-300 * rng.uniform();
  return p;
}

}  // namespace

TEST_CASE("vae checkpoint round trip is exact") {
  const fs::path dir = fs::temp_directory_path() / "iavae_test_checkpoint";
  fs::create_directories(dir);
  const InferenceModel m{awkward_encoder(7, 2), std::nullopt};
  save_checkpoint(dir / "vae.json", m, 99);
  const InferenceModel r = load_checkpoint(dir / "vae.json");
  CHECK(r.mode() == Mode::kVae);
  check_same(m.encoder, r.encoder);
  CHECK(load_checkpoint_seed(dir / "vae.json") == 99);
  fs::remove_all(dir);
}

TEST_CASE("iavae checkpoint round trip is exact") {
  const EncoderParams base = awkward_encoder(2, 3);
  InferenceModel m{base, make_hypernet(base, 2, 1e-3, 5)};
  Rng rng(8);
  for (double& v : m.hypernet->bias.data()) v = rng.normal();
  const InferenceModel r = model_from_json(checkpoint_json(m, 4));
  REQUIRE(r.mode() == Mode::kIaVae);
  check_same(m.encoder, r.encoder);
  CHECK(r.hypernet->weight.values() == m.hypernet->weight.values());
  CHECK(r.hypernet->weight.shape().dims() == m.hypernet->weight.shape().dims());
  CHECK(r.hypernet->bias.values() == m.hypernet->bias.values());
  REQUIRE(r.hypernet->block_embeddings.size() == 4);
  for (std::size_t l = 0; l < 4; ++l)
    CHECK(r.hypernet->block_embeddings[l].values() == m.hypernet->block_embeddings[l].values());
  const std::array<double, 3> x{0.3, -0.2, 1.1};
  CHECK(r.posterior(x).mean == m.posterior(x).mean);
  CHECK(r.inference_parameter_count() == 68);
}

TEST_CASE("malformed checkpoints are rejected") {
  CHECK_THROWS(model_from_json(nlohmann::json::parse(R"({"mode":"vae"})")));
  CHECK_THROWS(load_checkpoint(fs::temp_directory_path() / "iavae_no_such_checkpoint.json"));
}
