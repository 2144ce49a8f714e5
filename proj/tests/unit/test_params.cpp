#include <filesystem>
#include <random>

#include "doctest.h"
#include "vsdf/nn/ops.hpp"
#include "vsdf/nn/params.hpp"

using namespace vsdf::nn;

TEST_SUITE("params") {

TEST_CASE("weights round trip") {
  std::mt19937_64 rng(1);
  ParamStore<float> a;
  a.add("conv.weight", uniform_init<float>({2, 3, 3, 3, 3}, 81, rng));
  a.add("conv.bias", uniform_init<float>({2}, 81, rng));
  auto path = std::filesystem::temp_directory_path() / "vsdf_params_roundtrip.bin";
  save_weights(a, path);
  ParamStore<float> b;
  b.add("conv.weight", Tensor<float>({2, 3, 3, 3, 3}));
  b.add("conv.bias", Tensor<float>({2}));
  load_weights(b, path);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.at(i).value().data == b.at(i).value().data);

  ParamStore<float> wrong;
  wrong.add("conv.weight", Tensor<float>({2, 3, 1, 1, 1}));
  wrong.add("conv.bias", Tensor<float>({2}));
  CHECK_THROWS_WITH_AS(load_weights(wrong, path), doctest::Contains("shape mismatch"), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("adam minimizes a quadratic") {
  ParamStore<float> p;
  p.add("w", Tensor<float>({3}, std::vector<float>{2.f, -1.f, 0.5f}));
  Adam opt(p, AdamConfig{.lr = 0.05, .clip_norm = 0.0});
  for (int i = 0; i < 400; ++i) {
    auto loss = sum_squares(p.get("w"));
    backward(loss);
    opt.step();
  }
  for (float v : p.get("w").value().data) CHECK(std::abs(v) < 0.05f);
}

TEST_CASE("cosine decay reaches zero at the horizon") {
  ParamStore<float> p;
  p.add("w", Tensor<float>({1}, 1.0f));
  Adam opt(p, AdamConfig{.lr = 1e-3, .total_steps = 10});
  CHECK(opt.current_lr() == doctest::Approx(1e-3));
  for (int i = 0; i < 5; ++i) {
    backward(sum_squares(p.get("w")));
    opt.step();
  }
  CHECK(opt.current_lr() == doctest::Approx(5e-4));
  for (int i = 0; i < 5; ++i) {
    backward(sum_squares(p.get("w")));
    opt.step();
  }
  CHECK(opt.current_lr() == doctest::Approx(0.0).scale(1));
}

TEST_CASE("seed derivation") {
  CHECK(derive_seed(1, 2) == derive_seed(1, 2));
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
  CHECK(derive_seed(1, 2) != derive_seed(2, 2));
  // FNV-1a 64 reference vectors
  CHECK(fnv1a64(std::string("")) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cULL);
}

}
