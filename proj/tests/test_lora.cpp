#include <Eigen/SVD>
#include <filesystem>

#include "doctest.h"
#include "fixtures.hpp"
#include "lorakey/container.hpp"
#include "lorakey/error.hpp"

using namespace lorakey;

namespace {

struct Probe {
  Tensor z;
  std::vector<std::size_t> t, c;
};

Probe make_probe(const fixtures::Small& s) {
  Rng rng(99);
  return {rng.normal_tensor({6, s.latent_dim}), {1, 4, 8, 12, 16, 20}, {0, 1, 2, 3, 0, 1}};
}

Tensor predict(const MergedModel& m, const Probe& p) { return m.predict(p.z, p.t, p.c); }

}  // namespace

TEST_CASE("materialized delta has the adapter rank") {
  fixtures::Small s;
  for (std::size_t rank : {1, 2, 4}) {
    const LoraAdapter a = s.random_adapter(1, rank);
    for (const LoraEntry& e : a.entries) {
      const Tensor d = materialize_delta(a, e.layer);
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(d.mat());
      const auto sv = svd.singularValues();
      std::size_t numeric_rank = 0;
      for (Eigen::Index i = 0; i < sv.size(); ++i) numeric_rank += sv[i] > 1e-10 * sv[0];
      CHECK(numeric_rank == rank);
    }
  }
  Rng rng(2);
  CHECK_THROWS_AS(init_lora(s.denoiser, s.denoiser.layer_names(), 100, rng), DimensionError);
  CHECK_THROWS_AS(init_lora(s.denoiser, {"fc1", "fc1"}, 2, rng), DimensionError);
  const LoraAdapter fresh = init_lora(s.denoiser, s.denoiser.layer_names(), 2, rng);
  CHECK(delta_norm(fresh) == 0.0);
}

TEST_CASE("lazy merge matches the dense merge") {
  fixtures::Small s;
  const Probe p = make_probe(s);
  const MergedModel m(s.denoiser, {s.random_adapter(3), s.random_adapter(4)}, {0.7, -1.3});
  const Denoiser dense = m.materialize();
  CHECK(max_abs_diff(predict(m, p), predict(MergedModel(dense, {}, {}), p)) <= 1e-10);

  // Weight-level linearity: W + c1 D1 + c2 D2.
  const std::string layer = s.denoiser.layer_names().front();
  const std::size_t idx = s.denoiser.net().index_of(layer);
  const Tensor expected = s.denoiser.net().layer(idx).weight + materialize_delta(m.adapters()[0], layer) * 0.7 +
                          materialize_delta(m.adapters()[1], layer) * -1.3;
  CHECK(max_abs_diff(dense.net().layer(idx).weight, expected) <= 1e-12);
}

TEST_CASE("zero coefficient equals leaving the adapter out") {
  fixtures::Small s;
  const Probe p = make_probe(s);
  const LoraAdapter style = s.random_adapter(5), key = s.random_adapter(6);
  const Tensor style_only = predict(MergedModel(s.denoiser, {style}, {1.0}), p);
  CHECK(max_abs_diff(predict(MergedModel(s.denoiser, {style, key}, {1.0, 0.0}), p), style_only) <= 1e-10);
  CHECK(max_abs_diff(predict(MergedModel(s.denoiser, {style}, {1.0}).with(key, 0.0), p), style_only) <= 1e-10);
}

TEST_CASE("scale and coefficient are interchangeable") {
  fixtures::Small s;
  const Probe p = make_probe(s);
  LoraAdapter a = s.random_adapter(7);
  const Tensor twice = predict(MergedModel(s.denoiser, {a}, {2.0}), p);
  a.scale = 2.0;
  CHECK(max_abs_diff(predict(MergedModel(s.denoiser, {a}, {1.0}), p), twice) <= 1e-12);
}

TEST_CASE("delta cosine") {
  fixtures::Small s;
  const LoraAdapter a = s.random_adapter(8);
  LoraAdapter neg = a;
  for (LoraEntry& e : neg.entries) e.b *= -1.0;
  CHECK(delta_cosine(a, a) == doctest::Approx(1.0));
  CHECK(delta_cosine(a, neg) == doctest::Approx(-1.0));
  CHECK(delta_cosine(a, neg, DeltaSpace::kFactors) < 1.0);
}

TEST_CASE("pruning") {
  fixtures::Small s;
  const LoraAdapter a = s.random_adapter(9);
  CHECK(prune_adapter(a, 0.0).entries.front().a == a.entries.front().a);
  LoraAdapter all = prune_adapter(a, 1.0);
  CHECK(delta_norm(all) == 0.0);
  LoraAdapter half = prune_adapter(a, 0.5);
  std::size_t zeros = 0, total = 0;
  for (Tensor* t : half.parameter_refs()) {
    for (double v : t->values()) {
      zeros += v == 0.0;
      ++total;
    }
  }
  CHECK(zeros == total / 2);
  CHECK_THROWS(prune_adapter(a, 1.5));
}

TEST_CASE("incompatible adapters are rejected") {
  fixtures::Small s;
  LoraAdapter a = s.random_adapter(10);
  a.entries.front().layer = "nope";
  CHECK_THROWS_AS(MergedModel(s.denoiser, {a}, {1.0}), DimensionError);
  LoraAdapter b = s.random_adapter(11);
  b.entries.front().a = Tensor({2, 3});
  CHECK_THROWS_AS(check_compatible(s.denoiser.net(), b), DimensionError);
  CHECK_THROWS_AS(MergedModel(s.denoiser, {s.random_adapter(12)}, {}), DimensionError);
}

TEST_CASE("adapter files") {
  fixtures::Small s;
  const std::filesystem::path path = std::filesystem::temp_directory_path() / "lorakey_adapter_test.lkw";
  LoraAdapter a = s.random_adapter(13);
  a.role = AdapterRole::kStyle;
  a.scale = 1.5;
  save_adapter(a, path);
  const LoraAdapter b = load_adapter(path);
  CHECK(b.role == AdapterRole::kStyle);
  CHECK(b.scale == 1.5);
  CHECK(b.rank == a.rank);
  REQUIRE(b.entries.size() == a.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(b.entries[i].layer == a.entries[i].layer);
    CHECK(max_abs_diff(b.entries[i].b, a.entries[i].b) <= 1e-6);
  }
  // A saved-then-loaded adapter is a fixed point.
  save_adapter(b, path);
  CHECK(load_adapter(path).entries.front().a == b.entries.front().a);

  std::vector<std::uint8_t> bytes = read_file_bytes(path);
  bytes.resize(bytes.size() - 3);
  write_file_bytes(path, bytes);
  CHECK_THROWS_AS(load_adapter(path), ChecksumError);
  std::filesystem::remove(path);
}
