// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "arcnn/model.hpp"
#include "arcnn/rng.hpp"

using namespace arcnn;
using geom::Box;
using geom::ScoredBox;
using geom::ShiftTarget;
using nn::Tensor;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig c;
  c.base_channels = 4;
  c.feature_channels = 6;
  c.pooled_size = 5;
  c.rfa_hidden = 16;
  c.conf_hidden = 8;
  c.det_hidden = 16;
  return c;
}

Tensor random_image(Rng& rng, size_t channels, size_t h, size_t w) {
  Tensor t({channels, h, w});
  for (double& v : t.data) v = rng.uniform(0.0, 1.0);
  return t;
}

Tensor shift_right_one_cell(const Tensor& map) {
  Tensor out(map.shape);
  for (size_t c = 0; c < map.dim(0); ++c) {
    for (size_t y = 0; y < map.dim(1); ++y) {
      for (size_t x = 1; x < map.dim(2); ++x) {
        out.at3(c, y, x) = map.at3(c, y, x - 1);
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("extract_features: zero images give zero maps (bias-free stack)") {
  const auto config = tiny_config();
  const model::Params params = model::Params::init(config, 5);
  const Tensor zero({3, 32, 40});
  const auto features = model::extract_features(zero, zero, params);
  for (double v : features.reference.data) CHECK(v == 0.0);
  for (double v : features.sensed.data) CHECK(v == 0.0);
  CHECK(features.reference.dim(0) == config.feature_channels);
  CHECK(features.reference.dim(1) == 8);
  CHECK(features.reference.dim(2) == 10);
}

TEST_CASE("extract_features: identical streams and determinism") {
  Rng rng(7);
  const model::Params params = model::Params::init(tiny_config(), 5);
  const Tensor image = random_image(rng, 3, 32, 32);
  const auto f1 = model::extract_features(image, image, params);
  CHECK(f1.reference == f1.sensed);
  const auto f2 = model::extract_features(image, image, params);
  CHECK(f1.reference == f2.reference);
}

TEST_CASE("extract_features: one-stride-cell translation equivariance in the interior") {
  Rng rng(11);
  const model::Params params = model::Params::init(tiny_config(), 5);
  const Tensor image = random_image(rng, 3, 48, 64);
  const Tensor shifted = nn::translate_image(image, 4, 0);  // one stride cell
  const Tensor f = model::extract_stream_features(image, params);
  const Tensor g = model::extract_stream_features(shifted, params);
  // interior cells: the zero-filled input columns contaminate the first
  // three feature columns through the conv halos
  for (size_t c = 0; c < f.dim(0); ++c) {
    for (size_t y = 2; y + 2 < f.dim(1); ++y) {
      for (size_t x = 3; x + 2 < f.dim(2); ++x) {
        CHECK(std::abs(g.at3(c, y, x) - f.at3(c, y, x - 1)) < 1e-9);
      }
    }
  }
}

TEST_CASE("aggregate_proposals basics and concatenation oracle") {
  const std::vector<ScoredBox> empty;
  const std::vector<ScoredBox> some = {{Box(0, 0, 10, 10), 0.9},
                                       {Box(40, 40, 10, 10), 0.7}};
  auto agg = model::aggregate_proposals(empty, some, 0.5);
  CHECK(agg.size() == 2);

  const std::vector<ScoredBox> dup = {{Box(0, 0, 10, 10), 0.8}};
  agg = model::aggregate_proposals(some, dup, 0.5);
  CHECK(agg.size() == 2);  // duplicate suppressed

  Rng rng(3);
  std::vector<ScoredBox> a, b;
  for (int i = 0; i < 15; ++i) {
    a.push_back({Box(rng.uniform(0, 80), rng.uniform(0, 80), rng.uniform(5, 30),
                     rng.uniform(5, 30)),
                 rng.uniform(0.0, 1.0)});
    b.push_back({Box(rng.uniform(0, 80), rng.uniform(0, 80), rng.uniform(5, 30),
                     rng.uniform(5, 30)),
                 rng.uniform(0.0, 1.0)});
  }
  std::vector<ScoredBox> concat = a;
  concat.insert(concat.end(), b.begin(), b.end());
  const auto expect_idx = geom::nms(concat, 0.5);
  const auto got = model::aggregate_proposals(a, b, 0.5);
  REQUIRE(got.size() == expect_idx.size());
  for (size_t i = 0; i < got.size(); ++i) {
    CHECK(got[i].box == concat[expect_idx[i]].box);
    CHECK(got[i].score == concat[expect_idx[i]].score);
  }
}

TEST_CASE("rfa_forward with a zero output head is plain pooling") {
  Rng rng(13);
  const auto config = tiny_config();
  model::Params params = model::Params::init(config, 5);
  // zero fc2: predicted shift (0,0) regardless of features
  std::fill(params.rfa.fc2.weights.data.begin(), params.rfa.fc2.weights.data.end(), 0.0);
  std::fill(params.rfa.fc2.bias.data.begin(), params.rfa.fc2.bias.data.end(), 0.0);

  model::TwoStreamFeatures features;
  features.reference = random_image(rng, config.feature_channels, 12, 16);
  features.sensed = random_image(rng, config.feature_channels, 12, 16);
  features.stride = 4.0;

  const std::vector<Box> proposals = {Box(8, 8, 16, 20), Box(20, 12, 18, 22)};
  const auto results = model::rfa_forward(features, proposals, params.rfa, config);
  REQUIRE(results.size() == 2);
  for (size_t i = 0; i < results.size(); ++i) {
    CHECK(results[i].shift == ShiftTarget{0.0, 0.0});
    const Tensor plain =
        model::pool_region(features, features.sensed, proposals[i], config);
    CHECK(results[i].aligned_sensed == plain);
  }
}

TEST_CASE("rfa_forward aligns an exactly translated sensed stream (oracle shifts)") {
  Rng rng(17);
  const auto config = tiny_config();
  const model::Params params = model::Params::init(config, 5);

  model::TwoStreamFeatures features;
  features.reference = random_image(rng, config.feature_channels, 16, 20);
  features.sensed = shift_right_one_cell(features.reference);  // +4 px at stride 4
  features.stride = 4.0;

  const std::vector<Box> proposals = {Box(16, 16, 20, 24), Box(28, 20, 18, 20)};
  std::vector<ShiftTarget> oracle;
  for (const Box& p : proposals) oracle.push_back({4.0 / p.width, 0.0});

  const auto results =
      model::rfa_forward(features, proposals, params.rfa, config, &oracle);
  for (size_t i = 0; i < proposals.size(); ++i) {
    const Tensor ref_pooled =
        model::pool_region(features, features.reference, proposals[i], config);
    REQUIRE(results[i].ref_feature == ref_pooled);
    double max_diff = 0.0;
    for (size_t k = 0; k < ref_pooled.numel(); ++k) {
      max_diff = std::max(max_diff,
                          std::abs(results[i].aligned_sensed[k] - ref_pooled[k]));
    }
    CHECK(max_diff < 1e-6);
  }
}

TEST_CASE("rfa_forward results are per-proposal (permutation invariant)") {
  Rng rng(19);
  const auto config = tiny_config();
  const model::Params params = model::Params::init(config, 6);
  model::TwoStreamFeatures features;
  features.reference = random_image(rng, config.feature_channels, 12, 14);
  features.sensed = random_image(rng, config.feature_channels, 12, 14);
  features.stride = 4.0;
  const std::vector<Box> proposals = {Box(4, 4, 12, 16), Box(16, 8, 14, 18),
                                      Box(10, 14, 16, 14)};
  std::vector<Box> reversed(proposals.rbegin(), proposals.rend());
  const auto fwd = model::rfa_forward(features, proposals, params.rfa, config);
  const auto rev = model::rfa_forward(features, reversed, params.rfa, config);
  for (size_t i = 0; i < proposals.size(); ++i) {
    const size_t j = proposals.size() - 1 - i;
    CHECK(fwd[i].shift == rev[j].shift);
    CHECK(fwd[i].aligned_sensed == rev[j].aligned_sensed);
  }
}

TEST_CASE("confidence weight formulas") {
  const auto w1 = model::weights_from_probs(0.9, 0.9);
  CHECK(w1.w_r == doctest::Approx(0.8).epsilon(1e-12));  // |0.9 - 0.1|
  CHECK(w1.w_d == doctest::Approx(1.0));                 // perfect agreement

  const auto w2 = model::weights_from_probs(0.9, 0.3);
  CHECK(w2.w_d == doctest::Approx(0.4).epsilon(1e-12));  // 1 - 0.6
  CHECK(w2.w_s == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("confidence weights stay in [0,1] over random branch inputs") {
  Rng rng(23);
  const auto config = tiny_config();
  const model::Params params = model::Params::init(config, 9);
  const size_t region = config.region_feature_size();
  for (int i = 0; i < 300; ++i) {
    Tensor ref({region});
    Tensor sen({region});
    for (double& v : ref.data) v = rng.normal(0.0, 2.0);
    for (double& v : sen.data) v = rng.normal(0.0, 2.0);
    const auto w = model::confidence_weights(ref, sen, params.conf_ref, params.conf_sen);
    for (double v : {w.w_r, w.w_s, w.w_d}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("fuse: unit weights equal naive concatenation bitwise") {
  Rng rng(27);
  Tensor ref({4, 3, 3});
  Tensor sen({4, 3, 3});
  for (double& v : ref.data) v = rng.normal();
  for (double& v : sen.data) v = rng.normal();
  model::FusionWeights unit;  // all ones
  const Tensor caf = model::fuse(ref, sen, unit, model::FusionMode::confidence_aware);
  const Tensor naive = model::fuse(ref, sen, unit, model::FusionMode::naive_concat);
  CHECK(caf == naive);

  model::FusionWeights zero_sensed;
  zero_sensed.w_s = 0.0;
  const Tensor suppressed =
      model::fuse(ref, sen, zero_sensed, model::FusionMode::confidence_aware);
  for (size_t i = ref.numel(); i < suppressed.numel(); ++i) {
    CHECK(suppressed[i] == 0.0);
  }

  model::FusionWeights half;
  half.w_r = 0.5;
  const Tensor halved = model::fuse(ref, sen, half, model::FusionMode::confidence_aware);
  const Tensor full = model::fuse(ref, sen, unit, model::FusionMode::confidence_aware);
  for (size_t i = 0; i < ref.numel(); ++i) {
    CHECK(halved[i] == doctest::Approx(0.5 * full[i]).epsilon(1e-15));
    CHECK(halved[ref.numel() + i] == full[ref.numel() + i]);
  }
}

TEST_CASE("detect_head zero parameters give logits (0,0) and p1 = 0.5") {
  auto config = tiny_config();
  model::Params params = model::Params::init(config, 3);
  std::fill(params.det.fc2.weights.data.begin(), params.det.fc2.weights.data.end(), 0.0);
  std::fill(params.det.fc2.bias.data.begin(), params.det.fc2.bias.data.end(), 0.0);
  Tensor fused({2 * config.region_feature_size()});
  Rng rng(31);
  for (double& v : fused.data) v = rng.normal();
  const auto out = model::detect_head(fused, params.det);
  CHECK(out.logit0 == 0.0);
  CHECK(out.logit1 == 0.0);
  const auto [p0, p1] = nn::softmax2(out.logit0, out.logit1);
  CHECK(p1 == doctest::Approx(0.5));
  // determinism
  const auto again = model::detect_head(fused, params.det);
  CHECK(again.logit0 == out.logit0);
  CHECK(again.deltas == out.deltas);
}

TEST_CASE("delta encode/decode round trip") {
  Rng rng(37);
  for (int i = 0; i < 200; ++i) {
    const Box prop(rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(2, 50),
                   rng.uniform(2, 50));
    const Box gt(rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(2, 50),
                 rng.uniform(2, 50));
    const Box back = model::decode_deltas(prop, model::encode_deltas(prop, gt));
    CHECK(back.x_min == doctest::Approx(gt.x_min).epsilon(1e-9));
    CHECK(back.width == doctest::Approx(gt.width).epsilon(1e-9));
    CHECK(back.height == doctest::Approx(gt.height).epsilon(1e-9));
  }
}

TEST_CASE("shift_loss values and gating") {
  using geom::ShiftTarget;
  const std::vector<ShiftTarget> pred = {{0.5, 2.0}, {9.0, -9.0}};
  const std::vector<ShiftTarget> target = {{0.0, 0.0}, {0.0, 0.0}};

  // predictions equal targets -> 0
  CHECK(model::shift_loss(target, target, std::vector<int>{1, 1}) == 0.0);

  // all background -> 0 regardless of predictions
  CHECK(model::shift_loss(pred, target, std::vector<int>{0, 0}) == 0.0);

  // one positive with residual (0.5, 2): 0.125 + 1.5
  CHECK(model::shift_loss(pred, target, std::vector<int>{1, 0}) ==
        doctest::Approx(1.625).epsilon(1e-12));
}

TEST_CASE("total_loss composition") {
  CHECK(model::total_loss(0.7, 0.3, 0.2, 1.0) == doctest::Approx(1.2));
  CHECK(model::total_loss(0.7, 0.3, 0.2, 0.0) == doctest::Approx(0.9));  // lambda 0

  // cross entropy at a perfect prediction is ~0; decomposition holds
  const double ce = model::cross_entropy2(-30.0, 30.0, 1);
  CHECK(ce == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(model::total_loss(ce, 0.0, 0.0, 1.0) == doctest::Approx(ce));
}

TEST_CASE("checkpoint save/load round trip and version check") {
  const auto config = tiny_config();
  const model::Params params = model::Params::init(config, 77);
  const auto path = std::filesystem::temp_directory_path() / "arcnn_ckpt_test.json";
  model::save_checkpoint(path, params);
  const model::Params loaded = model::load_checkpoint(path);
  CHECK(loaded.config == params.config);
  const auto a = params.named_tensors();
  auto b = loaded.named_tensors();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(*a[i].second == *b[i].second);
  }
  // tampered format tag rejected
  {
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)), {});
    in.close();
    const auto pos = text.find("arcnn-checkpoint/1");
    text.replace(pos, 18, "arcnn-checkpoint/9");
    std::ofstream out(path);
    out << text;
  }
  CHECK_THROWS_AS(model::load_checkpoint(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("two_fc backward passes a finite-difference check") {
  Rng rng(41);
  nn::FcLayer fc1(Tensor({6, 8}), Tensor({6}));
  nn::FcLayer fc2(Tensor({2, 6}), Tensor({2}));
  for (double& v : fc1.weights.data) v = rng.normal(0.0, 0.5);
  for (double& v : fc1.bias.data) v = rng.normal(0.0, 0.2);
  for (double& v : fc2.weights.data) v = rng.normal(0.0, 0.5);
  for (double& v : fc2.bias.data) v = rng.normal(0.0, 0.2);
  Tensor input({8});
  for (double& v : input.data) v = rng.normal();

  // loss = sum of squared outputs
  auto loss_of = [&](const nn::FcLayer& l1, const nn::FcLayer& l2) {
    const Tensor out = model::two_fc_forward(l1, l2, input);
    return out[0] * out[0] + out[1] * out[1];
  };
  model::TwoFcCache cache;
  const Tensor out = model::two_fc_forward(fc1, fc2, input, &cache);
  Tensor d_out({2}, {2.0 * out[0], 2.0 * out[1]});
  nn::FcLayer g1(Tensor({6, 8}), Tensor({6}));
  nn::FcLayer g2(Tensor({2, 6}), Tensor({2}));
  model::two_fc_backward(fc1, fc2, cache, d_out, g1, g2);

  auto check_tensor = [&](Tensor& param, const Tensor& analytic) {
    auto f = [&](const Tensor& t) {
      Tensor saved = param;
      param = t;
      const double v = loss_of(fc1, fc2);
      param = saved;
      return v;
    };
    CHECK(nn::grad_check(f, param, analytic, 1e-5) < 1e-4);
  };
  check_tensor(fc1.weights, g1.weights);
  check_tensor(fc1.bias, g1.bias);
  check_tensor(fc2.weights, g2.weights);
  check_tensor(fc2.bias, g2.bias);
}
