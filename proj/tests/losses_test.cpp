#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cytr/gradcheck.hpp"
#include "cytr/losses.hpp"
#include "cytr/rng.hpp"

using namespace cytr;

namespace {

template <typename S>
std::vector<S> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<S> v(n);
  for (auto& x : v) x = static_cast<S>(scale * rng.gaussian());
  return v;
}

}  // namespace

TEST_CASE("cross-entropy: uniform logits give ln(num_classes)") {
  for (std::size_t classes : {2, 5, 32}) {
    Tape<f64> tp;
    auto logits = make_zeros<f64>({3, classes});
    auto loss = cross_entropy(tp, logits, std::vector<std::size_t>{0, 1, classes - 1});
    CHECK(loss->values[0] == doctest::Approx(std::log(double(classes))).epsilon(1e-9));
  }
}

TEST_CASE("cross-entropy: saturated correct logit drives the loss to zero") {
  Tape<f64> tp;
  auto logits = make_tensor<f64>({1, 3}, {50.0, 0.0, 0.0});
  auto loss = cross_entropy(tp, logits, {0});
  CHECK(loss->values[0] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("cross-entropy: hand-evaluated two-sample case") {
  Tape<f64> tp;
  auto logits = make_tensor<f64>({2, 2}, {1, 0, 0, 1});
  auto loss = cross_entropy(tp, logits, {0, 1});
  const double expect = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(loss->values[0] == doctest::Approx(expect).epsilon(1e-12));

  CHECK_THROWS_AS(cross_entropy(tp, logits, {0, 2}), ContractError);  // label out of range
}

TEST_CASE("identity loss goes through the BN neck and bias-free weights") {
  Rng rng(3);
  ParameterStore<f64> store;
  Classifier<f64> cls(store, 4, 3, rng);
  CHECK(store.contains(ids::kClassifierWeight));
  CHECK(store.get(ids::kClassifierWeight)->shape == Shape{4, 3});

  Tape<f64> tp;
  auto feats = make_tensor<f64>({2, 4}, random_values<f64>(rng, 8));
  auto loss = loss_id(tp, feats, {0, 2}, cls);
  CHECK(loss->values[0] > 0.0);
  CHECK(std::isfinite(loss->values[0]));
}

TEST_CASE("classifier running statistics update in train mode only") {
  Rng rng(4);
  ParameterStore<f64> store;
  Classifier<f64> cls(store, 2, 2, rng);
  const auto mean_before = cls.running_mean();

  Tape<f64> tp;
  auto feats = make_tensor<f64>({4, 2}, {1, 10, 1, 10, 3, 14, 3, 14});
  cls.logits_train(tp, feats);
  CHECK(cls.running_mean()[0] == doctest::Approx(0.9 * mean_before[0] + 0.1 * 2.0));
  CHECK(cls.running_mean()[1] == doctest::Approx(0.9 * mean_before[1] + 0.1 * 12.0));

  const auto mean_after = cls.running_mean();
  cls.logits_eval(tp, feats);
  CHECK(cls.running_mean() == mean_after);
}

TEST_CASE("metric loss: single-class batch has no pairs") {
  Tape<f64> tp;
  auto feats = make_tensor<f64>({3, 2}, {0, 0, 1, 1, 2, 2});
  auto loss = loss_metric(tp, feats, {4, 4, 4}, 0.5);
  CHECK(loss->values[0] == 0.0);
}

TEST_CASE("metric loss: hand-evaluated two-singleton case") {
  Tape<f64> tp;
  auto feats = make_tensor<f64>({2, 2}, {0, 0, 3, 4});

  // margin below the separation: hinge closes, loss 0
  auto small = loss_metric(tp, feats, {0, 1}, 0.5);
  CHECK(small->values[0] == doctest::Approx(0.0).epsilon(1e-9));

  // margin 6: each ordered pair contributes [6 - 5 + 0 + 0]_+ = 1; (1/4)*2
  auto big = loss_metric(tp, feats, {0, 1}, 6.0);
  CHECK(big->values[0] == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("metric loss is invariant under a rigid translation of all features") {
  Rng rng(7);
  const std::size_t b = 6, d = 4;
  auto base = random_values<f64>(rng, b * d);
  std::vector<double> shifted = base;
  const std::vector<double> offset = {10.0, -3.0, 0.5, 7.0};
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < d; ++j) shifted[i * d + j] += offset[j];
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};
  Tape<f64> tp;
  auto a = loss_metric(tp, make_tensor<f64>({b, d}, base), labels, 0.5);
  auto c = loss_metric(tp, make_tensor<f64>({b, d}, shifted), labels, 0.5);
  CHECK(a->values[0] == doctest::Approx(c->values[0]).epsilon(1e-9));
}

TEST_CASE("separation loss: k=2 leaves no eligible pair") {
  Tape<f64> tp;
  auto patterns = make_tensor<f64>({2, 3}, {1, 0, 0, 0, 1, 0});
  CHECK(loss_sep(tp, patterns)->values[0] == 0.0);
}

TEST_CASE("separation loss: orthogonal patterns score zero") {
  Tape<f64> tp;
  auto patterns = make_tensor<f64>({3, 3}, {1, 0, 0, 0, 1, 0, 0.3, 0.3, 0.3});
  CHECK(loss_sep(tp, patterns)->values[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("separation loss: identical unit patterns give 1/k^2") {
  Tape<f64> tp;
  auto patterns = make_tensor<f64>({3, 2}, {1, 0, 1, 0, 0.5, 0.5});
  CHECK(loss_sep(tp, patterns)->values[0] == doctest::Approx(1.0 / 9.0).epsilon(1e-9));
}

TEST_CASE("separation loss: zero-norm pattern contributes zero") {
  Tape<f64> tp;
  auto patterns = make_tensor<f64>({3, 2}, {0, 0, 1, 0, 0.5, 0.5});
  CHECK(loss_sep(tp, patterns)->values[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("separation loss is invariant to positive rescaling of a pattern row") {
  Rng rng(8);
  auto v = random_values<f64>(rng, 4 * 3);
  std::vector<double> scaled = v;
  for (std::size_t j = 0; j < 3; ++j) scaled[1 * 3 + j] *= 17.5;
  Tape<f64> tp;
  auto a = loss_sep(tp, make_tensor<f64>({4, 3}, v));
  auto b = loss_sep(tp, make_tensor<f64>({4, 3}, scaled));
  CHECK(a->values[0] == doctest::Approx(b->values[0]).epsilon(1e-9));
}

TEST_CASE("mmd: identical sets score exactly zero") {
  Rng rng(9);
  auto v = random_values<f64>(rng, 5 * 3);
  Tape<f64> tp;
  auto x = make_tensor<f64>({5, 3}, v);
  auto y = make_tensor<f64>({5, 3}, v);
  KernelBank<f64> bank{{0.5, 1.0, 2.0}};
  CHECK(std::abs(loss_mmd(tp, x, y, bank)->values[0]) <= 1e-7);
  CHECK(std::abs(loss_mmd_adaptive(tp, x, y)->values[0]) <= 1e-7);
}

TEST_CASE("mmd: singleton sets at the same point score zero") {
  Tape<f64> tp;
  auto x = make_tensor<f64>({1, 2}, {0.3, -0.7});
  auto y = make_tensor<f64>({1, 2}, {0.3, -0.7});
  KernelBank<f64> bank{{1.0}};
  CHECK(loss_mmd(tp, x, y, bank)->values[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("mmd: single unit kernel separated singletons approach 2") {
  KernelBank<f64> bank{{1.0}};
  for (double t : {1.0, 3.0, 10.0, 100.0}) {
    Tape<f64> tp;
    auto x = make_tensor<f64>({1, 1}, {0.0});
    auto y = make_tensor<f64>({1, 1}, {t});
    const double expect = 2.0 - 2.0 * std::exp(-t * t / 2.0);
    CHECK(loss_mmd(tp, x, y, bank)->values[0] == doctest::Approx(expect).epsilon(1e-9));
  }
  Tape<f64> tp;
  auto far = loss_mmd(tp, make_tensor<f64>({1, 1}, {0.0}), make_tensor<f64>({1, 1}, {100.0}), bank);
  CHECK(far->values[0] == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("mmd stays nonnegative on random inputs") {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t bv = 1 + rng.below(5), br = 1 + rng.below(5), d = 1 + rng.below(4);
    Tape<f64> tp;
    auto x = make_tensor<f64>({bv, d}, random_values<f64>(rng, bv * d, 2.0));
    auto y = make_tensor<f64>({br, d}, random_values<f64>(rng, br * d, 2.0));
    CHECK(loss_mmd_adaptive(tp, x, y)->values[0] >= 0.0);
  }
}

TEST_CASE("reconstruction loss closed forms") {
  Tape<f64> tp;
  auto a = make_tensor<f64>({2, 2}, {1, 2, 3, 4});
  auto b = make_tensor<f64>({2, 2}, {1, 2, 3, 4});
  CHECK(loss_rec(tp, a, b)->values[0] == 0.0);

  auto ones_off = make_tensor<f64>({2, 2}, {2, 3, 4, 5});
  CHECK(loss_rec(tp, ones_off, b)->values[0] == doctest::Approx(1.0));

  auto one_elem = make_tensor<f64>({2, 2}, {1, 2, 3, 6});
  CHECK(loss_rec(tp, one_elem, b)->values[0] == doctest::Approx(0.5));

  auto bad = make_tensor<f64>({1, 4}, {1, 2, 3, 4});
  CHECK_THROWS_AS(loss_rec(tp, a, bad), DimensionError);
}

TEST_CASE("alignment loss closed forms and homogeneity") {
  Tape<f64> tp;
  auto b = make_tensor<f64>({2, 2}, {1, 2, 3, 4});
  CHECK(loss_aln(tp, b, b)->values[0] == doctest::Approx(0.0).epsilon(1e-6));

  auto ones_off = make_tensor<f64>({2, 2}, {2, 3, 4, 5});
  CHECK(loss_aln(tp, ones_off, b)->values[0] == doctest::Approx(0.5).epsilon(1e-6));

  auto threes_off = make_tensor<f64>({2, 2}, {4, 5, 6, 7});
  CHECK(loss_aln(tp, threes_off, b)->values[0] ==
        doctest::Approx(3.0 * loss_aln(tp, ones_off, b)->values[0]).epsilon(1e-6));
}

TEST_CASE("total loss weighting") {
  Tape<f64> tp;
  LossTerms<f64> terms;
  terms.id = make_scalar<f64>(1.0);
  terms.metric = make_scalar<f64>(1.0);
  terms.sep = make_scalar<f64>(1.0);
  terms.mmd = make_scalar<f64>(1.0);
  terms.rec = make_scalar<f64>(1.0);
  terms.aln = make_scalar<f64>(1.0);

  LossWeights<f64> w;  // defaults 0.2 / 1.0 / 0.1 / 0.1
  CHECK(loss_total(tp, terms, w)->values[0] == doctest::Approx(3.4).epsilon(1e-12));

  LossWeights<f64> zero{0, 0, 0, 0, 0.5};
  CHECK(loss_total(tp, terms, zero)->values[0] == doctest::Approx(2.0));

  LossTerms<f64> zeros;
  zeros.id = make_scalar<f64>(0.0);
  zeros.metric = make_scalar<f64>(0.0);
  CHECK(loss_total(tp, zeros, w)->values[0] == 0.0);
}

TEST_CASE("total loss aborts on a non-finite component, naming it") {
  Tape<f64> tp;
  LossTerms<f64> terms;
  terms.id = make_scalar<f64>(1.0);
  terms.mmd = make_tensor<f64>({1, 1}, {std::numeric_limits<double>::quiet_NaN()});
  LossWeights<f64> w;
  try {
    loss_total(tp, terms, w);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("L_MMD") != std::string::npos);
  }
}

TEST_CASE("every loss is nonnegative on random micro-batches") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 2 + rng.below(4), d = 2 + rng.below(4);
    ParameterStore<f64> store;
    Classifier<f64> cls(store, d, 3, rng);
    std::vector<std::size_t> labels(b);
    std::vector<int> labels_i(b);
    for (std::size_t i = 0; i < b; ++i) labels_i[i] = int(labels[i] = rng.below(3));
    Tape<f64> tp;
    auto feats = make_tensor<f64>({b, d}, random_values<f64>(rng, b * d, 2.0));
    CHECK(loss_id(tp, feats, labels, cls)->values[0] >= 0.0);
    CHECK(loss_metric(tp, feats, labels_i, 0.5)->values[0] >= 0.0);
    if (b >= 2) CHECK(loss_sep(tp, feats)->values[0] >= -0.5);  // cosine mean, bounded below
  }
}

TEST_CASE("gradient checks for every loss on micro-batches") {
  Rng rng(12);
  const std::size_t b = 3, d = 4;
  auto feats = make_tensor<f64>({b, d}, random_values<f64>(rng, b * d), true);
  const std::vector<int> labels_i{0, 1, 0};
  const std::vector<std::size_t> labels{0, 1, 0};

  ParameterStore<f64> store;
  Classifier<f64> cls(store, d, 2, rng);

  const double tol = 1e-3;
  CHECK(grad_check<f64>([&](Tape<f64>& tp) { return loss_id(tp, feats, labels, cls); }, feats,
                        1e-4) < tol);
  CHECK(grad_check<f64>([&](Tape<f64>& tp) { return loss_metric(tp, feats, labels_i, 0.9); },
                        feats, 1e-4) < tol);
  CHECK(grad_check<f64>([&](Tape<f64>& tp) { return loss_sep(tp, feats); }, feats, 1e-4) < tol);

  auto vis = make_tensor<f64>({2, d}, random_values<f64>(rng, 2 * d), true);
  auto inf = make_tensor<f64>({2, d}, random_values<f64>(rng, 2 * d), true);
  KernelBank<f64> bank{{0.7, 1.3}};
  CHECK(grad_check<f64>([&](Tape<f64>& tp) { return loss_mmd(tp, vis, inf, bank); }, vis, 1e-4) <
        tol);
  CHECK(grad_check<f64>([&](Tape<f64>& tp) { return loss_mmd_adaptive(tp, vis, inf); }, vis,
                        1e-4) < tol);
  CHECK(grad_check<f64>([&](Tape<f64>& tp) { return loss_mmd_adaptive(tp, vis, inf); }, inf,
                        1e-4) < tol);

  auto target = make_tensor<f64>({2, d}, random_values<f64>(rng, 2 * d));
  CHECK(grad_check<f64>([&](Tape<f64>& tp) { return loss_rec(tp, vis, target); }, vis, 1e-4) < tol);
  CHECK(grad_check<f64>([&](Tape<f64>& tp) { return loss_aln(tp, vis, target); }, vis, 1e-4) < tol);
}
