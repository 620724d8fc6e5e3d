#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cytr/dmm.hpp"
#include "cytr/gradcheck.hpp"
#include "cytr/rng.hpp"

using namespace cytr;

namespace {

template <typename S>
std::vector<S> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<S> v(n);
  for (auto& x : v) x = static_cast<S>(scale * rng.gaussian());
  return v;
}

// Plain-loop attention oracle for the prototype stage.
std::vector<double> attend_oracle(const std::vector<double>& captured, std::size_t k,
                                  const std::vector<double>& protos, std::size_t n,
                                  const std::vector<double>& wq, const std::vector<double>& wk,
                                  std::size_t d, std::size_t c) {
  std::vector<double> q(k * c, 0.0), kk(n * c, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t t = 0; t < d; ++t) q[i * c + j] += captured[i * d + t] * wq[t * c + j];
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t t = 0; t < d; ++t) kk[i * c + j] += protos[i * d + t] * wk[t * c + j];
  std::vector<double> attn(k * n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));
  for (std::size_t i = 0; i < k; ++i) {
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      for (std::size_t t = 0; t < c; ++t) dot += q[i * c + t] * kk[j * c + t];
      attn[i * n + j] = dot * scale;
      mx = std::max(mx, attn[i * n + j]);
    }
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      attn[i * n + j] = std::exp(attn[i * n + j] - mx);
      total += attn[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) attn[i * n + j] /= total;
  }
  return attn;
}

// Independent full-module oracle via the shifted-feature route:
// (captured - mean) + A*P, then per-pattern softmax reweighting.
std::vector<double> forward_oracle_shifted_route(const std::vector<double>& captured, std::size_t k,
                                                 const std::vector<double>& protos, std::size_t n,
                                                 const std::vector<double>& wq,
                                                 const std::vector<double>& wk,
                                                 const std::vector<double>& logits,
                                                 std::size_t d) {
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += captured[i * d + j] / double(k);
  auto attn = attend_oracle(captured, k, protos, n, wq, wk, d, d);
  std::vector<double> out(k * d, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double agg = 0;
      for (std::size_t t = 0; t < n; ++t) agg += attn[i * n + t] * protos[t * d + j];
      out[i * d + j] = (captured[i * d + j] - mean[j]) + agg;
    }
  double mx = -1e300, total = 0;
  for (double w : logits) mx = std::max(mx, w);
  std::vector<double> sw(k);
  for (std::size_t i = 0; i < k; ++i) {
    sw[i] = std::exp(logits[i] - mx);
    total += sw[i];
  }
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= sw[i] / total;
  return out;
}

template <typename S>
DmmParams<S> test_params(ParameterStore<S>& store, std::size_t n, std::size_t d, std::size_t k,
                         Rng& rng) {
  return make_dmm_params(store, n, d, k, d, rng);
}

}  // namespace

TEST_CASE("discrepancy: zero mean leaves prototypes unchanged") {
  Tape<f64> tp;
  auto protos = make_tensor<f64>({3, 2}, {1, 2, 3, 4, 5, 6});
  auto zero = make_tensor<f64>({1, 2}, {0, 0});
  auto out = dmm_discrepancy(tp, protos, zero);
  for (std::size_t i = 0; i < 6; ++i) CHECK(out->values[i] == protos->values[i]);
}

TEST_CASE("discrepancy: prototypes equal to the mean vanish") {
  Tape<f64> tp;
  auto protos = make_tensor<f64>({2, 2}, {1.5, -2.0, 1.5, -2.0});
  auto mean = make_tensor<f64>({1, 2}, {1.5, -2.0});
  auto out = dmm_discrepancy(tp, protos, mean);
  for (std::size_t i = 0; i < 4; ++i) CHECK(out->values[i] == 0.0);
}

TEST_CASE("discrepancy: elementwise subtraction oracle") {
  Tape<f64> tp;
  auto protos = make_tensor<f64>({3, 2}, {0.5, 1.0, -2.0, 3.5, 4.0, -1.0});
  auto mean = make_tensor<f64>({1, 2}, {1.0, 1.0});
  auto out = dmm_discrepancy(tp, protos, mean);
  const std::vector<double> expect{-0.5, 0.0, -3.0, 2.5, 3.0, -2.0};
  for (std::size_t i = 0; i < 6; ++i) CHECK(out->values[i] == doctest::Approx(expect[i]));

  auto bad = make_tensor<f64>({1, 3}, {1, 1, 1});
  CHECK_THROWS_AS(dmm_discrepancy(tp, protos, bad), DimensionError);
}

TEST_CASE("attend: a single prototype yields the all-ones column") {
  Rng rng(3);
  ParameterStore<f64> store;
  auto params = test_params(store, 1, 3, 2, rng);
  Tape<f64> tp;
  auto captured = make_tensor<f64>({2, 3}, random_values<f64>(rng, 6));
  auto attn = dmm_attend(tp, captured, params.prototypes, params);
  CHECK(attn->rows() == 2);
  CHECK(attn->cols() == 1);
  CHECK(attn->values[0] == doctest::Approx(1.0));
  CHECK(attn->values[1] == doctest::Approx(1.0));
}

TEST_CASE("attend: identical prototype rows give uniform attention") {
  Rng rng(4);
  const std::size_t n = 5;
  ParameterStore<f64> store;
  auto params = test_params(store, n, 3, 2, rng);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 3; ++j) params.prototypes->values[i * 3 + j] = (j == 1) ? 2.0 : -0.7;
  Tape<f64> tp;
  auto attn = dmm_attend(tp, make_tensor<f64>({2, 3}, random_values<f64>(rng, 6)),
                         params.prototypes, params);
  for (std::size_t i = 0; i < attn->size(); ++i)
    CHECK(attn->values[i] == doctest::Approx(1.0 / n).epsilon(1e-12));
}

TEST_CASE("attend matches the direct-formula oracle and is row-stochastic") {
  Rng rng(44);
  const std::size_t k = 2, n = 3, d = 4;
  ParameterStore<f64> store;
  auto params = test_params(store, n, d, k, rng);
  auto cv = random_values<f64>(rng, k * d);
  Tape<f64> tp;
  auto attn = dmm_attend(tp, make_tensor<f64>({k, d}, cv), params.prototypes, params);
  std::vector<double> wq(params.query_weight->values.begin(), params.query_weight->values.end());
  std::vector<double> wk(params.key_weight->values.begin(), params.key_weight->values.end());
  std::vector<double> pv(params.prototypes->values.begin(), params.prototypes->values.end());
  auto expect = attend_oracle(cv, k, pv, n, wq, wk, d, d);
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(attn->values[i] == doctest::Approx(expect[i]).epsilon(1e-10));
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) s += attn->values[i * n + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("forward with a single prototype: residual plus shifted prototype") {
  Rng rng(5);
  const std::size_t k = 3, d = 2;
  ParameterStore<f64> store;
  auto params = test_params(store, 1, d, k, rng);
  params.prototypes->values = {2.0, -1.0};
  // equal logits so every row is reweighted by exactly 1/k
  params.pattern_logits->values = {0.4, 0.4, 0.4};
  auto cv = random_values<f64>(rng, k * d);
  Tape<f64> tp;
  auto out = dmm_forward(tp, make_tensor<f64>({k, d}, cv), params);
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += cv[i * d + j] / double(k);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double pre = cv[i * d + j] + (params.prototypes->values[j] - mean[j]);
      CHECK(out.patterns->values[i * d + j] == doctest::Approx(pre / double(k)).epsilon(1e-12));
    }
}

TEST_CASE("forward matches the shifted-route oracle on random instances") {
  Rng rng(46);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 1 + rng.below(4), n = 1 + rng.below(5), d = 1 + rng.below(5);
    ParameterStore<f64> store;
    auto params = test_params(store, n, d, k, rng);
    params.pattern_logits->values = random_values<f64>(rng, k, 0.5);
    auto cv = random_values<f64>(rng, k * d);
    Tape<f64> tp;
    auto out = dmm_forward(tp, make_tensor<f64>({k, d}, cv), params);
    std::vector<double> wq(params.query_weight->values.begin(), params.query_weight->values.end());
    std::vector<double> wk(params.key_weight->values.begin(), params.key_weight->values.end());
    std::vector<double> pv(params.prototypes->values.begin(), params.prototypes->values.end());
    std::vector<double> lg(params.pattern_logits->values.begin(), params.pattern_logits->values.end());
    auto expect = forward_oracle_shifted_route(cv, k, pv, n, wq, wk, lg, d);
    for (std::size_t i = 0; i < expect.size(); ++i)
      CHECK(out.patterns->values[i] == doctest::Approx(expect[i]).epsilon(1e-9));
    // flattening is row-major over the patterns
    CHECK(out.flat->rows() == 1);
    CHECK(out.flat->cols() == k * d);
    for (std::size_t i = 0; i < k * d; ++i) CHECK(out.flat->values[i] == out.patterns->values[i]);
  }
}

TEST_CASE("rewrite identity: residual route equals shifted route in float32") {
  Rng rng(47);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 1 + rng.below(7), n = 1 + rng.below(16), d = 1 + rng.below(8);
    ParameterStore<f32> store;
    auto params = test_params(store, n, d, k, rng);
    auto cv = random_values<f32>(rng, k * d, 2.0);
    auto captured = make_tensor<f32>({k, d}, cv);

    Tape<f32> tp;
    auto mean = tp.mean_rows(captured);
    auto attn = dmm_attend(tp, captured, params.prototypes, params);
    // residual route: captured + A * (P - mean)
    auto route_a = tp.add(captured, tp.matmul(attn, dmm_discrepancy(tp, params.prototypes, mean)));
    // shifted route: (captured - mean) + A * P
    auto route_b = tp.add(tp.sub_rowvec(captured, mean), tp.matmul(attn, params.prototypes));
    for (std::size_t i = 0; i < k * d; ++i)
      CHECK(std::abs(route_a->values[i] - route_b->values[i]) < 1e-5f);
  }
}

TEST_CASE("pattern reweighting: softmax weights sum to one and preserve direction") {
  Rng rng(48);
  const std::size_t k = 4, d = 3;
  ParameterStore<f64> store;
  auto params = test_params(store, 5, d, k, rng);
  params.pattern_logits->values = {1.0, -2.0, 0.3, 0.0};
  auto cv = random_values<f64>(rng, k * d);
  Tape<f64> tp;
  auto captured = make_tensor<f64>({k, d}, cv);
  auto out = dmm_forward(tp, captured, params);

  auto weights = tp.softmax_rows(params.pattern_logits);
  double wsum = 0;
  for (std::size_t i = 0; i < k; ++i) wsum += weights->values[i];
  CHECK(wsum == doctest::Approx(1.0).epsilon(1e-9));

  // each output row is a nonnegative multiple of its pre-reweight row
  auto mean = tp.mean_rows(captured);
  auto attn = dmm_attend(tp, captured, params.prototypes, params);
  auto pre = tp.add(captured, tp.matmul(attn, dmm_discrepancy(tp, params.prototypes, mean)));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j)
      CHECK(out.patterns->values[i * d + j] ==
            doctest::Approx(pre->values[i * d + j] * weights->values[i]).epsilon(1e-12));
}

TEST_CASE("forward is pure: same inputs give identical outputs") {
  Rng rng(49);
  const std::size_t k = 3, n = 4, d = 5;
  ParameterStore<f64> store;
  auto params = test_params(store, n, d, k, rng);
  auto cv = random_values<f64>(rng, k * d);
  Tape<f64> tp1, tp2;
  auto a = dmm_forward(tp1, make_tensor<f64>({k, d}, cv), params);
  auto b = dmm_forward(tp2, make_tensor<f64>({k, d}, cv), params);
  CHECK(a.patterns->values == b.patterns->values);
}

TEST_CASE("gradients through the module pass a finite-difference check") {
  Rng rng(50);
  const std::size_t k = 3, n = 4, d = 4;
  ParameterStore<f64> store;
  auto params = test_params(store, n, d, k, rng);
  params.pattern_logits->values = random_values<f64>(rng, k, 0.3);
  auto captured = make_tensor<f64>({k, d}, random_values<f64>(rng, k * d), true);
  const auto build = [&](Tape<f64>& tp) {
    auto out = dmm_forward(tp, captured, params);
    return tp.sum_all(tp.mul(out.patterns, out.patterns));
  };
  CHECK(grad_check<f64>(build, captured, 1e-4) < 1e-4);
  CHECK(grad_check<f64>(build, params.prototypes, 1e-4) < 1e-4);
  CHECK(grad_check<f64>(build, params.query_weight, 1e-4) < 1e-4);
  CHECK(grad_check<f64>(build, params.key_weight, 1e-4) < 1e-4);
  CHECK(grad_check<f64>(build, params.pattern_logits, 1e-4) < 1e-4);
}
