#include <gtest/gtest.h>

#include <boost/math/distributions/students_t.hpp>
#include <boost/math/special_functions/beta.hpp>
#include <cmath>

#include "../support.hpp"

using namespace quantaudit;

namespace {

std::vector<double> normals(std::size_t n, std::uint64_t seed, double mean = 0.0, double sd = 1.0) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (auto& v : x) v = rng.normal(mean, sd);
  return x;
}

}  // namespace

TEST(Kurtosis, AnalyticDistributions) {
  std::vector<double> two_point;
  for (int i = 0; i < 1000; ++i) two_point.push_back(i % 2 ? 1.0 : -1.0);
  EXPECT_DOUBLE_EQ(excess_kurtosis(two_point).excess_kurtosis, -2.0);

  Rng rng(17);
  std::vector<double> uniform(1000000);
  for (auto& v : uniform) v = rng.uniform(-1.0, 1.0);
  EXPECT_NEAR(excess_kurtosis(uniform).excess_kurtosis, -1.2, 0.05);
  EXPECT_NEAR(excess_kurtosis(normals(1000000, 18)).excess_kurtosis, 0.0, 0.05);
}

TEST(Kurtosis, AffineInvariance) {
  const auto x = normals(5000, 3);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::pow(x[i], 3);
  const double k = excess_kurtosis(y).excess_kurtosis;
  for (auto [a, b] : {std::pair{2.5, -3.0}, std::pair{-0.1, 100.0}}) {
    std::vector<double> z(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) z[i] = a * y[i] + b;
    EXPECT_NEAR(excess_kurtosis(z).excess_kurtosis, k, 1e-9 * std::max(1.0, std::fabs(k)));
  }
}

TEST(Kurtosis, MergedAccumulatorsMatchSinglePass) {
  const auto x = normals(10007, 5, 1.0, 3.0);
  MomentAccumulator whole, a, b, c;
  for (double v : x) whole.push(v);
  for (std::size_t i = 0; i < x.size(); ++i) (i < 10 ? a : i < 6000 ? b : c).push(x[i]);
  a.merge(b);
  a.merge(c);
  a.merge(MomentAccumulator{});
  EXPECT_EQ(a.count(), whole.count());
  EXPECT_NEAR(a.mean(), whole.mean(), 1e-12);
  EXPECT_NEAR(kurtosis_from(a).excess_kurtosis, kurtosis_from(whole).excess_kurtosis, 1e-9);
}

TEST(Kurtosis, PreconditionsAreChecked) {
  EXPECT_THROW(excess_kurtosis(std::vector<double>{1, 2, 3}), DomainError);
  EXPECT_THROW(excess_kurtosis(std::vector<double>{2, 2, 2, 2, 2}), DomainError);
}

TEST(Kurtosis, PooledCheckpointWeights) {
  TensorMap t{{"a.weight", qa_test::normal_tensor({200, 500}, 1)},
              {"b.weight", qa_test::normal_tensor({300, 400}, 2)},
              {"c.weight", qa_test::normal_tensor({100, 1000}, 3)},
              {"a.bias", qa_test::normal_tensor({200}, 4, 50.0)}};
  const auto k = pooled_weight_kurtosis(t, QuantSelector{});
  EXPECT_NEAR(k.excess_kurtosis, 0.0, 0.05);
  EXPECT_EQ(k.n, 320000u);

  TensorMap single{{"x.weight", t.at("b.weight")}};
  EXPECT_NEAR(pooled_weight_kurtosis(single, QuantSelector{}).excess_kurtosis,
              excess_kurtosis(std::span<const float>(t.at("b.weight").data)).excess_kurtosis, 1e-12);

  auto skewed = qa_test::normal_tensor({50, 50}, 9, 0.1, 2.0);
  const std::vector<std::span<const float>> fwd{t.at("a.weight").data, skewed.data, t.at("c.weight").data};
  const std::vector<std::span<const float>> rev{t.at("c.weight").data, t.at("a.weight").data, skewed.data};
  EXPECT_NEAR(pooled_kurtosis(fwd).excess_kurtosis, pooled_kurtosis(rev).excess_kurtosis, 1e-9);

  QuantSelector none;
  none.include_patterns = {"zzz"};
  EXPECT_THROW(pooled_weight_kurtosis(t, none), DomainError);
}

TEST(Pearson, IdentityAndAntiIdentity) {
  const auto x = normals(100, 1);
  std::vector<double> neg(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
  EXPECT_DOUBLE_EQ(pearson(x, x), 1.0);
  EXPECT_DOUBLE_EQ(pearson(x, neg), -1.0);
}

TEST(Pearson, MatchesDirectFormula) {
  const std::vector<double> x{1, 2, 3}, y{2, 4, 7};
  // Means 2 and 13/3; sxy = 5, sxx = 2, syy = 38/3.
  const double ref = 5.0 / std::sqrt(2.0 * 38.0 / 3.0);
  EXPECT_NEAR(pearson(x, y), ref, 1e-15);
}

TEST(Pearson, AffineEquivariance) {
  const auto x = normals(200, 2), y = normals(200, 3);
  const double r = pearson(x, y);
  for (double a : {3.0, -0.5}) {
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = a * x[i] + 7.0;
    EXPECT_NEAR(pearson(z, y), (a > 0 ? 1 : -1) * r, 1e-12);
  }
  EXPECT_THROW(pearson(std::vector<double>{1, 2}, std::vector<double>{1, 2, 3}), DomainError);
  EXPECT_THROW(pearson(std::vector<double>{1, 1, 1}, std::vector<double>{1, 2, 3}), DomainError);
}

TEST(IncompleteBeta, MatchesBoost) {
  for (double a : {0.5, 1.0, 2.5, 10.0, 45.0})
    for (double b : {0.5, 1.0, 3.0, 20.0})
      for (double x : {1e-6, 0.01, 0.2, 0.5, 0.77, 0.99, 1 - 1e-9}) {
        const double ref = boost::math::ibeta(a, b, x);
        EXPECT_NEAR(regularized_incomplete_beta(a, b, x), ref, 1e-10) << a << " " << b << " " << x;
      }
  EXPECT_EQ(regularized_incomplete_beta(2, 3, 0.0), 0.0);
  EXPECT_EQ(regularized_incomplete_beta(2, 3, 1.0), 1.0);
  EXPECT_THROW(regularized_incomplete_beta(0, 3, 0.5), DomainError);
}

TEST(StudentT, TwoSidedPMatchesTables) {
  // Classic two-sided critical values.
  EXPECT_NEAR(student_t_two_sided_p(2.228, 10), 0.05, 1e-4);
  EXPECT_NEAR(student_t_two_sided_p(12.706, 1), 0.05, 1e-4);
  EXPECT_NEAR(student_t_two_sided_p(2.576, 1e7), 0.01, 1e-4);
  EXPECT_DOUBLE_EQ(student_t_two_sided_p(0.0, 5), 1.0);
}

TEST(Welch, MatchesIndependentOracle) {
  const std::vector<std::vector<double>> fixtures_a{{12.3, 11.8, 13.1, 12.9, 12.0},
                                                    {5.3, 3.1, 7.2, 6.0, 4.4, 5.9, 2.8},
                                                    normals(40, 11, 0.0, 1.0)};
  const std::vector<std::vector<double>> fixtures_b{{16.7, 14.2, 19.4},
                                                    {12.3, 11.5, 13.2, 12.9, 12.1, 11.9},
                                                    normals(25, 12, 0.3, 2.0)};
  for (std::size_t f = 0; f < fixtures_a.size(); ++f) {
    const auto& a = fixtures_a[f];
    const auto& b = fixtures_b[f];
    auto moments = [](const std::vector<double>& v) {
      double m = 0;
      for (double x : v) m += x;
      m /= v.size();
      double s = 0;
      for (double x : v) s += (x - m) * (x - m);
      return std::pair{m, s / (v.size() - 1)};
    };
    const auto [ma, va] = moments(a);
    const auto [mb, vb] = moments(b);
    const double na = a.size(), nb = b.size();
    const double se2 = va / na + vb / nb;
    const double t = (ma - mb) / std::sqrt(se2);
    const double df = se2 * se2 / ((va / na) * (va / na) / (na - 1) + (vb / nb) * (vb / nb) / (nb - 1));
    const boost::math::students_t dist(df);
    const double p = 2 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));

    const auto w = welch_t(a, b);
    EXPECT_NEAR(w.t, t, 1e-6 * std::fabs(t));
    EXPECT_NEAR(w.df, df, 1e-6 * df);
    EXPECT_NEAR(w.p_two_sided, p, 1e-6 * p);
  }
}

TEST(Welch, IdenticalSamplesAndAntisymmetry) {
  const std::vector<double> a{1.0, 2.0, 4.0, 8.0};
  const auto same = welch_t(a, a);
  EXPECT_EQ(same.t, 0.0);
  EXPECT_DOUBLE_EQ(same.p_two_sided, 1.0);
  const std::vector<double> b{3.0, 3.5, 9.0};
  const auto ab = welch_t(a, b), ba = welch_t(b, a);
  EXPECT_EQ(ab.t, -ba.t);
  EXPECT_EQ(ab.p_two_sided, ba.p_two_sided);
  EXPECT_THROW(welch_t(std::vector<double>{1.0}, b), DomainError);
  EXPECT_THROW(welch_t(std::vector<double>{1.0, 1.0}, b), DomainError);
}

TEST(PairwiseWins, Fixtures) {
  const auto sgdr = pairwise_wins(std::vector<double>{16, 16, 16}, std::vector<double>{12, 12, 12});
  EXPECT_EQ(sgdr.wins, 0);
  EXPECT_EQ(sgdr.total, 9);
  const auto small = pairwise_wins(std::vector<double>{2, 4}, std::vector<double>{1, 3});
  EXPECT_EQ(small.wins, 1);
  EXPECT_EQ(small.total, 4);
  const auto tie = pairwise_wins(std::vector<double>{5}, std::vector<double>{5});
  EXPECT_EQ(tie.wins, 0);
  EXPECT_EQ(tie.ties, 1);
  EXPECT_EQ(pairwise_wins(std::vector<double>{2, 4}, std::vector<double>{1, 3}, false).wins, 3);
}

TEST(PairwiseWins, WinsBothWaysPlusTiesCoverAllPairs) {
  const std::vector<double> a{1, 2, 2, 5, 7}, b{2, 3, 5};
  const auto ab = pairwise_wins(a, b), ba = pairwise_wins(b, a);
  EXPECT_EQ(ab.ties, ba.ties);
  EXPECT_EQ(ab.wins + ba.wins + ab.ties, 15);
}
