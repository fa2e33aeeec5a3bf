#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "adl/error.hpp"
#include "adl/numerics.hpp"
#include "adl/rng.hpp"

using namespace adl;

namespace {

DenseMatrix random_symmetric(int n, std::uint64_t seed) {
  CounterRng rng(seed, 1);
  DenseMatrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m(i, j) = m(j, i) = rng.normal();
  return m;
}

double reconstruction_residual(const DenseMatrix& m, const EigenDecomposition& e) {
  const DenseMatrix r = e.eigenvectors * e.eigenvalues.asDiagonal() * e.eigenvectors.transpose();
  const double norm = m.norm();
  return norm > 0 ? (r - m).norm() / norm : (r - m).norm();
}

}  // namespace

TEST(Softmax, EqualLogitsSplitEvenly) {
  const Vector p = stable_softmax(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Vector p = stable_softmax(std::vector<double>{1000.0, 1000.0, 1000.0});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, LogThreeGivesQuarterAndThreeQuarters) {
  // exp(ln 3) = 3, so weights are 1/(1+3) and 3/(1+3).
  const Vector p = stable_softmax(std::vector<double>{0.0, std::log(3.0)});
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(Softmax, NegativeInfinityExcludesEntry) {
  const double ninf = -std::numeric_limits<double>::infinity();
  const Vector p = stable_softmax(std::vector<double>{ninf, 2.0, 2.0});
  EXPECT_EQ(p[0], 0.0);
  EXPECT_NEAR(p[1], 0.5, 1e-15);
}

TEST(Softmax, AllExcludedIsEmptySupport) {
  const double ninf = -std::numeric_limits<double>::infinity();
  try {
    stable_softmax(std::vector<double>{ninf, ninf});
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("empty support"), std::string::npos);
  }
}

TEST(Softmax, NanAndPositiveInfinityRejected) {
  EXPECT_THROW(stable_softmax(std::vector<double>{0.0, std::nan("")}), NumericalError);
  EXPECT_THROW(stable_softmax(std::vector<double>{0.0, std::numeric_limits<double>::infinity()}), NumericalError);
}

TEST(Softmax, PropertyNormalizedNonnegative) {
  CounterRng rng(11, 0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(17);
    for (auto& v : x) v = 50.0 * rng.normal();
    const Vector a = stable_softmax(x);
    EXPECT_NEAR(a.sum(), 1.0, 1e-12);
    EXPECT_GE(a.minCoeff(), 0.0);
  }
}

TEST(Softmax, PropertyShiftInvarianceUpToMillion) {
  CounterRng rng(12, 0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x(9);
    for (auto& v : x) v = std::ldexp(std::round(rng.normal() * 64.0), -6);
    // Dyadic logits and integer shifts keep x + c exact, isolating the softmax itself.
    const double c = std::round(rng.uniform(-1e6, 1e6));
    std::vector<double> shifted(x);
    for (auto& v : shifted) v += c;
    EXPECT_LE((stable_softmax(x) - stable_softmax(shifted)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(LogSumExp, MatchesDirectSum) {
  const std::vector<double> x{0.1, -2.0, 1.5};
  double s = 0;
  for (double v : x) s += std::exp(v);
  EXPECT_NEAR(log_sum_exp(x), std::log(s), 1e-14);
  EXPECT_NEAR(log_sum_exp(std::vector<double>{1000.0, 1000.0}), 1000.0 + std::log(2.0), 1e-12);
}

TEST(SymEigen, DiagonalSortsDescendingWithSignedPermutation) {
  DenseMatrix m = DenseMatrix::Zero(3, 3);
  m.diagonal() << 3.0, 1.0, 2.0;
  const auto e = sym_eigen(m);
  EXPECT_NEAR(e.eigenvalues[0], 3.0, 1e-14);
  EXPECT_NEAR(e.eigenvalues[1], 2.0, 1e-14);
  EXPECT_NEAR(e.eigenvalues[2], 1.0, 1e-14);
  const int expected_axis[3] = {0, 2, 1};
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(std::abs(e.eigenvectors(expected_axis[k], k)), 1.0, 1e-14);
    EXPECT_NEAR(e.eigenvectors.col(k).cwiseAbs().sum(), 1.0, 1e-14);
  }
}

TEST(SymEigen, ZeroMatrix) {
  const auto e = sym_eigen(DenseMatrix::Zero(4, 4));
  EXPECT_EQ(e.eigenvalues.cwiseAbs().maxCoeff(), 0.0);
}

TEST(SymEigen, RandomEightByEightReconstructs) {
  const DenseMatrix m = random_symmetric(8, 3);
  EXPECT_LT(reconstruction_residual(m, sym_eigen(m)), 1e-10);
}

TEST(SymEigen, NonSquareRejected) { EXPECT_THROW(sym_eigen(DenseMatrix::Zero(2, 3)), ConfigError); }

TEST(SymEigen, PropertyReconstructionOrthonormalSorted) {
  for (int n : {1, 2, 5, 16, 64, 128, 256}) {
    const DenseMatrix m = random_symmetric(n, 100 + n);
    const auto e = sym_eigen(m);
    EXPECT_LE(reconstruction_residual(m, e), 1e-8) << "n=" << n;
    const DenseMatrix gram = e.eigenvectors.transpose() * e.eigenvectors;
    EXPECT_LE((gram - DenseMatrix::Identity(n, n)).cwiseAbs().maxCoeff(), 1e-10) << "n=" << n;
    for (int k = 1; k < n; ++k) EXPECT_GE(e.eigenvalues[k - 1], e.eigenvalues[k]);
  }
}

TEST(SymEigen, SymmetrizesSlightlyAsymmetricInput) {
  DenseMatrix m = random_symmetric(6, 9);
  DenseMatrix skewed = m;
  skewed(0, 1) += 1e-9;
  EXPECT_LE(reconstruction_residual(m, sym_eigen(skewed)), 1e-8);
}

TEST(PsdEigen, ClampsTinyNegativesAndRejectsLargeOnes) {
  DenseMatrix m = DenseMatrix::Zero(3, 3);
  m.diagonal() << 2.0, 1.0, -1e-12;
  const auto e = psd_eigen(m);
  EXPECT_EQ(e.eigenvalues[2], 0.0);
  m(2, 2) = -1e-3;
  EXPECT_THROW(psd_eigen(m), NumericalError);
}

TEST(PsdEigen, GramMatrixIsNonnegative) {
  CounterRng rng(5, 0);
  DenseMatrix a(4, 12);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
  const auto e = psd_eigen(a.transpose() * a);
  EXPECT_GE(e.eigenvalues.minCoeff(), 0.0);
}

TEST(RowSpaceProjection, Identity) {
  const DenseMatrix p = row_space_projection(DenseMatrix::Identity(4, 4));
  EXPECT_LE((p - DenseMatrix::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RowSpaceProjection, SingleRow) {
  DenseMatrix a(1, 3);
  a << 1.0, 0.0, 0.0;
  DenseMatrix expected = DenseMatrix::Zero(3, 3);
  expected(0, 0) = 1.0;
  EXPECT_LE((row_space_projection(a) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RowSpaceProjection, DiagonalDependsOnlyOnSupport) {
  DenseMatrix a = DenseMatrix::Zero(3, 3);
  a.diagonal() << 5.0, 0.0, 2.0;
  DenseMatrix expected = DenseMatrix::Zero(3, 3);
  expected.diagonal() << 1.0, 0.0, 1.0;
  EXPECT_LE((row_space_projection(a) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(RowSpaceProjection, ZeroMatrixGivesZero) {
  EXPECT_EQ(row_space_projection(DenseMatrix::Zero(2, 5)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(RowSpaceProjection, PropertyIdempotentSymmetricOnRankDeficient) {
  CounterRng rng(21, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const int rows = 1 + static_cast<int>(rng.below(6));
    const int cols = 2 + static_cast<int>(rng.below(10));
    const int rank = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(std::min(rows, cols))));
    DenseMatrix l(rows, rank), r(rank, cols);
    for (Eigen::Index i = 0; i < l.size(); ++i) l.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
    const DenseMatrix a = l * r;
    const DenseMatrix p = row_space_projection(a);
    EXPECT_LE((p * p - p).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((p - p.transpose()).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((p * a.transpose() - a.transpose()).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(p.trace(), rank, 1e-8);
  }
}

TEST(CounterRng, StreamsAreReproducibleAndDistinct) {
  CounterRng a(7, 3), b(7, 3), c(7, 4);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
}

TEST(CounterRng, NormalMomentsAreStandard) {
  CounterRng rng(1, 0);
  const int n = 200000;
  double s = 0, ss = 0;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    ss += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(ss / n, 1.0, 0.01);
}
