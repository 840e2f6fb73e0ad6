#include "mbl/hamiltonian.hpp"

#include <gtest/gtest.h>

#include <bit>
#include <complex>

#include "oracles.hpp"

namespace {

using namespace mbl;

DisorderRealization fixed_potentials(std::vector<double> h) {
  DisorderRealization d;
  d.potentials_mhz = std::move(h);
  d.w_mhz = 0.0;
  d.seed = 0;
  return d;
}

TEST(BuildHamiltonian, SingleBondHopping) {
  const CouplingGraph g = build_chain(2, 3.0);
  const SparseHamiltonian h = build_hamiltonian(g, fixed_potentials({0.0, 0.0}), 1);
  const Eigen::MatrixXd m = to_dense(h);
  Eigen::MatrixXd want(2, 2);
  want << 0, 3, 3, 0;
  EXPECT_EQ((m - want).cwiseAbs().maxCoeff(), 0.0);
}

TEST(BuildHamiltonian, DetunedTwoSite) {
  const CouplingGraph g = build_chain(2, 3.0);
  const SparseHamiltonian h = build_hamiltonian(g, fixed_potentials({10.0, -10.0}), 1);
  // Basis order is ascending configuration: {01 (site 0), 10 (site 1)}.
  const Eigen::MatrixXd m = to_dense(h);
  Eigen::MatrixXd want(2, 2);
  want << 10, 3, 3, -10;
  EXPECT_EQ((m - want).cwiseAbs().maxCoeff(), 0.0);
}

TEST(BuildHamiltonian, SpectrumMatchesPauliProductOracle) {
  const CouplingGraph g = build_rectangle(3, 4);
  const DisorderRealization d = sample_disorder(12, 50.0, 314159);
  const SparseHamiltonian h = build_hamiltonian(g, d, 6);
  ASSERT_EQ(h.dim(), 924u);

  const Eigen::MatrixXd impl = to_dense(h);
  const Eigen::MatrixXd ref = oracle::dense_sector_hamiltonian(g, d.potentials_mhz, 6);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(impl, Eigen::EigenvaluesOnly);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> er(ref, Eigen::EigenvaluesOnly);
  const double scale = er.eigenvalues().cwiseAbs().maxCoeff();
  EXPECT_LE((ei.eigenvalues() - er.eigenvalues()).cwiseAbs().maxCoeff(), 1e-10 * scale);
}

TEST(Apply, MatchesSingleBondByHand) {
  const CouplingGraph g = build_chain(2, 3.0);
  const SparseHamiltonian h = build_hamiltonian(g, fixed_potentials({0.0, 0.0}), 1);
  Eigen::VectorXd x(2), y(2);
  x << 1, 0;
  h.apply(x, y);
  EXPECT_EQ(y(0), 0.0);
  EXPECT_EQ(y(1), 3.0);
}

TEST(Apply, ColumnsMatchDenseOracle) {
  const CouplingGraph g = build_rectangle(3, 3);
  const DisorderRealization d = sample_disorder(9, 30.0, 2718);
  const SparseHamiltonian h = build_hamiltonian(g, d, 4);
  const Eigen::MatrixXd ref = oracle::dense_sector_hamiltonian(g, d.potentials_mhz, 4);
  ASSERT_EQ(static_cast<Eigen::Index>(h.dim()), ref.rows());

  Eigen::VectorXd e = Eigen::VectorXd::Zero(ref.rows()), y(ref.rows());
  for (Eigen::Index k = 0; k < ref.cols(); ++k) {
    e.setZero();
    e(k) = 1.0;
    h.apply(e, y);
    EXPECT_LE((y - ref.col(k)).cwiseAbs().maxCoeff(), 1e-12) << "column " << k;
  }
}

TEST(Apply, QuadraticFormRealForComplexVectors) {
  const CouplingGraph g = build_rectangle(2, 4);
  const DisorderRealization d = sample_disorder(8, 40.0, 11);
  const SparseHamiltonian h = build_hamiltonian(g, d, 4);

  SplitMix64 rng(3);
  Eigen::VectorXcd v(h.dim());
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v(i) = std::complex<double>(rng.normal(), rng.normal());
  Eigen::VectorXcd y(v.size());
  h.apply(v, y);
  const std::complex<double> q = v.dot(y);  // conjugate-linear in v
  EXPECT_LE(std::abs(q.imag()), 1e-12 * std::abs(q.real()) + 1e-12);
}

TEST(Apply, RejectsLengthMismatch) {
  const SparseHamiltonian h =
      build_hamiltonian(build_chain(2, 3.0), fixed_potentials({0.0, 0.0}), 1);
  Eigen::VectorXd x(3), y(3);
  x.setZero();
  EXPECT_THROW(h.apply(x, y), std::invalid_argument);
}

TEST(Invariants, OffDiagonalsPreservePopcountAndSymmetry) {
  const CouplingGraph g = build_rectangle(2, 5);
  const DisorderRealization d = sample_disorder(10, 25.0, 505);
  const SparseHamiltonian h = build_hamiltonian(g, d, 5);

  for (std::size_t r = 0; r < h.dim(); ++r)
    for (std::uint64_t k = h.row_start[r]; k < h.row_start[r + 1]; ++k)
      EXPECT_EQ(std::popcount(h.basis->states[h.column_of(k)]),
                std::popcount(h.basis->states[r]));

  const Eigen::MatrixXd m = to_dense(h);
  EXPECT_EQ((m - m.transpose()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Invariants, TraceIdentity) {
  // trace(H) = binomial(L-1, n-1) * sum_i h_i: each site is occupied in
  // exactly binomial(L-1, n-1) of the binomial(L, n) configurations.
  SplitMix64 rng(90);
  for (int rep = 0; rep < 5; ++rep) {
    const int L = 8 + 2 * rep;  // up to 14 sites
    const int n = L / 2;
    const CouplingGraph g = build_rectangle(2, L / 2);
    const DisorderRealization d = sample_disorder(L, 60.0, rng.next());
    const SparseHamiltonian h = build_hamiltonian(g, d, n);

    double hsum = 0.0;
    for (double v : d.potentials_mhz) hsum += v;
    const double want = static_cast<double>(binomial(L - 1, n - 1)) * hsum;
    EXPECT_NEAR(h.trace_mhz(), want, 1e-9 * std::max(1.0, std::abs(want)));
  }
}

TEST(Invariants, ZeroDisorderZeroCouplingIsZeroMatrix) {
  const CouplingGraph g = build_rectangle(2, 3, 0.0, 0.0);
  const SparseHamiltonian h =
      build_hamiltonian(g, fixed_potentials(std::vector<double>(6, 0.0)), 3);
  const Eigen::MatrixXd m = to_dense(h);
  EXPECT_EQ(m.cwiseAbs().maxCoeff(), 0.0);
}

TEST(BuildHamiltonian, ValidatesInputs) {
  const CouplingGraph g = build_chain(3, 2.9);
  EXPECT_THROW(build_hamiltonian(g, fixed_potentials({0.0, 0.0}), 1),
               std::invalid_argument);

  CouplingGraph dup = g;
  dup.bonds.push_back(dup.bonds[0]);
  EXPECT_THROW(build_hamiltonian(dup, fixed_potentials({0.0, 0.0, 0.0}), 1),
               std::invalid_argument);
}

TEST(BuildHamiltonian, PropagatesSectorCapacityError) {
  CouplingGraph g = build_chain(2, 1.0);
  // Fake a 31-site graph to hit the sector cap without allocating much.
  g.sites.resize(31);
  for (int i = 0; i < 31; ++i) g.sites[i] = {i, 0, i};
  g.bonds = {{g.sites[0], g.sites[1], 1.0, BondKind::nn}};
  EXPECT_THROW(
      build_hamiltonian(g, fixed_potentials(std::vector<double>(31, 0.0)), 2),
      CapacityError);
}

}  // namespace
