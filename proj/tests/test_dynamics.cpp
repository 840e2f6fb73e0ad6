#include "mbl/dynamics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "oracles.hpp"

namespace {

using namespace mbl;

SparseHamiltonian two_site_resonant() {
  DisorderRealization d;
  d.potentials_mhz = {0.0, 0.0};
  return build_hamiltonian(build_chain(2, 3.0), d, 1);
}

TEST(GeometricGrid, EndpointsSpacingAndErrors) {
  const std::vector<double> t = geometric_grid(10.0, 1000.0, 40);
  ASSERT_EQ(t.size(), 40u);
  EXPECT_EQ(t.front(), 10.0);
  EXPECT_EQ(t.back(), 1000.0);
  const double ratio = t[1] / t[0];
  for (std::size_t i = 1; i < t.size(); ++i) {
    EXPECT_GT(t[i], t[i - 1]);
    EXPECT_NEAR(t[i] / t[i - 1], ratio, 1e-9);
  }
  EXPECT_THROW(geometric_grid(0.0, 10.0, 5), std::invalid_argument);
  EXPECT_THROW(geometric_grid(10.0, 5.0, 5), std::invalid_argument);
  EXPECT_THROW(geometric_grid(1.0, 10.0, 1), std::invalid_argument);
}

TEST(DefaultSampleTimes, ZeroPlusGeometricWindow) {
  const std::vector<double> t = default_sample_times();
  ASSERT_EQ(t.size(), 41u);
  EXPECT_EQ(t[0], 0.0);
  EXPECT_EQ(t[1], 10.0);
  EXPECT_EQ(t.back(), 1000.0);
}

TEST(Checkerboard, ParityCountsOnKnownGrids) {
  const InitialPattern two = checkerboard(build_rectangle(1, 2), PatternParity::even);
  ASSERT_EQ(two.excited.size(), 1u);
  EXPECT_EQ(two.excited[0].index, 0);
  EXPECT_EQ(two.label, PatternLabel::checkerboard_even);

  const CouplingGraph g37 = build_rectangle(3, 7);
  EXPECT_EQ(checkerboard(g37, PatternParity::even).excited.size(), 11u);
  EXPECT_EQ(checkerboard(g37, PatternParity::odd).excited.size(), 10u);

  const CouplingGraph g67 = build_rectangle(6, 7);
  EXPECT_EQ(checkerboard(g67, PatternParity::even).excited.size(), 21u);
  EXPECT_EQ(checkerboard(g67, PatternParity::odd).excited.size(), 21u);
}

TEST(KrylovStep, TwoLevelFullSwap) {
  const SparseHamiltonian h = two_site_resonant();
  Eigen::VectorXcd v(2);
  v << 1.0, 0.0;
  // P_swap(t) = sin^2(2pi * J * 1e-3 * t) reaches 1 at t = 1/(4 * 3e-3) ns.
  const double t_swap = 250.0 / 3.0;
  const Eigen::VectorXcd out = krylov_step(h, v, t_swap);
  EXPECT_NEAR(std::norm(out(1)), 1.0, 1e-9);
}

TEST(KrylovStep, ZeroTimeIsIdentity) {
  const SparseHamiltonian h = two_site_resonant();
  Eigen::VectorXcd v(2);
  v << std::complex<double>(0.6, 0.0), std::complex<double>(0.0, 0.8);
  const Eigen::VectorXcd out = krylov_step(h, v, 0.0);
  EXPECT_EQ(out(0), v(0));
  EXPECT_EQ(out(1), v(1));
}

TEST(KrylovStep, MatchesDenseExponentialOracle) {
  struct Case {
    CouplingGraph graph;
    double w;
    std::uint64_t seed;
  };
  const Case cases[] = {
      {build_rectangle(2, 5), 0.0, 10},
      {build_rectangle(2, 5), 50.0, 11},
      {build_chain(10), 100.0, 12},
  };
  for (const Case& c : cases) {
    const DisorderRealization d = sample_disorder(c.graph.n_sites(), c.w, c.seed);
    const SparseHamiltonian h = build_hamiltonian(c.graph, d, 5);
    const Eigen::MatrixXd dense =
        oracle::dense_sector_hamiltonian(c.graph, d.potentials_mhz, 5);

    Eigen::VectorXcd v = Eigen::VectorXcd::Zero(h.dim());
    v(0) = 1.0;
    for (double t : {10.0, 100.0}) {
      const Eigen::VectorXcd krylov = krylov_step(h, v, t);
      const Eigen::VectorXcd ref = oracle::dense_evolve(dense, v, t);
      EXPECT_LE((krylov - ref).norm(), 1e-10) << "W=" << c.w << " t=" << t;
      EXPECT_LE(std::abs(krylov.norm() - 1.0), 1e-10);
    }
  }
}

TEST(KrylovStep, LongStepTriggersHalvingAndStaysAccurate) {
  const CouplingGraph g = build_rectangle(2, 4);
  const DisorderRealization d = sample_disorder(8, 50.0, 77);
  const SparseHamiltonian h = build_hamiltonian(g, d, 4);
  const Eigen::MatrixXd dense = oracle::dense_sector_hamiltonian(g, d.potentials_mhz, 4);

  Eigen::VectorXcd v = Eigen::VectorXcd::Zero(h.dim());
  v(h.dim() / 2) = 1.0;
  detail::KrylovInfo info;
  const Eigen::VectorXcd out = krylov_step(h, v, 1000.0, {}, &info);
  EXPECT_GT(info.halvings, 0);
  EXPECT_LE((out - oracle::dense_evolve(dense, v, 1000.0)).norm(), 1e-10);
}

TEST(KrylovStep, ZeroHamiltonianBreaksDownHappily) {
  const CouplingGraph g = build_rectangle(1, 4, 0.0, 0.0);
  DisorderRealization d;
  d.potentials_mhz = {0.0, 0.0, 0.0, 0.0};
  const SparseHamiltonian h = build_hamiltonian(g, d, 2);

  Eigen::VectorXcd v = Eigen::VectorXcd::Zero(h.dim());
  v(0) = std::complex<double>(std::numbers::sqrt2 / 2, 0);
  v(3) = std::complex<double>(0, std::numbers::sqrt2 / 2);
  const Eigen::VectorXcd out = krylov_step(h, v, 123.0);
  EXPECT_EQ(out, v);
}

TEST(KrylovStep, RejectsBadStates) {
  const SparseHamiltonian h = two_site_resonant();
  Eigen::VectorXcd bad(2);
  bad << std::numeric_limits<double>::quiet_NaN(), 0.0;
  EXPECT_THROW(krylov_step(h, bad, 1.0), NumericError);

  Eigen::VectorXcd unnormalized(2);
  unnormalized << 2.0, 0.0;
  EXPECT_THROW(krylov_step(h, unnormalized, 1.0), std::invalid_argument);

  Eigen::VectorXcd wrong_len(3);
  wrong_len << 1.0, 0.0, 0.0;
  EXPECT_THROW(krylov_step(h, wrong_len, 1.0), std::invalid_argument);
}

TEST(KrylovStep, TimeReversalReturnsStart) {
  const CouplingGraph g = build_rectangle(2, 4);
  const DisorderRealization d = sample_disorder(8, 30.0, 5);
  const SparseHamiltonian h = build_hamiltonian(g, d, 4);

  Eigen::VectorXcd v0 = Eigen::VectorXcd::Zero(h.dim());
  v0(7) = 1.0;
  const Eigen::VectorXcd fwd = krylov_step(h, v0, 137.0);
  const Eigen::VectorXcd back = krylov_step(h, fwd, -137.0);
  EXPECT_LE((back - v0).norm(), 1e-8);
}

TEST(RunQuench, StartsAtExactlyOne) {
  const SparseHamiltonian h = two_site_resonant();
  InitialPattern p;
  p.excited = {h.graph->sites[0]};
  const ImbalanceTrace tr = run_quench(h, p, 10.0, {0.0, 10.0});
  EXPECT_EQ(tr.imbalance[0], 1.0);
}

TEST(RunQuench, ResonantPairOscillates) {
  const SparseHamiltonian h = two_site_resonant();
  InitialPattern p;
  p.excited = {h.graph->sites[0]};

  std::vector<double> times{0.0};
  for (int k = 1; k <= 12; ++k) times.push_back(k * 10.0);
  times.push_back(250.0 / 3.0);
  std::sort(times.begin(), times.end());

  const ImbalanceTrace tr = run_quench(h, p, 130.0, times);
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double want = std::cos(2.0 * radians_per_mhz_ns * 3.0 * times[i]);
    EXPECT_NEAR(tr.imbalance[i], want, 1e-9) << "t=" << times[i];
  }
}

TEST(RunQuench, MatchesDenseOracleOnDisorderedRectangle) {
  const CouplingGraph g = build_rectangle(3, 4);
  const DisorderRealization d = sample_disorder(12, 50.0, 424242);
  const SparseHamiltonian h = build_hamiltonian(g, d, 6);
  const InitialPattern p = checkerboard(g, PatternParity::even);
  ASSERT_EQ(p.excited.size(), 6u);

  const std::vector<double> times = default_sample_times();
  const ImbalanceTrace tr = run_quench(h, p, 1000.0, times);

  // Independent evolution route: full eigendecomposition of the dense sector
  // matrix, then exact imbalance from per-site occupations.
  const Eigen::MatrixXd dense = oracle::dense_sector_hamiltonian(g, d.potentials_mhz, 6);
  std::vector<std::uint32_t> states;
  for (std::uint32_t s = 0; s < (1u << 12); ++s)
    if (std::popcount(s) == 6) states.push_back(s);

  Eigen::VectorXcd v0 = Eigen::VectorXcd::Zero(dense.rows());
  v0(h.basis->index_of(p.configuration())) = 1.0;

  std::vector<char> mask(12, 0);
  for (const SiteId& s : p.excited) mask[s.index] = 1;

  const oracle::DenseEvolver evolve(dense);
  for (std::size_t k = 0; k < times.size(); ++k) {
    const Eigen::VectorXcd psi = evolve(v0, times[k]);
    double n1 = 0, n0 = 0;
    for (Eigen::Index s = 0; s < psi.size(); ++s) {
      const double pr = std::norm(psi(s));
      for (int j = 0; j < 12; ++j)
        if (states[s] & (1u << j)) (mask[j] ? n1 : n0) += pr;
    }
    n1 /= 6.0;
    n0 /= 6.0;
    const double want = (n1 - n0) / (n1 + n0);
    EXPECT_NEAR(tr.imbalance[k], want, 1e-8) << "t=" << times[k];
  }

  EXPECT_LE(tr.max_norm_drift, 1e-9);
  EXPECT_LE(tr.max_number_drift, 1e-9);
  EXPECT_EQ(tr.imbalance[0], 1.0);
}

TEST(RunQuench, ZeroCouplingFreezesImbalance) {
  const CouplingGraph g = build_rectangle(1, 8, 0.0, 0.0);
  const DisorderRealization d = sample_disorder(8, 50.0, 8000);
  const SparseHamiltonian h = build_hamiltonian(g, d, 4);
  const InitialPattern p = checkerboard(g, PatternParity::even);
  const ImbalanceTrace tr = run_quench(h, p, 1000.0, default_sample_times());
  for (double i : tr.imbalance) EXPECT_NEAR(i, 1.0, 1e-12);
}

TEST(RunQuench, ValidatesInputs) {
  const SparseHamiltonian h = two_site_resonant();
  InitialPattern p;
  p.excited = {h.graph->sites[0]};

  InitialPattern two;
  two.excited = {h.graph->sites[0], h.graph->sites[1]};
  EXPECT_THROW(run_quench(h, two, 10.0, {0.0, 10.0}), std::invalid_argument);
  EXPECT_THROW(run_quench(h, p, 10.0, {10.0}), std::invalid_argument);
  EXPECT_THROW(run_quench(h, p, 10.0, {0.0, 5.0, 5.0}), std::invalid_argument);
  EXPECT_THROW(run_quench(h, p, 10.0, {0.0, 20.0}), std::invalid_argument);
}

}  // namespace
