#pragma once

// Coupling-graph geometry for rectangular arrays of transmon-style qubits.
//
// build_rectangle produces the standard device graph: nearest-neighbour bonds
// along rows and columns plus both diagonal bonds of every 2x2 plaquette
// (the next-nearest-neighbour class that carries appreciable strength on the
// device; the remaining NNN pairs are weak enough to be modelled as absent).

#include <cstdint>
#include <queue>
#include <stdexcept>
#include <vector>

#include "mbl/rng.hpp"

namespace mbl {

enum class BondKind { nn, nnn };
enum class GeometryKind { chain, ladder, rectangle, custom };

struct SiteId {
  int index = 0;  // contiguous, row-major for grid builders
  int row = 0;
  int col = 0;

  friend bool operator==(const SiteId&, const SiteId&) = default;
};

struct Bond {
  SiteId a;
  SiteId b;
  double strength_mhz = 0.0;
  BondKind kind = BondKind::nn;
};

struct CouplingGraph {
  std::vector<SiteId> sites;
  std::vector<Bond> bonds;
  GeometryKind geometry = GeometryKind::custom;
  int rows = 0;  // grid extent for builder-made graphs, 0 for custom
  int cols = 0;

  int n_sites() const noexcept { return static_cast<int>(sites.size()); }

  int site_index(int row, int col) const {
    if (rows <= 0 || cols <= 0) throw std::invalid_argument("graph has no grid layout");
    if (row < 0 || row >= rows || col < 0 || col >= cols)
      throw std::invalid_argument("grid coordinates out of range");
    return row * cols + col;
  }
};

// Default device coupling strengths (MHz).
inline constexpr double default_j_nn_mhz = 2.9;
inline constexpr double default_j_nnn_mhz = 1.1;

namespace detail {

inline void check_bond_endpoints(const CouplingGraph& g) {
  for (const Bond& b : g.bonds) {
    if (b.a.index == b.b.index) throw std::invalid_argument("bond joins a site to itself");
    if (b.a.index < 0 || b.a.index >= g.n_sites() || b.b.index < 0 ||
        b.b.index >= g.n_sites())
      throw std::invalid_argument("bond endpoint outside site list");
  }
}

}  // namespace detail

// Rows x cols grid. Bond order is deterministic and part of the seeding
// contract for perturb_bonds: horizontal NN row-major, then vertical NN
// row-major, then the two plaquette diagonals row-major.
inline CouplingGraph build_rectangle(int rows, int cols,
                                     double j_nn = default_j_nn_mhz,
                                     double j_nnn = default_j_nnn_mhz) {
  if (rows < 1 || cols < 1) throw std::invalid_argument("grid extents must be positive");
  if (rows * cols < 2) throw std::invalid_argument("grid needs at least two sites");

  CouplingGraph g;
  g.rows = rows;
  g.cols = cols;
  if (rows == 1 || cols == 1)
    g.geometry = GeometryKind::chain;
  else if (rows == 2 || cols == 2)
    g.geometry = GeometryKind::ladder;
  else
    g.geometry = GeometryKind::rectangle;

  g.sites.reserve(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) g.sites.push_back({r * cols + c, r, c});

  auto site = [&](int r, int c) { return g.sites[static_cast<std::size_t>(r) * cols + c]; };

  for (int r = 0; r < rows; ++r)
    for (int c = 0; c + 1 < cols; ++c)
      g.bonds.push_back({site(r, c), site(r, c + 1), j_nn, BondKind::nn});
  for (int r = 0; r + 1 < rows; ++r)
    for (int c = 0; c < cols; ++c)
      g.bonds.push_back({site(r, c), site(r + 1, c), j_nn, BondKind::nn});
  for (int r = 0; r + 1 < rows; ++r)
    for (int c = 0; c + 1 < cols; ++c) {
      g.bonds.push_back({site(r, c), site(r + 1, c + 1), j_nnn, BondKind::nnn});
      g.bonds.push_back({site(r, c + 1), site(r + 1, c), j_nnn, BondKind::nnn});
    }
  return g;
}

inline CouplingGraph build_chain(int n, double j_nn = default_j_nn_mhz) {
  if (n < 2) throw std::invalid_argument("chain needs at least two sites");
  return build_rectangle(1, n, j_nn, 0.0);
}

// Effective exchange between two qubits mediated by a tunable coupler:
// the direct coupling plus the virtual-exchange term through the coupler,
//   g_eff = g12 + (g1c * g2c / 2) * (1/(w1 - wc) + 1/(w2 - wc)).
// All arguments in MHz; qubit-coupler resonance is rejected.
inline double effective_coupling(double g12, double g1c, double g2c, double w1,
                                 double w2, double wc) {
  if (w1 == wc || w2 == wc)
    throw std::domain_error("qubit degenerate with coupler: virtual exchange diverges");
  return g12 + 0.5 * g1c * g2c * (1.0 / (w1 - wc) + 1.0 / (w2 - wc));
}

// Adds an independent uniform draw from [-delta, delta] to every bond
// strength, in bond order, from a SplitMix64 stream seeded with `seed`.
// Models device-to-device coupler spread.
inline CouplingGraph perturb_bonds(CouplingGraph g, double delta, std::uint64_t seed) {
  if (delta < 0.0) throw std::invalid_argument("perturbation window must be non-negative");
  SplitMix64 rng(seed);
  for (Bond& b : g.bonds) b.strength_mhz += rng.uniform(-delta, delta);
  return g;
}

inline bool is_connected(const CouplingGraph& g) {
  if (g.sites.empty()) return true;
  detail::check_bond_endpoints(g);
  std::vector<std::vector<int>> adj(g.sites.size());
  for (const Bond& b : g.bonds) {
    adj[b.a.index].push_back(b.b.index);
    adj[b.b.index].push_back(b.a.index);
  }
  std::vector<char> seen(g.sites.size(), 0);
  std::queue<int> frontier;
  frontier.push(0);
  seen[0] = 1;
  std::size_t reached = 1;
  while (!frontier.empty()) {
    int v = frontier.front();
    frontier.pop();
    for (int w : adj[v])
      if (!seen[w]) {
        seen[w] = 1;
        ++reached;
        frontier.push(w);
      }
  }
  return reached == g.sites.size();
}

}  // namespace mbl
