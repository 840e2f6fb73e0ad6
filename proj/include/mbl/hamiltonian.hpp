#pragma once

// Sparse XY Hamiltonian in a fixed-excitation sector.
//
//   H = sum_bonds (J_ij/2)(sx sx + sy sy) + sum_i h_i n_i
//
// In the configuration basis this is real symmetric: diagonal entry
// sum of h_i over occupied sites, off-diagonal entry J_ij between the two
// configurations that swap an excitation across bond (i,j). Energies are
// plain frequencies in MHz (see units.hpp).
//
// Storage is CSR with a twist: off-diagonal values repeat a small set of
// bond strengths (two for the standard lattices), so each entry packs a
// strength-class id into the high bits of its 32-bit column word and the
// values live in a tiny table. That is 4 bytes per entry instead of 12,
// which matters because the matvec is memory bound. Graphs with more
// distinct strengths than the spare bits can hold fall back to a separate
// 16-bit class array per entry.

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <complex>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <utility>
#include <vector>

#include "mbl/basis.hpp"
#include "mbl/disorder.hpp"
#include "mbl/errors.hpp"
#include "mbl/lattice.hpp"

namespace mbl {

struct SparseHamiltonian {
  std::shared_ptr<const SectorBasis> basis;
  std::shared_ptr<const CouplingGraph> graph;
  std::shared_ptr<const DisorderRealization> realization;

  std::vector<std::uint64_t> row_start;  // dim+1, offsets into entries
  std::vector<std::uint32_t> entries;    // (class << column_bits) | column
  std::vector<std::uint16_t> wide_class; // per-entry class when packing failed
  std::vector<double> strength_mhz;      // one value per strength class
  std::vector<double> diag_mhz;          // explicit diagonal, one per row
  int column_bits = 1;                   // low bits of an entry holding the column

  // Gershgorin interval: every eigenvalue lies in [bound_lo, bound_hi].
  double bound_lo_mhz = 0.0;
  double bound_hi_mhz = 0.0;

  std::size_t dim() const noexcept { return diag_mhz.size(); }
  std::uint64_t nnz_off_diagonal() const noexcept { return entries.size(); }

  std::uint32_t column_of(std::uint64_t k) const noexcept {
    return wide_class.empty() ? (entries[k] & ((1u << column_bits) - 1u)) : entries[k];
  }
  double strength_of(std::uint64_t k) const noexcept {
    return strength_mhz[wide_class.empty() ? (entries[k] >> column_bits)
                                           : wide_class[k]];
  }

  double trace_mhz() const {
    return std::accumulate(diag_mhz.begin(), diag_mhz.end(), 0.0);
  }

  // y = H x. Fixed row-major traversal; entries within a row are visited in
  // ascending column order, so the result is deterministic.
  template <class Scalar>
  void apply_raw(const Scalar* x, Scalar* y) const noexcept {
    const std::size_t n = dim();
    const std::uint64_t* __restrict rs = row_start.data();
    const std::uint32_t* __restrict es = entries.data();
    const double* __restrict js = strength_mhz.data();
    const double* __restrict ds = diag_mhz.data();
    if (wide_class.empty()) {
      const std::uint32_t mask = (1u << column_bits) - 1u;
      const int bits = column_bits;
      for (std::size_t r = 0; r < n; ++r) {
        Scalar acc = ds[r] * x[r];
        for (std::uint64_t k = rs[r]; k < rs[r + 1]; ++k) {
          const std::uint32_t e = es[k];
          acc += js[e >> bits] * x[e & mask];
        }
        y[r] = acc;
      }
    } else {
      const std::uint16_t* __restrict cls = wide_class.data();
      for (std::size_t r = 0; r < n; ++r) {
        Scalar acc = ds[r] * x[r];
        for (std::uint64_t k = rs[r]; k < rs[r + 1]; ++k)
          acc += js[cls[k]] * x[es[k]];
        y[r] = acc;
      }
    }
  }

  void check_length(Eigen::Index n) const {
    if (static_cast<std::size_t>(n) != dim())
      throw std::invalid_argument("vector length does not match Hamiltonian dimension");
  }

  void apply(Eigen::Ref<const Eigen::VectorXd> x, Eigen::Ref<Eigen::VectorXd> y) const {
    check_length(x.size());
    check_length(y.size());
    apply_raw(x.data(), y.data());
  }

  void apply(Eigen::Ref<const Eigen::VectorXcd> x, Eigen::Ref<Eigen::VectorXcd> y) const {
    check_length(x.size());
    check_length(y.size());
    apply_raw(x.data(), y.data());
  }

  Eigen::VectorXd operator*(const Eigen::VectorXd& x) const {
    Eigen::VectorXd y(x.size());
    apply(x, y);
    return y;
  }
};

inline SparseHamiltonian build_hamiltonian(const CouplingGraph& graph,
                                           const DisorderRealization& realization,
                                           int n_excitations) {
  const int L = graph.n_sites();
  if (static_cast<int>(realization.potentials_mhz.size()) != L)
    throw std::invalid_argument("disorder realization length does not match site count");
  if (graph.bonds.size() > 0xffff)
    throw CapacityError("more than 65535 bonds not supported by the entry encoding");
  detail::check_bond_endpoints(graph);

  SparseHamiltonian h;
  h.basis = std::make_shared<SectorBasis>(enumerate_sector(L, n_excitations));
  h.graph = std::make_shared<CouplingGraph>(graph);
  h.realization = std::make_shared<DisorderRealization>(realization);

  // Strength classes: one table slot per distinct bond value, first-seen order.
  const std::size_t n_bonds = graph.bonds.size();
  std::vector<std::uint32_t> bond_masks;
  std::vector<std::uint16_t> bond_class;
  bond_masks.reserve(n_bonds);
  bond_class.reserve(n_bonds);
  {
    std::vector<std::uint64_t> seen;
    seen.reserve(n_bonds);
    std::map<double, std::uint16_t> class_of;
    for (const Bond& b : graph.bonds) {
      const std::uint32_t i = static_cast<std::uint32_t>(b.a.index);
      const std::uint32_t j = static_cast<std::uint32_t>(b.b.index);
      const std::uint64_t key =
          (std::uint64_t{std::min(i, j)} << 32) | std::uint64_t{std::max(i, j)};
      seen.push_back(key);
      bond_masks.push_back((1u << i) | (1u << j));
      auto [it, fresh] = class_of.try_emplace(
          b.strength_mhz, static_cast<std::uint16_t>(h.strength_mhz.size()));
      if (fresh) h.strength_mhz.push_back(b.strength_mhz);
      bond_class.push_back(it->second);
    }
    std::sort(seen.begin(), seen.end());
    if (std::adjacent_find(seen.begin(), seen.end()) != seen.end())
      throw std::invalid_argument("duplicate bond in coupling graph");
  }

  const SectorBasis& basis = *h.basis;
  const std::size_t dim = basis.dim();

  h.column_bits =
      std::max(1, static_cast<int>(std::bit_width(dim > 0 ? dim - 1 : std::size_t{0})));
  const bool packed =
      h.column_bits < 32 &&
      h.strength_mhz.size() <= (std::uint64_t{1} << (32 - h.column_bits));

  h.row_start.assign(dim + 1, 0);
  for (std::size_t r = 0; r < dim; ++r) {
    const std::uint32_t s = basis.states[r];
    std::uint64_t count = 0;
    for (std::size_t b = 0; b < n_bonds; ++b) {
      const std::uint32_t overlap = s & bond_masks[b];
      count += (overlap != 0 && overlap != bond_masks[b]);
    }
    h.row_start[r + 1] = count;
  }
  for (std::size_t r = 0; r < dim; ++r) h.row_start[r + 1] += h.row_start[r];

  h.entries.resize(h.row_start[dim]);
  if (!packed) h.wide_class.resize(h.row_start[dim]);
  h.diag_mhz.resize(dim);

  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();

  std::vector<std::pair<std::uint32_t, std::uint16_t>> scratch(n_bonds);
  const double* pot = realization.potentials_mhz.data();
  for (std::size_t r = 0; r < dim; ++r) {
    const std::uint32_t s = basis.states[r];

    double e = 0.0;
    for (std::uint32_t occ = s; occ; occ &= occ - 1) e += pot[std::countr_zero(occ)];
    h.diag_mhz[r] = e;

    double radius = 0.0;
    std::size_t n_here = 0;
    for (std::size_t b = 0; b < n_bonds; ++b) {
      const std::uint32_t m = bond_masks[b];
      const std::uint32_t overlap = s & m;
      if (overlap != 0 && overlap != m) {
        scratch[n_here++] = {basis.rank[s ^ m], bond_class[b]};
        radius += std::abs(h.strength_mhz[bond_class[b]]);
      }
    }
    lo = std::min(lo, e - radius);
    hi = std::max(hi, e + radius);

    std::sort(scratch.begin(), scratch.begin() + n_here);
    std::uint64_t k = h.row_start[r];
    if (packed) {
      for (std::size_t t = 0; t < n_here; ++t, ++k)
        h.entries[k] = (std::uint32_t{scratch[t].second} << h.column_bits) |
                       scratch[t].first;
    } else {
      for (std::size_t t = 0; t < n_here; ++t, ++k) {
        h.entries[k] = scratch[t].first;
        h.wide_class[k] = scratch[t].second;
      }
    }
  }
  h.bound_lo_mhz = lo;
  h.bound_hi_mhz = hi;
  return h;
}

// Materializes the full matrix. Intended for small sectors (dense
// diagonalization paths and tests); memory is dim^2 doubles.
inline Eigen::MatrixXd to_dense(const SparseHamiltonian& h) {
  const auto n = static_cast<Eigen::Index>(h.dim());
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index r = 0; r < n; ++r) {
    m(r, r) = h.diag_mhz[r];
    for (std::uint64_t k = h.row_start[r]; k < h.row_start[r + 1]; ++k)
      m(r, h.column_of(k)) = h.strength_of(k);
  }
  return m;
}

}  // namespace mbl
