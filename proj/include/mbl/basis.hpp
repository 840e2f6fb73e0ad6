#pragma once

// Fixed-excitation-number configuration basis.
//
// The XY exchange conserves total excitation number, so all computation runs
// inside one sector: the bitstrings of length n_sites with exactly
// n_excitations set bits, ordered as ascending integers. Site k occupies
// bit k. Rank lookup is a dense table over all 2^L configurations, which caps
// the supported system size at 30 sites.

#include <bit>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mbl/errors.hpp"

namespace mbl {

inline constexpr int max_sites = 30;

inline std::uint64_t binomial(int n, int k) {
  if (k < 0 || k > n) return 0;
  if (k > n - k) k = n - k;
  std::uint64_t r = 1;
  for (int i = 1; i <= k; ++i) {
    // Exact at every step: r is divisible by i after multiplying n-k+i.
    r = r * static_cast<std::uint64_t>(n - k + i) / static_cast<std::uint64_t>(i);
  }
  return r;
}

struct SectorBasis {
  static constexpr std::uint32_t npos = 0xffffffffu;

  int n_sites = 0;
  int n_excitations = 0;
  std::vector<std::uint32_t> states;  // ascending, popcount == n_excitations
  std::vector<std::uint32_t> rank;    // 2^n_sites entries, npos outside sector

  std::size_t dim() const noexcept { return states.size(); }

  std::uint32_t index_of(std::uint32_t config) const {
    const std::uint32_t r = rank[config];
    if (r == npos) throw std::invalid_argument("configuration outside this sector");
    return r;
  }
};

inline SectorBasis enumerate_sector(int n_sites, int n_excitations) {
  if (n_sites < 1) throw std::invalid_argument("need at least one site");
  if (n_sites > max_sites)
    throw CapacityError("sector basis supports at most 30 sites (dense rank table)");
  if (n_excitations < 0 || n_excitations > n_sites)
    throw std::invalid_argument("excitation count outside [0, n_sites]");

  SectorBasis b;
  b.n_sites = n_sites;
  b.n_excitations = n_excitations;
  b.states.reserve(binomial(n_sites, n_excitations));
  b.rank.assign(std::size_t{1} << n_sites, SectorBasis::npos);

  if (n_excitations == 0) {
    b.states.push_back(0);
    b.rank[0] = 0;
    return b;
  }

  // Gosper's hack: steps through the n-bit subsets in increasing order.
  const std::uint32_t limit = (n_sites == 32) ? 0 : (std::uint32_t{1} << n_sites);
  std::uint32_t v = (std::uint32_t{1} << n_excitations) - 1;
  while (v < limit) {
    b.rank[v] = static_cast<std::uint32_t>(b.states.size());
    b.states.push_back(v);
    const std::uint32_t c = v & -v;
    const std::uint32_t r = v + c;
    if (r == 0) break;  // wrapped past the top subset
    v = (((r ^ v) >> 2) / c) | r;
  }
  return b;
}

}  // namespace mbl
