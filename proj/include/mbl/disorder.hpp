#pragma once

// On-site disorder: independent uniform potentials on [-W, W] MHz.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mbl/rng.hpp"

namespace mbl {

struct DisorderRealization {
  double w_mhz = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> potentials_mhz;  // one per site, in [-w_mhz, w_mhz]
};

inline DisorderRealization sample_disorder(int n_sites, double w_mhz,
                                           std::uint64_t seed) {
  if (n_sites < 1) throw std::invalid_argument("need at least one site");
  if (w_mhz < 0.0) throw std::invalid_argument("disorder width must be non-negative");

  DisorderRealization d;
  d.w_mhz = w_mhz;
  d.seed = seed;
  d.potentials_mhz.resize(n_sites);
  SplitMix64 rng(seed);
  for (double& h : d.potentials_mhz) h = rng.uniform(-w_mhz, w_mhz);
  return d;
}

}  // namespace mbl
