#pragma once

// Fingerprint of the discrete branch decisions taken by piecewise-smooth
// operations (leaky_relu sign, bilinear cell and clamp state). Two forward
// passes with equal fingerprints ran through the same smooth piece, which the
// finite-difference checker uses to keep its probe interval off the kinks.
// Disabled by default; costs one flag test per operation when off.

#include <cstdint>

namespace mddn::trace {

inline thread_local bool enabled = false;
inline thread_local std::uint64_t fingerprint = 0;

inline void mix(std::uint64_t v) {
  fingerprint = (fingerprint ^ (v + 0x9e3779b97f4a7c15ULL)) * 0x100000001b3ULL;
}

}  // namespace mddn::trace
