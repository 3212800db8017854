#pragma once

#include <cstdint>
#include <string>

#include "vo2lgm/inference.hpp"

namespace vo2lgm {

/// A fit plus the provenance of the run that produced it. The bundle keeps the
/// effect-slot conditionals only; O-U states are recomputed from the training
/// data when needed (see rehydrate).
struct FitBundle {
  FitResult fit;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string config;  // canonical key=value lines
};

inline constexpr const char* kBundleFormat = "vo2lgm-fit";
inline constexpr int kBundleVersion = 1;

void save_bundle(const FitBundle& bundle, const std::string& path);
FitBundle load_bundle(const std::string& path);

std::string bundle_to_json(const FitBundle& bundle);
FitBundle bundle_from_json(const std::string& text);

}  // namespace vo2lgm
