#pragma once

// Single entry point for every merge recipe.

#include <span>

#include "consolidate/calibration.hpp"
#include "consolidate/merge/dispatch.hpp"

namespace consolidate {

/// Runs `recipe` over the experts. Data-dependent methods take either one
/// calibration set shared by all experts or one per expert; AdaMerging pools
/// every set it is given.
inline MergedModel merge(const MergeRecipe& recipe, const Checkpoint& base, std::span<const Checkpoint> experts,
                         std::span<const CalibrationSet> calibration = {}, unsigned threads = 1) {
    switch (recipe.method) {
        case Method::regmean: return regmean_merge(recipe, base, experts, calibration);
        case Method::adamerging: return adamerging_merge(recipe, base, experts, calibration);
        case Method::cat: return cat_merge(recipe, base, experts, calibration);
        default: return merge_data_free(recipe, base, experts, threads);
    }
}

}  // namespace consolidate
