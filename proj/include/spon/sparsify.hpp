#pragma once

#include "spon/artifact.hpp"
#include "spon/model.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace spon {

struct CalibrationMeta {
    std::uint64_t num_tokens = 0;
    std::string corpus_id;  // fingerprint of the calibration tokens
    std::uint64_t seed = 0;
};

struct SparsityProfile {
    double target = 0.0;
    SiteMap<float> thresholds;
    CalibrationMeta metadata;
    // Masked fraction per site measured on the calibration set while calibrating.
    SiteMap<double> achieved;

    std::vector<LinearSite> sites() const;
};

inline constexpr std::size_t kMinCalibrationTokens = 1024;

// Calibration windows: floor(n / context_len) non-overlapping rows of context_len tokens.
TokenBatch calibration_batch(std::span<const Token> tokens, std::size_t context_len);

// Smallest tau whose non-strict mask |x| <= tau covers at least ceil(target * n)
// of `magnitudes`. Target 0 gives 0. Reorders `magnitudes`.
float quantile_threshold(std::vector<float>& magnitudes, double target);

// One pass over the calibration set in forward order; each site sees inputs
// already sparsified by the sites upstream of it.
SparsityProfile calibrate_thresholds(const Model& model, std::span<const Token> calib_tokens,
                                     std::span<const LinearSite> sites, double target, std::uint64_t seed = 0);

// out_i = x_i if |x_i| > tau else 0.
Tensor apply_mask(const Tensor& x, float tau, std::size_t* masked = nullptr);

Tensor sparse_forward(const Model& model, const TokenBatch& batch, const SparsityProfile& profile,
                      MaskCounter* counter = nullptr);
LogitsFn sparse_logits(const Model& model, const SparsityProfile& profile, MaskCounter* counter = nullptr);

struct SparsityMeasurement {
    SiteMap<double> per_site;
    double overall = 0.0;
};

SparsityMeasurement measure_sparsity(const MaskCounter& counter);

Json profile_to_json(const SparsityProfile& profile);
SparsityProfile profile_from_json(const Json& j);
// Throws FormatError when a site does not exist in `config`.
void check_profile(const SparsityProfile& profile, const ModelConfig& config);

}  // namespace spon
