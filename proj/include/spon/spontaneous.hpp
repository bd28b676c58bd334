#pragma once

#include "spon/artifact.hpp"
#include "spon/model.hpp"
#include "spon/sparsify.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace spon {

enum class SponState { Unfolded, Bias, Folded };

std::string_view spon_state_name(SponState s);

struct ResidualStats {
    double loss_zero = 0.0;  // mean ||e||^2
    double loss_star = 0.0;  // mean ||e - b*||^2
    double bias_norm2 = 0.0; // ||b*||^2
    std::uint64_t tokens = 0;
};

struct DistillCheckpoint {
    std::size_t step = 0;
    double heldout_kl = 0.0;
    double best_kl = 0.0;
};

struct SponMetadata {
    std::size_t steps = 0;
    double initial_kl = 0.0;  // held-out KL at alpha = 0
    double final_kl = 0.0;    // held-out KL of the returned parameters
    std::string kl_direction = "KL(dense || spon)";
    double target = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t num_tokens = 0;
    std::string profile_id;
    float lr = 0.0f;
    std::size_t batch = 0;
    std::size_t block = 0;
    std::vector<DistillCheckpoint> log;
    SiteMap<ResidualStats> residual;
};

struct SpontaneousParams {
    std::string method;  // "residual_mean", "kl_distill" or "manual"
    SponState state = SponState::Unfolded;
    SiteMap<Tensor> alpha;  // [d_in(site)] while unfolded
    SiteMap<Tensor> bias;   // [d_out(site)] in bias state
    SponMetadata metadata;

    std::vector<LinearSite> sites() const;
};

// Zero alpha at every site.
SpontaneousParams zero_params(const ModelConfig& config, std::span<const LinearSite> sites);

// Every profiled site computes W mask(x) + W alpha (or + b in bias state).
Tensor spon_forward(const Model& model, const TokenBatch& batch, const SparsityProfile& profile,
                    const SpontaneousParams& params, MaskCounter* counter = nullptr);
LogitsFn spon_logits(const Model& model, const SparsityProfile& profile, const SpontaneousParams& params,
                     MaskCounter* counter = nullptr);

// Row-major double matrix of per-token output residuals e = W x - W mask(x).
struct ResidualMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> data;
};

ResidualMatrix site_residuals(const Tensor& input, const Tensor& weight, float tau);
std::vector<double> residual_mean(const ResidualMatrix& e);
// Mean over rows of ||e_i - b||^2.
double residual_loss(const ResidualMatrix& e, std::span<const double> b);

// Sets each site's bias to the mean output residual over the calibration set.
// Sites are processed in forward order within one pass, so each later site is
// calibrated on activations that already carry the earlier corrections.
SpontaneousParams calibrate_residual_mean(const Model& model, std::span<const Token> calib_tokens,
                                          const SparsityProfile& profile, std::span<const LinearSite> sites);

struct DistillHyper {
    float lr = 1e-5f;
    std::size_t steps = 200;
    std::size_t batch = 8;
    std::size_t block = 128;  // clamped to the model's context length
    std::size_t log_every = 50;
    double heldout_fraction = 0.1;
    std::uint64_t seed = 0;
};

// Trains alpha only, from zero, to minimise KL(dense || sparse + alpha). The
// last heldout_fraction of calib_tokens scores checkpoints; the best-scoring
// checkpoint (possibly alpha = 0) is returned.
SpontaneousParams calibrate_kl_distill(const Model& dense, std::span<const Token> calib_tokens,
                                       const SparsityProfile& profile, std::span<const LinearSite> sites,
                                       const DistillHyper& hyper);

// Mean over rows of KL(softmax(p) || softmax(q)), in double.
double kl_divergence(const Tensor& p_logits, const Tensor& q_logits);

// Mean held-out KL of `student` against the dense model over non-overlapping
// windows of `block` tokens.
double mean_kl(const Model& dense, const LogitsFn& student, std::span<const Token> tokens, std::size_t block);

// bias += W alpha (or += b). Marks params folded and records `fingerprint` in
// the model. Throws FormatError when params or fingerprint were already folded.
void fold(Model& model, SpontaneousParams& params, const std::string& fingerprint);

Json params_to_json(const SpontaneousParams& params);
SpontaneousParams params_from_json(const Json& j);
void check_params(const SpontaneousParams& params, const ModelConfig& config);

}  // namespace spon
