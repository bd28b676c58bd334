#pragma once

#include "spon/artifact.hpp"
#include "spon/model.hpp"
#include "spon/sparsify.hpp"
#include "spon/spontaneous.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace spon {

// exp(mean next-token NLL) over non-overlapping blocks of `context` tokens.
double perplexity(const LogitsFn& fn, std::span<const Token> tokens, std::size_t context);

struct ShiftMetrics {
    double mean_l2 = 0.0;         // mean per-token ||h_dense - h_other||
    double centroid_shift = 0.0;  // ||mean(h_dense) - mean(h_other)||
    double variance_ratio = 1.0;  // total variance of other / total variance of dense
};

// Both captures must come from the same prompts and positions.
ShiftMetrics repr_shift(const Tensor& dense_hidden, const Tensor& other_hidden);

struct Pca2 {
    Tensor coords;              // [n, 2]
    double explained[2] = {0, 0};  // variance along each axis
};

// Top two principal components by power iteration with deflation.
Pca2 pca2(const Tensor& points, std::uint64_t seed);

// `count` prompts of `length` tokens: non-overlapping windows of `tokens`
// chosen by a seeded shuffle, returned in corpus order as one batch.
TokenBatch prompt_set(std::span<const Token> tokens, std::size_t count, std::size_t length, std::uint64_t seed);

struct Fingerprints {
    std::string config;
    std::string profile;
    std::string params;
};

struct EvalReport {
    std::string mode;  // dense | sparse | spon
    std::string label;
    double perplexity = 0.0;
    double mean_nll = 0.0;
    std::uint64_t tokens = 0;
    double kl = 0.0;        // mean token KL against the dense reference
    double sparsity = 0.0;  // achieved masked fraction over all profiled sites
    std::optional<ShiftMetrics> shift;
    Fingerprints fingerprints;
};

struct EvalSetup {
    const Model* model = nullptr;             // possibly carrying folded biases
    const Model* reference = nullptr;         // dense teacher; defaults to model
    const SparsityProfile* profile = nullptr;
    const SpontaneousParams* params = nullptr;
};

// Forward options equivalent to the setup (thresholds plus alpha or bias).
ForwardOptions eval_options(const EvalSetup& setup);
std::string eval_mode(const EvalSetup& setup);

// Perplexity and KL on `tokens`; shift metrics on `prompts` when given.
EvalReport evaluate(const EvalSetup& setup, std::span<const Token> tokens, const TokenBatch* prompts = nullptr);

// Final residual stream for every prompt token, [batch*seq, d_model].
Tensor capture_hidden(const Model& model, const TokenBatch& prompts, const ForwardOptions& options = {});

struct AblationEntry {
    std::string descriptor;
    std::vector<LinearSite> sites;
    std::optional<std::size_t> layer;
    EvalReport report;
};

struct AblationResult {
    std::string kind;  // "sites" or "layers"
    double target = 0.0;
    std::uint64_t seed = 0;
    std::string corpus_id;
    std::vector<AblationEntry> entries;
};

struct SiteSet {
    std::string name;
    std::vector<SiteKind> kinds;
};

// kv, up_gate, q_down, o_down, down, all, attention, mlp.
std::vector<SiteSet> default_site_sets();

struct AblationSetup {
    const Model* dense = nullptr;
    std::span<const Token> calib_tokens;
    std::span<const Token> eval_tokens;
    const SparsityProfile* profile = nullptr;
    DistillHyper hyper;
};

AblationResult ablate_sites(const AblationSetup& setup, std::span<const SiteSet> sets);
// down_proj at one layer at a time.
AblationResult ablate_layers(const AblationSetup& setup);

Json shift_to_json(const ShiftMetrics& s);
Json report_to_json(const EvalReport& r);
EvalReport report_from_json(const Json& j);
Json ablation_to_json(const AblationResult& r);

// CSV with a header row; doubles printed with 17 significant digits.
std::string report_csv(std::span<const EvalReport> reports);
std::string ablation_csv(const AblationResult& r);
std::string format_double(double v);

}  // namespace spon
