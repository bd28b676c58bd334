#include "spon/sparsify.hpp"

#include "spon/error.hpp"
#include "spon/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace spon {

std::vector<LinearSite> SparsityProfile::sites() const {
    std::vector<LinearSite> out;
    for (const auto& [s, tau] : thresholds) out.push_back(s);
    return out;
}

TokenBatch calibration_batch(std::span<const Token> tokens, std::size_t context_len) {
    const std::size_t rows = tokens.size() / context_len;
    if (rows == 0) throw InputError("calibration set shorter than one context window");
    TokenBatch b;
    b.batch = rows;
    b.seq = context_len;
    b.ids.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(rows * context_len));
    return b;
}

float quantile_threshold(std::vector<float>& magnitudes, double target) {
    if (!(target >= 0.0 && target < 1.0)) throw InputError("target sparsity must lie in [0, 1)");
    const std::size_t n = magnitudes.size();
    if (n == 0) throw InputError("no activations to calibrate on");
    // Guard against target * n landing a hair above an integer.
    const auto k = static_cast<std::size_t>(std::ceil(target * static_cast<double>(n) - 1e-9));
    if (k == 0) return 0.0f;
    auto kth = magnitudes.begin() + static_cast<std::ptrdiff_t>(k - 1);
    std::nth_element(magnitudes.begin(), kth, magnitudes.end());
    return *kth;
}

namespace {

class ThresholdCalibrator final : public SiteObserver {
public:
    ThresholdCalibrator(SiteMap<float>& thresholds, double target) : thresholds_(thresholds), target_(target) {}

    void on_site_input(const LinearSite& site, const Tensor& input) override {
        if (!thresholds_.contains(site)) return;
        std::vector<float> mags(input.numel());
        for (std::size_t i = 0; i < mags.size(); ++i) mags[i] = std::fabs(input[i]);
        thresholds_[site] = quantile_threshold(mags, target_);
    }

private:
    SiteMap<float>& thresholds_;
    double target_;
};

}  // namespace

SparsityProfile calibrate_thresholds(const Model& model, std::span<const Token> calib_tokens,
                                     std::span<const LinearSite> sites, double target, std::uint64_t seed) {
    if (sites.empty()) throw InputError("no sites to calibrate");
    if (calib_tokens.size() < kMinCalibrationTokens)
        throw InputError("calibration needs at least " + std::to_string(kMinCalibrationTokens) + " tokens, got " +
                         std::to_string(calib_tokens.size()));
    if (!(target >= 0.0 && target < 1.0)) throw InputError("target sparsity must lie in [0, 1)");
    for (const LinearSite& s : sites) validate_site(model.config, s);

    SparsityProfile profile;
    profile.target = target;
    for (const LinearSite& s : sites) profile.thresholds[s] = std::numeric_limits<float>::infinity();

    const TokenBatch batch = calibration_batch(calib_tokens, model.config.context_len);
    ThresholdCalibrator calibrator(profile.thresholds, target);
    MaskCounter counter;
    ForwardOptions opt;
    opt.thresholds = &profile.thresholds;
    opt.observer = &calibrator;
    opt.counter = &counter;
    forward(model, batch, opt);

    profile.achieved = measure_sparsity(counter).per_site;
    profile.metadata.num_tokens = batch.ids.size();
    profile.metadata.corpus_id = fingerprint(std::string_view(reinterpret_cast<const char*>(batch.ids.data()),
                                                              batch.ids.size() * sizeof(Token)));
    profile.metadata.seed = seed;
    return profile;
}

Tensor apply_mask(const Tensor& x, float tau, std::size_t* masked) {
    if (!(tau >= 0.0f)) throw InputError("threshold must be non-negative");
    Tensor out(x.shape());
    const std::size_t n = kernels::active().threshold_mask(x.ptr(), x.numel(), tau, out.mutable_ptr(), nullptr);
    if (masked) *masked = n;
    return out;
}

Tensor sparse_forward(const Model& model, const TokenBatch& batch, const SparsityProfile& profile,
                      MaskCounter* counter) {
    check_profile(profile, model.config);
    ForwardOptions opt;
    opt.thresholds = &profile.thresholds;
    opt.counter = counter;
    return forward(model, batch, opt);
}

LogitsFn sparse_logits(const Model& model, const SparsityProfile& profile, MaskCounter* counter) {
    check_profile(profile, model.config);
    return [&model, &profile, counter](const TokenBatch& b) { return sparse_forward(model, b, profile, counter); };
}

SparsityMeasurement measure_sparsity(const MaskCounter& counter) {
    SparsityMeasurement m;
    for (const auto& [site, total] : counter.total) m.per_site[site] = counter.fraction(site);
    m.overall = counter.overall();
    return m;
}

Json profile_to_json(const SparsityProfile& p) {
    Json j = make_artifact("sparsity_profile");
    j["target"] = p.target;
    Json th = Json::array();
    for (const auto& [site, tau] : p.thresholds) {
        Json e = site_to_json(site);
        e["tau"] = tau;
        if (auto it = p.achieved.find(site); it != p.achieved.end()) e["achieved"] = it->second;
        th.push_back(e);
    }
    j["thresholds"] = th;
    j["metadata"] = {{"num_tokens", p.metadata.num_tokens},
                     {"corpus_id", p.metadata.corpus_id},
                     {"seed", p.metadata.seed}};
    return j;
}

SparsityProfile profile_from_json(const Json& j) {
    check_artifact(j, "sparsity_profile");
    SparsityProfile p;
    try {
        p.target = j.at("target").get<double>();
        for (const Json& e : j.at("thresholds")) {
            const LinearSite s = site_from_json(e);
            const float tau = e.at("tau").get<float>();
            if (!std::isfinite(tau) || tau < 0.0f) throw FormatError("threshold for " + s.name() + " is invalid");
            p.thresholds[s] = tau;
            if (e.contains("achieved")) p.achieved[s] = e["achieved"].get<double>();
        }
        const Json& m = j.at("metadata");
        p.metadata.num_tokens = m.at("num_tokens").get<std::uint64_t>();
        p.metadata.corpus_id = m.at("corpus_id").get<std::string>();
        p.metadata.seed = m.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed sparsity profile: ") + e.what());
    }
    if (!(p.target >= 0.0 && p.target < 1.0)) throw FormatError("profile target outside [0, 1)");
    return p;
}

void check_profile(const SparsityProfile& profile, const ModelConfig& config) {
    for (const auto& [site, tau] : profile.thresholds) {
        if (site.layer >= config.n_layers)
            throw FormatError("profile site " + site.name() + " does not exist in a " +
                              std::to_string(config.n_layers) + "-layer model");
        if (!(tau >= 0.0f)) throw FormatError("profile threshold for " + site.name() + " is invalid");
    }
}

}  // namespace spon
