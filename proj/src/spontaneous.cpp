#include "spon/spontaneous.hpp"

#include "spon/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace spon {

std::string_view spon_state_name(SponState s) {
    switch (s) {
        case SponState::Unfolded: return "unfolded";
        case SponState::Bias: return "bias";
        case SponState::Folded: return "folded";
    }
    return "unknown";
}

namespace {

SponState parse_state(const std::string& s) {
    if (s == "unfolded") return SponState::Unfolded;
    if (s == "bias") return SponState::Bias;
    if (s == "folded") return SponState::Folded;
    throw FormatError("unknown parameter state '" + s + "'");
}

struct KlSum {
    double total = 0.0;
    std::size_t rows = 0;
};

KlSum kl_sum(const Tensor& p_logits, const Tensor& q_logits) {
    if (p_logits.shape() != q_logits.shape())
        throw DimensionError("kl_divergence: shapes " + shape_string(p_logits.shape()) + " and " +
                             shape_string(q_logits.shape()) + " differ");
    const std::size_t v = p_logits.cols();
    const std::size_t rows = v ? p_logits.numel() / v : 0;
    KlSum out;
    out.rows = rows;
    std::vector<double> lp(v), lq(v);
    auto log_softmax = [v](const float* x, std::vector<double>& o) {
        double mx = x[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(x[j]));
        double s = 0.0;
        for (std::size_t j = 0; j < v; ++j) s += std::exp(static_cast<double>(x[j]) - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < v; ++j) o[j] = static_cast<double>(x[j]) - lse;
    };
    for (std::size_t r = 0; r < rows; ++r) {
        log_softmax(p_logits.ptr() + r * v, lp);
        log_softmax(q_logits.ptr() + r * v, lq);
        double kl = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            const double p = std::exp(lp[j]);
            if (p > 0.0) kl += p * (lp[j] - lq[j]);
        }
        out.total += kl;
    }
    return out;
}

void require_tokens(std::span<const Token> tokens) {
    if (tokens.size() < kMinCalibrationTokens)
        throw InputError("calibration needs at least " + std::to_string(kMinCalibrationTokens) + " tokens, got " +
                         std::to_string(tokens.size()));
}

}  // namespace

std::vector<LinearSite> SpontaneousParams::sites() const {
    std::vector<LinearSite> out;
    const SiteMap<Tensor>& m = state == SponState::Bias ? bias : alpha;
    for (const auto& [s, t] : m) out.push_back(s);
    return out;
}

SpontaneousParams zero_params(const ModelConfig& config, std::span<const LinearSite> sites) {
    SpontaneousParams p;
    p.method = "manual";
    for (const LinearSite& s : sites) {
        validate_site(config, s);
        p.alpha[s] = Tensor({site_in_dim(config, s.kind)});
    }
    return p;
}

Tensor spon_forward(const Model& model, const TokenBatch& batch, const SparsityProfile& profile,
                    const SpontaneousParams& params, MaskCounter* counter) {
    check_profile(profile, model.config);
    check_params(params, model.config);
    ForwardOptions opt;
    opt.thresholds = &profile.thresholds;
    opt.counter = counter;
    if (params.state == SponState::Unfolded) opt.alpha = &params.alpha;
    if (params.state == SponState::Bias) opt.site_bias = &params.bias;
    return forward(model, batch, opt);
}

LogitsFn spon_logits(const Model& model, const SparsityProfile& profile, const SpontaneousParams& params,
                     MaskCounter* counter) {
    return [&model, &profile, &params, counter](const TokenBatch& b) {
        return spon_forward(model, b, profile, params, counter);
    };
}

ResidualMatrix site_residuals(const Tensor& input, const Tensor& weight, float tau) {
    if (input.cols() != weight.dim(0))
        throw DimensionError("site_residuals: input width " + std::to_string(input.cols()) + " vs weight " +
                             shape_string(weight.shape()));
    const std::size_t n = input.rows(), din = weight.dim(0), dout = weight.dim(1);
    ResidualMatrix e;
    e.rows = n;
    e.cols = dout;
    e.data.assign(n * dout, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double* row = e.data.data() + i * dout;
        for (std::size_t k = 0; k < din; ++k) {
            const float x = input[i * din + k];
            if (std::fabs(x) > tau) continue;  // kept entries leave no residual
            const float* w = weight.ptr() + k * dout;
            for (std::size_t j = 0; j < dout; ++j) row[j] += static_cast<double>(x) * w[j];
        }
    }
    return e;
}

std::vector<double> residual_mean(const ResidualMatrix& e) {
    std::vector<double> m(e.cols, 0.0);
    if (e.rows == 0) throw InputError("residual mean of an empty capture");
    for (std::size_t i = 0; i < e.rows; ++i)
        for (std::size_t j = 0; j < e.cols; ++j) m[j] += e.data[i * e.cols + j];
    for (double& v : m) v /= static_cast<double>(e.rows);
    return m;
}

double residual_loss(const ResidualMatrix& e, std::span<const double> b) {
    if (b.size() != e.cols) throw DimensionError("residual_loss: bias length mismatch");
    if (e.rows == 0) throw InputError("residual loss of an empty capture");
    double total = 0.0;
    for (std::size_t i = 0; i < e.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < e.cols; ++j) {
            const double d = e.data[i * e.cols + j] - b[j];
            s += d * d;
        }
        total += s;
    }
    return total / static_cast<double>(e.rows);
}

namespace {

class ResidualMeanCalibrator final : public SiteObserver {
public:
    ResidualMeanCalibrator(const Model& model, const SparsityProfile& profile, std::span<const LinearSite> sites,
                           SpontaneousParams& out)
        : model_(model), profile_(profile), sites_(sites.begin(), sites.end()), out_(out) {}

    void on_site_input(const LinearSite& site, const Tensor& input) override {
        if (std::find(sites_.begin(), sites_.end(), site) == sites_.end()) return;
        if (input.rows() == 0) throw InputError("site " + site.name() + " captured no tokens");
        const auto it = profile_.thresholds.find(site);
        const Tensor& w = model_.weights.weight(site);
        // Unprofiled sites run dense: the residual is identically zero.
        const float tau = it == profile_.thresholds.end() ? -1.0f : it->second;
        const ResidualMatrix e = site_residuals(input, w, tau);
        const std::vector<double> b = residual_mean(e);
        ResidualStats st;
        st.tokens = e.rows;
        st.loss_zero = residual_loss(e, std::vector<double>(e.cols, 0.0));
        st.loss_star = residual_loss(e, b);
        for (double v : b) st.bias_norm2 += v * v;
        out_.metadata.residual[site] = st;
        Tensor bt({e.cols});
        for (std::size_t j = 0; j < e.cols; ++j) bt[j] = static_cast<float>(b[j]);
        out_.bias[site] = std::move(bt);
    }

private:
    const Model& model_;
    const SparsityProfile& profile_;
    std::vector<LinearSite> sites_;
    SpontaneousParams& out_;
};

}  // namespace

SpontaneousParams calibrate_residual_mean(const Model& model, std::span<const Token> calib_tokens,
                                          const SparsityProfile& profile, std::span<const LinearSite> sites) {
    require_tokens(calib_tokens);
    if (sites.empty()) throw InputError("no sites to calibrate");
    check_profile(profile, model.config);
    for (const LinearSite& s : sites) validate_site(model.config, s);

    SpontaneousParams params;
    params.method = "residual_mean";
    params.state = SponState::Bias;
    const TokenBatch batch = calibration_batch(calib_tokens, model.config.context_len);
    ResidualMeanCalibrator cal(model, profile, sites, params);
    ForwardOptions opt;
    opt.thresholds = &profile.thresholds;
    opt.site_bias = &params.bias;
    opt.observer = &cal;
    forward(model, batch, opt);

    params.metadata.target = profile.target;
    params.metadata.seed = profile.metadata.seed;
    params.metadata.num_tokens = batch.ids.size();
    params.metadata.profile_id = json_fingerprint(profile_to_json(profile));
    return params;
}

double kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
    const KlSum s = kl_sum(p_logits, q_logits);
    return s.rows ? s.total / static_cast<double>(s.rows) : 0.0;
}

double mean_kl(const Model& dense, const LogitsFn& student, std::span<const Token> tokens, std::size_t block) {
    if (tokens.empty()) throw InputError("mean_kl: no tokens");
    if (block == 0 || block > dense.config.context_len) throw InputError("mean_kl: block must lie in [1, context_len]");
    KlSum acc;
    const std::size_t full = tokens.size() / block;
    auto run = [&](std::size_t first, std::size_t count, std::size_t len) {
        TokenBatch b;
        b.batch = count;
        b.seq = len;
        const auto it = tokens.begin() + static_cast<std::ptrdiff_t>(first);
        b.ids.assign(it, it + static_cast<std::ptrdiff_t>(count * len));
        const KlSum s = kl_sum(forward(dense, b), student(b));
        acc.total += s.total;
        acc.rows += s.rows;
    };
    for (std::size_t w = 0; w < full; w += 16) run(w * block, std::min<std::size_t>(16, full - w), block);
    if (tokens.size() % block) run(full * block, 1, tokens.size() % block);
    return acc.total / static_cast<double>(acc.rows);
}

SpontaneousParams calibrate_kl_distill(const Model& dense, std::span<const Token> calib_tokens,
                                       const SparsityProfile& profile, std::span<const LinearSite> sites,
                                       const DistillHyper& hyper) {
    require_tokens(calib_tokens);
    if (sites.empty()) throw InputError("no sites to calibrate");
    if (hyper.batch == 0 || hyper.block == 0 || hyper.log_every == 0)
        throw InputError("distillation batch, block and log interval must be positive");
    if (!(hyper.heldout_fraction > 0.0 && hyper.heldout_fraction < 1.0))
        throw InputError("held-out fraction must lie in (0, 1)");
    check_profile(profile, dense.config);

    const std::size_t block = std::min(hyper.block, dense.config.context_len);
    const CorpusSplit split = split_corpus(calib_tokens, hyper.heldout_fraction);
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + block <= split.train.size(); s += block) starts.push_back(s);
    if (starts.empty()) throw InputError("calibration split shorter than one distillation block");

    SpontaneousParams params = zero_params(dense.config, sites);
    params.method = "kl_distill";
    SponMetadata& meta = params.metadata;
    meta.target = profile.target;
    meta.seed = hyper.seed;
    meta.num_tokens = calib_tokens.size();
    meta.profile_id = json_fingerprint(profile_to_json(profile));
    meta.lr = hyper.lr;
    meta.batch = hyper.batch;
    meta.block = block;

    auto heldout_kl = [&] {
        return mean_kl(dense, spon_logits(dense, profile, params), split.heldout, block);
    };

    meta.initial_kl = heldout_kl();
    double best = meta.initial_kl;
    SiteMap<Tensor> best_alpha = params.alpha;
    meta.log.push_back({0, meta.initial_kl, best});

    std::vector<Shape> shapes;
    for (const auto& [s, a] : params.alpha) shapes.push_back(a.shape());
    Adam opt(shapes, AdamConfig{hyper.lr, 0.9f, 0.999f, 1e-8f});

    std::mt19937_64 rng(hyper.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order = starts;
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;
    const std::size_t rows = std::min(hyper.batch, starts.size());

    for (std::size_t step = 1; step <= hyper.steps; ++step) {
        TokenBatch b;
        b.batch = rows;
        b.seq = block;
        for (std::size_t r = 0; r < rows; ++r) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            const std::size_t s = order[cursor++];
            b.ids.insert(b.ids.end(), split.train.begin() + static_cast<std::ptrdiff_t>(s),
                         split.train.begin() + static_cast<std::ptrdiff_t>(s + block));
        }
        const Tensor teacher = forward(dense, b).reshaped({rows * block, dense.config.vocab_size});

        std::vector<Tensor> grads;
        double loss = 0.0;
        try {
            ag::Tape tape;
            const GraphWeights w = bind_weights(tape, dense.weights, false);
            SiteMap<ag::Var> vars;
            std::vector<ag::Var> plist;
            for (const auto& [s, a] : params.alpha) {
                vars[s] = tape.parameter(a);
                plist.push_back(vars[s]);
            }
            ForwardOptions fo;
            fo.thresholds = &profile.thresholds;
            fo.alpha_vars = &vars;
            const GraphOutput out = forward_graph(tape, w, dense.config, b, fo);
            const ag::Var kl = ag::kl_divergence(teacher, out.logits);
            loss = kl.value()[0];
            grads = tape.gradients(kl, plist);
        } catch (const NumericError& e) {
            throw NumericError("distillation step " + std::to_string(step) + ": " + e.what());
        }
        if (!std::isfinite(loss)) throw NumericError("distillation step " + std::to_string(step) + ": loss is not finite");

        std::vector<Tensor*> ptrs;
        for (auto& [s, a] : params.alpha) ptrs.push_back(&a);
        opt.step(ptrs, grads);

        if (step % hyper.log_every == 0 || step == hyper.steps) {
            const double kl = heldout_kl();
            if (kl < best) {
                best = kl;
                best_alpha = params.alpha;
            }
            meta.log.push_back({step, kl, best});
        }
    }
    params.alpha = std::move(best_alpha);
    meta.steps = hyper.steps;
    meta.final_kl = best;
    return params;
}

void fold(Model& model, SpontaneousParams& params, const std::string& fingerprint) {
    if (params.state == SponState::Folded) throw FormatError("parameters are already folded");
    if (std::find(model.folded.begin(), model.folded.end(), fingerprint) != model.folded.end())
        throw FormatError("parameters " + fingerprint + " were already folded into this model");
    check_params(params, model.config);
    SiteMap<Tensor> delta;
    if (params.state == SponState::Unfolded) {
        for (const auto& [s, a] : params.alpha)
            delta[s] = matmul(a.reshaped({1, a.numel()}), model.weights.weight(s)).reshaped({site_out_dim(model.config, s.kind)});
    } else {
        delta = params.bias;
    }
    for (auto& [s, d] : delta) {
        std::optional<Tensor>& b = model.weights.bias(s);
        b = b ? add(*b, d) : d;
    }
    params.alpha.clear();
    params.bias.clear();
    params.state = SponState::Folded;
    model.folded.push_back(fingerprint);
}

Json params_to_json(const SpontaneousParams& p) {
    Json j = make_artifact("spontaneous_params");
    j["method"] = p.method;
    j["state"] = std::string(spon_state_name(p.state));
    Json sites = Json::array();
    const bool bias = p.state == SponState::Bias;
    for (const auto& [s, t] : bias ? p.bias : p.alpha) {
        Json e = site_to_json(s);
        e[bias ? "bias" : "alpha"] = tensor_to_json(t);
        sites.push_back(e);
    }
    j["sites"] = sites;
    const SponMetadata& m = p.metadata;
    Json meta;
    meta["steps"] = m.steps;
    meta["initial_kl"] = m.initial_kl;
    meta["final_kl"] = m.final_kl;
    meta["kl_direction"] = m.kl_direction;
    meta["target"] = m.target;
    meta["seed"] = m.seed;
    meta["num_tokens"] = m.num_tokens;
    meta["profile_id"] = m.profile_id;
    meta["lr"] = m.lr;
    meta["batch"] = m.batch;
    meta["block"] = m.block;
    Json log = Json::array();
    for (const DistillCheckpoint& c : m.log)
        log.push_back({{"step", c.step}, {"heldout_kl", c.heldout_kl}, {"best_kl", c.best_kl}});
    meta["log"] = log;
    Json res = Json::array();
    for (const auto& [s, st] : m.residual) {
        Json e = site_to_json(s);
        e["loss_zero"] = st.loss_zero;
        e["loss_star"] = st.loss_star;
        e["bias_norm2"] = st.bias_norm2;
        e["tokens"] = st.tokens;
        res.push_back(e);
    }
    meta["residual"] = res;
    j["metadata"] = meta;
    return j;
}

SpontaneousParams params_from_json(const Json& j) {
    check_artifact(j, "spontaneous_params");
    SpontaneousParams p;
    try {
        p.method = j.at("method").get<std::string>();
        p.state = parse_state(j.at("state").get<std::string>());
        const bool bias = p.state == SponState::Bias;
        for (const Json& e : j.at("sites")) {
            const LinearSite s = site_from_json(e);
            const Json& v = e.at(bias ? "bias" : "alpha");
            (bias ? p.bias : p.alpha)[s] = tensor_from_json(v, {v.size()});
        }
        const Json& m = j.at("metadata");
        SponMetadata& meta = p.metadata;
        meta.steps = m.at("steps").get<std::size_t>();
        meta.initial_kl = m.at("initial_kl").get<double>();
        meta.final_kl = m.at("final_kl").get<double>();
        meta.kl_direction = m.at("kl_direction").get<std::string>();
        meta.target = m.at("target").get<double>();
        meta.seed = m.at("seed").get<std::uint64_t>();
        meta.num_tokens = m.at("num_tokens").get<std::uint64_t>();
        meta.profile_id = m.at("profile_id").get<std::string>();
        meta.lr = m.at("lr").get<float>();
        meta.batch = m.at("batch").get<std::size_t>();
        meta.block = m.at("block").get<std::size_t>();
        for (const Json& c : m.at("log"))
            meta.log.push_back({c.at("step").get<std::size_t>(), c.at("heldout_kl").get<double>(),
                                c.at("best_kl").get<double>()});
        for (const Json& e : m.at("residual")) {
            ResidualStats st;
            st.loss_zero = e.at("loss_zero").get<double>();
            st.loss_star = e.at("loss_star").get<double>();
            st.bias_norm2 = e.at("bias_norm2").get<double>();
            st.tokens = e.at("tokens").get<std::uint64_t>();
            meta.residual[site_from_json(e)] = st;
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed spontaneous parameters: ") + e.what());
    }
    return p;
}

void check_params(const SpontaneousParams& params, const ModelConfig& config) {
    auto check = [&](const SiteMap<Tensor>& m, bool input_side) {
        for (const auto& [s, t] : m) {
            if (s.layer >= config.n_layers) throw FormatError("parameter site " + s.name() + " does not exist");
            const std::size_t want = input_side ? site_in_dim(config, s.kind) : site_out_dim(config, s.kind);
            if (t.numel() != want)
                throw FormatError("parameter vector at " + s.name() + " has " + std::to_string(t.numel()) +
                                  " entries, expected " + std::to_string(want));
        }
    };
    check(params.alpha, true);
    check(params.bias, false);
    if (params.state == SponState::Folded && (!params.alpha.empty() || !params.bias.empty()))
        throw FormatError("folded parameters still carry vectors");
}

}  // namespace spon
