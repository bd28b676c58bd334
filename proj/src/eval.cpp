#include "spon/eval.hpp"

#include "spon/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace spon {

double perplexity(const LogitsFn& fn, std::span<const Token> tokens, std::size_t context) {
    if (tokens.size() < 2) throw InputError("perplexity needs at least 2 tokens");
    return std::exp(next_token_nll(fn, tokens, context).mean());
}

ShiftMetrics repr_shift(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw InputError("captures differ in shape (" + shape_string(a.shape()) + " vs " + shape_string(b.shape()) +
                         "); prompts do not match");
    const std::size_t n = a.rows(), d = a.cols();
    if (n == 0) throw InputError("empty capture");
    ShiftMetrics m;
    std::vector<double> ma(d, 0.0), mb(d, 0.0);
    double l2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double x = a[i * d + j], y = b[i * d + j];
            s += (x - y) * (x - y);
            ma[j] += x;
            mb[j] += y;
        }
        l2 += std::sqrt(s);
    }
    m.mean_l2 = l2 / static_cast<double>(n);
    double c = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        ma[j] /= static_cast<double>(n);
        mb[j] /= static_cast<double>(n);
        c += (ma[j] - mb[j]) * (ma[j] - mb[j]);
    }
    m.centroid_shift = std::sqrt(c);
    double va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double x = a[i * d + j] - ma[j], y = b[i * d + j] - mb[j];
            va += x * x;
            vb += y * y;
        }
    }
    if (va == 0.0) {
        m.variance_ratio = vb == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    } else {
        m.variance_ratio = vb / va;
    }
    return m;
}

namespace {

using Mat = std::vector<double>;  // row-major d x d

std::vector<double> mat_vec(const Mat& c, const std::vector<double>& v) {
    const std::size_t d = v.size();
    std::vector<double> out(d, 0.0);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i] += c[i * d + j] * v[j];
    return out;
}

double norm(const std::vector<double>& v) {
    return std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
}

// Dominant eigenpair of a symmetric PSD matrix.
std::pair<double, std::vector<double>> power_iteration(const Mat& c, std::size_t d, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> v(d);
    for (double& x : v) x = nd(rng);
    double nv = norm(v);
    for (double& x : v) x /= nv;
    double lambda = 0.0;
    for (int it = 0; it < 20000; ++it) {
        std::vector<double> w = mat_vec(c, v);
        const double nw = norm(w);
        if (nw == 0.0) return {0.0, v};
        for (double& x : w) x /= nw;
        double diff = 0.0;
        for (std::size_t i = 0; i < d; ++i) diff = std::max(diff, std::fabs(w[i] - v[i]));
        v = std::move(w);
        lambda = nw;
        if (diff < 1e-13) break;
    }
    // Sign convention: largest-magnitude component positive.
    std::size_t arg = 0;
    for (std::size_t i = 1; i < d; ++i)
        if (std::fabs(v[i]) > std::fabs(v[arg])) arg = i;
    if (v[arg] < 0.0)
        for (double& x : v) x = -x;
    const std::vector<double> cv = mat_vec(c, v);
    lambda = std::inner_product(v.begin(), v.end(), cv.begin(), 0.0);
    return {lambda, v};
}

}  // namespace

Pca2 pca2(const Tensor& points, std::uint64_t seed) {
    if (points.rank() != 2 || points.rows() < 3) throw InputError("pca2 needs at least 3 points");
    const std::size_t n = points.rows(), d = points.cols();
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += points[i * d + j];
    for (double& m : mean) m /= static_cast<double>(n);
    std::vector<double> x(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) x[i * d + j] = points[i * d + j] - mean[j];
    Mat c(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a) {
            const double xa = x[i * d + a];
            for (std::size_t b = 0; b < d; ++b) c[a * d + b] += xa * x[i * d + b];
        }
    for (double& v : c) v /= static_cast<double>(n);

    std::mt19937_64 rng(seed);
    auto [l1, v1] = power_iteration(c, d, rng);
    Mat c2 = c;
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) c2[a * d + b] -= l1 * v1[a] * v1[b];
    auto [l2, v2] = power_iteration(c2, d, rng);
    const bool rank_one = !(l1 > 0.0) || l2 <= 1e-12 * l1;
    if (!(l1 > 0.0)) l1 = 0.0;
    if (rank_one) l2 = 0.0;

    Pca2 out;
    out.coords = Tensor({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        double p1 = 0.0, p2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            p1 += x[i * d + j] * v1[j];
            p2 += x[i * d + j] * v2[j];
        }
        out.coords[i * 2] = l1 > 0.0 ? static_cast<float>(p1) : 0.0f;
        out.coords[i * 2 + 1] = rank_one ? 0.0f : static_cast<float>(p2);
    }
    out.explained[0] = l1;
    out.explained[1] = l2;
    return out;
}

TokenBatch prompt_set(std::span<const Token> tokens, std::size_t count, std::size_t length, std::uint64_t seed) {
    if (count == 0 || length == 0) throw InputError("prompt count and length must be positive");
    const std::size_t windows = tokens.size() / length;
    if (windows == 0) throw InputError("corpus shorter than one prompt");
    std::vector<std::size_t> idx(windows);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(count, windows));
    std::sort(idx.begin(), idx.end());
    TokenBatch b;
    b.batch = idx.size();
    b.seq = length;
    for (std::size_t w : idx)
        b.ids.insert(b.ids.end(), tokens.begin() + static_cast<std::ptrdiff_t>(w * length),
                     tokens.begin() + static_cast<std::ptrdiff_t>((w + 1) * length));
    return b;
}

ForwardOptions eval_options(const EvalSetup& s) {
    ForwardOptions opt;
    if (s.profile) opt.thresholds = &s.profile->thresholds;
    if (s.params) {
        if (s.params->state == SponState::Unfolded) opt.alpha = &s.params->alpha;
        if (s.params->state == SponState::Bias) opt.site_bias = &s.params->bias;
    }
    return opt;
}

std::string eval_mode(const EvalSetup& s) {
    const bool sparse = s.profile && !s.profile->thresholds.empty();
    const bool spon = (s.params && s.params->state != SponState::Folded) || !s.model->folded.empty();
    if (spon) return sparse ? "spon" : "dense+spon";
    return sparse ? "sparse" : "dense";
}

Tensor capture_hidden(const Model& model, const TokenBatch& prompts, const ForwardOptions& options) {
    return forward_hooked(model, prompts, {}, options).capture.final_hidden;
}

EvalReport evaluate(const EvalSetup& setup, std::span<const Token> tokens, const TokenBatch* prompts) {
    if (!setup.model) throw InputError("evaluate: no model");
    const Model& model = *setup.model;
    const Model& ref = setup.reference ? *setup.reference : model;
    if (!(ref.config == model.config)) throw InputError("reference model has a different configuration");
    if (setup.profile) check_profile(*setup.profile, model.config);
    if (setup.params) check_params(*setup.params, model.config);

    MaskCounter counter;
    ForwardOptions opt = eval_options(setup);
    opt.counter = &counter;
    const LogitsFn fn = [&model, &opt](const TokenBatch& b) { return forward(model, b, opt); };

    EvalReport r;
    r.mode = eval_mode(setup);
    const NllResult nll = next_token_nll(fn, tokens, model.config.context_len);
    r.mean_nll = nll.mean();
    r.perplexity = std::exp(r.mean_nll);
    r.tokens = nll.count;
    r.sparsity = counter.overall();
    const ForwardOptions plain = eval_options(setup);
    r.kl = mean_kl(ref, [&model, &plain](const TokenBatch& b) { return forward(model, b, plain); }, tokens,
                   model.config.context_len);
    if (prompts) r.shift = repr_shift(capture_hidden(ref, *prompts), capture_hidden(model, *prompts, plain));

    r.fingerprints.config = json_fingerprint(config_to_json(model.config));
    if (setup.profile) r.fingerprints.profile = json_fingerprint(profile_to_json(*setup.profile));
    if (setup.params) {
        r.fingerprints.params = json_fingerprint(params_to_json(*setup.params));
    } else if (!model.folded.empty()) {
        std::string joined;
        for (const std::string& f : model.folded) joined += (joined.empty() ? "" : "+") + f;
        r.fingerprints.params = joined;
    }
    if (!std::isfinite(r.perplexity) || !std::isfinite(r.kl)) throw NumericError("evaluation produced non-finite metrics");
    return r;
}

std::vector<SiteSet> default_site_sets() {
    using K = SiteKind;
    return {
        {"kv", {K::KProj, K::VProj}},
        {"up_gate", {K::GateProj, K::UpProj}},
        {"q_down", {K::QProj, K::DownProj}},
        {"o_down", {K::OProj, K::DownProj}},
        {"down", {K::DownProj}},
        {"all", {kAllSiteKinds.begin(), kAllSiteKinds.end()}},
        {"attention", {K::QProj, K::KProj, K::VProj, K::OProj}},
        {"mlp", {K::GateProj, K::UpProj, K::DownProj}},
    };
}

namespace {

AblationResult ablation_header(const AblationSetup& s, std::string kind) {
    if (!s.dense || !s.profile) throw InputError("ablation needs a dense model and a sparsity profile");
    AblationResult r;
    r.kind = std::move(kind);
    r.target = s.profile->target;
    r.seed = s.hyper.seed;
    r.corpus_id = fingerprint(std::string_view(reinterpret_cast<const char*>(s.eval_tokens.data()),
                                               s.eval_tokens.size() * sizeof(Token)));
    return r;
}

AblationEntry run_entry(const AblationSetup& s, std::string descriptor, std::vector<LinearSite> sites) {
    AblationEntry e;
    e.descriptor = std::move(descriptor);
    e.sites = std::move(sites);
    const SpontaneousParams params = calibrate_kl_distill(*s.dense, s.calib_tokens, *s.profile, e.sites, s.hyper);
    e.report = evaluate({s.dense, s.dense, s.profile, &params}, s.eval_tokens);
    e.report.label = e.descriptor;
    return e;
}

}  // namespace

AblationResult ablate_sites(const AblationSetup& setup, std::span<const SiteSet> sets) {
    AblationResult r = ablation_header(setup, "sites");
    for (const SiteSet& set : sets) {
        if (set.kinds.empty()) throw InputError("site set '" + set.name + "' is empty");
        r.entries.push_back(run_entry(setup, set.name, sites_for(setup.dense->config, set.kinds)));
    }
    return r;
}

AblationResult ablate_layers(const AblationSetup& setup) {
    AblationResult r = ablation_header(setup, "layers");
    for (std::size_t l = 0; l < setup.dense->config.n_layers; ++l) {
        AblationEntry e = run_entry(setup, "layer_" + std::to_string(l), {LinearSite{l, SiteKind::DownProj}});
        e.layer = l;
        r.entries.push_back(std::move(e));
    }
    return r;
}

Json shift_to_json(const ShiftMetrics& s) {
    return Json{{"mean_l2", s.mean_l2}, {"centroid_shift", s.centroid_shift}, {"variance_ratio", s.variance_ratio}};
}

Json report_to_json(const EvalReport& r) {
    Json j = make_artifact("eval_report");
    j["mode"] = r.mode;
    j["label"] = r.label;
    j["perplexity"] = r.perplexity;
    j["mean_nll"] = r.mean_nll;
    j["tokens"] = r.tokens;
    j["kl"] = r.kl;
    j["sparsity"] = r.sparsity;
    j["shift"] = r.shift ? shift_to_json(*r.shift) : Json(nullptr);
    j["fingerprints"] = {{"config", r.fingerprints.config},
                         {"profile", r.fingerprints.profile},
                         {"params", r.fingerprints.params}};
    return j;
}

EvalReport report_from_json(const Json& j) {
    check_artifact(j, "eval_report");
    EvalReport r;
    try {
        r.mode = j.at("mode").get<std::string>();
        r.label = j.at("label").get<std::string>();
        r.perplexity = j.at("perplexity").get<double>();
        r.mean_nll = j.at("mean_nll").get<double>();
        r.tokens = j.at("tokens").get<std::uint64_t>();
        r.kl = j.at("kl").get<double>();
        r.sparsity = j.at("sparsity").get<double>();
        if (!j.at("shift").is_null()) {
            const Json& s = j["shift"];
            r.shift = ShiftMetrics{s.at("mean_l2").get<double>(), s.at("centroid_shift").get<double>(),
                                   s.at("variance_ratio").get<double>()};
        }
        const Json& f = j.at("fingerprints");
        r.fingerprints = {f.at("config").get<std::string>(), f.at("profile").get<std::string>(),
                          f.at("params").get<std::string>()};
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed eval report: ") + e.what());
    }
    return r;
}

Json ablation_to_json(const AblationResult& r) {
    Json j = make_artifact("ablation");
    j["ablation"] = r.kind;
    j["target"] = r.target;
    j["seed"] = r.seed;
    j["corpus_id"] = r.corpus_id;
    Json entries = Json::array();
    for (const AblationEntry& e : r.entries) {
        Json je;
        je["descriptor"] = e.descriptor;
        je["layer"] = e.layer ? Json(*e.layer) : Json(nullptr);
        Json sites = Json::array();
        for (const LinearSite& s : e.sites) sites.push_back(site_to_json(s));
        je["sites"] = sites;
        je["report"] = report_to_json(e.report);
        entries.push_back(je);
    }
    j["entries"] = entries;
    return j;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string report_csv(std::span<const EvalReport> reports) {
    std::ostringstream os;
    os << "mode,label,perplexity,mean_nll,tokens,kl,sparsity,mean_l2,centroid_shift,variance_ratio\n";
    for (const EvalReport& r : reports) {
        os << r.mode << ',' << r.label << ',' << format_double(r.perplexity) << ',' << format_double(r.mean_nll) << ','
           << r.tokens << ',' << format_double(r.kl) << ',' << format_double(r.sparsity);
        if (r.shift) {
            os << ',' << format_double(r.shift->mean_l2) << ',' << format_double(r.shift->centroid_shift) << ','
               << format_double(r.shift->variance_ratio);
        } else {
            os << ",,,";
        }
        os << '\n';
    }
    return os.str();
}

std::string ablation_csv(const AblationResult& r) {
    std::ostringstream os;
    os << "ablation,descriptor,layer,sites,target,perplexity,kl,sparsity\n";
    for (const AblationEntry& e : r.entries) {
        std::string sites;
        for (const LinearSite& s : e.sites) sites += (sites.empty() ? "" : ";") + s.name();
        os << r.kind << ',' << e.descriptor << ',' << (e.layer ? std::to_string(*e.layer) : std::string()) << ','
           << sites << ',' << format_double(r.target) << ',' << format_double(e.report.perplexity) << ','
           << format_double(e.report.kl) << ',' << format_double(e.report.sparsity) << '\n';
    }
    return os.str();
}

}  // namespace spon
