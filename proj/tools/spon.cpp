// spon: train a toy byte-level transformer, sparsify it, calibrate and fold
// spontaneous neurons, and evaluate the result.
#include "spon/artifact.hpp"
#include "spon/error.hpp"
#include "spon/eval.hpp"
#include "spon/kernels.hpp"
#include "spon/model.hpp"
#include "spon/sparsify.hpp"
#include "spon/spontaneous.hpp"
#include "spon/theory.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace spon;

namespace {

struct Settings {
    std::string config_path;
    std::string corpus, model, reference, profile, params, out, csv;
    std::optional<std::uint64_t> seed;
    ModelConfig mc;
    TrainHyper train;
    double target = 0.5;
    std::string sites = "all";
    std::string spon_sites = "down_proj";
    std::string method = "kl_distill";
    std::size_t calib_tokens = 8192;
    DistillHyper distill;
    std::size_t prompts = 50;
    std::size_t prompt_len = 64;
    std::string sets;
    std::size_t m = 4;
    std::size_t m_prime = 3;
};

template <class T>
struct is_optional : std::false_type {};
template <class T>
struct is_optional<std::optional<T>> : std::true_type {};

// Flags registered on a subcommand that may also be supplied by the --config
// JSON file under the same name with '-' replaced by '_'.
class Binder {
public:
    explicit Binder(CLI::App* app) : app_(app) {}

    template <class T>
    Binder& opt(const std::string& flag, T& field, const std::string& help) {
        CLI::Option* o = app_->add_option(flag, field, help);
        if constexpr (!std::is_same_v<T, std::string> && !is_optional<T>::value) o->capture_default_str();
        std::string key = flag.substr(2);
        std::replace(key.begin(), key.end(), '-', '_');
        entries_.push_back({key, o, [&field, key](const Json& j) {
                                try {
                                    if constexpr (is_optional<T>::value)
                                        field = j.get<typename T::value_type>();
                                    else
                                        field = j.get<T>();
                                } catch (const nlohmann::json::exception&) {
                                    throw InputError("config key '" + key + "' has the wrong type");
                                }
                            }});
        return *this;
    }

    void apply(const Json& cfg) const {
        for (const auto& e : entries_)
            if (e.option->count() == 0 && cfg.contains(e.key)) e.set(cfg[e.key]);
    }

private:
    struct Entry {
        std::string key;
        CLI::Option* option;
        std::function<void(const Json&)> set;
    };
    CLI::App* app_;
    std::vector<Entry> entries_;
};

std::vector<SiteKind> parse_kinds(const std::string& sel) {
    if (sel == "all") return {kAllSiteKinds.begin(), kAllSiteKinds.end()};
    for (const SiteSet& s : default_site_sets())
        if (s.name == sel) return s.kinds;
    std::vector<SiteKind> kinds;
    std::stringstream ss(sel);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const SiteKind k = parse_site_kind(item);
        if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) kinds.push_back(k);
    }
    if (kinds.empty()) throw InputError("no sites selected by '" + sel + "'");
    return kinds;
}

void require_path(const std::string& path, const char* what) {
    if (path.empty()) throw InputError(std::string("missing --") + what);
    if (!fs::exists(path)) throw InputError(std::string(what) + " '" + path + "' does not exist");
}

void require_out(const Settings& s) {
    if (s.out.empty()) throw InputError("missing --out");
}

std::uint64_t resolve_seed(const Settings& s) {
    if (s.seed) return *s.seed;
    if (const char* env = std::getenv("SPON_SEED"); env && *env) {
        char* end = nullptr;
        const unsigned long long v = std::strtoull(env, &end, 10);
        if (*end != '\0') throw InputError("SPON_SEED must be an unsigned integer");
        return v;
    }
    throw InputError("a seed is required (--seed, config key 'seed', or SPON_SEED)");
}

Model load(const std::string& path, const char* what) {
    require_path(path, what);
    return load_model(path);
}

SparsityProfile load_profile(const std::string& path) {
    require_path(path, "profile");
    return profile_from_json(read_json_file(path));
}

SpontaneousParams load_params(const std::string& path) {
    require_path(path, "params");
    return params_from_json(read_json_file(path));
}

std::vector<Token> load_corpus(const Settings& s) {
    require_path(s.corpus, "corpus");
    return read_corpus(s.corpus);
}

// Calibration tokens come from the start of the training split; evaluation
// uses the held-out split.
std::vector<Token> calibration_tokens(const Settings& s, const std::vector<Token>& corpus) {
    const CorpusSplit split = split_corpus(corpus, s.train.heldout_fraction);
    const std::size_t n = std::min(s.calib_tokens, split.train.size());
    return {split.train.begin(), split.train.begin() + static_cast<std::ptrdiff_t>(n)};
}

std::vector<Token> eval_tokens(const Settings& s, const std::vector<Token>& corpus) {
    return split_corpus(corpus, s.train.heldout_fraction).heldout;
}

void write_json(const std::string& path, const Json& j) { write_file(path, dump(j)); }

int cmd_train(const Settings& s, std::uint64_t seed) {
    require_out(s);
    const std::vector<Token> corpus = load_corpus(s);
    ModelConfig mc = s.mc;
    mc.seed = seed;
    mc.validate();
    const TrainResult r = train_dense(corpus, mc, s.train);
    save_model(r.model, s.out);
    std::printf("trained %llu steps: held-out loss %.9f -> %.9f (ppl %.9f)\n",
                static_cast<unsigned long long>(r.steps), r.initial_heldout_loss, r.final_heldout_loss,
                std::exp(r.final_heldout_loss));
    return 0;
}

int cmd_calibrate_sparsity(const Settings& s, std::uint64_t seed) {
    require_out(s);
    const Model model = load(s.model, "model");
    const std::vector<Token> corpus = load_corpus(s);
    const std::vector<LinearSite> sites = sites_for(model.config, parse_kinds(s.sites));
    const SparsityProfile p = calibrate_thresholds(model, calibration_tokens(s, corpus), sites, s.target, seed);
    write_json(s.out, profile_to_json(p));
    double mean = 0.0;
    for (const auto& [site, f] : p.achieved) mean += f;
    std::printf("calibrated %zu sites at target %.4f: mean achieved sparsity %.6f\n", p.thresholds.size(), p.target,
                p.achieved.empty() ? 0.0 : mean / static_cast<double>(p.achieved.size()));
    return 0;
}

int cmd_calibrate_spon(const Settings& s, std::uint64_t seed) {
    require_out(s);
    const Model model = load(s.model, "model");
    const SparsityProfile profile = load_profile(s.profile);
    const std::vector<Token> corpus = load_corpus(s);
    const std::vector<LinearSite> sites = sites_for(model.config, parse_kinds(s.spon_sites));
    const std::vector<Token> calib = calibration_tokens(s, corpus);
    SpontaneousParams p;
    if (s.method == "residual_mean") {
        p = calibrate_residual_mean(model, calib, profile, sites);
        p.metadata.seed = seed;
    } else if (s.method == "kl_distill") {
        DistillHyper h = s.distill;
        h.seed = seed;
        p = calibrate_kl_distill(model, calib, profile, sites, h);
    } else {
        throw InputError("unknown method '" + s.method + "' (residual_mean or kl_distill)");
    }
    write_json(s.out, params_to_json(p));
    if (p.method == "kl_distill")
        std::printf("distilled %zu sites: held-out KL %.6g -> %.6g\n", sites.size(), p.metadata.initial_kl,
                    p.metadata.final_kl);
    else
        std::printf("residual-mean bias at %zu sites\n", sites.size());
    return 0;
}

int cmd_fold(const Settings& s, std::uint64_t) {
    require_out(s);
    Model model = load(s.model, "model");
    require_path(s.params, "params");
    const Json j = read_json_file(s.params);
    SpontaneousParams p = params_from_json(j);
    const std::size_t n_sites = p.sites().size();
    fold(model, p, json_fingerprint(j));
    save_model(model, s.out);
    std::printf("folded %s into %zu bias vectors\n", json_fingerprint(j).c_str(), n_sites);
    return 0;
}

int cmd_eval(const Settings& s, std::uint64_t seed) {
    require_out(s);
    const Model model = load(s.model, "model");
    std::optional<Model> reference;
    if (!s.reference.empty()) reference = load(s.reference, "reference");
    std::optional<SparsityProfile> profile;
    if (!s.profile.empty()) profile = load_profile(s.profile);
    std::optional<SpontaneousParams> params;
    if (!s.params.empty()) params = load_params(s.params);
    const std::vector<Token> corpus = load_corpus(s);
    const std::vector<Token> tokens = eval_tokens(s, corpus);
    const TokenBatch prompts = prompt_set(tokens, s.prompts, std::min(s.prompt_len, model.config.context_len), seed);
    EvalSetup setup{&model, reference ? &*reference : &model, profile ? &*profile : nullptr,
                    params ? &*params : nullptr};
    EvalReport r = evaluate(setup, tokens, &prompts);
    r.label = fs::path(s.model).filename().string();
    write_json(s.out, report_to_json(r));
    if (!s.csv.empty()) write_file(s.csv, report_csv(std::span<const EvalReport>(&r, 1)));
    std::printf("mode=%s ppl=%.6f kl=%.6g sparsity=%.4f\n", r.mode.c_str(), r.perplexity, r.kl, r.sparsity);
    return 0;
}

AblationSetup ablation_setup(const Settings& s, const Model& model, const SparsityProfile& profile,
                             const std::vector<Token>& calib, const std::vector<Token>& tokens, std::uint64_t seed) {
    AblationSetup a;
    a.dense = &model;
    a.profile = &profile;
    a.calib_tokens = calib;
    a.eval_tokens = tokens;
    a.hyper = s.distill;
    a.hyper.seed = seed;
    return a;
}

int cmd_ablate(const Settings& s, std::uint64_t seed, bool layers) {
    require_out(s);
    const Model model = load(s.model, "model");
    const SparsityProfile profile = load_profile(s.profile);
    const std::vector<Token> corpus = load_corpus(s);
    const std::vector<Token> calib = calibration_tokens(s, corpus);
    const std::vector<Token> tokens = eval_tokens(s, corpus);
    const AblationSetup a = ablation_setup(s, model, profile, calib, tokens, seed);
    AblationResult r;
    if (layers) {
        r = ablate_layers(a);
    } else {
        std::vector<SiteSet> sets = default_site_sets();
        if (!s.sets.empty()) {
            std::vector<SiteSet> chosen;
            std::stringstream ss(s.sets);
            std::string name;
            while (std::getline(ss, name, ';')) {
                if (name.empty()) continue;
                auto it = std::find_if(sets.begin(), sets.end(), [&](const SiteSet& x) { return x.name == name; });
                chosen.push_back(it != sets.end() ? *it : SiteSet{name, parse_kinds(name)});
            }
            sets = std::move(chosen);
        }
        r = ablate_sites(a, sets);
    }
    write_json(s.out, ablation_to_json(r));
    if (!s.csv.empty()) write_file(s.csv, ablation_csv(r));
    for (const AblationEntry& e : r.entries)
        std::printf("%-12s ppl=%.6f kl=%.6g\n", e.descriptor.c_str(), e.report.perplexity, e.report.kl);
    return 0;
}

int cmd_repr_shift(const Settings& s, std::uint64_t seed) {
    require_out(s);
    const Model model = load(s.model, "model");
    std::optional<Model> reference;
    if (!s.reference.empty()) reference = load(s.reference, "reference");
    const Model& ref = reference ? *reference : model;
    std::optional<SparsityProfile> profile;
    if (!s.profile.empty()) profile = load_profile(s.profile);
    std::optional<SpontaneousParams> params;
    if (!s.params.empty()) params = load_params(s.params);
    const std::vector<Token> corpus = load_corpus(s);
    const TokenBatch prompts =
        prompt_set(eval_tokens(s, corpus), s.prompts, std::min(s.prompt_len, model.config.context_len), seed);
    const EvalSetup setup{&model, &ref, profile ? &*profile : nullptr, params ? &*params : nullptr};
    const Tensor dense_h = capture_hidden(ref, prompts);
    const Tensor other_h = capture_hidden(model, prompts, eval_options(setup));
    const ShiftMetrics m = repr_shift(dense_h, other_h);

    // Shared PCA basis over both captures.
    const std::size_t n = dense_h.rows(), d = dense_h.cols();
    std::vector<float> both(dense_h.data().begin(), dense_h.data().end());
    both.insert(both.end(), other_h.data().begin(), other_h.data().end());
    const Pca2 pca = pca2(Tensor({2 * n, d}, std::move(both)), seed);

    Json j = make_artifact("repr_shift");
    j["mode"] = eval_mode(setup);
    j["prompts"] = prompts.batch;
    j["prompt_len"] = prompts.seq;
    j["tokens"] = n;
    j["metrics"] = shift_to_json(m);
    j["pca_explained"] = {pca.explained[0], pca.explained[1]};
    write_json(s.out, j);
    if (!s.csv.empty()) {
        std::ostringstream os;
        os << "source,prompt,position,pc1,pc2\n";
        for (std::size_t i = 0; i < 2 * n; ++i) {
            const std::size_t t = i % n;
            os << (i < n ? "dense" : j["mode"].get<std::string>()) << ',' << t / prompts.seq << ',' << t % prompts.seq
               << ',' << format_double(pca.coords[2 * i]) << ',' << format_double(pca.coords[2 * i + 1]) << '\n';
        }
        write_file(s.csv, os.str());
    }
    std::printf("mode=%s mean_l2=%.6g centroid_shift=%.6g variance_ratio=%.6g\n", j["mode"].get<std::string>().c_str(),
                m.mean_l2, m.centroid_shift, m.variance_ratio);
    return 0;
}

int cmd_theory(const Settings& s, std::uint64_t seed) {
    require_out(s);
    const theory::InclusionReport r = theory::inclusion_demo(s.m, s.m_prime, 2 * s.m, seed);
    write_json(s.out, theory::inclusion_to_json(r));
    std::printf("m=%zu m'=%zu pieces=%zu struct_linf_error=%.6g embed_ok=%s\n", r.m, r.m_prime, r.piece_count,
                r.struct_linf_error, r.embed_ok ? "true" : "false");
    return 0;
}

void dump_diagnostics(const Settings& s, const std::string& command, const std::string& message) {
    Json j = make_artifact("diagnostics");
    j["command"] = command;
    j["error"] = message;
    j["kernels"] = std::string(kernels::backend_name(kernels::active().backend));
    j["seed"] = s.seed ? Json(*s.seed) : Json(nullptr);
    j["inputs"] = {{"corpus", s.corpus}, {"model", s.model}, {"profile", s.profile}, {"params", s.params}};
    const std::string text = dump(j);
    std::fputs(text.c_str(), stderr);
    if (!s.out.empty()) {
        try {
            write_file(s.out + ".diagnostics.json", text);
        } catch (const Error&) {
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse inference with spontaneous neurons on a toy byte-level transformer"};
    app.require_subcommand(1);
    Settings s;
    app.add_option("--config", s.config_path, "JSON file with option values; command-line flags take precedence");

    using Handler = std::function<int(const Settings&, std::uint64_t)>;
    std::vector<std::pair<CLI::App*, Handler>> commands;
    std::vector<Binder> binders;

    auto add = [&](const std::string& name, const std::string& help, Handler h) {
        CLI::App* sub = app.add_subcommand(name, help);
        commands.emplace_back(sub, std::move(h));
        binders.emplace_back(sub);
        sub->add_option("--config", s.config_path, "JSON file with option values; command-line flags take precedence");
        Binder& b = binders.back();
        b.opt("--seed", s.seed, "seed (falls back to SPON_SEED)");
        return &b;
    };

    add("train", "train the dense reference model", cmd_train)
        ->opt("--corpus", s.corpus, "training corpus (bytes)")
        .opt("--out", s.out, "model file to write")
        .opt("--d-model", s.mc.d_model, "model width")
        .opt("--n-layers", s.mc.n_layers, "number of blocks")
        .opt("--n-heads", s.mc.n_heads, "attention heads")
        .opt("--d-ff", s.mc.d_ff, "MLP hidden width")
        .opt("--context-len", s.mc.context_len, "maximum sequence length")
        .opt("--lr", s.train.lr, "Adam learning rate")
        .opt("--epochs", s.train.epochs, "passes over the training split")
        .opt("--batch", s.train.batch, "sequences per step")
        .opt("--block", s.train.block, "tokens per training sequence");

    add("calibrate-sparsity", "fit per-site magnitude thresholds", cmd_calibrate_sparsity)
        ->opt("--model", s.model, "dense model file")
        .opt("--corpus", s.corpus, "corpus; calibration uses the start of its training split")
        .opt("--out", s.out, "sparsity profile to write")
        .opt("--target", s.target, "target masked fraction in [0, 1)")
        .opt("--sites", s.sites, "site kinds: all (default), attention, mlp, or a comma list such as q_proj,down_proj")
        .opt("--calib-tokens", s.calib_tokens, "calibration set size in tokens");

    add("calibrate-spon", "calibrate spontaneous neurons", cmd_calibrate_spon)
        ->opt("--model", s.model, "dense model file")
        .opt("--profile", s.profile, "sparsity profile")
        .opt("--corpus", s.corpus, "corpus; calibration uses the start of its training split")
        .opt("--out", s.out, "parameter file to write")
        .opt("--method", s.method, "kl_distill (default) or residual_mean")
        .opt("--spon-sites", s.spon_sites, "site kinds receiving spontaneous neurons (default down_proj)")
        .opt("--calib-tokens", s.calib_tokens, "calibration set size in tokens")
        .opt("--spon-lr", s.distill.lr, "distillation learning rate")
        .opt("--steps", s.distill.steps, "distillation steps")
        .opt("--spon-batch", s.distill.batch, "distillation sequences per step")
        .opt("--spon-block", s.distill.block, "distillation tokens per sequence (clamped to the context length)")
        .opt("--log-every", s.distill.log_every, "steps between held-out KL checkpoints");

    add("fold", "absorb spontaneous neurons into bias vectors", cmd_fold)
        ->opt("--model", s.model, "model file")
        .opt("--params", s.params, "spontaneous parameters")
        .opt("--out", s.out, "folded model file to write");

    add("eval", "perplexity, KL and representation shift on the held-out split", cmd_eval)
        ->opt("--model", s.model, "model file (may carry folded biases)")
        .opt("--reference", s.reference, "dense reference model (defaults to --model)")
        .opt("--profile", s.profile, "sparsity profile")
        .opt("--params", s.params, "unfolded spontaneous parameters")
        .opt("--corpus", s.corpus, "corpus; evaluation uses its held-out split")
        .opt("--out", s.out, "report JSON to write")
        .opt("--csv", s.csv, "optional CSV report")
        .opt("--prompts", s.prompts, "prompts in the representation-shift set")
        .opt("--prompt-len", s.prompt_len, "tokens per prompt");

    for (const auto& [name, layers] : {std::pair{"ablate-sites", false}, std::pair{"ablate-layers", true}}) {
        const bool by_layer = layers;
        Binder* b = add(name, by_layer ? "down_proj spontaneous neurons at one layer at a time"
                                       : "compare injection-site sets",
                        [by_layer](const Settings& st, std::uint64_t seed) { return cmd_ablate(st, seed, by_layer); });
        b->opt("--model", s.model, "dense model file")
            .opt("--profile", s.profile, "sparsity profile")
            .opt("--corpus", s.corpus, "corpus")
            .opt("--out", s.out, "ablation JSON to write")
            .opt("--csv", s.csv, "optional CSV series")
            .opt("--calib-tokens", s.calib_tokens, "calibration set size in tokens")
            .opt("--spon-lr", s.distill.lr, "distillation learning rate")
            .opt("--steps", s.distill.steps, "distillation steps")
            .opt("--spon-batch", s.distill.batch, "distillation sequences per step")
            .opt("--spon-block", s.distill.block, "distillation tokens per sequence")
            .opt("--log-every", s.distill.log_every, "steps between held-out KL checkpoints");
        if (!by_layer) b->opt("--sets", s.sets, "';'-separated site sets (default: all eight presets)");
    }

    add("repr-shift", "final-residual shift against the dense model", cmd_repr_shift)
        ->opt("--model", s.model, "model file")
        .opt("--reference", s.reference, "dense reference model (defaults to --model)")
        .opt("--profile", s.profile, "sparsity profile")
        .opt("--params", s.params, "unfolded spontaneous parameters")
        .opt("--corpus", s.corpus, "corpus; prompts come from its held-out split")
        .opt("--out", s.out, "report JSON to write")
        .opt("--csv", s.csv, "optional CSV of PCA coordinates")
        .opt("--prompts", s.prompts, "number of prompts")
        .opt("--prompt-len", s.prompt_len, "tokens per prompt");

    add("theory-demo", "structured vs unstructured pruning on 1-D ReLU networks", cmd_theory)
        ->opt("--m", s.m, "width of the constructed network")
        .opt("--m-prime", s.m_prime, "structured width")
        .opt("--out", s.out, "report JSON to write");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    std::string command;
    try {
        for (std::size_t i = 0; i < commands.size(); ++i) {
            if (!commands[i].first->parsed()) continue;
            command = commands[i].first->get_name();
            if (!s.config_path.empty()) {
                require_path(s.config_path, "config");
                const Json cfg = read_json_file(s.config_path);
                if (!cfg.is_object()) throw InputError("config must be a JSON object");
                binders[i].apply(cfg);
            }
            return commands[i].second(s, resolve_seed(s));
        }
    } catch (const NumericError& e) {
        std::fprintf(stderr, "spon %s: numeric error: %s\n", command.c_str(), e.what());
        dump_diagnostics(s, command, e.what());
        return 4;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "spon %s: artifact error: %s\n", command.c_str(), e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "spon %s: %s\n", command.c_str(), e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "spon %s: %s\n", command.c_str(), e.what());
        return 2;
    }
    return 2;
}
