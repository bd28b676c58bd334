#include "spon/model.hpp"

#include "spon/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>

namespace spon {

void ModelConfig::validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || context_len == 0)
        throw InputError("model config: all dimensions must be >= 1");
    if (d_model % n_heads != 0) throw InputError("model config: d_model must be divisible by n_heads");
    if (!(rms_eps >= 0.0f) || !std::isfinite(rms_eps)) throw InputError("model config: rms_eps must be >= 0");
}

namespace {
constexpr std::array<std::string_view, 7> kSiteNames = {"q_proj",    "k_proj",  "v_proj",   "o_proj",
                                                        "gate_proj", "up_proj", "down_proj"};
}

std::string_view site_kind_name(SiteKind kind) { return kSiteNames[static_cast<std::size_t>(kind)]; }

SiteKind parse_site_kind(std::string_view name) {
    for (std::size_t i = 0; i < kSiteNames.size(); ++i)
        if (kSiteNames[i] == name) return static_cast<SiteKind>(i);
    throw InputError("unknown site kind '" + std::string(name) + "'");
}

std::string LinearSite::name() const {
    return "layers." + std::to_string(layer) + "." + std::string(site_kind_name(kind));
}

std::vector<LinearSite> sites_for(const ModelConfig& config, std::span<const SiteKind> kinds) {
    std::vector<LinearSite> out;
    for (std::size_t l = 0; l < config.n_layers; ++l)
        for (SiteKind k : kAllSiteKinds)
            if (std::find(kinds.begin(), kinds.end(), k) != kinds.end()) out.push_back({l, k});
    return out;
}

std::vector<LinearSite> all_sites(const ModelConfig& config) { return sites_for(config, kAllSiteKinds); }

void validate_site(const ModelConfig& config, const LinearSite& site) {
    if (site.layer >= config.n_layers)
        throw InputError("site " + site.name() + ": layer index >= n_layers (" + std::to_string(config.n_layers) + ")");
    if (static_cast<std::size_t>(site.kind) >= kSiteNames.size()) throw InputError("invalid site kind");
}

std::size_t site_in_dim(const ModelConfig& config, SiteKind kind) {
    return kind == SiteKind::DownProj ? config.d_ff : config.d_model;
}

std::size_t site_out_dim(const ModelConfig& config, SiteKind kind) {
    return kind == SiteKind::GateProj || kind == SiteKind::UpProj ? config.d_ff : config.d_model;
}

std::vector<std::pair<std::string, const Tensor*>> ModelWeights::named_tensors() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.emplace_back("tok_emb", &tok_emb);
    out.emplace_back("pos_emb", &pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        const LayerWeights& lw = layers[l];
        out.emplace_back(prefix + "attn_norm", &lw.attn_norm);
        out.emplace_back(prefix + "mlp_norm", &lw.mlp_norm);
        for (SiteKind k : kAllSiteKinds) {
            const auto i = static_cast<std::size_t>(k);
            out.emplace_back(prefix + std::string(site_kind_name(k)) + ".weight", &lw.proj[i]);
            if (lw.bias[i]) out.emplace_back(prefix + std::string(site_kind_name(k)) + ".bias", &*lw.bias[i]);
        }
    }
    out.emplace_back("final_norm", &final_norm);
    out.emplace_back("unembed", &unembed);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> ModelWeights::named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (auto& [name, t] : std::as_const(*this).named_tensors()) out.emplace_back(name, const_cast<Tensor*>(t));
    return out;
}

std::size_t ModelWeights::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_tensors()) n += t->numel();
    return n;
}

Model init_model(const ModelConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const float std_main = 0.02f;
    const float std_resid = 0.02f / std::sqrt(2.0f * static_cast<float>(config.n_layers));
    auto normal = [&rng](Shape shape, float stddev) {
        std::normal_distribution<float> dist(0.0f, stddev);
        Tensor t(std::move(shape));
        for (float& v : t.mutable_data()) v = dist(rng);
        return t;
    };

    Model m;
    m.config = config;
    ModelWeights& w = m.weights;
    const std::size_t d = config.d_model;
    w.tok_emb = normal({config.vocab_size, d}, std_main);
    w.pos_emb = normal({config.context_len, d}, std_main);
    w.layers.resize(config.n_layers);
    for (LayerWeights& lw : w.layers) {
        lw.attn_norm = Tensor::full({d}, 1.0f);
        lw.mlp_norm = Tensor::full({d}, 1.0f);
        for (SiteKind k : kAllSiteKinds) {
            const bool residual_out = k == SiteKind::OProj || k == SiteKind::DownProj;
            lw.proj[static_cast<std::size_t>(k)] =
                normal({site_in_dim(config, k), site_out_dim(config, k)}, residual_out ? std_resid : std_main);
        }
    }
    w.final_norm = Tensor::full({d}, 1.0f);
    w.unembed = normal({d, config.vocab_size}, std_main);
    return m;
}

void validate_weights(const Model& model) {
    const ModelConfig& c = model.config;
    c.validate();
    const ModelWeights& w = model.weights;
    auto expect = [](const Tensor& t, const Shape& shape, const std::string& name) {
        if (t.shape() != shape)
            throw FormatError("tensor " + name + " has shape " + shape_string(t.shape()) + ", expected " +
                              shape_string(shape));
    };
    expect(w.tok_emb, {c.vocab_size, c.d_model}, "tok_emb");
    expect(w.pos_emb, {c.context_len, c.d_model}, "pos_emb");
    if (w.layers.size() != c.n_layers) throw FormatError("layer count does not match config");
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        expect(lw.attn_norm, {c.d_model}, "attn_norm");
        expect(lw.mlp_norm, {c.d_model}, "mlp_norm");
        for (SiteKind k : kAllSiteKinds) {
            const auto i = static_cast<std::size_t>(k);
            const LinearSite site{l, k};
            expect(lw.proj[i], {site_in_dim(c, k), site_out_dim(c, k)}, site.name());
            if (lw.bias[i]) expect(*lw.bias[i], {site_out_dim(c, k)}, site.name() + ".bias");
        }
    }
    expect(w.final_norm, {c.d_model}, "final_norm");
    expect(w.unembed, {c.d_model, c.vocab_size}, "unembed");
}

TokenBatch TokenBatch::single(std::span<const Token> tokens) {
    return TokenBatch{1, tokens.size(), std::vector<Token>(tokens.begin(), tokens.end())};
}

void validate_batch(const ModelConfig& config, const TokenBatch& batch) {
    if (batch.batch == 0 || batch.seq == 0) throw InputError("empty token batch");
    if (batch.ids.size() != batch.batch * batch.seq) throw DimensionError("token batch size != batch * seq");
    if (batch.seq > config.context_len)
        throw InputError("sequence length " + std::to_string(batch.seq) + " exceeds context length " +
                         std::to_string(config.context_len));
    for (Token t : batch.ids)
        if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size)
            throw InputError("token id " + std::to_string(t) + " out of range for vocabulary of " +
                             std::to_string(config.vocab_size));
}

void MaskCounter::add(const LinearSite& site, std::uint64_t n_masked, std::uint64_t n_total) {
    masked[site] += n_masked;
    total[site] += n_total;
}

double MaskCounter::fraction(const LinearSite& site) const {
    const auto t = total.find(site);
    if (t == total.end() || t->second == 0) return 0.0;
    return static_cast<double>(masked.at(site)) / static_cast<double>(t->second);
}

double MaskCounter::overall() const {
    std::uint64_t m = 0, n = 0;
    for (const auto& [site, c] : masked) m += c;
    for (const auto& [site, c] : total) n += c;
    return n ? static_cast<double>(m) / static_cast<double>(n) : 0.0;
}

std::vector<ag::Var> GraphWeights::all() const {
    std::vector<ag::Var> out{tok_emb, pos_emb};
    for (const Layer& l : layers) {
        out.push_back(l.attn_norm);
        out.push_back(l.mlp_norm);
        for (std::size_t i = 0; i < 7; ++i) {
            out.push_back(l.proj[i]);
            if (l.bias[i]) out.push_back(*l.bias[i]);
        }
    }
    out.push_back(final_norm);
    out.push_back(unembed);
    return out;
}

GraphWeights bind_weights(ag::Tape& tape, const ModelWeights& weights, bool trainable) {
    auto bind = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
    GraphWeights g;
    g.tok_emb = bind(weights.tok_emb);
    g.pos_emb = bind(weights.pos_emb);
    for (const LayerWeights& lw : weights.layers) {
        GraphWeights::Layer gl;
        gl.attn_norm = bind(lw.attn_norm);
        gl.mlp_norm = bind(lw.mlp_norm);
        for (std::size_t i = 0; i < 7; ++i) {
            gl.proj[i] = bind(lw.proj[i]);
            if (lw.bias[i]) gl.bias[i] = bind(*lw.bias[i]);
        }
        g.layers.push_back(std::move(gl));
    }
    g.final_norm = bind(weights.final_norm);
    g.unembed = bind(weights.unembed);
    return g;
}

namespace {

class SiteRunner {
public:
    SiteRunner(ag::Tape& tape, const GraphWeights& w, const ForwardOptions& opt) : tape_(tape), w_(w), opt_(opt) {}

    ag::Var operator()(const LinearSite& site, ag::Var input) const {
        const auto k = static_cast<std::size_t>(site.kind);
        if (opt_.observer) opt_.observer->on_site_input(site, input.value());
        ag::Var x = input;
        if (opt_.thresholds) {
            if (auto it = opt_.thresholds->find(site); it != opt_.thresholds->end()) {
                std::size_t masked = 0;
                x = ag::threshold_mask(x, it->second, &masked);
                if (opt_.counter) opt_.counter->add(site, masked, x.value().numel());
            }
        }
        if (opt_.alpha_vars) {
            if (auto it = opt_.alpha_vars->find(site); it != opt_.alpha_vars->end()) x = ag::add(x, it->second);
        }
        if (opt_.alpha) {
            if (auto it = opt_.alpha->find(site); it != opt_.alpha->end()) x = ag::add(x, tape_.constant(it->second));
        }
        const GraphWeights::Layer& lw = w_.layers.at(site.layer);
        ag::Var y = ag::matmul(x, lw.proj[k]);
        if (lw.bias[k]) y = ag::add(y, *lw.bias[k]);
        if (opt_.site_bias) {
            if (auto it = opt_.site_bias->find(site); it != opt_.site_bias->end())
                y = ag::add(y, tape_.constant(it->second));
        }
        return y;
    }

private:
    ag::Tape& tape_;
    const GraphWeights& w_;
    const ForwardOptions& opt_;
};

}  // namespace

GraphOutput forward_graph(ag::Tape& tape, const GraphWeights& w, const ModelConfig& config, const TokenBatch& batch,
                          const ForwardOptions& options) {
    validate_batch(config, batch);
    const std::size_t n = batch.batch * batch.seq;
    std::vector<Token> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<Token>(i % batch.seq);

    SiteRunner site(tape, w, options);
    ag::Var x = ag::add(ag::gather_rows(w.tok_emb, batch.ids), ag::gather_rows(w.pos_emb, positions));
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        const GraphWeights::Layer& lw = w.layers[l];
        const ag::Var h = ag::rms_norm(x, lw.attn_norm, config.rms_eps);
        const ag::Var q = site({l, SiteKind::QProj}, h);
        const ag::Var k = site({l, SiteKind::KProj}, h);
        const ag::Var v = site({l, SiteKind::VProj}, h);
        const ag::Var attn = ag::causal_attention(q, k, v, batch.batch, batch.seq, config.n_heads);
        x = ag::add(x, site({l, SiteKind::OProj}, attn));

        const ag::Var h2 = ag::rms_norm(x, lw.mlp_norm, config.rms_eps);
        const ag::Var gate = site({l, SiteKind::GateProj}, h2);
        const ag::Var up = site({l, SiteKind::UpProj}, h2);
        x = ag::add(x, site({l, SiteKind::DownProj}, ag::mul(ag::silu(gate), up)));
    }
    GraphOutput out;
    out.final_hidden = x;
    out.logits = ag::matmul(ag::rms_norm(x, w.final_norm, config.rms_eps), w.unembed);
    return out;
}

Tensor forward(const Model& model, const TokenBatch& batch, const ForwardOptions& options) {
    ag::Tape tape;
    const GraphWeights w = bind_weights(tape, model.weights, false);
    const GraphOutput out = forward_graph(tape, w, model.config, batch, options);
    return out.logits.value().reshaped({batch.batch, batch.seq, model.config.vocab_size});
}

namespace {

class CaptureObserver final : public SiteObserver {
public:
    CaptureObserver(std::span<const LinearSite> sites, SiteObserver* inner) : sites_(sites.begin(), sites.end()), inner_(inner) {}

    void on_site_input(const LinearSite& site, const Tensor& input) override {
        if (std::find(sites_.begin(), sites_.end(), site) != sites_.end()) captured[site] = input;
        if (inner_) inner_->on_site_input(site, input);
    }

    SiteMap<Tensor> captured;

private:
    std::vector<LinearSite> sites_;
    SiteObserver* inner_;
};

}  // namespace

HookedOutput forward_hooked(const Model& model, const TokenBatch& batch, std::span<const LinearSite> sites,
                            const ForwardOptions& options) {
    for (const LinearSite& s : sites) validate_site(model.config, s);
    CaptureObserver capture(sites, options.observer);
    ForwardOptions opt = options;
    opt.observer = &capture;
    ag::Tape tape;
    const GraphWeights w = bind_weights(tape, model.weights, false);
    const GraphOutput out = forward_graph(tape, w, model.config, batch, opt);
    HookedOutput result;
    result.logits = out.logits.value().reshaped({batch.batch, batch.seq, model.config.vocab_size});
    result.capture.inputs = std::move(capture.captured);
    result.capture.final_hidden = out.final_hidden.value();
    return result;
}

NllResult next_token_nll(const LogitsFn& fn, std::span<const Token> tokens, std::size_t context,
                         std::size_t blocks_per_batch) {
    if (tokens.size() < 2) throw InputError("need at least 2 tokens to score next-token predictions");
    if (context == 0 || blocks_per_batch == 0) throw InputError("context and batch size must be >= 1");
    struct Block {
        std::size_t start, len;
    };
    std::vector<Block> blocks;
    for (std::size_t s = 0; s + 1 < tokens.size();) {
        const std::size_t len = std::min(context, tokens.size() - 1 - s);
        blocks.push_back({s, len});
        s += len;
    }

    NllResult result;
    std::vector<double> scratch;
    for (std::size_t b0 = 0; b0 < blocks.size();) {
        std::size_t b1 = b0;
        while (b1 < blocks.size() && b1 - b0 < blocks_per_batch && blocks[b1].len == blocks[b0].len) ++b1;
        const std::size_t len = blocks[b0].len;
        TokenBatch batch{b1 - b0, len, {}};
        batch.ids.reserve(batch.batch * len);
        for (std::size_t b = b0; b < b1; ++b)
            batch.ids.insert(batch.ids.end(), tokens.begin() + static_cast<std::ptrdiff_t>(blocks[b].start),
                             tokens.begin() + static_cast<std::ptrdiff_t>(blocks[b].start + len));
        const Tensor logits = fn(batch);
        const std::size_t vocab = logits.cols();
        for (std::size_t b = b0; b < b1; ++b) {
            for (std::size_t t = 0; t < len; ++t) {
                const float* row = logits.ptr() + ((b - b0) * len + t) * vocab;
                const auto target = static_cast<std::size_t>(tokens[blocks[b].start + t + 1]);
                if (target >= vocab) throw InputError("target token out of vocabulary range");
                double mx = row[0];
                for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
                double z = 0.0;
                for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
                result.total += mx + std::log(z) - row[target];
                ++result.count;
            }
        }
        b0 = b1;
    }
    if (!std::isfinite(result.total)) throw NumericError("non-finite negative log-likelihood");
    return result;
}

LogitsFn dense_logits(const Model& model) {
    return [&model](const TokenBatch& b) { return forward(model, b); };
}

std::vector<Token> bytes_to_tokens(std::string_view bytes) {
    std::vector<Token> out(bytes.size());
    std::transform(bytes.begin(), bytes.end(), out.begin(),
                   [](char c) { return static_cast<Token>(static_cast<unsigned char>(c)); });
    return out;
}

std::vector<Token> read_corpus(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read corpus '" + path.string() + "'");
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty()) throw InputError("corpus '" + path.string() + "' is empty");
    return bytes_to_tokens(bytes);
}

CorpusSplit split_corpus(std::span<const Token> tokens, double heldout_fraction) {
    if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw InputError("heldout fraction must be in [0,1)");
    const auto n_held = static_cast<std::size_t>(std::floor(static_cast<double>(tokens.size()) * heldout_fraction));
    const std::size_t cut = tokens.size() - n_held;
    return {std::vector<Token>(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(cut)),
            std::vector<Token>(tokens.begin() + static_cast<std::ptrdiff_t>(cut), tokens.end())};
}

}  // namespace spon
