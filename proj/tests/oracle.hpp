#pragma once

// Independent double-precision reimplementation of the transformer forward
// pass, used as a reference for logits and as a finite-difference oracle.

#include "spon/model.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace spon::test {

class Oracle {
public:
    ModelConfig cfg;
    std::map<std::string, std::vector<double>> p;  // by ModelWeights::named_tensors() name
    SiteMap<std::vector<double>> alpha;
    SiteMap<float> thresholds;
    // Keep patterns per site; when present they replace the threshold test.
    SiteMap<std::vector<unsigned char>> frozen_keep;

    explicit Oracle(const Model& m) : cfg(m.config) {
        for (const auto& [name, t] : m.weights.named_tensors()) p[name] = {t->data().begin(), t->data().end()};
    }

    std::vector<double> logits(const TokenBatch& b) const {
        const std::size_t n = b.batch * b.seq, d = cfg.d_model;
        std::vector<double> x(n * d);
        const auto& te = p.at("tok_emb");
        const auto& pe = p.at("pos_emb");
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                x[i * d + j] = te[static_cast<std::size_t>(b.ids[i]) * d + j] + pe[(i % b.seq) * d + j];
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            const std::string pre = "layers." + std::to_string(l) + ".";
            const auto h = norm(x, n, p.at(pre + "attn_norm"));
            const auto q = site({l, SiteKind::QProj}, h, n);
            const auto k = site({l, SiteKind::KProj}, h, n);
            const auto v = site({l, SiteKind::VProj}, h, n);
            const auto a = attention(q, k, v, b.batch, b.seq);
            const auto o = site({l, SiteKind::OProj}, a, n);
            for (std::size_t i = 0; i < n * d; ++i) x[i] += o[i];
            const auto h2 = norm(x, n, p.at(pre + "mlp_norm"));
            const auto g = site({l, SiteKind::GateProj}, h2, n);
            const auto u = site({l, SiteKind::UpProj}, h2, n);
            std::vector<double> m(g.size());
            for (std::size_t i = 0; i < g.size(); ++i) m[i] = g[i] / (1.0 + std::exp(-g[i])) * u[i];
            const auto dn = site({l, SiteKind::DownProj}, m, n);
            for (std::size_t i = 0; i < n * d; ++i) x[i] += dn[i];
        }
        const auto f = norm(x, n, p.at("final_norm"));
        return mm(f, p.at("unembed"), n, d, cfg.vocab_size);
    }

    // Mean next-token cross-entropy of targets[i] at position i.
    double loss(const TokenBatch& b, const std::vector<Token>& targets) const {
        const auto z = logits(b);
        const std::size_t v = cfg.vocab_size;
        double total = 0.0;
        for (std::size_t i = 0; i < targets.size(); ++i) {
            double mx = z[i * v];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, z[i * v + j]);
            double s = 0.0;
            for (std::size_t j = 0; j < v; ++j) s += std::exp(z[i * v + j] - mx);
            total += mx + std::log(s) - z[i * v + static_cast<std::size_t>(targets[i])];
        }
        return total / static_cast<double>(targets.size());
    }

private:
    static std::vector<double> mm(const std::vector<double>& a, const std::vector<double>& w, std::size_t n,
                                  std::size_t din, std::size_t dout) {
        std::vector<double> y(n * dout, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < din; ++k)
                for (std::size_t j = 0; j < dout; ++j) y[i * dout + j] += a[i * din + k] * w[k * dout + j];
        return y;
    }

    std::vector<double> norm(const std::vector<double>& x, std::size_t n, const std::vector<double>& g) const {
        const std::size_t d = g.size();
        std::vector<double> y(x.size());
        for (std::size_t i = 0; i < n; ++i) {
            double ms = 0.0;
            for (std::size_t j = 0; j < d; ++j) ms += x[i * d + j] * x[i * d + j];
            const double inv = 1.0 / std::sqrt(ms / static_cast<double>(d) + cfg.rms_eps);
            for (std::size_t j = 0; j < d; ++j) y[i * d + j] = x[i * d + j] * inv * g[j];
        }
        return y;
    }

    std::vector<double> site(const LinearSite& s, std::vector<double> x, std::size_t n) const {
        const std::size_t din = site_in_dim(cfg, s.kind), dout = site_out_dim(cfg, s.kind);
        if (auto it = frozen_keep.find(s); it != frozen_keep.end()) {
            for (std::size_t i = 0; i < x.size(); ++i)
                if (!it->second[i]) x[i] = 0.0;
        } else if (auto t = thresholds.find(s); t != thresholds.end()) {
            for (double& v : x)
                if (!(std::fabs(v) > t->second)) v = 0.0;
        }
        if (auto a = alpha.find(s); a != alpha.end())
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < din; ++j) x[i * din + j] += a->second[j];
        auto y = mm(x, p.at(s.name() + ".weight"), n, din, dout);
        if (auto b = p.find(s.name() + ".bias"); b != p.end())
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < dout; ++j) y[i * dout + j] += b->second[j];
        return y;
    }

    std::vector<double> attention(const std::vector<double>& q, const std::vector<double>& k,
                                  const std::vector<double>& v, std::size_t batch, std::size_t seq) const {
        const std::size_t d = cfg.d_model, heads = cfg.n_heads, dh = d / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> out(batch * seq * d, 0.0);
        std::vector<double> w(seq);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t t = 0; t < seq; ++t) {
                    double mx = -1e300;
                    for (std::size_t s = 0; s <= t; ++s) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < dh; ++j)
                            dot += q[(b * seq + t) * d + h * dh + j] * k[(b * seq + s) * d + h * dh + j];
                        w[s] = dot * scale;
                        mx = std::max(mx, w[s]);
                    }
                    double z = 0.0;
                    for (std::size_t s = 0; s <= t; ++s) z += (w[s] = std::exp(w[s] - mx));
                    for (std::size_t s = 0; s <= t; ++s)
                        for (std::size_t j = 0; j < dh; ++j)
                            out[(b * seq + t) * d + h * dh + j] += w[s] / z * v[(b * seq + s) * d + h * dh + j];
                }
        return out;
    }
};

// Records the keep pattern the float forward pass applies at each profiled site.
class KeepRecorder final : public SiteObserver {
public:
    explicit KeepRecorder(const SiteMap<float>& thresholds) : thresholds_(thresholds) {}
    void on_site_input(const LinearSite& site, const Tensor& input) override {
        auto it = thresholds_.find(site);
        if (it == thresholds_.end()) return;
        auto& k = keep[site];
        k.resize(input.numel());
        for (std::size_t i = 0; i < input.numel(); ++i) k[i] = std::fabs(input[i]) > it->second;
    }
    SiteMap<std::vector<unsigned char>> keep;

private:
    const SiteMap<float>& thresholds_;
};

}  // namespace spon::test
