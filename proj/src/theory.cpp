#include "spon/theory.hpp"

#include "spon/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

namespace spon::theory {

double ReluSum::eval(double x) const {
    double y = c;
    for (const ReluUnit& u : units) y += u.a * std::max(u.w * x - u.tau, 0.0);
    return y;
}

std::size_t ReluSum::first_layer_nonzeros() const {
    std::size_t n = 0;
    for (const ReluUnit& u : units) n += (u.w != 0.0) + (u.tau != 0.0);
    return n;
}

double Grid::at(std::size_t i) const {
    return n < 2 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
}

ReluSum construct_gm(std::size_t m, std::uint64_t seed) {
    if (m == 0) throw InputError("construct_gm needs m >= 1");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> mag(0.5, 2.0);
    std::bernoulli_distribution sign(0.5);
    ReluSum f;
    for (std::size_t j = 1; j <= m; ++j) {
        const double a = mag(rng);
        f.units.push_back({sign(rng) ? a : -a, static_cast<double>(j), 1.0});
    }
    return f;
}

namespace {

// Breakpoints of units with w != 0, with the net slope change at each.
std::map<double, double> breakpoints(const ReluSum& f) {
    std::map<double, double> kinks;
    for (const ReluUnit& u : f.units) {
        if (u.w == 0.0) continue;
        // relu(w x - tau) kinks at tau / w with slope change |w| a.
        kinks[u.tau / u.w] += u.a * std::fabs(u.w);
    }
    return kinks;
}

}  // namespace

Grid default_grid(const ReluSum& f) {
    const auto kinks = breakpoints(f);
    if (kinks.empty()) return {-1.0, 1.0, std::max<std::size_t>(50 * f.width(), 50)};
    return {kinks.begin()->first - 1.0, kinks.rbegin()->first + 1.0, 50 * f.width()};
}

std::size_t analytic_pieces(const ReluSum& f) {
    std::size_t pieces = 1;
    for (const auto& [x, d] : breakpoints(f)) pieces += d != 0.0;
    return pieces;
}

std::size_t grid_pieces(const ReluSum& f, const Grid& grid) {
    if (grid.n < 3) throw InputError("grid needs at least 3 points");
    std::vector<double> slope(grid.n - 1);
    double max_slope = 0.0;
    for (std::size_t i = 0; i + 1 < grid.n; ++i) {
        const double x0 = grid.at(i), x1 = grid.at(i + 1);
        slope[i] = (f.eval(x1) - f.eval(x0)) / (x1 - x0);
        max_slope = std::max(max_slope, std::fabs(slope[i]));
    }
    const double tol = 1e-6 * (1.0 + max_slope);
    std::size_t pieces = 1;
    bool in_kink = false;
    for (std::size_t i = 1; i < slope.size(); ++i) {
        const bool kink = std::fabs(slope[i] - slope[i - 1]) > tol;
        if (kink && !in_kink) ++pieces;
        in_kink = kink;
    }
    return pieces;
}

std::size_t count_pieces(const ReluSum& f, const Grid& grid) {
    if (grid.n < 10 * std::max<std::size_t>(f.width(), 1)) throw InputError("grid needs at least 10 points per unit");
    for (const auto& [x, d] : breakpoints(f))
        if (!(x > grid.lo && x < grid.hi)) throw InputError("grid excludes the breakpoint at " + std::to_string(x));
    const std::size_t analytic = analytic_pieces(f);
    const std::size_t measured = grid_pieces(f, grid);
    if (analytic != measured)
        throw NumericError("analytic piece count " + std::to_string(analytic) + " disagrees with grid count " +
                           std::to_string(measured));
    return analytic;
}

double linf_distance(const ReluSum& f, const ReluSum& g, const Grid& grid) {
    double e = 0.0;
    for (std::size_t i = 0; i < grid.n; ++i) {
        const double x = grid.at(i);
        e = std::max(e, std::fabs(f.eval(x) - g.eval(x)));
    }
    return e;
}

namespace {

StructuredFit refit(const ReluSum& f, std::span<const std::size_t> keep, const Grid& grid) {
    const auto n = static_cast<Eigen::Index>(grid.n);
    const auto k = static_cast<Eigen::Index>(keep.size());
    Eigen::MatrixXd A(n, k + 1);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double x = grid.at(static_cast<std::size_t>(i));
        for (Eigen::Index j = 0; j < k; ++j) {
            const ReluUnit& u = f.units[keep[static_cast<std::size_t>(j)]];
            A(i, j) = std::max(u.w * x - u.tau, 0.0);
        }
        A(i, k) = 1.0;
        y(i) = f.eval(x);
    }
    const Eigen::VectorXd coef = A.completeOrthogonalDecomposition().solve(y);
    StructuredFit out;
    out.kept.assign(keep.begin(), keep.end());
    for (Eigen::Index j = 0; j < k; ++j) {
        ReluUnit u = f.units[keep[static_cast<std::size_t>(j)]];
        u.a = coef(j);
        out.fit.units.push_back(u);
    }
    out.fit.c = coef(k);
    out.linf = linf_distance(f, out.fit, grid);
    return out;
}

}  // namespace

StructuredFit best_structured_fit(const ReluSum& f, std::size_t m_prime, const Grid& grid) {
    if (m_prime > f.width()) throw InputError("structured width exceeds the target width");
    if (grid.n < 2) throw InputError("grid needs at least 2 points");
    std::vector<double> score(f.width(), 0.0);
    for (std::size_t j = 0; j < f.width(); ++j) {
        const ReluUnit& u = f.units[j];
        double mass = 0.0;
        for (std::size_t i = 0; i < grid.n; ++i) mass += std::max(u.w * grid.at(i) - u.tau, 0.0);
        score[j] = std::fabs(u.a) * mass;
    }
    std::vector<std::size_t> order(f.width());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return score[x] > score[y]; });

    StructuredFit best = refit(f, {}, grid);
    for (std::size_t k = 1; k <= m_prime; ++k) {
        StructuredFit cand = refit(f, std::span<const std::size_t>(order.data(), k), grid);
        if (cand.linf <= best.linf) best = std::move(cand);
    }
    return best;
}

ReluSum embed(const ReluSum& f, std::size_t width) {
    if (width < f.width()) throw InputError("cannot embed into a narrower network");
    ReluSum g = f;
    g.units.resize(width, ReluUnit{0.0, 0.0, 0.0});
    return g;
}

InclusionReport inclusion_demo(std::size_t m, std::size_t m_prime, std::size_t K, std::uint64_t seed) {
    if (m_prime == 0 || m_prime >= m) throw InputError("need 1 <= m' < m");
    if (K != 2 * m) throw InputError("budget K must equal 2m");
    InclusionReport r;
    r.m = m;
    r.m_prime = m_prime;
    r.K = K;
    r.seed = seed;
    const ReluSum g = construct_gm(m, seed);
    r.grid = default_grid(g);
    r.piece_count = count_pieces(g, r.grid);
    r.grid_piece_count = grid_pieces(g, r.grid);
    const StructuredFit fit = best_structured_fit(g, m_prime, r.grid);
    r.struct_linf_error = fit.linf;

    // A width-m' network padded to width m keeps its nonzero count and values.
    const ReluSum padded = embed(fit.fit, m);
    bool same = padded.first_layer_nonzeros() == fit.fit.first_layer_nonzeros() &&
                padded.first_layer_nonzeros() <= K && g.first_layer_nonzeros() == K;
    for (std::size_t i = 0; i < r.grid.n && same; ++i) same = padded.eval(r.grid.at(i)) == fit.fit.eval(r.grid.at(i));
    r.embed_ok = same;
    return r;
}

Json inclusion_to_json(const InclusionReport& r) {
    Json j = make_artifact("theory_report");
    j["m"] = r.m;
    j["m_prime"] = r.m_prime;
    j["K"] = r.K;
    j["embed_ok"] = r.embed_ok;
    j["piece_count"] = r.piece_count;
    j["grid_piece_count"] = r.grid_piece_count;
    j["struct_linf_error"] = r.struct_linf_error;
    j["seed"] = r.seed;
    j["grid"] = {{"lo", r.grid.lo}, {"hi", r.grid.hi}, {"n", r.grid.n}};
    return j;
}

}  // namespace spon::theory
