#pragma once

#include "spon/artifact.hpp"

#include <cstdint>
#include <span>
#include <vector>

// One-hidden-layer scalar ReLU networks g(x) = sum_j a_j relu(w_j x - tau_j) + c
// and the breakpoint argument separating structured from unstructured pruning.
namespace spon::theory {

struct ReluUnit {
    double a = 0.0;    // output weight
    double tau = 0.0;  // breakpoint for w = 1
    double w = 1.0;    // input weight; 0 for a padding unit
};

struct ReluSum {
    std::vector<ReluUnit> units;
    double c = 0.0;

    double eval(double x) const;
    std::size_t width() const { return units.size(); }
    // Nonzero first-layer parameters (input weights and biases).
    std::size_t first_layer_nonzeros() const;
};

struct Grid {
    double lo = 0.0;
    double hi = 1.0;
    std::size_t n = 2;

    double at(std::size_t i) const;
};

// tau_j = j for j = 1..m, a_j = +-U[0.5, 2], c = 0.
ReluSum construct_gm(std::size_t m, std::uint64_t seed);

// [min tau - 1, max tau + 1] with 50 * width points.
Grid default_grid(const ReluSum& f);

// 1 + number of distinct breakpoints where the slope actually changes.
std::size_t analytic_pieces(const ReluSum& f);
// Maximal runs of constant finite-difference slope on the grid, with adjacent
// kinks merged into one breakpoint.
std::size_t grid_pieces(const ReluSum& f, const Grid& grid);
// Analytic count, cross-checked against the grid. Throws InputError if the
// grid misses a breakpoint or is too coarse, NumericError if the counts differ.
std::size_t count_pieces(const ReluSum& f, const Grid& grid);

struct StructuredFit {
    ReluSum fit;
    double linf = 0.0;
    std::vector<std::size_t> kept;  // indices into f.units
};

// Keeps the m_prime units with the largest |a_j| * grid mass of relu(x - tau_j),
// refits outputs and offset by least squares, and returns the best L-inf fit
// over the nested prefixes of that ranking.
StructuredFit best_structured_fit(const ReluSum& f, std::size_t m_prime, const Grid& grid);

// Pads `f` with zero units up to `width`.
ReluSum embed(const ReluSum& f, std::size_t width);
double linf_distance(const ReluSum& f, const ReluSum& g, const Grid& grid);

struct InclusionReport {
    std::size_t m = 0, m_prime = 0, K = 0;
    bool embed_ok = false;
    std::size_t piece_count = 0;
    std::size_t grid_piece_count = 0;
    double struct_linf_error = 0.0;
    std::uint64_t seed = 0;
    Grid grid;
};

InclusionReport inclusion_demo(std::size_t m, std::size_t m_prime, std::size_t K, std::uint64_t seed);
Json inclusion_to_json(const InclusionReport& r);

}  // namespace spon::theory
