#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <unordered_map>

#include "spottunet/core/tensor.hpp"

namespace spottunet::metrics {

/// Binary mask over a 2- or 3-axis grid with physical spacing in mm.
struct BinaryMask {
    std::vector<int> shape;
    std::vector<double> spacing;
    std::vector<std::uint8_t> values;

    int ndim() const { return static_cast<int>(shape.size()); }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        return n;
    }

    void validate() const {
        if (shape.size() != 2 && shape.size() != 3)
            throw DimensionError("mask must have 2 or 3 axes");
        if (spacing.size() != shape.size())
            throw DimensionError("spacing rank does not match mask rank");
        for (double s : spacing)
            if (!(s > 0.0)) throw ConfigError("spacing must be strictly positive");
        if (static_cast<std::int64_t>(values.size()) != numel())
            throw DimensionError("mask value count does not match shape");
        for (auto v : values)
            if (v > 1) throw ConfigError("mask entries must be exactly 0 or 1");
    }

    static BinaryMask from_2d(int h, int w, std::vector<std::uint8_t> vals, double sy = 1.0,
                              double sx = 1.0) {
        return BinaryMask{{h, w}, {sy, sx}, std::move(vals)};
    }
};

struct SurfaceDiceResult {
    double score = 0.0;
    double tolerance_mm = 0.0;
};

using Coord = std::array<int, 3>;  // unused trailing axes stay 0

/// Foreground elements with at least one face-adjacent background or
/// out-of-bounds neighbor (the array edge counts as background).
inline std::vector<Coord> extract_surface(const BinaryMask& mask) {
    mask.validate();
    const int nd = mask.ndim();
    std::array<int, 3> dims = {1, 1, 1};
    for (int a = 0; a < nd; ++a) dims[static_cast<std::size_t>(a)] = mask.shape[static_cast<std::size_t>(a)];
    auto at = [&](int i, int j, int k) {
        return mask.values[(static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k];
    };
    std::vector<Coord> surface;
    for (int i = 0; i < dims[0]; ++i)
        for (int j = 0; j < dims[1]; ++j)
            for (int k = 0; k < dims[2]; ++k) {
                if (!at(i, j, k)) continue;
                bool boundary = false;
                for (int a = 0; a < nd && !boundary; ++a) {
                    Coord c = {i, j, k};
                    for (int d : {-1, +1}) {
                        Coord q = c;
                        q[static_cast<std::size_t>(a)] += d;
                        if (q[static_cast<std::size_t>(a)] < 0 ||
                            q[static_cast<std::size_t>(a)] >= dims[static_cast<std::size_t>(a)] ||
                            !at(q[0], q[1], q[2])) {
                            boundary = true;
                            break;
                        }
                    }
                }
                if (boundary) surface.push_back({i, j, k});
            }
    return surface;
}

namespace detail_metrics {

inline double dist2_mm(const Coord& a, const Coord& b, const std::array<double, 3>& sp) {
    double acc = 0.0;
    for (int k = 0; k < 3; ++k) {
        double d = (a[static_cast<std::size_t>(k)] - b[static_cast<std::size_t>(k)]) *
                   sp[static_cast<std::size_t>(k)];
        acc += d * d;
    }
    return acc;
}

/// Count of points in `from` within tolerance of some point in `to`,
/// via a uniform grid of tol-sized cells over the mm coordinates.
inline std::int64_t count_within(const std::vector<Coord>& from, const std::vector<Coord>& to,
                                 const std::array<double, 3>& sp, double tol) {
    if (to.empty()) return 0;
    const double tol2 = tol * tol;
    auto cell_of = [&](const Coord& c) {
        std::array<std::int64_t, 3> cell;
        for (int k = 0; k < 3; ++k)
            cell[static_cast<std::size_t>(k)] = static_cast<std::int64_t>(
                std::floor(c[static_cast<std::size_t>(k)] * sp[static_cast<std::size_t>(k)] / tol));
        return cell;
    };
    auto key_of = [](const std::array<std::int64_t, 3>& cell) {
        return (static_cast<std::uint64_t>(cell[0]) * 0x9e3779b97f4a7c15ULL) ^
               (static_cast<std::uint64_t>(cell[1]) * 0xc2b2ae3d27d4eb4fULL) ^
               (static_cast<std::uint64_t>(cell[2]) * 0x165667b19e3779f9ULL);
    };
    std::unordered_map<std::uint64_t, std::vector<std::int32_t>> grid;
    grid.reserve(to.size() * 2);
    for (std::size_t i = 0; i < to.size(); ++i)
        grid[key_of(cell_of(to[i]))].push_back(static_cast<std::int32_t>(i));

    std::int64_t hits = 0;
    for (const Coord& s : from) {
        auto base = cell_of(s);
        bool found = false;
        for (std::int64_t di = -1; di <= 1 && !found; ++di)
            for (std::int64_t dj = -1; dj <= 1 && !found; ++dj)
                for (std::int64_t dk = -1; dk <= 1 && !found; ++dk) {
                    auto it = grid.find(key_of({base[0] + di, base[1] + dj, base[2] + dk}));
                    if (it == grid.end()) continue;
                    for (std::int32_t idx : it->second)
                        if (dist2_mm(s, to[static_cast<std::size_t>(idx)], sp) <= tol2) {
                            found = true;
                            break;
                        }
                }
        if (found) ++hits;
    }
    return hits;
}

}  // namespace detail_metrics

/// Symmetric surface Dice at a distance tolerance: the fraction of boundary
/// elements of each mask lying within `tolerance_mm` of the other mask's
/// boundary. 1.0 when both surfaces are empty, 0.0 when exactly one is.
inline SurfaceDiceResult surface_dice(const BinaryMask& a, const BinaryMask& b,
                                      double tolerance_mm) {
    if (!(tolerance_mm > 0.0)) throw ConfigError("tolerance must be positive");
    a.validate();
    b.validate();
    if (a.shape != b.shape) throw DimensionError("surface_dice: shape mismatch");
    if (a.spacing != b.spacing) throw DimensionError("surface_dice: spacing mismatch");

    auto sa = extract_surface(a);
    auto sb = extract_surface(b);
    SurfaceDiceResult res;
    res.tolerance_mm = tolerance_mm;
    if (sa.empty() && sb.empty()) {
        res.score = 1.0;
        return res;
    }
    if (sa.empty() || sb.empty()) {
        res.score = 0.0;
        return res;
    }
    std::array<double, 3> sp = {1.0, 1.0, 1.0};
    for (std::size_t k = 0; k < a.spacing.size(); ++k) sp[k] = a.spacing[k];
    const std::int64_t hits_a = detail_metrics::count_within(sa, sb, sp, tolerance_mm);
    const std::int64_t hits_b = detail_metrics::count_within(sb, sa, sp, tolerance_mm);
    res.score = static_cast<double>(hits_a + hits_b) /
                static_cast<double>(sa.size() + sb.size());
    return res;
}

/// Standard (volumetric) Dice: 2|a n b| / (|a| + |b|); 1.0 when both empty.
inline double dice_score(const BinaryMask& a, const BinaryMask& b) {
    a.validate();
    b.validate();
    if (a.shape != b.shape) throw DimensionError("dice_score: shape mismatch");
    std::int64_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        na += a.values[i];
        nb += b.values[i];
        inter += a.values[i] & b.values[i];
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

/// One-sided Wilcoxon signed-rank test of H1: x > y on paired samples.
/// Zero differences are dropped (p = 1 when none remain), ties get midranks;
/// exact enumeration for n <= 12 nonzero pairs, normal approximation with tie
/// correction beyond.
inline double wilcoxon_one_sided(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw DimensionError("wilcoxon: length mismatch");
    if (x.empty()) throw DimensionError("wilcoxon: empty samples");

    std::vector<double> absd;
    std::vector<int> sign;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double d = x[i] - y[i];
        if (d == 0.0) continue;
        absd.push_back(std::abs(d));
        sign.push_back(d > 0 ? 1 : -1);
    }
    const int n = static_cast<int>(absd.size());
    if (n == 0) return 1.0;

    // midranks of |d|, doubled so ties stay integral
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    std::sort(order.begin(), order.end(),
              [&](int i, int j) { return absd[static_cast<std::size_t>(i)] < absd[static_cast<std::size_t>(j)]; });
    std::vector<std::int64_t> rank2(static_cast<std::size_t>(n));
    std::vector<std::int64_t> tie_sizes;
    for (int i = 0; i < n;) {
        int j = i;
        while (j < n && absd[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])] ==
                            absd[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])])
            ++j;
        const std::int64_t r2 = (i + 1) + j;  // 2 * midrank of the tied group
        for (int k = i; k < j; ++k) rank2[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = r2;
        tie_sizes.push_back(j - i);
        i = j;
    }

    std::int64_t w2 = 0;  // 2 * W+
    for (int i = 0; i < n; ++i)
        if (sign[static_cast<std::size_t>(i)] > 0) w2 += rank2[static_cast<std::size_t>(i)];

    if (n <= 12) {
        std::int64_t ge = 0;
        const std::uint32_t total = 1u << n;
        for (std::uint32_t m = 0; m < total; ++m) {
            std::int64_t s = 0;
            for (int i = 0; i < n; ++i)
                if (m & (1u << i)) s += rank2[static_cast<std::size_t>(i)];
            if (s >= w2) ++ge;
        }
        return static_cast<double>(ge) / static_cast<double>(total);
    }

    const double dn = static_cast<double>(n);
    const double mu = dn * (dn + 1.0) / 4.0;
    double var = dn * (dn + 1.0) * (2.0 * dn + 1.0) / 24.0;
    for (std::int64_t t : tie_sizes) var -= static_cast<double>(t * t * t - t) / 48.0;
    const double w = static_cast<double>(w2) / 2.0;
    const double z = (w - mu - 0.5) / std::sqrt(var);
    double p = 0.5 * std::erfc(z / std::sqrt(2.0));
    return std::min(std::max(p, 1e-300), 1.0);
}

}  // namespace spottunet::metrics
