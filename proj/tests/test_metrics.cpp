#include <catch2/catch_amalgamated.hpp>

#include "spottunet/metrics.hpp"
#include "testutil.hpp"

using namespace spottunet;
using namespace spottunet::metrics;

namespace {

BinaryMask random_mask(int h, int w, Rng& rng, double p = 0.5) {
    std::vector<std::uint8_t> v(static_cast<std::size_t>(h) * w);
    for (auto& e : v) e = rng.uniform() < p ? 1 : 0;
    return BinaryMask::from_2d(h, w, std::move(v));
}

// Exhaustive neighbor-check oracle for surface extraction.
std::vector<Coord> surface_oracle(const BinaryMask& m) {
    const int h = m.shape[0], w = m.shape[1];
    std::vector<Coord> out;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            if (!m.values[static_cast<std::size_t>(i) * w + j]) continue;
            bool edge = i == 0 || i == h - 1 || j == 0 || j == w - 1;
            if (!edge) {
                edge = !m.values[static_cast<std::size_t>(i - 1) * w + j] ||
                       !m.values[static_cast<std::size_t>(i + 1) * w + j] ||
                       !m.values[static_cast<std::size_t>(i) * w + j - 1] ||
                       !m.values[static_cast<std::size_t>(i) * w + j + 1];
            }
            if (edge) out.push_back({i, j, 0});
        }
    return out;
}

// O(|A|*|B|) all-pairs distance oracle for the surface dice.
double surface_dice_oracle(const BinaryMask& a, const BinaryMask& b, double tol) {
    auto sa = surface_oracle(a);
    auto sb = surface_oracle(b);
    if (sa.empty() && sb.empty()) return 1.0;
    if (sa.empty() || sb.empty()) return 0.0;
    const double sy = a.spacing[0], sx = a.spacing[1];
    auto within = [&](const Coord& p, const std::vector<Coord>& surf) {
        for (const Coord& q : surf) {
            double dy = (p[0] - q[0]) * sy, dx = (p[1] - q[1]) * sx;
            if (dy * dy + dx * dx <= tol * tol) return true;
        }
        return false;
    };
    std::int64_t hits = 0;
    for (const Coord& p : sa) hits += within(p, sb) ? 1 : 0;
    for (const Coord& p : sb) hits += within(p, sa) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(sa.size() + sb.size());
}

}  // namespace

TEST_CASE("surface extraction basics") {
    BinaryMask single = BinaryMask::from_2d(4, 4, std::vector<std::uint8_t>(16, 0));
    single.values[5] = 1;
    auto s = extract_surface(single);
    REQUIRE(s.size() == 1);
    REQUIRE(s[0] == Coord{1, 1, 0});

    BinaryMask full = BinaryMask::from_2d(5, 5, std::vector<std::uint8_t>(25, 1));
    REQUIRE(extract_surface(full).size() == 16);  // border ring

    BinaryMask empty = BinaryMask::from_2d(5, 5, std::vector<std::uint8_t>(25, 0));
    REQUIRE(extract_surface(empty).empty());
}

TEST_CASE("surface extraction matches the exhaustive oracle on random masks") {
    Rng rng(12);
    for (int rep = 0; rep < 50; ++rep) {
        auto m = random_mask(8, 8, rng);
        auto got = extract_surface(m);
        auto want = surface_oracle(m);
        REQUIRE(got == want);
    }
}

TEST_CASE("surface dice conventions") {
    Rng rng(3);
    auto a = random_mask(8, 8, rng, 0.4);
    REQUIRE(surface_dice(a, a, 1.0).score == 1.0);

    BinaryMask e1 = BinaryMask::from_2d(12, 12, std::vector<std::uint8_t>(144, 0));
    BinaryMask e2 = e1;
    REQUIRE(surface_dice(e1, e2, 1.0).score == 1.0);
    e2.values[5] = 1;
    REQUIRE(surface_dice(e1, e2, 1.0).score == 0.0);

    // two single pixels 10 px apart at 1 mm spacing, tol 1 mm
    BinaryMask p1 = BinaryMask::from_2d(12, 12, std::vector<std::uint8_t>(144, 0));
    BinaryMask p2 = p1;
    p1.values[1 * 12 + 1] = 1;
    p2.values[11 * 12 + 1] = 1;
    REQUIRE(surface_dice(p1, p2, 1.0).score == 0.0);

    BinaryMask bad = BinaryMask::from_2d(6, 6, std::vector<std::uint8_t>(36, 0));
    REQUIRE_THROWS_AS(surface_dice(a, bad, 1.0), DimensionError);
    BinaryMask sp = a;
    sp.spacing = {2.0, 1.0};
    REQUIRE_THROWS_AS(surface_dice(a, sp, 1.0), DimensionError);
}

TEST_CASE("surface dice equals the brute-force oracle on random pairs") {
    Rng rng(77);
    for (int rep = 0; rep < 300; ++rep) {
        int h = 2 + rng.uniform_int(7), w = 2 + rng.uniform_int(7);
        auto a = random_mask(h, w, rng, 0.35);
        auto b = random_mask(h, w, rng, 0.35);
        double tol = rng.uniform(0.5, 3.0);
        double got = surface_dice(a, b, tol).score;
        double want = surface_dice_oracle(a, b, tol);
        REQUIRE(got == want);
    }
}

TEST_CASE("surface dice symmetry, tolerance monotonicity, spacing consistency") {
    Rng rng(9);
    for (int rep = 0; rep < 30; ++rep) {
        auto a = random_mask(8, 8, rng, 0.4);
        auto b = random_mask(8, 8, rng, 0.4);
        REQUIRE(surface_dice(a, b, 1.3).score == surface_dice(b, a, 1.3).score);

        double prev = -1.0;
        for (double tol : {0.5, 1.0, 1.5, 2.5, 4.0}) {
            double s = surface_dice(a, b, tol).score;
            REQUIRE(s >= prev);
            prev = s;
        }

        BinaryMask a2 = a, b2 = b;
        a2.spacing = {2.0, 2.0};
        b2.spacing = {2.0, 2.0};
        REQUIRE(surface_dice(a, b, 1.1).score == surface_dice(a2, b2, 2.2).score);
    }
}

TEST_CASE("surface dice works in 3d") {
    std::vector<std::uint8_t> va(2 * 3 * 4, 0), vb(2 * 3 * 4, 0);
    va[0] = 1;
    vb[1] = 1;  // adjacent along the last axis
    BinaryMask a{{2, 3, 4}, {1, 1, 1}, va};
    BinaryMask b{{2, 3, 4}, {1, 1, 1}, vb};
    REQUIRE(surface_dice(a, b, 1.0).score == 1.0);
    REQUIRE(surface_dice(a, b, 0.5).score == 0.0);
}

TEST_CASE("dice score arithmetic") {
    Rng rng(4);
    auto a = random_mask(8, 8, rng, 0.5);
    REQUIRE(dice_score(a, a) == 1.0);

    BinaryMask z1 = BinaryMask::from_2d(4, 4, std::vector<std::uint8_t>(16, 0));
    BinaryMask z2 = z1;
    REQUIRE(dice_score(z1, z2) == 1.0);
    z1.values[0] = 1;
    z2.values[15] = 1;
    REQUIRE(dice_score(z1, z2) == 0.0);

    // 4-px squares overlapping in 2 px
    BinaryMask s1 = BinaryMask::from_2d(4, 4, std::vector<std::uint8_t>(16, 0));
    BinaryMask s2 = s1;
    s1.values[0] = s1.values[1] = s1.values[4] = s1.values[5] = 1;
    s2.values[1] = s2.values[2] = s2.values[5] = s2.values[6] = 1;
    REQUIRE(dice_score(s1, s2) == 0.5);
}

namespace {

// Independent exact enumeration for the one-sided test, ranks recomputed here.
double wilcoxon_enum_oracle(const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> absd;
    std::vector<int> sgn;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double d = x[i] - y[i];
        if (d == 0) continue;
        absd.push_back(std::abs(d));
        sgn.push_back(d > 0 ? 1 : -1);
    }
    int n = static_cast<int>(absd.size());
    if (n == 0) return 1.0;
    std::vector<double> rank(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double less = 0, equal = 0;
        for (int j = 0; j < n; ++j) {
            if (absd[static_cast<std::size_t>(j)] < absd[static_cast<std::size_t>(i)]) ++less;
            if (absd[static_cast<std::size_t>(j)] == absd[static_cast<std::size_t>(i)]) ++equal;
        }
        rank[static_cast<std::size_t>(i)] = less + (equal + 1.0) / 2.0;
    }
    double wobs = 0;
    for (int i = 0; i < n; ++i)
        if (sgn[static_cast<std::size_t>(i)] > 0) wobs += rank[static_cast<std::size_t>(i)];
    int ge = 0, total = 1 << n;
    for (int m = 0; m < total; ++m) {
        double wsum = 0;
        for (int i = 0; i < n; ++i)
            if (m & (1 << i)) wsum += rank[static_cast<std::size_t>(i)];
        if (wsum >= wobs - 1e-12) ++ge;
    }
    return static_cast<double>(ge) / total;
}

}  // namespace

TEST_CASE("wilcoxon closed cases") {
    std::vector<double> x{1, 2, 3, 4, 5};
    REQUIRE(metrics::wilcoxon_one_sided(x, x) == 1.0);

    std::vector<double> y{0, 1, 2, 3, 4};
    REQUIRE_THAT(metrics::wilcoxon_one_sided(x, y),
                 Catch::Matchers::WithinAbs(1.0 / 32.0, 1e-12));

    REQUIRE_THROWS_AS(metrics::wilcoxon_one_sided(x, std::vector<double>{1.0}), DimensionError);
}

TEST_CASE("wilcoxon matches exhaustive enumeration on random samples") {
    Rng rng(15);
    for (int rep = 0; rep < 100; ++rep) {
        int n = 3 + rng.uniform_int(8);  // up to 10 pairs
        std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            // quantized so ties and zero differences actually occur
            x[static_cast<std::size_t>(i)] = std::round(rng.uniform(0, 6)) / 2.0;
            y[static_cast<std::size_t>(i)] = std::round(rng.uniform(0, 6)) / 2.0;
        }
        double got = metrics::wilcoxon_one_sided(x, y);
        double want = wilcoxon_enum_oracle(x, y);
        REQUIRE_THAT(got, Catch::Matchers::WithinAbs(want, 1e-12));
        REQUIRE(got > 0.0);
        REQUIRE(got <= 1.0);
    }
}

TEST_CASE("wilcoxon anti-symmetry with point mass at the observed statistic") {
    Rng rng(16);
    for (int rep = 0; rep < 40; ++rep) {
        int n = 4 + rng.uniform_int(6);
        std::vector<double> x(static_cast<std::size_t>(n)), y(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            x[static_cast<std::size_t>(i)] = std::round(rng.uniform(0, 8));
            y[static_cast<std::size_t>(i)] = std::round(rng.uniform(0, 8));
        }
        double pxy = metrics::wilcoxon_one_sided(x, y);
        double pyx = metrics::wilcoxon_one_sided(y, x);
        REQUIRE(pxy + pyx >= 1.0 - 1e-12);
        REQUIRE(pxy + pyx <= 2.0);
    }
}

TEST_CASE("wilcoxon normal approximation is sane for larger n") {
    // all positive differences, n = 20: p should be far below 0.001
    std::vector<double> x(20), y(20, 0.0);
    for (int i = 0; i < 20; ++i) x[static_cast<std::size_t>(i)] = 1.0 + i * 0.01;
    double p = metrics::wilcoxon_one_sided(x, y);
    REQUIRE(p < 1e-3);
    REQUIRE(p > 0.0);
    // symmetric noise: p should be moderate
    std::vector<double> a(20), b(20);
    Rng rng(5);
    for (int i = 0; i < 20; ++i) {
        a[static_cast<std::size_t>(i)] = rng.uniform(0, 1);
        b[static_cast<std::size_t>(i)] = rng.uniform(0, 1);
    }
    double p2 = metrics::wilcoxon_one_sided(a, b);
    REQUIRE(p2 > 0.01);
    REQUIRE(p2 <= 1.0);
}
