#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <vector>

#include "clearfield/errors.hpp"
#include "clearfield/metrics.hpp"
#include "clearfield/rng.hpp"

using namespace clearfield;

namespace {

EmpiricalMeasure cloud(int dim, std::vector<double> pts) {
    EmpiricalMeasure m;
    m.dim = dim;
    m.points = std::move(pts);
    return m;
}

}  // namespace

TEST_CASE("normal inverse cdf") {
    CHECK(normal_ppf(0.5) == doctest::Approx(0.0).epsilon(1e-15));
    for (double u : {0.01, 0.1, 0.3, 0.7, 0.975, 0.9999}) {
        CHECK(normal_cdf(normal_ppf(u)) == doctest::Approx(u).epsilon(1e-12));
    }
}

TEST_CASE("w2_empirical_1d") {
    SUBCASE("identical samples") {
        auto a = cloud(1, {0.3, -1.0, 2.0});
        CHECK(w2_empirical_1d(a, a) == 0.0);
    }
    SUBCASE("{0,2} vs {1,3} has squared distance 1") {
        // Brute force over both couplings of 2 atoms: (0-1)^2+(2-3)^2 = 2 and
        // (0-3)^2+(2-1)^2 = 10; the optimum averages to 1.
        auto a = cloud(1, {0.0, 2.0});
        auto b = cloud(1, {1.0, 3.0});
        const double d = w2_empirical_1d(a, b);
        CHECK(d * d == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("same multiset in different order") {
        auto a = cloud(1, {0.0, 1.0});
        auto b = cloud(1, {1.0, 0.0});
        CHECK(w2_empirical_1d(a, b) == 0.0);
    }
    SUBCASE("size mismatch is a shape error") {
        auto a = cloud(1, {0.0, 1.0});
        auto b = cloud(1, {1.0});
        CHECK_THROWS_AS(w2_empirical_1d(a, b), ShapeError);
    }
}

TEST_CASE("w2_empirical_assignment") {
    Rng rng(31);
    SUBCASE("identical clouds") {
        auto a = cloud(2, {0, 0, 1, 1, 2, 0});
        CHECK(w2_empirical_assignment(a, a) == doctest::Approx(0.0).epsilon(1e-15));
    }
    SUBCASE("three atoms in the plane match permutation brute force") {
        for (int rep = 0; rep < 25; ++rep) {
            std::vector<double> pa(6), pb(6);
            for (auto& v : pa) v = rng.next_uniform(-2, 2);
            for (auto& v : pb) v = rng.next_uniform(-2, 2);
            auto a = cloud(2, pa), b = cloud(2, pb);
            const double d = w2_empirical_assignment(a, b);
            // All 6 permutations of 3 atoms.
            std::vector<int> perm{0, 1, 2};
            double best = 1e300;
            do {
                double s = 0;
                for (int i = 0; i < 3; ++i)
                    for (int c = 0; c < 2; ++c) {
                        const double diff = pa[i * 2 + c] - pb[perm[i] * 2 + c];
                        s += diff * diff;
                    }
                best = std::min(best, s / 3.0);
            } while (std::next_permutation(perm.begin(), perm.end()));
            CHECK(d * d == doctest::Approx(best).epsilon(1e-12));
        }
    }
    SUBCASE("n = 1 agrees with the sorting route") {
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<double> pa(12), pb(12);
            for (auto& v : pa) v = rng.next_uniform(-3, 3);
            for (auto& v : pb) v = rng.next_uniform(-3, 3);
            auto a = cloud(1, pa), b = cloud(1, pb);
            CHECK(std::abs(w2_empirical_assignment(a, b) - w2_empirical_1d(a, b)) < 1e-12);
        }
    }
    SUBCASE("capacity guard") {
        auto a = cloud(1, std::vector<double>(8, 0.0));
        CHECK_THROWS_AS(w2_empirical_assignment(a, a, 4), CapacityError);
    }
    SUBCASE("metric axioms on random triples") {
        for (int rep = 0; rep < 10; ++rep) {
            std::vector<double> pa(16), pb(16), pc(16);
            for (auto* v : {&pa, &pb, &pc})
                for (auto& e : *v) e = rng.next_uniform(-2, 2);
            auto a = cloud(2, pa), b = cloud(2, pb), c = cloud(2, pc);
            const double ab = w2_empirical_assignment(a, b);
            const double ba = w2_empirical_assignment(b, a);
            const double bc = w2_empirical_assignment(b, c);
            const double ac = w2_empirical_assignment(a, c);
            CHECK(std::abs(ab - ba) <= 1e-10);
            CHECK(ac <= ab + bc + 1e-10);
        }
    }
    SUBCASE("mean inequality |m(mu)-m(nu)| <= W2") {
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<double> pa(10), pb(10);
            for (auto& v : pa) v = rng.next_uniform(-2, 2);
            for (auto& v : pb) v = rng.next_uniform(-2, 2);
            auto a = cloud(2, pa), b = cloud(2, pb);
            const auto ma = a.mean(), mb = b.mean();
            const double dm = std::hypot(ma[0] - mb[0], ma[1] - mb[1]);
            CHECK(dm <= w2_empirical_assignment(a, b) + 1e-12);
        }
    }
    SUBCASE("coupling bound via paired samples") {
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<double> pa(10), pb(10);
            for (auto& v : pa) v = rng.next_uniform(-2, 2);
            for (auto& v : pb) v = rng.next_uniform(-2, 2);
            auto a = cloud(1, pa), b = cloud(1, pb);
            double identity = 0.0;
            for (int i = 0; i < 10; ++i) identity += (pa[i] - pb[i]) * (pa[i] - pb[i]) / 10.0;
            const double d = w2_empirical_1d(a, b);
            CHECK(d * d <= identity + 1e-12);
        }
    }
}

TEST_CASE("w2_empirical_vs_gaussian_1d") {
    SUBCASE("point mass cases") {
        auto a = cloud(1, {1.0, 1.0, 1.0});
        CHECK(w2_empirical_vs_gaussian_1d(a, 1.0, 0.0) == 0.0);
        auto b = cloud(1, {0.0, 2.0});
        const double d = w2_empirical_vs_gaussian_1d(b, 1.0, 0.0);
        CHECK(d * d == doctest::Approx(1.0).epsilon(1e-15));
    }
    SUBCASE("matches a brute-force quantile quadrature") {
        Rng rng(8);
        std::vector<double> pts(16);
        for (auto& v : pts) v = rng.next_uniform(-2, 2);
        auto a = cloud(1, pts);
        const double mean = 0.3, sd = 1.4;
        const double d = w2_empirical_vs_gaussian_1d(a, mean, sd);
        // Midpoint rule with many subdivisions per quantile segment.
        std::sort(pts.begin(), pts.end());
        const int sub = 20000;
        double acc = 0.0;
        for (int i = 0; i < 16; ++i) {
            for (int j = 0; j < sub; ++j) {
                const double u = (i + (j + 0.5) / sub) / 16.0;
                const double diff = pts[i] - (mean + sd * normal_ppf(u));
                acc += diff * diff / (16.0 * sub);
            }
        }
        CHECK(d * d == doctest::Approx(acc).epsilon(1e-5));
    }
    SUBCASE("large standard-normal samples shrink with N") {
        Rng rng(9);
        double prev = 1e9;
        for (int N : {100, 1000, 10000}) {
            double acc = 0.0;
            const int reps = 20;
            for (int r = 0; r < reps; ++r) {
                std::vector<double> pts(N);
                for (auto& v : pts) v = rng.next_normal();
                acc += std::pow(w2_empirical_vs_gaussian_1d(cloud(1, std::move(pts)), 0, 1), 2);
            }
            acc /= reps;
            CHECK(acc < prev);
            prev = acc;
        }
    }
    SUBCASE("segment-table fast path agrees with the general routine") {
        Rng rng(10);
        const int N = 257;
        std::vector<double> pts(N);
        for (auto& v : pts) v = rng.next_normal();
        auto a = cloud(1, pts);
        const double slow = w2_empirical_vs_gaussian_1d(a, 0.2, 0.8);
        std::sort(pts.begin(), pts.end());
        GaussianSegmentTable table(N);
        const double fast = w2sq_sorted_vs_gaussian(pts, 0.2, 0.8, table);
        CHECK(fast == doctest::Approx(slow * slow).epsilon(1e-12));
    }
}

TEST_CASE("w2_discrete_1d") {
    SUBCASE("uniform equal-size case matches the sorting route") {
        Rng rng(12);
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<double> pa(8), pb(8), w(8, 0.125);
            for (auto& v : pa) v = rng.next_uniform(-2, 2);
            for (auto& v : pb) v = rng.next_uniform(-2, 2);
            const double d1 = w2_discrete_1d(pa, w, pb, w);
            const double d2 = w2_empirical_1d(cloud(1, pa), cloud(1, pb));
            CHECK(d1 == doctest::Approx(d2).epsilon(1e-12));
        }
    }
    SUBCASE("weighted atoms against a split copy") {
        std::vector<double> pa{0.0, 1.0}, wa{0.5, 0.5};
        std::vector<double> pb{0.0, 0.0, 1.0, 1.0}, wb{0.25, 0.25, 0.25, 0.25};
        CHECK(w2_discrete_1d(pa, wa, pb, wb) == 0.0);
    }
}

TEST_CASE("epsilon_N") {
    CHECK(epsilon_N(1, 100) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(epsilon_N(6, 64) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(epsilon_N(4, 100) == doctest::Approx(0.1 * (1 + std::log(100.0))).epsilon(1e-12));
    SUBCASE("monotone in N, nonincreasing accuracy in n") {
        for (int n : {1, 2, 4, 5, 8}) {
            double prev = 1e9;
            for (std::int64_t N : {10, 100, 1000}) {
                const double e = epsilon_N(n, N);
                CHECK(e < prev);
                prev = e;
            }
        }
        for (std::int64_t N : {10, 100}) {
            CHECK(epsilon_N(5, N) >= epsilon_N(4, N) / (1 + std::log(double(N))) - 1e-15);
            CHECK(epsilon_N(6, N) >= epsilon_N(5, N) - 1e-15);
        }
    }
    SUBCASE("domain errors") {
        CHECK_THROWS_AS(epsilon_N(0, 10), DomainError);
        CHECK_THROWS_AS(epsilon_N(1, 1), DomainError);
    }
}

TEST_CASE("fit_loglog_slope") {
    SUBCASE("exact power law") {
        std::vector<std::pair<double, double>> pts;
        for (double N : {10.0, 100.0, 1000.0, 10000.0})
            pts.emplace_back(N, 3.0 * std::pow(N, -0.5));
        const auto fit = fit_loglog_slope(pts);
        CHECK(fit.slope == doctest::Approx(-0.5).epsilon(1e-12));
        CHECK(fit.residual <= 1e-12);
    }
    SUBCASE("constant values give slope zero") {
        std::vector<std::pair<double, double>> pts{{10, 2.0}, {100, 2.0}, {1000, 2.0}};
        CHECK(fit_loglog_slope(pts).slope == doctest::Approx(0.0).epsilon(1e-14));
    }
    SUBCASE("nonpositive values are rejected") {
        std::vector<std::pair<double, double>> pts{{10, 1.0}, {100, 0.0}, {1000, 2.0}};
        CHECK_THROWS_AS(fit_loglog_slope(pts), DomainError);
    }
}
