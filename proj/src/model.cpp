#include "clearfield/model.hpp"

#include <algorithm>
#include <cmath>

#include "clearfield/errors.hpp"
#include "clearfield/exec.hpp"
#include "clearfield/rng.hpp"

namespace clearfield {

namespace {

// log cosh with a tail-safe evaluation.
double logcosh(double x) {
    const double a = std::abs(x);
    return a + std::log1p(std::exp(-2.0 * a)) - 0.6931471805599453094;
}

double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

void CoefficientBundle::dfdx(double, std::span<const double> x, std::span<const double>,
                             std::span<const double>, std::span<const double>, double* out) const {
    for (std::size_t a = 0; a < x.size(); ++a)
        out[a] = gamma_f * x[a] + (eps_f != 0.0 ? eps_f * std::tanh(x[a]) : 0.0);
}

void CoefficientBundle::dgdx(std::span<const double> x, std::span<const double>,
                             std::span<const double>, double* out) const {
    for (std::size_t a = 0; a < x.size(); ++a)
        out[a] = gamma_g * x[a] + (eps_g != 0.0 ? eps_g * std::tanh(x[a]) : 0.0);
}

void CoefficientBundle::flow(double, std::span<const double> v, std::span<const double>,
                             std::span<const double>, double* out) const {
    for (std::size_t a = 0; a < v.size(); ++a)
        out[a] = gamma_l * v[a] + l0 + (kappa_l != 0.0 ? kappa_l * std::tanh(v[a]) : 0.0);
}

double CoefficientBundle::fbar(double, std::span<const double> x, std::span<const double>,
                               std::span<const double>, std::span<const double>) const {
    double s = 0.0;
    for (double xa : x) s += 0.5 * gamma_f * xa * xa + (eps_f != 0.0 ? eps_f * logcosh(xa) : 0.0);
    return s;
}

double CoefficientBundle::gbar(std::span<const double> x, std::span<const double>,
                               std::span<const double>) const {
    double s = 0.0;
    for (double xa : x) s += 0.5 * gamma_g * xa * xa + (eps_g != 0.0 ? eps_g * logcosh(xa) : 0.0);
    return s;
}

bool MarketModel::homogeneous() const {
    for (const auto& a : agents)
        if (!(a == agents.front())) return false;
    return true;
}

double MarketModel::gamma_compat() const {
    double g = std::numeric_limits<double>::infinity();
    for (const auto& a : agents) {
        double gf = a.gamma_f;
        if (a.lip_Lphi > 0.0) {
            if (a.gamma_l <= 0.0) return -std::numeric_limits<double>::infinity();
            gf -= a.lip_Lphi * a.lip_Lphi / (4.0 * a.gamma_l);
        }
        g = std::min({g, gf, a.gamma_g});
    }
    return g;
}

MarketModel make_market_model(int n, int d0, int d, int N, double T, double delta, Mat Lambda,
                              std::vector<CoefficientBundle> agents, InitialLaw initial_law,
                              ExogenousSpec exogenous) {
    if (n < 1 || N < 1 || d0 < 0 || d < 0) throw InvalidModelError("model: bad dimensions");
    if (!(T > 0)) throw InvalidModelError("model: horizon must be positive");
    if (!(delta >= 0.0) || delta >= 1.0)
        throw InvalidModelError("model: delta must lie in [0, 1) (terminal map divides by 1-delta)");
    if (Lambda.rows() != n || Lambda.cols() != n)
        throw InvalidModelError("model: Lambda must be n x n");
    const double sym_err = (Lambda - Lambda.transpose()).cwiseAbs().maxCoeff();
    if (sym_err > 1e-12 * std::max(1.0, Lambda.cwiseAbs().maxCoeff()))
        throw InvalidModelError("model: Lambda must be symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> eig(Lambda);
    const double lmin = eig.eigenvalues().minCoeff();
    const double lmax = eig.eigenvalues().maxCoeff();
    if (!(lmin > 0))
        throw InvalidModelError("model: Lambda must be positive definite (lambda_min = " +
                                std::to_string(lmin) + ")");
    if (static_cast<int>(agents.size()) != N)
        throw InvalidModelError("model: need exactly N coefficient bundles");
    if (static_cast<int>(initial_law.mean.size()) != n)
        throw InvalidModelError("model: initial law mean must have dimension n");
    if (initial_law.scale < 0) throw InvalidModelError("model: initial law scale must be >= 0");
    auto check_exo = [n](const ExoProcessSpec& spec, int drive_dim, const char* what) {
        if (static_cast<int>(spec.base.size()) != n)
            throw InvalidModelError(std::string("model: ") + what + " base must have dimension n");
        if (spec.w_coeff != 0.0 && drive_dim == 0)
            throw InvalidModelError(std::string("model: ") + what +
                                    " cannot load on a zero-dimensional noise");
    };
    check_exo(exogenous.c0, d0, "c0");
    check_exo(exogenous.c, d, "c");

    MarketModel m;
    m.n = n;
    m.d0 = d0;
    m.d = d;
    m.N = N;
    m.T = T;
    m.delta = delta;
    m.Lambda = std::move(Lambda);
    m.agents = std::move(agents);
    m.initial_law = std::move(initial_law);
    m.exogenous = std::move(exogenous);
    m.Lambda_inv = m.Lambda.llt().solve(Mat::Identity(n, n));
    m.lambda_min = lmin;
    m.lambda_max = lmax;
    return m;
}

CoefficientBundle LQParams::to_bundle() const {
    CoefficientBundle b;
    b.gamma_f = gamma_f;
    b.gamma_g = gamma_g;
    b.gamma_l = gamma_l;
    b.l0 = l0;
    b.sigma0 = sigma0;
    b.sigma = sigma;
    b.lip_Lphi = 0.0;
    b.lip_L = std::max({gamma_f, gamma_g, 0.5 * (gamma_f + gamma_g), gamma_l,
                        std::abs(l0) + std::abs(sigma0) + std::abs(sigma)}) +
              1.0;
    return b;
}

MarketModel LQParams::to_model(int n, int d0, int d, int N, double T, double delta) const {
    InitialLaw law;
    law.family = InitialLaw::Family::Gaussian;
    law.mean.assign(n, m0);
    law.scale = s0;
    ExogenousSpec exo;
    exo.c0.base.assign(n, 0.0);
    exo.c.base.assign(n, 0.0);
    return make_market_model(n, d0, d, N, T, delta, lambda * Mat::Identity(n, n),
                             std::vector<CoefficientBundle>(N, to_bundle()), law, exo);
}

LatticeData materialize_exogenous(const MarketModel& model, const ScenarioLattice& lat) {
    if (lat.agents != model.N || lat.d0 != model.d0 || lat.d != model.d)
        throw ShapeError("materialize_exogenous: lattice does not match the model dimensions");
    LatticeData data;
    data.x0 = model.initial_law.mean;
    data.c0.tag = Adapted::Common;
    data.c0.dim = model.n;
    data.c0.steps.resize(lat.steps + 1);
    const double sq = lat.sqrt_dt;
    for (int k = 0; k <= lat.steps; ++k) {
        const std::uint64_t count = lat.common_nodes_at(k);
        auto& slice = data.c0.steps[k];
        slice.assign(count * model.n, 0.0);
        for (std::uint64_t g = 0; g < count; ++g) {
            // W^0 first-coordinate value from the prefix digits.
            double w = 0.0;
            if (model.exogenous.c0.w_coeff != 0.0) {
                long long ups = 0;
                for (int s = 0; s < k; ++s) {
                    const std::uint64_t gd = (g >> (lat.d0 * (k - 1 - s))) & ((1ull << lat.d0) - 1);
                    ups += (gd & 1ull) ? 1 : -1;
                }
                w = model.exogenous.c0.w_coeff * static_cast<double>(ups) * sq;
            }
            for (int a = 0; a < model.n; ++a)
                slice[g * model.n + a] = model.exogenous.c0.base[a] + w;
        }
    }
    data.c.resize(model.N);
    const bool par = exec::mode() == exec::Mode::Parallel;
    for (int i = 0; i < model.N; ++i) {
        data.c[i] = AdaptedProcess::zeros(lat, model.n);
        for (int k = 0; k <= lat.steps; ++k) {
            const std::uint64_t count = lat.nodes_at(k);
            auto& slice = data.c[i].steps[k];
            const int coord = lat.d0 + i * lat.d;  // first coordinate of W^i
            const double coeff = model.exogenous.c.w_coeff;
#pragma omp parallel for schedule(static) if (par && count > 4096)
            for (long long p = 0; p < static_cast<long long>(count); ++p) {
                const double w =
                    coeff != 0.0 ? coeff * lat.noise_value(static_cast<std::uint64_t>(p), k, coord)
                                 : 0.0;
                for (int a = 0; a < model.n; ++a)
                    slice[p * model.n + a] = model.exogenous.c.base[a] + w;
            }
        }
    }
    return data;
}

void optimal_rate(const MarketModel& model, std::span<const double> y,
                  std::span<const double> phi, double* out) {
    const int n = model.n;
    for (int a = 0; a < n; ++a) {
        double s = 0.0;
        for (int b = 0; b < n; ++b) s += model.Lambda_inv(a, b) * (y[b] + phi[b]);
        out[a] = -s;
    }
}

Vec optimal_rate(const MarketModel& model, const Vec& y, const Vec& phi) {
    return -(model.Lambda_inv * (y + phi));
}

std::vector<Vec> terminal_map(const std::vector<Vec>& g_values, double delta) {
    if (g_values.empty()) throw InvalidModelError("terminal_map: need at least one agent");
    if (!(delta >= 0.0) || delta >= 1.0)
        throw InvalidModelError("terminal_map: delta must lie in [0, 1)");
    Vec mean = Vec::Zero(g_values.front().size());
    for (const auto& g : g_values) mean += g;
    mean /= static_cast<double>(g_values.size());
    std::vector<Vec> out;
    out.reserve(g_values.size());
    const double w = delta / (1.0 - delta);
    for (const auto& g : g_values) out.push_back(w * mean + g);
    return out;
}

double evaluate_cost(const MarketModel& model, const ScenarioLattice& lat, int agent,
                     const AdaptedProcess& alpha, const AdaptedProcess& price) {
    const LatticeData data = materialize_exogenous(model, lat);
    return evaluate_cost(model, lat, agent, alpha, price, data);
}

double evaluate_cost(const MarketModel& model, const ScenarioLattice& lat, int agent,
                     const AdaptedProcess& alpha, const AdaptedProcess& price,
                     const LatticeData& data) {
    const int n = model.n;
    const int M = lat.steps;
    check_full_shape(lat, price, n, "evaluate_cost price");
    if (alpha.tag != Adapted::Full) throw AdaptednessError("evaluate_cost: control must be full-adapted");
    if (alpha.dim != n) throw ShapeError("evaluate_cost: control dimension mismatch");
    if (static_cast<int>(alpha.steps.size()) < M)
        throw ShapeError("evaluate_cost: control must cover steps 0..M-1");
    for (int k = 0; k < M; ++k) {
        if (alpha.steps[k].size() != lat.nodes_at(k) * static_cast<std::uint64_t>(n))
            throw AdaptednessError("evaluate_cost: control slice at step " + std::to_string(k) +
                                   " does not match the lattice");
    }
    const auto& bundle = model.agents.at(agent);
    const bool par = exec::mode() == exec::Mode::Parallel;
    const double dt = lat.dt;
    const std::uint64_t b = lat.branching;

    // Forward state under the given control.
    std::vector<double> X = std::vector<double>(data.x0.begin(), data.x0.end());
    double cost = 0.0;
    std::vector<double> next;
    std::vector<double> terms;
    for (int k = 0; k < M; ++k) {
        const std::uint64_t count = lat.nodes_at(k);
        // Control-cost term at the left endpoint: <phi, alpha> + 0.5 <alpha, Lambda alpha>.
        terms.assign(count, 0.0);
#pragma omp parallel for schedule(static) if (par && count > 2048)
        for (long long p = 0; p < static_cast<long long>(count); ++p) {
            const double* al = alpha.at(k, p);
            const double* ph = price.at(k, p);
            double v = 0.0;
            for (int a = 0; a < n; ++a) {
                v += ph[a] * al[a];
                double la = 0.0;
                for (int c = 0; c < n; ++c) la += model.Lambda(a, c) * al[c];
                v += 0.5 * al[a] * la;
            }
            terms[p] = v;
        }
        cost += det_sum(terms.data(), terms.size()) * lat.node_probability(k) * dt;

        // Euler step to k+1.
        next.assign(lat.nodes_at(k + 1) * n, 0.0);
        const double tk = k * dt;
#pragma omp parallel for schedule(static) if (par && count > 1024)
        for (long long p = 0; p < static_cast<long long>(count); ++p) {
            const std::uint64_t prefix = lat.common_prefix(static_cast<std::uint64_t>(p), k);
            const double* c0 = data.c0.at(k, prefix);
            const double* ci = data.c[agent].at(k, p);
            const double* al = alpha.at(k, p);
            const double* ph = price.at(k, p);
            std::vector<double> drift(n), l(n);
            bundle.flow(tk, std::span(ph, n), std::span(c0, n), std::span(ci, n), l.data());
            const double* xk = X.data() + static_cast<std::uint64_t>(p) * n;
            for (int a = 0; a < n; ++a) drift[a] = xk[a] + (al[a] + l[a]) * dt;
            for (std::uint64_t e = 0; e < b; ++e) {
                double* xn = next.data() + (static_cast<std::uint64_t>(p) * b + e) * n;
                for (int a = 0; a < n; ++a) {
                    double v = drift[a];
                    if (a < lat.d0) v += bundle.vol0_entry(a, a) *
                                         (ScenarioLattice::coord_sign(e, a) * lat.sqrt_dt);
                    if (a < lat.d) v += bundle.vol_entry(a, a) *
                                        (ScenarioLattice::coord_sign(e, lat.d0 + agent * lat.d + a) *
                                         lat.sqrt_dt);
                    xn[a] = v;
                }
            }
        }
        X.swap(next);

        // State-cost term at the right endpoint: fbar(t_{k+1}, X_{k+1}, phi_{k+1}).
        const std::uint64_t count1 = lat.nodes_at(k + 1);
        terms.assign(count1, 0.0);
        const double tk1 = (k + 1) * dt;
#pragma omp parallel for schedule(static) if (par && count1 > 2048)
        for (long long p = 0; p < static_cast<long long>(count1); ++p) {
            const std::uint64_t prefix = lat.common_prefix(static_cast<std::uint64_t>(p), k + 1);
            const double* c0 = data.c0.at(k + 1, prefix);
            const double* ci = data.c[agent].at(k + 1, p);
            const double* xk = X.data() + static_cast<std::uint64_t>(p) * n;
            terms[p] = bundle.fbar(tk1, std::span(xk, n), std::span(price.at(k + 1, p), n),
                                   std::span(c0, n), std::span(ci, n));
        }
        cost += det_sum(terms.data(), terms.size()) * lat.node_probability(k + 1) * dt;
    }

    // Terminal cost: -delta <phi_M, X_M> + gbar(X_M).
    const std::uint64_t leaves = lat.nodes_at(M);
    terms.assign(leaves, 0.0);
#pragma omp parallel for schedule(static) if (par && leaves > 2048)
    for (long long p = 0; p < static_cast<long long>(leaves); ++p) {
        const std::uint64_t prefix = lat.common_prefix(static_cast<std::uint64_t>(p), M);
        const double* c0 = data.c0.at(M, prefix);
        const double* ci = data.c[agent].at(M, p);
        const double* xk = X.data() + static_cast<std::uint64_t>(p) * n;
        const double* ph = price.at(M, p);
        double mark = 0.0;
        for (int a = 0; a < n; ++a) mark += ph[a] * xk[a];
        terms[p] = -model.delta * mark +
                   bundle.gbar(std::span(xk, n), std::span(c0, n), std::span(ci, n));
    }
    cost += det_sum(terms.data(), terms.size()) * lat.node_probability(M);
    return cost;
}

const AssumptionCheck* AssumptionReport::find(const std::string& name) const {
    for (const auto& c : checks)
        if (c.name == name) return &c;
    return nullptr;
}

namespace {

struct Sampler {
    Rng rng;
    double w;
    explicit Sampler(std::uint64_t seed, double width) : rng(seed), w(width) {}
    std::vector<double> vec(int n) {
        std::vector<double> v(n);
        for (auto& x : v) x = rng.next_uniform(-w, w);
        return v;
    }
};

}  // namespace

AssumptionReport validate_assumptions(const MarketModel& model, int samples, std::uint64_t seed,
                                      const ValidationOptions& opts) {
    if (samples < 1) throw DomainError("validate_assumptions: samples must be >= 1");
    AssumptionReport report;
    report.samples = samples;
    report.seed = seed;
    const int n = model.n;
    const double tol = opts.tolerance;
    const double inf = std::numeric_limits<double>::infinity();

    // 3.1(i): exact eigenvalue bounds of Lambda.
    report.checks.push_back({"3.1(i) Lambda SPD", model.lambda_min > 0, model.lambda_min,
                             "lambda_min=" + std::to_string(model.lambda_min) +
                                 " lambda_max=" + std::to_string(model.lambda_max)});
    // 3.1(vi): delta range, exact.
    report.checks.push_back({"3.1(vi) delta in [0,1)",
                             model.delta >= 0.0 && model.delta < 1.0,
                             std::min(model.delta, 1.0 - model.delta), ""});

    double m_growth = inf, m_gradlip = inf, m_gradgrowth = inf;
    double m_convf = inf, m_convg = inf, m_lsgrowth = inf;
    double s_convf = inf, s_convg = inf;  // per-agent slack: modulus - declared
    double m_philip_f = inf, m_philip_l = inf;
    double m_lmono = inf, m_gmono = inf;
    double m_cond_l = inf, m_cond_g = inf;

    Sampler sampler(seed, opts.box_half_width);
    const int tuple = std::max(2, opts.mean_tuple_size);
    std::vector<double> grad1(n), grad2(n), gg1(n), gg2(n), l1(n), l2(n);

    for (int s = 0; s < samples; ++s) {
        const auto& bundle = model.agents[static_cast<std::size_t>(s) % model.agents.size()];
        const double t = sampler.rng.next_uniform(0.0, model.T);
        const auto x = sampler.vec(n), xp = sampler.vec(n);
        const auto phi = sampler.vec(n), phip = sampler.vec(n);
        const auto c0 = sampler.vec(n), c = sampler.vec(n);

        const double fb = bundle.fbar(t, x, phi, c0, c);
        const double gb = bundle.gbar(x, c0, c);
        bundle.dfdx(t, x, phi, c0, c, grad1.data());
        bundle.dfdx(t, xp, phi, c0, c, grad2.data());
        bundle.dgdx(x, c0, c, gg1.data());
        bundle.dgdx(xp, c0, c, gg2.data());
        bundle.flow(t, phi, c0, c, l1.data());
        bundle.flow(t, phip, c0, c, l2.data());

        const double nx = norm2(x), nphi = norm2(phi), nc0 = norm2(c0), nc = norm2(c);
        m_growth = std::min(m_growth, bundle.lip_L * (1 + nx * nx + nphi * nphi + nc0 * nc0 +
                                                      nc * nc) -
                                          (std::abs(fb) + std::abs(gb)));
        double dx2 = 0, dgf = 0, dgg = 0, ipf = 0, ipg = 0;
        for (int a = 0; a < n; ++a) {
            const double dxa = xp[a] - x[a];
            dx2 += dxa * dxa;
            dgf += (grad2[a] - grad1[a]) * (grad2[a] - grad1[a]);
            dgg += (gg2[a] - gg1[a]) * (gg2[a] - gg1[a]);
            ipf += dxa * (grad2[a] - grad1[a]);
            ipg += dxa * (gg2[a] - gg1[a]);
        }
        if (dx2 > 1e-12) {
            const double dxn = std::sqrt(dx2);
            m_gradlip =
                std::min(m_gradlip, bundle.lip_L - (std::sqrt(dgf) + std::sqrt(dgg)) / dxn);
            m_convf = std::min(m_convf, ipf / dx2);
            m_convg = std::min(m_convg, ipg / dx2);
            s_convf = std::min(s_convf, ipf / dx2 - bundle.gamma_f);
            s_convg = std::min(s_convg, ipg / dx2 - bundle.gamma_g);
        }
        m_gradgrowth = std::min(m_gradgrowth,
                                bundle.lip_L * (1 + nx + nphi + nc0 + nc) -
                                    (norm2(grad1) + norm2(gg1)));
        double nl = norm2(l1), nv0 = 0, nv = 0;
        for (int a = 0; a < n; ++a) {
            for (int bb = 0; bb < std::max(model.d0, 1); ++bb)
                if (bb < model.d0) nv0 += bundle.vol0_entry(a, bb) * bundle.vol0_entry(a, bb);
            for (int bb = 0; bb < std::max(model.d, 1); ++bb)
                if (bb < model.d) nv += bundle.vol_entry(a, bb) * bundle.vol_entry(a, bb);
        }
        m_lsgrowth = std::min(m_lsgrowth, bundle.lip_L * (1 + nphi + nc0 + nc) -
                                              (nl + std::sqrt(nv0) + std::sqrt(nv)));

        // 3.2(i): price-Lipschitz of grad_x fbar and of l.
        double dphi2 = 0;
        for (int a = 0; a < n; ++a) dphi2 += (phip[a] - phi[a]) * (phip[a] - phi[a]);
        if (dphi2 > 1e-12) {
            bundle.dfdx(t, x, phip, c0, c, grad2.data());
            double df = 0, dl = 0;
            for (int a = 0; a < n; ++a) {
                df += (grad2[a] - grad1[a]) * (grad2[a] - grad1[a]);
                dl += (l2[a] - l1[a]) * (l2[a] - l1[a]);
            }
            const double dphin = std::sqrt(dphi2);
            m_philip_f = std::min(m_philip_f, bundle.lip_Lphi - std::sqrt(df) / dphin);
            m_philip_l = std::min(m_philip_l, bundle.l_phi_lip() - std::sqrt(dl) / dphin);
        }
    }

    // Empirical-mean monotonicity (3.2(ii)/(iii)) over sampled tuples, using
    // every agent's own l_i / gbar_i as in the displayed inequalities.
    const int tuples = std::max(1, samples / 8);
    const double gamma = model.gamma_compat();
    for (int rep = 0; rep < tuples; ++rep) {
        const double t = sampler.rng.next_uniform(0.0, model.T);
        std::vector<std::vector<double>> xs(tuple), xps(tuple), cs(tuple);
        std::vector<double> xbar(n, 0.0), xpbar(n, 0.0);
        for (int i = 0; i < tuple; ++i) {
            xs[i] = sampler.vec(n);
            xps[i] = sampler.vec(n);
            cs[i] = sampler.vec(n);
            for (int a = 0; a < n; ++a) {
                xbar[a] += xs[i][a] / tuple;
                xpbar[a] += xps[i][a] / tuple;
            }
        }
        const auto c0 = sampler.vec(n);
        double lhs_l = 0.0, dbar2 = 0.0, sum_dx2 = 0.0, lhs_g = 0.0;
        std::vector<double> gbar_mean(n, 0.0), gbar_mean_p(n, 0.0);
        for (int i = 0; i < tuple; ++i) {
            const auto& bundle = model.agents[static_cast<std::size_t>(i) % model.agents.size()];
            bundle.flow(t, xbar, c0, cs[i], l1.data());
            bundle.flow(t, xpbar, c0, cs[i], l2.data());
            bundle.dgdx(xs[i], c0, cs[i], gg1.data());
            bundle.dgdx(xps[i], c0, cs[i], gg2.data());
            for (int a = 0; a < n; ++a) {
                const double dxa = xs[i][a] - xps[i][a];
                lhs_l += (l1[a] - l2[a]) * dxa;
                sum_dx2 += dxa * dxa;
                gbar_mean[a] += gg1[a] / tuple;
                gbar_mean_p[a] += gg2[a] / tuple;
            }
        }
        for (int a = 0; a < n; ++a) {
            const double dbar = xbar[a] - xpbar[a];
            dbar2 += dbar * dbar;
        }
        if (dbar2 > 1e-10) m_lmono = std::min(m_lmono, lhs_l / (tuple * dbar2));
        if (sum_dx2 > 1e-10) {
            for (int i = 0; i < tuple; ++i)
                for (int a = 0; a < n; ++a)
                    lhs_g += (gbar_mean[a] - gbar_mean_p[a]) * (xs[i][a] - xps[i][a]);
            const double w = model.delta / (1.0 - model.delta);
            double min_gg = inf;
            for (const auto& a : model.agents) min_gg = std::min(min_gg, a.gamma_g);
            m_gmono = std::min(m_gmono, (w * lhs_g - (gamma - min_gg) * sum_dx2) / sum_dx2);
        }
    }

    // Assumption 4.1(ii)-(iii): conditional-expectation forms, sampled with a
    // random finite partition playing the role of the sub-sigma-field. Uses
    // the first bundle (the candidate mean-field limit coefficients).
    {
        const auto& bundle = model.agents.front();
        const int groups = 4;
        for (int rep = 0; rep < tuples; ++rep) {
            const double t = sampler.rng.next_uniform(0.0, model.T);
            const int count = tuple;
            std::vector<std::vector<double>> xs(count), xps(count);
            std::vector<int> part(count);
            std::vector<std::vector<double>> gx(groups, std::vector<double>(n, 0.0));
            std::vector<std::vector<double>> gxp(groups, std::vector<double>(n, 0.0));
            std::vector<int> gcount(groups, 0);
            for (int i = 0; i < count; ++i) {
                xs[i] = sampler.vec(n);
                xps[i] = sampler.vec(n);
                part[i] = static_cast<int>(sampler.rng.next_u64() % groups);
                ++gcount[part[i]];
                for (int a = 0; a < n; ++a) {
                    gx[part[i]][a] += xs[i][a];
                    gxp[part[i]][a] += xps[i][a];
                }
            }
            for (int g = 0; g < groups; ++g) {
                if (gcount[g] == 0) continue;
                for (int a = 0; a < n; ++a) {
                    gx[g][a] /= gcount[g];
                    gxp[g][a] /= gcount[g];
                }
            }
            const auto c0 = sampler.vec(n), c = sampler.vec(n);
            double lhs_l = 0.0, rhs_l = 0.0, lhs_g = 0.0, rhs_g = 0.0;
            std::vector<std::vector<double>> gdg(groups, std::vector<double>(n, 0.0));
            for (int i = 0; i < count; ++i) {
                bundle.dgdx(xs[i], c0, c, gg1.data());
                bundle.dgdx(xps[i], c0, c, gg2.data());
                for (int a = 0; a < n; ++a) gdg[part[i]][a] += (gg1[a] - gg2[a]) / gcount[part[i]];
            }
            for (int i = 0; i < count; ++i) {
                bundle.flow(t, gx[part[i]], c0, c, l1.data());
                bundle.flow(t, gxp[part[i]], c0, c, l2.data());
                for (int a = 0; a < n; ++a) {
                    const double dxa = xs[i][a] - xps[i][a];
                    lhs_l += (l1[a] - l2[a]) * dxa / count;
                    lhs_g += gdg[part[i]][a] * dxa / count;
                    rhs_g += dxa * dxa / count;
                }
            }
            for (int g = 0; g < groups; ++g) {
                if (gcount[g] == 0) continue;
                for (int a = 0; a < n; ++a) {
                    const double e = gx[g][a] - gxp[g][a];
                    rhs_l += e * e * gcount[g] / count;
                }
            }
            if (rhs_l > 1e-10) m_cond_l = std::min(m_cond_l, lhs_l / rhs_l);
            if (rhs_g > 1e-10) {
                const double w = model.delta / (1.0 - model.delta);
                m_cond_g =
                    std::min(m_cond_g, (w * lhs_g - (gamma - bundle.gamma_g) * rhs_g) / rhs_g);
            }
        }
    }

    // Two margin conventions: bound checks report the minimal slack
    // (negative = violated); modulus checks report the observed convexity or
    // monotonicity modulus and pass when it reaches the declared constant.
    auto push = [&](const std::string& name, double margin, bool extra_ok = true,
                    const std::string& detail = "") {
        report.checks.push_back({name, extra_ok && margin >= -tol, margin, detail});
    };
    // `observed` is reported as the margin; `slack` (observed minus the
    // declared constant, minimized per agent) decides the verdict.
    auto push_modulus = [&](const std::string& name, double observed, double slack,
                            bool extra_ok = true, const std::string& detail = "") {
        report.checks.push_back(
            {name, extra_ok && slack >= -tol && observed >= -tol, observed, detail});
    };
    push("3.1(ii) cost growth", m_growth);
    push("3.1(iii) gradient x-Lipschitz", m_gradlip);
    push("3.1(iii) gradient growth", m_gradgrowth);
    double min_gf = inf, min_gg = inf, min_gl = inf;
    for (const auto& a : model.agents) {
        min_gf = std::min(min_gf, a.gamma_f);
        min_gg = std::min(min_gg, a.gamma_g);
        min_gl = std::min(min_gl, a.gamma_l);
    }
    push_modulus("3.1(iv) fbar convexity", m_convf == inf ? 0.0 : m_convf,
                 s_convf == inf ? 0.0 : s_convf, min_gf >= 0.0,
                 "observed modulus; declared gamma_f");
    push_modulus("3.1(iv) gbar convexity", m_convg == inf ? 0.0 : m_convg,
                 s_convg == inf ? 0.0 : s_convg, min_gg >= 0.0,
                 "observed modulus; declared gamma_g");
    push("3.1(v) l/sigma growth", m_lsgrowth);
    push("3.2(i) price Lipschitz (grad fbar)", m_philip_f);
    push("3.2(i) price Lipschitz (l)", m_philip_l);
    push_modulus("3.2(ii) flow mean-monotonicity", m_lmono == inf ? 0.0 : m_lmono,
                 (m_lmono == inf ? 0.0 : m_lmono) - min_gl, min_gl > 0,
                 min_gl > 0 ? "" : "gamma_l must be strictly positive");
    push("3.2(iii) gbar mean-monotonicity", m_gmono == inf ? 0.0 : m_gmono);
    push("3.2(iii) gamma compatibility", gamma, gamma > 0,
         "gamma = min((gamma_f - L_phi^2/(4 gamma_l)), gamma_g) = " + std::to_string(gamma));
    push_modulus("4.1(ii) conditional flow monotonicity", m_cond_l == inf ? 0.0 : m_cond_l,
                 (m_cond_l == inf ? 0.0 : m_cond_l) - model.agents.front().gamma_l,
                 model.agents.front().gamma_l > 0,
                 model.homogeneous() ? "" : "heterogeneous model: checked on agent 0");
    push("4.1(iii) conditional gbar monotonicity", m_cond_g == inf ? 0.0 : m_cond_g);

    report.all_pass = true;
    for (const auto& c : report.checks) report.all_pass = report.all_pass && c.pass;
    return report;
}

}  // namespace clearfield
