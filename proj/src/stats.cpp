#include "psypipe/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include "psypipe/hashing.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace psypipe::stats {

namespace {

void check_pair(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size())
        throw SchemaError("correlation inputs differ in length: " +
                          std::to_string(x.size()) + " vs " + std::to_string(y.size()));
    if (x.size() < 3)
        throw SchemaError("correlation requires n >= 3, got " + std::to_string(x.size()));
}

double mean_of(std::span<const double> v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// Plain product-moment r; throws on constant input.
double pearson_r(std::span<const double> x, std::span<const double> y) {
    const size_t n = x.size();
    const double mx = mean_of(x), my = mean_of(y);
    double sxx = 0, syy = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0)
        throw DegenerateInputError("pearson: x is constant");
    if (syy == 0.0)
        throw DegenerateInputError("pearson: y is constant");
    double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

CorrelationResult finish(double r, int n, CorrMethod method) {
    CorrelationResult res;
    res.r = r;
    res.n = n;
    res.method = method;
    res.ci_method = CiMethod::fisher_z;
    if (std::abs(r) >= 1.0) {
        res.p_two_tailed = 0.0;
        res.ci_low = res.ci_high = r;
    } else {
        const double df = n - 2;
        const double t = r * std::sqrt(df / (1.0 - r * r));
        res.p_two_tailed = student_t_two_tailed(t, df);
        if (n >= 4) {
            auto [lo, hi] = fisher_ci(r, n);
            res.ci_low = lo;
            res.ci_high = hi;
        } else {
            res.ci_low = -1.0;
            res.ci_high = 1.0;
        }
    }
    return res;
}

}  // namespace

CorrelationResult pearson(std::span<const double> x, std::span<const double> y) {
    check_pair(x, y);
    return finish(pearson_r(x, y), static_cast<int>(x.size()), CorrMethod::pearson);
}

std::vector<double> average_ranks(std::span<const double> x) {
    const size_t n = x.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        // indices i..j share a tie; mean of 1-based ranks i+1 .. j+1
        const double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

CorrelationResult spearman(std::span<const double> x, std::span<const double> y) {
    check_pair(x, y);
    auto rx = average_ranks(x);
    auto ry = average_ranks(y);
    auto res = finish(pearson_r(rx, ry), static_cast<int>(x.size()), CorrMethod::spearman);
    return res;
}

double pearson_permutation_p(std::span<const double> x, std::span<const double> y) {
    check_pair(x, y);
    if (x.size() > 10)
        throw SchemaError("permutation p is full enumeration; n must be <= 10");
    const double r_obs = std::abs(pearson_r(x, y));
    std::vector<double> perm(y.begin(), y.end());
    std::sort(perm.begin(), perm.end());
    long total = 0, at_least = 0;
    do {
        ++total;
        double r;
        try {
            r = std::abs(pearson_r(x, perm));
        } catch (const DegenerateInputError&) {
            r = 0.0;  // constant permutation of a constant vector cannot happen here
        }
        if (r >= r_obs - 1e-12) ++at_least;
    } while (std::next_permutation(perm.begin(), perm.end()));
    return static_cast<double>(at_least) / static_cast<double>(total);
}

std::pair<double, double> fisher_ci(double r, int n, double level) {
    if (std::abs(r) >= 1.0)
        throw DegenerateInputError("fisher_ci undefined at |r| = 1");
    if (n < 4)
        throw SchemaError("fisher_ci requires n >= 4");
    if (level <= 0.0 || level >= 1.0)
        throw RangeError("confidence level must lie in (0,1)");
    const double z = std::atanh(r);
    const double z_crit = inverse_normal_cdf(0.5 + level / 2.0);
    const double half = z_crit / std::sqrt(static_cast<double>(n - 3));
    return {std::tanh(z - half), std::tanh(z + half)};
}

namespace {

// Mean of the six domain correlations for the participants listed in idx.
// Returns false if any domain column is constant within the resample.
bool resample_mean_r(const std::vector<DomainProfile>& truth,
                     const std::vector<DomainProfile>& recovered,
                     const std::vector<int>& idx, double* out) {
    double sum_r = 0.0;
    std::vector<double> tx(idx.size()), ty(idx.size());
    for (int d = 0; d < kNumDomains; ++d) {
        for (size_t i = 0; i < idx.size(); ++i) {
            tx[i] = truth[idx[i]].values[d];
            ty[i] = recovered[idx[i]].values[d];
        }
        try {
            sum_r += pearson_r(tx, ty);
        } catch (const DegenerateInputError&) {
            return false;
        }
    }
    *out = sum_r / kNumDomains;
    return true;
}

double percentile(std::vector<double> sorted, double p) {
    // linear interpolation between closest ranks (R type 7)
    const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
    const size_t lo = static_cast<size_t>(std::floor(h));
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

BootstrapResult bootstrap_impl(const std::vector<DomainProfile>& truth,
                               const std::vector<DomainProfile>& recovered,
                               int n_resamples, uint64_t seed, double level,
                               bool parallel) {
    if (truth.size() != recovered.size())
        throw AlignmentError("bootstrap inputs differ in participant count");
    const int n = static_cast<int>(truth.size());
    if (n < 10)
        throw SchemaError("bootstrap requires n >= 10 participants");
    if (n_resamples < 1)
        throw RangeError("n_resamples must be >= 1");

    {
        double full;  // point estimate must exist before resampling
        std::vector<int> all(n);
        std::iota(all.begin(), all.end(), 0);
        if (!resample_mean_r(truth, recovered, all, &full))
            throw DegenerateInputError("bootstrap: a domain column is constant");
    }

    std::vector<double> means(n_resamples);
    std::vector<int> discards(n_resamples, 0);

    auto run_one = [&](int b) {
        // Each resample owns its generator so the result does not depend on
        // the number of worker threads.
        std::mt19937_64 rng(SeedChain(seed).mix("bootstrap").mix(static_cast<uint64_t>(b)).value());
        std::uniform_int_distribution<int> pick(0, n - 1);
        std::vector<int> idx(n);
        double mean_r = 0.0;
        for (;;) {
            for (int i = 0; i < n; ++i) idx[i] = pick(rng);
            if (resample_mean_r(truth, recovered, idx, &mean_r)) break;
            ++discards[b];
        }
        means[b] = mean_r;
    };

    if (parallel) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
        for (int b = 0; b < n_resamples; ++b) run_one(b);
    } else {
        for (int b = 0; b < n_resamples; ++b) run_one(b);
    }

    BootstrapResult res;
    res.n_resamples = n_resamples;
    res.n_participants = n;
    res.seed = seed;
    res.discarded = std::accumulate(discards.begin(), discards.end(), 0);
    res.mean_r = mean_of(means);
    std::sort(means.begin(), means.end());
    const double tail = (1.0 - level) / 2.0;
    res.ci_low = percentile(means, tail);
    res.ci_high = percentile(std::move(means), 1.0 - tail);
    return res;
}

}  // namespace

BootstrapResult bootstrap_mean_r(const std::vector<DomainProfile>& truth,
                                 const std::vector<DomainProfile>& recovered,
                                 int n_resamples, uint64_t seed, double level) {
    return bootstrap_impl(truth, recovered, n_resamples, seed, level, true);
}

BootstrapResult bootstrap_mean_r_serial(const std::vector<DomainProfile>& truth,
                                        const std::vector<DomainProfile>& recovered,
                                        int n_resamples, uint64_t seed, double level) {
    return bootstrap_impl(truth, recovered, n_resamples, seed, level, false);
}

ReliabilityResult icc_2_1(const RatingsMatrix& m) {
    const int n = m.n_subjects, k = m.n_raters;
    if (n < 2 || k < 2)
        throw SchemaError("icc_2_1 requires >= 2 subjects and >= 2 raters");
    if (static_cast<int>(m.data.size()) != n * k)
        throw IncompleteInputError("icc_2_1: ratings matrix has missing cells");

    double grand = 0.0;
    std::vector<double> row_mean(n, 0.0), col_mean(k, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
            const double v = m.at(i, j);
            grand += v;
            row_mean[i] += v;
            col_mean[j] += v;
        }
    grand /= n * k;
    for (auto& v : row_mean) v /= k;
    for (auto& v : col_mean) v /= n;

    double ss_rows = 0, ss_cols = 0, ss_err = 0, ss_total = 0;
    for (int i = 0; i < n; ++i) ss_rows += (row_mean[i] - grand) * (row_mean[i] - grand);
    ss_rows *= k;
    for (int j = 0; j < k; ++j) ss_cols += (col_mean[j] - grand) * (col_mean[j] - grand);
    ss_cols *= n;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
            const double resid = m.at(i, j) - row_mean[i] - col_mean[j] + grand;
            ss_err += resid * resid;
            const double dev = m.at(i, j) - grand;
            ss_total += dev * dev;
        }

    ReliabilityResult res;
    res.n_subjects = n;
    res.n_raters = k;
    if (ss_total == 0.0) {
        res.degenerate = true;
        throw DegenerateInputError("icc_2_1: zero total variance");
    }

    const double msr = ss_rows / (n - 1);
    const double msc = ss_cols / (k - 1);
    const double mse = ss_err / (static_cast<double>(n - 1) * (k - 1));
    res.icc = (msr - mse) /
              (msr + (k - 1) * mse + static_cast<double>(k) * (msc - mse) / n);
    return res;
}

double bonferroni(double alpha, int m_tests) {
    if (alpha <= 0.0 || alpha >= 1.0)
        throw RangeError("alpha must lie in (0,1)");
    if (m_tests < 1)
        throw RangeError("m_tests must be >= 1");
    return alpha / m_tests;
}

double binomial_test(int successes, int trials, double p0) {
    if (trials < 1)
        throw RangeError("trials must be >= 1");
    if (successes < 0 || successes > trials)
        throw RangeError("successes must lie in [0, trials]");
    if (p0 <= 0.0 || p0 >= 1.0)
        throw RangeError("p0 must lie in (0,1)");

    // log pmf via lgamma keeps the tails accurate at large n
    const double lp = std::log(p0), lq = std::log1p(-p0);
    const double lg_n1 = std::lgamma(trials + 1.0);
    auto log_pmf = [&](int k) {
        return lg_n1 - std::lgamma(k + 1.0) - std::lgamma(trials - k + 1.0) +
               k * lp + (trials - k) * lq;
    };
    double lower = 0.0, upper = 0.0;
    for (int k = 0; k <= successes; ++k) lower += std::exp(log_pmf(k));
    for (int k = successes; k <= trials; ++k) upper += std::exp(log_pmf(k));
    return std::min(1.0, 2.0 * std::min(lower, upper));
}

std::pair<double, double> mean_sd(std::span<const double> values) {
    if (values.size() < 2)
        throw SchemaError("dispersion requires at least 2 values");
    const double m = mean_of(values);
    double ss = 0.0;
    for (double v : values) ss += (v - m) * (v - m);
    return {m, std::sqrt(ss / (static_cast<double>(values.size()) - 1.0))};
}

Dispersion dispersion(std::span<const double> values) {
    auto [m, sd] = mean_sd(values);
    if (m == 0.0)
        throw DegenerateInputError("dispersion: cv undefined for zero mean");
    return {m, sd, sd / m};
}

// --- special functions ------------------------------------------------------

namespace {

// Continued fraction for the incomplete beta (Lentz's method).
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16;
    constexpr double kTiny = 1e-300;

    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

}  // namespace

double ibeta(double a, double b, double x) {
    if (a <= 0.0 || b <= 0.0)
        throw RangeError("ibeta parameters must be positive");
    if (x < 0.0 || x > 1.0)
        throw RangeError("ibeta argument must lie in [0,1]");
    if (x == 0.0) return 0.0;
    if (x == 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0))
        return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

double student_t_two_tailed(double t, double df) {
    if (df <= 0.0)
        throw RangeError("degrees of freedom must be positive");
    if (std::isinf(t)) return 0.0;
    return ibeta(df / 2.0, 0.5, df / (df + t * t));
}

double inverse_normal_cdf(double p) {
    if (p <= 0.0 || p >= 1.0)
        throw RangeError("inverse_normal_cdf argument must lie in (0,1)");

    // Acklam's rational approximation, then one Halley step against erfc.
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    // Halley refinement: e = Phi(x) - p. Above the median, work with the
    // complementary tail so the residual does not cancel; 1 - p is exact
    // in floating point for p >= 0.5.
    const double e = p <= 0.5
                         ? 0.5 * std::erfc(-x / std::numbers::sqrt2) - p
                         : (1.0 - p) - 0.5 * std::erfc(x / std::numbers::sqrt2);
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
    x = x - u / (1.0 + x * u / 2.0);
    return x;
}

}  // namespace psypipe::stats
