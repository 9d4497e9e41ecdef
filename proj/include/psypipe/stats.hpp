#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "psypipe/errors.hpp"
#include "psypipe/psychometrics.hpp"

namespace psypipe::stats {

enum class CorrMethod { pearson, spearman };
enum class CiMethod { fisher_z, bootstrap };

struct CorrelationResult {
    double r = 0.0;
    int n = 0;
    double p_two_tailed = 1.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    CorrMethod method = CorrMethod::pearson;
    CiMethod ci_method = CiMethod::fisher_z;
};

// Product-moment correlation with a t-approximation p-value and a Fisher-z
// 95% CI. Throws DegenerateInputError on a constant vector and SchemaError on
// length mismatch or n < 3. |r| = 1 yields p = 0 and a pinned CI endpoint.
CorrelationResult pearson(std::span<const double> x, std::span<const double> y);

// Pearson over mid-ranked data; ties receive the mean of their rank range.
CorrelationResult spearman(std::span<const double> x, std::span<const double> y);

// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> average_ranks(std::span<const double> x);

// Exact permutation two-tailed p for pearson; opt-in for very small n
// (full enumeration, so n must be <= 10).
double pearson_permutation_p(std::span<const double> x, std::span<const double> y);

// CI via z = atanh(r), half-width z_crit/sqrt(n-3), back-transformed by tanh.
// Requires |r| < 1 and n >= 4.
std::pair<double, double> fisher_ci(double r, int n, double level = 0.95);

struct BootstrapResult {
    double mean_r = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    int n_resamples = 0;
    int n_participants = 0;
    int discarded = 0;  // degenerate resamples re-drawn
    uint64_t seed = 0;
};

inline constexpr int kDefaultBootstrapResamples = 10000;

// Participant-level bootstrap of the mean of the six domain correlations.
// Percentile CI. Deterministic for a given seed regardless of thread count:
// each resample draws from its own generator seeded by (seed, index).
BootstrapResult bootstrap_mean_r(const std::vector<DomainProfile>& truth,
                                 const std::vector<DomainProfile>& recovered,
                                 int n_resamples, uint64_t seed,
                                 double level = 0.95);

// Serial reference for the parallel kernel above; must agree bit for bit.
BootstrapResult bootstrap_mean_r_serial(const std::vector<DomainProfile>& truth,
                                        const std::vector<DomainProfile>& recovered,
                                        int n_resamples, uint64_t seed,
                                        double level = 0.95);

struct RatingsMatrix {
    int n_subjects = 0;
    int n_raters = 0;
    std::vector<double> data;  // row-major, subjects x raters

    double& at(int subject, int rater) { return data[subject * n_raters + rater]; }
    double at(int subject, int rater) const { return data[subject * n_raters + rater]; }
};

struct ReliabilityResult {
    double icc = 0.0;
    int n_subjects = 0;
    int n_raters = 0;
    bool degenerate = false;  // zero total variance
};

// ICC(2,1): two-way random effects, absolute agreement, single measure.
//   (MSR - MSE) / (MSR + (k-1) MSE + k (MSC - MSE) / n)
ReliabilityResult icc_2_1(const RatingsMatrix& ratings);

double bonferroni(double alpha, int m_tests);

struct SignificanceConfig {
    double alpha = 0.05;
    int m_tests = 1;
    double threshold() const { return bonferroni(alpha, m_tests); }
};

// Exact two-tailed binomial p: twice the smaller tail probability, capped at 1.
double binomial_test(int successes, int trials, double p0);

struct Dispersion {
    double mean = 0.0;
    double sd = 0.0;  // sample SD, n-1 denominator
    double cv = 0.0;  // sd / mean
};

// Throws DegenerateInputError when mean == 0 (cv undefined).
Dispersion dispersion(std::span<const double> values);

// Mean and sample SD without the cv (usable on zero-mean data).
std::pair<double, double> mean_sd(std::span<const double> values);

// --- special functions ------------------------------------------------------

// Regularized incomplete beta I_x(a, b) by continued fraction; relative
// accuracy ~1e-14 on the tested range.
double ibeta(double a, double b, double x);

// Two-tailed tail probability of Student's t with df degrees of freedom.
double student_t_two_tailed(double t, double df);

// Inverse standard normal CDF, refined with one Halley step against erfc.
double inverse_normal_cdf(double p);

}  // namespace psypipe::stats
