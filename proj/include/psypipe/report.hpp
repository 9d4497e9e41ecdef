#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psypipe/content_analysis.hpp"
#include "psypipe/psychometrics.hpp"
#include "psypipe/stats.hpp"
#include "psypipe/validation.hpp"

namespace psypipe {

// One generator x scorer pairing. Correlations run over the participants
// present in `recovered`; refusal and exclusion counts are echoed from the
// upstream batch so the table can show why participants dropped out.
struct RecoveryRow {
    std::string generator_id;
    std::string scorer_id;
    std::array<std::optional<stats::CorrelationResult>, kNumDomains> domain_r;
    std::optional<double> mean_r;  // arithmetic mean of the six r values
    std::optional<stats::BootstrapResult> bootstrap;
    int n = 0;
    int refusals = 0;
    int exclusions = 0;
    bool self_scoring = false;  // generator == scorer
};

struct RecoveryTable {
    std::vector<RecoveryRow> rows;
    std::optional<double> mean_of_means;  // self-scoring rows excluded
    int self_scoring_excluded = 0;
    std::string config_hash;
};

struct RecoveryOptions {
    bool with_bootstrap = true;
    int bootstrap_resamples = stats::kDefaultBootstrapResamples;
    uint64_t bootstrap_seed = 0;
    int refusals = 0;
    int exclusions = 0;
};

RecoveryRow recovery_report(const std::map<std::string, DomainProfile>& truth,
                            const std::map<std::string, DomainProfile>& recovered,
                            const std::string& generator_id, const std::string& scorer_id,
                            const RecoveryOptions& opts = {});

RecoveryTable combine_recovery_rows(std::vector<RecoveryRow> rows,
                                    const std::string& config_hash);

struct SubscaleRow {
    std::string subscale_id;
    std::optional<stats::CorrelationResult> r;
    bool significant = false;
};

// Subscale recovery with Bonferroni marking at 0.05/15: the six domains and
// nine subscales are treated as one family of fifteen tests.
struct BeyondHexacoTable {
    std::vector<SubscaleRow> rows;
    double alpha_corrected = 0.0;
    int m_tests = 15;
    int n = 0;
};

BeyondHexacoTable beyond_hexaco_report(const std::map<std::string, SubscaleProfile>& truth,
                                       const std::map<std::string, SubscaleProfile>& recovered);

struct MatchingSummary {
    std::string matcher_id;
    MatchResult result;
    int excluded_participants = 0;
};

struct ReportBundle {
    std::optional<RecoveryTable> recovery;
    std::optional<BeyondHexacoTable> beyond;
    std::optional<BiasReport> bias;
    std::vector<MatchingSummary> matching;
    std::optional<ScanReport> leakage;
    double leakage_threshold = 0.7;
    std::optional<ReliabilityReport> reliability;
    std::optional<ConvergentTable> convergent;
    std::optional<CrossContextTable> cross_context;
    std::optional<ReactivityResult> reactivity;
    std::string config_hash;
    std::string config_echo;  // verbatim run configuration, shown at the top
    std::vector<std::string> footnotes;
};

// Human-readable tables, 3 decimal places, degenerate cells spelled out.
std::string render_text(const ReportBundle& bundle);

// Long-format CSV, one row per statistic: table,row,column,statistic,value.
// Values keep full precision; degenerate cells carry the word "degenerate".
std::string render_csv(const ReportBundle& bundle);

struct EmittedReport {
    std::string text_path;
    std::string csv_path;
};

// Writes report.txt and report.csv under out_dir; byte-identical output for
// identical bundles.
EmittedReport emit(const ReportBundle& bundle, const std::string& out_dir);

}  // namespace psypipe
