#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psypipe/data_model.hpp"
#include "psypipe/gateway.hpp"
#include "psypipe/pipeline.hpp"
#include "psypipe/psychometrics.hpp"
#include "psypipe/stats.hpp"

namespace psypipe {

struct FeatureDef {
    std::string name;
    std::array<std::string, 5> anchors;  // 1..5 Likert anchor texts
};

struct FeatureRubric {
    std::string rubric_id;
    std::vector<FeatureDef> features;

    void validate() const;  // unique names, every anchor non-empty
    std::vector<std::string> feature_names() const;
    const FeatureDef& feature(const std::string& name) const;
    static FeatureRubric from_json_text(const std::string& text, const std::string& origin);
    static FeatureRubric load(const std::string& path);
};

// Unit references are "<participant_id>#<unit tag>"; narrative sections use
// "<pid>#s<NN>#<prompt_id>" so lexicographic order matches section order.
struct FeatureCoding {
    std::string unit_ref;
    std::string annotator_id;
    std::map<std::string, int> ratings;  // feature name -> Likert 1..5
};

enum class FeatureContext { narrative, conversation };

struct ParticipantFeatureSummary {
    std::string participant_id;
    FeatureContext context = FeatureContext::narrative;
    std::map<std::string, double> feature_means;      // annotator- then unit-averaged
    std::map<std::string, double> feature_within_sd;  // SD across units
    int units = 0;
};

struct CodingReport {
    std::vector<FeatureCoding> codings;
    // (unit_ref, annotator_id) pairs that stayed unusable after one re-prompt
    std::vector<std::pair<std::string, std::string>> uncoded;
    std::vector<std::string> warnings;
};

// One request per (unit, annotator); parse failures earn one strict
// re-prompt, then the unit is recorded as uncoded for that annotator.
CodingReport code_units(Gateway& gw, const std::vector<std::pair<std::string, std::string>>& units,
                        const FeatureRubric& rubric, const std::vector<std::string>& annotators,
                        const StageConfig& cfg);

ChatRequest build_coding_request(const std::string& unit_text, const FeatureRubric& rubric,
                                 const std::string& annotator_id, bool strict,
                                 const StageConfig& cfg, uint64_t seed);

struct FeatureReliability {
    std::string feature;
    stats::ReliabilityResult icc;  // degenerate flag set when variance collapses
    int units = 0;
};

struct ReliabilityReport {
    std::vector<FeatureReliability> per_feature;
    // (annotator_a, annotator_b) -> mean ICC across non-degenerate features
    std::vector<std::tuple<std::string, std::string, double>> pairwise;
    double mean_icc = 0.0;  // across non-degenerate features, all annotators
    int degenerate_features = 0;
    std::vector<std::string> annotators;
};

ReliabilityReport annotator_reliability(const std::vector<FeatureCoding>& codings);

std::vector<ParticipantFeatureSummary> summarize_codings(
    const std::vector<FeatureCoding>& codings, FeatureContext context,
    const FeatureRubric& rubric);

struct ConvergentCell {
    std::optional<stats::CorrelationResult> r;  // absent when degenerate
    bool significant = false;                   // after Bonferroni
};

struct ConvergentTable {
    std::vector<std::string> features;
    // cells[f][d]: feature f against domain d
    std::vector<std::array<ConvergentCell, kNumDomains>> cells;
    // Strongest-predictor row per feature: domain index by |r|, -1 when the
    // whole row is degenerate.
    std::vector<int> best_domain;
    double alpha = 0.05;
    double alpha_corrected = 0.0;
    int m_tests = 0;
    int n = 0;
};

ConvergentTable convergent_table(const std::vector<ParticipantFeatureSummary>& summaries,
                                 const std::map<std::string, DomainProfile>& truth,
                                 double alpha = 0.05);

struct CrossContextRow {
    std::string feature;
    std::optional<stats::CorrelationResult> r;
    bool significant = false;
};

struct CrossContextTable {
    std::vector<CrossContextRow> rows;
    double mean_abs_r = 0.0;  // over non-degenerate rows
    double alpha_corrected = 0.0;
    int m_tests = 0;
    int n = 0;
    int below_floor_excluded = 0;
};

CrossContextTable cross_context_table(
    const std::vector<ParticipantFeatureSummary>& narrative_summaries,
    const std::vector<ParticipantFeatureSummary>& conversation_summaries,
    int conversation_floor = 3, double alpha = 0.05);

struct ReactivityResult {
    stats::CorrelationResult r_sd_emotionality;
    stats::CorrelationResult r_mean_emotionality;
    int n = 0;
};

// Per-participant valence series must cover all 24 sections.
ReactivityResult reactivity_analysis(
    const std::map<std::string, std::vector<double>>& section_valence,
    const std::map<std::string, DomainProfile>& truth);

// Extracts ordered per-section values of one feature (annotator-averaged)
// from narrative-unit codings, keyed by participant.
std::map<std::string, std::vector<double>> section_feature_series(
    const std::vector<FeatureCoding>& codings, const std::string& feature);

struct StructuralFeatures {
    long word_count = 0;
    double type_token_ratio = 0.0;
    double sentence_length_cv = 0.0;  // CV of sentence lengths in tokens
    int empty_sections_skipped = 0;
};

StructuralFeatures structural_features(const LsiNarrative& narrative);

// Canonical unit-ref builders.
std::string narrative_unit_ref(const std::string& pid, int section_index_1based,
                               const std::string& prompt_id);
std::string conversation_unit_ref(const std::string& conversation_id, const std::string& pid);
std::string unit_ref_participant(const std::string& unit_ref);

}  // namespace psypipe
