#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psypipe/data_model.hpp"
#include "psypipe/gateway.hpp"
#include "psypipe/pipeline.hpp"
#include "psypipe/psychometrics.hpp"

namespace psypipe {

// One forced-choice trial: a narrative against five masked profiles, exactly
// one of which belongs to the narrative's author.
struct Lineup {
    std::string narrative_ref;                // participant id of the narrative
    std::vector<std::string> option_texts;    // masked profile texts, shown order
    std::vector<std::string> option_sources;  // hidden source ids, same order
    int correct_index = 0;                    // 0-based position of the true option
    uint64_t lineup_seed = 0;
};

struct LeakageFlag {
    std::string narrative_ref;
    std::string prompt_id;
    std::string sentence;
    int item_index = 0;
    double jaccard = 0.0;
};

struct ScanReport {
    std::vector<LeakageFlag> flags;  // sorted by jaccard descending
    long sentences_scanned = 0;
    long sentences_skipped_empty = 0;
};

struct BiasReport {
    DomainProfile stage1;   // prompt encoding bias: mean(prompt_scored - truth)
    DomainProfile stage2;   // narrative + scoring bias: total - stage1
    DomainProfile stage2a;  // resting bias: unconditioned - mean(truth)
    DomainProfile stage2b;  // conditioning signal: stage2 - stage2a
    DomainProfile total;    // mean(narrative_scored - truth)
    std::string generator_id;
    std::string scorer_id;
    int n = 0;
};

struct MaskedPrompt {
    std::string participant_id;
    std::optional<std::string> masked_text;  // absent when excluded
    bool excluded = false;
    std::string reason;
    int strip_cycles = 0;
    std::vector<std::string> warnings;
};

// Removes biography content from a persona prompt, then has an independent
// model verify the result. One failed verification earns one re-strip cycle;
// a second failure excludes the participant from matching.
MaskedPrompt strip_biography(Gateway& gw, const PersonaPrompt& prompt,
                             const std::string& stripper_id, const std::string& verifier_id,
                             const StageConfig& cfg);

// Deterministic lineup construction: per participant, `lineups_per` lineups
// of `options` choices; distractors drawn uniformly without replacement
// excluding self; correct position uniform.
std::vector<Lineup> build_lineups(
    const std::vector<std::pair<std::string, std::string>>& masked_by_participant,
    int lineups_per = 3, int options = 5, uint64_t seed = 0);

struct MatchResult {
    double accuracy = 0.0;
    double p_value = 1.0;  // exact binomial against chance = 1/options
    int trials = 0;
    int correct = 0;
    int unparseable = 0;  // counted as incorrect, reported separately
    std::vector<int> picks;  // 0-based chosen index per lineup, -1 unparseable
};

MatchResult evaluate_matcher(Gateway& gw, const std::vector<Lineup>& lineups,
                             const std::map<std::string, std::string>& narrative_texts,
                             const std::string& matcher_id, const StageConfig& cfg);

// Sentence-level Jaccard screening of narratives against questionnaire item
// stems. Parallel over narratives, with a serial reference kept for testing.
ScanReport scan_leakage(const std::vector<LsiNarrative>& narratives,
                        const std::vector<std::pair<int, std::string>>& stems,
                        double threshold = 0.7);
ScanReport scan_leakage_serial(const std::vector<LsiNarrative>& narratives,
                               const std::vector<std::pair<int, std::string>>& stems,
                               double threshold = 0.7);

// Additive decomposition of pipeline bias. stage2 and stage2b are defined by
// subtraction so both additivity identities hold exactly.
BiasReport decompose_bias(const std::map<std::string, DomainProfile>& truth,
                          const std::map<std::string, DomainProfile>& prompt_scored,
                          const std::map<std::string, DomainProfile>& narrative_scored,
                          const DomainProfile& unconditioned,
                          const std::string& generator_id = "",
                          const std::string& scorer_id = "");

}  // namespace psypipe
