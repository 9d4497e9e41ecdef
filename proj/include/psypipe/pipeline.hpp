#pragma once

#include <optional>
#include <string>
#include <vector>

#include "psypipe/data_model.hpp"
#include "psypipe/gateway.hpp"
#include "psypipe/psychometrics.hpp"

namespace psypipe {

struct PersonaPrompt {
    std::string participant_id;
    std::string text;  // second-person prose, target length near 1000 words
    std::string generator_id;
    std::optional<std::string> masked_variant;  // biography-stripped text
    size_t word_count = 0;
    bool refusal = false;  // generator declined; text holds the refusal reply
};

struct LsiEntry {
    std::string prompt_id;
    std::string interviewer_text;
};

// The 24-question interview protocol, shipped as an editable data file.
struct LsiProtocol {
    std::vector<LsiEntry> entries;

    void validate() const;  // exactly 24 entries, unique prompt ids
    std::vector<std::string> prompt_ids() const;
    static LsiProtocol load(const std::string& path);
    static LsiProtocol from_json_text(const std::string& text, const std::string& origin);
};

enum class ScoringMode { B60, B10 };
const char* scoring_mode_name(ScoringMode m);
ScoringMode scoring_mode_from_name(const std::string& name);

// Ratings recovered from a blind scoring call, with domain and subscale
// means always re-derived from the item ratings (never trusted from the
// scorer). Construct through make() so the invariant cannot be skipped.
struct RecoveredScores {
    std::string participant_id;
    std::string scorer_id;
    ItemResponses item_ratings;    // inventory items 1..60
    ItemResponses beyond_ratings;  // supplementary items 1..51, may be absent
    DomainProfile domain_means;
    std::optional<SubscaleProfile> subscale_means;
    std::vector<std::string> parse_warnings;
    bool refusal = false;

    static RecoveredScores make(std::string participant_id, std::string scorer_id,
                                const ItemResponses& hexaco_ratings,
                                const ItemResponses& beyond_ratings,
                                const ScoringKey& hexaco_key, const ScoringKey& beyond_key,
                                std::vector<std::string> warnings = {});
    static RecoveredScores refused(std::string participant_id, std::string scorer_id,
                                   std::string reply);
};

std::string recovered_to_json(const RecoveredScores& s);
RecoveredScores recovered_from_json(const std::string& text, const ScoringKey& hexaco_key,
                                    const ScoringKey& beyond_key, const std::string& origin);

struct StageConfig {
    std::string generator_id = "synthetic";
    std::string scorer_id = "synthetic";
    ScoringMode mode = ScoringMode::B60;
    double generation_temperature = 1.0;
    double scoring_temperature = 0.3;
    uint64_t master_seed = 0;
    int max_section_failures = 3;
    int max_output = 8192;
};

// Request construction is exposed so tests can inspect exact payloads (the
// stage-isolation check depends on what stage 3 actually sends).
ChatRequest build_stage1_request(const ParticipantRecord& record, const StageConfig& cfg);
ChatRequest build_interview_request(const std::string& persona_text,
                                    const std::vector<ChatMessage>& history,
                                    const LsiEntry& entry, int turn_index, int turn_total,
                                    const StageConfig& cfg, uint64_t turn_seed);
ChatRequest build_scoring_request(const std::string& text_to_score, const ScoringKey& key,
                                  const std::vector<int>& indices, bool strict,
                                  const StageConfig& cfg, uint64_t seed);
ChatRequest build_self_report_request(const ScoringKey& key, const std::vector<int>& indices,
                                      bool strict, const StageConfig& cfg, uint64_t seed);

struct RatingParse {
    ItemResponses ratings;
    std::vector<int> missing;
    std::vector<int> out_of_range;
    std::vector<std::string> warnings;
    bool ok() const { return missing.empty() && out_of_range.empty(); }
};
RatingParse parse_rating_lines(const std::string& reply, const std::vector<int>& expected);

PersonaPrompt run_stage1_prompt(Gateway& gw, const ParticipantRecord& record,
                                const StageConfig& cfg);

LsiNarrative run_stage2_narrative(Gateway& gw, const PersonaPrompt& prompt,
                                  const LsiProtocol& protocol, const StageConfig& cfg);

RecoveredScores run_stage3_score(Gateway& gw, const LsiNarrative& narrative,
                                 const ScoringKey& hexaco_key, const ScoringKey& beyond_key,
                                 const StageConfig& cfg);

RecoveredScores run_profile_ceiling(Gateway& gw, const PersonaPrompt& prompt,
                                    const ScoringKey& hexaco_key, const ScoringKey& beyond_key,
                                    const StageConfig& cfg);

enum class UnconditionedMode { entity_narrative, self_report };

std::string entity_prompt_text();

std::vector<RecoveredScores> run_unconditioned(Gateway& gw, const ScoringKey& hexaco_key,
                                               const ScoringKey& beyond_key,
                                               const StageConfig& cfg, int n_runs,
                                               UnconditionedMode mode,
                                               const LsiProtocol* protocol = nullptr);

// Throws ProvenanceError if the stage-3 payload carries any of the
// participant's numeric scores (domain means, subscale means, or the raw
// item-response block). Callers run this on every scoring request payload.
void assert_stage_isolation(const std::string& payload, const ParticipantRecord& record);

// Batch driver: runs the requested stage for every record, skipping
// (run_id, participant) pairs already present in the store. Participants are
// independent; the loop is parallel with store writes serialized.
struct BatchResult {
    int completed = 0;
    int skipped = 0;
    int refusals = 0;
    int failures = 0;
    std::vector<std::string> failure_details;
};

BatchResult run_prompt_batch(Gateway& gw, const std::vector<ParticipantRecord>& records,
                             const StageConfig& cfg, ArtifactStore& store,
                             const RunManifest& manifest, int concurrency);
BatchResult run_narrative_batch(Gateway& gw, const std::vector<ParticipantRecord>& records,
                                const LsiProtocol& protocol, const StageConfig& cfg,
                                ArtifactStore& store, const std::string& prompt_run_id,
                                const RunManifest& manifest, int concurrency);
BatchResult run_score_batch(Gateway& gw, const std::vector<ParticipantRecord>& records,
                            const ScoringKey& hexaco_key, const ScoringKey& beyond_key,
                            const StageConfig& cfg, ArtifactStore& store,
                            const std::string& narrative_run_id, const RunManifest& manifest,
                            int concurrency, bool isolation_check = true);
BatchResult run_ceiling_batch(Gateway& gw, const std::vector<ParticipantRecord>& records,
                              const ScoringKey& hexaco_key, const ScoringKey& beyond_key,
                              const StageConfig& cfg, ArtifactStore& store,
                              const std::string& prompt_run_id, const RunManifest& manifest,
                              int concurrency);

std::string persona_prompt_to_json(const PersonaPrompt& p);
PersonaPrompt persona_prompt_from_json(const std::string& text, const std::string& origin);

}  // namespace psypipe
