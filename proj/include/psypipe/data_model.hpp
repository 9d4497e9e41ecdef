#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "psypipe/psychometrics.hpp"

namespace psypipe {

// Ground-truth psychometric state for one participant. Stored domain means
// are advisory; the means recomputed from items are authoritative everywhere.
struct ParticipantRecord {
    std::string participant_id;
    std::array<int, 60> hexaco_items{};        // indexed 1..60 as items[i-1]
    DomainProfile domain_means;                // recomputed at load
    std::optional<DomainProfile> stored_domain_means;
    SubscaleProfile subscale_means;
    std::vector<std::string> bio_facts;
    std::optional<std::string> appearance_note;
    std::vector<std::string> conversation_refs;

    ItemResponses item_responses() const;
};

struct NarrativeSection {
    std::string prompt_id;
    std::string text;
};

inline constexpr int kLsiSectionCount = 24;

// A 24-section first-person life-story interview with generation provenance.
struct LsiNarrative {
    std::string participant_id;
    std::string generator_id;
    double temperature = 1.0;
    std::vector<NarrativeSection> sections;  // exactly 24
    std::string created_at;                  // UTC ISO-8601

    std::string full_text() const;  // sections joined with blank lines
    void validate() const;
};

struct SpeakerTurn {
    std::string speaker;
    std::string text;
};

struct ConversationTranscript {
    std::string conversation_id;
    std::array<std::string, 2> participants;
    std::vector<SpeakerTurn> turns;

    std::string side_text(const std::string& speaker) const;
    void validate() const;
};

enum class RunStage { prompt, narrative, score, ceiling, unconditioned };
const char* run_stage_name(RunStage s);
RunStage run_stage_from_name(const std::string& name);

struct RunManifest {
    std::string run_id;
    RunStage stage = RunStage::prompt;
    std::string generator_id;
    std::optional<std::string> scorer_id;
    uint64_t seed = 0;
    std::string config_hash;  // derived from all run parameters

    static std::string compute_config_hash(const RunManifest& m,
                                           const std::string& extra_config_json);
};

struct LoadReport {
    std::vector<ParticipantRecord> records;
    std::vector<std::string> warnings;
};

// Line-delimited ingestion; every deviation is surfaced as an error (throw)
// or a warning (collected), never repaired silently.
LoadReport load_participants(const std::string& path, const ScoringKey& hexaco_key);

LoadReport parse_participants(const std::string& content, const ScoringKey& hexaco_key,
                              const std::string& origin);

std::string participant_to_json_line(const ParticipantRecord& rec);

std::string narrative_to_json(const LsiNarrative& n);
LsiNarrative narrative_from_json(const std::string& text, const std::string& origin);

std::string transcript_to_json(const ConversationTranscript& t);
ConversationTranscript transcript_from_json(const std::string& text,
                                            const std::string& origin);
std::vector<ConversationTranscript> load_transcripts(const std::string& path);

// Artifact store: one directory per run, one document per participant, with
// the manifest pinned on first write. A second write under the same run_id
// must carry the same config_hash or it is rejected.
class ArtifactStore {
public:
    explicit ArtifactStore(std::string root);

    // Creates the run directory and manifest, or verifies an existing one.
    std::string open_run(const RunManifest& manifest);

    std::string store(const RunManifest& manifest, const std::string& participant_id,
                      const std::string& payload_json);
    std::optional<std::string> read(const std::string& run_id,
                                    const std::string& participant_id) const;
    bool has(const std::string& run_id, const std::string& participant_id) const;
    std::vector<std::string> list_participants(const std::string& run_id) const;
    RunManifest read_manifest(const std::string& run_id) const;

    const std::string& root() const { return root_; }

private:
    std::string run_dir(const std::string& run_id) const;
    std::string root_;
};

std::string manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const std::string& text, const std::string& origin);

std::string utc_timestamp_now();

}  // namespace psypipe
