#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "psypipe/gateway.hpp"
#include "psypipe/pipeline.hpp"
#include "psypipe/psychometrics.hpp"

namespace psypipe {

// Deterministic persona backend used as the test oracle. It encodes trait
// levels as net counts of invented marker tokens, so every stage of the
// round trip can be decoded and checked in closed form with no network.
struct SyntheticPersonaConfig {
    // Marker lexicon. Tokens are invented words, pairwise disjoint across
    // all lists and absent from questionnaire stems and template prose, so
    // the leakage scanner has nothing to find in a clean corpus.
    std::array<std::vector<std::string>, kNumDomains> high_markers;
    std::array<std::vector<std::string>, kNumDomains> low_markers;
    std::array<std::string, kNumSubscales> subscale_high;
    std::array<std::string, kNumSubscales> subscale_low;
    std::vector<std::string> valence_high;
    std::vector<std::string> valence_low;

    double noise_sd = 0.0;   // narrative encoding noise on the 1..5 scale
    double c_scale = 0.1;    // decode: value = clamp(3 + c_scale * netcount, 1, 5)
    double reactivity_gain = 0.6;    // valence swing per unit of Emotionality
    double valence_jitter_sd = 0.12; // per-section valence wobble
    double coder_jitter_sd = 0.35;   // per-annotator feature-coding wobble

    // Constant offsets for bias-decomposition checks: prompt_shift distorts
    // the persona prompt's embedded profile, narrative_shift distorts the
    // narrative encoding on top of it, unconditioned_shift is the resting
    // disposition of the persona-free entity voice.
    DomainProfile prompt_shift;
    DomainProfile narrative_shift;
    DomainProfile unconditioned_shift;

    // Requests whose payload contains this token are refused, mimicking a
    // provider declining a persona. Refusals are outcomes, not errors.
    std::string refusal_trigger = "forbidden-persona-veil";

    uint64_t seed = 0;

    void validate() const;  // disjoint lists, noise_sd >= 0, c_scale > 0
    std::vector<std::string> all_marker_tokens() const;
    static SyntheticPersonaConfig defaults(uint64_t seed = 0);
};

// Fixed strings of the synthetic template family. The scorer recognizes
// narrative sections by the sentinel; persona prompts carry a numeric
// profile block bounded by the begin/end markers.
inline constexpr const char* kSectionSentinel = "As I remember it, this is segment";
inline constexpr const char* kProfileBlockBegin = "TRAIT-PROFILE";
inline constexpr const char* kSubscaleBlockBegin = "SUBSCALE-PROFILE";
inline constexpr const char* kProfileBlockEnd = "END-PROFILE";
inline constexpr const char* kBiographyBegin = "BIOGRAPHY-BEGIN";
inline constexpr const char* kBiographyEnd = "BIOGRAPHY-END";
inline constexpr const char* kPersonaIdTag = "PERSONA-FOR:";

// Provider implementation. Handles model id "synthetic" plus behavioural
// variants spelled "synthetic:<variant>":
//   random-matcher      lineups answered uniformly at random (seeded)
//   garbled-matcher     lineups answered unparseably
//   constant-annotator  every feature coded 3
//   random-annotator    features coded uniformly at random (seeded)
//   omit:<k>            item k always missing from rating replies
//   flaky-format        unparseable reply unless the request says STRICT-FORMAT
//   no-op-stripper      biography stripping returns input unchanged
//   sloppy-stripper     strips only when the request says RE-STRIP
class SyntheticModel : public Provider {
public:
    explicit SyntheticModel(SyntheticPersonaConfig config);

    std::string name() const override { return "synthetic"; }
    bool handles(const std::string& model_id) const override;
    ChatResponse complete(const ChatRequest& request) override;

    const SyntheticPersonaConfig& config() const { return config_; }

private:
    SyntheticPersonaConfig config_;
};

// Direct oracle forms of the synthetic stages, shared with the provider.

std::string synth_build_persona_prompt(const std::string& participant_id,
                                       const DomainProfile& domain_means,
                                       const SubscaleProfile& subscale_means,
                                       const std::vector<std::string>& bio_facts,
                                       const SyntheticPersonaConfig& config);

LsiNarrative synth_generate_narrative(const DomainProfile& profile,
                                      const SubscaleProfile& subscales,
                                      const SyntheticPersonaConfig& config,
                                      const std::string& participant_id = "anon",
                                      std::vector<std::string> prompt_ids = {});

RecoveredScores synth_score_narrative(const LsiNarrative& narrative,
                                      const SyntheticPersonaConfig& config,
                                      const ScoringKey& hexaco_key,
                                      const ScoringKey& beyond_key);

// Decodes marker net-counts (or a numeric profile block) from raw text.
// Throws DecodeError when the text matches neither template family.
DomainProfile synth_decode_domains(const std::string& text,
                                   const SyntheticPersonaConfig& config);
SubscaleProfile synth_decode_subscales(const std::string& text,
                                       const SyntheticPersonaConfig& config);

// Expands per-scale means into an item-response vector that aggregates back
// to the nearest achievable mean: with k items summing to S = round(k*m),
// the first S mod k items (by index order) sit one point above the rest,
// and reversed items emit the reversal of their effective value.
ItemResponses synth_expand_items(const ScoringKey& key,
                                 const std::vector<std::pair<std::string, double>>& means);

// Per-section emotional valence decoded from valence markers, one value per
// recognized section, used by reactivity checks.
std::vector<double> synth_decode_section_valence(const LsiNarrative& narrative,
                                                 const SyntheticPersonaConfig& config);

// Random ground-truth corpus. Domain and subscale means are drawn from a
// normal around 3, clamped to [1, 5] and snapped to the 0.1 grid so item
// expansion reproduces them exactly; items come from synth_expand_items.
struct CorpusOptions {
    int n = 100;
    double domain_spread = 0.8;    // SD of domain means before clamping
    double subscale_spread = 0.8;  // SD of subscale means before clamping
    uint64_t seed = 0;
    bool with_bio = true;  // invented biography facts and appearance notes
};

std::vector<ParticipantRecord> synth_make_corpus(const CorpusOptions& opts,
                                                 const ScoringKey& hexaco_key);

}  // namespace psypipe
