#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "psypipe/errors.hpp"

namespace psypipe {

// The six HEXACO domains, in canonical reporting order.
enum class Domain { HH = 0, E, EX, A, C, OP };
inline constexpr int kNumDomains = 6;
inline constexpr std::array<const char*, kNumDomains> kDomainCodes{
    "HH", "E", "EX", "A", "C", "OP"};
inline constexpr std::array<const char*, kNumDomains> kDomainNames{
    "Honesty-Humility", "Emotionality",      "Extraversion",
    "Agreeableness",    "Conscientiousness", "Openness to Experience"};

// The nine non-HEXACO subscales, in canonical reporting order.
inline constexpr int kNumSubscales = 9;
inline constexpr std::array<const char*, kNumSubscales> kSubscaleIds{
    "trust_propensity", "trust_ability",     "trust_integrity",
    "trust_benevolence", "ppts_cognitive",   "ppts_affective",
    "ppts_egocentricity", "ppts_manipulation", "sias"};
inline constexpr std::array<const char*, kNumSubscales> kSubscaleNames{
    "Trust: Propensity",       "Trust: Ability",
    "Trust: Integrity",        "Trust: Benevolence",
    "PPTS: Cognitive Resp.",   "PPTS: Affective Resp.",
    "PPTS: Egocentricity",     "PPTS: Interpers. Manip.",
    "SIAS"};

int domain_index(const std::string& code);       // throws KeyMismatchError
int subscale_index(const std::string& id);       // throws KeyMismatchError

// Six domain means, each in [1,5].
struct DomainProfile {
    std::array<double, kNumDomains> values{};

    double& operator[](Domain d) { return values[static_cast<int>(d)]; }
    double operator[](Domain d) const { return values[static_cast<int>(d)]; }
    double& at(int i) { return values.at(i); }
    double at(int i) const { return values.at(i); }

    bool operator==(const DomainProfile&) const = default;
};

// Component-wise a - b.
DomainProfile profile_distance(const DomainProfile& a, const DomainProfile& b);

// Nine subscale means, each on its own instrument's scale.
struct SubscaleProfile {
    std::array<double, kNumSubscales> values{};
    bool operator==(const SubscaleProfile&) const = default;
};

struct KeyEntry {
    int index = 0;          // 1-based item index within the instrument
    std::string scale;      // scale id the item loads on
    bool reversed = false;
    std::string stem;       // placeholder stem; users may substitute licensed text
};

// Index -> scale -> reversal structure for one instrument. Keys ship as data
// files so licensed item text can be swapped in without a rebuild.
struct ScoringKey {
    std::string instrument_id;
    double scale_min = 1.0;
    double scale_max = 5.0;
    std::vector<KeyEntry> items;       // sorted by index after load
    std::vector<std::string> scales;   // declared order

    const KeyEntry& entry(int index) const;  // throws KeyMismatchError
    std::vector<int> indices_for_scale(const std::string& scale) const;
    int reversed_count(const std::string& scale) const;

    // Structural validation: unique indices, every scale referenced, and for
    // the HEXACO-60 instrument exactly 60 items over 6 scales of 10.
    void validate() const;

    static ScoringKey from_json_text(const std::string& text, const std::string& origin);
    static ScoringKey load(const std::string& path);
    std::string to_json_text() const;
};

using ItemResponses = std::map<int, int>;  // item index -> Likert response

// 6 - response, the reversal mapping for a 1..5 Likert scale.
int reverse_score(int response);

// Per-scale means of (reversed-where-flagged) responses, in key.scales order.
// Missing indices -> IncompleteInputError listing them; unknown indices ->
// KeyMismatchError; out-of-range responses -> RangeError.
std::vector<std::pair<std::string, double>> aggregate(const ItemResponses& items,
                                                      const ScoringKey& key);

// HEXACO-60 aggregation into the six fixed domains.
DomainProfile aggregate_hexaco(const ItemResponses& items, const ScoringKey& key);

// 51-item aggregation into the nine fixed subscales.
SubscaleProfile aggregate_subscales(const ItemResponses& items, const ScoringKey& key);

}  // namespace psypipe
