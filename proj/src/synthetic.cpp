#include "psypipe/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include "psypipe/errors.hpp"
#include "psypipe/hashing.hpp"
#include "psypipe/text.hpp"

namespace psypipe {

namespace {

double clamp15(double v) { return std::clamp(v, 1.0, 5.0); }

std::string fmt3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

const char* band_word(double v) {
    if (v < 1.8) return "very low";
    if (v < 2.6) return "low";
    if (v < 3.4) return "middling";
    if (v < 4.2) return "high";
    return "very high";
}

double gauss(uint64_t seed, double sd) {
    if (sd <= 0.0) return 0.0;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, sd);
    return n(rng);
}

// ---- template text parsing -------------------------------------------------

std::vector<std::string> split_lines(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        out.push_back(line);
    }
    return out;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t");
    return s.substr(a, b - a + 1);
}

// Lines of the form KEY=1.234 between TRAIT-PROFILE and END-PROFILE.
struct ProfileBlock {
    DomainProfile domains;
    SubscaleProfile subscales;
    bool has_domains = false;
    bool has_subscales = false;
};

std::optional<ProfileBlock> parse_profile_block(const std::string& text) {
    if (text.find(kProfileBlockBegin) == std::string::npos) return std::nullopt;
    ProfileBlock out;
    enum class Where { outside, domains, subscales } where = Where::outside;
    for (const auto& raw : split_lines(text)) {
        const std::string line = trim(raw);
        if (line == kProfileBlockBegin) { where = Where::domains; continue; }
        if (line == kSubscaleBlockBegin) { where = Where::subscales; continue; }
        if (line == kProfileBlockEnd) { where = Where::outside; continue; }
        if (where == Where::outside) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = trim(line.substr(0, eq));
        double val = 0.0;
        try {
            val = std::stod(line.substr(eq + 1));
        } catch (const std::exception&) {
            throw DecodeError("profile block line not numeric: " + line);
        }
        if (where == Where::domains) {
            out.domains.at(domain_index(key)) = val;
            out.has_domains = true;
        } else {
            out.subscales.values[static_cast<size_t>(subscale_index(key))] = val;
            out.has_subscales = true;
        }
    }
    if (!out.has_domains) return std::nullopt;
    return out;
}

// Extracts the body between begin/end sentinel lines, or the whole payload
// when the markers are absent.
std::string extract_block(const std::string& text, const std::string& begin,
                          const std::string& end) {
    size_t a = text.find(begin);
    if (a == std::string::npos) return text;
    a += begin.size();
    if (a < text.size() && text[a] == '\n') ++a;
    size_t b = text.find(end, a);
    if (b == std::string::npos) return text.substr(a);
    return text.substr(a, b - a);
}

std::optional<std::string> find_tagged_line(const std::string& text, const std::string& tag) {
    for (const auto& raw : split_lines(text)) {
        const std::string line = trim(raw);
        if (line.starts_with(tag)) return trim(line.substr(tag.size()));
    }
    return std::nullopt;
}

size_t count_occurrences(const std::string& text, const std::string& needle) {
    size_t n = 0;
    for (size_t pos = text.find(needle); pos != std::string::npos;
         pos = text.find(needle, pos + needle.size()))
        ++n;
    return n;
}

// ---- marker counting -------------------------------------------------------

struct MarkerIndex {
    // token -> (kind, index, sign); kind 0 = domain, 1 = subscale, 2 = valence
    std::unordered_map<std::string, std::tuple<int, int, int>> map;

    explicit MarkerIndex(const SyntheticPersonaConfig& cfg) {
        for (int d = 0; d < kNumDomains; ++d) {
            for (const auto& t : cfg.high_markers[static_cast<size_t>(d)])
                map.emplace(t, std::make_tuple(0, d, +1));
            for (const auto& t : cfg.low_markers[static_cast<size_t>(d)])
                map.emplace(t, std::make_tuple(0, d, -1));
        }
        for (int s = 0; s < kNumSubscales; ++s) {
            map.emplace(cfg.subscale_high[static_cast<size_t>(s)], std::make_tuple(1, s, +1));
            map.emplace(cfg.subscale_low[static_cast<size_t>(s)], std::make_tuple(1, s, -1));
        }
        for (const auto& t : cfg.valence_high) map.emplace(t, std::make_tuple(2, 0, +1));
        for (const auto& t : cfg.valence_low) map.emplace(t, std::make_tuple(2, 0, -1));
    }
};

struct NetCounts {
    std::array<long, kNumDomains> domain{};
    std::array<long, kNumSubscales> sub{};
    long valence = 0;
};

NetCounts count_markers(const std::string& text, const MarkerIndex& idx) {
    NetCounts out;
    for (const auto& tok : text::tokenize(text)) {
        auto it = idx.map.find(tok);
        if (it == idx.map.end()) continue;
        auto [kind, i, sign] = it->second;
        if (kind == 0)
            out.domain[static_cast<size_t>(i)] += sign;
        else if (kind == 1)
            out.sub[static_cast<size_t>(i)] += sign;
        else
            out.valence += sign;
    }
    return out;
}

long value_to_count(double v, double c_scale) {
    return std::llround((clamp15(v) - 3.0) / c_scale);
}

double count_to_value(double mean_count, double c_scale) {
    return clamp15(3.0 + c_scale * mean_count);
}

// Writes |count| tokens of the right pole into one sentence, cycling the
// marker list so counts above the list length still decode correctly.
std::string marker_sentence(const std::string& lead, long count,
                            const std::vector<std::string>& high,
                            const std::vector<std::string>& low) {
    if (count == 0) return "";
    const auto& pool = count > 0 ? high : low;
    if (pool.empty()) throw ConfigError("synthetic marker list is empty");
    long n = std::labs(count);
    std::string s = lead;
    for (long i = 0; i < n; ++i) {
        s += " ";
        s += pool[static_cast<size_t>(i) % pool.size()];
    }
    s += ".";
    return s;
}

std::string marker_sentence_single(const std::string& lead, long count,
                                   const std::string& high, const std::string& low) {
    std::vector<std::string> h{high}, l{low};
    return marker_sentence(lead, count, h, l);
}

// ---- narrative section assembly -------------------------------------------

struct NarrativePlan {
    std::array<long, kNumDomains> domain_counts{};
    std::array<long, kNumSubscales> sub_counts{};
    double emotionality_value = 3.0;  // post-noise value driving valence swing
};

NarrativePlan plan_narrative(const std::string& pid, const DomainProfile& base,
                             const SubscaleProfile& subs, bool apply_persona_shift,
                             const SyntheticPersonaConfig& cfg) {
    NarrativePlan plan;
    for (int d = 0; d < kNumDomains; ++d) {
        double shift = apply_persona_shift ? cfg.narrative_shift.at(d) : 0.0;
        double noise = gauss(SeedChain(cfg.seed).mix("narr-noise").mix(pid).mix(kDomainCodes[static_cast<size_t>(d)]).value(),
                             cfg.noise_sd);
        double v = clamp15(base.at(d) + shift + noise);
        plan.domain_counts[static_cast<size_t>(d)] = value_to_count(v, cfg.c_scale);
        if (d == static_cast<int>(Domain::E)) plan.emotionality_value = v;
    }
    for (int s = 0; s < kNumSubscales; ++s) {
        double noise = gauss(SeedChain(cfg.seed).mix("narr-noise-sub").mix(pid).mix(kSubscaleIds[static_cast<size_t>(s)]).value(),
                             cfg.noise_sd);
        double v = clamp15(subs.values[static_cast<size_t>(s)] + noise);
        plan.sub_counts[static_cast<size_t>(s)] = value_to_count(v, cfg.c_scale);
    }
    return plan;
}

std::string build_section_text(const std::string& pid, int k, const std::string& prompt_id,
                               const NarrativePlan& plan, const SyntheticPersonaConfig& cfg) {
    std::ostringstream out;
    out << kSectionSentinel << " " << k << " of my story. ";
    out << "The question about " << prompt_id << " brings back a particular stretch of my life, "
        << "and I will tell it the way it still plays in my head.";

    static const char* kDomainLeads[kNumDomains] = {
        "When money and favors came into it, the word that followed me was",
        "In the tense hours, what echoed in me was",
        "Among people, the sound I carried was",
        "When others pushed against me, I kept hearing",
        "About my plans and duties, the refrain was",
        "For new ideas and strange places, my word was",
    };
    for (int d = 0; d < kNumDomains; ++d) {
        std::string s = marker_sentence(kDomainLeads[d], plan.domain_counts[static_cast<size_t>(d)],
                                        cfg.high_markers[static_cast<size_t>(d)],
                                        cfg.low_markers[static_cast<size_t>(d)]);
        if (!s.empty()) out << " " << s;
    }
    for (int s = 0; s < kNumSubscales; ++s) {
        std::string sent = marker_sentence_single(
            "Underneath it, quieter, ran", plan.sub_counts[static_cast<size_t>(s)],
            cfg.subscale_high[static_cast<size_t>(s)], cfg.subscale_low[static_cast<size_t>(s)]);
        if (!sent.empty()) out << " " << sent;
    }

    // Valence swings alternate across sections, with amplitude set by the
    // narrative's Emotionality; this is the planted reactivity signature.
    double amp = cfg.reactivity_gain * (plan.emotionality_value - 1.0) / 4.0;
    double h = (k % 2 == 1) ? 1.0 : -1.0;
    double jitter = gauss(SeedChain(cfg.seed).mix("valence").mix(pid).mix(static_cast<uint64_t>(k)).value(),
                          cfg.valence_jitter_sd);
    double valence = clamp15(3.0 + amp * h + jitter);
    long vc = value_to_count(valence, cfg.c_scale);
    std::string vs = marker_sentence("The feeling of that time, if I name it, was", vc,
                                     cfg.valence_high, cfg.valence_low);
    if (!vs.empty()) out << " " << vs;

    out << " That is how segment " << k << " sits with me now, neither polished nor disowned.";
    return out.str();
}

std::vector<std::string> default_prompt_ids() {
    std::vector<std::string> ids;
    ids.reserve(kLsiSectionCount);
    for (int k = 1; k <= kLsiSectionCount; ++k) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "seg%02d", k);
        ids.emplace_back(buf);
    }
    return ids;
}

}  // namespace

// ---- config ----------------------------------------------------------------

SyntheticPersonaConfig SyntheticPersonaConfig::defaults(uint64_t seed) {
    SyntheticPersonaConfig c;
    c.seed = seed;
    c.high_markers = {{
        {"verahonu", "sincerovan", "modestrine"},
        {"fearniva", "worrivane", "tearisole"},
        {"gregavox", "chattermil", "sparkleven"},
        {"gentlemir", "forgivane", "patientor"},
        {"orderlain", "diligentor", "planvetra"},
        {"curiovane", "artistrem", "novellux"},
    }};
    c.low_markers = {{
        {"slyvashek", "greedorvan", "boastrivex"},
        {"stolvane", "placidorn", "bravenkor"},
        {"quietram", "solituden", "reservix"},
        {"grudgevar", "quarrelix", "stubbornel"},
        {"slopprix", "impulsen", "messivar"},
        {"conventrix", "routinelle", "mundrapol"},
    }};
    c.subscale_high = {"trovantis", "abletrun",  "integron",   "benevoran", "cognempa",
                       "affempa",   "egocentra", "manipulor",  "sociaprel"};
    c.subscale_low = {"trovanix", "ablenix",   "integnix",   "benevnix", "cognempix",
                      "affempix", "egocentrix", "manipunix", "sociapnix"};
    c.valence_high = {"gladiven", "joyvelin"};
    c.valence_low = {"sorrovex", "glumarin"};
    return c;
}

std::vector<std::string> SyntheticPersonaConfig::all_marker_tokens() const {
    std::vector<std::string> out;
    for (const auto& list : high_markers) out.insert(out.end(), list.begin(), list.end());
    for (const auto& list : low_markers) out.insert(out.end(), list.begin(), list.end());
    out.insert(out.end(), subscale_high.begin(), subscale_high.end());
    out.insert(out.end(), subscale_low.begin(), subscale_low.end());
    out.insert(out.end(), valence_high.begin(), valence_high.end());
    out.insert(out.end(), valence_low.begin(), valence_low.end());
    return out;
}

void SyntheticPersonaConfig::validate() const {
    if (noise_sd < 0.0) throw ConfigError("synthetic noise_sd must be >= 0");
    if (c_scale <= 0.0) throw ConfigError("synthetic c_scale must be > 0");
    if (valence_jitter_sd < 0.0 || coder_jitter_sd < 0.0)
        throw ConfigError("synthetic jitter SDs must be >= 0");
    for (int d = 0; d < kNumDomains; ++d) {
        if (high_markers[static_cast<size_t>(d)].empty() || low_markers[static_cast<size_t>(d)].empty())
            throw ConfigError(std::string("synthetic marker lists for ") +
                              kDomainCodes[static_cast<size_t>(d)] + " must be non-empty");
    }
    if (valence_high.empty() || valence_low.empty())
        throw ConfigError("synthetic valence marker lists must be non-empty");
    auto all = all_marker_tokens();
    std::set<std::string> uniq(all.begin(), all.end());
    if (uniq.size() != all.size())
        throw ConfigError("synthetic marker lists are not pairwise disjoint");
    for (const auto& t : all)
        if (t.empty() || t != text::to_lower(t))
            throw ConfigError("synthetic marker tokens must be non-empty lowercase words");
}

// ---- persona prompt --------------------------------------------------------

std::string synth_build_persona_prompt(const std::string& participant_id,
                                       const DomainProfile& domain_means,
                                       const SubscaleProfile& subscale_means,
                                       const std::vector<std::string>& bio_facts,
                                       const SyntheticPersonaConfig& config) {
    std::ostringstream out;
    out << kPersonaIdTag << " " << participant_id << "\n\n";
    out << "You are the person this profile describes. From this point on you remember as "
        << "them, choose as them, and speak as them in the first person. You never mention "
        << "this document, a profile, or an instruction of any kind; there is only your "
        << "life as you have lived it.\n\n";

    static const char* kHighFlavor[kNumDomains] = {
        "You return what you borrow and you squirm at flattery; shortcuts that cost someone "
        "else feel physically wrong to you.",
        "Worry arrives early and stays late with you; you feel the weather of a room before "
        "anyone speaks, and losses leave long echoes.",
        "You come alive around people, talk easily with strangers, and a full room lifts "
        "you rather than drains you.",
        "You give second chances almost by reflex, soften arguments, and would rather bend "
        "than break a friendship.",
        "Your days have edges: lists, kept promises, tools returned to their hooks, work "
        "checked twice before it leaves your hands.",
        "You chase the unfamiliar on purpose; galleries, odd books, and foreign streets pull "
        "at you, and routine feels like a slow leak.",
    };
    static const char* kLowFlavor[kNumDomains] = {
        "You see angles others miss and take them without much ceremony; praise, favors, and "
        "fine print are all tools, and modesty is for people with less to gain.",
        "You run cool under pressure; bad news lands and you simply reorganize around it, "
        "and you rarely need comforting.",
        "You guard your hours alone, speak when there is something to say, and leave "
        "gatherings early without regret.",
        "You keep score longer than you admit, argue when crossed, and hold your ground past "
        "the point of comfort.",
        "You improvise, start more than you finish, and trust momentum over plans; tidiness "
        "has never held you.",
        "You keep to the proven path, pick the familiar dish, and find most avant-garde "
        "things faintly ridiculous.",
    };

    for (int d = 0; d < kNumDomains; ++d) {
        double v = domain_means.at(d);
        out << "Your " << kDomainNames[static_cast<size_t>(d)] << " sits in the " << band_word(v)
            << " band. " << (v >= 3.0 ? kHighFlavor[d] : kLowFlavor[d]) << "\n\n";
    }

    out << "Finer grain, the same person:";
    for (int s = 0; s < kNumSubscales; ++s) {
        out << " " << kSubscaleNames[static_cast<size_t>(s)] << " runs "
            << band_word(subscale_means.values[static_cast<size_t>(s)]) << ".";
    }
    out << "\n\n";

    if (!bio_facts.empty()) {
        out << kBiographyBegin << "\n";
        out << "The verifiable furniture of your life, to be woven in naturally and never "
            << "recited:\n";
        for (const auto& f : bio_facts) out << "- " << f << "\n";
        out << kBiographyEnd << "\n\n";
    }

    // Calibration block read by the interview and scoring stages of this
    // backend; downstream tooling treats it as opaque persona text.
    out << kProfileBlockBegin << "\n";
    for (int d = 0; d < kNumDomains; ++d)
        out << kDomainCodes[static_cast<size_t>(d)] << "="
            << fmt3(clamp15(domain_means.at(d) + config.prompt_shift.at(d))) << "\n";
    out << kSubscaleBlockBegin << "\n";
    for (int s = 0; s < kNumSubscales; ++s)
        out << kSubscaleIds[static_cast<size_t>(s)] << "="
            << fmt3(subscale_means.values[static_cast<size_t>(s)]) << "\n";
    out << kProfileBlockEnd << "\n\n";

    static const char* kFiller[] = {
        "Mornings you wake before the alarm more often than after it, and the first hour of "
        "the day has a particular taste you have never needed to explain to anyone.",
        "There is a drawer in your home that holds the small debris of decades, and you know "
        "the story attached to every object in it even when you pretend you do not.",
        "You have a way of standing in doorways a moment longer than necessary, as if rooms "
        "deserve a short ceremony of entering.",
        "Certain songs can re-open whole years of your life, and you ration them the way "
        "other people ration sweets or money.",
        "You keep one friendship that has survived every version of you, and the thought of "
        "it steadies you on the days when nothing else does.",
        "Weather matters to you more than you say out loud; a change in the light can tilt "
        "an afternoon, and you plan around it without admitting that is what you are doing.",
        "You have an opinion about how tea or coffee should be made and you hold it with "
        "more conviction than you hold some of your principles.",
        "Somewhere there is a photograph of you mid-laugh that you half hate and have never "
        "thrown away, which says more about you than the photograph does.",
    };
    size_t fi = 0;
    std::string body = out.str();
    while (text::count_words(body) < 950) {
        body += kFiller[fi % (sizeof(kFiller) / sizeof(kFiller[0]))];
        body += "\n\n";
        ++fi;
    }
    return body;
}

// ---- direct oracle forms ---------------------------------------------------

LsiNarrative synth_generate_narrative(const DomainProfile& profile,
                                      const SubscaleProfile& subscales,
                                      const SyntheticPersonaConfig& config,
                                      const std::string& participant_id,
                                      std::vector<std::string> prompt_ids) {
    config.validate();
    if (prompt_ids.empty()) prompt_ids = default_prompt_ids();
    if (static_cast<int>(prompt_ids.size()) != kLsiSectionCount)
        throw SchemaError("synthetic narrative needs exactly " +
                          std::to_string(kLsiSectionCount) + " prompt ids");
    NarrativePlan plan = plan_narrative(participant_id, profile, subscales,
                                        /*apply_persona_shift=*/true, config);
    LsiNarrative n;
    n.participant_id = participant_id;
    n.generator_id = "synthetic";
    n.temperature = 1.0;
    n.created_at = "1970-01-01T00:00:00Z";  // fixed: outputs must be seed-deterministic
    for (int k = 1; k <= kLsiSectionCount; ++k) {
        NarrativeSection sec;
        sec.prompt_id = prompt_ids[static_cast<size_t>(k - 1)];
        sec.text = build_section_text(participant_id, k, sec.prompt_id, plan, config);
        n.sections.push_back(std::move(sec));
    }
    n.validate();
    return n;
}

DomainProfile synth_decode_domains(const std::string& text,
                                   const SyntheticPersonaConfig& config) {
    if (auto block = parse_profile_block(text)) return block->domains;
    size_t nsec = count_occurrences(text, kSectionSentinel);
    if (nsec == 0)
        throw DecodeError("text matches neither the profile-block nor the narrative "
                          "template family");
    MarkerIndex idx(config);
    NetCounts counts = count_markers(text, idx);
    DomainProfile out;
    for (int d = 0; d < kNumDomains; ++d)
        out.at(d) = count_to_value(
            static_cast<double>(counts.domain[static_cast<size_t>(d)]) / static_cast<double>(nsec),
            config.c_scale);
    return out;
}

SubscaleProfile synth_decode_subscales(const std::string& text,
                                       const SyntheticPersonaConfig& config) {
    if (auto block = parse_profile_block(text)) {
        if (block->has_subscales) return block->subscales;
    }
    size_t nsec = count_occurrences(text, kSectionSentinel);
    if (nsec == 0)
        throw DecodeError("text matches neither the profile-block nor the narrative "
                          "template family");
    MarkerIndex idx(config);
    NetCounts counts = count_markers(text, idx);
    SubscaleProfile out;
    for (int s = 0; s < kNumSubscales; ++s)
        out.values[static_cast<size_t>(s)] = count_to_value(
            static_cast<double>(counts.sub[static_cast<size_t>(s)]) / static_cast<double>(nsec),
            config.c_scale);
    return out;
}

ItemResponses synth_expand_items(const ScoringKey& key,
                                 const std::vector<std::pair<std::string, double>>& means) {
    ItemResponses out;
    for (const auto& [scale, mean] : means) {
        auto indices = key.indices_for_scale(scale);
        if (indices.empty()) throw KeyMismatchError(key.instrument_id + ": no items for scale " + scale);
        std::sort(indices.begin(), indices.end());
        long k = static_cast<long>(indices.size());
        long target = std::llround(clamp15(mean) * static_cast<double>(k));
        target = std::clamp(target, k * 1, k * 5);
        long base = target / k;
        long rem = target % k;
        for (size_t j = 0; j < indices.size(); ++j) {
            long eff = base + (static_cast<long>(j) < rem ? 1 : 0);
            const KeyEntry& e = key.entry(indices[j]);
            out[indices[j]] = static_cast<int>(e.reversed ? 6 - eff : eff);
        }
    }
    return out;
}

RecoveredScores synth_score_narrative(const LsiNarrative& narrative,
                                      const SyntheticPersonaConfig& config,
                                      const ScoringKey& hexaco_key,
                                      const ScoringKey& beyond_key) {
    const std::string text = narrative.full_text();
    DomainProfile domains = synth_decode_domains(text, config);
    SubscaleProfile subs = synth_decode_subscales(text, config);

    std::vector<std::pair<std::string, double>> dmeans;
    for (int d = 0; d < kNumDomains; ++d)
        dmeans.emplace_back(kDomainCodes[static_cast<size_t>(d)], domains.at(d));
    std::vector<std::pair<std::string, double>> smeans;
    for (int s = 0; s < kNumSubscales; ++s)
        smeans.emplace_back(kSubscaleIds[static_cast<size_t>(s)], subs.values[static_cast<size_t>(s)]);

    return RecoveredScores::make(narrative.participant_id, "synthetic",
                                 synth_expand_items(hexaco_key, dmeans),
                                 synth_expand_items(beyond_key, smeans), hexaco_key,
                                 beyond_key);
}

std::vector<double> synth_decode_section_valence(const LsiNarrative& narrative,
                                                 const SyntheticPersonaConfig& config) {
    MarkerIndex idx(config);
    std::vector<double> out;
    out.reserve(narrative.sections.size());
    for (const auto& sec : narrative.sections) {
        if (count_occurrences(sec.text, kSectionSentinel) == 0)
            throw DecodeError("section " + sec.prompt_id + " does not match the narrative template");
        NetCounts counts = count_markers(sec.text, idx);
        out.push_back(count_to_value(static_cast<double>(counts.valence), config.c_scale));
    }
    return out;
}

// ---- provider --------------------------------------------------------------

SyntheticModel::SyntheticModel(SyntheticPersonaConfig config) : config_(std::move(config)) {
    config_.validate();
}

bool SyntheticModel::handles(const std::string& model_id) const {
    return model_id == "synthetic" || model_id.starts_with("synthetic:");
}

namespace {

std::string model_variant(const std::string& model_id) {
    size_t colon = model_id.find(':');
    return colon == std::string::npos ? "" : model_id.substr(colon + 1);
}

std::string parse_task(const ChatRequest& req) {
    const ChatMessage* sys = req.system_message();
    if (sys) {
        if (auto t = find_tagged_line(sys->text, "TASK:")) return *t;
    }
    for (const auto& m : req.messages)
        if (auto t = find_tagged_line(m.text, "TASK:")) return *t;
    throw SchemaError("synthetic backend: request carries no TASK header");
}

struct ParsedItems {
    // (index, scale, reversed), in listing order
    std::vector<std::tuple<int, std::string, bool>> items;
};

// ITEMS lines look like "17. [E,R] stem text" or "3. [OP] stem text".
ParsedItems parse_items_block(const std::string& payload) {
    ParsedItems out;
    bool inside = false;
    for (const auto& raw : split_lines(payload)) {
        const std::string line = trim(raw);
        if (line == "ITEMS") { inside = true; continue; }
        if (line == "END-ITEMS") { inside = false; continue; }
        if (!inside || line.empty()) continue;
        size_t dot = line.find('.');
        size_t lb = line.find('[');
        size_t rb = line.find(']');
        if (dot == std::string::npos || lb == std::string::npos || rb == std::string::npos ||
            rb < lb)
            throw SchemaError("synthetic backend: malformed item line: " + line);
        int index = 0;
        try {
            index = std::stoi(line.substr(0, dot));
        } catch (const std::exception&) {
            throw SchemaError("synthetic backend: malformed item index in: " + line);
        }
        std::string tag = line.substr(lb + 1, rb - lb - 1);
        bool reversed = false;
        size_t comma = tag.find(',');
        std::string scale = tag;
        if (comma != std::string::npos) {
            scale = tag.substr(0, comma);
            reversed = trim(tag.substr(comma + 1)) == "R";
        }
        out.items.emplace_back(index, trim(scale), reversed);
    }
    return out;
}

}  // namespace

ChatResponse SyntheticModel::complete(const ChatRequest& request) {
    request.validate();
    const std::string joined = request.joined_text();
    const std::string variant = model_variant(request.model_id);

    ChatResponse resp;
    resp.model_id = request.model_id;
    resp.prompt_tokens = static_cast<int>(joined.size() / 4);

    if (!config_.refusal_trigger.empty() &&
        joined.find(config_.refusal_trigger) != std::string::npos) {
        resp.text = "I must decline this request. I can't help with portraying this persona.";
        resp.refusal = true;
        resp.completion_tokens = static_cast<int>(resp.text.size() / 4);
        return resp;
    }

    const std::string task = parse_task(request);
    const ChatMessage* user = request.last_user_message();
    const std::string payload = user ? user->text : "";
    const ChatMessage* sys = request.system_message();
    const std::string system_text = sys ? sys->text : "";

    if (task == "persona-prompt") {
        std::string pid = find_tagged_line(payload, "PARTICIPANT:").value_or("anon");
        DomainProfile means;
        SubscaleProfile subs;
        bool in_dom = false, in_sub = false, in_bio = false;
        std::vector<std::string> facts;
        for (const auto& raw : split_lines(payload)) {
            const std::string line = trim(raw);
            if (line == "DOMAIN-MEANS") { in_dom = true; in_sub = in_bio = false; continue; }
            if (line == "END-DOMAIN-MEANS") { in_dom = false; continue; }
            if (line == "SUBSCALE-MEANS") { in_sub = true; in_dom = in_bio = false; continue; }
            if (line == "END-SUBSCALE-MEANS") { in_sub = false; continue; }
            if (line == "BIO-FACTS") { in_bio = true; in_dom = in_sub = false; continue; }
            if (line == "END-BIO-FACTS") { in_bio = false; continue; }
            if (in_bio) {
                if (line.starts_with("- ")) facts.push_back(line.substr(2));
                continue;
            }
            if (!in_dom && !in_sub) continue;
            size_t eq = line.find('=');
            if (eq == std::string::npos) continue;
            double v = std::stod(line.substr(eq + 1));
            if (in_dom)
                means.at(domain_index(trim(line.substr(0, eq)))) = v;
            else
                subs.values[static_cast<size_t>(subscale_index(trim(line.substr(0, eq))))] = v;
        }
        if (auto app = find_tagged_line(payload, "APPEARANCE:"))
            facts.push_back("In appearance: " + *app);
        resp.text = synth_build_persona_prompt(pid, means, subs, facts, config_);
    } else if (task == "interview-turn") {
        auto header = find_tagged_line(payload, "INTERVIEW-QUESTION");
        if (!header)
            throw SchemaError("synthetic backend: interview request lacks a question header");
        // Header format: "<k>/<total> [<prompt_id>]".
        int k = 0;
        std::string prompt_id = "segment";
        try {
            k = std::stoi(*header);
        } catch (const std::exception&) {
            throw SchemaError("synthetic backend: malformed interview header: " + *header);
        }
        size_t lb = header->find('[');
        size_t rb = header->find(']');
        if (lb != std::string::npos && rb != std::string::npos && rb > lb)
            prompt_id = header->substr(lb + 1, rb - lb - 1);

        std::string pid = find_tagged_line(system_text, kPersonaIdTag).value_or("entity");
        DomainProfile base;
        SubscaleProfile subs;
        bool conditioned = false;
        if (auto block = parse_profile_block(system_text)) {
            base = block->domains;
            subs = block->subscales;
            conditioned = true;
        } else {
            for (int d = 0; d < kNumDomains; ++d)
                base.at(d) = clamp15(3.0 + config_.unconditioned_shift.at(d));
            for (int s = 0; s < kNumSubscales; ++s) subs.values[static_cast<size_t>(s)] = 3.0;
        }
        NarrativePlan plan = plan_narrative(pid, base, subs, conditioned, config_);
        resp.text = build_section_text(pid, k, prompt_id, plan, config_);
    } else if (task == "rate-items") {
        if (variant == "flaky-format" && joined.find("STRICT-FORMAT") == std::string::npos) {
            resp.text = "Overall the narrator strikes me as a warm, fairly careful person who "
                        "worries more than they let on; I would hesitate to reduce that to "
                        "numbers without more context.";
            resp.completion_tokens = static_cast<int>(resp.text.size() / 4);
            return resp;
        }
        ParsedItems listed = parse_items_block(payload);
        if (listed.items.empty())
            throw SchemaError("synthetic backend: rating request lists no items");
        const bool self_report = find_tagged_line(system_text, "MODE:").value_or("") ==
                                 "self-report";
        const std::string instrument =
            find_tagged_line(system_text, "INSTRUMENT:").value_or("hexaco60");

        // Per-scale source means, either the resting self-description or a
        // decode of the supplied text.
        std::unordered_map<std::string, double> means;
        if (self_report) {
            if (instrument == "hexaco60")
                for (int d = 0; d < kNumDomains; ++d)
                    means[kDomainCodes[static_cast<size_t>(d)]] =
                        clamp15(3.0 + config_.unconditioned_shift.at(d));
            else
                for (int s = 0; s < kNumSubscales; ++s)
                    means[kSubscaleIds[static_cast<size_t>(s)]] = 3.0;
        } else {
            const std::string target = extract_block(payload, "TEXT-BEGIN", "TEXT-END");
            if (instrument == "hexaco60") {
                DomainProfile d = synth_decode_domains(target, config_);
                for (int i = 0; i < kNumDomains; ++i) means[kDomainCodes[static_cast<size_t>(i)]] = d.at(i);
            } else {
                SubscaleProfile s = synth_decode_subscales(target, config_);
                for (int i = 0; i < kNumSubscales; ++i)
                    means[kSubscaleIds[static_cast<size_t>(i)]] = s.values[static_cast<size_t>(i)];
            }
        }

        // Group listed indices by scale, then expand each scale's mean into
        // items exactly as the direct oracle does.
        std::map<std::string, std::vector<std::pair<int, bool>>> by_scale;
        for (const auto& [index, scale, reversed] : listed.items)
            by_scale[scale].emplace_back(index, reversed);

        int omit_index = -1;
        if (variant.starts_with("omit:")) omit_index = std::stoi(variant.substr(5));

        std::map<int, int> ratings;
        for (auto& [scale, entries] : by_scale) {
            auto it = means.find(scale);
            if (it == means.end())
                throw SchemaError("synthetic backend: no source value for scale " + scale);
            std::sort(entries.begin(), entries.end());
            long k = static_cast<long>(entries.size());
            long target = std::llround(clamp15(it->second) * static_cast<double>(k));
            target = std::clamp(target, k, k * 5);
            long base = target / k;
            long rem = target % k;
            for (size_t j = 0; j < entries.size(); ++j) {
                long eff = base + (static_cast<long>(j) < rem ? 1 : 0);
                ratings[entries[j].first] =
                    static_cast<int>(entries[j].second ? 6 - eff : eff);
            }
        }
        std::ostringstream out;
        for (const auto& [index, value] : ratings) {
            if (index == omit_index) continue;
            out << index << ": " << value << "\n";
        }
        resp.text = out.str();
    } else if (task == "strip-biography") {
        std::string prompt_text = extract_block(payload, "PROMPT-BEGIN", "PROMPT-END");
        bool restrip = joined.find("RE-STRIP") != std::string::npos;
        if (variant == "no-op-stripper" || (variant == "sloppy-stripper" && !restrip)) {
            resp.text = prompt_text;
        } else {
            std::ostringstream out;
            bool in_bio = false;
            for (const auto& raw : split_lines(prompt_text)) {
                const std::string t = trim(raw);
                if (t == kBiographyBegin) { in_bio = true; continue; }
                if (t == kBiographyEnd) { in_bio = false; continue; }
                if (in_bio) continue;
                out << raw << "\n";
            }
            resp.text = out.str();
        }
    } else if (task == "verify-masked") {
        std::string masked = extract_block(payload, "MASKED-BEGIN", "MASKED-END");
        bool leaky = masked.find(kBiographyBegin) != std::string::npos ||
                     masked.find(kBiographyEnd) != std::string::npos ||
                     masked.find("In appearance:") != std::string::npos;
        resp.text = leaky ? "VERDICT: LEAKY" : "VERDICT: CLEAN";
    } else if (task == "match-lineup") {
        if (variant == "garbled-matcher") {
            resp.text = "honestly it could be the tall quiet one, hard to say";
            resp.completion_tokens = static_cast<int>(resp.text.size() / 4);
            return resp;
        }
        std::string narrative = extract_block(payload, "NARRATIVE-BEGIN", "NARRATIVE-END");
        std::vector<std::string> options;
        size_t pos = 0;
        for (;;) {
            char tag[32];
            std::snprintf(tag, sizeof(tag), "OPTION %zu\n", options.size() + 1);
            size_t a = payload.find(tag, pos);
            if (a == std::string::npos) break;
            a += std::string(tag).size();
            size_t b = payload.find("END-OPTION", a);
            if (b == std::string::npos) break;
            options.push_back(payload.substr(a, b - a));
            pos = b;
        }
        if (options.empty())
            throw SchemaError("synthetic backend: lineup request lists no options");
        if (variant == "random-matcher") {
            std::mt19937_64 rng(SeedChain(config_.seed)
                                    .mix("random-matcher")
                                    .mix(fnv1a64(payload))
                                    .value());
            std::uniform_int_distribution<size_t> pick(1, options.size());
            resp.text = "ANSWER: " + std::to_string(pick(rng));
        } else {
            DomainProfile target = synth_decode_domains(narrative, config_);
            size_t best = 0;
            double best_dist = std::numeric_limits<double>::infinity();
            for (size_t i = 0; i < options.size(); ++i) {
                DomainProfile cand = synth_decode_domains(options[i], config_);
                double dist = 0.0;
                for (int d = 0; d < kNumDomains; ++d) {
                    double delta = cand.at(d) - target.at(d);
                    dist += delta * delta;
                }
                if (dist < best_dist) {
                    best_dist = dist;
                    best = i;
                }
            }
            resp.text = "ANSWER: " + std::to_string(best + 1);
        }
    } else if (task == "code-features") {
        if (variant == "flaky-format" && joined.find("STRICT-FORMAT") == std::string::npos) {
            resp.text = "Scoring stories on a five point grid feels reductive; this one has "
                        "texture that resists a single number per feature.";
            resp.completion_tokens = static_cast<int>(resp.text.size() / 4);
            return resp;
        }
        std::string features_line = find_tagged_line(payload, "FEATURES:").value_or("");
        std::vector<std::string> features;
        std::istringstream fs(features_line);
        std::string f;
        while (std::getline(fs, f, ',')) {
            f = trim(f);
            if (!f.empty()) features.push_back(f);
        }
        if (features.empty())
            throw SchemaError("synthetic backend: coding request lists no features");
        std::string unit = extract_block(payload, "UNIT-BEGIN", "UNIT-END");

        MarkerIndex idx(config_);
        NetCounts counts = count_markers(unit, idx);
        double nsec = static_cast<double>(
            std::max<size_t>(1, count_occurrences(unit, kSectionSentinel)));
        auto dval = [&](Domain d) {
            return count_to_value(
                static_cast<double>(counts.domain[static_cast<size_t>(d)]) / nsec,
                config_.c_scale);
        };
        double vval = count_to_value(static_cast<double>(counts.valence) / nsec,
                                     config_.c_scale);

        std::ostringstream out;
        for (const auto& feature : features) {
            double base = 3.0;
            if (feature == "agency")
                base = 0.5 * (dval(Domain::EX) + dval(Domain::C));
            else if (feature == "communion" || feature == "warmth")
                base = dval(Domain::A);
            else if (feature == "emotional_intensity" || feature == "vulnerability")
                base = dval(Domain::E);
            else if (feature == "disclosure_depth")
                base = 0.5 * (dval(Domain::E) + dval(Domain::OP));
            else if (feature == "humor")
                base = dval(Domain::EX);
            else if (feature == "dominance")
                base = clamp15(dval(Domain::EX) - (dval(Domain::A) - 3.0));
            else if (feature == "emotional_valence")
                base = vval;
            else if (feature == "emotional_complexity" || feature == "creativity_art")
                base = dval(Domain::OP);
            else if (feature == "meaning_making")
                base = 0.5 * (dval(Domain::OP) + dval(Domain::C));

            long rating;
            if (variant == "constant-annotator") {
                rating = 3;
            } else if (variant.starts_with("random-annotator")) {
                std::mt19937_64 rng(SeedChain(config_.seed)
                                        .mix("random-annotator")
                                        .mix(request.model_id)
                                        .mix(fnv1a64(unit))
                                        .mix(feature)
                                        .value());
                std::uniform_int_distribution<long> pick(1, 5);
                rating = pick(rng);
            } else {
                double jitter = gauss(SeedChain(config_.seed)
                                          .mix("coder")
                                          .mix(request.model_id)
                                          .mix(fnv1a64(unit))
                                          .mix(feature)
                                          .value(),
                                      config_.coder_jitter_sd);
                rating = std::llround(clamp15(base + jitter));
                rating = std::clamp(rating, 1l, 5l);
            }
            out << feature << ": " << rating << "\n";
        }
        resp.text = out.str();
    } else {
        throw SchemaError("synthetic backend: unknown TASK '" + task + "'");
    }

    resp.completion_tokens = static_cast<int>(resp.text.size() / 4);
    return resp;
}

// ---- corpus ----------------------------------------------------------------

namespace {

const std::vector<std::string> kCorpusTowns = {
    "Brindlemarch", "Quellan Crossing", "Veshport", "Ostermead",
    "Calderbrook",  "Nyle Hollow",      "Tarrowfen", "Lumenvale"};
const std::vector<std::string> kCorpusTrades = {
    "cartographer", "locksmith",  "orchard keeper", "radio repairer",
    "ferry pilot",  "typesetter", "glassblower",    "archivist"};
const std::vector<std::string> kCorpusEvents = {
    "rebuilt the family boathouse after the flood",
    "won a regional chess tournament at fourteen",
    "spent a winter keeping a remote lighthouse",
    "walked the coastal path end to end one autumn",
    "restored a derelict printing press over two summers",
    "taught an evening navigation class for years",
    "kept bees on a rented rooftop for a decade",
    "played accordion in a travelling wedding band"};
const std::vector<std::string> kCorpusLooks = {
    "tall, with copper hair and a crooked smile",
    "stocky, with a trimmed grey beard",
    "slight, with round spectacles and ink-stained fingers",
    "broad-shouldered, with a faded anchor tattoo",
    "wiry, with close-cropped silver hair",
    "soft-spoken in manner, with deep laugh lines"};

double snap_grid(double v) { return std::round(clamp15(v) * 10.0) / 10.0; }

}  // namespace

std::vector<ParticipantRecord> synth_make_corpus(const CorpusOptions& opts,
                                                 const ScoringKey& hexaco_key) {
    if (opts.n < 1) throw ConfigError("corpus size must be >= 1");
    if (opts.domain_spread < 0.0 || opts.subscale_spread < 0.0)
        throw ConfigError("corpus spread must be >= 0");
    hexaco_key.validate();

    std::vector<ParticipantRecord> out;
    out.reserve(static_cast<size_t>(opts.n));
    for (int i = 0; i < opts.n; ++i) {
        char pid[16];
        std::snprintf(pid, sizeof pid, "p%04d", i + 1);
        ParticipantRecord rec;
        rec.participant_id = pid;

        std::vector<std::pair<std::string, double>> targets;
        for (int d = 0; d < kNumDomains; ++d) {
            uint64_t s = SeedChain(opts.seed)
                             .mix("corpus-domain")
                             .mix(pid)
                             .mix(kDomainCodes[static_cast<size_t>(d)])
                             .value();
            targets.emplace_back(kDomainCodes[static_cast<size_t>(d)],
                                 snap_grid(3.0 + gauss(s, opts.domain_spread)));
        }
        ItemResponses items = synth_expand_items(hexaco_key, targets);
        for (const auto& [idx, val] : items) rec.hexaco_items[static_cast<size_t>(idx - 1)] = val;
        rec.domain_means = aggregate_hexaco(rec.item_responses(), hexaco_key);

        for (int s = 0; s < kNumSubscales; ++s) {
            uint64_t sub_seed = SeedChain(opts.seed)
                                    .mix("corpus-subscale")
                                    .mix(pid)
                                    .mix(kSubscaleIds[static_cast<size_t>(s)])
                                    .value();
            rec.subscale_means.values[static_cast<size_t>(s)] =
                snap_grid(3.0 + gauss(sub_seed, opts.subscale_spread));
        }

        if (opts.with_bio) {
            std::mt19937_64 rng(SeedChain(opts.seed).mix("corpus-bio").mix(pid).value());
            auto pick = [&rng](const std::vector<std::string>& pool) {
                std::uniform_int_distribution<size_t> d(0, pool.size() - 1);
                return pool[d(rng)];
            };
            rec.bio_facts.push_back("Grew up in " + pick(kCorpusTowns) + ".");
            rec.bio_facts.push_back("Works as a " + pick(kCorpusTrades) + ".");
            std::uniform_int_distribution<int> sibs(0, 4);
            rec.bio_facts.push_back("Has " + std::to_string(sibs(rng)) + " siblings.");
            rec.bio_facts.push_back("Once " + pick(kCorpusEvents) + ".");
            rec.appearance_note = pick(kCorpusLooks);
        }
        out.push_back(std::move(rec));
    }
    return out;
}

}  // namespace psypipe
