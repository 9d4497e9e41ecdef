#include "psypipe/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "psypipe/errors.hpp"
#include "psypipe/hashing.hpp"
#include "psypipe/text.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using nlohmann::json;

namespace psypipe {

namespace {

std::string fmt3(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", v);
    return buf;
}

std::string trimmed(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string join_indices(const std::vector<int>& v) {
    std::string out = "{";
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(v[i]);
    }
    out += "}";
    return out;
}

std::string item_line(const KeyEntry& e) {
    std::string out = std::to_string(e.index) + ". [" + e.scale + (e.reversed ? ",R" : "") +
                      "] " + e.stem;
    return out;
}

}  // namespace

// ---- protocol --------------------------------------------------------------

void LsiProtocol::validate() const {
    if (static_cast<int>(entries.size()) != kLsiSectionCount)
        throw SchemaError("interview protocol has " + std::to_string(entries.size()) +
                          " entries, expected " + std::to_string(kLsiSectionCount));
    std::set<std::string> ids;
    for (const auto& e : entries) {
        if (e.prompt_id.empty() || e.interviewer_text.empty())
            throw SchemaError("interview protocol entry with empty prompt_id or text");
        if (!ids.insert(e.prompt_id).second)
            throw SchemaError("interview protocol has duplicate prompt_id " + e.prompt_id);
    }
}

std::vector<std::string> LsiProtocol::prompt_ids() const {
    std::vector<std::string> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.prompt_id);
    return out;
}

LsiProtocol LsiProtocol::from_json_text(const std::string& text, const std::string& origin) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError("invalid JSON in " + origin);
    LsiProtocol p;
    try {
        for (const auto& e : j.at("entries")) {
            LsiEntry entry;
            entry.prompt_id = e.at("prompt_id").get<std::string>();
            entry.interviewer_text = e.at("text").get<std::string>();
            p.entries.push_back(std::move(entry));
        }
    } catch (const json::exception& e) {
        throw ParseError(origin + ": " + e.what());
    }
    p.validate();
    return p;
}

LsiProtocol LsiProtocol::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open interview protocol: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str(), path);
}

const char* scoring_mode_name(ScoringMode m) {
    return m == ScoringMode::B60 ? "B60" : "B10";
}

ScoringMode scoring_mode_from_name(const std::string& name) {
    if (name == "B60") return ScoringMode::B60;
    if (name == "B10") return ScoringMode::B10;
    throw ConfigError("unknown scoring mode: " + name + " (expected B60 or B10)");
}

// ---- recovered scores ------------------------------------------------------

RecoveredScores RecoveredScores::make(std::string participant_id, std::string scorer_id,
                                      const ItemResponses& hexaco_ratings,
                                      const ItemResponses& beyond_ratings,
                                      const ScoringKey& hexaco_key,
                                      const ScoringKey& beyond_key,
                                      std::vector<std::string> warnings) {
    RecoveredScores out;
    out.participant_id = std::move(participant_id);
    out.scorer_id = std::move(scorer_id);
    out.item_ratings = hexaco_ratings;
    out.beyond_ratings = beyond_ratings;
    out.parse_warnings = std::move(warnings);
    out.domain_means = aggregate_hexaco(hexaco_ratings, hexaco_key);
    if (!beyond_ratings.empty())
        out.subscale_means = aggregate_subscales(beyond_ratings, beyond_key);
    return out;
}

RecoveredScores RecoveredScores::refused(std::string participant_id, std::string scorer_id,
                                         std::string reply) {
    RecoveredScores out;
    out.participant_id = std::move(participant_id);
    out.scorer_id = std::move(scorer_id);
    out.refusal = true;
    out.parse_warnings.push_back("refusal: " + reply);
    return out;
}

std::string recovered_to_json(const RecoveredScores& s) {
    json j;
    j["participant_id"] = s.participant_id;
    j["scorer_id"] = s.scorer_id;
    j["refusal"] = s.refusal;
    json items = json::object();
    for (const auto& [k, v] : s.item_ratings) items[std::to_string(k)] = v;
    j["item_ratings"] = items;
    json beyond = json::object();
    for (const auto& [k, v] : s.beyond_ratings) beyond[std::to_string(k)] = v;
    j["beyond_ratings"] = beyond;
    json dm = json::object();
    for (int d = 0; d < kNumDomains; ++d)
        dm[kDomainCodes[static_cast<size_t>(d)]] = s.domain_means.at(d);
    j["domain_means"] = dm;
    if (s.subscale_means) {
        json sm = json::object();
        for (int i = 0; i < kNumSubscales; ++i)
            sm[kSubscaleIds[static_cast<size_t>(i)]] = s.subscale_means->values[static_cast<size_t>(i)];
        j["subscale_means"] = sm;
    }
    j["parse_warnings"] = s.parse_warnings;
    return j.dump(2);
}

RecoveredScores recovered_from_json(const std::string& text, const ScoringKey& hexaco_key,
                                    const ScoringKey& beyond_key, const std::string& origin) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError("invalid JSON in " + origin);
    try {
        std::string pid = j.at("participant_id").get<std::string>();
        std::string scorer = j.at("scorer_id").get<std::string>();
        if (j.value("refusal", false)) {
            RecoveredScores out;
            out.participant_id = std::move(pid);
            out.scorer_id = std::move(scorer);
            out.refusal = true;
            if (j.contains("parse_warnings"))
                for (const auto& w : j["parse_warnings"])
                    out.parse_warnings.push_back(w.get<std::string>());
            return out;
        }
        ItemResponses items, beyond;
        for (const auto& [k, v] : j.at("item_ratings").items())
            items[std::stoi(k)] = v.get<int>();
        if (j.contains("beyond_ratings"))
            for (const auto& [k, v] : j["beyond_ratings"].items())
                beyond[std::stoi(k)] = v.get<int>();
        std::vector<std::string> warnings;
        if (j.contains("parse_warnings"))
            for (const auto& w : j["parse_warnings"]) warnings.push_back(w.get<std::string>());
        // Means are re-derived here, never read back, so a stored file can
        // not smuggle in inconsistent aggregates.
        return RecoveredScores::make(pid, scorer, items, beyond, hexaco_key, beyond_key,
                                     std::move(warnings));
    } catch (const json::exception& e) {
        throw ParseError(origin + ": " + e.what());
    }
}

// ---- request builders ------------------------------------------------------

ChatRequest build_stage1_request(const ParticipantRecord& record, const StageConfig& cfg) {
    ChatRequest req;
    req.model_id = cfg.generator_id;
    req.temperature = cfg.generation_temperature;
    req.max_output = cfg.max_output;
    req.seed = SeedChain(cfg.master_seed).mix("stage1").mix(record.participant_id).value();

    ChatMessage sys;
    sys.role = "system";
    sys.text =
        "TASK: persona-prompt\n"
        "You write immersive personality prompts. Given a psychometric profile, produce "
        "roughly 1000 words of second-person prose that makes the reader inhabit this "
        "person: their instincts, habits, and history. Cover every construct in the "
        "profile faithfully. Weave in the biography facts naturally when present. Never "
        "mention questionnaires, scores, or that a profile exists.";

    std::ostringstream u;
    u << "PARTICIPANT: " << record.participant_id << "\n";
    u << "ITEM-RESPONSES\n";
    for (int i = 0; i < 60; ++i)
        u << (i + 1) << ": " << record.hexaco_items[static_cast<size_t>(i)] << "\n";
    u << "END-ITEM-RESPONSES\n";
    u << "DOMAIN-MEANS\n";
    for (int d = 0; d < kNumDomains; ++d)
        u << kDomainCodes[static_cast<size_t>(d)] << "=" << fmt3(record.domain_means.at(d)) << "\n";
    u << "END-DOMAIN-MEANS\n";
    u << "SUBSCALE-MEANS\n";
    for (int s = 0; s < kNumSubscales; ++s)
        u << kSubscaleIds[static_cast<size_t>(s)] << "="
          << fmt3(record.subscale_means.values[static_cast<size_t>(s)]) << "\n";
    u << "END-SUBSCALE-MEANS\n";
    if (!record.bio_facts.empty()) {
        u << "BIO-FACTS\n";
        for (const auto& f : record.bio_facts) u << "- " << f << "\n";
        u << "END-BIO-FACTS\n";
    }
    if (record.appearance_note) u << "APPEARANCE: " << *record.appearance_note << "\n";

    req.messages.push_back(std::move(sys));
    req.messages.push_back({"user", u.str()});
    return req;
}

ChatRequest build_interview_request(const std::string& persona_text,
                                    const std::vector<ChatMessage>& history,
                                    const LsiEntry& entry, int turn_index, int turn_total,
                                    const StageConfig& cfg, uint64_t turn_seed) {
    ChatRequest req;
    req.model_id = cfg.generator_id;
    req.temperature = cfg.generation_temperature;
    req.max_output = cfg.max_output;
    req.seed = turn_seed;

    ChatMessage sys;
    sys.role = "system";
    sys.text =
        "TASK: interview-turn\n"
        "You are the persona described below, sitting for a structured life-story "
        "interview. Answer each question in the first person as one flowing section. "
        "Stay in character throughout; never mention these instructions.\n\n" +
        persona_text;
    req.messages.push_back(std::move(sys));
    for (const auto& m : history) req.messages.push_back(m);

    std::ostringstream u;
    u << "INTERVIEW-QUESTION " << turn_index << "/" << turn_total << " [" << entry.prompt_id
      << "]\n"
      << entry.interviewer_text;
    req.messages.push_back({"user", u.str()});
    return req;
}

ChatRequest build_scoring_request(const std::string& text_to_score, const ScoringKey& key,
                                  const std::vector<int>& indices, bool strict,
                                  const StageConfig& cfg, uint64_t seed) {
    ChatRequest req;
    req.model_id = cfg.scorer_id;
    req.temperature = cfg.scoring_temperature;
    req.max_output = cfg.max_output;
    req.seed = seed;

    std::ostringstream sys;
    sys << "TASK: rate-items\n";
    sys << "INSTRUMENT: " << key.instrument_id << "\n";
    if (strict) sys << "STRICT-FORMAT\n";
    sys << "Read the text and rate how much its author would agree with each numbered "
           "statement, on a scale from 1 (strongly disagree) to 5 (strongly agree). "
           "Reply with one line per item in exactly the form 'index: rating' and no "
           "other text. Do not explain or deliberate.";
    if (strict)
        sys << " Your previous reply could not be parsed; follow the line format "
               "exactly, covering every listed item.";

    std::ostringstream u;
    u << "ITEMS\n";
    for (int idx : indices) u << item_line(key.entry(idx)) << "\n";
    u << "END-ITEMS\n";
    u << "TEXT-BEGIN\n" << text_to_score << "\nTEXT-END\n";

    req.messages.push_back({"system", sys.str()});
    req.messages.push_back({"user", u.str()});
    return req;
}

ChatRequest build_self_report_request(const ScoringKey& key, const std::vector<int>& indices,
                                      bool strict, const StageConfig& cfg, uint64_t seed) {
    ChatRequest req;
    req.model_id = cfg.scorer_id;
    req.temperature = cfg.scoring_temperature;
    req.max_output = cfg.max_output;
    req.seed = seed;

    std::ostringstream sys;
    sys << "TASK: rate-items\n";
    sys << "INSTRUMENT: " << key.instrument_id << "\n";
    sys << "MODE: self-report\n";
    if (strict) sys << "STRICT-FORMAT\n";
    sys << "Rate how much you, yourself, agree with each numbered statement on a scale "
           "from 1 (strongly disagree) to 5 (strongly agree). Reply with one line per "
           "item in exactly the form 'index: rating' and no other text.";

    std::ostringstream u;
    u << "ITEMS\n";
    for (int idx : indices) u << item_line(key.entry(idx)) << "\n";
    u << "END-ITEMS\n";

    req.messages.push_back({"system", sys.str()});
    req.messages.push_back({"user", u.str()});
    return req;
}

// ---- parsing ---------------------------------------------------------------

RatingParse parse_rating_lines(const std::string& reply, const std::vector<int>& expected) {
    RatingParse out;
    std::set<int> want(expected.begin(), expected.end());
    std::set<int> seen;

    std::istringstream in(reply);
    std::string line;
    while (std::getline(in, line)) {
        std::string t = trimmed(line);
        if (t.empty()) continue;
        size_t colon = t.find(':');
        if (colon == std::string::npos) {
            out.warnings.push_back("unparseable line: " + t.substr(0, 60));
            continue;
        }
        int index = 0, value = 0;
        try {
            size_t used = 0;
            index = std::stoi(t, &used);
            if (trimmed(t.substr(used, colon - used)) != "" ) {
                out.warnings.push_back("unparseable line: " + t.substr(0, 60));
                continue;
            }
            value = std::stoi(t.substr(colon + 1));
        } catch (const std::exception&) {
            out.warnings.push_back("unparseable line: " + t.substr(0, 60));
            continue;
        }
        if (!want.count(index)) {
            out.warnings.push_back("unexpected item index " + std::to_string(index));
            continue;
        }
        if (!seen.insert(index).second) {
            out.warnings.push_back("duplicate rating for item " + std::to_string(index) +
                                   ", keeping the first");
            continue;
        }
        if (value < 1 || value > 5) {
            out.out_of_range.push_back(index);
            continue;
        }
        out.ratings[index] = value;
    }
    for (int idx : expected)
        if (!out.ratings.count(idx) &&
            std::find(out.out_of_range.begin(), out.out_of_range.end(), idx) ==
                out.out_of_range.end())
            out.missing.push_back(idx);
    return out;
}

// ---- stage runners ---------------------------------------------------------

PersonaPrompt run_stage1_prompt(Gateway& gw, const ParticipantRecord& record,
                                const StageConfig& cfg) {
    ChatRequest req = build_stage1_request(record, cfg);
    ChatResponse resp = gw.complete(req);
    PersonaPrompt p;
    p.participant_id = record.participant_id;
    p.generator_id = cfg.generator_id;
    p.text = resp.text;
    p.refusal = resp.refusal;
    p.word_count = text::count_words(resp.text);
    return p;
}

LsiNarrative run_stage2_narrative(Gateway& gw, const PersonaPrompt& prompt,
                                  const LsiProtocol& protocol, const StageConfig& cfg) {
    protocol.validate();
    if (prompt.refusal)
        throw SchemaError("cannot interview participant " + prompt.participant_id +
                          ": the persona prompt is a refusal");
    if (prompt.text.empty())
        throw SchemaError("cannot interview participant " + prompt.participant_id +
                          ": empty persona prompt");

    LsiNarrative n;
    n.participant_id = prompt.participant_id;
    n.generator_id = cfg.generator_id;
    n.temperature = cfg.generation_temperature;
    n.created_at = "1970-01-01T00:00:00Z";  // fixed: outputs must be seed-deterministic

    std::vector<ChatMessage> history;
    int failures = 0;
    const int total = static_cast<int>(protocol.entries.size());
    for (int k = 1; k <= total; ++k) {
        const LsiEntry& entry = protocol.entries[static_cast<size_t>(k - 1)];
        uint64_t seed = SeedChain(cfg.master_seed)
                            .mix("stage2")
                            .mix(prompt.participant_id)
                            .mix(static_cast<uint64_t>(k))
                            .value();
        ChatRequest req = build_interview_request(prompt.text, history, entry, k, total, cfg,
                                                  seed);
        ChatResponse resp = gw.complete(req);
        std::string answer = trimmed(resp.text);
        if (answer.empty() || resp.refusal) {
            ++failures;
            if (failures > cfg.max_section_failures)
                throw IncompleteInputError("narrative for " + prompt.participant_id +
                                           " rejected: " + std::to_string(failures) +
                                           " section failures");
            answer = "(section " + entry.prompt_id + " missing)";
        }
        NarrativeSection sec;
        sec.prompt_id = entry.prompt_id;
        sec.text = answer;
        n.sections.push_back(sec);
        history.push_back({"user", req.messages.back().text});
        history.push_back({"assistant", answer});
    }
    n.validate();
    return n;
}

namespace {

// One instrument, possibly several batches; nullopt when the scorer refuses.
std::optional<ItemResponses> score_instrument(Gateway& gw, const std::string& text,
                                              const std::string& pid, const ScoringKey& key,
                                              const std::vector<std::vector<int>>& batches,
                                              const StageConfig& cfg,
                                              const ParticipantRecord* isolate_against,
                                              std::vector<std::string>& warnings,
                                              std::string& refusal_reply) {
    ItemResponses merged;
    int batch_no = 0;
    for (const auto& indices : batches) {
        ++batch_no;
        uint64_t seed = SeedChain(cfg.master_seed)
                            .mix("score")
                            .mix(pid)
                            .mix(key.instrument_id)
                            .mix(static_cast<uint64_t>(batch_no))
                            .value();
        ChatRequest req = build_scoring_request(text, key, indices, /*strict=*/false, cfg, seed);
        if (isolate_against)
            for (const auto& m : req.messages) assert_stage_isolation(m.text, *isolate_against);
        ChatResponse resp = gw.complete(req);
        if (resp.refusal) {
            refusal_reply = resp.text;
            return std::nullopt;
        }
        RatingParse parse = parse_rating_lines(resp.text, indices);
        if (!parse.ok()) {
            ChatRequest retry = build_scoring_request(text, key, indices, /*strict=*/true, cfg,
                                                      seed ^ 0x5bd1e995u);
            if (isolate_against)
                for (const auto& m : retry.messages)
                    assert_stage_isolation(m.text, *isolate_against);
            ChatResponse again = gw.complete(retry);
            if (again.refusal) {
                refusal_reply = again.text;
                return std::nullopt;
            }
            warnings.push_back(key.instrument_id + " batch " + std::to_string(batch_no) +
                               ": re-prompted with strict format");
            parse = parse_rating_lines(again.text, indices);
            if (!parse.ok()) {
                std::string detail;
                if (!parse.missing.empty())
                    detail += " missing items " + join_indices(parse.missing);
                if (!parse.out_of_range.empty())
                    detail += " out-of-range items " + join_indices(parse.out_of_range);
                throw ParseError("scorer output unusable after re-prompt for " + pid + " (" +
                                 key.instrument_id + "):" + detail);
            }
        }
        for (const auto& w : parse.warnings) warnings.push_back(w);
        for (const auto& [k2, v] : parse.ratings) merged[k2] = v;
    }
    return merged;
}

std::vector<std::vector<int>> hexaco_batches(const ScoringKey& key, ScoringMode mode) {
    std::vector<std::vector<int>> batches;
    if (mode == ScoringMode::B60) {
        std::vector<int> all;
        for (const auto& e : key.items) all.push_back(e.index);
        std::sort(all.begin(), all.end());
        batches.push_back(std::move(all));
    } else {
        for (const auto& scale : key.scales) batches.push_back(key.indices_for_scale(scale));
    }
    return batches;
}

RecoveredScores score_text(Gateway& gw, const std::string& text, const std::string& pid,
                           const ScoringKey& hexaco_key, const ScoringKey& beyond_key,
                           const StageConfig& cfg, const ParticipantRecord* isolate_against) {
    std::vector<std::string> warnings;
    std::string refusal_reply;

    auto hexaco = score_instrument(gw, text, pid, hexaco_key,
                                   hexaco_batches(hexaco_key, cfg.mode), cfg, isolate_against,
                                   warnings, refusal_reply);
    if (!hexaco) return RecoveredScores::refused(pid, cfg.scorer_id, refusal_reply);

    std::vector<int> beyond_all;
    for (const auto& e : beyond_key.items) beyond_all.push_back(e.index);
    std::sort(beyond_all.begin(), beyond_all.end());
    auto beyond = score_instrument(gw, text, pid, beyond_key, {beyond_all}, cfg,
                                   isolate_against, warnings, refusal_reply);
    if (!beyond) return RecoveredScores::refused(pid, cfg.scorer_id, refusal_reply);

    return RecoveredScores::make(pid, cfg.scorer_id, *hexaco, *beyond, hexaco_key, beyond_key,
                                 std::move(warnings));
}

}  // namespace

RecoveredScores run_stage3_score(Gateway& gw, const LsiNarrative& narrative,
                                 const ScoringKey& hexaco_key, const ScoringKey& beyond_key,
                                 const StageConfig& cfg) {
    narrative.validate();
    return score_text(gw, narrative.full_text(), narrative.participant_id, hexaco_key,
                      beyond_key, cfg, nullptr);
}

RecoveredScores run_profile_ceiling(Gateway& gw, const PersonaPrompt& prompt,
                                    const ScoringKey& hexaco_key, const ScoringKey& beyond_key,
                                    const StageConfig& cfg) {
    if (prompt.refusal)
        throw SchemaError("cannot ceiling-score participant " + prompt.participant_id +
                          ": the persona prompt is a refusal");
    return score_text(gw, prompt.text, prompt.participant_id, hexaco_key, beyond_key, cfg,
                      nullptr);
}

std::string entity_prompt_text() {
    return "You are a thoughtful adult with an ordinary, unremarkable life. Tell your "
           "story plainly and honestly in the first person, drawing on everyday "
           "memories, without any particular agenda about how you come across.";
}

std::vector<RecoveredScores> run_unconditioned(Gateway& gw, const ScoringKey& hexaco_key,
                                               const ScoringKey& beyond_key,
                                               const StageConfig& cfg, int n_runs,
                                               UnconditionedMode mode,
                                               const LsiProtocol* protocol) {
    if (n_runs < 1) throw ConfigError("unconditioned baseline needs n_runs >= 1");
    std::vector<RecoveredScores> out;
    out.reserve(static_cast<size_t>(n_runs));

    for (int i = 1; i <= n_runs; ++i) {
        char pid[32];
        std::snprintf(pid, sizeof(pid), "uncond-%03d", i);
        if (mode == UnconditionedMode::self_report) {
            std::vector<std::string> warnings;
            std::string refusal_reply;
            StageConfig run_cfg = cfg;
            auto ratings = [&](const ScoringKey& key) -> std::optional<ItemResponses> {
                std::vector<int> all;
                for (const auto& e : key.items) all.push_back(e.index);
                std::sort(all.begin(), all.end());
                uint64_t seed = SeedChain(cfg.master_seed)
                                    .mix("self-report")
                                    .mix(pid)
                                    .mix(key.instrument_id)
                                    .value();
                ChatRequest req = build_self_report_request(key, all, false, run_cfg, seed);
                ChatResponse resp = gw.complete(req);
                if (resp.refusal) {
                    refusal_reply = resp.text;
                    return std::nullopt;
                }
                RatingParse parse = parse_rating_lines(resp.text, all);
                if (!parse.ok()) {
                    ChatRequest retry =
                        build_self_report_request(key, all, true, run_cfg, seed ^ 0x9e3779b9u);
                    ChatResponse again = gw.complete(retry);
                    if (again.refusal) {
                        refusal_reply = again.text;
                        return std::nullopt;
                    }
                    parse = parse_rating_lines(again.text, all);
                    if (!parse.ok())
                        throw ParseError(std::string("self-report output unusable after "
                                                     "re-prompt for ") +
                                         pid);
                    warnings.push_back(key.instrument_id + ": re-prompted with strict format");
                }
                return parse.ratings;
            };
            auto hex = ratings(hexaco_key);
            if (!hex) {
                out.push_back(RecoveredScores::refused(pid, cfg.scorer_id, refusal_reply));
                continue;
            }
            auto beyond = ratings(beyond_key);
            if (!beyond) {
                out.push_back(RecoveredScores::refused(pid, cfg.scorer_id, refusal_reply));
                continue;
            }
            out.push_back(RecoveredScores::make(pid, cfg.scorer_id, *hex, *beyond, hexaco_key,
                                                beyond_key, warnings));
        } else {
            if (!protocol)
                throw ConfigError("entity-narrative baseline needs an interview protocol");
            PersonaPrompt p;
            p.participant_id = pid;
            p.generator_id = cfg.generator_id;
            p.text = entity_prompt_text() + "\nPERSONA-FOR: " + pid + "\n";
            p.word_count = text::count_words(p.text);
            LsiNarrative narrative = run_stage2_narrative(gw, p, *protocol, cfg);
            out.push_back(run_stage3_score(gw, narrative, hexaco_key, beyond_key, cfg));
        }
    }
    return out;
}

void assert_stage_isolation(const std::string& payload, const ParticipantRecord& record) {
    auto found = [&](const std::string& needle) {
        return payload.find(needle) != std::string::npos;
    };
    if (found("ITEM-RESPONSES"))
        throw ProvenanceError("stage isolation violated: raw item responses present in a "
                              "scoring payload for " + record.participant_id);
    if (found("TRAIT-PROFILE"))
        throw ProvenanceError("stage isolation violated: numeric profile block present in a "
                              "scoring payload for " + record.participant_id);
    for (int d = 0; d < kNumDomains; ++d) {
        std::string leak = std::string(kDomainCodes[static_cast<size_t>(d)]) + "=" +
                           fmt3(record.domain_means.at(d));
        if (found(leak))
            throw ProvenanceError("stage isolation violated: domain mean " + leak +
                                  " present in a scoring payload for " + record.participant_id);
    }
    for (int s = 0; s < kNumSubscales; ++s) {
        std::string leak = std::string(kSubscaleIds[static_cast<size_t>(s)]) + "=" +
                           fmt3(record.subscale_means.values[static_cast<size_t>(s)]);
        if (found(leak))
            throw ProvenanceError("stage isolation violated: subscale mean " + leak +
                                  " present in a scoring payload for " + record.participant_id);
    }
}

// ---- persona prompt persistence --------------------------------------------

std::string persona_prompt_to_json(const PersonaPrompt& p) {
    json j;
    j["participant_id"] = p.participant_id;
    j["generator_id"] = p.generator_id;
    j["text"] = p.text;
    j["word_count"] = p.word_count;
    j["refusal"] = p.refusal;
    if (p.masked_variant) j["masked_variant"] = *p.masked_variant;
    return j.dump(2);
}

PersonaPrompt persona_prompt_from_json(const std::string& text, const std::string& origin) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError("invalid JSON in " + origin);
    PersonaPrompt p;
    try {
        p.participant_id = j.at("participant_id").get<std::string>();
        p.generator_id = j.at("generator_id").get<std::string>();
        p.text = j.at("text").get<std::string>();
        p.word_count = j.value("word_count", static_cast<size_t>(0));
        p.refusal = j.value("refusal", false);
        if (j.contains("masked_variant")) p.masked_variant = j["masked_variant"].get<std::string>();
    } catch (const json::exception& e) {
        throw ParseError(origin + ": " + e.what());
    }
    return p;
}

// ---- batch drivers ---------------------------------------------------------

BatchResult run_prompt_batch(Gateway& gw, const std::vector<ParticipantRecord>& records,
                             const StageConfig& cfg, ArtifactStore& store,
                             const RunManifest& manifest, int concurrency) {
    store.open_run(manifest);
    BatchResult result;
    const int n = static_cast<int>(records.size());
    if (concurrency < 1) concurrency = 1;

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(concurrency)
#endif
    for (int i = 0; i < n; ++i) {
        const ParticipantRecord& rec = records[static_cast<size_t>(i)];
        bool skip;
#ifdef _OPENMP
#pragma omp critical(psypipe_store)
#endif
        skip = store.has(manifest.run_id, rec.participant_id);
        if (skip) {
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
            ++result.skipped;
            continue;
        }
        try {
            PersonaPrompt p = run_stage1_prompt(gw, rec, cfg);
#ifdef _OPENMP
#pragma omp critical(psypipe_store)
#endif
            store.store(manifest, rec.participant_id, persona_prompt_to_json(p));
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
            {
                if (p.refusal)
                    ++result.refusals;
                else
                    ++result.completed;
            }
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
            {
                ++result.failures;
                result.failure_details.push_back(rec.participant_id + ": " + e.what());
            }
        }
    }
    return result;
}

BatchResult run_narrative_batch(Gateway& gw, const std::vector<ParticipantRecord>& records,
                                const LsiProtocol& protocol, const StageConfig& cfg,
                                ArtifactStore& store, const std::string& prompt_run_id,
                                const RunManifest& manifest, int concurrency) {
    protocol.validate();
    store.open_run(manifest);
    BatchResult result;
    const int n = static_cast<int>(records.size());
    if (concurrency < 1) concurrency = 1;

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(concurrency)
#endif
    for (int i = 0; i < n; ++i) {
        const ParticipantRecord& rec = records[static_cast<size_t>(i)];
        try {
            bool skip;
            std::optional<std::string> prompt_json;
#ifdef _OPENMP
#pragma omp critical(psypipe_store)
#endif
            {
                skip = store.has(manifest.run_id, rec.participant_id);
                if (!skip) prompt_json = store.read(prompt_run_id, rec.participant_id);
            }
            if (skip) {
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
                ++result.skipped;
                continue;
            }
            if (!prompt_json)
                throw IoError("no stored persona prompt under run " + prompt_run_id);
            PersonaPrompt prompt = persona_prompt_from_json(*prompt_json, prompt_run_id);
            if (prompt.refusal) {
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
                ++result.refusals;
                continue;
            }
            LsiNarrative narrative = run_stage2_narrative(gw, prompt, protocol, cfg);
#ifdef _OPENMP
#pragma omp critical(psypipe_store)
#endif
            store.store(manifest, rec.participant_id, narrative_to_json(narrative));
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
            ++result.completed;
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
            {
                ++result.failures;
                result.failure_details.push_back(rec.participant_id + ": " + e.what());
            }
        }
    }
    return result;
}

BatchResult run_score_batch(Gateway& gw, const std::vector<ParticipantRecord>& records,
                            const ScoringKey& hexaco_key, const ScoringKey& beyond_key,
                            const StageConfig& cfg, ArtifactStore& store,
                            const std::string& narrative_run_id, const RunManifest& manifest,
                            int concurrency, bool isolation_check) {
    store.open_run(manifest);
    BatchResult result;
    const int n = static_cast<int>(records.size());
    if (concurrency < 1) concurrency = 1;

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(concurrency)
#endif
    for (int i = 0; i < n; ++i) {
        const ParticipantRecord& rec = records[static_cast<size_t>(i)];
        try {
            bool skip;
            std::optional<std::string> narrative_json;
#ifdef _OPENMP
#pragma omp critical(psypipe_store)
#endif
            {
                skip = store.has(manifest.run_id, rec.participant_id);
                if (!skip) narrative_json = store.read(narrative_run_id, rec.participant_id);
            }
            if (skip) {
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
                ++result.skipped;
                continue;
            }
            if (!narrative_json)
                throw IoError("no stored narrative under run " + narrative_run_id);
            LsiNarrative narrative = narrative_from_json(*narrative_json, narrative_run_id);
            RecoveredScores scores =
                isolation_check
                    ? score_text(gw, narrative.full_text(), narrative.participant_id,
                                 hexaco_key, beyond_key, cfg, &rec)
                    : run_stage3_score(gw, narrative, hexaco_key, beyond_key, cfg);
#ifdef _OPENMP
#pragma omp critical(psypipe_store)
#endif
            store.store(manifest, rec.participant_id, recovered_to_json(scores));
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
            {
                if (scores.refusal)
                    ++result.refusals;
                else
                    ++result.completed;
            }
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
            {
                ++result.failures;
                result.failure_details.push_back(rec.participant_id + ": " + e.what());
            }
        }
    }
    return result;
}

BatchResult run_ceiling_batch(Gateway& gw, const std::vector<ParticipantRecord>& records,
                              const ScoringKey& hexaco_key, const ScoringKey& beyond_key,
                              const StageConfig& cfg, ArtifactStore& store,
                              const std::string& prompt_run_id, const RunManifest& manifest,
                              int concurrency) {
    store.open_run(manifest);
    BatchResult result;
    const int n = static_cast<int>(records.size());
    if (concurrency < 1) concurrency = 1;

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(concurrency)
#endif
    for (int i = 0; i < n; ++i) {
        const ParticipantRecord& rec = records[static_cast<size_t>(i)];
        try {
            bool skip;
            std::optional<std::string> prompt_json;
#ifdef _OPENMP
#pragma omp critical(psypipe_store)
#endif
            {
                skip = store.has(manifest.run_id, rec.participant_id);
                if (!skip) prompt_json = store.read(prompt_run_id, rec.participant_id);
            }
            if (skip) {
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
                ++result.skipped;
                continue;
            }
            if (!prompt_json)
                throw IoError("no stored persona prompt under run " + prompt_run_id);
            PersonaPrompt prompt = persona_prompt_from_json(*prompt_json, prompt_run_id);
            if (prompt.refusal) {
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
                ++result.refusals;
                continue;
            }
            RecoveredScores scores =
                run_profile_ceiling(gw, prompt, hexaco_key, beyond_key, cfg);
#ifdef _OPENMP
#pragma omp critical(psypipe_store)
#endif
            store.store(manifest, rec.participant_id, recovered_to_json(scores));
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
            ++result.completed;
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical(psypipe_result)
#endif
            {
                ++result.failures;
                result.failure_details.push_back(rec.participant_id + ": " + e.what());
            }
        }
    }
    return result;
}

}  // namespace psypipe
