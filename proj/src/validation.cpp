#include "psypipe/validation.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "psypipe/errors.hpp"
#include "psypipe/hashing.hpp"
#include "psypipe/stats.hpp"
#include "psypipe/text.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace psypipe {

namespace {

ChatRequest make_strip_request(const std::string& prompt_text, const std::string& stripper_id,
                               bool restrip, const StageConfig& cfg, uint64_t seed) {
    ChatRequest req;
    req.model_id = stripper_id;
    req.temperature = 0.0;
    req.max_output = cfg.max_output;
    req.seed = seed;
    std::string sys =
        "TASK: strip-biography\n"
        "Remove every biographical detail from the prompt: names, places, occupations, "
        "dates, family facts, and physical appearance. Keep every personality "
        "description intact. Return only the cleaned prompt text.";
    if (restrip)
        sys += "\nRE-STRIP\nYour previous pass left biographical details behind; strip "
               "again, more aggressively.";
    req.messages.push_back({"system", sys});
    req.messages.push_back({"user", "PROMPT-BEGIN\n" + prompt_text + "\nPROMPT-END"});
    return req;
}

ChatRequest make_verify_request(const std::string& masked_text, const std::string& verifier_id,
                                const StageConfig& cfg, uint64_t seed) {
    ChatRequest req;
    req.model_id = verifier_id;
    req.temperature = 0.0;
    req.max_output = std::min(64, cfg.max_output);
    req.seed = seed;
    req.messages.push_back(
        {"system",
         "TASK: verify-masked\n"
         "Check whether the text still contains any biographical details (names, "
         "places, occupations, dates, family facts, appearance). Reply with exactly "
         "'VERDICT: CLEAN' or 'VERDICT: LEAKY'."});
    req.messages.push_back({"user", "MASKED-BEGIN\n" + masked_text + "\nMASKED-END"});
    return req;
}

bool verdict_clean(const std::string& reply) {
    return reply.find("VERDICT: CLEAN") != std::string::npos;
}

}  // namespace

MaskedPrompt strip_biography(Gateway& gw, const PersonaPrompt& prompt,
                             const std::string& stripper_id, const std::string& verifier_id,
                             const StageConfig& cfg) {
    if (prompt.text.empty()) throw SchemaError("cannot strip an empty persona prompt");
    MaskedPrompt out;
    out.participant_id = prompt.participant_id;
    if (stripper_id == verifier_id)
        out.warnings.push_back("stripper and verifier are the same model; independent "
                               "verification is recommended");

    for (int cycle = 0; cycle < 2; ++cycle) {
        uint64_t seed = SeedChain(cfg.master_seed)
                            .mix("strip")
                            .mix(prompt.participant_id)
                            .mix(static_cast<uint64_t>(cycle))
                            .value();
        ChatResponse stripped =
            gw.complete(make_strip_request(prompt.text, stripper_id, cycle > 0, cfg, seed));
        out.strip_cycles = cycle + 1;
        ChatResponse verdict = gw.complete(
            make_verify_request(stripped.text, verifier_id, cfg, seed ^ 0xabcdefull));
        if (verdict_clean(verdict.text)) {
            out.masked_text = stripped.text;
            return out;
        }
    }
    out.excluded = true;
    out.reason = "verifier still found biographical details after one re-strip cycle";
    return out;
}

std::vector<Lineup> build_lineups(
    const std::vector<std::pair<std::string, std::string>>& masked_by_participant,
    int lineups_per, int options, uint64_t seed) {
    const int n = static_cast<int>(masked_by_participant.size());
    if (lineups_per < 1) throw ConfigError("lineups_per must be >= 1");
    if (options < 2) throw ConfigError("lineup options must be >= 2");
    if (n < options)
        throw CapacityError("need at least " + std::to_string(options) +
                            " masked participants to build " + std::to_string(options) +
                            "-option lineups, have " + std::to_string(n));

    std::vector<Lineup> out;
    out.reserve(static_cast<size_t>(n) * static_cast<size_t>(lineups_per));
    for (int i = 0; i < n; ++i) {
        const auto& [pid, masked] = masked_by_participant[static_cast<size_t>(i)];
        for (int l = 0; l < lineups_per; ++l) {
            uint64_t lineup_seed = SeedChain(seed)
                                       .mix("lineup")
                                       .mix(pid)
                                       .mix(static_cast<uint64_t>(l))
                                       .value();
            std::mt19937_64 rng(lineup_seed);

            // Partial Fisher-Yates over the other participants gives the
            // distractors uniformly without replacement.
            std::vector<int> others;
            others.reserve(static_cast<size_t>(n - 1));
            for (int j = 0; j < n; ++j)
                if (j != i) others.push_back(j);
            for (int d = 0; d < options - 1; ++d) {
                std::uniform_int_distribution<int> pick(d, static_cast<int>(others.size()) - 1);
                std::swap(others[static_cast<size_t>(d)], others[static_cast<size_t>(pick(rng))]);
            }

            std::uniform_int_distribution<int> pos(0, options - 1);
            int correct = pos(rng);

            Lineup lineup;
            lineup.narrative_ref = pid;
            lineup.correct_index = correct;
            lineup.lineup_seed = lineup_seed;
            lineup.option_texts.resize(static_cast<size_t>(options));
            lineup.option_sources.resize(static_cast<size_t>(options));
            int next_distractor = 0;
            for (int slot = 0; slot < options; ++slot) {
                int src = (slot == correct) ? i : others[static_cast<size_t>(next_distractor++)];
                lineup.option_texts[static_cast<size_t>(slot)] =
                    masked_by_participant[static_cast<size_t>(src)].second;
                lineup.option_sources[static_cast<size_t>(slot)] =
                    masked_by_participant[static_cast<size_t>(src)].first;
            }
            out.push_back(std::move(lineup));
        }
    }
    return out;
}

MatchResult evaluate_matcher(Gateway& gw, const std::vector<Lineup>& lineups,
                             const std::map<std::string, std::string>& narrative_texts,
                             const std::string& matcher_id, const StageConfig& cfg) {
    const int n = static_cast<int>(lineups.size());
    if (n == 0) throw DegenerateInputError("no lineups to evaluate");

    MatchResult result;
    result.trials = n;
    result.picks.assign(static_cast<size_t>(n), -1);

    std::vector<std::string> errors;

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
    for (int i = 0; i < n; ++i) {
        const Lineup& lineup = lineups[static_cast<size_t>(i)];
        try {
            auto it = narrative_texts.find(lineup.narrative_ref);
            if (it == narrative_texts.end())
                throw AlignmentError("no narrative text for lineup participant " +
                                     lineup.narrative_ref);
            ChatRequest req;
            req.model_id = matcher_id;
            req.temperature = 0.0;
            req.max_output = std::min(64, cfg.max_output);
            req.seed = lineup.lineup_seed;
            req.messages.push_back(
                {"system",
                 "TASK: match-lineup\n"
                 "Decide which numbered profile describes the author of the narrative. "
                 "Reply with exactly 'ANSWER: <number>'."});
            std::ostringstream u;
            u << "NARRATIVE-BEGIN\n" << it->second << "\nNARRATIVE-END\n";
            for (size_t k = 0; k < lineup.option_texts.size(); ++k)
                u << "OPTION " << (k + 1) << "\n" << lineup.option_texts[k] << "\nEND-OPTION\n";
            req.messages.push_back({"user", u.str()});

            ChatResponse resp = gw.complete(req);
            int pick = -1;
            size_t tag = resp.text.find("ANSWER:");
            if (tag != std::string::npos) {
                try {
                    int v = std::stoi(resp.text.substr(tag + 7));
                    if (v >= 1 && v <= static_cast<int>(lineup.option_texts.size()))
                        pick = v - 1;
                } catch (const std::exception&) {
                    pick = -1;
                }
            }
            result.picks[static_cast<size_t>(i)] = pick;
        } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical(psypipe_match_err)
#endif
            errors.push_back(e.what());
        }
    }
    if (!errors.empty()) throw TransportError("lineup evaluation failed: " + errors.front());

    for (int i = 0; i < n; ++i) {
        int pick = result.picks[static_cast<size_t>(i)];
        if (pick < 0)
            ++result.unparseable;
        else if (pick == lineups[static_cast<size_t>(i)].correct_index)
            ++result.correct;
    }
    result.accuracy = static_cast<double>(result.correct) / static_cast<double>(n);
    double chance = 1.0 / static_cast<double>(lineups.front().option_texts.size());
    result.p_value = stats::binomial_test(result.correct, n, chance);
    return result;
}

namespace {

ScanReport scan_leakage_impl(const std::vector<LsiNarrative>& narratives,
                             const std::vector<std::pair<int, std::string>>& stems,
                             double threshold, bool parallel) {
    if (stems.empty()) throw ConfigError("leakage scan needs at least one item stem");
    struct StemSet {
        int index;
        std::unordered_set<std::string> tokens;
    };
    std::vector<StemSet> stem_sets;
    stem_sets.reserve(stems.size());
    for (const auto& [index, stem] : stems) {
        StemSet s{index, text::token_set(stem)};
        if (s.tokens.empty())
            throw ConfigError("item stem " + std::to_string(index) +
                              " has no tokens after normalization");
        stem_sets.push_back(std::move(s));
    }

    const int n = static_cast<int>(narratives.size());
    std::vector<ScanReport> partial(static_cast<size_t>(n));

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) if (parallel)
#endif
    for (int i = 0; i < n; ++i) {
        const LsiNarrative& narrative = narratives[static_cast<size_t>(i)];
        ScanReport& local = partial[static_cast<size_t>(i)];
        for (const auto& section : narrative.sections) {
            for (const auto& sentence : text::split_sentences(section.text)) {
                auto tokens = text::token_set(sentence);
                if (tokens.empty()) {
                    ++local.sentences_skipped_empty;
                    continue;
                }
                ++local.sentences_scanned;
                for (const auto& stem : stem_sets) {
                    double j = text::jaccard(tokens, stem.tokens);
                    if (j > threshold) {
                        LeakageFlag flag;
                        flag.narrative_ref = narrative.participant_id;
                        flag.prompt_id = section.prompt_id;
                        flag.sentence = sentence;
                        flag.item_index = stem.index;
                        flag.jaccard = j;
                        local.flags.push_back(std::move(flag));
                    }
                }
            }
        }
    }

    ScanReport out;
    for (auto& p : partial) {
        out.sentences_scanned += p.sentences_scanned;
        out.sentences_skipped_empty += p.sentences_skipped_empty;
        out.flags.insert(out.flags.end(), p.flags.begin(), p.flags.end());
    }
    std::sort(out.flags.begin(), out.flags.end(), [](const LeakageFlag& a, const LeakageFlag& b) {
        if (a.jaccard != b.jaccard) return a.jaccard > b.jaccard;
        if (a.narrative_ref != b.narrative_ref) return a.narrative_ref < b.narrative_ref;
        if (a.prompt_id != b.prompt_id) return a.prompt_id < b.prompt_id;
        if (a.item_index != b.item_index) return a.item_index < b.item_index;
        return a.sentence < b.sentence;
    });
    return out;
}

}  // namespace

ScanReport scan_leakage(const std::vector<LsiNarrative>& narratives,
                        const std::vector<std::pair<int, std::string>>& stems,
                        double threshold) {
    return scan_leakage_impl(narratives, stems, threshold, true);
}

ScanReport scan_leakage_serial(const std::vector<LsiNarrative>& narratives,
                               const std::vector<std::pair<int, std::string>>& stems,
                               double threshold) {
    return scan_leakage_impl(narratives, stems, threshold, false);
}

BiasReport decompose_bias(const std::map<std::string, DomainProfile>& truth,
                          const std::map<std::string, DomainProfile>& prompt_scored,
                          const std::map<std::string, DomainProfile>& narrative_scored,
                          const DomainProfile& unconditioned,
                          const std::string& generator_id, const std::string& scorer_id) {
    if (truth.empty()) throw DegenerateInputError("bias decomposition needs participants");
    auto require_aligned = [&](const std::map<std::string, DomainProfile>& other,
                               const char* what) {
        if (other.size() != truth.size())
            throw AlignmentError(std::string(what) + " set has " +
                                 std::to_string(other.size()) + " participants, truth has " +
                                 std::to_string(truth.size()));
        for (const auto& [pid, _] : truth)
            if (!other.count(pid))
                throw AlignmentError(std::string(what) + " set is missing participant " + pid);
    };
    require_aligned(prompt_scored, "prompt-scored");
    require_aligned(narrative_scored, "narrative-scored");

    BiasReport report;
    report.generator_id = generator_id;
    report.scorer_id = scorer_id;
    report.n = static_cast<int>(truth.size());

    const double n = static_cast<double>(truth.size());
    for (int d = 0; d < kNumDomains; ++d) {
        double sum_truth = 0.0, sum_prompt_delta = 0.0, sum_total_delta = 0.0;
        for (const auto& [pid, t] : truth) {
            const DomainProfile& p = prompt_scored.at(pid);
            const DomainProfile& m = narrative_scored.at(pid);
            sum_truth += t.at(d);
            sum_prompt_delta += p.at(d) - t.at(d);
            sum_total_delta += m.at(d) - t.at(d);
        }
        report.stage1.at(d) = sum_prompt_delta / n;
        report.total.at(d) = sum_total_delta / n;
        // Defined by subtraction so both additivity identities are exact.
        report.stage2.at(d) = report.total.at(d) - report.stage1.at(d);
        report.stage2a.at(d) = unconditioned.at(d) - sum_truth / n;
        report.stage2b.at(d) = report.stage2.at(d) - report.stage2a.at(d);
    }
    return report;
}

}  // namespace psypipe
