#include "psypipe/content_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "psypipe/errors.hpp"
#include "psypipe/hashing.hpp"
#include "psypipe/text.hpp"

namespace psypipe {

using nlohmann::json;

// ---- rubric ----------------------------------------------------------------

void FeatureRubric::validate() const {
    if (rubric_id.empty()) throw SchemaError("feature rubric has an empty rubric_id");
    if (features.empty()) throw SchemaError("feature rubric '" + rubric_id + "' lists no features");
    std::set<std::string> seen;
    for (const auto& f : features) {
        if (f.name.empty())
            throw SchemaError("feature rubric '" + rubric_id + "' has a feature with no name");
        if (!seen.insert(f.name).second)
            throw SchemaError("feature rubric '" + rubric_id + "' repeats feature '" + f.name +
                              "'");
        for (size_t a = 0; a < f.anchors.size(); ++a)
            if (f.anchors[a].empty())
                throw SchemaError("feature '" + f.name + "' is missing the anchor for rating " +
                                  std::to_string(a + 1));
    }
}

std::vector<std::string> FeatureRubric::feature_names() const {
    std::vector<std::string> names;
    names.reserve(features.size());
    for (const auto& f : features) names.push_back(f.name);
    return names;
}

const FeatureDef& FeatureRubric::feature(const std::string& name) const {
    for (const auto& f : features)
        if (f.name == name) return f;
    throw SchemaError("feature rubric '" + rubric_id + "' has no feature '" + name + "'");
}

FeatureRubric FeatureRubric::from_json_text(const std::string& text, const std::string& origin) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError(origin + ": feature rubric is not valid JSON");
    FeatureRubric rubric;
    try {
        rubric.rubric_id = j.at("rubric_id").get<std::string>();
        for (const auto& jf : j.at("features")) {
            FeatureDef def;
            def.name = jf.at("name").get<std::string>();
            const auto& anchors = jf.at("anchors");
            if (!anchors.is_array() || anchors.size() != def.anchors.size())
                throw SchemaError(origin + ": feature '" + def.name +
                                  "' must carry exactly 5 anchors");
            for (size_t a = 0; a < def.anchors.size(); ++a)
                def.anchors[a] = anchors[a].get<std::string>();
            rubric.features.push_back(std::move(def));
        }
    } catch (const json::exception& e) {
        throw SchemaError(origin + ": feature rubric malformed: " + e.what());
    }
    rubric.validate();
    return rubric;
}

FeatureRubric FeatureRubric::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open feature rubric file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json_text(buf.str(), path);
}

// ---- unit refs -------------------------------------------------------------

std::string narrative_unit_ref(const std::string& pid, int section_index_1based,
                               const std::string& prompt_id) {
    char tag[8];
    std::snprintf(tag, sizeof tag, "s%02d", section_index_1based);
    return pid + "#" + tag + "#" + prompt_id;
}

std::string conversation_unit_ref(const std::string& conversation_id, const std::string& pid) {
    return pid + "#" + conversation_id;
}

std::string unit_ref_participant(const std::string& unit_ref) {
    auto pos = unit_ref.find('#');
    if (pos == std::string::npos || pos == 0)
        throw SchemaError("unit ref '" + unit_ref + "' does not start with a participant id");
    return unit_ref.substr(0, pos);
}

// ---- coding ----------------------------------------------------------------

ChatRequest build_coding_request(const std::string& unit_text, const FeatureRubric& rubric,
                                 const std::string& annotator_id, bool strict,
                                 const StageConfig& cfg, uint64_t seed) {
    ChatRequest req;
    req.model_id = annotator_id;
    req.temperature = cfg.scoring_temperature;
    req.max_output = cfg.max_output;
    req.seed = seed;

    std::ostringstream sys;
    sys << "TASK: code-features\n";
    sys << "RUBRIC: " << rubric.rubric_id << "\n";
    if (strict) sys << "STRICT-FORMAT\n";
    sys << "Rate the text excerpt on each listed feature using the anchors below, "
           "from 1 to 5. Reply with one line per feature in exactly the form "
           "'feature: rating' and no other text.";
    if (strict)
        sys << " Your previous reply could not be parsed; follow the line format "
               "exactly, covering every listed feature.";
    sys << "\n";
    for (const auto& f : rubric.features) {
        sys << f.name << ":\n";
        for (size_t a = 0; a < f.anchors.size(); ++a)
            sys << "  " << (a + 1) << " = " << f.anchors[a] << "\n";
    }

    std::ostringstream u;
    u << "FEATURES: ";
    for (size_t i = 0; i < rubric.features.size(); ++i) {
        if (i) u << ", ";
        u << rubric.features[i].name;
    }
    u << "\nUNIT-BEGIN\n" << unit_text << "\nUNIT-END\n";

    req.messages.push_back({"system", sys.str()});
    req.messages.push_back({"user", u.str()});
    return req;
}

namespace {

struct FeatureParse {
    std::map<std::string, int> ratings;
    std::vector<std::string> missing;
    std::vector<std::string> out_of_range;
    std::vector<std::string> warnings;
    bool ok() const { return missing.empty() && out_of_range.empty(); }
};

std::string trim_copy(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

FeatureParse parse_feature_lines(const std::string& reply,
                                 const std::vector<std::string>& expected) {
    FeatureParse out;
    std::set<std::string> want(expected.begin(), expected.end());
    std::istringstream in(reply);
    std::string line;
    while (std::getline(in, line)) {
        line = trim_copy(line);
        if (line.empty()) continue;
        auto colon = line.find(':');
        if (colon == std::string::npos || colon == 0) continue;
        std::string name = trim_copy(line.substr(0, colon));
        std::string value_text = trim_copy(line.substr(colon + 1));
        if (!want.count(name)) {
            out.warnings.push_back("unexpected feature line '" + name + "' ignored");
            continue;
        }
        int value = 0;
        try {
            size_t used = 0;
            value = std::stoi(value_text, &used);
            if (used != value_text.size()) throw std::invalid_argument("trailing text");
        } catch (const std::exception&) {
            out.warnings.push_back("feature '" + name + "' has a non-numeric rating '" +
                                   value_text + "'");
            continue;
        }
        if (out.ratings.count(name)) {
            out.warnings.push_back("feature '" + name + "' rated twice; keeping the first value");
            continue;
        }
        if (value < 1 || value > 5) {
            out.out_of_range.push_back(name);
            continue;
        }
        out.ratings[name] = value;
    }
    for (const auto& name : expected)
        if (!out.ratings.count(name) &&
            std::find(out.out_of_range.begin(), out.out_of_range.end(), name) ==
                out.out_of_range.end())
            out.missing.push_back(name);
    return out;
}

}  // namespace

CodingReport code_units(Gateway& gw, const std::vector<std::pair<std::string, std::string>>& units,
                        const FeatureRubric& rubric, const std::vector<std::string>& annotators,
                        const StageConfig& cfg) {
    rubric.validate();
    if (annotators.size() < 2)
        throw ConfigError("feature coding needs at least two annotators, got " +
                          std::to_string(annotators.size()));
    {
        std::set<std::string> uniq(annotators.begin(), annotators.end());
        if (uniq.size() != annotators.size())
            throw ConfigError("feature coding annotator list repeats a model id");
    }
    const std::vector<std::string> names = rubric.feature_names();

    CodingReport report;
    std::exception_ptr first_error;
    const long total = static_cast<long>(units.size()) * static_cast<long>(annotators.size());

#pragma omp parallel for schedule(dynamic)
    for (long idx = 0; idx < total; ++idx) {
        const auto& unit = units[static_cast<size_t>(idx) / annotators.size()];
        const std::string& annotator = annotators[static_cast<size_t>(idx) % annotators.size()];
        try {
            uint64_t seed = SeedChain(cfg.master_seed)
                                .mix("code")
                                .mix(annotator)
                                .mix(unit.first)
                                .value();
            ChatRequest req = build_coding_request(unit.second, rubric, annotator, false, cfg,
                                                   seed);
            ChatResponse resp = gw.complete(req);
            FeatureParse parsed;
            bool refused = resp.refusal;
            if (!refused) parsed = parse_feature_lines(resp.text, names);
            if (!refused && !parsed.ok()) {
                ChatRequest retry = build_coding_request(unit.second, rubric, annotator, true, cfg,
                                                         seed ^ 0x5bd1e995u);
                ChatResponse retry_resp = gw.complete(retry);
                refused = retry_resp.refusal;
                if (!refused) parsed = parse_feature_lines(retry_resp.text, names);
            }
#pragma omp critical(psypipe_coding)
            {
                for (const auto& w : parsed.warnings)
                    report.warnings.push_back(unit.first + " [" + annotator + "]: " + w);
                if (refused) {
                    report.uncoded.emplace_back(unit.first, annotator);
                    report.warnings.push_back(unit.first + " [" + annotator +
                                              "]: request refused; unit left uncoded");
                } else if (!parsed.ok()) {
                    report.uncoded.emplace_back(unit.first, annotator);
                    std::string detail;
                    for (const auto& m : parsed.missing) detail += " " + m;
                    for (const auto& m : parsed.out_of_range) detail += " " + m + "(range)";
                    report.warnings.push_back(unit.first + " [" + annotator +
                                              "]: unusable after re-prompt; features:" + detail);
                } else {
                    report.codings.push_back({unit.first, annotator, std::move(parsed.ratings)});
                }
            }
        } catch (...) {
#pragma omp critical(psypipe_coding)
            if (!first_error) first_error = std::current_exception();
        }
    }
    if (first_error) std::rethrow_exception(first_error);

    std::sort(report.codings.begin(), report.codings.end(),
              [](const FeatureCoding& a, const FeatureCoding& b) {
                  return std::tie(a.unit_ref, a.annotator_id) <
                         std::tie(b.unit_ref, b.annotator_id);
              });
    std::sort(report.uncoded.begin(), report.uncoded.end());
    std::sort(report.warnings.begin(), report.warnings.end());
    return report;
}

// ---- reliability -----------------------------------------------------------

namespace {

// feature -> unit_ref -> annotator -> rating
using CodingIndex =
    std::map<std::string, std::map<std::string, std::map<std::string, int>>>;

CodingIndex index_codings(const std::vector<FeatureCoding>& codings,
                          std::set<std::string>& annotators_out) {
    CodingIndex index;
    for (const auto& c : codings) {
        annotators_out.insert(c.annotator_id);
        for (const auto& [feature, rating] : c.ratings)
            index[feature][c.unit_ref][c.annotator_id] = rating;
    }
    return index;
}

stats::ReliabilityResult icc_for_feature(
    const std::map<std::string, std::map<std::string, int>>& by_unit,
    const std::vector<std::string>& raters) {
    stats::RatingsMatrix m;
    m.n_raters = static_cast<int>(raters.size());
    for (const auto& [unit, ratings] : by_unit) {
        (void)unit;
        bool complete = true;
        for (const auto& r : raters)
            if (!ratings.count(r)) {
                complete = false;
                break;
            }
        if (!complete) continue;
        for (const auto& r : raters) m.data.push_back(ratings.at(r));
        ++m.n_subjects;
    }
    if (m.n_subjects < 2) {
        stats::ReliabilityResult degen;
        degen.n_subjects = m.n_subjects;
        degen.n_raters = m.n_raters;
        degen.degenerate = true;
        return degen;
    }
    try {
        return stats::icc_2_1(m);
    } catch (const DegenerateInputError&) {
        stats::ReliabilityResult degen;
        degen.n_subjects = m.n_subjects;
        degen.n_raters = m.n_raters;
        degen.degenerate = true;
        return degen;
    }
}

}  // namespace

ReliabilityReport annotator_reliability(const std::vector<FeatureCoding>& codings) {
    std::set<std::string> annotator_set;
    CodingIndex index = index_codings(codings, annotator_set);
    if (annotator_set.size() < 2)
        throw ConfigError("annotator reliability needs codings from at least two annotators");
    std::vector<std::string> annotators(annotator_set.begin(), annotator_set.end());

    ReliabilityReport report;
    report.annotators = annotators;

    double icc_sum = 0.0;
    int icc_count = 0;
    for (const auto& [feature, by_unit] : index) {
        FeatureReliability row;
        row.feature = feature;
        row.icc = icc_for_feature(by_unit, annotators);
        row.units = row.icc.n_subjects;
        if (row.icc.degenerate) {
            ++report.degenerate_features;
        } else {
            icc_sum += row.icc.icc;
            ++icc_count;
        }
        report.per_feature.push_back(std::move(row));
    }
    report.mean_icc =
        icc_count ? icc_sum / icc_count : std::numeric_limits<double>::quiet_NaN();

    for (size_t i = 0; i < annotators.size(); ++i)
        for (size_t j = i + 1; j < annotators.size(); ++j) {
            std::vector<std::string> pair = {annotators[i], annotators[j]};
            double sum = 0.0;
            int count = 0;
            for (const auto& [feature, by_unit] : index) {
                (void)feature;
                stats::ReliabilityResult r = icc_for_feature(by_unit, pair);
                if (!r.degenerate) {
                    sum += r.icc;
                    ++count;
                }
            }
            report.pairwise.emplace_back(
                annotators[i], annotators[j],
                count ? sum / count : std::numeric_limits<double>::quiet_NaN());
        }
    return report;
}

// ---- summaries -------------------------------------------------------------

std::vector<ParticipantFeatureSummary> summarize_codings(
    const std::vector<FeatureCoding>& codings, FeatureContext context,
    const FeatureRubric& rubric) {
    const std::vector<std::string> names = rubric.feature_names();

    // pid -> unit_ref -> feature -> (sum, count) across annotators
    std::map<std::string, std::map<std::string, std::map<std::string, std::pair<double, int>>>>
        grouped;
    for (const auto& c : codings) {
        std::string pid = unit_ref_participant(c.unit_ref);
        auto& unit = grouped[pid][c.unit_ref];
        for (const auto& [feature, rating] : c.ratings) {
            auto& cell = unit[feature];
            cell.first += rating;
            cell.second += 1;
        }
    }

    std::vector<ParticipantFeatureSummary> out;
    for (const auto& [pid, units] : grouped) {
        ParticipantFeatureSummary s;
        s.participant_id = pid;
        s.context = context;
        s.units = static_cast<int>(units.size());
        if (context == FeatureContext::narrative && s.units != kLsiSectionCount)
            throw CoverageError("participant " + pid + " has codings for " +
                                std::to_string(s.units) + " narrative sections, expected " +
                                std::to_string(kLsiSectionCount));
        for (const auto& name : names) {
            std::vector<double> per_unit;
            for (const auto& [ref, features] : units) {
                (void)ref;
                auto it = features.find(name);
                if (it != features.end() && it->second.second > 0)
                    per_unit.push_back(it->second.first / it->second.second);
            }
            if (per_unit.empty()) continue;
            auto [mean, sd] = stats::mean_sd(per_unit);
            s.feature_means[name] = mean;
            s.feature_within_sd[name] = per_unit.size() > 1 ? sd : 0.0;
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---- convergent validity ---------------------------------------------------

ConvergentTable convergent_table(const std::vector<ParticipantFeatureSummary>& summaries,
                                 const std::map<std::string, DomainProfile>& truth,
                                 double alpha) {
    if (summaries.size() < 10)
        throw CoverageError("convergent table needs at least 10 participants, got " +
                            std::to_string(summaries.size()));
    for (const auto& s : summaries)
        if (!truth.count(s.participant_id))
            throw AlignmentError("participant " + s.participant_id +
                                 " has feature summaries but no trait profile");

    std::vector<std::string> features;
    for (const auto& [name, v] : summaries.front().feature_means) {
        (void)v;
        features.push_back(name);
    }
    for (const auto& s : summaries)
        for (const auto& name : features)
            if (!s.feature_means.count(name))
                throw SchemaError("participant " + s.participant_id +
                                  " is missing feature '" + name + "' in its summary");

    ConvergentTable table;
    table.features = features;
    table.n = static_cast<int>(summaries.size());
    table.alpha = alpha;
    table.m_tests = static_cast<int>(features.size()) * kNumDomains;
    table.alpha_corrected = stats::bonferroni(alpha, table.m_tests);

    for (const auto& name : features) {
        std::vector<double> fv;
        fv.reserve(summaries.size());
        for (const auto& s : summaries) fv.push_back(s.feature_means.at(name));

        std::array<ConvergentCell, kNumDomains> row;
        int best = -1;
        double best_abs = -1.0;
        for (int d = 0; d < kNumDomains; ++d) {
            std::vector<double> tv;
            tv.reserve(summaries.size());
            for (const auto& s : summaries) tv.push_back(truth.at(s.participant_id).at(d));
            try {
                stats::CorrelationResult r = stats::pearson(fv, tv);
                row[static_cast<size_t>(d)].r = r;
                row[static_cast<size_t>(d)].significant = r.p_two_tailed < table.alpha_corrected;
                if (std::fabs(r.r) > best_abs) {
                    best_abs = std::fabs(r.r);
                    best = d;
                }
            } catch (const DegenerateInputError&) {
                // leave the cell empty; the report renders it as degenerate
            }
        }
        table.cells.push_back(row);
        table.best_domain.push_back(best);
    }
    return table;
}

// ---- cross-context stability -----------------------------------------------

CrossContextTable cross_context_table(
    const std::vector<ParticipantFeatureSummary>& narrative_summaries,
    const std::vector<ParticipantFeatureSummary>& conversation_summaries,
    int conversation_floor, double alpha) {
    std::map<std::string, const ParticipantFeatureSummary*> narr;
    for (const auto& s : narrative_summaries) narr[s.participant_id] = &s;

    CrossContextTable table;
    std::map<std::string, const ParticipantFeatureSummary*> conv;
    for (const auto& s : conversation_summaries) {
        if (s.units < conversation_floor) {
            ++table.below_floor_excluded;
            continue;
        }
        conv[s.participant_id] = &s;
    }

    std::vector<std::string> overlap;
    for (const auto& [pid, s] : narr) {
        (void)s;
        if (conv.count(pid)) overlap.push_back(pid);
    }
    if (overlap.size() < 10) {
        std::ostringstream msg;
        msg << "cross-context table needs at least 10 participants in both contexts: "
            << "narrative has " << narr.size() << ", conversation has " << conv.size()
            << " after the " << conversation_floor << "-conversation floor, overlap is "
            << overlap.size();
        throw CoverageError(msg.str());
    }

    std::vector<std::string> features;
    for (const auto& [name, v] : narr.begin()->second->feature_means) {
        (void)v;
        bool everywhere = true;
        for (const auto& pid : overlap)
            if (!narr.at(pid)->feature_means.count(name) ||
                !conv.at(pid)->feature_means.count(name)) {
                everywhere = false;
                break;
            }
        if (everywhere) features.push_back(name);
    }
    if (features.empty())
        throw SchemaError("cross-context table found no feature shared by both contexts");

    table.n = static_cast<int>(overlap.size());
    table.m_tests = static_cast<int>(features.size());
    table.alpha_corrected = stats::bonferroni(alpha, table.m_tests);

    double abs_sum = 0.0;
    int abs_count = 0;
    for (const auto& name : features) {
        std::vector<double> a, b;
        a.reserve(overlap.size());
        b.reserve(overlap.size());
        for (const auto& pid : overlap) {
            a.push_back(narr.at(pid)->feature_means.at(name));
            b.push_back(conv.at(pid)->feature_means.at(name));
        }
        CrossContextRow row;
        row.feature = name;
        try {
            stats::CorrelationResult r = stats::pearson(a, b);
            row.r = r;
            row.significant = r.p_two_tailed < table.alpha_corrected;
            abs_sum += std::fabs(r.r);
            ++abs_count;
        } catch (const DegenerateInputError&) {
        }
        table.rows.push_back(std::move(row));
    }
    table.mean_abs_r =
        abs_count ? abs_sum / abs_count : std::numeric_limits<double>::quiet_NaN();
    return table;
}

// ---- reactivity ------------------------------------------------------------

std::map<std::string, std::vector<double>> section_feature_series(
    const std::vector<FeatureCoding>& codings, const std::string& feature) {
    // unit_ref sorts by participant, then zero-padded section tag
    std::map<std::string, std::pair<double, int>> by_unit;
    for (const auto& c : codings) {
        auto it = c.ratings.find(feature);
        if (it == c.ratings.end()) continue;
        auto& cell = by_unit[c.unit_ref];
        cell.first += it->second;
        cell.second += 1;
    }
    std::map<std::string, std::vector<double>> out;
    for (const auto& [ref, cell] : by_unit)
        out[unit_ref_participant(ref)].push_back(cell.first / cell.second);
    return out;
}

ReactivityResult reactivity_analysis(
    const std::map<std::string, std::vector<double>>& section_valence,
    const std::map<std::string, DomainProfile>& truth) {
    std::vector<double> sds, means, emo;
    for (const auto& [pid, series] : section_valence) {
        if (static_cast<int>(series.size()) != kLsiSectionCount)
            throw CoverageError("participant " + pid + " has " +
                                std::to_string(series.size()) +
                                " coded sections, expected " +
                                std::to_string(kLsiSectionCount));
        auto it = truth.find(pid);
        if (it == truth.end())
            throw AlignmentError("participant " + pid +
                                 " has section codings but no trait profile");
        auto [mean, sd] = stats::mean_sd(series);
        means.push_back(mean);
        sds.push_back(sd);
        emo.push_back(it->second[Domain::E]);
    }
    ReactivityResult res;
    res.n = static_cast<int>(sds.size());
    res.r_sd_emotionality = stats::pearson(sds, emo);
    res.r_mean_emotionality = stats::pearson(means, emo);
    return res;
}

// ---- structural features ---------------------------------------------------

StructuralFeatures structural_features(const LsiNarrative& narrative) {
    StructuralFeatures out;
    std::string full;
    for (const auto& sec : narrative.sections) {
        if (text::squeeze_ws(sec.text).empty()) {
            ++out.empty_sections_skipped;
            continue;
        }
        if (!full.empty()) full += "\n\n";
        full += sec.text;
    }
    std::vector<std::string> tokens = text::tokenize(full);
    out.word_count = static_cast<long>(tokens.size());
    if (!tokens.empty()) {
        std::set<std::string> distinct(tokens.begin(), tokens.end());
        out.type_token_ratio = static_cast<double>(distinct.size()) / tokens.size();
    }
    std::vector<double> lengths;
    for (const auto& sentence : text::split_sentences(full)) {
        size_t n = text::tokenize(sentence).size();
        if (n > 0) lengths.push_back(static_cast<double>(n));
    }
    if (lengths.size() > 1) {
        out.sentence_length_cv = stats::dispersion(lengths).cv;
    }
    return out;
}

}  // namespace psypipe
