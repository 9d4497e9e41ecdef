#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "psypipe/content_analysis.hpp"
#include "psypipe/data_model.hpp"
#include "psypipe/errors.hpp"
#include "psypipe/gateway.hpp"
#include "psypipe/psychometrics.hpp"
#include "psypipe/stats.hpp"
#include "psypipe/synthetic.hpp"

using namespace psypipe;

namespace {

const FeatureRubric& rubric() {
    static FeatureRubric r =
        FeatureRubric::load(std::string(PSYPIPE_DATA_DIR) + "/feature_rubric.json");
    return r;
}

DomainProfile grid_profile(std::initializer_list<double> vs) {
    DomainProfile p;
    int i = 0;
    for (double v : vs) p.values[static_cast<size_t>(i++)] = v;
    return p;
}

SubscaleProfile flat_subscales(double v) {
    SubscaleProfile s;
    s.values.fill(v);
    return s;
}

// All 24 sections of one synthetic narrative as coding units.
std::vector<std::pair<std::string, std::string>> narrative_units(const LsiNarrative& n) {
    std::vector<std::pair<std::string, std::string>> units;
    for (size_t i = 0; i < n.sections.size(); ++i)
        units.emplace_back(narrative_unit_ref(n.participant_id, static_cast<int>(i) + 1,
                                              n.sections[i].prompt_id),
                           n.sections[i].text);
    return units;
}

// Codings for one feature with one rating per (unit, annotator).
std::vector<FeatureCoding> ratings_grid(const std::string& feature,
                                        const std::vector<std::string>& annotators,
                                        const std::vector<std::vector<int>>& per_annotator) {
    std::vector<FeatureCoding> out;
    for (size_t a = 0; a < annotators.size(); ++a)
        for (size_t u = 0; u < per_annotator[a].size(); ++u) {
            FeatureCoding c;
            c.unit_ref = "p0#u" + std::to_string(100 + u);
            c.annotator_id = annotators[a];
            c.ratings[feature] = per_annotator[a][u];
            out.push_back(std::move(c));
        }
    return out;
}

}  // namespace

// ---- rubric ----------------------------------------------------------------

TEST_CASE("the shipped feature rubric loads and validates") {
    const FeatureRubric& r = rubric();
    CHECK(r.rubric_id == "content_features_v1");
    CHECK(r.features.size() == 12u);
    CHECK_NOTHROW(r.validate());
    auto names = r.feature_names();
    std::set<std::string> uniq(names.begin(), names.end());
    CHECK(uniq.size() == names.size());
    for (const char* expected : {"agency", "communion", "warmth", "emotional_valence",
                                 "meaning_making", "creativity_art"})
        CHECK(uniq.count(expected) == 1u);
    for (const auto& anchor : r.feature("agency").anchors) CHECK_FALSE(anchor.empty());
    CHECK_THROWS_AS(r.feature("charisma"), SchemaError);
}

TEST_CASE("feature rubrics reject malformed definitions") {
    CHECK_THROWS_AS(FeatureRubric::from_json_text("not json", "x"), ParseError);
    CHECK_THROWS_AS(FeatureRubric::from_json_text("{\"features\": []}", "x"), SchemaError);
    CHECK_THROWS_AS(
        FeatureRubric::from_json_text("{\"rubric_id\": \"r\", \"features\": []}", "x"),
        SchemaError);
    std::string four_anchors =
        "{\"rubric_id\": \"r\", \"features\": [{\"name\": \"f\", "
        "\"anchors\": [\"a\", \"b\", \"c\", \"d\"]}]}";
    CHECK_THROWS_AS(FeatureRubric::from_json_text(four_anchors, "x"), SchemaError);
    std::string dup =
        "{\"rubric_id\": \"r\", \"features\": ["
        "{\"name\": \"f\", \"anchors\": [\"a\", \"b\", \"c\", \"d\", \"e\"]},"
        "{\"name\": \"f\", \"anchors\": [\"a\", \"b\", \"c\", \"d\", \"e\"]}]}";
    CHECK_THROWS_AS(FeatureRubric::from_json_text(dup, "x"), SchemaError);
    std::string hollow =
        "{\"rubric_id\": \"r\", \"features\": [{\"name\": \"f\", "
        "\"anchors\": [\"a\", \"\", \"c\", \"d\", \"e\"]}]}";
    CHECK_THROWS_AS(FeatureRubric::from_json_text(hollow, "x"), SchemaError);
    CHECK_THROWS_AS(FeatureRubric::load("/nonexistent/rubric.json"), IoError);
}

TEST_CASE("unit refs order by participant and section") {
    CHECK(narrative_unit_ref("p01", 3, "B1_high_point") == "p01#s03#B1_high_point");
    CHECK(narrative_unit_ref("p01", 2, "x") < narrative_unit_ref("p01", 10, "a"));
    CHECK(conversation_unit_ref("conv-7", "p02") == "p02#conv-7");
    CHECK(unit_ref_participant("p01#s03#B1") == "p01");
    CHECK_THROWS_AS(unit_ref_participant("#s01#x"), SchemaError);
    CHECK_THROWS_AS(unit_ref_participant("plainstring"), SchemaError);
}

// ---- coding requests and execution -----------------------------------------

TEST_CASE("coding requests carry the rubric, anchors, and unit text") {
    StageConfig cfg;
    ChatRequest req = build_coding_request("THE UNIT TEXT", rubric(), "synthetic:annotator-a",
                                           false, cfg, 11u);
    CHECK(req.model_id == "synthetic:annotator-a");
    CHECK(req.temperature == doctest::Approx(0.3));
    CHECK(req.seed == 11u);
    const std::string& sys = req.messages[0].text;
    CHECK(sys.starts_with("TASK: code-features\nRUBRIC: content_features_v1\n"));
    CHECK(sys.find("STRICT-FORMAT") == std::string::npos);
    CHECK(sys.find("agency:\n  1 = ") != std::string::npos);

    const std::string& user = req.messages[1].text;
    CHECK(user.starts_with("FEATURES: agency, communion, "));
    CHECK(user.find("\nUNIT-BEGIN\nTHE UNIT TEXT\nUNIT-END\n") != std::string::npos);

    ChatRequest strict = build_coding_request("T", rubric(), "synthetic", true, cfg, 1u);
    CHECK(strict.messages[0].text.find("STRICT-FORMAT\n") != std::string::npos);
    CHECK(strict.messages[0].text.find("could not be parsed") != std::string::npos);
}

TEST_CASE("coded units are deterministic per annotator and differ across them") {
    auto synth_cfg = SyntheticPersonaConfig::defaults(80);
    Gateway gw;
    gw.register_provider(std::make_shared<SyntheticModel>(synth_cfg));
    LsiNarrative n = synth_generate_narrative(grid_profile({2.2, 4.0, 3.4, 1.8, 4.4, 2.8}),
                                              flat_subscales(3.0), synth_cfg, "p-code");
    auto units = narrative_units(n);
    StageConfig cfg;
    cfg.master_seed = 80;
    std::vector<std::string> annotators = {"synthetic:coder-a", "synthetic:coder-b"};

    CodingReport report = code_units(gw, units, rubric(), annotators, cfg);
    CHECK(report.uncoded.empty());
    CHECK(report.warnings.empty());
    REQUIRE(report.codings.size() == 48u);
    CHECK(std::is_sorted(report.codings.begin(), report.codings.end(),
                         [](const FeatureCoding& a, const FeatureCoding& b) {
                             return std::tie(a.unit_ref, a.annotator_id) <
                                    std::tie(b.unit_ref, b.annotator_id);
                         }));
    for (const auto& c : report.codings) {
        CHECK(c.ratings.size() == 12u);
        for (const auto& [name, rating] : c.ratings) {
            CHECK(rating >= 1);
            CHECK(rating <= 5);
            CHECK_NOTHROW(rubric().feature(name));
        }
    }

    CodingReport again = code_units(gw, units, rubric(), annotators, cfg);
    REQUIRE(again.codings.size() == report.codings.size());
    bool identical = true;
    for (size_t i = 0; i < report.codings.size(); ++i)
        if (again.codings[i].ratings != report.codings[i].ratings) identical = false;
    CHECK(identical);

    // per-annotator jitter makes the two coders disagree somewhere
    bool any_disagreement = false;
    for (size_t i = 0; i + 1 < report.codings.size(); i += 2)
        if (report.codings[i].ratings != report.codings[i + 1].ratings)
            any_disagreement = true;
    CHECK(any_disagreement);
}

TEST_CASE("coder ratings follow the encoded trait levels") {
    auto synth_cfg = SyntheticPersonaConfig::defaults(81);
    synth_cfg.coder_jitter_sd = 0.0;
    Gateway gw;
    gw.register_provider(std::make_shared<SyntheticModel>(synth_cfg));
    StageConfig cfg;

    LsiNarrative warm = synth_generate_narrative(grid_profile({3, 3, 3, 5, 3, 3}),
                                                 flat_subscales(3.0), synth_cfg, "p-warm");
    LsiNarrative cold = synth_generate_narrative(grid_profile({3, 3, 3, 1, 3, 3}),
                                                 flat_subscales(3.0), synth_cfg, "p-cold");
    std::vector<std::pair<std::string, std::string>> units = {
        {narrative_unit_ref("p-warm", 1, "seg01"), warm.sections[0].text},
        {narrative_unit_ref("p-cold", 1, "seg01"), cold.sections[0].text}};
    std::vector<std::string> annotators = {"synthetic:x", "synthetic:y"};

    CodingReport report = code_units(gw, units, rubric(), annotators, cfg);
    REQUIRE(report.codings.size() == 4u);
    for (const auto& c : report.codings) {
        bool is_warm = c.unit_ref.starts_with("p-warm");
        CHECK(c.ratings.at("warmth") == (is_warm ? 5 : 1));
        CHECK(c.ratings.at("communion") == (is_warm ? 5 : 1));
        // dominance pushes against agreeableness around the neutral midpoint
        CHECK(c.ratings.at("dominance") == (is_warm ? 1 : 5));
        CHECK(c.ratings.at("agency") == 3);
    }
}

TEST_CASE("uncodable units earn one strict retry before being reported") {
    auto synth_cfg = SyntheticPersonaConfig::defaults(82);
    Gateway gw;
    gw.register_provider(std::make_shared<SyntheticModel>(synth_cfg));
    LsiNarrative n = synth_generate_narrative(grid_profile({3, 3, 3, 3, 3, 3}),
                                              flat_subscales(3.0), synth_cfg, "p-retry");
    auto units = narrative_units(n);
    units.resize(3);
    StageConfig cfg;

    // the flaky annotator only answers once the retry says STRICT-FORMAT
    CodingReport report =
        code_units(gw, units, rubric(), {"synthetic:flaky-format", "synthetic"}, cfg);
    CHECK(report.codings.size() == 6u);
    CHECK(report.uncoded.empty());

    // a refused unit stays uncoded for every annotator
    units.push_back({"p-retry#s99#planted", "text with forbidden-persona-veil inside"});
    CodingReport refused =
        code_units(gw, units, rubric(), {"synthetic:flaky-format", "synthetic"}, cfg);
    CHECK(refused.codings.size() == 6u);
    REQUIRE(refused.uncoded.size() == 2u);
    CHECK(refused.uncoded[0].first == "p-retry#s99#planted");
    bool mentioned = false;
    for (const auto& w : refused.warnings)
        if (w.find("refused") != std::string::npos) mentioned = true;
    CHECK(mentioned);
}

TEST_CASE("feature coding needs a clean annotator panel") {
    Gateway gw;
    gw.register_provider(std::make_shared<SyntheticModel>(SyntheticPersonaConfig::defaults(0)));
    std::vector<std::pair<std::string, std::string>> units = {{"p#u1", "text"}};
    CHECK_THROWS_AS(code_units(gw, units, rubric(), {"synthetic"}, StageConfig{}), ConfigError);
    CHECK_THROWS_AS(code_units(gw, units, rubric(), {"synthetic", "synthetic"}, StageConfig{}),
                    ConfigError);
}

// ---- reliability -----------------------------------------------------------

TEST_CASE("identical annotators give perfect reliability") {
    std::vector<int> spread;
    for (int i = 0; i < 20; ++i) spread.push_back(1 + (i % 5));
    auto codings = ratings_grid("warmth", {"a", "b"}, {spread, spread});
    ReliabilityReport r = annotator_reliability(codings);
    REQUIRE(r.per_feature.size() == 1u);
    CHECK_FALSE(r.per_feature[0].icc.degenerate);
    CHECK(r.per_feature[0].icc.icc == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.per_feature[0].units == 20);
    CHECK(r.mean_icc == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.degenerate_features == 0);
    REQUIRE(r.pairwise.size() == 1u);
    CHECK(std::get<2>(r.pairwise[0]) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("independent random annotators have near-zero reliability") {
    std::mt19937 rng(2026);
    std::uniform_int_distribution<int> pick(1, 5);
    std::vector<int> a, b;
    for (int i = 0; i < 200; ++i) {
        a.push_back(pick(rng));
        b.push_back(pick(rng));
    }
    ReliabilityReport r = annotator_reliability(ratings_grid("humor", {"a", "b"}, {a, b}));
    REQUIRE(r.per_feature.size() == 1u);
    CHECK_FALSE(r.per_feature[0].icc.degenerate);
    CHECK(std::abs(r.per_feature[0].icc.icc) <= 0.15);
}

TEST_CASE("constant codings are degenerate, offset codings are not") {
    std::vector<int> flat(20, 3);
    ReliabilityReport degen = annotator_reliability(ratings_grid("humor", {"a", "b"},
                                                                 {flat, flat}));
    CHECK(degen.degenerate_features == 1);
    CHECK(degen.per_feature[0].icc.degenerate);
    CHECK(std::isnan(degen.mean_icc));

    std::vector<int> base, shifted;
    for (int i = 0; i < 20; ++i) {
        base.push_back(1 + (i % 4));
        shifted.push_back(2 + (i % 4));
    }
    ReliabilityReport offset = annotator_reliability(ratings_grid("humor", {"a", "b"},
                                                                  {base, shifted}));
    REQUIRE(offset.per_feature.size() == 1u);
    CHECK_FALSE(offset.per_feature[0].icc.degenerate);
    CHECK(offset.per_feature[0].icc.icc > 0.5);
    CHECK(offset.per_feature[0].icc.icc < 1.0);

    std::vector<FeatureCoding> solo = ratings_grid("humor", {"a"}, {base});
    CHECK_THROWS_AS(annotator_reliability(solo), ConfigError);
}

// ---- summaries -------------------------------------------------------------

TEST_CASE("summaries average annotators within units, then units within people") {
    std::vector<FeatureCoding> codings;
    std::vector<double> humor_by_unit;
    for (int k = 1; k <= 24; ++k) {
        std::string ref = narrative_unit_ref("pX", k, "seg" + std::to_string(k));
        int humor = 1 + (k % 5);
        humor_by_unit.push_back(humor);
        for (const char* annotator : {"a", "b"}) {
            FeatureCoding c;
            c.unit_ref = ref;
            c.annotator_id = annotator;
            // warmth disagrees symmetrically, so every unit mean lands on 3
            c.ratings["warmth"] = annotator == std::string("a") ? 2 : 4;
            c.ratings["humor"] = humor;
            codings.push_back(std::move(c));
        }
    }
    auto summaries = summarize_codings(codings, FeatureContext::narrative, rubric());
    REQUIRE(summaries.size() == 1u);
    const auto& s = summaries[0];
    CHECK(s.participant_id == "pX");
    CHECK(s.units == 24);
    CHECK(s.feature_means.at("warmth") == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(s.feature_within_sd.at("warmth") == doctest::Approx(0.0).epsilon(1e-12));
    auto [want_mean, want_sd] = stats::mean_sd(humor_by_unit);
    CHECK(s.feature_means.at("humor") == doctest::Approx(want_mean).epsilon(1e-12));
    CHECK(s.feature_within_sd.at("humor") == doctest::Approx(want_sd).epsilon(1e-12));

    // narrative context insists on full section coverage
    codings.resize(codings.size() - 2);
    CHECK_THROWS_AS(summarize_codings(codings, FeatureContext::narrative, rubric()),
                    CoverageError);
    auto conv = summarize_codings(codings, FeatureContext::conversation, rubric());
    REQUIRE(conv.size() == 1u);
    CHECK(conv[0].units == 23);
}

TEST_CASE("summaries recompute from gateway codings end to end") {
    auto synth_cfg = SyntheticPersonaConfig::defaults(83);
    Gateway gw;
    gw.register_provider(std::make_shared<SyntheticModel>(synth_cfg));
    LsiNarrative n = synth_generate_narrative(grid_profile({2.6, 3.8, 4.2, 2.0, 3.4, 4.6}),
                                              flat_subscales(3.0), synth_cfg, "p-sum");
    StageConfig cfg;
    cfg.master_seed = 83;
    CodingReport report = code_units(gw, narrative_units(n), rubric(),
                                     {"synthetic:c1", "synthetic:c2"}, cfg);
    auto summaries = summarize_codings(report.codings, FeatureContext::narrative, rubric());
    REQUIRE(summaries.size() == 1u);

    // recompute one feature by hand from the raw codings
    std::map<std::string, std::pair<double, int>> by_unit;
    for (const auto& c : report.codings) {
        auto& cell = by_unit[c.unit_ref];
        cell.first += c.ratings.at("agency");
        cell.second += 1;
    }
    std::vector<double> per_unit;
    for (const auto& [ref, cell] : by_unit) per_unit.push_back(cell.first / cell.second);
    auto [want_mean, want_sd] = stats::mean_sd(per_unit);
    CHECK(summaries[0].feature_means.at("agency") == doctest::Approx(want_mean).epsilon(1e-12));
    CHECK(summaries[0].feature_within_sd.at("agency") ==
          doctest::Approx(want_sd).epsilon(1e-12));
}

// ---- convergent validity ---------------------------------------------------

TEST_CASE("the convergent table finds planted feature-trait structure") {
    std::mt19937 rng(77);
    std::uniform_real_distribution<double> noise(-1.0, 1.0);
    std::vector<ParticipantFeatureSummary> summaries;
    std::map<std::string, DomainProfile> truth;
    for (int i = 0; i < 20; ++i) {
        std::string pid = "cv" + std::to_string(10 + i);
        DomainProfile t;
        for (int d = 0; d < kNumDomains; ++d) t.at(d) = 3.0 + noise(rng);
        truth[pid] = t;
        ParticipantFeatureSummary s;
        s.participant_id = pid;
        s.units = 24;
        s.feature_means["warmth"] = t.at(3);            // copies agreeableness
        s.feature_means["emotional_valence"] = 6.0 - t.at(1);  // mirrors emotionality
        s.feature_means["humor"] = 3.0;                 // flat, degenerate row
        summaries.push_back(std::move(s));
    }

    ConvergentTable table = convergent_table(summaries, truth, 0.05);
    CHECK(table.n == 20);
    CHECK(table.m_tests == 18);
    CHECK(table.alpha_corrected == doctest::Approx(0.05 / 18.0).epsilon(1e-12));
    REQUIRE(table.features.size() == 3u);

    auto row_of = [&](const std::string& name) {
        for (size_t i = 0; i < table.features.size(); ++i)
            if (table.features[i] == name) return i;
        REQUIRE(false);
        return size_t{0};
    };
    size_t warmth = row_of("warmth");
    REQUIRE(table.cells[warmth][3].r.has_value());
    CHECK(table.cells[warmth][3].r->r == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(table.cells[warmth][3].significant);
    CHECK(table.best_domain[warmth] == 3);

    size_t valence = row_of("emotional_valence");
    REQUIRE(table.cells[valence][1].r.has_value());
    CHECK(table.cells[valence][1].r->r == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(table.best_domain[valence] == 1);

    size_t humor = row_of("humor");
    CHECK(table.best_domain[humor] == -1);
    for (int d = 0; d < kNumDomains; ++d) {
        CHECK_FALSE(table.cells[humor][static_cast<size_t>(d)].r.has_value());
        CHECK_FALSE(table.cells[humor][static_cast<size_t>(d)].significant);
    }
}

TEST_CASE("the convergent table guards coverage and alignment") {
    std::vector<ParticipantFeatureSummary> few(5);
    std::map<std::string, DomainProfile> truth;
    CHECK_THROWS_AS(convergent_table(few, truth, 0.05), CoverageError);

    std::vector<ParticipantFeatureSummary> summaries;
    for (int i = 0; i < 10; ++i) {
        ParticipantFeatureSummary s;
        s.participant_id = "p" + std::to_string(i);
        s.feature_means["warmth"] = 3.0 + 0.1 * i;
        summaries.push_back(std::move(s));
        truth["p" + std::to_string(i)] = grid_profile({3, 3, 3, 3, 3, 3});
    }
    auto missing_truth = truth;
    missing_truth.erase("p7");
    CHECK_THROWS_AS(convergent_table(summaries, missing_truth, 0.05), AlignmentError);
    summaries[4].feature_means.clear();
    CHECK_THROWS_AS(convergent_table(summaries, truth, 0.05), SchemaError);
}

// ---- cross-context stability -----------------------------------------------

TEST_CASE("cross-context stability is perfect when contexts agree") {
    std::vector<ParticipantFeatureSummary> narr, conv;
    for (int i = 0; i < 12; ++i) {
        std::string pid = "xc" + std::to_string(10 + i);
        ParticipantFeatureSummary a;
        a.participant_id = pid;
        a.context = FeatureContext::narrative;
        a.units = 24;
        a.feature_means["warmth"] = 1.0 + 0.3 * i;
        a.feature_means["humor"] = 5.0 - 0.2 * i;
        ParticipantFeatureSummary b = a;
        b.context = FeatureContext::conversation;
        b.units = (i == 0) ? 2 : 5;  // the first participant sits below the floor
        narr.push_back(std::move(a));
        conv.push_back(std::move(b));
    }

    CrossContextTable table = cross_context_table(narr, conv, 3, 0.05);
    CHECK(table.below_floor_excluded == 1);
    CHECK(table.n == 11);
    CHECK(table.m_tests == 2);
    CHECK(table.alpha_corrected == doctest::Approx(0.025).epsilon(1e-12));
    REQUIRE(table.rows.size() == 2u);
    for (const auto& row : table.rows) {
        REQUIRE(row.r.has_value());
        CHECK(row.r->r == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(row.significant);
    }
    CHECK(table.mean_abs_r == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("cross-context stability guards overlap and shared features") {
    std::vector<ParticipantFeatureSummary> narr, conv;
    for (int i = 0; i < 12; ++i) {
        ParticipantFeatureSummary a;
        a.participant_id = "p" + std::to_string(i);
        a.units = 24;
        a.feature_means["warmth"] = 2.0 + 0.1 * i;
        narr.push_back(a);
        if (i < 5) {
            a.units = 5;
            conv.push_back(a);
        }
    }
    CHECK_THROWS_AS(cross_context_table(narr, conv, 3, 0.05), CoverageError);

    conv.clear();
    for (int i = 0; i < 12; ++i) {
        ParticipantFeatureSummary b;
        b.participant_id = "p" + std::to_string(i);
        b.units = 5;
        b.feature_means["meaning_making"] = 3.0;  // nothing shared with narrative
        conv.push_back(b);
    }
    CHECK_THROWS_AS(cross_context_table(narr, conv, 3, 0.05), SchemaError);
}

// ---- reactivity ------------------------------------------------------------

TEST_CASE("section feature series rebuild ordered per-participant curves") {
    std::vector<FeatureCoding> codings;
    for (const char* pid : {"pA", "pB"})
        for (int k = 1; k <= 24; ++k)
            for (const char* annotator : {"a", "b"}) {
                FeatureCoding c;
                c.unit_ref = narrative_unit_ref(pid, k, "q");
                c.annotator_id = annotator;
                c.ratings["emotional_valence"] = (k % 2 == 1) ? 4 : 2;
                codings.push_back(std::move(c));
            }
    auto series = section_feature_series(codings, "emotional_valence");
    REQUIRE(series.size() == 2u);
    for (const auto& [pid, values] : series) {
        REQUIRE(values.size() == 24u);
        for (size_t i = 0; i < values.size(); ++i)
            CHECK(values[i] == doctest::Approx(i % 2 == 0 ? 4.0 : 2.0).epsilon(1e-12));
    }
    CHECK(series.count("pA") == 1u);
    CHECK(series.count("pB") == 1u);
}

TEST_CASE("reactivity tracks emotionality through valence swings") {
    auto synth_cfg = SyntheticPersonaConfig::defaults(84);
    std::map<std::string, std::vector<double>> valence;
    std::map<std::string, DomainProfile> truth;
    for (int i = 0; i < 10; ++i) {
        double e = 1.0 + (i % 5);
        std::string pid = "re" + std::to_string(10 + i);
        DomainProfile t = grid_profile({3, e, 3, 3, 3, 3});
        truth[pid] = t;
        LsiNarrative n =
            synth_generate_narrative(t, flat_subscales(3.0), synth_cfg, pid);
        valence[pid] = synth_decode_section_valence(n, synth_cfg);
        REQUIRE(valence[pid].size() == 24u);
    }
    ReactivityResult r = reactivity_analysis(valence, truth);
    CHECK(r.n == 10);
    CHECK(r.r_sd_emotionality.r > 0.5);
    CHECK(std::abs(r.r_sd_emotionality.r) > std::abs(r.r_mean_emotionality.r));
}

TEST_CASE("reactivity analysis guards coverage and alignment") {
    std::map<std::string, std::vector<double>> valence;
    std::map<std::string, DomainProfile> truth;
    valence["p1"] = std::vector<double>(23, 3.0);
    truth["p1"] = grid_profile({3, 3, 3, 3, 3, 3});
    CHECK_THROWS_AS(reactivity_analysis(valence, truth), CoverageError);
    valence["p1"] = std::vector<double>(24, 3.0);
    truth.clear();
    CHECK_THROWS_AS(reactivity_analysis(valence, truth), AlignmentError);
}

// ---- structural features ---------------------------------------------------

TEST_CASE("structural features measure text shape") {
    LsiNarrative n;
    n.participant_id = "p-shape";
    for (int k = 1; k <= 24; ++k) {
        NarrativeSection sec;
        sec.prompt_id = "q" + std::to_string(k);
        sec.text = "One two three. Four five.";
        n.sections.push_back(sec);
    }
    StructuralFeatures f = structural_features(n);
    CHECK(f.word_count == 120);
    CHECK(f.type_token_ratio == doctest::Approx(5.0 / 120.0).epsilon(1e-12));
    // 48 sentences of length 3 and 2; sample SD over mean
    double mean = 2.5;
    double sd = std::sqrt(48 * 0.25 / 47.0);
    CHECK(f.sentence_length_cv == doctest::Approx(sd / mean).epsilon(1e-12));
    CHECK(f.empty_sections_skipped == 0);

    n.sections[5].text = "   ";
    StructuralFeatures g = structural_features(n);
    CHECK(g.empty_sections_skipped == 1);
    CHECK(g.word_count == 115);

    LsiNarrative tiny;
    tiny.participant_id = "p-tiny";
    NarrativeSection sec;
    sec.prompt_id = "q";
    sec.text = "alpha beta gamma.";
    tiny.sections.push_back(sec);
    StructuralFeatures t = structural_features(tiny);
    CHECK(t.word_count == 3);
    CHECK(t.type_token_ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(t.sentence_length_cv == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("random annotators are deterministic but mutually uncorrelated") {
    auto synth_cfg = SyntheticPersonaConfig::defaults(85);
    Gateway gw;
    gw.register_provider(std::make_shared<SyntheticModel>(synth_cfg));
    LsiNarrative n = synth_generate_narrative(grid_profile({3, 3, 3, 3, 3, 3}),
                                              flat_subscales(3.0), synth_cfg, "p-rand");
    auto units = narrative_units(n);
    StageConfig cfg;
    std::vector<std::string> annotators = {"synthetic:random-annotator-a",
                                           "synthetic:random-annotator-b"};
    CodingReport first = code_units(gw, units, rubric(), annotators, cfg);
    CodingReport second = code_units(gw, units, rubric(), annotators, cfg);
    REQUIRE(first.codings.size() == 48u);
    bool identical = true;
    for (size_t i = 0; i < first.codings.size(); ++i)
        if (first.codings[i].ratings != second.codings[i].ratings) identical = false;
    CHECK(identical);

    ReliabilityReport r = annotator_reliability(first.codings);
    CHECK_FALSE(std::isnan(r.mean_icc));
    CHECK(std::abs(r.mean_icc) < 0.5);  // loose band; 24 units is a small sample
}
