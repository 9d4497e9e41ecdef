#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "psypipe/content_analysis.hpp"
#include "psypipe/errors.hpp"
#include "psypipe/psychometrics.hpp"
#include "psypipe/report.hpp"
#include "psypipe/stats.hpp"

using namespace psypipe;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("psypipe-report-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
};

std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream out;
    out << in.rdbuf();
    return out.str();
}

std::string full17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Truth profiles with per-domain variation; values stay well inside 1..5.
std::map<std::string, DomainProfile> varied_truth(int n) {
    std::map<std::string, DomainProfile> truth;
    for (int i = 0; i < n; ++i) {
        char pid[16];
        std::snprintf(pid, sizeof pid, "r%03d", i);
        DomainProfile p;
        for (int d = 0; d < kNumDomains; ++d)
            p.at(d) = 1.5 + 0.2 * ((i + 3 * d) % 10);
        truth[pid] = p;
    }
    return truth;
}

std::map<std::string, SubscaleProfile> varied_subscales(int n) {
    std::map<std::string, SubscaleProfile> truth;
    for (int i = 0; i < n; ++i) {
        char pid[16];
        std::snprintf(pid, sizeof pid, "r%03d", i);
        SubscaleProfile p;
        for (int s = 0; s < kNumSubscales; ++s)
            p.values[static_cast<size_t>(s)] = 1.5 + 0.3 * ((i + 2 * s) % 9);
        truth[pid] = p;
    }
    return truth;
}

}  // namespace

TEST_CASE("perfect recovery yields unit correlations everywhere") {
    auto truth = varied_truth(12);
    RecoveryOptions opts;
    opts.bootstrap_resamples = 400;
    opts.bootstrap_seed = 11;
    RecoveryRow row = recovery_report(truth, truth, "gen", "score", opts);
    CHECK(row.n == 12);
    CHECK_FALSE(row.self_scoring);
    for (int d = 0; d < kNumDomains; ++d) {
        REQUIRE(row.domain_r[static_cast<size_t>(d)].has_value());
        CHECK(row.domain_r[static_cast<size_t>(d)]->r == doctest::Approx(1.0).epsilon(1e-12));
    }
    REQUIRE(row.mean_r.has_value());
    CHECK(*row.mean_r == doctest::Approx(1.0).epsilon(1e-12));
    REQUIRE(row.bootstrap.has_value());
    CHECK(row.bootstrap->mean_r == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(row.bootstrap->ci_low == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(row.bootstrap->ci_high == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(row.bootstrap->n_resamples == 400);
    CHECK(row.bootstrap->seed == 11u);
}

TEST_CASE("mean r is the arithmetic mean of the six domain correlations") {
    auto truth = varied_truth(12);
    std::map<std::string, DomainProfile> recovered;
    for (const auto& [pid, t] : truth) {
        DomainProfile r;
        // five domains agree up to a positive affine map, one is inverted
        for (int d = 0; d < 5; ++d) r.at(d) = 0.5 * t.at(d) + 1.0;
        r.at(5) = 6.0 - 0.7 * t.at(5);
        recovered[pid] = r;
    }
    RecoveryOptions opts;
    opts.with_bootstrap = false;
    RecoveryRow row = recovery_report(truth, recovered, "gen", "score", opts);
    for (int d = 0; d < 5; ++d)
        CHECK(row.domain_r[static_cast<size_t>(d)]->r == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(row.domain_r[5]->r == doctest::Approx(-1.0).epsilon(1e-9));
    REQUIRE(row.mean_r.has_value());
    CHECK(*row.mean_r == doctest::Approx(4.0 / 6.0).epsilon(1e-9));
    CHECK_FALSE(row.bootstrap.has_value());
}

TEST_CASE("degenerate domains leave the row mean undefined") {
    auto truth = varied_truth(12);
    std::map<std::string, DomainProfile> recovered;
    for (const auto& [pid, t] : truth) {
        DomainProfile r = t;
        r.at(2) = 3.0;  // scorer returns a constant for extraversion
        recovered[pid] = r;
    }
    RecoveryRow row = recovery_report(truth, recovered, "gen", "score");
    CHECK_FALSE(row.domain_r[2].has_value());
    CHECK(row.domain_r[0].has_value());
    CHECK_FALSE(row.mean_r.has_value());
    CHECK_FALSE(row.bootstrap.has_value());
}

TEST_CASE("recovery guards alignment and coverage") {
    auto truth = varied_truth(12);
    auto recovered = truth;
    truth.erase("r007");
    CHECK_THROWS_AS(recovery_report(truth, recovered, "g", "s"), AlignmentError);

    auto small = varied_truth(9);
    CHECK_THROWS_AS(recovery_report(small, small, "g", "s"), CoverageError);
}

TEST_CASE("self-scoring rows are excluded from the pooled mean") {
    auto truth = varied_truth(12);
    std::map<std::string, DomainProfile> inverted;
    for (const auto& [pid, t] : truth) {
        DomainProfile r;
        for (int d = 0; d < 5; ++d) r.at(d) = t.at(d);
        r.at(5) = 6.0 - t.at(5);
        inverted[pid] = r;
    }
    RecoveryOptions opts;
    opts.with_bootstrap = false;
    std::vector<RecoveryRow> rows;
    rows.push_back(recovery_report(truth, inverted, "gen-b", "scorer-a", opts));  // 4/6
    rows.push_back(recovery_report(truth, truth, "model-x", "model-x", opts));    // self
    rows.push_back(recovery_report(truth, truth, "gen-a", "scorer-b", opts));     // 1.0

    RecoveryTable table = combine_recovery_rows(std::move(rows), "cfg-123");
    CHECK(table.config_hash == "cfg-123");
    CHECK(table.self_scoring_excluded == 1);
    REQUIRE(table.rows.size() == 3u);
    CHECK(table.rows[0].generator_id == "gen-a");  // sorted by (generator, scorer)
    CHECK(table.rows[1].generator_id == "gen-b");
    CHECK(table.rows[2].self_scoring);
    REQUIRE(table.mean_of_means.has_value());
    CHECK(*table.mean_of_means == doctest::Approx((1.0 + 4.0 / 6.0) / 2.0).epsilon(1e-9));

    std::vector<RecoveryRow> only_self;
    only_self.push_back(recovery_report(truth, truth, "m", "m", opts));
    RecoveryTable empty = combine_recovery_rows(std::move(only_self), "");
    CHECK_FALSE(empty.mean_of_means.has_value());
    CHECK(render_text([&] {
              ReportBundle b;
              b.recovery = empty;
              return b;
          }())
              .find("mean of mean r (self-scoring excluded): degenerate") != std::string::npos);
}

TEST_CASE("subscale recovery marks significance after the 15-test correction") {
    auto truth = varied_subscales(20);
    auto recovered = truth;
    for (auto& [pid, p] : recovered) p.values[8] = 3.0;  // constant ninth subscale

    BeyondHexacoTable table = beyond_hexaco_report(truth, recovered);
    CHECK(table.n == 20);
    CHECK(table.m_tests == 15);
    CHECK(table.alpha_corrected == doctest::Approx(stats::bonferroni(0.05, 15)).epsilon(1e-15));
    CHECK(table.alpha_corrected == doctest::Approx(0.05 / 15.0).epsilon(1e-12));
    REQUIRE(table.rows.size() == static_cast<size_t>(kNumSubscales));
    for (int s = 0; s < 8; ++s) {
        CHECK(table.rows[static_cast<size_t>(s)].subscale_id == kSubscaleIds[static_cast<size_t>(s)]);
        REQUIRE(table.rows[static_cast<size_t>(s)].r.has_value());
        CHECK(table.rows[static_cast<size_t>(s)].r->r == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(table.rows[static_cast<size_t>(s)].significant);
    }
    CHECK(table.rows[8].subscale_id == "sias");
    CHECK_FALSE(table.rows[8].r.has_value());
    CHECK_FALSE(table.rows[8].significant);

    auto missing = truth;
    missing.erase("r011");
    CHECK_THROWS_AS(beyond_hexaco_report(missing, recovered), AlignmentError);
    auto few = varied_subscales(9);
    CHECK_THROWS_AS(beyond_hexaco_report(few, few), CoverageError);
}

TEST_CASE("text tables render three decimal places and spell out degeneracy") {
    ReportBundle bundle;
    bundle.config_hash = "cfg-feed";
    bundle.config_echo = "alpha: 0.05\nseed: 7";

    RecoveryRow row;
    row.generator_id = "gen-a";
    row.scorer_id = "sc-b";
    row.n = 57;
    row.refusals = 2;
    row.exclusions = 1;
    stats::CorrelationResult hh;
    hh.r = 0.75;
    hh.ci_low = 0.682;
    hh.ci_high = 0.825;
    hh.p_two_tailed = 0.0012;
    row.domain_r[0] = hh;
    row.mean_r = 0.762;
    RecoveryTable table;
    table.rows = {row};
    table.config_hash = "cfg-feed";
    bundle.recovery = table;

    MatchingSummary match;
    match.matcher_id = "panel";
    match.result.accuracy = 0.645;
    match.result.correct = 40;
    match.result.trials = 62;
    match.result.p_value = 0.012;
    match.result.unparseable = 3;
    match.excluded_participants = 1;
    bundle.matching = {match};

    std::string text = render_text(bundle);
    CHECK(text.starts_with("psypipe report\n==============\n"));
    CHECK(text.find("config hash: cfg-feed\n") != std::string::npos);
    CHECK(text.find("  | alpha: 0.05\n  | seed: 7\n") != std::string::npos);
    CHECK(text.find("  gen-a -> sc-b  (n=57, refusals=2, excluded=1)\n") != std::string::npos);
    CHECK(text.find("      HH                  0.750      0.682      0.825      0.001\n") !=
          std::string::npos);
    CHECK(text.find("      E              degenerate") != std::string::npos);
    CHECK(text.find("      mean r              0.762\n") != std::string::npos);
    CHECK(text.find("matcher=panel  accuracy 0.645 (40/62), p 0.012, unparseable 3, "
                    "excluded participants 1") != std::string::npos);
    CHECK(text.find("0.7500") == std::string::npos);  // never more than 3 decimals in text
}

TEST_CASE("csv rows enumerate every statistic with full precision") {
    ReportBundle bundle;
    bundle.config_hash = "cfg-feed";

    RecoveryRow row;
    row.generator_id = "gen-a";
    row.scorer_id = "sc-b";
    row.n = 57;
    row.refusals = 2;
    row.exclusions = 1;
    stats::CorrelationResult hh;
    hh.r = 0.75;
    hh.ci_low = 0.682;
    hh.ci_high = 0.825;
    hh.p_two_tailed = 0.0012;
    row.domain_r[0] = hh;
    row.mean_r = 0.762;
    RecoveryTable table;
    table.rows = {row};
    table.mean_of_means = 0.762;
    table.config_hash = "cfg-feed";
    bundle.recovery = table;

    MatchingSummary match;
    match.matcher_id = "panel";
    match.result.accuracy = 0.645;
    match.result.correct = 40;
    match.result.trials = 62;
    match.result.p_value = 0.012;
    match.result.unparseable = 3;
    match.excluded_participants = 1;
    bundle.matching = {match};

    std::string csv = render_csv(bundle);
    std::vector<std::string> lines;
    std::istringstream in(csv);
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);

    // header + meta + recovery row (4 counts, 4 HH stats, 5 degenerate
    // domains, mean_r) + summary pair + 6 matching rows
    REQUIRE(lines.size() == 24u);
    CHECK(lines[0] == "table,row,column,statistic,value");
    for (const auto& l : lines)
        CHECK(std::count(l.begin(), l.end(), ',') == 4);
    CHECK(csv.find("recovery,gen-a|sc-b,HH,r,0.75\n") != std::string::npos);
    CHECK(csv.find("recovery,gen-a|sc-b,HH,ci_high," + full17(0.825) + "\n") !=
          std::string::npos);
    CHECK(csv.find("recovery,gen-a|sc-b,E,r,degenerate\n") != std::string::npos);
    CHECK(csv.find("recovery,gen-a|sc-b,all,mean_r," + full17(0.762) + "\n") !=
          std::string::npos);
    CHECK(csv.find("recovery,summary,all,self_scoring_excluded,0\n") != std::string::npos);
    CHECK(csv.find("matching,panel,all,accuracy," + full17(0.645) + "\n") != std::string::npos);
    CHECK(csv.find("matching,panel,all,trials,62\n") != std::string::npos);
    CHECK(csv.find("meta,run,config,config_hash,cfg-feed\n") != std::string::npos);
}

TEST_CASE("emitting the same bundle twice is byte identical") {
    ReportBundle bundle;
    bundle.config_hash = "cfg-emit";
    bundle.config_echo = "n: 12";

    auto truth = varied_truth(12);
    RecoveryOptions opts;
    opts.bootstrap_resamples = 300;
    opts.bootstrap_seed = 19;
    std::vector<RecoveryRow> rows;
    rows.push_back(recovery_report(truth, truth, "gen-a", "scorer-b", opts));
    bundle.recovery = combine_recovery_rows(std::move(rows), "cfg-emit");

    auto subs = varied_subscales(12);
    bundle.beyond = beyond_hexaco_report(subs, subs);

    BiasReport bias;
    bias.generator_id = "gen-a";
    bias.scorer_id = "scorer-b";
    bias.n = 12;
    for (int d = 0; d < kNumDomains; ++d) {
        bias.stage1.at(d) = 0.1 * d;
        bias.stage2a.at(d) = -0.05 * d;
        bias.stage2b.at(d) = 0.02 * d;
        bias.stage2.at(d) = bias.stage2a.at(d) + bias.stage2b.at(d);
        bias.total.at(d) = bias.stage1.at(d) + bias.stage2.at(d);
    }
    bundle.bias = bias;

    ScanReport scan;
    scan.sentences_scanned = 480;
    scan.sentences_skipped_empty = 3;
    LeakageFlag flag;
    flag.narrative_ref = "r001";
    flag.prompt_id = "seg04";
    flag.sentence = "A sentence that echoed an item stem.";
    flag.item_index = 17;
    flag.jaccard = 0.92;
    scan.flags = {flag};
    bundle.leakage = scan;

    std::vector<FeatureCoding> codings;
    for (int u = 0; u < 12; ++u)
        for (const char* annotator : {"a", "b"}) {
            FeatureCoding c;
            c.unit_ref = "p0#u" + std::to_string(10 + u);
            c.annotator_id = annotator;
            c.ratings["warmth"] = 1 + (u % 5);
            codings.push_back(std::move(c));
        }
    bundle.reliability = annotator_reliability(codings);

    ReactivityResult reactivity;
    reactivity.n = 12;
    reactivity.r_sd_emotionality.r = 0.91;
    reactivity.r_sd_emotionality.p_two_tailed = 0.0001;
    reactivity.r_mean_emotionality.r = 0.05;
    reactivity.r_mean_emotionality.p_two_tailed = 0.82;
    bundle.reactivity = reactivity;

    bundle.footnotes = {"synthetic backend", "seed 19"};

    CHECK(render_text(bundle) == render_text(bundle));
    CHECK(render_csv(bundle) == render_csv(bundle));

    TempDir tmp;
    EmittedReport first = emit(bundle, (tmp.path / "a").string());
    EmittedReport second = emit(bundle, (tmp.path / "b").string());
    CHECK(first.text_path.ends_with("report.txt"));
    CHECK(first.csv_path.ends_with("report.csv"));
    std::string text_a = slurp(first.text_path);
    CHECK_FALSE(text_a.empty());
    CHECK(text_a == slurp(second.text_path));
    CHECK(slurp(first.csv_path) == slurp(second.csv_path));

    // re-emitting into the same directory overwrites with identical bytes
    EmittedReport third = emit(bundle, (tmp.path / "a").string());
    CHECK(slurp(third.text_path) == text_a);

    CHECK(text_a.find("NOTES\n  - synthetic backend\n  - seed 19\n") != std::string::npos);
    CHECK(text_a.find("bootstrap mean r 1.000 [1.000, 1.000], 300 resamples, seed 19") !=
          std::string::npos);

    CHECK_THROWS_AS(emit(bundle, "/proc/psypipe-denied/reports"), IoError);
}

TEST_CASE("degenerate statistics always render as a word, never as zero") {
    ReportBundle bundle;
    RecoveryRow row;
    row.generator_id = "g";
    row.scorer_id = "s";
    row.n = 10;
    RecoveryTable table;
    table.rows = {row};
    bundle.recovery = table;

    ReliabilityReport rel;
    FeatureReliability fr;
    fr.feature = "humor";
    fr.icc.degenerate = true;
    fr.units = 20;
    rel.per_feature = {fr};
    rel.mean_icc = std::nan("");
    rel.degenerate_features = 1;
    rel.annotators = {"a", "b"};
    bundle.reliability = rel;

    std::string text = render_text(bundle);
    CHECK(text.find("degenerate") != std::string::npos);
    CHECK(text.find("mean ICC across features: degenerate") != std::string::npos);

    std::string csv = render_csv(bundle);
    CHECK(csv.find("reliability,humor,all,icc,degenerate\n") != std::string::npos);
    CHECK(csv.find("reliability,summary,all,mean_icc,degenerate\n") != std::string::npos);
    CHECK(csv.find("recovery,g|s,all,mean_r,degenerate\n") != std::string::npos);
    CHECK(csv.find("recovery,g|s,HH,r,degenerate\n") != std::string::npos);
}
