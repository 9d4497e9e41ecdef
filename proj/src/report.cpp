#include "psypipe/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "psypipe/errors.hpp"
#include "psypipe/text.hpp"

namespace psypipe {

namespace {

std::string fmt3(double v) {
    if (std::isnan(v)) return "degenerate";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

std::string fmt3(const std::optional<double>& v) {
    return v ? fmt3(*v) : std::string("degenerate");
}

std::string fmt_full(double v) {
    if (std::isnan(v)) return "degenerate";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string lpad(const std::string& s, size_t w) {
    return s.size() >= w ? s : std::string(w - s.size(), ' ') + s;
}

std::string rpad(const std::string& s, size_t w) {
    return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

std::string pair_key(const std::string& generator, const std::string& scorer) {
    return generator + "|" + scorer;
}

std::string clip(const std::string& s, size_t max_chars) {
    std::string flat = text::squeeze_ws(s);
    if (flat.size() <= max_chars) return flat;
    return flat.substr(0, max_chars) + "...";
}

struct Csv {
    std::ostringstream out;
    Csv() { out << "table,row,column,statistic,value\n"; }
    void raw(const std::string& table, const std::string& row, const std::string& column,
             const std::string& stat, const std::string& value) {
        out << table << ',' << row << ',' << column << ',' << stat << ',' << value << '\n';
    }
    void num(const std::string& table, const std::string& row, const std::string& column,
             const std::string& stat, double value) {
        raw(table, row, column, stat, fmt_full(value));
    }
    void num(const std::string& table, const std::string& row, const std::string& column,
             const std::string& stat, const std::optional<double>& value) {
        raw(table, row, column, stat, value ? fmt_full(*value) : std::string("degenerate"));
    }
    void count(const std::string& table, const std::string& row, const std::string& column,
               const std::string& stat, long value) {
        raw(table, row, column, stat, std::to_string(value));
    }
};

std::vector<std::string> aligned_ids(const std::map<std::string, DomainProfile>& truth,
                                     const std::map<std::string, DomainProfile>& recovered) {
    std::vector<std::string> pids;
    pids.reserve(recovered.size());
    for (const auto& [pid, v] : recovered) {
        (void)v;
        if (!truth.count(pid))
            throw AlignmentError("participant " + pid +
                                 " has recovered scores but no ground-truth profile");
        pids.push_back(pid);
    }
    return pids;
}

}  // namespace

// ---- recovery --------------------------------------------------------------

RecoveryRow recovery_report(const std::map<std::string, DomainProfile>& truth,
                            const std::map<std::string, DomainProfile>& recovered,
                            const std::string& generator_id, const std::string& scorer_id,
                            const RecoveryOptions& opts) {
    std::vector<std::string> pids = aligned_ids(truth, recovered);
    if (pids.size() < 10)
        throw CoverageError("recovery table needs at least 10 participants, got " +
                            std::to_string(pids.size()));

    RecoveryRow row;
    row.generator_id = generator_id;
    row.scorer_id = scorer_id;
    row.n = static_cast<int>(pids.size());
    row.refusals = opts.refusals;
    row.exclusions = opts.exclusions;
    row.self_scoring = !generator_id.empty() && generator_id == scorer_id;

    std::vector<DomainProfile> tv, rv;
    tv.reserve(pids.size());
    rv.reserve(pids.size());
    for (const auto& pid : pids) {
        tv.push_back(truth.at(pid));
        rv.push_back(recovered.at(pid));
    }

    double r_sum = 0.0;
    bool all_defined = true;
    for (int d = 0; d < kNumDomains; ++d) {
        std::vector<double> x, y;
        x.reserve(pids.size());
        y.reserve(pids.size());
        for (size_t i = 0; i < pids.size(); ++i) {
            x.push_back(tv[i].at(d));
            y.push_back(rv[i].at(d));
        }
        try {
            stats::CorrelationResult r = stats::pearson(x, y);
            row.domain_r[static_cast<size_t>(d)] = r;
            r_sum += r.r;
        } catch (const DegenerateInputError&) {
            all_defined = false;
        }
    }
    if (all_defined) {
        row.mean_r = r_sum / kNumDomains;
        if (opts.with_bootstrap)
            row.bootstrap = stats::bootstrap_mean_r(tv, rv, opts.bootstrap_resamples,
                                                    opts.bootstrap_seed);
    }
    return row;
}

RecoveryTable combine_recovery_rows(std::vector<RecoveryRow> rows,
                                    const std::string& config_hash) {
    std::sort(rows.begin(), rows.end(), [](const RecoveryRow& a, const RecoveryRow& b) {
        return std::tie(a.generator_id, a.scorer_id) < std::tie(b.generator_id, b.scorer_id);
    });
    RecoveryTable table;
    table.config_hash = config_hash;
    double sum = 0.0;
    int count = 0;
    for (const auto& row : rows) {
        if (row.self_scoring) {
            ++table.self_scoring_excluded;
        } else if (row.mean_r) {
            sum += *row.mean_r;
            ++count;
        }
    }
    if (count) table.mean_of_means = sum / count;
    table.rows = std::move(rows);
    return table;
}

// ---- beyond-HEXACO ---------------------------------------------------------

BeyondHexacoTable beyond_hexaco_report(const std::map<std::string, SubscaleProfile>& truth,
                                       const std::map<std::string, SubscaleProfile>& recovered) {
    std::vector<std::string> pids;
    pids.reserve(recovered.size());
    for (const auto& [pid, v] : recovered) {
        (void)v;
        if (!truth.count(pid))
            throw AlignmentError("participant " + pid +
                                 " has recovered subscales but no ground-truth profile");
        pids.push_back(pid);
    }
    if (pids.size() < 10)
        throw CoverageError("subscale table needs at least 10 participants, got " +
                            std::to_string(pids.size()));

    BeyondHexacoTable table;
    table.n = static_cast<int>(pids.size());
    table.alpha_corrected = stats::bonferroni(0.05, table.m_tests);
    for (int s = 0; s < kNumSubscales; ++s) {
        SubscaleRow row;
        row.subscale_id = kSubscaleIds[static_cast<size_t>(s)];
        std::vector<double> x, y;
        x.reserve(pids.size());
        y.reserve(pids.size());
        for (const auto& pid : pids) {
            x.push_back(truth.at(pid).values[static_cast<size_t>(s)]);
            y.push_back(recovered.at(pid).values[static_cast<size_t>(s)]);
        }
        try {
            stats::CorrelationResult r = stats::pearson(x, y);
            row.r = r;
            row.significant = r.p_two_tailed < table.alpha_corrected;
        } catch (const DegenerateInputError&) {
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

// ---- text rendering --------------------------------------------------------

namespace {

void render_correlation_block(std::ostringstream& out, const std::string& label,
                              const std::optional<stats::CorrelationResult>& r) {
    out << "      " << rpad(label, 14);
    if (r) {
        out << lpad(fmt3(r->r), 11) << lpad(fmt3(r->ci_low), 11) << lpad(fmt3(r->ci_high), 11)
            << lpad(fmt3(r->p_two_tailed), 11);
    } else {
        out << lpad("degenerate", 11) << lpad("", 11) << lpad("", 11) << lpad("", 11);
    }
    out << "\n";
}

void render_recovery(std::ostringstream& out, const RecoveryTable& t) {
    out << "DOMAIN RECOVERY (config " << (t.config_hash.empty() ? "-" : t.config_hash) << ")\n";
    for (const auto& row : t.rows) {
        out << "  " << row.generator_id << " -> " << row.scorer_id << "  (n=" << row.n
            << ", refusals=" << row.refusals << ", excluded=" << row.exclusions << ")";
        if (row.self_scoring) out << "  [self-scoring]";
        out << "\n";
        out << "      " << rpad("domain", 14) << lpad("r", 11) << lpad("ci_low", 11)
            << lpad("ci_high", 11) << lpad("p", 11) << "\n";
        for (int d = 0; d < kNumDomains; ++d)
            render_correlation_block(out, kDomainCodes[static_cast<size_t>(d)],
                                     row.domain_r[static_cast<size_t>(d)]);
        out << "      " << rpad("mean r", 14) << lpad(fmt3(row.mean_r), 11) << "\n";
        if (row.bootstrap) {
            out << "      bootstrap mean r " << fmt3(row.bootstrap->mean_r) << " ["
                << fmt3(row.bootstrap->ci_low) << ", " << fmt3(row.bootstrap->ci_high) << "], "
                << row.bootstrap->n_resamples << " resamples, seed " << row.bootstrap->seed
                << "\n";
        }
    }
    out << "  mean of mean r (self-scoring excluded): " << fmt3(t.mean_of_means);
    out << " over " << (t.rows.size() - static_cast<size_t>(t.self_scoring_excluded))
        << " pairing(s)";
    if (t.self_scoring_excluded)
        out << ", " << t.self_scoring_excluded << " self-scoring row(s) excluded";
    out << "\n\n";
}

void render_beyond(std::ostringstream& out, const BeyondHexacoTable& t) {
    out << "SUBSCALE RECOVERY (n=" << t.n << ", alpha " << fmt3(t.alpha_corrected) << " after "
        << t.m_tests << "-test correction)\n";
    out << "      " << rpad("subscale", 14) << lpad("r", 11) << lpad("ci_low", 11)
        << lpad("ci_high", 11) << lpad("p", 11) << "  sig\n";
    for (const auto& row : t.rows) {
        out << "      " << rpad(row.subscale_id, 14);
        if (row.r) {
            out << lpad(fmt3(row.r->r), 11) << lpad(fmt3(row.r->ci_low), 11)
                << lpad(fmt3(row.r->ci_high), 11) << lpad(fmt3(row.r->p_two_tailed), 11)
                << (row.significant ? "    *" : "");
        } else {
            out << lpad("degenerate", 11);
        }
        out << "\n";
    }
    out << "\n";
}

void render_bias(std::ostringstream& out, const BiasReport& b) {
    out << "BIAS DECOMPOSITION (generator=" << b.generator_id << ", scorer=" << b.scorer_id
        << ", n=" << b.n << ")\n";
    out << "      " << rpad("component", 12);
    for (int d = 0; d < kNumDomains; ++d)
        out << lpad(kDomainCodes[static_cast<size_t>(d)], 10);
    out << "\n";
    auto line = [&](const char* name, const DomainProfile& p) {
        out << "      " << rpad(name, 12);
        for (int d = 0; d < kNumDomains; ++d) out << lpad(fmt3(p.at(d)), 10);
        out << "\n";
    };
    line("stage1", b.stage1);
    line("stage2a", b.stage2a);
    line("stage2b", b.stage2b);
    line("stage2", b.stage2);
    line("total", b.total);
    out << "\n";
}

void render_matching(std::ostringstream& out, const std::vector<MatchingSummary>& ms) {
    out << "PROFILE MATCHING\n";
    for (const auto& m : ms) {
        out << "  matcher=" << m.matcher_id << "  accuracy " << fmt3(m.result.accuracy) << " ("
            << m.result.correct << "/" << m.result.trials << "), p " << fmt3(m.result.p_value)
            << ", unparseable " << m.result.unparseable << ", excluded participants "
            << m.excluded_participants << "\n";
    }
    out << "\n";
}

void render_leakage(std::ostringstream& out, const ScanReport& s, double threshold) {
    out << "LEAKAGE SCAN (threshold " << fmt3(threshold) << ")\n";
    out << "  sentences scanned " << s.sentences_scanned << ", empty skipped "
        << s.sentences_skipped_empty << ", flags " << s.flags.size() << "\n";
    size_t shown = std::min<size_t>(s.flags.size(), 10);
    for (size_t i = 0; i < shown; ++i) {
        const auto& f = s.flags[i];
        out << "    " << f.narrative_ref << " " << f.prompt_id << " item " << f.item_index
            << " jaccard " << fmt3(f.jaccard) << ": \"" << clip(f.sentence, 70) << "\"\n";
    }
    if (s.flags.size() > shown)
        out << "    (" << (s.flags.size() - shown) << " more flag(s) in the CSV)\n";
    out << "\n";
}

void render_reliability(std::ostringstream& out, const ReliabilityReport& r) {
    out << "ANNOTATOR RELIABILITY (" << r.annotators.size() << " annotators)\n";
    out << "      " << rpad("feature", 22) << lpad("icc", 11) << lpad("units", 8) << "\n";
    for (const auto& f : r.per_feature) {
        out << "      " << rpad(f.feature, 22);
        if (f.icc.degenerate)
            out << lpad("degenerate", 11);
        else
            out << lpad(fmt3(f.icc.icc), 11);
        out << lpad(std::to_string(f.units), 8) << "\n";
    }
    out << "  mean ICC across features: " << fmt3(r.mean_icc) << " (degenerate features: "
        << r.degenerate_features << ")\n";
    for (const auto& [a, b, icc] : r.pairwise)
        out << "      pair " << a << " x " << b << ": " << fmt3(icc) << "\n";
    out << "\n";
}

void render_convergent(std::ostringstream& out, const ConvergentTable& t) {
    out << "FEATURE x DOMAIN CONVERGENCE (n=" << t.n << ", alpha " << fmt_full(t.alpha_corrected)
        << " after " << t.m_tests << "-test correction, * significant)\n";
    out << "      " << rpad("feature", 22);
    for (int d = 0; d < kNumDomains; ++d)
        out << lpad(kDomainCodes[static_cast<size_t>(d)], 12);
    out << lpad("best", 8) << "\n";
    for (size_t f = 0; f < t.features.size(); ++f) {
        out << "      " << rpad(t.features[f], 22);
        for (int d = 0; d < kNumDomains; ++d) {
            const auto& cell = t.cells[f][static_cast<size_t>(d)];
            if (cell.r)
                out << lpad(fmt3(cell.r->r) + (cell.significant ? "*" : " "), 12);
            else
                out << lpad("degenerate ", 12);
        }
        int best = t.best_domain[f];
        out << lpad(best >= 0 ? kDomainCodes[static_cast<size_t>(best)] : "-", 8) << "\n";
    }
    out << "\n";
}

void render_cross_context(std::ostringstream& out, const CrossContextTable& t) {
    out << "CROSS-CONTEXT STABILITY (n=" << t.n << ", alpha " << fmt_full(t.alpha_corrected)
        << " after " << t.m_tests << "-test correction, below-floor excluded "
        << t.below_floor_excluded << ")\n";
    out << "      " << rpad("feature", 22) << lpad("r", 11) << lpad("ci_low", 11)
        << lpad("ci_high", 11) << lpad("p", 11) << "  sig\n";
    for (const auto& row : t.rows) {
        out << "      " << rpad(row.feature, 22);
        if (row.r) {
            out << lpad(fmt3(row.r->r), 11) << lpad(fmt3(row.r->ci_low), 11)
                << lpad(fmt3(row.r->ci_high), 11) << lpad(fmt3(row.r->p_two_tailed), 11)
                << (row.significant ? "    *" : "");
        } else {
            out << lpad("degenerate", 11);
        }
        out << "\n";
    }
    out << "  mean |r|: " << fmt3(t.mean_abs_r) << "\n\n";
}

void render_reactivity(std::ostringstream& out, const ReactivityResult& r) {
    out << "VALENCE REACTIVITY (n=" << r.n << ")\n";
    out << "  section-valence SD vs Emotionality:   r " << fmt3(r.r_sd_emotionality.r) << " ["
        << fmt3(r.r_sd_emotionality.ci_low) << ", " << fmt3(r.r_sd_emotionality.ci_high)
        << "], p " << fmt3(r.r_sd_emotionality.p_two_tailed) << "\n";
    out << "  section-valence mean vs Emotionality: r " << fmt3(r.r_mean_emotionality.r) << " ["
        << fmt3(r.r_mean_emotionality.ci_low) << ", " << fmt3(r.r_mean_emotionality.ci_high)
        << "], p " << fmt3(r.r_mean_emotionality.p_two_tailed) << "\n\n";
}

}  // namespace

std::string render_text(const ReportBundle& bundle) {
    std::ostringstream out;
    out << "psypipe report\n==============\n";
    out << "config hash: " << (bundle.config_hash.empty() ? "(none)" : bundle.config_hash)
        << "\n";
    if (!bundle.config_echo.empty()) {
        std::istringstream echo(bundle.config_echo);
        std::string line;
        while (std::getline(echo, line)) out << "  | " << line << "\n";
    }
    out << "\n";

    if (bundle.recovery) render_recovery(out, *bundle.recovery);
    if (bundle.beyond) render_beyond(out, *bundle.beyond);
    if (bundle.bias) render_bias(out, *bundle.bias);
    if (!bundle.matching.empty()) render_matching(out, bundle.matching);
    if (bundle.leakage) render_leakage(out, *bundle.leakage, bundle.leakage_threshold);
    if (bundle.reliability) render_reliability(out, *bundle.reliability);
    if (bundle.convergent) render_convergent(out, *bundle.convergent);
    if (bundle.cross_context) render_cross_context(out, *bundle.cross_context);
    if (bundle.reactivity) render_reactivity(out, *bundle.reactivity);

    if (!bundle.footnotes.empty()) {
        out << "NOTES\n";
        for (const auto& note : bundle.footnotes) out << "  - " << note << "\n";
    }
    return out.str();
}

// ---- CSV rendering ---------------------------------------------------------

std::string render_csv(const ReportBundle& bundle) {
    Csv csv;
    if (!bundle.config_hash.empty())
        csv.raw("meta", "run", "config", "config_hash", bundle.config_hash);

    if (bundle.recovery) {
        const auto& t = *bundle.recovery;
        for (const auto& row : t.rows) {
            std::string key = pair_key(row.generator_id, row.scorer_id);
            csv.count("recovery", key, "all", "n", row.n);
            csv.count("recovery", key, "all", "refusals", row.refusals);
            csv.count("recovery", key, "all", "exclusions", row.exclusions);
            csv.count("recovery", key, "all", "self_scoring", row.self_scoring ? 1 : 0);
            for (int d = 0; d < kNumDomains; ++d) {
                const std::string code = kDomainCodes[static_cast<size_t>(d)];
                const auto& r = row.domain_r[static_cast<size_t>(d)];
                if (r) {
                    csv.num("recovery", key, code, "r", r->r);
                    csv.num("recovery", key, code, "ci_low", r->ci_low);
                    csv.num("recovery", key, code, "ci_high", r->ci_high);
                    csv.num("recovery", key, code, "p", r->p_two_tailed);
                } else {
                    csv.raw("recovery", key, code, "r", "degenerate");
                }
            }
            csv.num("recovery", key, "all", "mean_r", row.mean_r);
            if (row.bootstrap) {
                csv.num("recovery", key, "all", "bootstrap_mean_r", row.bootstrap->mean_r);
                csv.num("recovery", key, "all", "bootstrap_ci_low", row.bootstrap->ci_low);
                csv.num("recovery", key, "all", "bootstrap_ci_high", row.bootstrap->ci_high);
                csv.count("recovery", key, "all", "bootstrap_resamples",
                          row.bootstrap->n_resamples);
                csv.raw("recovery", key, "all", "bootstrap_seed",
                        std::to_string(row.bootstrap->seed));
            }
        }
        csv.num("recovery", "summary", "all", "mean_of_means", t.mean_of_means);
        csv.count("recovery", "summary", "all", "self_scoring_excluded",
                  t.self_scoring_excluded);
    }

    if (bundle.beyond) {
        const auto& t = *bundle.beyond;
        csv.count("subscales", "summary", "all", "n", t.n);
        csv.num("subscales", "summary", "all", "alpha_corrected", t.alpha_corrected);
        csv.count("subscales", "summary", "all", "m_tests", t.m_tests);
        for (const auto& row : t.rows) {
            if (row.r) {
                csv.num("subscales", row.subscale_id, "all", "r", row.r->r);
                csv.num("subscales", row.subscale_id, "all", "ci_low", row.r->ci_low);
                csv.num("subscales", row.subscale_id, "all", "ci_high", row.r->ci_high);
                csv.num("subscales", row.subscale_id, "all", "p", row.r->p_two_tailed);
                csv.count("subscales", row.subscale_id, "all", "significant",
                          row.significant ? 1 : 0);
            } else {
                csv.raw("subscales", row.subscale_id, "all", "r", "degenerate");
            }
        }
    }

    if (bundle.bias) {
        const auto& b = *bundle.bias;
        std::string key = pair_key(b.generator_id, b.scorer_id);
        csv.count("bias", key, "all", "n", b.n);
        auto put = [&](const char* component, const DomainProfile& p) {
            for (int d = 0; d < kNumDomains; ++d)
                csv.num("bias", key, kDomainCodes[static_cast<size_t>(d)], component, p.at(d));
        };
        put("stage1", b.stage1);
        put("stage2a", b.stage2a);
        put("stage2b", b.stage2b);
        put("stage2", b.stage2);
        put("total", b.total);
    }

    for (const auto& m : bundle.matching) {
        csv.num("matching", m.matcher_id, "all", "accuracy", m.result.accuracy);
        csv.num("matching", m.matcher_id, "all", "p", m.result.p_value);
        csv.count("matching", m.matcher_id, "all", "trials", m.result.trials);
        csv.count("matching", m.matcher_id, "all", "correct", m.result.correct);
        csv.count("matching", m.matcher_id, "all", "unparseable", m.result.unparseable);
        csv.count("matching", m.matcher_id, "all", "excluded_participants",
                  m.excluded_participants);
    }

    if (bundle.leakage) {
        const auto& s = *bundle.leakage;
        csv.num("leakage", "summary", "all", "threshold", bundle.leakage_threshold);
        csv.count("leakage", "summary", "all", "sentences_scanned", s.sentences_scanned);
        csv.count("leakage", "summary", "all", "sentences_skipped_empty",
                  s.sentences_skipped_empty);
        csv.count("leakage", "summary", "all", "flags", static_cast<long>(s.flags.size()));
        for (const auto& f : s.flags)
            csv.num("leakage", f.narrative_ref + "#" + f.prompt_id,
                    "item" + std::to_string(f.item_index), "jaccard", f.jaccard);
    }

    if (bundle.reliability) {
        const auto& r = *bundle.reliability;
        csv.num("reliability", "summary", "all", "mean_icc", r.mean_icc);
        csv.count("reliability", "summary", "all", "degenerate_features",
                  r.degenerate_features);
        csv.count("reliability", "summary", "all", "annotators",
                  static_cast<long>(r.annotators.size()));
        for (const auto& f : r.per_feature) {
            if (f.icc.degenerate)
                csv.raw("reliability", f.feature, "all", "icc", "degenerate");
            else
                csv.num("reliability", f.feature, "all", "icc", f.icc.icc);
            csv.count("reliability", f.feature, "all", "units", f.units);
        }
        for (const auto& [a, b, icc] : r.pairwise)
            csv.num("reliability", a + "|" + b, "pair", "mean_icc", icc);
    }

    if (bundle.convergent) {
        const auto& t = *bundle.convergent;
        csv.count("convergent", "summary", "all", "n", t.n);
        csv.num("convergent", "summary", "all", "alpha_corrected", t.alpha_corrected);
        csv.count("convergent", "summary", "all", "m_tests", t.m_tests);
        for (size_t f = 0; f < t.features.size(); ++f) {
            for (int d = 0; d < kNumDomains; ++d) {
                const std::string code = kDomainCodes[static_cast<size_t>(d)];
                const auto& cell = t.cells[f][static_cast<size_t>(d)];
                if (cell.r) {
                    csv.num("convergent", t.features[f], code, "r", cell.r->r);
                    csv.num("convergent", t.features[f], code, "p", cell.r->p_two_tailed);
                    csv.count("convergent", t.features[f], code, "significant",
                              cell.significant ? 1 : 0);
                } else {
                    csv.raw("convergent", t.features[f], code, "r", "degenerate");
                }
            }
            int best = t.best_domain[f];
            csv.raw("convergent", t.features[f], "all", "best_domain",
                    best >= 0 ? kDomainCodes[static_cast<size_t>(best)] : "degenerate");
        }
    }

    if (bundle.cross_context) {
        const auto& t = *bundle.cross_context;
        csv.count("cross_context", "summary", "all", "n", t.n);
        csv.num("cross_context", "summary", "all", "alpha_corrected", t.alpha_corrected);
        csv.count("cross_context", "summary", "all", "m_tests", t.m_tests);
        csv.count("cross_context", "summary", "all", "below_floor_excluded",
                  t.below_floor_excluded);
        csv.num("cross_context", "summary", "all", "mean_abs_r", t.mean_abs_r);
        for (const auto& row : t.rows) {
            if (row.r) {
                csv.num("cross_context", row.feature, "all", "r", row.r->r);
                csv.num("cross_context", row.feature, "all", "ci_low", row.r->ci_low);
                csv.num("cross_context", row.feature, "all", "ci_high", row.r->ci_high);
                csv.num("cross_context", row.feature, "all", "p", row.r->p_two_tailed);
                csv.count("cross_context", row.feature, "all", "significant",
                          row.significant ? 1 : 0);
            } else {
                csv.raw("cross_context", row.feature, "all", "r", "degenerate");
            }
        }
    }

    if (bundle.reactivity) {
        const auto& r = *bundle.reactivity;
        csv.count("reactivity", "summary", "all", "n", r.n);
        csv.num("reactivity", "sd_vs_emotionality", "all", "r", r.r_sd_emotionality.r);
        csv.num("reactivity", "sd_vs_emotionality", "all", "p",
                r.r_sd_emotionality.p_two_tailed);
        csv.num("reactivity", "mean_vs_emotionality", "all", "r", r.r_mean_emotionality.r);
        csv.num("reactivity", "mean_vs_emotionality", "all", "p",
                r.r_mean_emotionality.p_two_tailed);
    }

    return csv.out.str();
}

EmittedReport emit(const ReportBundle& bundle, const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create report directory " + out_dir + ": " + ec.message());

    EmittedReport paths;
    paths.text_path = (fs::path(out_dir) / "report.txt").string();
    paths.csv_path = (fs::path(out_dir) / "report.csv").string();

    const std::string text = render_text(bundle);
    const std::string csv = render_csv(bundle);
    {
        std::ofstream out(paths.text_path, std::ios::binary);
        if (!out) throw IoError("cannot open " + paths.text_path + " for writing");
        out << text;
        if (!out) throw IoError("write failed for " + paths.text_path);
    }
    {
        std::ofstream out(paths.csv_path, std::ios::binary);
        if (!out) throw IoError("cannot open " + paths.csv_path + " for writing");
        out << csv;
        if (!out) throw IoError("write failed for " + paths.csv_path);
    }
    return paths;
}

}  // namespace psypipe
