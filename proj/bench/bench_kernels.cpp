// Times the OpenMP kernels against their serial reference implementations on
// synthetic inputs, checking agreement before reporting. The bootstrap must
// match bit for bit; the leakage scan must produce the same flag set.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "psypipe/data_model.hpp"
#include "psypipe/stats.hpp"
#include "psypipe/validation.hpp"

using namespace psypipe;

namespace {

template <typename F>
double best_seconds(int reps, F&& f) {
    double best = 1e300;
    for (int i = 0; i < reps; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        f();
        auto t1 = std::chrono::steady_clock::now();
        best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    return best;
}

double clamp15(double v) { return std::min(5.0, std::max(1.0, v)); }

std::string make_sentence(std::mt19937_64& rng, int words) {
    static const char* pool[] = {
        "river",  "window", "summer",  "engine", "quiet",  "letter", "garden",
        "friend", "moment", "evening", "stone",  "travel", "murmur", "lantern",
        "harbor", "meadow", "copper",  "violet", "thread", "signal",
    };
    std::uniform_int_distribution<size_t> pick(0, std::size(pool) - 1);
    std::string s;
    for (int w = 0; w < words; ++w) {
        if (w) s += ' ';
        s += pool[pick(rng)];
    }
    s += '.';
    return s;
}

std::string drop_second_word(const std::string& sentence) {
    size_t first = sentence.find(' ');
    if (first == std::string::npos) return sentence;
    size_t second = sentence.find(' ', first + 1);
    if (second == std::string::npos) return sentence;
    return sentence.substr(0, first) + sentence.substr(second);
}

using FlagKey = std::tuple<std::string, std::string, int, std::string>;

std::vector<FlagKey> flag_keys(const ScanReport& report) {
    std::vector<FlagKey> keys;
    keys.reserve(report.flags.size());
    for (const auto& f : report.flags)
        keys.emplace_back(f.narrative_ref, f.prompt_id, f.item_index, f.sentence);
    std::sort(keys.begin(), keys.end());
    return keys;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"serial vs parallel kernel comparison"};
    int participants = 400;
    int resamples = 20000;
    int narratives = 150;
    int reps = 3;
    app.add_option("--participants", participants, "bootstrap sample size");
    app.add_option("--resamples", resamples, "bootstrap resample count");
    app.add_option("--narratives", narratives, "narratives for the leakage scan");
    app.add_option("--reps", reps, "timing repetitions, best-of");
    CLI11_PARSE(app, argc, argv);

#ifdef _OPENMP
    std::printf("threads: %d (OpenMP)\n", omp_get_max_threads());
#else
    std::printf("threads: 1 (OpenMP disabled)\n");
#endif

    std::mt19937_64 rng(17);
    bool ok = true;

    // bootstrap of the mean domain correlation
    {
        std::normal_distribution<double> base(3.0, 0.8), noise(0.0, 0.35);
        std::vector<DomainProfile> truth(static_cast<size_t>(participants));
        std::vector<DomainProfile> recovered(static_cast<size_t>(participants));
        for (int i = 0; i < participants; ++i) {
            for (int d = 0; d < kNumDomains; ++d) {
                double t = clamp15(base(rng));
                truth[static_cast<size_t>(i)].at(d) = t;
                recovered[static_cast<size_t>(i)].at(d) = clamp15(t + noise(rng));
            }
        }

        stats::BootstrapResult par, ser;
        double tp = best_seconds(reps, [&] {
            par = stats::bootstrap_mean_r(truth, recovered, resamples, 7);
        });
        double ts = best_seconds(reps, [&] {
            ser = stats::bootstrap_mean_r_serial(truth, recovered, resamples, 7);
        });
        bool agree = par.mean_r == ser.mean_r && par.ci_low == ser.ci_low &&
                     par.ci_high == ser.ci_high && par.discarded == ser.discarded;
        ok = ok && agree;
        std::printf(
            "bootstrap    n=%-5d resamples=%-6d  parallel %8.4fs  serial %8.4fs  "
            "speedup %4.1fx  %s\n",
            participants, resamples, tp, ts, ts / tp,
            agree ? "[bitwise agree]" : "[MISMATCH]");
        if (!agree)
            std::printf("  parallel mean_r %.17g vs serial %.17g\n", par.mean_r, ser.mean_r);
    }

    // sentence-level leakage scan
    {
        std::vector<std::pair<int, std::string>> stems;
        for (int i = 0; i < 120; ++i) stems.emplace_back(i + 1, make_sentence(rng, 8));

        std::uniform_int_distribution<int> sentence_words(10, 14);
        std::uniform_int_distribution<size_t> stem_pick(0, stems.size() - 1);
        std::uniform_real_distribution<double> plant(0.0, 1.0);
        std::vector<LsiNarrative> docs(static_cast<size_t>(narratives));
        char buf[16];
        for (int p = 0; p < narratives; ++p) {
            LsiNarrative& doc = docs[static_cast<size_t>(p)];
            std::snprintf(buf, sizeof buf, "b%03d", p);
            doc.participant_id = buf;
            doc.generator_id = "bench";
            doc.sections.resize(kLsiSectionCount);
            for (int s = 0; s < kLsiSectionCount; ++s) {
                std::snprintf(buf, sizeof buf, "q%02d", s + 1);
                doc.sections[static_cast<size_t>(s)].prompt_id = buf;
                std::string text;
                for (int k = 0; k < 6; ++k) {
                    if (k) text += ' ';
                    text += make_sentence(rng, sentence_words(rng));
                }
                if (plant(rng) < 0.05)
                    text += ' ' + drop_second_word(stems[stem_pick(rng)].second);
                doc.sections[static_cast<size_t>(s)].text = text;
            }
        }

        ScanReport par, ser;
        double tp = best_seconds(reps, [&] { par = scan_leakage(docs, stems, 0.7); });
        double ts = best_seconds(reps, [&] { ser = scan_leakage_serial(docs, stems, 0.7); });
        bool agree = flag_keys(par) == flag_keys(ser);
        ok = ok && agree;
        std::printf(
            "leakage scan n=%-5d stems=%-6zu     parallel %8.4fs  serial %8.4fs  "
            "speedup %4.1fx  %s\n",
            narratives, stems.size(), tp, ts, ts / tp,
            agree ? "[same flag set]" : "[MISMATCH]");
        std::printf("  flags: parallel %zu, serial %zu\n", par.flags.size(),
                    ser.flags.size());
    }

    if (!ok) {
        std::printf("kernel disagreement detected\n");
        return 1;
    }
    return 0;
}
