#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "psypipe/content_analysis.hpp"
#include "psypipe/data_model.hpp"
#include "psypipe/errors.hpp"
#include "psypipe/gateway.hpp"
#include "psypipe/hashing.hpp"
#include "psypipe/pipeline.hpp"
#include "psypipe/psychometrics.hpp"
#include "psypipe/report.hpp"
#include "psypipe/synthetic.hpp"
#include "psypipe/validation.hpp"

using nlohmann::json;
using namespace psypipe;

namespace {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3 };
LogLevel g_log_level = LogLevel::info;

void say(LogLevel level, const std::string& msg) {
    if (level < g_log_level) return;
    static const char* names[] = {"debug", "info", "warn", "error"};
    std::cerr << "psypipe [" << names[static_cast<int>(level)] << "] " << msg << "\n";
}

struct CliConfig {
    std::string participants = "data/participants.jsonl";
    std::string hexaco_key_path = "data/hexaco60_key.json";
    std::string beyond_key_path = "data/beyond_hexaco_key.json";
    std::string protocol_path = "data/lsi_protocol.json";
    std::string rubric_path = "data/feature_rubric.json";
    std::string store_dir = "runs";
    std::string log_file;
    int concurrency = 4;

    StageConfig stage;
    RetryPolicy retry;
    RateLimit rate_limit;
    SyntheticPersonaConfig synth = SyntheticPersonaConfig::defaults(0);
    std::vector<RemoteEndpointConfig> remotes;

    std::vector<std::string> annotators = {"synthetic:coder-a", "synthetic:coder-b",
                                           "synthetic:coder-c"};
    std::string matcher_id = "synthetic";
    std::string stripper_id = "synthetic";
    std::string verifier_id = "synthetic:verify";

    // canonical JSON of everything result-affecting, hashed into manifests
    std::string relevant_json;
};

DomainProfile profile_from_json(const json& arr, const std::string& what) {
    if (!arr.is_array() || arr.size() != kNumDomains)
        throw SchemaError("config: " + what + " must be an array of 6 numbers");
    DomainProfile p;
    for (int d = 0; d < kNumDomains; ++d) p.at(d) = arr[static_cast<size_t>(d)].get<double>();
    return p;
}

void build_relevant_json(CliConfig& c) {
    json j;
    j["generator_id"] = c.stage.generator_id;
    j["scorer_id"] = c.stage.scorer_id;
    j["scoring_mode"] = scoring_mode_name(c.stage.mode);
    j["generation_temperature"] = c.stage.generation_temperature;
    j["scoring_temperature"] = c.stage.scoring_temperature;
    j["master_seed"] = c.stage.master_seed;
    j["max_section_failures"] = c.stage.max_section_failures;
    json s;
    s["seed"] = c.synth.seed;
    s["noise_sd"] = c.synth.noise_sd;
    s["c_scale"] = c.synth.c_scale;
    s["reactivity_gain"] = c.synth.reactivity_gain;
    s["valence_jitter_sd"] = c.synth.valence_jitter_sd;
    s["coder_jitter_sd"] = c.synth.coder_jitter_sd;
    s["prompt_shift"] = c.synth.prompt_shift.values;
    s["narrative_shift"] = c.synth.narrative_shift.values;
    s["unconditioned_shift"] = c.synth.unconditioned_shift.values;
    s["refusal_trigger"] = c.synth.refusal_trigger;
    j["synthetic"] = s;
    c.relevant_json = j.dump();
}

CliConfig load_cli_config(const std::string& path) {
    CliConfig c;
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config file " + path);
        std::ostringstream buf;
        buf << in.rdbuf();
        json j = json::parse(buf.str(), nullptr, false);
        if (j.is_discarded()) throw ParseError("config file " + path + " is not valid JSON");

        c.participants = j.value("participants", c.participants);
        c.hexaco_key_path = j.value("hexaco_key", c.hexaco_key_path);
        c.beyond_key_path = j.value("beyond_key", c.beyond_key_path);
        c.protocol_path = j.value("protocol", c.protocol_path);
        c.rubric_path = j.value("rubric", c.rubric_path);
        c.store_dir = j.value("store_dir", c.store_dir);
        c.log_file = j.value("log_file", c.log_file);
        c.concurrency = j.value("concurrency", c.concurrency);

        c.stage.generator_id = j.value("generator_id", c.stage.generator_id);
        c.stage.scorer_id = j.value("scorer_id", c.stage.scorer_id);
        if (j.contains("scoring_mode"))
            c.stage.mode = scoring_mode_from_name(j["scoring_mode"].get<std::string>());
        c.stage.generation_temperature =
            j.value("generation_temperature", c.stage.generation_temperature);
        c.stage.scoring_temperature =
            j.value("scoring_temperature", c.stage.scoring_temperature);
        c.stage.master_seed = j.value("master_seed", c.stage.master_seed);
        c.stage.max_section_failures =
            j.value("max_section_failures", c.stage.max_section_failures);
        c.stage.max_output = j.value("max_output", c.stage.max_output);

        if (j.contains("retry")) {
            const auto& r = j["retry"];
            c.retry.max_attempts = r.value("max_attempts", c.retry.max_attempts);
            c.retry.base_delay_ms = r.value("base_delay_ms", c.retry.base_delay_ms);
            c.retry.max_delay_ms = r.value("max_delay_ms", c.retry.max_delay_ms);
            c.retry.jitter = r.value("jitter", c.retry.jitter);
        }
        if (j.contains("rate_limit")) {
            const auto& r = j["rate_limit"];
            c.rate_limit.max_in_flight = r.value("max_in_flight", c.rate_limit.max_in_flight);
            c.rate_limit.requests_per_minute =
                r.value("requests_per_minute", c.rate_limit.requests_per_minute);
        }
        if (j.contains("synthetic")) {
            const auto& s = j["synthetic"];
            c.synth = SyntheticPersonaConfig::defaults(s.value("seed", uint64_t{0}));
            c.synth.noise_sd = s.value("noise_sd", c.synth.noise_sd);
            c.synth.c_scale = s.value("c_scale", c.synth.c_scale);
            c.synth.reactivity_gain = s.value("reactivity_gain", c.synth.reactivity_gain);
            c.synth.valence_jitter_sd = s.value("valence_jitter_sd", c.synth.valence_jitter_sd);
            c.synth.coder_jitter_sd = s.value("coder_jitter_sd", c.synth.coder_jitter_sd);
            if (s.contains("prompt_shift"))
                c.synth.prompt_shift = profile_from_json(s["prompt_shift"], "prompt_shift");
            if (s.contains("narrative_shift"))
                c.synth.narrative_shift =
                    profile_from_json(s["narrative_shift"], "narrative_shift");
            if (s.contains("unconditioned_shift"))
                c.synth.unconditioned_shift =
                    profile_from_json(s["unconditioned_shift"], "unconditioned_shift");
            c.synth.refusal_trigger = s.value("refusal_trigger", c.synth.refusal_trigger);
        }
        if (j.contains("remote")) {
            for (const auto& r : j["remote"]) {
                RemoteEndpointConfig e;
                e.base_url = r.at("base_url").get<std::string>();
                e.path = r.value("path", e.path);
                e.api_key_env = r.value("api_key_env", e.api_key_env);
                e.timeout_seconds = r.value("timeout_seconds", e.timeout_seconds);
                e.name = r.value("name", e.name);
                if (r.contains("model_prefixes"))
                    for (const auto& p : r["model_prefixes"])
                        e.model_prefixes.push_back(p.get<std::string>());
                c.remotes.push_back(std::move(e));
            }
        }
        if (j.contains("annotators")) {
            c.annotators.clear();
            for (const auto& a : j["annotators"]) c.annotators.push_back(a.get<std::string>());
        }
        c.matcher_id = j.value("matcher_id", c.matcher_id);
        c.stripper_id = j.value("stripper_id", c.stripper_id);
        c.verifier_id = j.value("verifier_id", c.verifier_id);
    }
    c.synth.validate();
    build_relevant_json(c);
    return c;
}

std::unique_ptr<Gateway> make_gateway(const CliConfig& c, const std::string& config_hash) {
    auto gw = std::make_unique<Gateway>(c.retry);
    gw->register_provider(std::make_shared<SyntheticModel>(c.synth), c.rate_limit);
    for (const auto& r : c.remotes)
        gw->register_provider(std::make_shared<OpenAiCompatProvider>(r), c.rate_limit);
    if (!c.log_file.empty()) gw->set_log(c.log_file, config_hash);
    return gw;
}

RunManifest make_manifest(const CliConfig& c, const std::string& run_id, RunStage stage,
                          bool with_scorer) {
    RunManifest m;
    m.run_id = run_id;
    m.stage = stage;
    m.generator_id = c.stage.generator_id;
    if (with_scorer) m.scorer_id = c.stage.scorer_id;
    m.seed = c.stage.master_seed;
    m.config_hash = RunManifest::compute_config_hash(m, c.relevant_json);
    return m;
}

std::vector<ParticipantRecord> load_records(const CliConfig& c, const ScoringKey& hexaco_key) {
    LoadReport report = load_participants(c.participants, hexaco_key);
    for (const auto& w : report.warnings) say(LogLevel::warn, w);
    say(LogLevel::info, "loaded " + std::to_string(report.records.size()) +
                            " participants from " + c.participants);
    return std::move(report.records);
}

void print_batch(const std::string& what, const BatchResult& r) {
    std::cout << what << ": completed " << r.completed << ", skipped " << r.skipped
              << ", refusals " << r.refusals << ", failures " << r.failures << "\n";
    for (const auto& d : r.failure_details) say(LogLevel::warn, what + " failure: " + d);
}

std::map<std::string, PersonaPrompt> read_prompt_run(const ArtifactStore& store,
                                                     const std::string& run_id,
                                                     int* refusals) {
    std::map<std::string, PersonaPrompt> out;
    for (const auto& pid : store.list_participants(run_id)) {
        auto doc = store.read(run_id, pid);
        if (!doc) continue;
        PersonaPrompt p = persona_prompt_from_json(*doc, run_id + "/" + pid);
        if (p.refusal) {
            if (refusals) ++*refusals;
            continue;
        }
        out.emplace(pid, std::move(p));
    }
    return out;
}

std::vector<LsiNarrative> read_narrative_run(const ArtifactStore& store,
                                             const std::string& run_id) {
    std::vector<LsiNarrative> out;
    for (const auto& pid : store.list_participants(run_id)) {
        auto doc = store.read(run_id, pid);
        if (!doc) continue;
        out.push_back(narrative_from_json(*doc, run_id + "/" + pid));
    }
    return out;
}

std::map<std::string, RecoveredScores> read_score_run(const ArtifactStore& store,
                                                      const std::string& run_id,
                                                      const ScoringKey& hexaco_key,
                                                      const ScoringKey& beyond_key,
                                                      int* refusals) {
    std::map<std::string, RecoveredScores> out;
    for (const auto& pid : store.list_participants(run_id)) {
        auto doc = store.read(run_id, pid);
        if (!doc) continue;
        RecoveredScores s = recovered_from_json(*doc, hexaco_key, beyond_key,
                                                run_id + "/" + pid);
        if (s.refusal) {
            if (refusals) ++*refusals;
            continue;
        }
        out.emplace(pid, std::move(s));
    }
    return out;
}

std::vector<std::pair<int, std::string>> all_item_stems(const ScoringKey& hexaco_key,
                                                        const ScoringKey& beyond_key) {
    // Supplementary items are offset by 100 so flags stay unambiguous.
    std::vector<std::pair<int, std::string>> stems;
    for (const auto& e : hexaco_key.items) stems.emplace_back(e.index, e.stem);
    for (const auto& e : beyond_key.items) stems.emplace_back(e.index + 100, e.stem);
    return stems;
}

json codings_to_json(const CodingReport& report, const std::string& rubric_id,
                     const std::vector<std::string>& annotators) {
    json j;
    j["rubric_id"] = rubric_id;
    j["annotators"] = annotators;
    json arr = json::array();
    for (const auto& c : report.codings) {
        json e;
        e["unit_ref"] = c.unit_ref;
        e["annotator_id"] = c.annotator_id;
        e["ratings"] = c.ratings;
        arr.push_back(std::move(e));
    }
    j["codings"] = arr;
    json unc = json::array();
    for (const auto& [unit, annot] : report.uncoded) unc.push_back({unit, annot});
    j["uncoded"] = unc;
    j["warnings"] = report.warnings;
    return j;
}

std::vector<FeatureCoding> codings_from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open codings file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    json j = json::parse(buf.str(), nullptr, false);
    if (j.is_discarded()) throw ParseError("codings file " + path + " is not valid JSON");
    std::vector<FeatureCoding> out;
    try {
        for (const auto& e : j.at("codings")) {
            FeatureCoding c;
            c.unit_ref = e.at("unit_ref").get<std::string>();
            c.annotator_id = e.at("annotator_id").get<std::string>();
            for (const auto& [name, v] : e.at("ratings").items())
                c.ratings[name] = v.get<int>();
            out.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw SchemaError("codings file " + path + " malformed: " + e.what());
    }
    return out;
}

std::map<std::string, DomainProfile> truth_domains(
    const std::vector<ParticipantRecord>& records) {
    std::map<std::string, DomainProfile> out;
    for (const auto& r : records) out[r.participant_id] = r.domain_means;
    return out;
}

std::map<std::string, SubscaleProfile> truth_subscales(
    const std::vector<ParticipantRecord>& records) {
    std::map<std::string, SubscaleProfile> out;
    for (const auto& r : records) out[r.participant_id] = r.subscale_means;
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Round-trip personality evaluation pipeline"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "out";
    uint64_t seed_override = 0;
    std::string log_level_name = "info";
    app.add_option("--config", config_path, "JSON configuration file");
    app.add_option("--out", out_dir, "output directory for reports and exports");
    auto* seed_opt = app.add_option("--seed", seed_override, "override the master seed");
    app.add_option("--log-level", log_level_name, "debug, info, warn, or error")
        ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

    auto config = [&]() {
        if (log_level_name == "debug") g_log_level = LogLevel::debug;
        else if (log_level_name == "warn") g_log_level = LogLevel::warn;
        else if (log_level_name == "error") g_log_level = LogLevel::error;
        CliConfig c = load_cli_config(config_path);
        if (seed_opt->count()) {
            c.stage.master_seed = seed_override;
            build_relevant_json(c);
        }
        return c;
    };

    // ---- corpus ------------------------------------------------------------
    auto* corpus = app.add_subcommand("corpus", "generate a synthetic ground-truth corpus");
    int corpus_n = 100;
    double corpus_spread = 0.8;
    std::string corpus_out = "data/participants.jsonl";
    corpus->add_option("--n", corpus_n, "number of participants");
    corpus->add_option("--spread", corpus_spread, "SD of trait means around 3");
    corpus->add_option("--file", corpus_out, "output JSONL path");
    corpus->callback([&] {
        CliConfig c = config();
        ScoringKey key = ScoringKey::load(c.hexaco_key_path);
        CorpusOptions opts;
        opts.n = corpus_n;
        opts.domain_spread = corpus_spread;
        opts.subscale_spread = corpus_spread;
        opts.seed = c.stage.master_seed;
        std::vector<ParticipantRecord> records = synth_make_corpus(opts, key);
        std::ofstream out(corpus_out, std::ios::binary);
        if (!out) throw IoError("cannot write " + corpus_out);
        for (const auto& r : records) out << participant_to_json_line(r) << "\n";
        std::cout << "wrote " << records.size() << " participants to " << corpus_out << "\n";
    });

    // ---- pipeline ----------------------------------------------------------
    auto* pipeline = app.add_subcommand("pipeline", "run generation and scoring stages");
    pipeline->require_subcommand(1);
    std::string run_id, prompt_run, narrative_run;

    auto* prompts = pipeline->add_subcommand("prompts", "stage 1: persona prompts");
    prompts->add_option("--run-id", run_id)->required();
    prompts->callback([&] {
        CliConfig c = config();
        ScoringKey key = ScoringKey::load(c.hexaco_key_path);
        auto records = load_records(c, key);
        RunManifest m = make_manifest(c, run_id, RunStage::prompt, false);
        ArtifactStore store(c.store_dir);
        store.open_run(m);
        auto gw = make_gateway(c, m.config_hash);
        print_batch("prompts", run_prompt_batch(*gw, records, c.stage, store, m, c.concurrency));
    });

    auto* narratives = pipeline->add_subcommand("narratives", "stage 2: interview narratives");
    narratives->add_option("--run-id", run_id)->required();
    narratives->add_option("--prompt-run", prompt_run, "stage-1 run id")->required();
    narratives->callback([&] {
        CliConfig c = config();
        ScoringKey key = ScoringKey::load(c.hexaco_key_path);
        auto records = load_records(c, key);
        LsiProtocol protocol = LsiProtocol::load(c.protocol_path);
        RunManifest m = make_manifest(c, run_id, RunStage::narrative, false);
        ArtifactStore store(c.store_dir);
        store.open_run(m);
        auto gw = make_gateway(c, m.config_hash);
        print_batch("narratives", run_narrative_batch(*gw, records, protocol, c.stage, store,
                                                      prompt_run, m, c.concurrency));
    });

    auto* score = pipeline->add_subcommand("score", "stage 3: blind scoring");
    score->add_option("--run-id", run_id)->required();
    score->add_option("--narrative-run", narrative_run, "stage-2 run id")->required();
    score->callback([&] {
        CliConfig c = config();
        ScoringKey hexaco_key = ScoringKey::load(c.hexaco_key_path);
        ScoringKey beyond_key = ScoringKey::load(c.beyond_key_path);
        auto records = load_records(c, hexaco_key);
        RunManifest m = make_manifest(c, run_id, RunStage::score, true);
        ArtifactStore store(c.store_dir);
        store.open_run(m);
        auto gw = make_gateway(c, m.config_hash);
        print_batch("score", run_score_batch(*gw, records, hexaco_key, beyond_key, c.stage,
                                             store, narrative_run, m, c.concurrency));
    });

    auto* ceiling = pipeline->add_subcommand("ceiling", "score persona prompts directly");
    ceiling->add_option("--run-id", run_id)->required();
    ceiling->add_option("--prompt-run", prompt_run, "stage-1 run id")->required();
    ceiling->callback([&] {
        CliConfig c = config();
        ScoringKey hexaco_key = ScoringKey::load(c.hexaco_key_path);
        ScoringKey beyond_key = ScoringKey::load(c.beyond_key_path);
        auto records = load_records(c, hexaco_key);
        RunManifest m = make_manifest(c, run_id, RunStage::ceiling, true);
        ArtifactStore store(c.store_dir);
        store.open_run(m);
        auto gw = make_gateway(c, m.config_hash);
        print_batch("ceiling", run_ceiling_batch(*gw, records, hexaco_key, beyond_key, c.stage,
                                                 store, prompt_run, m, c.concurrency));
    });

    auto* uncond = pipeline->add_subcommand("unconditioned", "persona-free baselines");
    std::string uncond_mode = "entity";
    int uncond_n = 10;
    uncond->add_option("--run-id", run_id)->required();
    uncond->add_option("--mode", uncond_mode, "entity or self-report")
        ->check(CLI::IsMember({"entity", "self-report"}));
    uncond->add_option("--n", uncond_n, "number of baseline runs");
    uncond->callback([&] {
        CliConfig c = config();
        ScoringKey hexaco_key = ScoringKey::load(c.hexaco_key_path);
        ScoringKey beyond_key = ScoringKey::load(c.beyond_key_path);
        LsiProtocol protocol = LsiProtocol::load(c.protocol_path);
        RunManifest m = make_manifest(c, run_id, RunStage::unconditioned, true);
        ArtifactStore store(c.store_dir);
        store.open_run(m);
        auto gw = make_gateway(c, m.config_hash);
        UnconditionedMode mode = uncond_mode == "entity" ? UnconditionedMode::entity_narrative
                                                         : UnconditionedMode::self_report;
        auto runs = run_unconditioned(*gw, hexaco_key, beyond_key, c.stage, uncond_n, mode,
                                      &protocol);
        int refusals = 0;
        for (const auto& r : runs) {
            if (r.refusal) ++refusals;
            store.store(m, r.participant_id, recovered_to_json(r));
        }
        std::cout << "unconditioned: completed " << runs.size() << ", refusals " << refusals
                  << "\n";
    });

    // ---- validate ----------------------------------------------------------
    auto* validate = app.add_subcommand("validate", "leakage, matching, and bias checks");
    validate->require_subcommand(1);

    auto* leakage = validate->add_subcommand("leakage", "scan narratives for item echoes");
    double leakage_threshold = 0.7;
    leakage->add_option("--narrative-run", narrative_run)->required();
    leakage->add_option("--threshold", leakage_threshold, "Jaccard flag threshold");
    leakage->callback([&] {
        CliConfig c = config();
        ScoringKey hexaco_key = ScoringKey::load(c.hexaco_key_path);
        ScoringKey beyond_key = ScoringKey::load(c.beyond_key_path);
        ArtifactStore store(c.store_dir);
        auto narratives = read_narrative_run(store, narrative_run);
        ScanReport report =
            scan_leakage(narratives, all_item_stems(hexaco_key, beyond_key), leakage_threshold);
        ReportBundle bundle;
        bundle.leakage = report;
        bundle.leakage_threshold = leakage_threshold;
        bundle.footnotes.push_back("item indexes above 100 refer to the supplementary "
                                   "instrument (index minus 100)");
        std::cout << render_text(bundle);
    });

    auto* match = validate->add_subcommand("match", "masked-profile lineup matching");
    int lineups_per = 3, lineup_options = 5;
    match->add_option("--prompt-run", prompt_run)->required();
    match->add_option("--narrative-run", narrative_run)->required();
    match->add_option("--lineups-per", lineups_per, "lineups per participant");
    match->add_option("--options", lineup_options, "choices per lineup");
    match->callback([&] {
        CliConfig c = config();
        ArtifactStore store(c.store_dir);
        int prompt_refusals = 0;
        auto prompt_map = read_prompt_run(store, prompt_run, &prompt_refusals);
        auto narratives = read_narrative_run(store, narrative_run);
        std::map<std::string, std::string> texts;
        for (const auto& n : narratives) texts[n.participant_id] = n.full_text();

        auto gw = make_gateway(c, hash_hex(fnv1a64(c.relevant_json)));
        int excluded = prompt_refusals;
        std::vector<std::pair<std::string, std::string>> masked;
        for (const auto& [pid, prompt] : prompt_map) {
            if (!texts.count(pid)) {
                say(LogLevel::warn, "no narrative for " + pid + "; skipped from matching");
                ++excluded;
                continue;
            }
            MaskedPrompt mp = strip_biography(*gw, prompt, c.stripper_id, c.verifier_id,
                                              c.stage);
            for (const auto& w : mp.warnings) say(LogLevel::warn, w);
            if (mp.excluded) {
                say(LogLevel::warn, "excluded " + pid + " from matching: " + mp.reason);
                ++excluded;
                continue;
            }
            masked.emplace_back(pid, *mp.masked_text);
        }
        auto lineups = build_lineups(masked, lineups_per, lineup_options, c.stage.master_seed);
        MatchResult result = evaluate_matcher(*gw, lineups, texts, c.matcher_id, c.stage);
        ReportBundle bundle;
        bundle.matching.push_back({c.matcher_id, result, excluded});
        std::cout << render_text(bundle);
    });

    auto* bias = validate->add_subcommand("bias", "additive bias decomposition");
    std::string ceiling_run, score_run, uncond_run;
    bias->add_option("--ceiling-run", ceiling_run, "prompt-scoring run id")->required();
    bias->add_option("--score-run", score_run, "narrative-scoring run id")->required();
    bias->add_option("--uncond-run", uncond_run, "unconditioned baseline run id")->required();
    bias->callback([&] {
        CliConfig c = config();
        ScoringKey hexaco_key = ScoringKey::load(c.hexaco_key_path);
        ScoringKey beyond_key = ScoringKey::load(c.beyond_key_path);
        auto records = load_records(c, hexaco_key);
        ArtifactStore store(c.store_dir);
        auto truth = truth_domains(records);

        int ceiling_refusals = 0, score_refusals = 0, uncond_refusals = 0;
        auto ceiling_scores =
            read_score_run(store, ceiling_run, hexaco_key, beyond_key, &ceiling_refusals);
        auto narrative_scores =
            read_score_run(store, score_run, hexaco_key, beyond_key, &score_refusals);
        auto uncond_scores =
            read_score_run(store, uncond_run, hexaco_key, beyond_key, &uncond_refusals);
        if (uncond_scores.empty())
            throw CoverageError("unconditioned run " + uncond_run +
                                " holds no usable baselines");

        // Restrict all three maps to the participants present everywhere.
        std::map<std::string, DomainProfile> t2, p2, n2;
        for (const auto& [pid, profile] : truth) {
            auto pi = ceiling_scores.find(pid);
            auto ni = narrative_scores.find(pid);
            if (pi == ceiling_scores.end() || ni == narrative_scores.end()) {
                say(LogLevel::warn, "participant " + pid +
                                        " missing from a scoring run; dropped from bias");
                continue;
            }
            t2[pid] = profile;
            p2[pid] = pi->second.domain_means;
            n2[pid] = ni->second.domain_means;
        }
        DomainProfile uncond_mean;
        for (const auto& [pid, s] : uncond_scores)
            for (int d = 0; d < kNumDomains; ++d) uncond_mean.at(d) += s.domain_means.at(d);
        for (int d = 0; d < kNumDomains; ++d)
            uncond_mean.at(d) /= static_cast<double>(uncond_scores.size());

        RunManifest sm = store.read_manifest(score_run);
        BiasReport report = decompose_bias(t2, p2, n2, uncond_mean, sm.generator_id,
                                           sm.scorer_id ? *sm.scorer_id : "");
        ReportBundle bundle;
        bundle.bias = report;
        bundle.footnotes.push_back(
            "refusals dropped: ceiling " + std::to_string(ceiling_refusals) + ", narrative " +
            std::to_string(score_refusals) + ", unconditioned " +
            std::to_string(uncond_refusals));
        std::cout << render_text(bundle);
    });

    // ---- content -----------------------------------------------------------
    auto* content = app.add_subcommand("content", "feature coding and content tables");
    content->require_subcommand(1);

    auto* code = content->add_subcommand("code", "code narrative sections on the rubric");
    std::string codings_out = "codings.json";
    code->add_option("--narrative-run", narrative_run)->required();
    code->add_option("--file", codings_out, "output JSON path");
    code->callback([&] {
        CliConfig c = config();
        FeatureRubric rubric = FeatureRubric::load(c.rubric_path);
        ArtifactStore store(c.store_dir);
        auto narratives = read_narrative_run(store, narrative_run);
        std::vector<std::pair<std::string, std::string>> units;
        for (const auto& n : narratives)
            for (size_t k = 0; k < n.sections.size(); ++k)
                units.emplace_back(narrative_unit_ref(n.participant_id, static_cast<int>(k) + 1,
                                                      n.sections[k].prompt_id),
                                   n.sections[k].text);
        auto gw = make_gateway(c, hash_hex(fnv1a64(c.relevant_json)));
        CodingReport report = code_units(*gw, units, rubric, c.annotators, c.stage);
        for (const auto& w : report.warnings) say(LogLevel::warn, w);
        std::ofstream out(codings_out, std::ios::binary);
        if (!out) throw IoError("cannot write " + codings_out);
        out << codings_to_json(report, rubric.rubric_id, c.annotators).dump(2) << "\n";
        std::cout << "coded " << report.codings.size() << " unit-annotator pairs ("
                  << report.uncoded.size() << " uncoded) to " << codings_out << "\n";
    });

    auto* tables = content->add_subcommand("tables", "reliability and validity tables");
    std::string codings_file = "codings.json";
    std::string conversation_codings_file;
    tables->add_option("--codings", codings_file, "narrative codings JSON");
    tables->add_option("--conversation-codings", conversation_codings_file,
                       "optional conversation codings JSON");
    tables->callback([&] {
        CliConfig c = config();
        ScoringKey hexaco_key = ScoringKey::load(c.hexaco_key_path);
        FeatureRubric rubric = FeatureRubric::load(c.rubric_path);
        auto records = load_records(c, hexaco_key);
        auto truth = truth_domains(records);

        auto codings = codings_from_file(codings_file);
        auto summaries = summarize_codings(codings, FeatureContext::narrative, rubric);

        ReportBundle bundle;
        bundle.config_hash = hash_hex(fnv1a64(c.relevant_json));
        bundle.reliability = annotator_reliability(codings);
        bundle.convergent = convergent_table(summaries, truth);
        bundle.reactivity =
            reactivity_analysis(section_feature_series(codings, "emotional_valence"), truth);
        if (!conversation_codings_file.empty()) {
            auto conv = summarize_codings(codings_from_file(conversation_codings_file),
                                          FeatureContext::conversation, rubric);
            bundle.cross_context = cross_context_table(summaries, conv);
        }
        if (c.annotators.size() == 2)
            bundle.footnotes.push_back(
                "only two annotators configured; reliability is a single pair");
        EmittedReport paths = emit(bundle, out_dir);
        std::cout << render_text(bundle);
        std::cout << "wrote " << paths.text_path << " and " << paths.csv_path << "\n";
    });

    // ---- report ------------------------------------------------------------
    auto* report_cmd = app.add_subcommand("report", "assemble the recovery report");
    std::string rpt_score_run, rpt_ceiling_run, rpt_uncond_run;
    int resamples = stats::kDefaultBootstrapResamples;
    report_cmd->add_option("--score-run", rpt_score_run)->required();
    report_cmd->add_option("--ceiling-run", rpt_ceiling_run, "optional prompt-scoring run");
    report_cmd->add_option("--uncond-run", rpt_uncond_run, "optional unconditioned run");
    report_cmd->add_option("--resamples", resamples, "bootstrap resample count");
    report_cmd->callback([&] {
        CliConfig c = config();
        ScoringKey hexaco_key = ScoringKey::load(c.hexaco_key_path);
        ScoringKey beyond_key = ScoringKey::load(c.beyond_key_path);
        auto records = load_records(c, hexaco_key);
        ArtifactStore store(c.store_dir);
        auto truth = truth_domains(records);
        auto truth_subs = truth_subscales(records);

        int refusals = 0;
        auto recovered = read_score_run(store, rpt_score_run, hexaco_key, beyond_key, &refusals);
        std::map<std::string, DomainProfile> rec_domains;
        std::map<std::string, SubscaleProfile> rec_subs;
        for (const auto& [pid, s] : recovered) {
            rec_domains[pid] = s.domain_means;
            if (s.subscale_means) rec_subs[pid] = *s.subscale_means;
        }

        RunManifest sm = store.read_manifest(rpt_score_run);
        RecoveryOptions opts;
        opts.bootstrap_resamples = resamples;
        opts.bootstrap_seed = c.stage.master_seed;
        opts.refusals = refusals;
        RecoveryRow row = recovery_report(truth, rec_domains, sm.generator_id,
                                          sm.scorer_id ? *sm.scorer_id : "", opts);

        ReportBundle bundle;
        bundle.config_hash = sm.config_hash;
        bundle.recovery = combine_recovery_rows({row}, sm.config_hash);
        if (rec_subs.size() >= 10) bundle.beyond = beyond_hexaco_report(truth_subs, rec_subs);

        if (!rpt_ceiling_run.empty() && !rpt_uncond_run.empty()) {
            int cr = 0, ur = 0;
            auto ceiling_scores =
                read_score_run(store, rpt_ceiling_run, hexaco_key, beyond_key, &cr);
            auto uncond_scores =
                read_score_run(store, rpt_uncond_run, hexaco_key, beyond_key, &ur);
            if (!uncond_scores.empty()) {
                std::map<std::string, DomainProfile> t2, p2, n2;
                for (const auto& [pid, profile] : truth) {
                    auto pi = ceiling_scores.find(pid);
                    auto ni = rec_domains.find(pid);
                    if (pi == ceiling_scores.end() || ni == rec_domains.end()) continue;
                    t2[pid] = profile;
                    p2[pid] = pi->second.domain_means;
                    n2[pid] = ni->second;
                }
                DomainProfile uncond_mean;
                for (const auto& [pid, s] : uncond_scores)
                    for (int d = 0; d < kNumDomains; ++d)
                        uncond_mean.at(d) += s.domain_means.at(d);
                for (int d = 0; d < kNumDomains; ++d)
                    uncond_mean.at(d) /= static_cast<double>(uncond_scores.size());
                bundle.bias = decompose_bias(t2, p2, n2, uncond_mean, sm.generator_id,
                                             sm.scorer_id ? *sm.scorer_id : "");
            }
        }

        bundle.footnotes.push_back("bootstrap: " + std::to_string(resamples) +
                                   " resamples, seed " +
                                   std::to_string(c.stage.master_seed));
        bundle.footnotes.push_back("subscale significance after a 15-test correction "
                                   "(6 domains + 9 subscales)");
        bundle.footnotes.push_back("run config hash " + sm.config_hash);
        EmittedReport paths = emit(bundle, out_dir);
        std::cout << render_text(bundle);
        std::cout << "wrote " << paths.text_path << " and " << paths.csv_path << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::cerr << "psypipe: error: category=" << e.category() << ": " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "psypipe: error: category=internal: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
