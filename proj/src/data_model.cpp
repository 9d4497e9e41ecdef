#include "psypipe/data_model.hpp"

#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "psypipe/errors.hpp"
#include "psypipe/hashing.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace psypipe {

namespace {

std::string read_file_or_throw(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_or_throw(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write file: " + path);
    out << content;
    if (!out) throw IoError("write failed: " + path);
}

json parse_json_or_throw(const std::string& text, const std::string& origin) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ParseError("invalid JSON in " + origin);
    return j;
}

}  // namespace

ItemResponses ParticipantRecord::item_responses() const {
    ItemResponses out;
    for (int i = 0; i < 60; ++i) out[i + 1] = hexaco_items[static_cast<size_t>(i)];
    return out;
}

std::string LsiNarrative::full_text() const {
    std::string out;
    for (size_t i = 0; i < sections.size(); ++i) {
        if (i > 0) out += "\n\n";
        out += sections[i].text;
    }
    return out;
}

void LsiNarrative::validate() const {
    if (static_cast<int>(sections.size()) != kLsiSectionCount) {
        throw SchemaError("narrative for " + participant_id + " has " +
                          std::to_string(sections.size()) + " sections, expected " +
                          std::to_string(kLsiSectionCount));
    }
    for (const auto& s : sections) {
        if (s.prompt_id.empty())
            throw SchemaError("narrative for " + participant_id + " has a section without prompt_id");
        if (s.text.empty())
            throw SchemaError("narrative for " + participant_id + " has empty text for section " +
                              s.prompt_id);
    }
}

std::string ConversationTranscript::side_text(const std::string& speaker) const {
    std::string out;
    for (const auto& t : turns) {
        if (t.speaker != speaker) continue;
        if (!out.empty()) out += "\n";
        out += t.text;
    }
    return out;
}

void ConversationTranscript::validate() const {
    for (const auto& p : participants) {
        bool found = false;
        for (const auto& t : turns)
            if (t.speaker == p) { found = true; break; }
        if (!found)
            throw SchemaError("transcript " + conversation_id + " has no turns for speaker " + p);
    }
}

const char* run_stage_name(RunStage s) {
    switch (s) {
        case RunStage::prompt: return "prompt";
        case RunStage::narrative: return "narrative";
        case RunStage::score: return "score";
        case RunStage::ceiling: return "ceiling";
        case RunStage::unconditioned: return "unconditioned";
    }
    return "unknown";
}

RunStage run_stage_from_name(const std::string& name) {
    for (RunStage s : {RunStage::prompt, RunStage::narrative, RunStage::score,
                       RunStage::ceiling, RunStage::unconditioned}) {
        if (name == run_stage_name(s)) return s;
    }
    throw SchemaError("unknown run stage: " + name);
}

std::string RunManifest::compute_config_hash(const RunManifest& m,
                                             const std::string& extra_config_json) {
    SeedChain c(fnv1a64("psypipe.run.v1"));
    c.mix(m.run_id).mix(run_stage_name(m.stage)).mix(m.generator_id);
    c.mix(m.scorer_id ? *m.scorer_id : std::string("-"));
    c.mix(m.seed).mix(extra_config_json);
    return hash_hex(c.value());
}

namespace {

ParticipantRecord parse_participant(const json& j, const ScoringKey& hexaco_key,
                                    const std::string& where,
                                    std::vector<std::string>* warnings) {
    if (!j.is_object()) throw ParseError(where + ": record is not an object");
    ParticipantRecord rec;

    if (!j.contains("participant_id") || !j["participant_id"].is_string())
        throw ParseError(where + ": missing or non-string field participant_id");
    rec.participant_id = j["participant_id"].get<std::string>();
    const std::string who = where + " (participant " + rec.participant_id + ")";

    if (!j.contains("hexaco_items") || !j["hexaco_items"].is_array())
        throw ParseError(who + ": missing or non-array field hexaco_items");
    const auto& items = j["hexaco_items"];
    if (items.size() != 60)
        throw SchemaError(who + ": hexaco_items has " + std::to_string(items.size()) +
                          " entries, expected 60");
    for (size_t i = 0; i < 60; ++i) {
        if (!items[i].is_number_integer())
            throw ParseError(who + ": hexaco_items[" + std::to_string(i + 1) +
                             "] is not an integer");
        int v = items[i].get<int>();
        if (v < 1 || v > 5)
            throw RangeError(who + ": hexaco_items[" + std::to_string(i + 1) + "] = " +
                             std::to_string(v) + " outside {1..5}");
        rec.hexaco_items[i] = v;
    }

    if (!j.contains("subscale_means") || !j["subscale_means"].is_object())
        throw ParseError(who + ": missing or non-object field subscale_means");
    const auto& subs = j["subscale_means"];
    for (int s = 0; s < kNumSubscales; ++s) {
        const char* id = kSubscaleIds[static_cast<size_t>(s)];
        if (!subs.contains(id) || !subs[id].is_number())
            throw ParseError(who + ": subscale_means missing numeric field " + std::string(id));
        rec.subscale_means.values[static_cast<size_t>(s)] = subs[id].get<double>();
    }

    // Recomputed means are authoritative; stored values only trigger warnings.
    rec.domain_means = aggregate_hexaco(rec.item_responses(), hexaco_key);
    if (j.contains("domain_means")) {
        const auto& dm = j["domain_means"];
        if (!dm.is_object())
            throw ParseError(who + ": domain_means is not an object");
        DomainProfile stored;
        for (int d = 0; d < kNumDomains; ++d) {
            const char* code = kDomainCodes[static_cast<size_t>(d)];
            if (!dm.contains(code) || !dm[code].is_number())
                throw ParseError(who + ": domain_means missing numeric field " + std::string(code));
            stored.values[static_cast<size_t>(d)] = dm[code].get<double>();
        }
        rec.stored_domain_means = stored;
        for (int d = 0; d < kNumDomains; ++d) {
            double diff = std::fabs(stored.at(d) - rec.domain_means.at(d));
            if (diff > 1e-9 && warnings) {
                char buf[160];
                std::snprintf(buf, sizeof(buf),
                              "%s: stored %s mean %.6f disagrees with recomputed %.6f",
                              who.c_str(), kDomainCodes[static_cast<size_t>(d)], stored.at(d),
                              rec.domain_means.at(d));
                warnings->push_back(buf);
            }
        }
    }

    if (j.contains("bio_facts")) {
        if (!j["bio_facts"].is_array())
            throw ParseError(who + ": bio_facts is not an array");
        for (const auto& f : j["bio_facts"]) {
            if (!f.is_string()) throw ParseError(who + ": bio_facts entry is not a string");
            rec.bio_facts.push_back(f.get<std::string>());
        }
    }
    if (j.contains("appearance_note")) {
        if (!j["appearance_note"].is_string())
            throw ParseError(who + ": appearance_note is not a string");
        rec.appearance_note = j["appearance_note"].get<std::string>();
    }
    if (j.contains("conversation_refs")) {
        if (!j["conversation_refs"].is_array())
            throw ParseError(who + ": conversation_refs is not an array");
        for (const auto& r : j["conversation_refs"]) {
            if (!r.is_string())
                throw ParseError(who + ": conversation_refs entry is not a string");
            rec.conversation_refs.push_back(r.get<std::string>());
        }
    }
    return rec;
}

}  // namespace

LoadReport parse_participants(const std::string& content, const ScoringKey& hexaco_key,
                              const std::string& origin) {
    LoadReport report;
    std::istringstream in(content);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        // Tolerate CRLF input and blank separator lines.
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) throw ParseError(where + ": invalid JSON record");
        report.records.push_back(parse_participant(j, hexaco_key, where, &report.warnings));
    }
    return report;
}

LoadReport load_participants(const std::string& path, const ScoringKey& hexaco_key) {
    return parse_participants(read_file_or_throw(path), hexaco_key, path);
}

std::string participant_to_json_line(const ParticipantRecord& rec) {
    json j;
    j["participant_id"] = rec.participant_id;
    j["hexaco_items"] = rec.hexaco_items;
    json subs = json::object();
    for (int s = 0; s < kNumSubscales; ++s)
        subs[kSubscaleIds[static_cast<size_t>(s)]] = rec.subscale_means.values[static_cast<size_t>(s)];
    j["subscale_means"] = subs;
    json dm = json::object();
    for (int d = 0; d < kNumDomains; ++d)
        dm[kDomainCodes[static_cast<size_t>(d)]] = rec.domain_means.at(d);
    j["domain_means"] = dm;
    if (!rec.bio_facts.empty()) j["bio_facts"] = rec.bio_facts;
    if (rec.appearance_note) j["appearance_note"] = *rec.appearance_note;
    if (!rec.conversation_refs.empty()) j["conversation_refs"] = rec.conversation_refs;
    return j.dump();
}

std::string narrative_to_json(const LsiNarrative& n) {
    json j;
    j["participant_id"] = n.participant_id;
    j["generator_id"] = n.generator_id;
    j["temperature"] = n.temperature;
    j["created_at"] = n.created_at;
    json secs = json::array();
    for (const auto& s : n.sections) secs.push_back({{"prompt_id", s.prompt_id}, {"text", s.text}});
    j["sections"] = secs;
    return j.dump(2);
}

LsiNarrative narrative_from_json(const std::string& text, const std::string& origin) {
    json j = parse_json_or_throw(text, origin);
    LsiNarrative n;
    try {
        n.participant_id = j.at("participant_id").get<std::string>();
        n.generator_id = j.at("generator_id").get<std::string>();
        n.temperature = j.at("temperature").get<double>();
        if (j.contains("created_at")) n.created_at = j["created_at"].get<std::string>();
        for (const auto& s : j.at("sections")) {
            NarrativeSection sec;
            sec.prompt_id = s.at("prompt_id").get<std::string>();
            sec.text = s.at("text").get<std::string>();
            n.sections.push_back(std::move(sec));
        }
    } catch (const json::exception& e) {
        throw ParseError(origin + ": " + e.what());
    }
    n.validate();
    return n;
}

std::string transcript_to_json(const ConversationTranscript& t) {
    json j;
    j["conversation_id"] = t.conversation_id;
    j["participants"] = t.participants;
    json turns = json::array();
    for (const auto& u : t.turns) turns.push_back({{"speaker", u.speaker}, {"text", u.text}});
    j["turns"] = turns;
    return j.dump(2);
}

ConversationTranscript transcript_from_json(const std::string& text,
                                            const std::string& origin) {
    json j = parse_json_or_throw(text, origin);
    ConversationTranscript t;
    try {
        t.conversation_id = j.at("conversation_id").get<std::string>();
        const auto& ps = j.at("participants");
        if (ps.size() != 2)
            throw SchemaError(origin + ": transcript must list exactly 2 participants");
        t.participants[0] = ps[0].get<std::string>();
        t.participants[1] = ps[1].get<std::string>();
        for (const auto& u : j.at("turns")) {
            SpeakerTurn turn;
            turn.speaker = u.at("speaker").get<std::string>();
            turn.text = u.at("text").get<std::string>();
            t.turns.push_back(std::move(turn));
        }
    } catch (const json::exception& e) {
        throw ParseError(origin + ": " + e.what());
    }
    t.validate();
    return t;
}

std::vector<ConversationTranscript> load_transcripts(const std::string& path) {
    std::vector<ConversationTranscript> out;
    if (fs::is_directory(path)) {
        std::vector<std::string> files;
        for (const auto& e : fs::directory_iterator(path))
            if (e.is_regular_file() && e.path().extension() == ".json")
                files.push_back(e.path().string());
        std::sort(files.begin(), files.end());
        for (const auto& f : files)
            out.push_back(transcript_from_json(read_file_or_throw(f), f));
        return out;
    }
    out.push_back(transcript_from_json(read_file_or_throw(path), path));
    return out;
}

std::string manifest_to_json(const RunManifest& m) {
    json j;
    j["run_id"] = m.run_id;
    j["stage"] = run_stage_name(m.stage);
    j["generator_id"] = m.generator_id;
    if (m.scorer_id) j["scorer_id"] = *m.scorer_id;
    j["seed"] = m.seed;
    j["config_hash"] = m.config_hash;
    return j.dump(2);
}

RunManifest manifest_from_json(const std::string& text, const std::string& origin) {
    json j = parse_json_or_throw(text, origin);
    RunManifest m;
    try {
        m.run_id = j.at("run_id").get<std::string>();
        m.stage = run_stage_from_name(j.at("stage").get<std::string>());
        m.generator_id = j.at("generator_id").get<std::string>();
        if (j.contains("scorer_id")) m.scorer_id = j["scorer_id"].get<std::string>();
        m.seed = j.at("seed").get<uint64_t>();
        m.config_hash = j.at("config_hash").get<std::string>();
    } catch (const json::exception& e) {
        throw ParseError(origin + ": " + e.what());
    }
    return m;
}

ArtifactStore::ArtifactStore(std::string root) : root_(std::move(root)) {
    fs::create_directories(root_);
}

std::string ArtifactStore::run_dir(const std::string& run_id) const {
    if (run_id.empty() || run_id.find('/') != std::string::npos ||
        run_id.find("..") != std::string::npos)
        throw SchemaError("run_id unusable as a directory name: " + run_id);
    return (fs::path(root_) / run_id).string();
}

std::string ArtifactStore::open_run(const RunManifest& manifest) {
    const std::string dir = run_dir(manifest.run_id);
    const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
    if (fs::exists(manifest_path)) {
        RunManifest existing = manifest_from_json(read_file_or_throw(manifest_path), manifest_path);
        if (existing.config_hash != manifest.config_hash)
            throw ProvenanceError("run " + manifest.run_id + " already exists with config_hash " +
                                  existing.config_hash + ", refusing to write under " +
                                  manifest.config_hash);
        return dir;
    }
    fs::create_directories(dir);
    write_file_or_throw(manifest_path, manifest_to_json(manifest));
    return dir;
}

std::string ArtifactStore::store(const RunManifest& manifest, const std::string& participant_id,
                                 const std::string& payload_json) {
    const std::string dir = open_run(manifest);
    if (participant_id.empty() || participant_id.find('/') != std::string::npos)
        throw SchemaError("participant_id unusable as a file name: " + participant_id);
    const std::string path = (fs::path(dir) / (participant_id + ".json")).string();
    write_file_or_throw(path, payload_json);
    return path;
}

std::optional<std::string> ArtifactStore::read(const std::string& run_id,
                                               const std::string& participant_id) const {
    const std::string path =
        (fs::path(run_dir(run_id)) / (participant_id + ".json")).string();
    if (!fs::exists(path)) return std::nullopt;
    return read_file_or_throw(path);
}

bool ArtifactStore::has(const std::string& run_id, const std::string& participant_id) const {
    return fs::exists(fs::path(run_dir(run_id)) / (participant_id + ".json"));
}

std::vector<std::string> ArtifactStore::list_participants(const std::string& run_id) const {
    std::vector<std::string> out;
    const std::string dir = run_dir(run_id);
    if (!fs::is_directory(dir)) return out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file() || e.path().extension() != ".json") continue;
        std::string stem = e.path().stem().string();
        if (stem == "manifest") continue;
        out.push_back(stem);
    }
    std::sort(out.begin(), out.end());
    return out;
}

RunManifest ArtifactStore::read_manifest(const std::string& run_id) const {
    const std::string path = (fs::path(run_dir(run_id)) / "manifest.json").string();
    if (!fs::exists(path)) throw IoError("no manifest for run " + run_id);
    return manifest_from_json(read_file_or_throw(path), path);
}

std::string utc_timestamp_now() {
    std::time_t now = std::time(nullptr);
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

}  // namespace psypipe
