#include "psypipe/psychometrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace psypipe {

using nlohmann::json;

int domain_index(const std::string& code) {
    for (int i = 0; i < kNumDomains; ++i)
        if (code == kDomainCodes[i]) return i;
    throw KeyMismatchError("unknown HEXACO domain code: " + code);
}

int subscale_index(const std::string& id) {
    for (int i = 0; i < kNumSubscales; ++i)
        if (id == kSubscaleIds[i]) return i;
    throw KeyMismatchError("unknown subscale id: " + id);
}

DomainProfile profile_distance(const DomainProfile& a, const DomainProfile& b) {
    DomainProfile d;
    for (int i = 0; i < kNumDomains; ++i) d.values[i] = a.values[i] - b.values[i];
    return d;
}

int reverse_score(int response) {
    if (response < 1 || response > 5)
        throw RangeError("Likert response out of range 1..5: " + std::to_string(response));
    return 6 - response;
}

const KeyEntry& ScoringKey::entry(int index) const {
    for (const auto& e : items)
        if (e.index == index) return e;
    throw KeyMismatchError(instrument_id + ": no item with index " + std::to_string(index));
}

std::vector<int> ScoringKey::indices_for_scale(const std::string& scale) const {
    std::vector<int> out;
    for (const auto& e : items)
        if (e.scale == scale) out.push_back(e.index);
    return out;
}

int ScoringKey::reversed_count(const std::string& scale) const {
    int k = 0;
    for (const auto& e : items)
        if (e.scale == scale && e.reversed) ++k;
    return k;
}

void ScoringKey::validate() const {
    if (items.empty()) throw SchemaError(instrument_id + ": key has no items");
    if (!(scale_min < scale_max))
        throw SchemaError(instrument_id + ": scale bounds must satisfy min < max");
    std::set<int> seen;
    for (const auto& e : items) {
        if (!seen.insert(e.index).second)
            throw SchemaError(instrument_id + ": duplicate item index " +
                              std::to_string(e.index));
        if (std::find(scales.begin(), scales.end(), e.scale) == scales.end())
            throw SchemaError(instrument_id + ": item " + std::to_string(e.index) +
                              " references undeclared scale '" + e.scale + "'");
    }
    for (const auto& s : scales) {
        if (indices_for_scale(s).empty())
            throw SchemaError(instrument_id + ": scale '" + s + "' has no items");
    }
    if (instrument_id == "hexaco60") {
        if (items.size() != 60)
            throw SchemaError("hexaco60: expected 60 items, got " +
                              std::to_string(items.size()));
        if (scales.size() != 6)
            throw SchemaError("hexaco60: expected 6 scales, got " +
                              std::to_string(scales.size()));
        for (const auto& s : scales) {
            if (indices_for_scale(s).size() != 10)
                throw SchemaError("hexaco60: scale '" + s + "' must have 10 items");
            domain_index(s);  // scales must be the canonical domain codes
        }
    }
}

ScoringKey ScoringKey::from_json_text(const std::string& text, const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(origin + ": invalid JSON: " + e.what());
    }
    ScoringKey key;
    try {
        key.instrument_id = j.at("instrument_id").get<std::string>();
        if (j.contains("scale_bounds")) {
            key.scale_min = j["scale_bounds"].at(0).get<double>();
            key.scale_max = j["scale_bounds"].at(1).get<double>();
        }
        std::vector<std::string> declared;
        for (const auto& item : j.at("items")) {
            KeyEntry e;
            e.index = item.at("index").get<int>();
            e.scale = item.at("scale").get<std::string>();
            e.reversed = item.value("reversed", false);
            e.stem = item.value("stem", "");
            if (std::find(declared.begin(), declared.end(), e.scale) == declared.end())
                declared.push_back(e.scale);
            key.items.push_back(std::move(e));
        }
        key.scales = j.value("scales", declared);
    } catch (const json::exception& e) {
        throw SchemaError(origin + ": bad key structure: " + e.what());
    }
    std::sort(key.items.begin(), key.items.end(),
              [](const KeyEntry& a, const KeyEntry& b) { return a.index < b.index; });
    key.validate();
    return key;
}

ScoringKey ScoringKey::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open key file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str(), path);
}

std::string ScoringKey::to_json_text() const {
    json j;
    j["instrument_id"] = instrument_id;
    j["scale_bounds"] = {scale_min, scale_max};
    j["scales"] = scales;
    j["items"] = json::array();
    for (const auto& e : items)
        j["items"].push_back({{"index", e.index},
                              {"scale", e.scale},
                              {"reversed", e.reversed},
                              {"stem", e.stem}});
    return j.dump(2);
}

std::vector<std::pair<std::string, double>> aggregate(const ItemResponses& items,
                                                      const ScoringKey& key) {
    // Unknown indices first, then completeness, then range.
    for (const auto& [idx, value] : items) {
        bool known = false;
        for (const auto& e : key.items)
            if (e.index == idx) { known = true; break; }
        if (!known)
            throw KeyMismatchError(key.instrument_id + ": response for unknown item index " +
                                   std::to_string(idx));
        (void)value;
    }
    std::vector<int> missing;
    for (const auto& e : key.items)
        if (!items.count(e.index)) missing.push_back(e.index);
    if (!missing.empty()) {
        std::ostringstream oss;
        oss << key.instrument_id << ": missing responses for items {";
        for (size_t i = 0; i < missing.size(); ++i)
            oss << (i ? ", " : "") << missing[i];
        oss << "}";
        throw IncompleteInputError(oss.str());
    }

    std::map<std::string, long> sums;
    std::map<std::string, int> counts;
    for (const auto& e : key.items) {
        int v = items.at(e.index);
        if (v < key.scale_min || v > key.scale_max)
            throw RangeError(key.instrument_id + ": item " + std::to_string(e.index) +
                             " response " + std::to_string(v) + " outside scale bounds");
        sums[e.scale] += e.reversed ? reverse_score(v) : v;
        counts[e.scale] += 1;
    }

    std::vector<std::pair<std::string, double>> out;
    out.reserve(key.scales.size());
    for (const auto& s : key.scales)
        out.emplace_back(s, static_cast<double>(sums[s]) / counts[s]);
    return out;
}

DomainProfile aggregate_hexaco(const ItemResponses& items, const ScoringKey& key) {
    if (key.instrument_id != "hexaco60")
        throw KeyMismatchError("aggregate_hexaco requires the hexaco60 key, got " +
                               key.instrument_id);
    DomainProfile p;
    for (const auto& [scale, mean] : aggregate(items, key))
        p.at(domain_index(scale)) = mean;
    return p;
}

SubscaleProfile aggregate_subscales(const ItemResponses& items, const ScoringKey& key) {
    SubscaleProfile p;
    auto means = aggregate(items, key);
    if (means.size() != kNumSubscales)
        throw KeyMismatchError(key.instrument_id + ": expected " +
                               std::to_string(kNumSubscales) + " subscales, got " +
                               std::to_string(means.size()));
    for (const auto& [scale, mean] : means)
        p.values[subscale_index(scale)] = mean;
    return p;
}

}  // namespace psypipe
