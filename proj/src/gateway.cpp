#include "psypipe/gateway.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <json.hpp>

#define CPPHTTPLIB_NO_EXCEPTIONS
#include <httplib.h>

#include "psypipe/errors.hpp"
#include "psypipe/hashing.hpp"
#include "psypipe/text.hpp"

using nlohmann::json;

namespace psypipe {

void ChatRequest::validate() const {
    if (model_id.empty()) throw SchemaError("chat request has empty model_id");
    if (messages.empty()) throw SchemaError("chat request has no messages");
    if (!std::isfinite(temperature) || temperature < 0.0)
        throw RangeError("chat request temperature must be finite and >= 0");
    if (max_output <= 0) throw RangeError("chat request max_output must be positive");
}

std::string ChatRequest::joined_text() const {
    std::string out;
    for (const auto& m : messages) {
        if (!out.empty()) out += "\n";
        out += m.text;
    }
    return out;
}

const ChatMessage* ChatRequest::system_message() const {
    for (const auto& m : messages)
        if (m.role == "system") return &m;
    return messages.empty() ? nullptr : &messages.front();
}

const ChatMessage* ChatRequest::last_user_message() const {
    for (auto it = messages.rbegin(); it != messages.rend(); ++it)
        if (it->role == "user") return &*it;
    return nullptr;
}

bool looks_like_refusal(const std::string& text) {
    static const char* kPatterns[] = {
        "i must decline",     "i can't help",     "i cannot help",
        "i can't assist",     "i cannot assist",  "i'm not able to",
        "i am not able to",   "i won't be able",  "i cannot continue",
        "unable to comply",   "i can't comply",   "i cannot comply",
    };
    const std::string lowered = text::to_lower(text);
    for (const char* p : kPatterns)
        if (lowered.find(p) != std::string::npos) return true;
    return false;
}

// Per-provider state: the provider itself plus its concurrency controls.
struct Gateway::Slot {
    std::shared_ptr<Provider> provider;
    RateLimit limit;
    std::mutex mutex;
    std::condition_variable cv;
    int in_flight = 0;
    std::chrono::steady_clock::time_point next_slot = std::chrono::steady_clock::now();

    void acquire() {
        std::unique_lock<std::mutex> lock(mutex);
        cv.wait(lock, [&] { return in_flight < limit.max_in_flight; });
        ++in_flight;
        if (limit.requests_per_minute > 0.0) {
            auto now = std::chrono::steady_clock::now();
            auto spacing = std::chrono::duration<double>(60.0 / limit.requests_per_minute);
            auto slot = std::max(next_slot, now);
            next_slot = slot + std::chrono::duration_cast<std::chrono::steady_clock::duration>(spacing);
            lock.unlock();
            std::this_thread::sleep_until(slot);
        }
    }

    void release() {
        {
            std::lock_guard<std::mutex> lock(mutex);
            --in_flight;
        }
        cv.notify_one();
    }
};

Gateway::Gateway(RetryPolicy retry) : retry_(retry) {
    if (retry_.max_attempts < 1) throw ConfigError("retry max_attempts must be >= 1");
}

Gateway::~Gateway() = default;

void Gateway::register_provider(std::shared_ptr<Provider> provider, RateLimit limit) {
    if (!provider) throw ConfigError("null provider");
    if (limit.max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
    auto slot = std::make_unique<Slot>();
    slot->provider = std::move(provider);
    slot->limit = limit;
    slots_.push_back(std::move(slot));
}

void Gateway::set_log(const std::string& path, const std::string& config_hash) {
    std::lock_guard<std::mutex> lock(log_mutex_);
    log_path_ = path;
    log_config_hash_ = config_hash;
}

Gateway::Slot* Gateway::route(const std::string& model_id) {
    for (auto& slot : slots_)
        if (slot->provider->handles(model_id)) return slot.get();
    throw ConfigError("no provider registered for model id: " + model_id);
}

void Gateway::log_line(const ChatRequest& req, const ChatResponse* resp, int attempts,
                       const std::string& error_category) {
    std::lock_guard<std::mutex> lock(log_mutex_);
    if (log_path_.empty()) return;
    json j;
    j["ts"] = std::chrono::duration_cast<std::chrono::milliseconds>(
                  std::chrono::system_clock::now().time_since_epoch())
                  .count();
    j["model_id"] = req.model_id;
    j["attempts"] = attempts;
    j["request_chars"] = req.joined_text().size();
    if (resp) {
        j["ok"] = true;
        j["refusal"] = resp->refusal;
        j["latency_ms"] = resp->latency_ms;
        j["response_chars"] = resp->text.size();
    } else {
        j["ok"] = false;
        j["error"] = error_category;
    }
    j["config_hash"] = log_config_hash_;
    std::ofstream out(log_path_, std::ios::app);
    if (out) out << j.dump() << "\n";
}

ChatResponse Gateway::complete(const ChatRequest& request) {
    request.validate();
    Slot* slot = route(request.model_id);

    int attempts = 0;
    for (;;) {
        ++attempts;
        slot->acquire();
        try {
            auto t0 = std::chrono::steady_clock::now();
            ChatResponse resp = slot->provider->complete(request);
            auto t1 = std::chrono::steady_clock::now();
            slot->release();
            if (resp.latency_ms == 0.0)
                resp.latency_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
            resp.retry_count = attempts - 1;
            if (resp.model_id.empty()) resp.model_id = request.model_id;
            if (!resp.refusal) resp.refusal = looks_like_refusal(resp.text);
            log_line(request, &resp, attempts, "");
            return resp;
        } catch (const CredentialError&) {
            slot->release();
            log_line(request, nullptr, attempts, "credential-error");
            throw;
        } catch (const TransportError& e) {
            slot->release();
            if (attempts >= retry_.max_attempts) {
                log_line(request, nullptr, attempts, "transport-error");
                throw TransportError("exhausted " + std::to_string(attempts) +
                                     " attempts for " + request.model_id + ": " + e.what());
            }
            double delay = retry_.base_delay_ms * std::pow(2.0, attempts - 1);
            delay = std::min(delay, retry_.max_delay_ms);
            {
                // Small deterministic jitter decorrelates concurrent retries.
                std::lock_guard<std::mutex> lock(jitter_mutex_);
                jitter_state_ = fnv1a64_u64(jitter_state_, 0x2545f4914f6cdd1dull);
                double u = static_cast<double>(jitter_state_ >> 11) / 9007199254740992.0;
                delay *= 1.0 + retry_.jitter * (2.0 * u - 1.0);
            }
            if (delay > 0.0)
                std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(delay));
        } catch (...) {
            slot->release();
            log_line(request, nullptr, attempts, "provider-error");
            throw;
        }
    }
}

OpenAiCompatProvider::OpenAiCompatProvider(RemoteEndpointConfig config)
    : config_(std::move(config)) {
    if (config_.base_url.empty()) throw ConfigError("remote endpoint base_url is empty");
}

bool OpenAiCompatProvider::handles(const std::string& model_id) const {
    if (config_.model_prefixes.empty()) return !model_id.starts_with("synthetic");
    for (const auto& p : config_.model_prefixes)
        if (model_id.starts_with(p)) return true;
    return false;
}

ChatResponse OpenAiCompatProvider::complete(const ChatRequest& request) {
    const char* key = nullptr;
    if (!config_.api_key_env.empty()) {
        key = std::getenv(config_.api_key_env.c_str());
        if (!key || !*key)
            throw CredentialError("environment variable " + config_.api_key_env +
                                  " is unset; cannot authenticate against " + config_.name);
    }

    json body;
    body["model"] = request.model_id;
    json msgs = json::array();
    for (const auto& m : request.messages)
        msgs.push_back({{"role", m.role}, {"content", m.text}});
    body["messages"] = msgs;
    body["temperature"] = request.temperature;
    body["max_tokens"] = request.max_output;
    if (request.seed) body["seed"] = *request.seed;
    for (const auto& [k, v] : request.options) body[k] = v;

    httplib::Client client(config_.base_url);
    client.set_connection_timeout(config_.timeout_seconds);
    client.set_read_timeout(config_.timeout_seconds);
    httplib::Headers headers;
    if (key) headers.emplace("Authorization", std::string("Bearer ") + key);

    auto result = client.Post(config_.path, headers, body.dump(), "application/json");
    if (!result)
        throw TransportError(config_.name + ": connection failed (" +
                             httplib::to_string(result.error()) + ")");
    if (result->status == 401 || result->status == 403)
        throw CredentialError(config_.name + ": authentication rejected (HTTP " +
                              std::to_string(result->status) + ")");
    if (result->status == 429 || result->status >= 500)
        throw TransportError(config_.name + ": HTTP " + std::to_string(result->status));
    if (result->status != 200)
        throw SchemaError(config_.name + ": HTTP " + std::to_string(result->status) + ": " +
                          result->body.substr(0, 200));

    json j = json::parse(result->body, nullptr, false);
    if (j.is_discarded())
        throw SchemaError(config_.name + ": response body is not JSON");
    ChatResponse resp;
    try {
        resp.text = j.at("choices").at(0).at("message").at("content").get<std::string>();
        if (j.contains("model")) resp.model_id = j["model"].get<std::string>();
        if (j.contains("usage")) {
            const auto& u = j["usage"];
            if (u.contains("prompt_tokens")) resp.prompt_tokens = u["prompt_tokens"].get<int>();
            if (u.contains("completion_tokens"))
                resp.completion_tokens = u["completion_tokens"].get<int>();
        }
    } catch (const json::exception& e) {
        throw SchemaError(config_.name + ": unexpected response shape: " + e.what());
    }
    return resp;
}

}  // namespace psypipe
