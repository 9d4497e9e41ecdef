#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace psypipe {

struct ChatMessage {
    std::string role;  // "system", "user", "assistant"
    std::string text;
};

struct ChatRequest {
    std::string model_id;
    std::vector<ChatMessage> messages;
    double temperature = 1.0;
    int max_output = 4096;
    std::optional<uint64_t> seed;
    std::map<std::string, std::string> options;  // provider passthrough

    void validate() const;  // >=1 message, finite temperature >= 0
    std::string joined_text() const;
    const ChatMessage* system_message() const;
    const ChatMessage* last_user_message() const;
};

struct ChatResponse {
    std::string text;
    std::string model_id;
    int prompt_tokens = 0;
    int completion_tokens = 0;
    double latency_ms = 0.0;
    int retry_count = 0;   // transient failures absorbed before this response
    bool refusal = false;  // provider declined; response carries the refusal text
};

class Provider {
public:
    virtual ~Provider() = default;
    virtual std::string name() const = 0;
    virtual bool handles(const std::string& model_id) const = 0;
    virtual ChatResponse complete(const ChatRequest& request) = 0;
};

struct RetryPolicy {
    int max_attempts = 4;
    double base_delay_ms = 50.0;
    double max_delay_ms = 2000.0;
    double jitter = 0.1;  // +-fraction applied to each delay
};

struct RateLimit {
    int max_in_flight = 4;
    double requests_per_minute = 0.0;  // 0 disables rate pacing
};

// Text heuristics for provider refusals. Refusals are recorded as outcomes,
// never raised as exceptions; downstream stages exclude them with counts.
bool looks_like_refusal(const std::string& text);

// Routes requests to registered providers and enforces the operational
// policies: bounded retry with exponential backoff on transport errors,
// per-provider in-flight ceiling and request pacing, line-delimited request
// logging, refusal flagging. Credential errors are never retried.
class Gateway {
public:
    explicit Gateway(RetryPolicy retry = {});
    ~Gateway();

    void register_provider(std::shared_ptr<Provider> provider, RateLimit limit = {});
    void set_log(const std::string& path, const std::string& config_hash);

    ChatResponse complete(const ChatRequest& request);

    const RetryPolicy& retry_policy() const { return retry_; }

private:
    struct Slot;
    Slot* route(const std::string& model_id);
    void log_line(const ChatRequest& req, const ChatResponse* resp, int attempts,
                  const std::string& error_category);

    RetryPolicy retry_;
    std::vector<std::unique_ptr<Slot>> slots_;
    std::mutex log_mutex_;
    std::string log_path_;
    std::string log_config_hash_;
    std::mutex jitter_mutex_;
    uint64_t jitter_state_ = 0x9e3779b97f4a7c15ull;
};

// Adapter for OpenAI-compatible chat-completion endpoints. The API key is
// read from the configured environment variable at request time.
struct RemoteEndpointConfig {
    std::string base_url;  // e.g. http://127.0.0.1:8089
    std::string path = "/v1/chat/completions";
    std::string api_key_env = "OPENAI_API_KEY";
    std::vector<std::string> model_prefixes;  // empty: handles every model id
    int timeout_seconds = 120;
    std::string name = "openai-compat";
};

class OpenAiCompatProvider : public Provider {
public:
    explicit OpenAiCompatProvider(RemoteEndpointConfig config);
    std::string name() const override { return config_.name; }
    bool handles(const std::string& model_id) const override;
    ChatResponse complete(const ChatRequest& request) override;

private:
    RemoteEndpointConfig config_;
};

}  // namespace psypipe
