#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include "storylab/errors.hpp"

namespace storylab {

/// Retryable failure talking to a chat endpoint.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ChatRequest {
  std::string system;
  std::string user;
  double temperature = 0.0;
  std::size_t max_tokens = 1024;
};

class ChatClient {
 public:
  virtual ~ChatClient() = default;
  /// Reply text. Throws TransportError on retryable failures and
  /// ConfigError on authentication failures.
  virtual std::string complete(const ChatRequest& request) = 0;
  virtual std::string id() const = 0;
  /// True when replies depend on call order, so callers must not reorder calls.
  virtual bool ordered() const { return false; }
};

/// Offline client. Canned replies are handed out in order and cycle; with
/// no replies it echoes the user message.
class MockChatClient : public ChatClient {
 public:
  MockChatClient() = default;
  explicit MockChatClient(std::vector<std::string> replies) : replies_(std::move(replies)) {}
  /// One reply per line: a JSON string, or {"reply": "..."}; blank lines skipped.
  static std::unique_ptr<MockChatClient> from_file(const std::filesystem::path& path);

  std::string complete(const ChatRequest& request) override;
  std::string id() const override { return replies_.empty() ? "mock-echo" : "mock"; }
  bool ordered() const override { return !replies_.empty(); }
  std::size_t calls() const;

 private:
  std::vector<std::string> replies_;
  mutable std::mutex mu_;
  std::size_t next_ = 0;
};

struct HttpClientConfig {
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4";
  std::string token_env = "OPENAI_API_KEY";  // variable holding the bearer token
  double timeout_seconds = 60.0;
  std::size_t attempts = 3;
  std::chrono::milliseconds backoff{500};  // doubled after every failed attempt
};

/// Chat-completion client over HTTP(S). Sends
/// {"model", "messages": [{role, content}...], "temperature", "max_tokens"}
/// and reads choices[0].message.content. Network errors, 429 and 5xx are
/// retried; 401/403 raise ConfigError at once; other failures after the
/// last attempt raise TransportError.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(HttpClientConfig config);
  std::string complete(const ChatRequest& request) override;
  std::string id() const override { return config_.model + "@" + config_.base_url; }
  const HttpClientConfig& config() const { return config_; }

 private:
  HttpClientConfig config_;
  std::string token_;
};

/// Request body in the chat-completion wire format.
std::string chat_request_json(const std::string& model, const ChatRequest& request);
/// Extracts choices[0].message.content; TransportError when absent.
std::string chat_reply_content(const std::string& body);

/// Calls `fn` up to `attempts` times, sleeping backoff * 2^k between
/// TransportError failures; other exceptions propagate at once.
std::string with_retries(const std::function<std::string()>& fn, std::size_t attempts, std::chrono::milliseconds backoff);

/// Runs `n` tasks with at most `parallelism` threads. The first exception
/// thrown by any task is rethrown after all threads finish; tasks not yet
/// started are skipped once a task has failed.
void run_bounded(std::size_t n, std::size_t parallelism, const std::function<void(std::size_t)>& task);

}  // namespace storylab
