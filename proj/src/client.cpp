#include "storylab/client.hpp"

#include <atomic>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace storylab {

using Json = nlohmann::json;

std::unique_ptr<MockChatClient> MockChatClient::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open mock reply file " + path.string());
  std::vector<std::string> replies;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const Json j = Json::parse(line);
      replies.push_back(j.is_string() ? j.get<std::string>() : j.at("reply").get<std::string>());
    } catch (const Json::exception& e) {
      throw ConfigError("mock reply file line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (replies.empty()) throw ConfigError("mock reply file " + path.string() + " has no replies");
  return std::make_unique<MockChatClient>(std::move(replies));
}

std::string MockChatClient::complete(const ChatRequest& request) {
  std::lock_guard lock(mu_);
  const std::size_t i = next_++;
  if (replies_.empty()) return request.user;
  return replies_[i % replies_.size()];
}

std::size_t MockChatClient::calls() const {
  std::lock_guard lock(mu_);
  return next_;
}

std::string chat_request_json(const std::string& model, const ChatRequest& request) {
  Json messages = Json::array();
  if (!request.system.empty()) messages.push_back({{"role", "system"}, {"content", request.system}});
  messages.push_back({{"role", "user"}, {"content", request.user}});
  Json body{{"model", model}, {"messages", messages}, {"temperature", request.temperature}, {"max_tokens", request.max_tokens}};
  return body.dump(-1, ' ', false, Json::error_handler_t::replace);
}

std::string chat_reply_content(const std::string& body) {
  try {
    return Json::parse(body).at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const Json::exception& e) {
    throw TransportError(std::string("unexpected chat reply: ") + e.what());
  }
}

std::string with_retries(const std::function<std::string()>& fn, std::size_t attempts, std::chrono::milliseconds backoff) {
  if (attempts == 0) throw ConfigError("retry attempts must be positive");
  for (std::size_t k = 0;; ++k) {
    try {
      return fn();
    } catch (const TransportError&) {
      if (k + 1 >= attempts) throw;
      std::this_thread::sleep_for(backoff * (1LL << k));
    }
  }
}

HttpChatClient::HttpChatClient(HttpClientConfig config) : config_(std::move(config)) {
  if (!config_.token_env.empty()) {
    if (const char* t = std::getenv(config_.token_env.c_str())) token_ = t;
  }
}

std::string HttpChatClient::complete(const ChatRequest& request) {
  const std::string body = chat_request_json(config_.model, request);
  return with_retries(
      [&] {
        httplib::Client cli(config_.base_url);
        const auto secs = std::chrono::duration<double>(config_.timeout_seconds);
        cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
        cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
        cli.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
        httplib::Headers headers;
        if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
        auto res = cli.Post(config_.path, headers, body, "application/json");
        if (!res) throw TransportError("chat request failed: " + httplib::to_string(res.error()));
        if (res->status == 401 || res->status == 403) {
          throw ConfigError("chat endpoint rejected credentials (HTTP " + std::to_string(res->status) + "); check $" +
                            config_.token_env);
        }
        if (res->status != 200) throw TransportError("chat endpoint returned HTTP " + std::to_string(res->status));
        return chat_reply_content(res->body);
      },
      config_.attempts, config_.backoff);
}

void run_bounded(std::size_t n, std::size_t parallelism, const std::function<void(std::size_t)>& task) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(parallelism, n));
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex mu;
  auto loop = [&] {
    for (std::size_t i; !failed && (i = next++) < n;) {
      try {
        task(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 1; w < workers; ++w) threads.emplace_back(loop);
  loop();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace storylab
