#include "xplain/chat.hpp"

#include <thread>

#include <httplib.h>
#include <json.hpp>

namespace xplain::chat {

using nlohmann::json;

std::string_view role_name(Role r) {
  switch (r) {
    case Role::system:
      return "system";
    case Role::user:
      return "user";
    case Role::assistant:
      return "assistant";
  }
  return "user";
}

Role parse_role(std::string_view name) {
  if (name == "system") return Role::system;
  if (name == "user") return Role::user;
  if (name == "assistant") return Role::assistant;
  throw std::invalid_argument("unknown chat role '" + std::string(name) + "'");
}

void ChatTranscript::validate() const {
  std::size_t i = 0;
  if (!messages.empty() && messages[0].role == Role::system) i = 1;
  if (messages.size() == i) throw std::invalid_argument("transcript: no user message");
  for (std::size_t k = i; k < messages.size(); ++k) {
    const Role expected = (k - i) % 2 == 0 ? Role::user : Role::assistant;
    if (messages[k].role != expected)
      throw std::invalid_argument("transcript: message " + std::to_string(k) + " should have role " +
                                  std::string(role_name(expected)));
    if (messages[k].content.empty())
      throw std::invalid_argument("transcript: message " + std::to_string(k) + " is empty");
  }
}

EndpointError::EndpointError(int status, std::string body)
    : std::runtime_error("endpoint returned HTTP " + std::to_string(status) + ": " + body),
      status_(status),
      body_(std::move(body)) {}

std::string request_body(std::string_view model, const ChatTranscript& transcript) {
  json messages = json::array();
  for (const auto& m : transcript.messages)
    messages.push_back({{"role", std::string(role_name(m.role))}, {"content", m.content}});
  return json{{"model", std::string(model)}, {"messages", messages}, {"temperature", transcript.temperature}}.dump();
}

std::string parse_reply(std::string_view body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("reply is not JSON: ") + e.what());
  }
  try {
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (!content.is_string()) throw ProtocolError("reply content is not a string");
    auto s = content.get<std::string>();
    if (s.empty()) throw ProtocolError("empty reply");
    return s;
  } catch (const json::exception& e) {
    throw ProtocolError(std::string("reply lacks choices[0].message.content: ") + e.what());
  }
}

HttpChatClient::HttpChatClient(EndpointConfig config)
    : config_(std::move(config)),
      in_flight_(std::make_unique<std::counting_semaphore<>>(std::max(1, config_.max_in_flight))) {
  if (config_.retry_cap < 0) throw std::invalid_argument("retry_cap must be >= 0");
}

namespace {

bool transient(int status) { return status == 408 || status == 429 || status >= 500; }

struct Slot {
  std::counting_semaphore<>& sem;
  explicit Slot(std::counting_semaphore<>& s) : sem(s) { sem.acquire(); }
  ~Slot() { sem.release(); }
  Slot(const Slot&) = delete;
  Slot& operator=(const Slot&) = delete;
};

}  // namespace

std::string HttpChatClient::chat(const ChatTranscript& transcript) {
  transcript.validate();
  const auto body = request_body(config_.model, transcript);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
  auto backoff = std::chrono::milliseconds(config_.backoff_initial_ms);
  std::string last_failure;
  for (int attempt = 0; attempt <= config_.retry_cap; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    httplib::Result res{nullptr, httplib::Error::Unknown};
    {
      Slot slot(*in_flight_);
      httplib::Client client(config_.base_url);
      client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      client.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
      res = client.Post(config_.path, headers, body, "application/json");
    }
    if (!res) {
      last_failure = "network error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 200 && res->status < 300) return parse_reply(res->body);
    if (!transient(res->status)) throw EndpointError(res->status, res->body);
    last_failure = "HTTP " + std::to_string(res->status) + ": " + res->body;
  }
  throw TransportError("chat request to " + config_.id() + " failed after " + std::to_string(config_.retry_cap + 1) +
                       " attempts (" + last_failure + ")");
}

}  // namespace xplain::chat
