#pragma once

// Chat-completion client: POST {model, messages:[{role, content}], temperature}
// and read choices[0].message.content from the reply.

#include <chrono>
#include <memory>
#include <semaphore>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace xplain::chat {

enum class Role { system, user, assistant };

std::string_view role_name(Role r);
Role parse_role(std::string_view name);

struct ChatMessage {
  Role role = Role::user;
  std::string content;
  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct ChatTranscript {
  std::vector<ChatMessage> messages;
  std::string endpoint_id;
  double temperature = 0.0;

  /// Roles alternate user/assistant after an optional leading system message;
  /// user and assistant contents are non-empty. Throws std::invalid_argument.
  void validate() const;
  void add(Role role, std::string content) { messages.push_back({role, std::move(content)}); }
  const ChatMessage& last() const { return messages.back(); }
};

/// Network failure, or transient status (429/5xx), after the retry budget is spent.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-transient, non-success HTTP status.
class EndpointError : public std::runtime_error {
 public:
  EndpointError(int status, std::string body);
  int status() const { return status_; }
  const std::string& body() const { return body_; }

 private:
  int status_;
  std::string body_;
};

/// Success status but an unusable body (not JSON, no content, empty reply).
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EndpointConfig {
  std::string base_url = "http://127.0.0.1:8080";  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model = "default";
  std::string api_key;  // sent as "Authorization: Bearer <key>" when set
  double timeout_seconds = 30.0;
  int retry_cap = 2;           // retries after the first attempt
  int backoff_initial_ms = 100;  // doubled after every failed attempt
  int max_in_flight = 4;
  std::string name;  // reported endpoint id; model@base_url when empty

  std::string id() const { return name.empty() ? model + "@" + base_url : name; }
};

/// Anything that answers a transcript with the next assistant message.
class ChatEndpoint {
 public:
  virtual ~ChatEndpoint() = default;
  /// Returns the reply verbatim; does not modify the transcript.
  virtual std::string chat(const ChatTranscript& transcript) = 0;
  virtual std::string id() const = 0;
};

std::string request_body(std::string_view model, const ChatTranscript& transcript);
/// choices[0].message.content; throws ProtocolError.
std::string parse_reply(std::string_view body);

/// HTTP client for the chat-completion wire format. Safe for concurrent use;
/// at most max_in_flight requests are outstanding at once.
class HttpChatClient final : public ChatEndpoint {
 public:
  explicit HttpChatClient(EndpointConfig config);
  std::string chat(const ChatTranscript& transcript) override;
  std::string id() const override { return config_.id(); }
  const EndpointConfig& config() const { return config_; }

 private:
  EndpointConfig config_;
  std::unique_ptr<std::counting_semaphore<>> in_flight_;
};

}  // namespace xplain::chat
