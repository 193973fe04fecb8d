#pragma once

// Scripted chat-completion endpoint for offline runs and tests.
//
// Fixture file (JSON):
//   {
//     "rules": [
//       { "match": { "last_user_contains": ["..."], "any_contains": ["..."], "n_messages": 1 },
//         "reply": "Negative" },
//       { "match": {...}, "status": 500, "body": "overloaded", "times": 3 },
//       { "match": {...}, "keyword_reply": { "table": {"salmonella": "Biological"},
//                                            "scope": "quoted", "default": "Biological" } }
//     ],
//     "default": { "status": 404, "body": "no matching rule" }
//   }
//
// Rules are tried in order; the first rule whose matcher accepts the request
// and whose "times" budget is not used up answers it. All matcher fields are
// optional and AND-ed. keyword_reply answers with the table value of the first
// token (in text order) of the last user message that appears in the table;
// scope "quoted" restricts the search to the first line holding a quote,
// between its first and last quote character.

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "xplain/chat.hpp"

namespace xplain::chat {

struct MockRule {
  std::vector<std::string> last_user_contains;
  std::vector<std::string> any_contains;
  std::optional<std::size_t> n_messages;

  std::optional<std::string> reply;
  int status = 200;
  std::string body;  // error body when status != 200

  struct KeywordReply {
    std::map<std::string, std::string> table;
    bool quoted_scope = true;
    std::optional<std::string> fallback;
  };
  std::optional<KeywordReply> keyword_reply;

  std::optional<std::size_t> times;
};

struct MockResponse {
  int status = 200;
  std::string body;
};

class MockFixture {
 public:
  MockFixture() = default;
  MockFixture(std::vector<MockRule> rules, std::optional<MockResponse> fallback);

  static MockFixture from_json(const std::string& content);
  static MockFixture load(const std::filesystem::path& path);

  /// Answers one request body (the chat-completion JSON). Thread-safe.
  MockResponse respond(const std::string& request_body);

  /// Transcripts received so far, in arrival order.
  std::vector<ChatTranscript> received() const;
  std::size_t rule_count() const { return rules_.size(); }

 private:
  std::vector<MockRule> rules_;
  std::vector<std::size_t> used_;
  std::optional<MockResponse> fallback_;
  std::vector<ChatTranscript> received_;
  std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
  std::size_t served_ = 0;
};

/// Wraps a reply string in a chat-completion response body.
std::string completion_body(const std::string& model, const std::string& content, std::size_t serial);

/// HTTP front for a MockFixture on 127.0.0.1. Accepts POST on any path.
class MockServer {
 public:
  explicit MockServer(MockFixture fixture);
  ~MockServer();
  MockServer(const MockServer&) = delete;
  MockServer& operator=(const MockServer&) = delete;

  /// Binds (port 0 picks a free port) and serves in a background thread.
  int start(int port = 0);
  void stop();
  /// Blocks in the calling thread until stop() is called from elsewhere.
  void serve_forever(int port);

  int port() const { return port_; }
  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  MockFixture& fixture() { return *fixture_; }

 private:
  struct Impl;
  std::unique_ptr<MockFixture> fixture_;
  std::unique_ptr<Impl> impl_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace xplain::chat
