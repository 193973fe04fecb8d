#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "xplain/chat.hpp"
#include "xplain/mock_server.hpp"

using namespace xplain::chat;
using nlohmann::json;

namespace {

ChatTranscript one_question(const std::string& q) {
  ChatTranscript t;
  t.add(Role::user, q);
  return t;
}

EndpointConfig fast_config(const MockServer& s) {
  EndpointConfig c;
  c.base_url = s.base_url();
  c.backoff_initial_ms = 1;
  c.timeout_seconds = 5;
  return c;
}

}  // namespace

TEST(Transcript, Validation) {
  ChatTranscript t;
  EXPECT_THROW(t.validate(), std::invalid_argument);
  t.add(Role::system, "be brief");
  t.add(Role::user, "hi");
  EXPECT_NO_THROW(t.validate());
  t.add(Role::assistant, "hello");
  t.add(Role::user, "again");
  EXPECT_NO_THROW(t.validate());
  t.add(Role::user, "twice");
  EXPECT_THROW(t.validate(), std::invalid_argument);
  ChatTranscript empty_content;
  empty_content.add(Role::user, "");
  EXPECT_THROW(empty_content.validate(), std::invalid_argument);
  ChatTranscript starts_with_assistant;
  starts_with_assistant.add(Role::assistant, "x");
  EXPECT_THROW(starts_with_assistant.validate(), std::invalid_argument);
}

TEST(Wire, RequestBodyShape) {
  auto t = one_question("What?");
  t.add(Role::assistant, "That.");
  t.add(Role::user, "Why?");
  const auto j = json::parse(request_body("m1", t));
  EXPECT_EQ(j["model"], "m1");
  EXPECT_EQ(j["temperature"], 0.0);
  ASSERT_EQ(j["messages"].size(), 3u);
  EXPECT_EQ(j["messages"][1]["role"], "assistant");
  EXPECT_EQ(j["messages"][2]["content"], "Why?");
}

TEST(Wire, ParseReply) {
  EXPECT_EQ(parse_reply(R"({"choices":[{"message":{"role":"assistant","content":"Negative"}}]})"), "Negative");
  EXPECT_THROW(parse_reply("not json"), ProtocolError);
  EXPECT_THROW(parse_reply(R"({"choices":[]})"), ProtocolError);
  EXPECT_THROW(parse_reply(R"({"choices":[{"message":{"content":""}}]})"), ProtocolError);
  EXPECT_THROW(parse_reply(R"({"choices":[{"message":{"content":5}}]})"), ProtocolError);
}

TEST(Roles, RoundTrip) {
  for (auto r : {Role::system, Role::user, Role::assistant}) EXPECT_EQ(parse_role(role_name(r)), r);
  EXPECT_THROW(parse_role("robot"), std::invalid_argument);
}

TEST(Mock, AnswersByRule) {
  MockServer server(MockFixture::from_json(R"({
    "rules": [
      {"match": {"last_user_contains": ["sentiment"], "n_messages": 1}, "reply": "Negative"},
      {"match": {"any_contains": ["phrase"]}, "reply": "\"Alas\""}
    ]
  })"));
  server.start();
  HttpChatClient client(fast_config(server));
  EXPECT_EQ(client.chat(one_question("What is the sentiment?")), "Negative");
  auto t = one_question("What is the sentiment?");
  t.add(Role::assistant, "Negative");
  t.add(Role::user, "Which phrase?");
  EXPECT_EQ(client.chat(t), "\"Alas\"");
  // No rule and no default: 404, a non-transient status.
  try {
    client.chat(one_question("unrelated"));
    FAIL() << "expected EndpointError";
  } catch (const EndpointError& e) {
    EXPECT_EQ(e.status(), 404);
  }
  const auto got = server.fixture().received();
  ASSERT_EQ(got.size(), 3u);
  EXPECT_EQ(got[1].messages.size(), 3u);
  EXPECT_EQ(got[1].messages[2].content, "Which phrase?");
}

TEST(Mock, KeywordReplyInQuotedScope) {
  auto f = MockFixture::from_json(R"({
    "rules": [{"keyword_reply": {"table": {"salmonella": "Biological", "glass": "Foreign bodies"},
                                 "scope": "quoted", "default": "Other"}}]
  })");
  const auto ask = [&](const std::string& q) {
    json body{{"model", "m"}, {"messages", json::array({{{"role", "user"}, {"content", q}}})}};
    const auto r = f.respond(body.dump());
    EXPECT_EQ(r.status, 200);
    return parse_reply(r.body);
  };
  EXPECT_EQ(ask("Classify glass:\n\"salmonella found in glass jars\"\nLabels: \"glass\""), "Biological");
  EXPECT_EQ(ask("Classify salmonella:\n\"pieces of glass\"\n"), "Foreign bodies");
  EXPECT_EQ(ask("\"nothing here\" salmonella"), "Other");
}

TEST(Mock, TimesBudgetAndDefault) {
  auto f = MockFixture::from_json(R"({
    "rules": [{"match": {}, "status": 503, "body": "busy", "times": 1},
              {"match": {"any_contains": ["x"]}, "reply": "ok"}],
    "default": {"status": 418, "body": "teapot"}
  })");
  json body{{"model", "m"}, {"messages", json::array({{{"role", "user"}, {"content", "x"}}})}};
  EXPECT_EQ(f.respond(body.dump()).status, 503);
  EXPECT_EQ(f.respond(body.dump()).status, 200);
  body["messages"][0]["content"] = "y";
  EXPECT_EQ(f.respond(body.dump()).status, 418);
  EXPECT_EQ(f.respond("garbage").status, 400);
}

TEST(Mock, BadFixtureThrows) {
  EXPECT_ANY_THROW(MockFixture::from_json("[1,2]"));
  EXPECT_ANY_THROW(MockFixture::from_json(R"({"rules":[{"match":{"bogus":1},"reply":"x"}]})"));
  EXPECT_ANY_THROW(MockFixture::from_json(R"({"rules":[{"match":{}}]})"));
}

TEST(Client, TransientErrorsExhaustRetries) {
  MockServer server(MockFixture::from_json(R"({
    "rules": [{"status": 500, "body": "overloaded", "times": 3}, {"reply": "late"}]
  })"));
  server.start();
  auto config = fast_config(server);
  config.retry_cap = 2;
  HttpChatClient client(config);
  EXPECT_THROW(client.chat(one_question("q")), TransportError);
  EXPECT_EQ(server.fixture().received().size(), 3u);
  EXPECT_EQ(client.chat(one_question("q")), "late");
}

TEST(Client, RetryRecoversWithinBudget) {
  MockServer server(MockFixture::from_json(R"({
    "rules": [{"status": 429, "body": "slow down", "times": 2}, {"reply": "ok"}]
  })"));
  server.start();
  HttpChatClient client(fast_config(server));
  EXPECT_EQ(client.chat(one_question("q")), "ok");
  EXPECT_EQ(server.fixture().received().size(), 3u);
}

TEST(Client, ClientErrorIsNotRetried) {
  MockServer server(MockFixture::from_json(R"({"rules": [{"status": 401, "body": "no key"}]})"));
  server.start();
  HttpChatClient client(fast_config(server));
  try {
    client.chat(one_question("q"));
    FAIL();
  } catch (const EndpointError& e) {
    EXPECT_EQ(e.status(), 401);
    EXPECT_EQ(e.body(), "no key");
  }
  EXPECT_EQ(server.fixture().received().size(), 1u);
}

TEST(Client, MalformedBodyIsProtocolError) {
  httplib::Server raw;
  raw.Post(".*", [](const httplib::Request&, httplib::Response& res) { res.set_content("{oops", "application/json"); });
  const int port = raw.bind_to_any_port("127.0.0.1");
  std::thread th([&] { raw.listen_after_bind(); });
  EndpointConfig c;
  c.base_url = "http://127.0.0.1:" + std::to_string(port);
  HttpChatClient client(c);
  EXPECT_THROW(client.chat(one_question("q")), ProtocolError);
  raw.stop();
  th.join();
}

TEST(Client, UnreachableIsTransportError) {
  EndpointConfig c;
  c.base_url = "http://127.0.0.1:1";
  c.retry_cap = 1;
  c.backoff_initial_ms = 1;
  c.timeout_seconds = 1;
  HttpChatClient client(c);
  EXPECT_THROW(client.chat(one_question("q")), TransportError);
}

TEST(Client, SendsBearerKey) {
  httplib::Server raw;
  std::string auth;
  raw.Post(".*", [&](const httplib::Request& req, httplib::Response& res) {
    auth = req.get_header_value("Authorization");
    res.set_content(completion_body("m", "fine", 0), "application/json");
  });
  const int port = raw.bind_to_any_port("127.0.0.1");
  std::thread th([&] { raw.listen_after_bind(); });
  EndpointConfig c;
  c.base_url = "http://127.0.0.1:" + std::to_string(port);
  c.api_key = "sk-test";
  HttpChatClient client(c);
  EXPECT_EQ(client.chat(one_question("q")), "fine");
  EXPECT_EQ(auth, "Bearer sk-test");
  raw.stop();
  th.join();
}

TEST(Client, InFlightLimit) {
  httplib::Server raw;
  raw.new_task_queue = [] { return new httplib::ThreadPool(16); };
  std::atomic<int> now{0}, peak{0};
  raw.Post(".*", [&](const httplib::Request&, httplib::Response& res) {
    const int n = ++now;
    int p = peak.load();
    while (n > p && !peak.compare_exchange_weak(p, n)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(40));
    --now;
    res.set_content(completion_body("m", "ok", 0), "application/json");
  });
  const int port = raw.bind_to_any_port("127.0.0.1");
  std::thread th([&] { raw.listen_after_bind(); });
  EndpointConfig c;
  c.base_url = "http://127.0.0.1:" + std::to_string(port);
  c.max_in_flight = 2;
  HttpChatClient client(c);
  std::vector<std::jthread> workers;
  for (int i = 0; i < 8; ++i) workers.emplace_back([&] { EXPECT_EQ(client.chat(one_question("q")), "ok"); });
  workers.clear();
  EXPECT_LE(peak.load(), 2);
  EXPECT_EQ(peak.load(), 2);
  raw.stop();
  th.join();
}

TEST(Endpoint, Id) {
  EndpointConfig c;
  c.model = "small-chat";
  c.base_url = "http://h:1";
  EXPECT_EQ(c.id(), "small-chat@http://h:1");
  c.name = "mock:x";
  EXPECT_EQ(c.id(), "mock:x");
}
