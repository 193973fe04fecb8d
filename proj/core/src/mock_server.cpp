#include "xplain/mock_server.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

#include "xplain/errors.hpp"
#include "xplain/tokenizer.hpp"

namespace xplain::chat {

using nlohmann::json;

namespace {

std::vector<std::string> string_list(const json& j, const char* key) {
  std::vector<std::string> out;
  if (auto it = j.find(key); it != j.end()) {
    if (it->is_string())
      out.push_back(it->get<std::string>());
    else
      out = it->get<std::vector<std::string>>();
  }
  return out;
}

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const char* what) {
  for (const auto& [key, _] : j.items())
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ParseError(std::string("unknown ") + what + " key '" + key + "'");
}

MockRule rule_from_json(const json& j) {
  MockRule r;
  check_keys(j, {"match", "reply", "status", "body", "keyword_reply", "times"}, "mock rule");
  if (auto m = j.find("match"); m != j.end()) {
    check_keys(*m, {"last_user_contains", "any_contains", "n_messages"}, "mock match");
    r.last_user_contains = string_list(*m, "last_user_contains");
    r.any_contains = string_list(*m, "any_contains");
    if (m->contains("n_messages")) r.n_messages = m->at("n_messages").get<std::size_t>();
  }
  if (j.contains("reply")) r.reply = j.at("reply").get<std::string>();
  r.status = j.value("status", 200);
  r.body = j.value("body", "");
  if (auto k = j.find("keyword_reply"); k != j.end()) {
    MockRule::KeywordReply kr;
    for (const auto& [word, label] : k->at("table").items()) kr.table[word] = label.get<std::string>();
    kr.quoted_scope = k->value("scope", "quoted") == "quoted";
    if (k->contains("default")) kr.fallback = k->at("default").get<std::string>();
    r.keyword_reply = std::move(kr);
  }
  if (j.contains("times")) r.times = j.at("times").get<std::size_t>();
  if (r.status == 200 && !r.reply && !r.keyword_reply)
    throw ParseError("mock rule needs one of reply, keyword_reply or a non-200 status");
  return r;
}

ChatTranscript transcript_from_request(const json& req) {
  ChatTranscript t;
  for (const auto& m : req.at("messages")) t.add(parse_role(m.at("role").get<std::string>()), m.at("content").get<std::string>());
  t.temperature = req.value("temperature", 0.0);
  return t;
}

const ChatMessage* last_user(const ChatTranscript& t) {
  for (auto it = t.messages.rbegin(); it != t.messages.rend(); ++it)
    if (it->role == Role::user) return &*it;
  return nullptr;
}

bool matches(const MockRule& r, const ChatTranscript& t) {
  if (r.n_messages && t.messages.size() != *r.n_messages) return false;
  const ChatMessage* lu = last_user(t);
  for (const auto& s : r.last_user_contains)
    if (!lu || lu->content.find(s) == std::string::npos) return false;
  for (const auto& s : r.any_contains) {
    bool hit = false;
    for (const auto& m : t.messages) hit = hit || m.content.find(s) != std::string::npos;
    if (!hit) return false;
  }
  return true;
}

std::optional<std::string> keyword_answer(const MockRule::KeywordReply& kr, const ChatTranscript& t) {
  const ChatMessage* lu = last_user(t);
  std::string_view scope = lu ? std::string_view(lu->content) : std::string_view();
  if (kr.quoted_scope) {
    // First line holding a quote, between its first and last quote.
    const auto open = scope.find('"');
    if (open == std::string_view::npos) {
      scope = {};
    } else {
      const auto eol = std::min(scope.find('\n', open), scope.size());
      const auto close = scope.substr(0, eol).rfind('"');
      scope = close > open ? scope.substr(open + 1, close - open - 1) : std::string_view();
    }
  }
  for (const auto& tok : tokenize(scope).tokens)
    if (auto it = kr.table.find(tok); it != kr.table.end()) return it->second;
  return kr.fallback;
}

}  // namespace

std::string completion_body(const std::string& model, const std::string& content, std::size_t serial) {
  json j{{"id", "mock-" + std::to_string(serial)},
         {"object", "chat.completion"},
         {"model", model},
         {"choices", json::array({{{"index", 0},
                                   {"message", {{"role", "assistant"}, {"content", content}}},
                                   {"finish_reason", "stop"}}})}};
  return j.dump();
}

MockFixture::MockFixture(std::vector<MockRule> rules, std::optional<MockResponse> fallback)
    : rules_(std::move(rules)), used_(rules_.size(), 0), fallback_(std::move(fallback)) {}

MockFixture MockFixture::from_json(const std::string& content) {
  json j;
  try {
    j = json::parse(content);
  } catch (const json::exception& e) {
    throw ParseError(std::string("mock fixture: ") + e.what());
  }
  std::vector<MockRule> rules;
  try {
    for (const auto& r : j.at("rules")) rules.push_back(rule_from_json(r));
  } catch (const json::exception& e) {
    throw ParseError(std::string("mock fixture rule: ") + e.what());
  }
  std::optional<MockResponse> fallback;
  if (auto d = j.find("default"); d != j.end()) {
    MockResponse resp{d->value("status", 200), ""};
    resp.body = resp.status == 200 ? d->value("reply", "") : d->value("body", "");
    fallback = resp;
  }
  return MockFixture(std::move(rules), std::move(fallback));
}

MockFixture MockFixture::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open mock fixture '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

MockResponse MockFixture::respond(const std::string& request_body) {
  ChatTranscript t;
  std::string model = "mock";
  try {
    const auto req = json::parse(request_body);
    t = transcript_from_request(req);
    model = req.value("model", model);
  } catch (const std::exception& e) {
    return {400, std::string("bad request: ") + e.what()};
  }

  std::lock_guard lock(*mutex_);
  received_.push_back(t);
  const auto serial = served_++;
  for (std::size_t i = 0; i < rules_.size(); ++i) {
    const auto& r = rules_[i];
    if (r.times && used_[i] >= *r.times) continue;
    if (!matches(r, t)) continue;
    std::optional<std::string> content;
    if (r.status != 200) {
      ++used_[i];
      return {r.status, r.body};
    }
    content = r.keyword_reply ? keyword_answer(*r.keyword_reply, t) : r.reply;
    if (!content) continue;
    ++used_[i];
    return {200, completion_body(model, *content, serial)};
  }
  if (fallback_) {
    if (fallback_->status == 200) return {200, completion_body(model, fallback_->body, serial)};
    return *fallback_;
  }
  return {404, "no matching mock rule"};
}

std::vector<ChatTranscript> MockFixture::received() const {
  std::lock_guard lock(*mutex_);
  return received_;
}

struct MockServer::Impl {
  httplib::Server server;
};

MockServer::MockServer(MockFixture fixture)
    : fixture_(std::make_unique<MockFixture>(std::move(fixture))), impl_(std::make_unique<Impl>()) {
  impl_->server.Post(R"(.*)", [this](const httplib::Request& req, httplib::Response& res) {
    const auto out = fixture_->respond(req.body);
    res.status = out.status;
    res.set_content(out.body, out.status == 200 ? "application/json" : "text/plain");
  });
}

MockServer::~MockServer() { stop(); }

int MockServer::start(int port) {
  if (port == 0)
    port_ = impl_->server.bind_to_any_port("127.0.0.1");
  else
    port_ = impl_->server.bind_to_port("127.0.0.1", port) ? port : -1;
  if (port_ <= 0) throw std::runtime_error("mock server: cannot bind port " + std::to_string(port));
  thread_ = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port_;
}

void MockServer::serve_forever(int port) {
  if (!impl_->server.bind_to_port("127.0.0.1", port))
    throw std::runtime_error("mock server: cannot bind port " + std::to_string(port));
  port_ = port;
  impl_->server.listen_after_bind();
}

void MockServer::stop() {
  impl_->server.stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace xplain::chat
