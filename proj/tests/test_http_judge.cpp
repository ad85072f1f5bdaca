#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "prefgrpo/http_judge.hpp"

using namespace prefgrpo;

namespace {

// Local judge on an ephemeral port. `reply` maps the parsed request to the
// response body.
class FakeJudge {
 public:
  using Handler = std::function<std::string(const nlohmann::json&)>;

  explicit FakeJudge(Handler reply) : reply_(std::move(reply)) {
    srv_.Post("/judge", [this](const httplib::Request& req, httplib::Response& res) {
      ++calls;
      last_auth = req.get_header_value("Authorization");
      if (fail_first > 0) {
        --fail_first;
        res.status = 503;
        return;
      }
      res.set_content(reply_(nlohmann::json::parse(req.body)), "application/json");
    });
    srv_.Post("/api/generate", [](const httplib::Request& req, httplib::Response& res) {
      const auto j = nlohmann::json::parse(req.body);
      nlohmann::json d = nlohmann::json::array();
      for (const auto& t : j.at("testpoints")) d.push_back("check " + t.get<std::string>());
      res.set_content(nlohmann::json{{"prompt", "a " + j.at("subject").get<std::string>()}, {"descriptions", d}}.dump(),
                      "application/json");
    });
    port_ = srv_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { srv_.listen_after_bind(); });
    srv_.wait_until_ready();
  }
  ~FakeJudge() {
    srv_.stop();
    thread_.join();
  }

  JudgeEndpoint endpoint(const std::string& prefix = "") const {
    JudgeEndpoint ep;
    ep.url = "http://127.0.0.1:" + std::to_string(port_) + prefix;
    ep.backoff = std::chrono::milliseconds(1);
    ep.timeout = std::chrono::milliseconds(2000);
    return ep;
  }

  std::atomic<int> calls{0};
  std::atomic<int> fail_first{0};
  std::string last_auth;

 private:
  Handler reply_;
  httplib::Server srv_;
  int port_ = 0;
  std::thread thread_;
};

PromptSpec two_point_spec() {
  PromptSpec s;
  s.id = 7;
  s.testpoints = {"Color", "Shape"};
  s.prompt = "a red square";
  s.descriptions = {"is it red", "is it square"};
  return s;
}

std::string scores_reply(const nlohmann::json& req, std::vector<nlohmann::json> scores) {
  nlohmann::json results = nlohmann::json::array();
  for (std::size_t j = 0; j < req.at("testpoints").size() && j < scores.size(); ++j)
    results.push_back({{"id", req.at("testpoints")[j].at("id")}, {"score", scores[j]}, {"rationale", "seen"}});
  return nlohmann::json{{"results", results}}.dump();
}

}  // namespace

TEST(HttpJudge, WellFormedResponse) {
  nlohmann::json seen;
  FakeJudge judge([&](const nlohmann::json& req) {
    seen = req;
    return scores_reply(req, {1, 0});
  });
  auto ep = judge.endpoint();
  ep.token = "secret";
  const auto r = http_judge(ep, two_point_spec(), "samples/7.json");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].score, 1);
  EXPECT_EQ(r[1].score, 0);
  EXPECT_EQ(r[1].sub_dimension, "Shape");
  EXPECT_EQ(r[0].prompt_id, 7u);
  EXPECT_EQ(r[0].rationale, "seen");
  EXPECT_EQ(seen["prompt"], "a red square");
  EXPECT_EQ(seen["sample_ref"], "samples/7.json");
  EXPECT_EQ(seen["testpoints"][1]["description"], "is it square");
  EXPECT_EQ(judge.last_auth, "Bearer secret");
}

TEST(HttpJudge, MissingIdIsProtocolError) {
  FakeJudge judge([](const nlohmann::json& req) { return scores_reply(req, {1}); });
  EXPECT_THROW(http_judge(judge.endpoint(), two_point_spec(), "s"), ProtocolError);
}

TEST(HttpJudge, NonBinaryScoreIsProtocolError) {
  FakeJudge judge([](const nlohmann::json& req) { return scores_reply(req, {0.5, 1}); });
  EXPECT_THROW(http_judge(judge.endpoint(), two_point_spec(), "s"), ProtocolError);
}

TEST(HttpJudge, MalformedBodyIsProtocolError) {
  FakeJudge judge([](const nlohmann::json&) { return std::string("not json at all"); });
  try {
    http_judge(judge.endpoint(), two_point_spec(), "s");
    FAIL() << "expected ProtocolError";
  } catch (const ProtocolError& e) {
    EXPECT_NE(std::string(e.what()).find("not json at all"), std::string::npos);
  }
}

TEST(HttpJudge, RetriesServerErrors) {
  FakeJudge judge([](const nlohmann::json& req) { return scores_reply(req, {1, 1}); });
  judge.fail_first = 2;
  const auto r = http_judge(judge.endpoint(), two_point_spec(), "s");
  EXPECT_EQ(r.size(), 2u);
  EXPECT_EQ(judge.calls, 3);

  judge.calls = 0;
  judge.fail_first = 100;
  auto ep = judge.endpoint();
  ep.max_retries = 2;
  EXPECT_THROW(http_judge(ep, two_point_spec(), "s"), JudgeUnavailable);
  EXPECT_EQ(judge.calls, 3);
}

TEST(HttpJudge, UnreachableEndpointIsUnavailable) {
  JudgeEndpoint ep;
  ep.url = "http://127.0.0.1:1";
  ep.max_retries = 1;
  ep.backoff = std::chrono::milliseconds(1);
  ep.timeout = std::chrono::milliseconds(200);
  EXPECT_THROW(http_judge(ep, two_point_spec(), "s"), JudgeUnavailable);
}

TEST(HttpJudge, BackoffDoublesBetweenAttempts) {
  std::vector<std::chrono::steady_clock::time_point> stamps;
  const JudgeTransport down = [&](const std::string&, const std::string&) -> std::optional<HttpReply> {
    stamps.push_back(std::chrono::steady_clock::now());
    return std::nullopt;
  };
  JudgeEndpoint ep;
  ep.url = "http://unused";
  ep.max_retries = 3;
  ep.backoff = std::chrono::milliseconds(20);
  EXPECT_THROW(post_json(ep, down, "/judge", nlohmann::json::object()), JudgeUnavailable);
  ASSERT_EQ(stamps.size(), 4u);
  const auto gap = [&](int i) { return std::chrono::duration<double, std::milli>(stamps[i + 1] - stamps[i]).count(); };
  EXPECT_GE(gap(0), 20.0);
  EXPECT_GE(gap(1), 40.0);
  EXPECT_GE(gap(2), 80.0);
}

TEST(HttpJudge, ClientErrorIsNotRetried) {
  int calls = 0;
  const JudgeTransport bad = [&](const std::string&, const std::string&) -> std::optional<HttpReply> {
    ++calls;
    return HttpReply{400, "bad request"};
  };
  JudgeEndpoint ep;
  ep.url = "http://unused";
  EXPECT_THROW(post_json(ep, bad, "/judge", nlohmann::json::object()), ProtocolError);
  EXPECT_EQ(calls, 1);
}

TEST(HttpJudge, AllJobsKeepOrderUnderConcurrency) {
  FakeJudge judge([](const nlohmann::json& req) {
    // Score depends on the sample so order mix-ups would show.
    const int odd = std::stoi(req.at("sample_ref").get<std::string>()) % 2;
    return scores_reply(req, {odd, 1 - odd});
  });
  std::vector<JudgeJob> jobs;
  for (int i = 0; i < 12; ++i) {
    auto s = two_point_spec();
    s.id = i;
    jobs.push_back({s, {}, std::to_string(i)});
  }
  auto ep = judge.endpoint();
  ep.max_in_flight = 4;
  const auto r = http_judge_all(ep, jobs, httplib_transport(ep));
  ASSERT_EQ(r.size(), 24u);
  for (int i = 0; i < 12; ++i) {
    EXPECT_EQ(r[2 * i].prompt_id, static_cast<std::uint64_t>(i));
    EXPECT_EQ(r[2 * i].score, i % 2);
    EXPECT_EQ(r[2 * i + 1].score, 1 - i % 2);
  }
}

TEST(HttpGenerate, FillsPromptAndDescriptions) {
  FakeJudge judge([](const nlohmann::json& req) { return scores_reply(req, {}); });
  const auto ep = judge.endpoint("/api/");
  PromptSpec s;
  s.subject = "animals";
  s.testpoints = {"Color", "Hand"};
  const auto out = http_generate(ep, s, httplib_transport(ep));
  EXPECT_EQ(out.prompt, "a animals");
  EXPECT_EQ(out.descriptions, (std::vector<std::string>{"check Color", "check Hand"}));
}

TEST(Endpoint, FromEnvironment) {
  ::unsetenv(kJudgeUrlEnv);
  EXPECT_THROW(endpoint_from_env(), ConfigError);
  ::setenv(kJudgeUrlEnv, "http://example.invalid:9", 1);
  ::setenv(kJudgeTokenEnv, "tok", 1);
  const auto ep = endpoint_from_env();
  EXPECT_EQ(ep.url, "http://example.invalid:9");
  EXPECT_EQ(ep.token, "tok");
  ::unsetenv(kJudgeUrlEnv);
  ::unsetenv(kJudgeTokenEnv);
  EXPECT_EQ(split_url("http://h:1/a/b/").second, "/a/b");
  EXPECT_THROW(split_url("h:1"), ConfigError);
}
