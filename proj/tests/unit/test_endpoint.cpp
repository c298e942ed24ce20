#include <atomic>
#include <cstdlib>
#include <mutex>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "cfdistill/endpoint_teacher.hpp"

using namespace cfdistill;

namespace {

constexpr const char* kKeyEnv = "CFDISTILL_TEST_ENDPOINT_KEY";

// Local chat-completion stub. The first `fail_first` requests get HTTP 500.
class StubServer {
 public:
  explicit StubServer(int fail_first) : fail_first_(fail_first) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body);
      {
        std::lock_guard lock(mutex_);
        auth_ = req.get_header_value("Authorization");
        last_body_ = body;
      }
      if (requests_.fetch_add(1) < fail_first_) {
        res.status = 500;
        return;
      }
      const int n = body.value("n", 1);
      nlohmann::json choices = nlohmann::json::array();
      for (int i = 0; i < n; ++i) {
        choices.push_back({{"index", i},
                           {"message", {{"role", "assistant"},
                                        {"content", "Reasoning.\nFinal acceleration: 0.5 m/s^2"}}}});
      }
      res.set_content(nlohmann::json{{"choices", choices}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  std::string base_url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1"; }
  int requests() const { return requests_.load(); }
  std::string auth() {
    std::lock_guard lock(mutex_);
    return auth_;
  }
  nlohmann::json last_body() {
    std::lock_guard lock(mutex_);
    return last_body_;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  int fail_first_;
  std::atomic<int> requests_{0};
  std::mutex mutex_;
  std::string auth_;
  nlohmann::json last_body_;
};

EndpointConfig local_config(const std::string& url) {
  EndpointConfig cfg;
  cfg.base_url = url;
  cfg.model_name = "stub-model";
  cfg.api_key_env = kKeyEnv;
  cfg.retry_backoff_s = 0.01;
  cfg.requests_per_second = 1000.0;
  cfg.timeout_s = 5.0;
  return cfg;
}

}  // namespace

TEST(Endpoint, MissingKeyFailsBeforeAnyRequest) {
  StubServer server(0);
  unsetenv(kKeyEnv);
  EXPECT_THROW(EndpointTeacher{local_config(server.base_url())}, std::invalid_argument);
  EXPECT_EQ(server.requests(), 0);
}

TEST(Endpoint, RequestShapeAndBearerToken) {
  StubServer server(0);
  setenv(kKeyEnv, "test-secret", 1);
  EndpointTeacher teacher(local_config(server.base_url()));
  const auto set = generate_scenarios(default_scenario_specs(), 2, 1);
  const auto labeled = label_scenarios(set.scenarios, teacher, 5);
  EXPECT_EQ(server.requests(), 10);
  EXPECT_EQ(server.auth(), "Bearer test-secret");
  const auto body = server.last_body();
  EXPECT_EQ(body.at("model"), "stub-model");
  EXPECT_EQ(body.at("messages").size(), 2u);
  EXPECT_EQ(body.at("messages")[0].at("role"), "system");
  EXPECT_EQ(body.at("messages")[1].at("role"), "user");
  EXPECT_DOUBLE_EQ(body.at("temperature").get<double>(), 0.7);
  for (const auto& ls : labeled) {
    EXPECT_EQ(ls.label, 0.5);
    EXPECT_EQ(ls.vote_count, 5);
  }
  unsetenv(kKeyEnv);
}

TEST(Endpoint, UsesNChoices) {
  StubServer server(0);
  setenv(kKeyEnv, "k", 1);
  auto cfg = local_config(server.base_url());
  cfg.use_n = true;
  EndpointTeacher teacher(cfg);
  const auto set = generate_scenarios(default_scenario_specs(), 1, 1);
  const auto labeled = label_scenarios(set.scenarios, teacher, 5);
  EXPECT_EQ(server.requests(), 1);
  EXPECT_EQ(server.last_body().at("n"), 5);
  EXPECT_EQ(labeled[0].responses.size(), 5u);
  unsetenv(kKeyEnv);
}

TEST(Endpoint, RetriesServerErrors) {
  StubServer server(2);
  setenv(kKeyEnv, "k", 1);
  auto cfg = local_config(server.base_url());
  cfg.max_concurrent = 1;
  EndpointTeacher teacher(cfg);
  const auto set = generate_scenarios(default_scenario_specs(), 1, 1);
  const auto labeled = label_scenarios(set.scenarios, teacher, 1);
  EXPECT_EQ(server.requests(), 3);
  EXPECT_FALSE(labeled[0].flagged);
  unsetenv(kKeyEnv);
}

TEST(Endpoint, ExhaustedRetriesFlagScenario) {
  StubServer server(1000);
  setenv(kKeyEnv, "k", 1);
  auto cfg = local_config(server.base_url());
  cfg.max_retries = 1;
  EndpointTeacher teacher(cfg);
  const auto set = generate_scenarios(default_scenario_specs(), 1, 1);
  const auto labeled = label_scenarios(set.scenarios, teacher, 2);
  EXPECT_TRUE(labeled[0].flagged);
  EXPECT_FALSE(labeled[0].responses[0].transport_error.empty());
  unsetenv(kKeyEnv);
}

TEST(Endpoint, ParseResponse) {
  const auto j = nlohmann::json::parse(
      R"({"choices":[{"message":{"content":"a"}},{"message":{"content":"b"}}]})");
  EXPECT_EQ(parse_chat_response(j), (std::vector<std::string>{"a", "b"}));
  EXPECT_THROW(parse_chat_response(nlohmann::json::object()), Error);
}

TEST(Endpoint, ConfigNeverCarriesKey) {
  const auto j = EndpointConfig{}.to_json();
  EXPECT_EQ(j.at("api_key_env"), "CFDISTILL_API_KEY");
  EXPECT_FALSE(j.contains("api_key"));
  EndpointConfig bad;
  bad.temperature = 0.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
