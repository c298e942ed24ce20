#pragma once

#include <chrono>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfdistill/teacher.hpp"

namespace cfdistill {

/// Connection settings for an OpenAI-style chat-completion endpoint.
struct EndpointConfig {
  std::string base_url = "https://api.deepseek.com/v1";
  std::string model_name = "deepseek-chat";
  std::string api_key_env = "CFDISTILL_API_KEY";  // name of the variable, never the key
  double temperature = 0.7;
  int max_tokens = 1024;
  double timeout_s = 120.0;
  int max_retries = 3;
  double retry_backoff_s = 2.0;
  int max_concurrent = 4;
  double requests_per_second = 2.0;
  bool use_n = false;  // one request with n=K instead of K requests

  void validate() const;
  static EndpointConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Blocking token bucket shared by request workers.
class TokenBucket {
 public:
  TokenBucket(double rate_per_s, double burst);
  void acquire();

 private:
  std::mutex mutex_;
  double rate_;
  double burst_;
  double tokens_;
  std::chrono::steady_clock::time_point last_;
};

/// Request body for one chat completion.
nlohmann::json make_chat_request(const EndpointConfig& cfg, const PromptBundle& prompt, int n);

/// Contents of choices[i].message.content; throws Error on a malformed body.
std::vector<std::string> parse_chat_response(const nlohmann::json& body);

/// Teacher that queries a remote endpoint. The API key is read from the
/// environment at construction; a missing key throws before any request.
class EndpointTeacher final : public Teacher {
 public:
  explicit EndpointTeacher(EndpointConfig cfg);

  std::vector<std::vector<TeacherResponse>> ask_all(std::span<const Scenario> scenarios,
                                                    int k) override;

 private:
  /// One HTTP round trip with retries. Returns generated texts or throws.
  std::vector<std::string> complete(const PromptBundle& prompt, int n);
  std::vector<TeacherResponse> ask_one(const Scenario& scenario, int k);

  EndpointConfig cfg_;
  std::string api_key_;
  std::string scheme_host_port_;
  std::string path_prefix_;
  TokenBucket bucket_;
};

}  // namespace cfdistill
