#include "cfdistill/endpoint_teacher.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <thread>

#include <httplib.h>

namespace cfdistill {

void EndpointConfig::validate() const {
  if (base_url.empty()) throw std::invalid_argument("endpoint.base_url must be set");
  if (model_name.empty()) throw std::invalid_argument("endpoint.model_name must be set");
  if (api_key_env.empty()) throw std::invalid_argument("endpoint.api_key_env must be set");
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("endpoint.temperature must be > 0 for self-consistency sampling");
  }
  if (max_tokens <= 0) throw std::invalid_argument("endpoint.max_tokens must be > 0");
  if (!(timeout_s > 0.0)) throw std::invalid_argument("endpoint.timeout_s must be > 0");
  if (max_retries < 0) throw std::invalid_argument("endpoint.max_retries must be >= 0");
  if (max_concurrent < 1) throw std::invalid_argument("endpoint.max_concurrent must be >= 1");
  if (!(requests_per_second > 0.0)) {
    throw std::invalid_argument("endpoint.requests_per_second must be > 0");
  }
}

EndpointConfig EndpointConfig::from_json(const nlohmann::json& j) {
  EndpointConfig c;
  c.base_url = j.value("base_url", c.base_url);
  c.model_name = j.value("model_name", c.model_name);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.temperature = j.value("temperature", c.temperature);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.timeout_s = j.value("timeout_s", c.timeout_s);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.retry_backoff_s = j.value("retry_backoff_s", c.retry_backoff_s);
  c.max_concurrent = j.value("max_concurrent", c.max_concurrent);
  c.requests_per_second = j.value("requests_per_second", c.requests_per_second);
  c.use_n = j.value("use_n", c.use_n);
  return c;
}

nlohmann::json EndpointConfig::to_json() const {
  return {{"base_url", base_url},         {"model_name", model_name},
          {"api_key_env", api_key_env},   {"temperature", temperature},
          {"max_tokens", max_tokens},     {"timeout_s", timeout_s},
          {"max_retries", max_retries},   {"retry_backoff_s", retry_backoff_s},
          {"max_concurrent", max_concurrent}, {"requests_per_second", requests_per_second},
          {"use_n", use_n}};
}

TokenBucket::TokenBucket(double rate_per_s, double burst)
    : rate_(rate_per_s), burst_(std::max(1.0, burst)), tokens_(std::max(1.0, burst)),
      last_(std::chrono::steady_clock::now()) {}

void TokenBucket::acquire() {
  for (;;) {
    std::chrono::duration<double> wait{};
    {
      std::lock_guard lock(mutex_);
      const auto now = std::chrono::steady_clock::now();
      tokens_ = std::min(burst_, tokens_ + rate_ * std::chrono::duration<double>(now - last_).count());
      last_ = now;
      if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
      }
      wait = std::chrono::duration<double>((1.0 - tokens_) / rate_);
    }
    std::this_thread::sleep_for(wait);
  }
}

nlohmann::json make_chat_request(const EndpointConfig& cfg, const PromptBundle& prompt, int n) {
  nlohmann::json body;
  body["model"] = cfg.model_name;
  body["messages"] = nlohmann::json::array(
      {{{"role", "system"}, {"content", prompt.system_message}},
       {{"role", "user"}, {"content", prompt.user_message}}});
  body["temperature"] = cfg.temperature;
  body["max_tokens"] = cfg.max_tokens;
  if (n > 1) body["n"] = n;
  return body;
}

std::vector<std::string> parse_chat_response(const nlohmann::json& body) {
  if (!body.contains("choices") || !body["choices"].is_array()) {
    throw Error("chat response has no choices array");
  }
  std::vector<std::string> out;
  for (const auto& choice : body["choices"]) {
    const auto& content = choice.at("message").at("content");
    out.push_back(content.is_string() ? content.get<std::string>() : std::string());
  }
  return out;
}

namespace {

struct SplitUrl {
  std::string scheme_host_port;
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("endpoint.base_url needs a scheme");
  const auto path_start = url.find('/', scheme_end + 3);
  SplitUrl out;
  out.scheme_host_port = url.substr(0, path_start);
  out.path = path_start == std::string::npos ? std::string() : url.substr(path_start);
  while (!out.path.empty() && out.path.back() == '/') out.path.pop_back();
  return out;
}

}  // namespace

EndpointTeacher::EndpointTeacher(EndpointConfig cfg)
    : cfg_(std::move(cfg)),
      bucket_(cfg_.requests_per_second, static_cast<double>(cfg_.max_concurrent)) {
  cfg_.validate();
  const char* key = std::getenv(cfg_.api_key_env.c_str());
  if (key == nullptr || *key == '\0') {
    throw std::invalid_argument("environment variable " + cfg_.api_key_env +
                                " holding the API key is not set");
  }
  api_key_ = key;
  const auto url = split_url(cfg_.base_url);
  scheme_host_port_ = url.scheme_host_port;
  path_prefix_ = url.path;
}

std::vector<std::string> EndpointTeacher::complete(const PromptBundle& prompt, int n) {
  httplib::Client client(scheme_host_port_);
  const auto timeout = std::chrono::duration<double>(cfg_.timeout_s);
  client.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(timeout));
  client.set_bearer_token_auth(api_key_);

  const std::string body = make_chat_request(cfg_, prompt, n).dump();
  const std::string path = path_prefix_ + "/chat/completions";
  std::string last_error;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(
          cfg_.retry_backoff_s * std::pow(2.0, attempt - 1)));
    }
    bucket_.acquire();
    auto res = client.Post(path, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) {
      try {
        return parse_chat_response(nlohmann::json::parse(res->body));
      } catch (const std::exception& e) {
        last_error = std::string("malformed response: ") + e.what();
        continue;
      }
    }
    last_error = "HTTP " + std::to_string(res->status);
    const bool retryable = res->status == 429 || res->status >= 500;
    if (!retryable) break;
  }
  throw Error(last_error);
}

std::vector<TeacherResponse> EndpointTeacher::ask_one(const Scenario& scenario, int k) {
  const PromptBundle prompt = build_prompt(scenario.state);
  std::vector<TeacherResponse> out;
  if (cfg_.use_n) {
    try {
      auto texts = complete(prompt, k);
      for (auto& t : texts) {
        if (static_cast<int>(out.size()) == k) break;
        out.push_back(TeacherResponse::from_text(std::move(t)));
      }
      while (static_cast<int>(out.size()) < k) {
        out.push_back(TeacherResponse::from_transport_error("endpoint returned fewer choices"));
      }
    } catch (const Error& e) {
      out.assign(static_cast<std::size_t>(k), TeacherResponse::from_transport_error(e.what()));
    }
    return out;
  }
  for (int i = 0; i < k; ++i) {
    try {
      auto texts = complete(prompt, 1);
      out.push_back(texts.empty() ? TeacherResponse::from_transport_error("empty choices")
                                  : TeacherResponse::from_text(std::move(texts.front())));
    } catch (const Error& e) {
      out.push_back(TeacherResponse::from_transport_error(e.what()));
    }
  }
  return out;
}

std::vector<std::vector<TeacherResponse>> EndpointTeacher::ask_all(
    std::span<const Scenario> scenarios, int k) {
  std::vector<std::vector<TeacherResponse>> out(scenarios.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < scenarios.size();) {
      out[i] = ask_one(scenarios[i], k);
    }
  };
  const std::size_t n_workers =
      std::min<std::size_t>(static_cast<std::size_t>(cfg_.max_concurrent), scenarios.size());
  std::vector<std::jthread> pool;
  for (std::size_t w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  pool.clear();  // joins
  return out;
}

}  // namespace cfdistill
