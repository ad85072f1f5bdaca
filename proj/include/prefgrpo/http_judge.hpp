#pragma once

// Client for an external judge / prompt-generation service speaking JSON
// over HTTP. Routes: POST <base>/judge and POST <base>/generate.

#include <chrono>
#include <cstdlib>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <fmt/format.h>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "prefgrpo/bench.hpp"
#include "prefgrpo/errors.hpp"
#include "prefgrpo/parallel.hpp"

namespace prefgrpo {

inline constexpr const char* kJudgeUrlEnv = "PREFGRPO_JUDGE_URL";
inline constexpr const char* kJudgeTokenEnv = "PREFGRPO_JUDGE_TOKEN";

struct JudgeEndpoint {
  std::string url;    // e.g. http://127.0.0.1:8080 or http://host/api
  std::string token;  // sent as a bearer token when non-empty
  std::chrono::milliseconds timeout{10000};
  std::size_t max_retries = 3;
  std::chrono::milliseconds backoff{200};  // doubled after every failed attempt
  std::size_t max_in_flight = 8;
};

/// Explicit URL wins; otherwise the environment. No URL at all is a
/// configuration problem, not an outage.
inline JudgeEndpoint endpoint_from_env(JudgeEndpoint ep = {}) {
  if (ep.url.empty())
    if (const char* u = std::getenv(kJudgeUrlEnv)) ep.url = u;
  if (ep.token.empty())
    if (const char* t = std::getenv(kJudgeTokenEnv)) ep.token = t;
  if (ep.url.empty()) throw ConfigError(fmt::format("no judge endpoint: pass one or set {}", kJudgeUrlEnv));
  return ep;
}

/// Splits "scheme://host[:port][/prefix]" into the origin and path prefix.
inline std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError(fmt::format("judge url '{}' lacks a scheme", url));
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, ""};
  std::string prefix = url.substr(slash);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  return {url.substr(0, slash), prefix};
}

struct HttpReply {
  int status = 0;
  std::string body;
};

/// One POST attempt; nullopt means the transport failed (refused, timed out).
using JudgeTransport = std::function<std::optional<HttpReply>(const std::string& path, const std::string& body)>;

inline JudgeTransport httplib_transport(const JudgeEndpoint& ep) {
  return [ep](const std::string& path, const std::string& body) -> std::optional<HttpReply> {
    const auto [origin, prefix] = split_url(ep.url);
    httplib::Client cli(origin);
    cli.set_connection_timeout(ep.timeout);
    cli.set_read_timeout(ep.timeout);
    cli.set_write_timeout(ep.timeout);
    httplib::Headers headers;
    if (!ep.token.empty()) headers.emplace("Authorization", "Bearer " + ep.token);
    auto res = cli.Post(prefix + path, headers, body, "application/json");
    if (!res) return std::nullopt;
    return HttpReply{res->status, res->body};
  };
}

namespace detail {

inline std::string clip_body(const std::string& body) {
  constexpr std::size_t kMax = 2000;
  return body.size() <= kMax ? body : body.substr(0, kMax) + "...";
}

}  // namespace detail

/// POSTs `request` with exponential backoff on transport failures and 5xx
/// replies. Anything else that is not a 2xx JSON body is a protocol error.
inline nlohmann::json post_json(const JudgeEndpoint& ep, const JudgeTransport& send, const std::string& path,
                                const nlohmann::json& request) {
  const std::string body = request.dump();
  auto wait = ep.backoff;
  std::string last = "no attempt made";
  for (std::size_t attempt = 0; attempt <= ep.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(wait);
      wait *= 2;
    }
    const auto reply = send(path, body);
    if (!reply) {
      last = "transport failure";
      continue;
    }
    if (reply->status >= 500) {
      last = fmt::format("HTTP {}", reply->status);
      continue;
    }
    if (reply->status < 200 || reply->status >= 300)
      throw ProtocolError(fmt::format("{} answered HTTP {}: {}", path, reply->status, detail::clip_body(reply->body)));
    try {
      return nlohmann::json::parse(reply->body);
    } catch (const nlohmann::json::exception&) {
      throw ProtocolError(fmt::format("{} answered with invalid JSON: {}", path, detail::clip_body(reply->body)));
    }
  }
  throw JudgeUnavailable(fmt::format("{}{} unavailable after {} attempts ({})", ep.url, path, ep.max_retries + 1, last));
}

inline nlohmann::json judge_request(const PromptSpec& spec, const std::string& sample_ref) {
  nlohmann::json tps = nlohmann::json::array();
  for (std::size_t j = 0; j < spec.testpoints.size(); ++j)
    tps.push_back({{"id", j}, {"description", spec.descriptions.empty() ? spec.testpoints[j] : spec.descriptions[j]}});
  return {{"prompt", spec.prompt.value_or("")}, {"testpoints", tps}, {"sample_ref", sample_ref}};
}

/// Every testpoint id answered exactly once with a binary score.
inline std::vector<TestpointResult> parse_judge_response(const PromptSpec& spec, const nlohmann::json& resp) {
  const std::string raw = detail::clip_body(resp.dump());
  if (!resp.is_object() || !resp.contains("results") || !resp.at("results").is_array())
    throw ProtocolError("judge response lacks a results array: " + raw);
  std::vector<std::optional<TestpointResult>> slots(spec.testpoints.size());
  for (const auto& item : resp.at("results")) {
    if (!item.is_object() || !item.contains("id") || !item.at("id").is_number_unsigned())
      throw ProtocolError("judge result without a valid id: " + raw);
    const auto id = item.at("id").get<std::size_t>();
    if (id >= slots.size()) throw ProtocolError(fmt::format("judge answered unknown testpoint id {}: {}", id, raw));
    if (slots[id]) throw ProtocolError(fmt::format("judge answered testpoint id {} twice: {}", id, raw));
    if (!item.contains("score") || !item.at("score").is_number())
      throw ProtocolError(fmt::format("judge result {} has no numeric score: {}", id, raw));
    const double s = item.at("score").get<double>();
    if (s != 0.0 && s != 1.0) throw ProtocolError(fmt::format("judge score {} for id {} is not binary: {}", s, id, raw));
    std::string why;
    if (item.contains("rationale") && item.at("rationale").is_string()) why = item.at("rationale").get<std::string>();
    slots[id] = TestpointResult{spec.id, id, spec.testpoints[id], s == 1.0 ? 1 : 0, std::move(why)};
  }
  std::vector<TestpointResult> out;
  for (std::size_t j = 0; j < slots.size(); ++j) {
    if (!slots[j]) throw ProtocolError(fmt::format("judge did not answer testpoint id {}: {}", j, raw));
    out.push_back(std::move(*slots[j]));
  }
  return out;
}

inline std::vector<TestpointResult> http_judge(const JudgeEndpoint& ep, const PromptSpec& spec,
                                               const std::string& sample_ref, const JudgeTransport& send) {
  return parse_judge_response(spec, post_json(ep, send, "/judge", judge_request(spec, sample_ref)));
}

inline std::vector<TestpointResult> http_judge(const JudgeEndpoint& ep, const PromptSpec& spec,
                                               const std::string& sample_ref) {
  return http_judge(ep, spec, sample_ref, httplib_transport(ep));
}

/// Judges every job with at most `max_in_flight` concurrent calls. Results
/// come back in job order whatever the completion order.
inline std::vector<TestpointResult> http_judge_all(const JudgeEndpoint& ep, std::span<const JudgeJob> jobs,
                                                   const JudgeTransport& send) {
  std::vector<std::vector<TestpointResult>> per_job(jobs.size());
  parallel_for(jobs.size(), std::max<std::size_t>(1, ep.max_in_flight),
               [&](std::size_t i) { per_job[i] = http_judge(ep, jobs[i].spec, jobs[i].sample_ref, send); });
  std::vector<TestpointResult> out;
  for (auto& v : per_job) out.insert(out.end(), v.begin(), v.end());
  return out;
}

/// Fills the prompt text and testpoint descriptions of a spec.
inline PromptSpec http_generate(const JudgeEndpoint& ep, PromptSpec spec, const JudgeTransport& send) {
  const auto resp = post_json(ep, send, "/generate",
                              {{"theme", spec.theme}, {"subject", spec.subject}, {"testpoints", spec.testpoints}});
  const std::string raw = detail::clip_body(resp.dump());
  if (!resp.is_object() || !resp.contains("prompt") || !resp.at("prompt").is_string())
    throw ProtocolError("generator response lacks a prompt string: " + raw);
  if (!resp.contains("descriptions") || !resp.at("descriptions").is_array() ||
      resp.at("descriptions").size() != spec.testpoints.size())
    throw ProtocolError("generator response needs one description per testpoint: " + raw);
  for (const auto& d : resp.at("descriptions"))
    if (!d.is_string()) throw ProtocolError("generator descriptions must be strings: " + raw);
  spec.prompt = resp.at("prompt").get<std::string>();
  spec.descriptions = resp.at("descriptions").get<std::vector<std::string>>();
  return spec;
}

}  // namespace prefgrpo
