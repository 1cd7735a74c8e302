#include <string>

#include "httplib.h"
#include "json.hpp"

#include "ehrw/rewriter.hpp"

namespace ehrw {

using nlohmann::json;

std::vector<GeneratedText> external_generate(const EndpointConfig& endpoint,
                                             const std::string& prompt_text, int n) {
  if (n < 1) throw PreconditionError("external_generate: n must be >= 1");
  httplib::Client client(endpoint.host, endpoint.port);
  client.set_connection_timeout(endpoint.timeout_sec, 0);
  client.set_read_timeout(endpoint.timeout_sec, 0);

  httplib::Headers headers;
  if (!endpoint.auth_token.empty()) {
    headers.emplace("Authorization", "Bearer " + endpoint.auth_token);
  }

  json request;
  request["prompt"] = prompt_text;
  request["n"] = n;
  request["want_logprobs"] = true;

  auto res = client.Post(endpoint.path, headers, request.dump(), "application/json");
  if (!res) {
    throw EndpointUnavailableError("generator endpoint unreachable: " + endpoint.host + ":" +
                                   std::to_string(endpoint.port));
  }
  if (res->status != 200) {
    throw EndpointUnavailableError("generator endpoint returned status " +
                                   std::to_string(res->status));
  }

  json body;
  try {
    body = json::parse(res->body);
  } catch (const json::exception& e) {
    throw MalformedResponseError(std::string("generator response is not JSON: ") + e.what());
  }
  if (!body.contains("texts") || !body["texts"].is_array()) {
    throw MalformedResponseError("generator response missing 'texts' array");
  }

  std::vector<GeneratedText> out;
  for (const auto& t : body["texts"]) {
    if (!t.is_string()) throw MalformedResponseError("'texts' entries must be strings");
    out.push_back({t.get<std::string>(), std::nullopt});
  }
  if (body.contains("logprobs")) {
    const auto& lps = body["logprobs"];
    if (!lps.is_array() || lps.size() != out.size()) {
      throw MalformedResponseError("'logprobs' must parallel 'texts'");
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!lps[i].is_number()) throw MalformedResponseError("'logprobs' entries must be numbers");
      out[i].logprob = lps[i].get<double>();
    }
  }
  return out;
}

}  // namespace ehrw
