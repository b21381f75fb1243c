#pragma once

#include <algorithm>
#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "embsteal/errors.hpp"
#include "embsteal/records.hpp"
#include "embsteal/teachers.hpp"

namespace embsteal {

inline const char* input_type_name(TextKind kind) { return kind == TextKind::query ? "search_query" : "search_document"; }

inline const LiveSource& live_source(const TeacherSpec& spec) {
  const auto* live = std::get_if<LiveSource>(&spec.source);
  if (!live) throw ConfigError("teacher " + spec.name + " is not a live source");
  return *live;
}

inline std::string request_path(WireProtocol p) { return p == WireProtocol::openai ? "/v1/embeddings" : "/v1/embed"; }

// Compact JSON body with keys in wire order. input_type is dropped when the
// spec does not support it.
inline std::string request_body(const TeacherSpec& spec, const std::vector<std::string>& texts,
                                std::optional<TextKind> input_type) {
  const LiveSource& live = live_source(spec);
  nlohmann::ordered_json body;
  body["model"] = live.model;
  if (live.protocol == WireProtocol::openai) {
    body["input"] = texts;
  } else {
    body["texts"] = texts;
  }
  if (input_type && spec.supports_input_type) body["input_type"] = input_type_name(*input_type);
  return body.dump();
}

namespace detail {

inline std::vector<double> parse_vector(const nlohmann::json& arr) {
  if (!arr.is_array() || arr.empty()) throw MalformedResponseError("embedding is not a non-empty array");
  std::vector<double> v;
  v.reserve(arr.size());
  for (const auto& x : arr) {
    if (!x.is_number()) throw MalformedResponseError("embedding holds a non-number");
    v.push_back(x.get<double>());
  }
  return v;
}

}  // namespace detail

// Vectors in request order, renormalized.
inline std::vector<EmbeddingVector> parse_response(const TeacherSpec& spec, const std::string& body, std::size_t n) {
  nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw MalformedResponseError("response is not a JSON object");
  std::vector<std::optional<std::vector<double>>> slots(n);
  if (live_source(spec).protocol == WireProtocol::openai) {
    if (!j.contains("data") || !j["data"].is_array()) throw MalformedResponseError("response lacks a data array");
    for (const auto& item : j["data"]) {
      if (!item.is_object() || !item.contains("index") || !item["index"].is_number_unsigned())
        throw MalformedResponseError("data item lacks an index");
      const auto idx = item["index"].get<std::size_t>();
      if (idx >= n || slots[idx]) throw MalformedResponseError("index out of range or repeated");
      if (!item.contains("embedding")) throw MalformedResponseError("data item lacks an embedding");
      slots[idx] = detail::parse_vector(item["embedding"]);
    }
  } else {
    if (!j.contains("embeddings")) throw MalformedResponseError("response lacks embeddings");
    const nlohmann::json* rows = &j["embeddings"];
    if (rows->is_object()) {
      if (!rows->contains("float")) throw MalformedResponseError("embeddings object lacks float");
      rows = &(*rows)["float"];
    }
    if (!rows->is_array() || rows->size() != n) throw MalformedResponseError("embeddings count differs from request");
    for (std::size_t i = 0; i < n; ++i) slots[i] = detail::parse_vector((*rows)[i]);
  }
  std::vector<EmbeddingVector> out;
  out.reserve(n);
  for (auto& s : slots) {
    if (!s) throw MalformedResponseError("response is missing an embedding");
    if (s->size() != spec.dim) throw MalformedResponseError("embedding dimension differs from spec");
    out.push_back(EmbeddingVector::normalized(std::move(*s)));
  }
  return out;
}

// One HTTP round trip. The key is read from the environment variable named
// by the live source.
inline std::vector<EmbeddingVector> live_embed(const TeacherSpec& spec, const std::vector<std::string>& texts,
                                               std::optional<TextKind> input_type) {
  const LiveSource& live = live_source(spec);
  if (texts.empty()) return {};
  if (texts.size() > live.batch_limit) {
    throw ConfigError("batch of " + std::to_string(texts.size()) + " exceeds the provider limit of " +
                      std::to_string(live.batch_limit));
  }
  const char* key = live.api_key_env.empty() ? nullptr : std::getenv(live.api_key_env.c_str());
  if (!key || !*key) throw ConfigError("environment variable " + live.api_key_env + " holds no API key");

  httplib::Client client(live.endpoint);
  client.set_connection_timeout(10);
  client.set_read_timeout(120);
  const httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};
  auto res = client.Post(request_path(live.protocol), headers, request_body(spec, texts, input_type), "application/json");
  if (!res) throw TransportError("request to " + live.endpoint + " failed: " + httplib::to_string(res.error()));
  if (res->status == 401 || res->status == 403) throw AuthError("provider rejected credentials (" + std::to_string(res->status) + ")");
  if (res->status == 429) throw RateLimitError("provider rate limit");
  if (res->status >= 500) throw TransportError("provider error " + std::to_string(res->status));
  if (res->status != 200) throw MalformedResponseError("unexpected status " + std::to_string(res->status));
  return parse_response(spec, res->body, texts.size());
}

// Splits batches by kind so each request carries a single input_type.
class LiveTeacher : public Teacher {
 public:
  explicit LiveTeacher(TeacherSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    live_source(spec_);
  }

  const TeacherSpec& spec() const override { return spec_; }

  std::vector<EmbeddingVector> embed(std::span<const TextRecord> batch) override {
    std::vector<EmbeddingVector> out(batch.size());
    const std::size_t limit = live_source(spec_).batch_limit;
    for (TextKind kind : {TextKind::query, TextKind::passage}) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < batch.size(); ++i)
        if (batch[i].kind == kind) idx.push_back(i);
      for (std::size_t start = 0; start < idx.size(); start += limit) {
        const std::size_t end = std::min(idx.size(), start + limit);
        std::vector<std::string> texts;
        for (std::size_t k = start; k < end; ++k) texts.push_back(batch[idx[k]].text);
        auto vecs = live_embed(spec_, texts, kind);
        for (std::size_t k = start; k < end; ++k) out[idx[k]] = std::move(vecs[k - start]);
      }
    }
    return out;
  }

 private:
  TeacherSpec spec_;
};

}  // namespace embsteal
