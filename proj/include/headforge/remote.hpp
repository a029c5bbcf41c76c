// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <openssl/evp.h>

#include <bit>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <string>
#include <thread>
#include <vector>

#include "headforge/error.hpp"
#include "headforge/guidance.hpp"
#include "headforge/image.hpp"
#include "httplib.h"
#include "json.hpp"

namespace headforge {

inline constexpr const char* kProtocolVersion = "1";

inline std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw ParseError("base64 length is not a multiple of 4");
  std::vector<std::uint8_t> out(3 * (text.size() / 4));
  const int n = EVP_DecodeBlock(out.data(), reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw ParseError("invalid base64 payload");
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

/// Tensor as {"shape": [H, W, C], "data_b64": little-endian f32}.
inline nlohmann::json encode_tensor(const Image& img) {
  std::vector<std::uint8_t> bytes(img.size() * 4);
  for (std::size_t i = 0; i < img.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(img.data[i]);
    for (int b = 0; b < 4; ++b) bytes[i * 4 + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  return {{"shape", {img.height, img.width, img.channels}}, {"data_b64", base64_encode(bytes)}};
}

inline Image decode_tensor(const nlohmann::json& j) {
  const auto& shape = j.at("shape");
  if (!shape.is_array() || shape.size() != 3) throw ShapeError("tensor shape must be [H, W, C]");
  Image img(shape[0].get<int>(), shape[1].get<int>(), shape[2].get<int>());
  const auto bytes = base64_decode(j.at("data_b64").get<std::string>());
  if (bytes.size() != img.size() * 4) throw ShapeError("tensor payload does not match its shape");
  for (std::size_t i = 0; i < img.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= std::uint32_t(bytes[i * 4 + b]) << (8 * b);
    img.data[i] = std::bit_cast<float>(bits);
  }
  return img;
}

inline nlohmann::json png_field(const Image& img) {
  if (img.data.empty()) return nullptr;
  return base64_encode(encode_png(img));
}

inline Image png_from_field(const nlohmann::json& j) {
  if (j.is_null()) return {};
  return decode_png(base64_decode(j.get<std::string>()));
}

inline nlohmann::json request_to_json(const ScoreRequest& r) {
  return {
      {"mode", to_string(r.mode)},
      {"image", encode_tensor(r.image)},
      {"prompt", r.prompt},
      {"instruction", r.instruction ? nlohmann::json(*r.instruction) : nlohmann::json(nullptr)},
      {"timestep", r.timestep},
      {"noise_seed", r.noise_seed},
      {"cfg_scale", r.cfg_scale},
      {"edit_scale", r.edit_scale},
      {"landmark_png_b64", png_field(r.landmark_map)},
      {"reference_png_b64", png_field(r.reference_image)},
  };
}

inline ScoreRequest request_from_json(const nlohmann::json& j) {
  ScoreRequest r;
  const auto mode = j.at("mode").get<std::string>();
  if (mode == "generate") r.mode = GuidanceMode::Generate;
  else if (mode == "edit") r.mode = GuidanceMode::Edit;
  else throw ValidationError("mode: unknown value '" + mode + "'");
  r.image = decode_tensor(j.at("image"));
  r.prompt = j.at("prompt").get<std::string>();
  if (!j.at("instruction").is_null()) r.instruction = j.at("instruction").get<std::string>();
  r.timestep = j.at("timestep").get<int>();
  r.noise_seed = j.at("noise_seed").get<std::uint64_t>();
  r.cfg_scale = j.at("cfg_scale").get<double>();
  r.edit_scale = j.at("edit_scale").get<double>();
  r.landmark_map = png_from_field(j.at("landmark_png_b64"));
  r.reference_image = png_from_field(j.at("reference_png_b64"));
  return r;
}

inline nlohmann::json gradient_to_json(const ImageGradient& g) {
  return {{"gradient", encode_tensor(g.gradient)}, {"w_t", g.w_t}};
}

/// Config value, unless HEADFORGE_ENDPOINT is set.
inline std::string resolve_endpoint(const std::string& configured) {
  if (const char* env = std::getenv("HEADFORGE_ENDPOINT"); env && *env) return env;
  return configured;
}

struct RemoteOptions {
  int attempts = 3;
  std::chrono::milliseconds backoff{200};  // doubled after each failed attempt
  std::chrono::seconds timeout{120};
};

/// Score provider speaking the JSON/HTTP protocol to a guidance service.
class RemoteScoreProvider : public ScoreProvider {
 public:
  explicit RemoteScoreProvider(std::string endpoint, RemoteOptions opts = {})
      : endpoint_(std::move(endpoint)), opts_(opts) {
    if (endpoint_.empty()) throw ConfigError("remote provider: endpoint is not configured");
  }

  const std::string& endpoint() const { return endpoint_; }

  /// Checks GET /health; a protocol other than "1" is a fatal config error.
  nlohmann::json health() {
    auto res = with_retries([&](httplib::Client& c) { return c.Get("/health"); }, "/health");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("health response: ") + e.what());
    }
    const auto proto = j.value("protocol", std::string());
    if (proto != kProtocolVersion)
      throw ConfigError("guidance service speaks protocol '" + proto + "', expected '" + kProtocolVersion + "'");
    return j;
  }

  ImageGradient score(const ScoreRequest& request) override {
    request.validate();
    const std::string body = request_to_json(request).dump();
    auto res = with_retries(
        [&](httplib::Client& c) { return c.Post("/score", body, "application/json"); }, "/score");
    ImageGradient g;
    try {
      const auto j = nlohmann::json::parse(res->body);
      g.gradient = decode_tensor(j.at("gradient"));
      g.w_t = j.value("w_t", 0.0);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("score response: ") + e.what());
    }
    if (!g.gradient.same_shape(request.image))
      throw ShapeError("score response shape does not match the request image");
    return g;
  }

 private:
  template <class Call>
  httplib::Result with_retries(Call&& call, const char* path) {
    auto wait = opts_.backoff;
    std::string last;
    for (int attempt = 1; attempt <= opts_.attempts; ++attempt) {
      httplib::Client client(endpoint_);
      client.set_connection_timeout(opts_.timeout);
      client.set_read_timeout(opts_.timeout);
      client.set_write_timeout(opts_.timeout);
      auto res = call(client);
      if (res && res->status == 200) return res;
      if (res && res->status >= 400 && res->status < 500)
        throw ValidationError(std::string(path) + ": service rejected the request (HTTP " +
                              std::to_string(res->status) + "): " + res->body);
      last = res ? "HTTP " + std::to_string(res->status) : httplib::to_string(res.error());
      if (attempt < opts_.attempts) {
        std::this_thread::sleep_for(wait);
        wait *= 2;
      }
    }
    throw TransportError(std::string(path) + " failed after " + std::to_string(opts_.attempts) +
                         " attempts: " + last);
  }

  std::string endpoint_;
  RemoteOptions opts_;
};

}  // namespace headforge
