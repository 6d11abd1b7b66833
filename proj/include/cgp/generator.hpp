#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cgp/concept_bank.hpp"

namespace cgp {

/// Offline generator with canned responses keyed by (canonical disease name,
/// template). Generation index i returns responses[i % size]. Diseases
/// without an entry get "[]", which the collector records as a warning.
class FixtureGenerator : public ConceptGenerator {
 public:
  using Key = std::pair<std::string, TemplateId>;

  FixtureGenerator() = default;
  explicit FixtureGenerator(std::map<Key, std::vector<std::string>> responses);

  /// Built-in responses for Asteroid Hyalosis, Diabetic Retinopathy and
  /// Central Retinal Vein Occlusion.
  static FixtureGenerator builtin();
  /// Surface forms in the built-in responses that name the same finding.
  static SynonymMap builtin_synonyms();
  /// Loads {"<disease>": {"explicit_concepts": [...], "vs_normal_comparison": [...]}}.
  static FixtureGenerator from_json(const nlohmann::json& doc);

  void set(std::string_view disease, TemplateId t, std::vector<std::string> responses);

  std::string name() const override { return "fixture"; }
  std::string generate(const GenerationCall& call) override;

 private:
  std::map<Key, std::vector<std::string>> responses_;
};

/// Settings for the chat-completion adapter. Read from the environment so
/// credentials never end up in bank files.
struct LiveGeneratorConfig {
  std::string endpoint;  ///< e.g. https://api.openai.com/v1/chat/completions
  std::string api_key;
  std::string model = "gpt-3.5-turbo";
  double temperature = 1.0;
  int timeout_seconds = 60;

  /// CGP_LLM_ENDPOINT (required), CGP_LLM_API_KEY, CGP_LLM_MODEL,
  /// CGP_LLM_TEMPERATURE, CGP_LLM_TIMEOUT.
  static LiveGeneratorConfig from_environment();
};

/// Thin adapter over an OpenAI-style chat-completion HTTP endpoint.
class LiveGenerator : public ConceptGenerator {
 public:
  explicit LiveGenerator(LiveGeneratorConfig config);
  std::string name() const override { return "live:" + config_.model; }
  std::string generate(const GenerationCall& call) override;

  /// Request body sent for a prompt.
  nlohmann::json request_body(const std::string& prompt) const;
  /// Extracts choices[0].message.content; throws TransportError otherwise.
  static std::string extract_content(const std::string& response_body);

 private:
  LiveGeneratorConfig config_;
};

}  // namespace cgp
