#include "cgp/generator.hpp"

#include <cstdlib>

#include <httplib.h>

#include "cgp/errors.hpp"
#include "cgp/text.hpp"

namespace cgp {

namespace {
constexpr const char* kModule = "concept_bank";
}

FixtureGenerator::FixtureGenerator(std::map<Key, std::vector<std::string>> responses) {
  for (auto& [key, list] : responses) set(key.first, key.second, std::move(list));
}

void FixtureGenerator::set(std::string_view disease, TemplateId t, std::vector<std::string> responses) {
  responses_[{canonicalize(disease), t}] = std::move(responses);
}

FixtureGenerator FixtureGenerator::builtin() {
  FixtureGenerator g;
  // Template 2 answers repeat the vitreous findings alongside the comparison
  // findings, so only the shared concepts survive a four-way intersection.
  g.set("Asteroid Hyalosis", TemplateId::ExplicitConcepts,
        {"asteroid bodies, vitreous opacities, calcific deposits",
         "1. Asteroid bodies\n2. Vitreous opacities\n3. Calcific deposits\n4. Vitreous floaters"});
  g.set("Asteroid Hyalosis", TemplateId::VsNormalComparison,
        {"calcium deposits, loss of retinal detail visualization, shadowing, asteroid bodies, vitreous opacities",
         "- vitreous opacities\n- asteroid bodies\n- calcium deposits\n- shadowing"});
  g.set("Diabetic Retinopathy", TemplateId::ExplicitConcepts,
        {"microaneurysms, hard exudates, hemorrhages, cotton wool spots",
         "Microaneurysms, Hard exudates, Hemorrhages, neovascularization"});
  g.set("Diabetic Retinopathy", TemplateId::VsNormalComparison,
        {"microaneurysms, hemorrhages, hard exudates, venous beading",
         "hard exudates; microaneurysms; retinal hemorrhages; cotton wool spots"});
  g.set("Central Retinal Vein Occlusion", TemplateId::ExplicitConcepts,
        {"venous engorgement, hemorrhages, optic disc swelling, macular edema",
         "venous changes, flame hemorrhages, hemorrhages, venous engorgement"});
  g.set("Central Retinal Vein Occlusion", TemplateId::VsNormalComparison,
        {"dilated tortuous veins, hemorrhages, venous engorgement, subretinal hemorrhage",
         "hemorrhages, venous engorgement, cotton wool spots"});
  return g;
}

SynonymMap FixtureGenerator::builtin_synonyms() {
  return {{"calcific deposits", "calcium deposits"},
          {"retinal hemorrhages", "hemorrhages"},
          {"dilated tortuous veins", "venous engorgement"}};
}

FixtureGenerator FixtureGenerator::from_json(const nlohmann::json& doc) {
  FixtureGenerator g;
  for (const auto& [disease, templates] : doc.items())
    for (const auto& [tname, list] : templates.items())
      g.set(disease, parse_template_id(tname), list.get<std::vector<std::string>>());
  return g;
}

std::string FixtureGenerator::generate(const GenerationCall& call) {
  auto it = responses_.find({canonicalize(call.request.disease_name), call.request.template_id});
  if (it == responses_.end() || it->second.empty()) return "[]";
  return it->second[static_cast<std::size_t>(call.generation_index) % it->second.size()];
}

LiveGeneratorConfig LiveGeneratorConfig::from_environment() {
  auto env = [](const char* key) -> std::string {
    const char* v = std::getenv(key);
    return v ? std::string(v) : std::string();
  };
  LiveGeneratorConfig c;
  c.endpoint = env("CGP_LLM_ENDPOINT");
  if (c.endpoint.empty()) throw ConfigError(kModule, "CGP_LLM_ENDPOINT is not set");
  c.api_key = env("CGP_LLM_API_KEY");
  if (auto m = env("CGP_LLM_MODEL"); !m.empty()) c.model = m;
  try {
    if (auto t = env("CGP_LLM_TEMPERATURE"); !t.empty()) c.temperature = std::stod(t);
    if (auto t = env("CGP_LLM_TIMEOUT"); !t.empty()) c.timeout_seconds = std::stoi(t);
  } catch (const std::exception&) {
    throw ConfigError(kModule, "CGP_LLM_TEMPERATURE / CGP_LLM_TIMEOUT must be numeric");
  }
  return c;
}

LiveGenerator::LiveGenerator(LiveGeneratorConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) throw ConfigError(kModule, "live generator needs an endpoint");
}

nlohmann::json LiveGenerator::request_body(const std::string& prompt) const {
  return {{"model", config_.model},
          {"temperature", config_.temperature},
          {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})}};
}

std::string LiveGenerator::extract_content(const std::string& response_body) {
  try {
    auto doc = nlohmann::json::parse(response_body);
    return doc.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(kModule, std::string("malformed chat-completion response: ") + e.what());
  }
}

std::string LiveGenerator::generate(const GenerationCall& call) {
  // Split "scheme://host[:port]/path" into the client base and request path.
  const auto scheme_end = config_.endpoint.find("://");
  const auto path_start =
      config_.endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  const std::string base = config_.endpoint.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : config_.endpoint.substr(path_start);

  httplib::Client client(base);
  client.set_connection_timeout(config_.timeout_seconds);
  client.set_read_timeout(config_.timeout_seconds);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);

  auto res = client.Post(path, headers, request_body(call.request.rendered_prompt).dump(), "application/json");
  if (!res) throw TransportError(kModule, "request to " + base + " failed: " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300)
    throw TransportError(kModule, "endpoint returned HTTP " + std::to_string(res->status));
  return extract_content(res->body);
}

}  // namespace cgp
