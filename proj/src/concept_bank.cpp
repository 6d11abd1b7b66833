#include "cgp/concept_bank.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <ctime>
#include <fstream>
#include <future>

#include "cgp/errors.hpp"
#include "cgp/text.hpp"

namespace cgp {

namespace {
constexpr const char* kModule = "concept_bank";

constexpr std::string_view kTemplateExplicit =
    "List the key visual concepts that characterize {disease} in a color retinal fundus "
    "image. Answer with short phrases separated by commas.";
constexpr std::string_view kTemplateVsNormal =
    "Compared with a normal retinal fundus image, which diagnostic concepts indicate "
    "{disease} in a color fundus image? Answer with short phrases separated by commas.";
constexpr std::string_view kSlot = "{disease}";
}  // namespace

std::string_view to_string(TemplateId id) {
  switch (id) {
    case TemplateId::ExplicitConcepts: return "explicit_concepts";
    case TemplateId::VsNormalComparison: return "vs_normal_comparison";
  }
  return "?";
}

TemplateId parse_template_id(std::string_view name) {
  if (name == "explicit_concepts") return TemplateId::ExplicitConcepts;
  if (name == "vs_normal_comparison") return TemplateId::VsNormalComparison;
  throw ConfigError(kModule, "unknown template id '" + std::string(name) + "'");
}

std::string_view to_string(ConceptStatus s) {
  switch (s) {
    case ConceptStatus::Generated: return "generated";
    case ConceptStatus::Validated: return "validated";
    case ConceptStatus::Rejected: return "rejected";
  }
  return "?";
}

ConceptStatus parse_concept_status(std::string_view name) {
  if (name == "generated") return ConceptStatus::Generated;
  if (name == "validated") return ConceptStatus::Validated;
  if (name == "rejected") return ConceptStatus::Rejected;
  throw ConfigError(kModule, "unknown concept status '" + std::string(name) + "'");
}

std::size_t Concept::support() const {
  std::set<Provenance> distinct(provenance.begin(), provenance.end());
  return distinct.size();
}

// ---------------------------------------------------------------------------
// ConceptBank

std::size_t ConceptBank::validated_count() const {
  return static_cast<std::size_t>(std::count_if(concepts_.begin(), concepts_.end(), [](const auto& kv) {
    return kv.second.status == ConceptStatus::Validated;
  }));
}

std::vector<std::string> ConceptBank::validated_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, c] : concepts_)
    if (c.status == ConceptStatus::Validated) ids.push_back(id);
  return ids;
}

const Concept& ConceptBank::concept_by_id(std::string_view id) const {
  auto it = concepts_.find(std::string(id));
  if (it == concepts_.end()) throw ValidationError(kModule, "unknown concept id '" + std::string(id) + "'");
  return it->second;
}

const DiseaseEntry& ConceptBank::disease(std::string_view name) const {
  auto it = diseases_.find(std::string(name));
  if (it == diseases_.end()) throw ValidationError(kModule, "unknown disease '" + std::string(name) + "'");
  return it->second;
}

void ConceptBank::require_mutable(std::string_view op) const {
  if (frozen_)
    throw ConflictError(kModule, "bank is frozen for training; cannot " + std::string(op));
}

void ConceptBank::add_concept(Concept c) {
  require_mutable("add concepts");
  if (c.id.empty()) throw ValidationError(kModule, "concept with empty id");
  if (canonicalize(c.display_name) != c.id)
    throw ValidationError(kModule, "concept id '" + c.id + "' is not the canonical form of '" +
                                       c.display_name + "'");
  if (concepts_.contains(c.id)) throw ValidationError(kModule, "duplicate concept id '" + c.id + "'");
  std::sort(c.provenance.begin(), c.provenance.end());
  std::sort(c.synonyms.begin(), c.synonyms.end());
  concepts_.emplace(c.id, std::move(c));
  ++version_;
}

void ConceptBank::merge_generated(const std::string& disease, const std::vector<Concept>& generated) {
  require_mutable("merge generations");
  auto& entry = diseases_[disease];
  entry.name = disease;
  for (const auto& g : generated) {
    auto it = concepts_.find(g.id);
    if (it == concepts_.end()) {
      Concept c = g;
      std::sort(c.provenance.begin(), c.provenance.end());
      std::sort(c.synonyms.begin(), c.synonyms.end());
      concepts_.emplace(c.id, std::move(c));
    } else {
      // Shared concept across diseases: keep one entry, union the evidence.
      auto& c = it->second;
      std::set<std::string> syn(c.synonyms.begin(), c.synonyms.end());
      syn.insert(g.synonyms.begin(), g.synonyms.end());
      syn.erase(c.display_name);
      c.synonyms.assign(syn.begin(), syn.end());
      c.provenance.insert(c.provenance.end(), g.provenance.begin(), g.provenance.end());
      std::sort(c.provenance.begin(), c.provenance.end());
    }
    entry.concept_ids.insert(g.id);
  }
  ++version_;
}

void ConceptBank::set_disease(DiseaseEntry entry) {
  require_mutable("edit diseases");
  if (entry.name.empty()) throw ValidationError(kModule, "disease with empty name");
  for (const auto& id : entry.concept_ids)
    if (!concepts_.contains(id))
      throw ValidationError(kModule, "disease '" + entry.name + "' references unknown concept '" + id + "'");
  diseases_[entry.name] = std::move(entry);
  ++version_;
}

void ConceptBank::replace_concept(Concept c) {
  require_mutable("review concepts");
  auto it = concepts_.find(c.id);
  if (it == concepts_.end()) throw ValidationError(kModule, "unknown concept id '" + c.id + "'");
  it->second = std::move(c);
  ++version_;
}

void ConceptBank::freeze() {
  require_mutable("freeze twice");
  for (auto& [name, entry] : diseases_) {
    std::erase_if(entry.concept_ids, [&](const std::string& id) {
      return concepts_.at(id).status != ConceptStatus::Validated;
    });
  }
  frozen_ = true;
  ++version_;
}

ConceptBank ConceptBank::from_parts(int version, bool frozen, std::vector<Concept> concepts,
                                    std::vector<DiseaseEntry> diseases) {
  ConceptBank bank;
  for (auto& c : concepts) {
    if (c.status == ConceptStatus::Validated && c.support() < 2 && !c.manual_override)
      throw ValidationError(kModule, "validated concept '" + c.id +
                                         "' has fewer than two supporting generations and no override");
    bank.add_concept(std::move(c));
  }
  for (auto& d : diseases) {
    if (bank.diseases_.contains(d.name))
      throw ValidationError(kModule, "duplicate disease '" + d.name + "'");
    if (frozen)
      for (const auto& id : d.concept_ids)
        if (bank.concepts_.contains(id) && bank.concepts_.at(id).status != ConceptStatus::Validated)
          throw ValidationError(kModule, "frozen bank: disease '" + d.name +
                                             "' references non-validated concept '" + id + "'");
    bank.set_disease(std::move(d));
  }
  bank.version_ = version;
  bank.frozen_ = frozen;
  return bank;
}

// ---------------------------------------------------------------------------
// Templates and generation

std::string_view template_text(TemplateId id) {
  return id == TemplateId::ExplicitConcepts ? kTemplateExplicit : kTemplateVsNormal;
}

GenerationRequest render_template(std::string_view disease_name, TemplateId template_id) {
  const std::string name = trim(disease_name);
  if (name.empty()) throw ContractViolation(kModule, "disease name must be non-empty");
  std::string prompt(template_text(template_id));
  prompt.replace(prompt.find(kSlot), kSlot.size(), name);
  return {name, template_id, std::move(prompt)};
}

GenerationRequest render_template(std::string_view disease_name, std::string_view template_name) {
  return render_template(disease_name, parse_template_id(template_name));
}

std::vector<std::string> parse_phrase_list(std::string_view response) {
  std::string flat(response);
  for (auto& c : flat)
    if (c == '\n' || c == ';') c = ',';
  std::vector<std::string> phrases;
  for (auto piece : split(flat, ',')) {
    std::string p = trim(piece);
    // Leading list markup: "-", "*", "•", "1.", "2)".
    std::size_t i = 0;
    while (i < p.size() && (p[i] == '-' || p[i] == '*' || p[i] == '[' || p[i] == '"' || p[i] == '\'' ||
                            std::isspace(static_cast<unsigned char>(p[i]))))
      ++i;
    std::size_t j = i;
    while (j < p.size() && std::isdigit(static_cast<unsigned char>(p[j]))) ++j;
    if (j > i && j < p.size() && (p[j] == '.' || p[j] == ')')) i = j + 1;
    p = p.substr(i);
    while (!p.empty() && (p.back() == ']' || p.back() == '"' || p.back() == '\'' || p.back() == '.'))
      p.pop_back();
    p = trim(p);
    if (p.rfind("\xE2\x80\xA2", 0) == 0) p = trim(p.substr(3));
    if (!canonicalize(p).empty()) phrases.push_back(p);
  }
  return phrases;
}

namespace {

RawGeneration run_one(ConceptGenerator& generator, const GenerationRequest& request, int index,
                      int max_retries) {
  RawGeneration out;
  out.disease_name = request.disease_name;
  out.template_id = request.template_id;
  out.generation_index = index;
  out.rendered_prompt = request.rendered_prompt;
  for (int attempt = 0;; ++attempt) {
    out.attempts = attempt + 1;
    try {
      out.raw_response = generator.generate(GenerationCall{request, index, attempt});
      break;
    } catch (const TransportError& e) {
      if (attempt >= max_retries)
        throw TransportError(kModule, "generator '" + generator.name() + "' failed after " +
                                          std::to_string(attempt + 1) + " attempts: " + e.what());
    }
  }
  out.phrases = parse_phrase_list(out.raw_response);
  if (out.phrases.empty()) {
    out.warning = true;
    out.warning_message = "unparseable or empty response";
  }
  return out;
}

}  // namespace

std::vector<RawGeneration> collect_generations(std::string_view disease_name, ConceptGenerator& generator,
                                               const CollectOptions& options) {
  if (options.repeats_per_template < 2)
    throw ContractViolation(kModule, "repeats_per_template must be >= 2");
  std::vector<GenerationRequest> requests;
  for (TemplateId t : kAllTemplates) requests.push_back(render_template(disease_name, t));

  std::vector<RawGeneration> results;
  if (options.parallel) {
    std::vector<std::future<RawGeneration>> futures;
    for (const auto& req : requests)
      for (int i = 0; i < options.repeats_per_template; ++i)
        futures.push_back(std::async(std::launch::async, [&, i] {
          return run_one(generator, req, i, options.max_retries);
        }));
    for (auto& f : futures) results.push_back(f.get());
  } else {
    for (const auto& req : requests)
      for (int i = 0; i < options.repeats_per_template; ++i)
        results.push_back(run_one(generator, req, i, options.max_retries));
  }
  std::stable_sort(results.begin(), results.end(), [](const RawGeneration& a, const RawGeneration& b) {
    return std::pair(a.template_id, a.generation_index) < std::pair(b.template_id, b.generation_index);
  });
  return results;
}

std::vector<Concept> intersect_generations(const std::vector<RawGeneration>& raw_lists,
                                           const SynonymMap& synonym_map, std::optional<int> min_support) {
  if (raw_lists.size() < 2) throw ContractViolation(kModule, "intersection needs at least two raw lists");
  const int required = min_support.value_or(static_cast<int>(raw_lists.size()));
  if (required < 1) throw ContractViolation(kModule, "min_support must be positive");

  std::map<std::string, std::string> synonyms;
  for (const auto& [surface, target] : synonym_map) synonyms[canonicalize(surface)] = canonicalize(target);

  struct Evidence {
    std::set<Provenance> generations;
    std::set<std::string> surfaces;
    std::string display;  // first surface form whose canonical form is the id
  };
  std::map<std::string, Evidence> evidence;
  // Deterministic regardless of input order: visit in (template, index) order.
  std::vector<const RawGeneration*> ordered;
  for (const auto& r : raw_lists) ordered.push_back(&r);
  std::stable_sort(ordered.begin(), ordered.end(), [](const RawGeneration* a, const RawGeneration* b) {
    return std::tie(a->template_id, a->generation_index, a->raw_response) <
           std::tie(b->template_id, b->generation_index, b->raw_response);
  });
  for (const RawGeneration* r : ordered) {
    for (const auto& phrase : r->phrases) {
      const std::string canon = canonicalize(phrase);
      auto syn = synonyms.find(canon);
      const std::string id = syn == synonyms.end() ? canon : syn->second;
      if (id.empty()) continue;
      auto& ev = evidence[id];
      ev.generations.insert(Provenance{r->template_id, r->generation_index});
      ev.surfaces.insert(trim(phrase));
      if (ev.display.empty() && canon == id) ev.display = trim(phrase);
    }
  }

  std::vector<Concept> out;
  for (auto& [id, ev] : evidence) {
    if (static_cast<int>(ev.generations.size()) < required) continue;
    Concept c;
    c.id = id;
    c.display_name = ev.display.empty() ? id : ev.display;
    for (const auto& s : ev.surfaces)
      if (s != c.display_name) c.synonyms.push_back(s);
    c.provenance.assign(ev.generations.begin(), ev.generations.end());
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Review

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

ConceptBank validate_concept(const ConceptBank& bank, std::string_view id, ConceptStatus decision,
                             std::string_view reviewer, const ReviewOptions& options) {
  if (decision == ConceptStatus::Generated)
    throw ContractViolation(kModule, "review decision must be validated or rejected");
  Concept c = bank.concept_by_id(id);
  const bool redeciding = c.status != ConceptStatus::Generated;
  if (redeciding && !options.force)
    throw ConflictError(kModule, "concept '" + c.id + "' already " + std::string(to_string(c.status)) +
                                     "; pass force to re-decide");
  if (options.manual_override) c.manual_override = true;
  if (decision == ConceptStatus::Validated && c.support() < 2 && !c.manual_override)
    throw ValidationError(kModule, "concept '" + c.id + "' has " + std::to_string(c.support()) +
                                       " supporting generation(s); validation needs two or a manual override");
  c.status = decision;
  c.audit.push_back(AuditEntry{decision, std::string(reviewer),
                               options.timestamp.empty() ? utc_timestamp() : options.timestamp,
                               redeciding});
  ConceptBank out = bank;
  out.replace_concept(std::move(c));
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

nlohmann::ordered_json bank_to_json(const ConceptBank& bank) {
  nlohmann::ordered_json doc;
  doc["schema_version"] = kBankSchemaVersion;
  doc["bank_version"] = bank.version();
  doc["frozen"] = bank.frozen();
  auto& concepts = doc["concepts"] = nlohmann::ordered_json::array();
  for (const auto& [id, c] : bank.concepts()) {
    nlohmann::ordered_json jc;
    jc["id"] = c.id;
    jc["display_name"] = c.display_name;
    jc["synonyms"] = c.synonyms;
    jc["status"] = to_string(c.status);
    jc["manual_override"] = c.manual_override;
    auto& prov = jc["provenance"] = nlohmann::ordered_json::array();
    for (const auto& p : c.provenance)
      prov.push_back({{"template_id", to_string(p.template_id)}, {"generation_index", p.generation_index}});
    auto& audit = jc["audit"] = nlohmann::ordered_json::array();
    for (const auto& a : c.audit)
      audit.push_back({{"decision", to_string(a.decision)},
                       {"reviewer", a.reviewer},
                       {"timestamp", a.timestamp},
                       {"forced", a.forced}});
    concepts.push_back(std::move(jc));
  }
  auto& diseases = doc["diseases"] = nlohmann::ordered_json::array();
  for (const auto& [name, d] : bank.diseases())
    diseases.push_back({{"name", d.name}, {"concept_ids", d.concept_ids}});
  return doc;
}

ConceptBank bank_from_json(const nlohmann::json& doc) {
  try {
    const int schema = doc.at("schema_version").get<int>();
    if (schema != kBankSchemaVersion)
      throw MigrationError(kModule, "bank schema_version " + std::to_string(schema) +
                                        " is not supported (expected " + std::to_string(kBankSchemaVersion) +
                                        "); migrate the file first");
    std::vector<Concept> concepts;
    std::set<std::string> seen;
    for (const auto& jc : doc.at("concepts")) {
      Concept c;
      c.id = jc.at("id").get<std::string>();
      if (!seen.insert(c.id).second) throw ValidationError(kModule, "duplicate concept id '" + c.id + "'");
      c.display_name = jc.at("display_name").get<std::string>();
      c.synonyms = jc.at("synonyms").get<std::vector<std::string>>();
      c.status = parse_concept_status(jc.at("status").get<std::string>());
      c.manual_override = jc.value("manual_override", false);
      for (const auto& p : jc.at("provenance"))
        c.provenance.push_back(Provenance{parse_template_id(p.at("template_id").get<std::string>()),
                                          p.at("generation_index").get<int>()});
      for (const auto& a : jc.at("audit"))
        c.audit.push_back(AuditEntry{parse_concept_status(a.at("decision").get<std::string>()),
                                     a.at("reviewer").get<std::string>(), a.at("timestamp").get<std::string>(),
                                     a.value("forced", false)});
      concepts.push_back(std::move(c));
    }
    std::vector<DiseaseEntry> diseases;
    for (const auto& jd : doc.at("diseases")) {
      DiseaseEntry d;
      d.name = jd.at("name").get<std::string>();
      for (const auto& id : jd.at("concept_ids")) d.concept_ids.insert(id.get<std::string>());
      diseases.push_back(std::move(d));
    }
    return ConceptBank::from_parts(doc.at("bank_version").get<int>(), doc.value("frozen", false),
                                   std::move(concepts), std::move(diseases));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(kModule, std::string("malformed bank document: ") + e.what());
  }
}

void save_bank(const ConceptBank& bank, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(kModule, "cannot write bank file '" + path.string() + "'");
  out << bank_to_json(bank).dump(2) << '\n';
}

ConceptBank load_bank(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(kModule, "cannot read bank file '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(kModule, "bank file '" + path.string() + "' is not valid: " + e.what());
  }
  return bank_from_json(doc);
}

nlohmann::ordered_json generations_to_json(const std::vector<RawGeneration>& gens) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& g : gens)
    arr.push_back({{"disease_name", g.disease_name},
                   {"template_id", to_string(g.template_id)},
                   {"generation_index", g.generation_index},
                   {"rendered_prompt", g.rendered_prompt},
                   {"raw_response", g.raw_response},
                   {"phrases", g.phrases},
                   {"warning", g.warning},
                   {"warning_message", g.warning_message},
                   {"attempts", g.attempts}});
  return arr;
}

std::vector<RawGeneration> generations_from_json(const nlohmann::json& doc) {
  std::vector<RawGeneration> out;
  for (const auto& j : doc) {
    RawGeneration g;
    g.disease_name = j.at("disease_name").get<std::string>();
    g.template_id = parse_template_id(j.at("template_id").get<std::string>());
    g.generation_index = j.at("generation_index").get<int>();
    g.rendered_prompt = j.at("rendered_prompt").get<std::string>();
    g.raw_response = j.at("raw_response").get<std::string>();
    g.phrases = j.at("phrases").get<std::vector<std::string>>();
    g.warning = j.at("warning").get<bool>();
    g.warning_message = j.at("warning_message").get<std::string>();
    g.attempts = j.at("attempts").get<int>();
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace cgp
