#pragma once

#include <compare>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace cgp {

enum class TemplateId { ExplicitConcepts, VsNormalComparison };
inline constexpr TemplateId kAllTemplates[] = {TemplateId::ExplicitConcepts,
                                               TemplateId::VsNormalComparison};

std::string_view to_string(TemplateId id);
/// Throws ConfigError on an unknown name.
TemplateId parse_template_id(std::string_view name);

enum class ConceptStatus { Generated, Validated, Rejected };
std::string_view to_string(ConceptStatus s);
ConceptStatus parse_concept_status(std::string_view name);

struct Provenance {
  TemplateId template_id = TemplateId::ExplicitConcepts;
  int generation_index = 0;
  auto operator<=>(const Provenance&) const = default;
};

struct AuditEntry {
  ConceptStatus decision = ConceptStatus::Generated;
  std::string reviewer;
  std::string timestamp;
  bool forced = false;
  bool operator==(const AuditEntry&) const = default;
};

struct Concept {
  std::string id;            ///< canonicalize(display_name)
  std::string display_name;  ///< text fed to the tokenizer
  std::vector<std::string> synonyms;
  ConceptStatus status = ConceptStatus::Generated;
  std::vector<Provenance> provenance;
  std::vector<AuditEntry> audit;
  /// Lets a reviewer validate a concept with fewer than two supporting
  /// generations (e.g. one added by hand).
  bool manual_override = false;

  /// Number of distinct (template, generation) pairs supporting the concept.
  std::size_t support() const;
  bool operator==(const Concept&) const = default;
};

struct DiseaseEntry {
  std::string name;
  std::set<std::string> concept_ids;
  bool operator==(const DiseaseEntry&) const = default;
};

/// Disease -> concept mapping plus the per-concept review state.
///
/// Every mutation bumps `version()`. Once frozen, mutations throw
/// ConflictError and disease entries reference validated concepts only.
class ConceptBank {
 public:
  ConceptBank() = default;

  const std::map<std::string, Concept>& concepts() const { return concepts_; }
  const std::map<std::string, DiseaseEntry>& diseases() const { return diseases_; }
  int version() const { return version_; }
  bool frozen() const { return frozen_; }

  /// E: number of validated concepts.
  std::size_t validated_count() const;
  /// K: number of disease entries.
  std::size_t disease_count() const { return diseases_.size(); }
  /// Validated concept ids in id order.
  std::vector<std::string> validated_ids() const;

  const Concept& concept_by_id(std::string_view id) const;
  const DiseaseEntry& disease(std::string_view name) const;
  bool has_concept(std::string_view id) const { return concepts_.contains(std::string(id)); }
  bool has_disease(std::string_view name) const { return diseases_.contains(std::string(name)); }

  /// Adds a new concept. Throws ValidationError on a duplicate id or an id
  /// that is not the canonical form of its display name.
  void add_concept(Concept c);
  /// Adds concepts emitted for `disease`, merging provenance and synonyms
  /// into existing entries, and links them to the disease.
  void merge_generated(const std::string& disease, const std::vector<Concept>& generated);
  /// Creates or replaces a disease entry; every id must already exist.
  void set_disease(DiseaseEntry entry);
  /// Replaces a concept in place (review transitions).
  void replace_concept(Concept c);

  /// Drops non-validated ids from disease entries and seals the bank.
  void freeze();

  /// Rebuilds a bank from persisted parts, checking all invariants.
  static ConceptBank from_parts(int version, bool frozen, std::vector<Concept> concepts,
                                std::vector<DiseaseEntry> diseases);

  bool operator==(const ConceptBank&) const = default;

 private:
  void require_mutable(std::string_view op) const;

  std::map<std::string, Concept> concepts_;
  std::map<std::string, DiseaseEntry> diseases_;
  int version_ = 0;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Generation

struct GenerationRequest {
  std::string disease_name;
  TemplateId template_id = TemplateId::ExplicitConcepts;
  std::string rendered_prompt;
};

GenerationRequest render_template(std::string_view disease_name, TemplateId template_id);
/// Name-based overload; unknown template names raise ConfigError.
GenerationRequest render_template(std::string_view disease_name, std::string_view template_name);
/// The fixed template text with a "{disease}" slot.
std::string_view template_text(TemplateId id);

struct GenerationCall {
  const GenerationRequest& request;
  int generation_index = 0;
  int attempt = 0;
};

/// Text-generation backend. Implementations return the raw model response
/// and throw TransportError for retryable failures. Must be thread-safe when
/// used with CollectOptions::parallel.
class ConceptGenerator {
 public:
  virtual ~ConceptGenerator() = default;
  virtual std::string name() const = 0;
  virtual std::string generate(const GenerationCall& call) = 0;
};

struct RawGeneration {
  std::string disease_name;
  TemplateId template_id = TemplateId::ExplicitConcepts;
  int generation_index = 0;
  std::string rendered_prompt;
  std::string raw_response;  ///< verbatim, for expert review
  std::vector<std::string> phrases;
  bool warning = false;
  std::string warning_message;
  int attempts = 0;
  bool operator==(const RawGeneration&) const = default;
};

struct CollectOptions {
  int repeats_per_template = 2;
  int max_retries = 3;
  bool parallel = false;
};

/// Splits a response into phrases. Accepts newline- or comma-separated
/// lists, strips bullets, numbering, brackets and quotes.
std::vector<std::string> parse_phrase_list(std::string_view response);

/// Calls the generator repeats_per_template times per template. Results are
/// ordered by (template, generation index) regardless of completion order.
std::vector<RawGeneration> collect_generations(std::string_view disease_name,
                                               ConceptGenerator& generator,
                                               const CollectOptions& options = {});

/// surface form -> concept id; keys and values are canonicalized on use.
using SynonymMap = std::map<std::string, std::string>;

/// Emits a concept iff its id (after synonym mapping) appears in at least
/// `min_support` generations; defaults to all generations.
std::vector<Concept> intersect_generations(const std::vector<RawGeneration>& raw_lists,
                                           const SynonymMap& synonym_map,
                                           std::optional<int> min_support = std::nullopt);

// ---------------------------------------------------------------------------
// Review

struct ReviewOptions {
  bool force = false;
  bool manual_override = false;
  std::string timestamp;  ///< empty: current UTC time
};

/// Records an expert decision. Re-deciding without `force` is a conflict.
ConceptBank validate_concept(const ConceptBank& bank, std::string_view id, ConceptStatus decision,
                             std::string_view reviewer, const ReviewOptions& options = {});

std::string utc_timestamp();

// ---------------------------------------------------------------------------
// Persistence

inline constexpr int kBankSchemaVersion = 1;

nlohmann::ordered_json bank_to_json(const ConceptBank& bank);
ConceptBank bank_from_json(const nlohmann::json& doc);
void save_bank(const ConceptBank& bank, const std::filesystem::path& path);
ConceptBank load_bank(const std::filesystem::path& path);

nlohmann::ordered_json generations_to_json(const std::vector<RawGeneration>& gens);
std::vector<RawGeneration> generations_from_json(const nlohmann::json& doc);

}  // namespace cgp
