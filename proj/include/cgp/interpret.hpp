#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cgp/concept_bank.hpp"
#include "cgp/data.hpp"
#include "cgp/stage1.hpp"
#include "cgp/stage2.hpp"

namespace cgp {

enum class Normalization { Sum, MinMax, None };
std::string_view to_string(Normalization n);
Normalization parse_normalization(std::string_view name);

struct ContributionEntry {
  std::string concept_id;
  std::string display_name;
  double contribution = 0.0;  ///< after normalization
  double raw = 0.0;           ///< mean of weight * input before normalization
  int rank = 0;               ///< 1 = largest contribution
};

struct ContributionReport {
  std::string disease;
  std::vector<ContributionEntry> entries;  ///< sorted by contribution, descending
  Normalization normalization = Normalization::Sum;
  bool normalization_skipped = false;  ///< nothing to scale by (e.g. all-zero weights)
  int sample_count = 0;
  std::string stage2_kind;
  std::string attribution = "mean over samples of weight x concept input";

  /// The k highest entries, and the k lowest ones not already in top(k_top).
  std::vector<ContributionEntry> top(std::size_t k) const;
  std::vector<ContributionEntry> bottom(std::size_t k, std::size_t k_top = 0) const;

  nlohmann::ordered_json to_json() const;
  /// Readable report with the top and bottom entries.
  std::string to_text(std::size_t top_k, std::size_t bottom_k) const;
};

/// contribution_j = mean over samples labelled `disease` of W[d, j] * x_j,
/// where x is the model's stage-2 input for the sample. With Sum, positive
/// contributions are divided by their total and negatives are kept raw.
/// `bank` is optional and only supplies display names.
ContributionReport contributions(const Stage2Model& model, const LabelSpace& space,
                                 const std::vector<ConceptLogits>& logits, const std::vector<ImageSample>& samples,
                                 std::string_view disease, Normalization normalization = Normalization::Sum,
                                 const ConceptBank* bank = nullptr);

/// nodes: concepts (sorted by id) then diseases (sorted by name);
/// links: {source, target, value = |contribution|, contribution, group}.
nlohmann::ordered_json export_sankey(const std::vector<ContributionReport>& reports, std::size_t top_k,
                                     std::size_t bottom_k);
void save_sankey(const std::filesystem::path& path, const nlohmann::ordered_json& flow);

}  // namespace cgp
