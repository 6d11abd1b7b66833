#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cgp/concept_bank.hpp"

namespace cgp {

enum class Split { Train, Val, Test };
std::string_view to_string(Split s);
Split parse_split(std::string_view name);

struct ImageSample {
  std::string image_id;
  std::string image_ref;
  std::set<std::string> disease_labels;
  Split split = Split::Train;

  bool has_label(const std::string& disease) const { return disease_labels.contains(disease); }
  bool operator==(const ImageSample&) const = default;
};

/// Fixed disease and concept orderings shared by every stage and seed.
struct LabelSpace {
  std::vector<std::string> diseases;     ///< K names, sorted
  std::vector<std::string> concept_ids;  ///< E ids, sorted

  std::size_t K() const { return diseases.size(); }
  std::size_t E() const { return concept_ids.size(); }
  int disease_index(std::string_view name) const;  ///< -1 when absent
  int concept_index(std::string_view id) const;
  std::string digest() const;
  bool operator==(const LabelSpace&) const = default;
};

/// Diseases of the bank (by name) and validated concepts (by id).
LabelSpace make_label_space(const ConceptBank& bank);

struct Manifest {
  std::vector<ImageSample> samples;
  LabelSpace label_space;
  std::string hash;  ///< digest of the sample rows
};

Manifest load_manifest(const std::filesystem::path& path, const ConceptBank& bank);
Manifest parse_manifest(std::istream& in, const ConceptBank& bank, const std::string& source = "<stream>");
void write_manifest(std::ostream& out, const std::vector<ImageSample>& samples);
void save_manifest(const std::filesystem::path& path, const std::vector<ImageSample>& samples);
std::string manifest_hash(const std::vector<ImageSample>& samples);

std::vector<ImageSample> filter_split(const std::vector<ImageSample>& samples, Split split);

struct ConceptTarget {
  std::string image_id;
  std::vector<std::uint8_t> targets;  ///< length E, label-space concept order

  Eigen::VectorXd as_vector() const;
  std::size_t count() const;
};

/// targets[j] = 1 iff concept j belongs to any of the sample's diseases.
std::vector<ConceptTarget> derive_concept_targets(const std::vector<ImageSample>& samples,
                                                  const ConceptBank& bank, const LabelSpace& space);

/// Multi-hot disease matrix (rows = samples, cols = label-space diseases).
Eigen::MatrixXd disease_matrix(const std::vector<ImageSample>& samples, const LabelSpace& space);

struct FewShotEpisode {
  int n_shots = 0;
  std::uint64_t seed = 0;
  std::string manifest_hash;
  /// Per-disease selection, in draw order.
  std::map<std::string, std::vector<std::string>> selected_ids;
  /// Unique episode images carrying each disease (after de-duplication).
  std::map<std::string, int> effective_counts;
  /// Diseases whose train pool held fewer than n_shots images: missing count.
  std::map<std::string, int> shortfall;

  /// De-duplicated image ids, ordered by first selection (diseases in name order).
  std::vector<std::string> unique_ids() const;
};

/// Uniform sampling without replacement inside each disease's train pool.
/// The stream for a disease is Rng::derive(seed, disease_name); the pool is
/// sorted by image id and drawn with a partial Fisher-Yates pass.
FewShotEpisode sample_episode(const std::vector<ImageSample>& samples, int n_shots, std::uint64_t seed);

/// Samples whose ids are in the episode, in manifest order.
std::vector<ImageSample> episode_samples(const std::vector<ImageSample>& samples, const FewShotEpisode& ep);

nlohmann::ordered_json episode_to_json(const FewShotEpisode& ep);
FewShotEpisode episode_from_json(const nlohmann::json& doc);

struct BaseNovelSplit {
  std::vector<std::string> base;   ///< label-space order
  std::vector<std::string> novel;  ///< label-space order
  std::map<std::string, int> train_counts;
  /// Train samples whose labels are all base diseases.
  std::vector<ImageSample> train_pool;
};

/// Base = the ceil(K/2) most frequent diseases in the train split; ties go
/// to the lexicographically smaller name.
BaseNovelSplit split_base_novel(const std::vector<ImageSample>& samples, const LabelSpace& space);

struct SyntheticParams {
  int K = 4;
  int concepts_per_disease = 3;
  double shared_fraction = 0.0;
  int images_per_disease = 20;
  double noise = 0.0;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
};

struct SyntheticDataset {
  ConceptBank bank;  ///< frozen
  std::vector<ImageSample> samples;
  LabelSpace label_space;
  /// image id -> concept ids visually present (after noise).
  std::map<std::string, std::set<std::string>> signatures;
};

/// Builds a frozen bank whose diseases partly share concepts and a manifest
/// whose images encode their concept signature. Image refs take the form
/// "synth:<concept>|<concept>|...#<image id>", which the mock encoder reads.
SyntheticDataset generate_synthetic(const SyntheticParams& params);

inline constexpr std::string_view kSyntheticRefPrefix = "synth:";

/// Records every sample handed to a training routine, so protocols can prove
/// which labels were seen.
class AccessLog {
 public:
  struct Entry {
    std::string image_id;
    std::set<std::string> labels;
    std::string purpose;
  };

  void record(const ImageSample& sample, std::string_view purpose);
  std::vector<Entry> entries() const;
  /// Entries carrying at least one of the given labels.
  std::vector<Entry> touching(const std::set<std::string>& labels) const;
  std::size_t size() const;

 private:
  mutable std::mutex mutex_;
  std::vector<Entry> entries_;
};

}  // namespace cgp
