#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "cgp/concept_bank.hpp"
#include "cgp/data.hpp"
#include "cgp/encoders.hpp"
#include "cgp/stage1.hpp"
#include "cgp/stage2.hpp"

namespace cgp {

struct ApResult {
  double value = 0.0;
  bool ties = false;         ///< equal scores occurred; order fell back to input order
  bool no_positives = false;  ///< value defined as 0
};

/// Non-interpolated AP = sum_k (R_k - R_{k-1}) * P_k over the
/// score-descending ranking; ties keep input order.
ApResult average_precision_detail(const Eigen::VectorXd& scores, const Eigen::VectorXd& relevance);
double average_precision(const Eigen::VectorXd& scores, const Eigen::VectorXd& relevance);

struct MapResult {
  double value = 0.0;
  std::map<std::string, double> per_class;
  std::vector<std::string> excluded;  ///< classes with no positives
  std::vector<std::string> warnings;
};

/// Unweighted mean of per-class AP over class_set (indices into the columns).
/// Classes with no positives are excluded with a warning.
MapResult mean_average_precision(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& truth,
                                 const std::vector<int>& class_set, const std::vector<std::string>& class_names);

/// Support-weighted mean of per-class F1 over binary decisions. An empty
/// class_set means every column.
double weighted_f1(const Eigen::MatrixXd& decisions, const Eigen::MatrixXd& truth,
                   const std::vector<int>& class_set = {});

enum class Metric { MeanAveragePrecision, WeightedF1 };
std::string_view to_string(Metric m);

struct MetricResult {
  Metric metric = Metric::MeanAveragePrecision;
  double mean = 0.0;
  double std = 0.0;  ///< population standard deviation over seeds
  std::vector<double> per_seed;
  std::optional<std::map<std::string, double>> per_class;

  static MetricResult aggregate(Metric metric, std::vector<double> per_seed);
  nlohmann::ordered_json to_json() const;
};

enum class Task { FewShot, BaseToNovel };
std::string_view to_string(Task t);

struct ProtocolSpec {
  Task task = Task::FewShot;
  std::vector<int> shots{2, 4, 8, 16};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  Stage2Kind stage2_kind = Stage2Kind::LogisticRegression;
  TaskMode mode = TaskMode::SingleLabel;
  bool mlp_end_to_end = true;
  TrainConfig train;
  Stage2Hyper stage2;
  std::string config_digest;

  nlohmann::ordered_json to_json() const;
};

struct EvalContext {
  const EncoderBundle* bundle = nullptr;
  const ConceptBank* bank = nullptr;
  const std::vector<ImageSample>* samples = nullptr;
  LabelSpace space;
  /// Called after each finished seed with the partial report, so callers can
  /// persist progress.
  std::function<void(const nlohmann::ordered_json&)> on_progress;
};

struct SeedOutcome {
  int shots = 0;
  std::uint64_t seed = 0;
  double map = 0.0;
  double weighted_f1 = 0.0;
  std::map<std::string, double> per_class_ap;
  std::map<std::string, int> effective_counts;
  std::map<std::string, int> shortfall;
  int train_images = 0;
  int test_images = 0;
  double final_train_bce = 0.0;
  int best_epoch = 0;
  bool encoder_unchanged = true;
  std::optional<double> base_map;  ///< base-to-novel only: fitted head on base test images
  std::vector<std::string> warnings;

  nlohmann::ordered_json to_json() const;
};

struct EvaluationReport {
  ProtocolSpec protocol;
  std::string manifest_hash;
  std::string label_space_digest;
  int bank_version = 0;
  std::string encoder;
  std::string encoder_fingerprint;
  std::vector<SeedOutcome> runs;
  std::map<int, MetricResult> map_by_shots;
  std::map<int, MetricResult> f1_by_shots;
  std::vector<std::string> warnings;
  nlohmann::ordered_json details;  ///< protocol-specific provenance
  std::string status = "complete";
  std::string error;

  nlohmann::ordered_json to_json() const;
};

struct Stage1Outcome {
  TrainState state;
  Checkpoint checkpoint;  ///< best context, or the final one for end-to-end MLP
  std::optional<Stage2Model> e2e_model;
};

/// Stage-1 training as the protocols run it for one seed.
Stage1Outcome train_stage1(const ProtocolSpec& protocol, const EvalContext& ctx, std::uint64_t seed,
                           std::vector<ImageSample> train_samples, std::vector<ImageSample> val_samples,
                           AccessLog* log);

EvaluationReport run_few_shot(const ProtocolSpec& protocol, const EvalContext& ctx);

/// Bank-prior scores for the given diseases: mean probability of the
/// disease's bank concepts minus mean probability of all other concepts.
Eigen::MatrixXd bank_prior_scores(const Eigen::MatrixXd& probabilities, const ConceptBank& bank,
                                  const LabelSpace& space, const std::vector<std::string>& diseases);

/// Stage 1 sees only base-labelled training images (with the full bank);
/// novel classes are scored by the bank-prior head and evaluated on the
/// novel-labelled test images. Fails if any training read touched a novel
/// label. `log` may be supplied to inspect the reads afterwards.
EvaluationReport run_base_to_novel(const ProtocolSpec& protocol, const EvalContext& ctx, AccessLog* log = nullptr);

enum class Sweep { TokenPosition, NumTokens, Stage2Kind };
std::string_view to_string(Sweep s);
Sweep parse_sweep(std::string_view name);

/// Rows are prompt-learning methods (or stage-2 kinds), columns the swept
/// values. Methods without an implementation hold no value.
struct AblationTable {
  Sweep sweep = Sweep::TokenPosition;
  std::string corner;
  std::vector<std::string> row_labels;
  std::vector<std::string> column_labels;
  std::vector<std::vector<std::optional<MetricResult>>> cells;
  std::vector<std::string> notes;

  nlohmann::ordered_json to_json() const;
  /// Pipe-separated text with one header row, "n/a" for empty cells.
  std::string to_text() const;
};

/// Prompt-learning methods listed in ablation tables; only the first ships.
const std::vector<std::string>& prompt_learner_rows();

/// Position and token sweeps run at the largest shot count of the base
/// protocol; the stage-2 sweep runs every shot count.
AblationTable run_ablation(Sweep sweep, const ProtocolSpec& base, const EvalContext& ctx);

}  // namespace cgp
