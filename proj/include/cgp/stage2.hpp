#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "cgp/data.hpp"
#include "cgp/stage1.hpp"

namespace cgp {

enum class Stage2Kind { LogisticRegression, LinearSvm, RandomForest, Mlp };
std::string_view to_string(Stage2Kind k);
/// Accepts lr|svm|rf|mlp and the long names.
Stage2Kind parse_stage2_kind(std::string_view name);

enum class TaskMode { SingleLabel, MultiLabel };
std::string_view to_string(TaskMode m);
TaskMode parse_task_mode(std::string_view name);

struct Stage2Hyper {
  double lr_l2 = 1.0;     ///< L2 strength on LR weights (bias unpenalized)
  double svm_c = 1.0;     ///< soft-margin C
  int svm_max_iter = 2000;
  int rf_trees = 100;
  int rf_max_depth = 0;   ///< 0 = unlimited
  int rf_min_samples_leaf = 1;
  int rf_max_features = 0;  ///< 0 = floor(sqrt(E))
  int mlp_hidden = 64;
  int mlp_epochs = 300;
  double mlp_lr = 1e-2;
  double e2e_concept_weight = 1.0;  ///< weight of the concept BCE in end-to-end training
  bool use_probabilities = false;   ///< feed sigmoid(scores) instead of raw scores
  std::uint64_t seed = 1;

  nlohmann::ordered_json to_json() const;
  void update_from_json(const nlohmann::json& doc);
};

struct DecisionTree {
  struct Node {
    int feature = -1;  ///< -1 marks a leaf
    double threshold = 0.0;  ///< x[feature] <= threshold goes left
    int left = -1;
    int right = -1;
    int vote = 0;  ///< leaf prediction, 0 or 1
  };
  std::vector<Node> nodes;  ///< nodes[0] is the root

  int predict(const Eigen::VectorXd& x) const;
};

struct Stage2Model {
  Stage2Kind kind = Stage2Kind::LogisticRegression;
  TaskMode mode = TaskMode::SingleLabel;
  int K = 0;
  int E = 0;
  std::string label_space_digest;
  Stage2Hyper hyper;
  bool end_to_end = false;
  std::vector<bool> fitted;  ///< per disease; unfitted heads score constantly low
  std::vector<std::string> warnings;

  Eigen::MatrixXd W;  ///< K x E (linear kinds)
  Eigen::VectorXd b;  ///< K
  std::vector<std::vector<DecisionTree>> forests;  ///< K forests
  Eigen::MatrixXd W1;  ///< H x E
  Eigen::VectorXd b1;
  Eigen::MatrixXd W2;  ///< K x H
  Eigen::VectorXd b2;

  bool is_linear() const { return kind == Stage2Kind::LogisticRegression || kind == Stage2Kind::LinearSvm; }
  /// Probability kinds threshold at 0.5, the SVM at margin 0.
  double decision_threshold() const { return kind == Stage2Kind::LinearSvm ? 0.0 : 0.5; }
};

struct DiseasePrediction {
  std::string image_id;
  Eigen::VectorXd scores;   ///< length K
  std::vector<int> decision;  ///< label-space disease indices
};

/// X: N x E inputs (already transformed), Y: N x K multi-hot labels.
Stage2Model fit(Stage2Kind kind, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, TaskMode mode,
                const Stage2Hyper& hyper, std::string label_space_digest);

/// Joins logits to samples by image id.
Stage2Model fit(Stage2Kind kind, const std::vector<ConceptLogits>& logits, const std::vector<ImageSample>& samples,
                const LabelSpace& space, TaskMode mode, const Stage2Hyper& hyper);

/// Applies the model's input transform (raw scores or probabilities).
Eigen::MatrixXd stage2_inputs(const Stage2Model& model, const std::vector<ConceptLogits>& logits);
Eigen::MatrixXd stage2_inputs(const Stage2Hyper& hyper, const std::vector<ConceptLogits>& logits);

/// N x K scores: probabilities (LR, MLP), margins (SVM), vote fractions (RF).
Eigen::MatrixXd predict_scores(const Stage2Model& model, const Eigen::MatrixXd& X);
std::vector<int> decide(const Stage2Model& model, const Eigen::VectorXd& scores);

/// Refuses inputs from a different label space, printing both digests.
std::vector<DiseasePrediction> predict(const Stage2Model& model, const std::vector<ConceptLogits>& logits,
                                       const std::string& input_label_space_digest);

/// K x E fitted weights; UnsupportedOperation for non-linear kinds.
const Eigen::MatrixXd& concept_weights(const Stage2Model& model);

/// Context-plus-MLP joint training: disease cross-entropy on the concept
/// scores plus the concept BCE (handled by the trainer) weighted by
/// hyper.e2e_concept_weight. Use as the ScoreHead of stage-1 train().
class MlpScoreHead final : public ScoreHead {
 public:
  MlpScoreHead(const LabelSpace& space, TaskMode mode, const Stage2Hyper& hyper, double base_lr);
  double forward_backward(const Eigen::MatrixXd& scores, const std::vector<const ImageSample*>& batch,
                          Eigen::MatrixXd& d_scores) override;
  void step(double lr) override;
  Stage2Model model() const;

 private:
  const LabelSpace* space_;
  TaskMode mode_;
  Stage2Hyper hyper_;
  double base_lr_;
  Eigen::MatrixXd W1_, W2_, gW1_, gW2_, mW1_, vW1_, mW2_, vW2_;
  Eigen::VectorXd b1_, b2_, gb1_, gb2_, mb1_, vb1_, mb2_, vb2_;
  int t_ = 0;
};

void save_model(const std::filesystem::path& path, const Stage2Model& model);
Stage2Model load_model(const std::filesystem::path& path);

}  // namespace cgp
