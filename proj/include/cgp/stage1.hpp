#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "cgp/concept_bank.hpp"
#include "cgp/data.hpp"
#include "cgp/encoders.hpp"

namespace cgp {

struct ConceptLogits {
  std::string image_id;
  Eigen::VectorXd scores;  ///< pre-sigmoid, length E

  Eigen::VectorXd probabilities() const;
  bool operator==(const ConceptLogits& o) const { return image_id == o.image_id && scores == o.scores; }
};

double sigmoid(double x);
Eigen::VectorXd sigmoid(const Eigen::VectorXd& x);

/// scores_j = logit_scale * <image_feature, concept_features.row(j)>.
ConceptLogits concept_scores(double logit_scale, const Eigen::VectorXd& image_feature,
                             const Eigen::MatrixXd& concept_features, std::string image_id = {});
ConceptLogits concept_scores(const EncoderBundle& bundle, const Eigen::VectorXd& image_feature,
                             const Eigen::MatrixXd& concept_features, std::string image_id = {});

inline constexpr double kBceEpsilon = 1e-12;

/// Mean binary cross-entropy over the E concepts, logs clamped at 1e-12.
double concept_bce(const Eigen::VectorXd& probabilities, const Eigen::VectorXd& targets);
/// Gradient of concept_bce(sigmoid(scores), targets) w.r.t. the scores,
/// exact for the clamped loss.
Eigen::VectorXd concept_bce_score_gradient(const Eigen::VectorXd& scores, const Eigen::VectorXd& targets);

enum class Schedule { Cosine, Constant };
enum class WarmupType { Linear, Constant };
std::string_view to_string(Schedule s);
std::string_view to_string(WarmupType w);

struct TrainConfig {
  double lr = 1e-3;
  Schedule schedule = Schedule::Cosine;
  int warmup_epochs = 5;
  WarmupType warmup_type = WarmupType::Linear;
  double warmup_constant_lr = 1e-5;  ///< used by WarmupType::Constant
  int epochs = 100;
  int batch_size = 32;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int M = 32;
  PositionPolicy position = PositionPolicy::End;
  double init_sigma = 0.02;
  std::uint64_t seed = 1;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Keys absent from doc keep their current values.
  void update_from_json(const nlohmann::json& doc);
};

/// Learning rate used during epoch `epoch` (1-based). Linear warmup ramps
/// lr*e/W over e = 1..W; cosine then decays to 0 at the final epoch.
double learning_rate(const TrainConfig& config, int epoch);

/// Optional trainable head on top of the concept scores, optimized jointly
/// with the context (end-to-end variants). forward_backward returns the
/// head's batch loss and adds its gradient w.r.t. the scores to d_scores.
class ScoreHead {
 public:
  virtual ~ScoreHead() = default;
  virtual double forward_backward(const Eigen::MatrixXd& scores, const std::vector<const ImageSample*>& batch,
                                  Eigen::MatrixXd& d_scores) = 0;
  virtual void step(double lr) = 0;
};

struct TrainState {
  PromptContext context;       ///< final
  PromptContext best_context;  ///< lowest validation BCE
  int epoch = 0;
  int best_epoch = 0;
  double best_val_metric = 0.0;
  std::vector<double> loss_history;  ///< one entry per optimizer step
  std::vector<double> epoch_train_loss;
  std::vector<double> epoch_val_loss;  ///< empty when there is no validation data
  std::vector<double> lr_history;      ///< per epoch
  double final_train_bce = 0.0;        ///< full pass over the pool with the final context
  std::string fingerprint_before;
  std::string fingerprint_after;
};

struct TrainInputs {
  const EncoderBundle* bundle = nullptr;
  const ConceptBank* bank = nullptr;
  const LabelSpace* label_space = nullptr;
  std::vector<ImageSample> train;
  std::vector<ImageSample> val;
  AccessLog* access_log = nullptr;
  ScoreHead* head = nullptr;
  double concept_loss_weight = 1.0;  ///< weight of the concept BCE next to a head's loss
};

/// Minimizes mean concept BCE over the training pool; only the context
/// vectors change. Throws TrainingError on a non-finite loss.
TrainState train(const TrainInputs& inputs, const TrainConfig& config);

/// Mean concept BCE of the given samples under a context (eval mode).
double mean_concept_bce(const EncoderBundle& bundle, const PromptContext& context, const ConceptBank& bank,
                        const LabelSpace& space, const std::vector<ImageSample>& samples);

struct Checkpoint {
  PromptContext context;
  int bank_version = 0;
  std::string label_space_digest;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Rounds every entry through float32, the precision of checkpoint files.
PromptContext to_stored_precision(PromptContext context);

/// Eval-mode logits for every sample, rounded to float32 so that in-memory
/// results equal what a logits file holds. Refuses a checkpoint made for a
/// different bank version or label space.
std::vector<ConceptLogits> infer_concepts(const EncoderBundle& bundle, const Checkpoint& ckpt,
                                          const ConceptBank& bank, const LabelSpace& space,
                                          const std::vector<ImageSample>& samples);

struct LogitsFile {
  int bank_version = 0;
  std::string label_space_digest;
  std::vector<ConceptLogits> rows;
};

void save_logits(const std::filesystem::path& path, const LogitsFile& file);
LogitsFile load_logits(const std::filesystem::path& path);

/// Rows x E matrix of scores (or probabilities), in the given order.
Eigen::MatrixXd logits_matrix(const std::vector<ConceptLogits>& rows, bool probabilities = false);

}  // namespace cgp
