#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "cgp/data.hpp"
#include "cgp/rng.hpp"

namespace cgp {

enum class PositionPolicy { Start, Middle, End };
std::string_view to_string(PositionPolicy p);
PositionPolicy parse_position_policy(std::string_view name);

/// The M learnable context vectors (rows) shared by every concept prompt.
struct PromptContext {
  Eigen::MatrixXd vectors;  ///< M x D_tok
  PositionPolicy policy = PositionPolicy::End;

  int M() const { return static_cast<int>(vectors.rows()); }
  int token_dim() const { return static_cast<int>(vectors.cols()); }

  /// Zero-mean Gaussian initialization with the given standard deviation.
  static PromptContext random(int M, int token_dim, double sigma, PositionPolicy policy, Rng& rng);
};

/// Where each context vector and concept token lands in the sequence.
struct PromptLayout {
  std::vector<int> context_slots;  ///< sequence position of w_1..w_M
  std::vector<int> concept_slots;  ///< sequence positions of the concept tokens
  int length = 0;
};

/// END -> [w_1..w_M, c...], START -> [c..., w_1..w_M],
/// MIDDLE -> [w_1..w_ceil(M/2), c..., w_ceil(M/2)+1..w_M].
PromptLayout prompt_layout(int M, int concept_tokens, PositionPolicy policy);

/// Rows of the result are the embedded sequence. Throws ContractViolation
/// when the sequence would exceed max_length; tokens are never dropped.
Eigen::MatrixXd assemble_prompt(const PromptContext& context, const Eigen::MatrixXd& concept_tokens,
                                int max_length);

enum class ImageMode { Eval, Train };

/// Intermediate values of one text-encoder forward pass, kept for backward.
struct TextTape {
  virtual ~TextTape() = default;
};

/// A frozen image encoder, text encoder and token-embedding table.
class EncoderBundle {
 public:
  virtual ~EncoderBundle() = default;

  virtual std::string name() const = 0;
  virtual int feature_dim() const = 0;
  virtual int token_dim() const = 0;
  virtual int max_sequence_length() const = 0;
  virtual double logit_scale() const = 0;

  /// Throws ValidationError naming the text when it yields no tokens.
  virtual std::vector<int> tokenize(std::string_view text) const = 0;
  /// One row per token, taken from the frozen embedding table.
  virtual Eigen::MatrixXd embed_tokens(const std::vector<int>& tokens) const = 0;

  /// Encodes an embedded sequence to an L2-normalized feature. When tape is
  /// non-null it receives what text_backward needs.
  virtual Eigen::VectorXd encode_text(const Eigen::MatrixXd& sequence,
                                      std::unique_ptr<TextTape>* tape = nullptr) const = 0;
  /// Gradient of a scalar w.r.t. the input sequence given its gradient
  /// w.r.t. the normalized feature. Encoder parameters receive nothing.
  virtual Eigen::MatrixXd text_backward(const TextTape& tape, const Eigen::VectorXd& d_feature) const = 0;

  /// L2-normalized image feature. Train mode may apply augmentations drawn
  /// from rng; eval mode is deterministic.
  virtual Eigen::VectorXd encode_image(std::string_view image_ref, ImageMode mode = ImageMode::Eval,
                                       Rng* rng = nullptr) const = 0;

  /// SHA-256 over every encoder parameter.
  virtual std::string fingerprint() const = 0;
};

/// Width used when a mock bundle is requested by name. Narrower mocks let the
/// context memorize base concepts through the attention query, which hurts
/// transfer to unseen concepts.
inline constexpr int kMockDefaultDim = 96;

/// Deterministic stand-in for a CLIP-style pair. The text encoder normalizes
/// each position (token + positional embedding), attends from the last
/// position with cosine-similarity attention, adds the attended values to the
/// last position and projects. Synthetic images ("synth:a|b#id") encode to
/// the normalized sum of their concepts' bare text encodings plus a small
/// id-seeded jitter; other refs encode to an id-seeded random direction.
class MockBundle final : public EncoderBundle {
 public:
  struct Options {
    int vocab_size = 4096;
    int max_sequence_length = 77;
    double logit_scale = 10.0;
    double attention_scale = 10.0;
    double value_gain = 2.0;
    double positional_scale = 0.1;
    double image_jitter = 0.02;
  };

  MockBundle(std::uint64_t seed, int dim);
  MockBundle(std::uint64_t seed, int dim, Options options);

  std::string name() const override { return "mock"; }
  int feature_dim() const override { return dim_; }
  int token_dim() const override { return dim_; }
  int max_sequence_length() const override { return opt_.max_sequence_length; }
  double logit_scale() const override { return opt_.logit_scale; }

  std::vector<int> tokenize(std::string_view text) const override;
  Eigen::MatrixXd embed_tokens(const std::vector<int>& tokens) const override;
  Eigen::VectorXd encode_text(const Eigen::MatrixXd& sequence, std::unique_ptr<TextTape>* tape = nullptr) const override;
  Eigen::MatrixXd text_backward(const TextTape& tape, const Eigen::VectorXd& d_feature) const override;
  Eigen::VectorXd encode_image(std::string_view image_ref, ImageMode mode = ImageMode::Eval,
                               Rng* rng = nullptr) const override;
  std::string fingerprint() const override;

  std::uint64_t seed() const { return seed_; }

 private:
  Eigen::VectorXd concept_anchor(const std::string& concept_text) const;

  std::uint64_t seed_;
  int dim_;
  Options opt_;
  Eigen::MatrixXd token_table_;  // vocab x dim
  Eigen::MatrixXd positional_;   // max_len x dim
  Eigen::MatrixXd wq_, wk_, wv_, proj_;

  mutable std::mutex anchor_mutex_;
  mutable std::map<std::string, Eigen::VectorXd> anchors_;
};

/// "mock" builds a MockBundle; pretrained identifiers are not bundled with
/// this build and raise UnsupportedOperation.
std::unique_ptr<EncoderBundle> load_bundle(std::string_view name, std::uint64_t seed = 0, int dim = kMockDefaultDim);

/// Token embeddings of each label-space concept's display name, in
/// label-space order.
std::vector<Eigen::MatrixXd> concept_token_embeddings(const EncoderBundle& bundle, const ConceptBank& bank,
                                                      const LabelSpace& space);

struct ConceptEncoding {
  Eigen::MatrixXd features;  ///< E x D, rows L2-normalized
  std::vector<std::unique_ptr<TextTape>> tapes;
  std::vector<PromptLayout> layouts;
};

/// Row j = g(assemble_prompt(context, tokens_j)).
ConceptEncoding encode_concepts(const EncoderBundle& bundle, const PromptContext& context,
                                const std::vector<Eigen::MatrixXd>& concept_tokens, bool keep_tapes = false);
Eigen::MatrixXd encode_concepts(const EncoderBundle& bundle, const PromptContext& context, const ConceptBank& bank,
                                const LabelSpace& space);

/// Gradient w.r.t. context.vectors given the gradient w.r.t. the concept
/// feature matrix. Requires an encoding made with keep_tapes.
Eigen::MatrixXd context_gradient(const EncoderBundle& bundle, const ConceptEncoding& encoding,
                                 const Eigen::MatrixXd& d_features, int M);

/// Extension point for alternative prompt learners. Only the shared-context
/// learner ships; others plug in by providing concept features and the
/// gradient with respect to their own parameters.
class PromptLearner {
 public:
  virtual ~PromptLearner() = default;
  virtual std::string name() const = 0;
  virtual Eigen::MatrixXd& parameters() = 0;
  virtual ConceptEncoding encode(const EncoderBundle& bundle, const std::vector<Eigen::MatrixXd>& concept_tokens,
                                 bool keep_tapes) const = 0;
  virtual Eigen::MatrixXd parameter_gradient(const EncoderBundle& bundle, const ConceptEncoding& encoding,
                                             const Eigen::MatrixXd& d_features) const = 0;
};

class SharedContextLearner final : public PromptLearner {
 public:
  explicit SharedContextLearner(PromptContext context) : context_(std::move(context)) {}
  std::string name() const override { return "shared_context"; }
  Eigen::MatrixXd& parameters() override { return context_.vectors; }
  const PromptContext& context() const { return context_; }
  ConceptEncoding encode(const EncoderBundle& bundle, const std::vector<Eigen::MatrixXd>& concept_tokens,
                         bool keep_tapes) const override {
    return encode_concepts(bundle, context_, concept_tokens, keep_tapes);
  }
  Eigen::MatrixXd parameter_gradient(const EncoderBundle& bundle, const ConceptEncoding& encoding,
                                     const Eigen::MatrixXd& d_features) const override {
    return context_gradient(bundle, encoding, d_features, context_.M());
  }

 private:
  PromptContext context_;
};

}  // namespace cgp
