#include "cgp/encoders.hpp"

#include <cmath>

#include "cgp/digest.hpp"
#include "cgp/errors.hpp"
#include "cgp/text.hpp"

namespace cgp {

namespace {
constexpr const char* kModule = "encoders";

Eigen::MatrixXd gaussian(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale) {
  Eigen::MatrixXd m(rows, cols);
  // Row-major fill so the draw order does not depend on Eigen's storage.
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  return m;
}

Eigen::VectorXd normalized_or_throw(const Eigen::VectorXd& v, const char* what) {
  const double n = v.norm();
  if (!(n > 0.0) || !std::isfinite(n)) throw ContractViolation(kModule, std::string(what) + " has zero norm");
  return v / n;
}

struct MockTape final : TextTape {
  Eigen::MatrixXd Y;        // L x D normalized positions
  Eigen::VectorXd row_norm;  // L
  Eigen::MatrixXd Khat;     // L x D
  Eigen::VectorXd k_norm;   // L
  Eigen::MatrixXd V;        // L x D
  Eigen::VectorXd qhat;
  double q_norm = 0;
  Eigen::VectorXd alpha;  // L
  Eigen::VectorXd g;
  double u_norm = 0;
};
}  // namespace

std::string_view to_string(PositionPolicy p) {
  switch (p) {
    case PositionPolicy::Start: return "START";
    case PositionPolicy::Middle: return "MIDDLE";
    case PositionPolicy::End: return "END";
  }
  return "?";
}

PositionPolicy parse_position_policy(std::string_view name) {
  const std::string n = to_lower(trim(name));
  if (n == "start" || n == "front") return PositionPolicy::Start;
  if (n == "middle") return PositionPolicy::Middle;
  if (n == "end") return PositionPolicy::End;
  throw ConfigError(kModule, "unknown concept-token position '" + std::string(name) + "'");
}

PromptContext PromptContext::random(int M, int token_dim, double sigma, PositionPolicy policy, Rng& rng) {
  if (M < 1 || token_dim < 1) throw ContractViolation(kModule, "context needs M >= 1 and D_tok >= 1");
  return {gaussian(rng, M, token_dim, sigma), policy};
}

PromptLayout prompt_layout(int M, int concept_tokens, PositionPolicy policy) {
  if (M < 1) throw ContractViolation(kModule, "M must be >= 1");
  if (concept_tokens < 1) throw ContractViolation(kModule, "concept token list is empty");
  PromptLayout layout;
  layout.length = M + concept_tokens;
  const int before = policy == PositionPolicy::End ? M : policy == PositionPolicy::Start ? 0 : (M + 1) / 2;
  for (int i = 0; i < M; ++i) layout.context_slots.push_back(i < before ? i : i + concept_tokens);
  for (int t = 0; t < concept_tokens; ++t) layout.concept_slots.push_back(before + t);
  return layout;
}

Eigen::MatrixXd assemble_prompt(const PromptContext& context, const Eigen::MatrixXd& concept_tokens, int max_length) {
  if (concept_tokens.cols() != context.vectors.cols())
    throw ContractViolation(kModule, "concept token dimension " + std::to_string(concept_tokens.cols()) +
                                         " differs from context dimension " + std::to_string(context.vectors.cols()));
  const auto layout = prompt_layout(context.M(), static_cast<int>(concept_tokens.rows()), context.policy);
  if (layout.length > max_length)
    throw ContractViolation(kModule, "prompt of " + std::to_string(layout.length) +
                                         " tokens exceeds the text encoder limit of " + std::to_string(max_length) +
                                         " (M=" + std::to_string(context.M()) + ")");
  Eigen::MatrixXd seq(layout.length, context.vectors.cols());
  for (int i = 0; i < context.M(); ++i) seq.row(layout.context_slots[static_cast<std::size_t>(i)]) = context.vectors.row(i);
  for (Eigen::Index t = 0; t < concept_tokens.rows(); ++t)
    seq.row(layout.concept_slots[static_cast<std::size_t>(t)]) = concept_tokens.row(t);
  return seq;
}

// ---------------------------------------------------------------------------
// Mock bundle

MockBundle::MockBundle(std::uint64_t seed, int dim) : MockBundle(seed, dim, Options{}) {}

MockBundle::MockBundle(std::uint64_t seed, int dim, Options options) : seed_(seed), dim_(dim), opt_(options) {
  if (dim < 8) throw ContractViolation(kModule, "mock bundle needs D >= 8, got " + std::to_string(dim));
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  Rng tok = Rng::derive(seed, "mock/token-table");
  token_table_ = gaussian(tok, opt_.vocab_size, dim, s);
  Rng pos = Rng::derive(seed, "mock/positional");
  positional_ = gaussian(pos, opt_.max_sequence_length, dim, opt_.positional_scale * s);
  Rng q = Rng::derive(seed, "mock/query");
  wq_ = gaussian(q, dim, dim, s);
  Rng k = Rng::derive(seed, "mock/key");
  wk_ = gaussian(k, dim, dim, s);
  Rng v = Rng::derive(seed, "mock/value");
  wv_ = gaussian(v, dim, dim, opt_.value_gain * s);
  Rng p = Rng::derive(seed, "mock/projection");
  proj_ = gaussian(p, dim, dim, s);
}

std::vector<int> MockBundle::tokenize(std::string_view text) const {
  std::vector<int> out;
  for (const auto& word : split(canonicalize(text), ' '))
    if (!word.empty()) out.push_back(static_cast<int>(fnv1a64(word) % static_cast<std::uint64_t>(opt_.vocab_size)));
  if (out.empty()) throw ValidationError(kModule, "cannot tokenize concept '" + std::string(text) + "'");
  return out;
}

Eigen::MatrixXd MockBundle::embed_tokens(const std::vector<int>& tokens) const {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(tokens.size()), dim_);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || tokens[i] >= opt_.vocab_size) throw ContractViolation(kModule, "token id out of range");
    out.row(static_cast<Eigen::Index>(i)) = token_table_.row(tokens[i]);
  }
  return out;
}

Eigen::VectorXd MockBundle::encode_text(const Eigen::MatrixXd& sequence, std::unique_ptr<TextTape>* tape) const {
  const Eigen::Index L = sequence.rows();
  if (L < 1 || sequence.cols() != dim_) throw ContractViolation(kModule, "text sequence has the wrong shape");
  if (L > opt_.max_sequence_length) throw ContractViolation(kModule, "text sequence exceeds maximum length");

  auto t = std::make_unique<MockTape>();
  Eigen::MatrixXd X = sequence + positional_.topRows(L);
  t->row_norm = X.rowwise().norm();
  t->Y = X.array().colwise() / t->row_norm.array();

  const Eigen::VectorXd y_last = t->Y.row(L - 1).transpose();
  const Eigen::VectorXd q = wq_ * y_last;
  t->q_norm = q.norm();
  t->qhat = q / t->q_norm;
  const Eigen::MatrixXd K = t->Y * wk_.transpose();
  t->k_norm = K.rowwise().norm();
  t->Khat = K.array().colwise() / t->k_norm.array();
  t->V = t->Y * wv_.transpose();

  Eigen::VectorXd s = opt_.attention_scale * (t->Khat * t->qhat);
  s.array() -= s.maxCoeff();
  t->alpha = s.array().exp();
  t->alpha /= t->alpha.sum();

  const Eigen::VectorXd r = y_last + t->V.transpose() * t->alpha;
  const Eigen::VectorXd u = proj_ * r;
  t->u_norm = u.norm();
  t->g = u / t->u_norm;
  Eigen::VectorXd g = t->g;
  if (tape) *tape = std::move(t);
  return g;
}

Eigen::MatrixXd MockBundle::text_backward(const TextTape& base, const Eigen::VectorXd& dg) const {
  const auto* t = dynamic_cast<const MockTape*>(&base);
  if (!t) throw ContractViolation(kModule, "tape was not produced by the mock encoder");
  const Eigen::Index L = t->Y.rows();

  const Eigen::VectorXd du = (dg - t->g * t->g.dot(dg)) / t->u_norm;
  const Eigen::VectorXd dr = proj_.transpose() * du;

  Eigen::MatrixXd dY = Eigen::MatrixXd::Zero(L, dim_);
  dY.row(L - 1) += dr.transpose();
  // Values: o = sum_t alpha_t v_t with v_t = Wv y_t.
  const Eigen::VectorXd Wv_dr = wv_.transpose() * dr;
  dY += t->alpha * Wv_dr.transpose();
  // Softmax over cosine scores.
  const Eigen::VectorXd dalpha = t->V * dr;
  const Eigen::VectorXd ds = t->alpha.array() * (dalpha.array() - t->alpha.dot(dalpha));
  const double tau = opt_.attention_scale;
  // s_t = tau * khat_t . qhat
  Eigen::MatrixXd dKhat = tau * ds * t->qhat.transpose();
  const Eigen::VectorXd dqhat = tau * (t->Khat.transpose() * ds);
  const Eigen::VectorXd proj_k = (dKhat.cwiseProduct(t->Khat)).rowwise().sum();
  Eigen::MatrixXd dK = dKhat - (t->Khat.array().colwise() * proj_k.array()).matrix();
  dK = dK.array().colwise() / t->k_norm.array();
  dY += dK * wk_;
  const Eigen::VectorXd dq = (dqhat - t->qhat * t->qhat.dot(dqhat)) / t->q_norm;
  dY.row(L - 1) += (wq_.transpose() * dq).transpose();
  // Per-position normalization.
  const Eigen::VectorXd proj_y = (dY.cwiseProduct(t->Y)).rowwise().sum();
  Eigen::MatrixXd dX = dY - (t->Y.array().colwise() * proj_y.array()).matrix();
  return dX.array().colwise() / t->row_norm.array();
}

Eigen::VectorXd MockBundle::concept_anchor(const std::string& concept_text) const {
  {
    std::lock_guard lock(anchor_mutex_);
    if (auto it = anchors_.find(concept_text); it != anchors_.end()) return it->second;
  }
  Eigen::VectorXd a = encode_text(embed_tokens(tokenize(concept_text)));
  std::lock_guard lock(anchor_mutex_);
  return anchors_.emplace(concept_text, std::move(a)).first->second;
}

Eigen::VectorXd MockBundle::encode_image(std::string_view image_ref, ImageMode /*mode*/, Rng* /*rng*/) const {
  // Augmentations act on pixels; the mock works on signatures, so train and
  // eval modes coincide.
  Rng jitter = Rng::derive(seed_, std::string("mock/image/") + std::string(image_ref));
  Eigen::VectorXd f = Eigen::VectorXd::Zero(dim_);
  bool anchored = false;
  if (image_ref.starts_with(kSyntheticRefPrefix)) {
    std::string_view body = image_ref.substr(kSyntheticRefPrefix.size());
    body = body.substr(0, body.find('#'));
    for (const auto& name : split(body, '|')) {
      if (trim(name).empty()) continue;
      f += concept_anchor(name);
      anchored = true;
    }
  }
  const double scale = anchored ? opt_.image_jitter : 1.0;
  for (Eigen::Index i = 0; i < dim_; ++i) f(i) += scale * jitter.normal() / std::sqrt(static_cast<double>(dim_));
  return normalized_or_throw(f, "image feature");
}

std::string MockBundle::fingerprint() const {
  Sha256 h;
  h.update(std::string_view("mock"));
  h.update(std::uint64_t{seed_}).update(std::uint64_t(dim_));
  h.update(std::uint64_t(opt_.vocab_size)).update(std::uint64_t(opt_.max_sequence_length));
  h.update(opt_.logit_scale).update(opt_.attention_scale).update(opt_.value_gain);
  h.update(opt_.positional_scale).update(opt_.image_jitter);
  h.update(token_table_).update(positional_).update(wq_).update(wk_).update(wv_).update(proj_);
  return h.hex();
}

std::unique_ptr<EncoderBundle> load_bundle(std::string_view name, std::uint64_t seed, int dim) {
  if (to_lower(trim(name)) == "mock") return std::make_unique<MockBundle>(seed, dim);
  throw UnsupportedOperation(kModule, "encoder '" + std::string(name) +
                                          "' is not available in this build; only 'mock' is bundled");
}

// ---------------------------------------------------------------------------
// Concept encoding

std::vector<Eigen::MatrixXd> concept_token_embeddings(const EncoderBundle& bundle, const ConceptBank& bank,
                                                      const LabelSpace& space) {
  std::vector<Eigen::MatrixXd> out;
  out.reserve(space.E());
  for (const auto& id : space.concept_ids) {
    const auto& c = bank.concept_by_id(id);
    std::vector<int> tokens;
    try {
      tokens = bundle.tokenize(c.display_name);
    } catch (const ValidationError&) {
      throw ValidationError(kModule, "tokenizer failed on concept '" + id + "' (\"" + c.display_name + "\")");
    }
    out.push_back(bundle.embed_tokens(tokens));
  }
  return out;
}

ConceptEncoding encode_concepts(const EncoderBundle& bundle, const PromptContext& context,
                                const std::vector<Eigen::MatrixXd>& concept_tokens, bool keep_tapes) {
  if (context.token_dim() != bundle.token_dim())
    throw ContractViolation(kModule, "context dimension does not match the encoder token dimension");
  ConceptEncoding enc;
  enc.features.resize(static_cast<Eigen::Index>(concept_tokens.size()), bundle.feature_dim());
  for (std::size_t j = 0; j < concept_tokens.size(); ++j) {
    const auto seq = assemble_prompt(context, concept_tokens[j], bundle.max_sequence_length());
    std::unique_ptr<TextTape> tape;
    enc.features.row(static_cast<Eigen::Index>(j)) = bundle.encode_text(seq, keep_tapes ? &tape : nullptr).transpose();
    if (keep_tapes) {
      enc.tapes.push_back(std::move(tape));
      enc.layouts.push_back(prompt_layout(context.M(), static_cast<int>(concept_tokens[j].rows()), context.policy));
    }
  }
  return enc;
}

Eigen::MatrixXd encode_concepts(const EncoderBundle& bundle, const PromptContext& context, const ConceptBank& bank,
                                const LabelSpace& space) {
  if (!bank.frozen()) throw ContractViolation(kModule, "concept encoding requires a frozen bank");
  return encode_concepts(bundle, context, concept_token_embeddings(bundle, bank, space)).features;
}

Eigen::MatrixXd context_gradient(const EncoderBundle& bundle, const ConceptEncoding& encoding,
                                 const Eigen::MatrixXd& d_features, int M) {
  if (encoding.tapes.size() != static_cast<std::size_t>(d_features.rows()))
    throw ContractViolation(kModule, "context gradient needs an encoding made with tapes");
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(M, bundle.token_dim());
  for (std::size_t j = 0; j < encoding.tapes.size(); ++j) {
    const Eigen::VectorXd dg = d_features.row(static_cast<Eigen::Index>(j)).transpose();
    if (dg.isZero(0.0)) continue;
    const Eigen::MatrixXd dseq = bundle.text_backward(*encoding.tapes[j], dg);
    const auto& slots = encoding.layouts[j].context_slots;
    for (int i = 0; i < M; ++i) grad.row(i) += dseq.row(slots[static_cast<std::size_t>(i)]);
  }
  return grad;
}

}  // namespace cgp
