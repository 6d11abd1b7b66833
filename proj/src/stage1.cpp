#include "cgp/stage1.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "cgp/binary_io.hpp"
#include "cgp/errors.hpp"
#include "cgp/rng.hpp"
#include "cgp/text.hpp"

namespace cgp {

namespace {
constexpr const char* kModule = "stage1";
constexpr std::string_view kCheckpointMagic = "CGP-CONTEXT 1";
constexpr std::string_view kLogitsMagic = "CGP-LOGITS 1";

Eigen::MatrixXd target_matrix(const std::vector<ConceptTarget>& targets, std::size_t E) {
  Eigen::MatrixXd T(static_cast<Eigen::Index>(targets.size()), static_cast<Eigen::Index>(E));
  for (std::size_t i = 0; i < targets.size(); ++i) T.row(static_cast<Eigen::Index>(i)) = targets[i].as_vector();
  return T;
}

Eigen::MatrixXd image_matrix(const EncoderBundle& bundle, const std::vector<ImageSample>& samples, ImageMode mode,
                             Rng* rng) {
  Eigen::MatrixXd F(static_cast<Eigen::Index>(samples.size()), bundle.feature_dim());
  for (std::size_t i = 0; i < samples.size(); ++i)
    F.row(static_cast<Eigen::Index>(i)) = bundle.encode_image(samples[i].image_ref, mode, rng).transpose();
  return F;
}

double mean_bce_rows(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& targets) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < scores.rows(); ++i)
    total += concept_bce(sigmoid(Eigen::VectorXd(scores.row(i).transpose())), targets.row(i).transpose());
  return total / static_cast<double>(scores.rows());
}
}  // namespace

Eigen::VectorXd ConceptLogits::probabilities() const { return sigmoid(scores); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Eigen::VectorXd sigmoid(const Eigen::VectorXd& x) { return x.unaryExpr([](double v) { return sigmoid(v); }); }

ConceptLogits concept_scores(double logit_scale, const Eigen::VectorXd& image_feature,
                             const Eigen::MatrixXd& concept_features, std::string image_id) {
  if (image_feature.size() != concept_features.cols())
    throw ContractViolation(kModule, "image feature has dimension " + std::to_string(image_feature.size()) +
                                         " but concept features have " + std::to_string(concept_features.cols()));
  return {std::move(image_id), logit_scale * (concept_features * image_feature)};
}

ConceptLogits concept_scores(const EncoderBundle& bundle, const Eigen::VectorXd& image_feature,
                             const Eigen::MatrixXd& concept_features, std::string image_id) {
  return concept_scores(bundle.logit_scale(), image_feature, concept_features, std::move(image_id));
}

double concept_bce(const Eigen::VectorXd& p, const Eigen::VectorXd& c) {
  if (p.size() != c.size()) throw ContractViolation(kModule, "probabilities and targets differ in length");
  if (p.size() == 0) throw ContractViolation(kModule, "concept BCE over zero concepts");
  double total = 0.0;
  for (Eigen::Index j = 0; j < p.size(); ++j)
    total += c(j) * std::log(std::max(p(j), kBceEpsilon)) + (1.0 - c(j)) * std::log(std::max(1.0 - p(j), kBceEpsilon));
  return -total / static_cast<double>(p.size());
}

Eigen::VectorXd concept_bce_score_gradient(const Eigen::VectorXd& scores, const Eigen::VectorXd& c) {
  if (scores.size() != c.size()) throw ContractViolation(kModule, "scores and targets differ in length");
  const double inv_e = 1.0 / static_cast<double>(scores.size());
  Eigen::VectorXd g(scores.size());
  for (Eigen::Index j = 0; j < scores.size(); ++j) {
    const double p = sigmoid(scores(j));
    const double q = sigmoid(-scores(j));
    // d/ds of -log p is -(1-p), of -log(1-p) is p; zero where the clamp is active.
    const double pos = p > kBceEpsilon ? -q : 0.0;
    const double neg = q > kBceEpsilon ? p : 0.0;
    g(j) = inv_e * (c(j) * pos + (1.0 - c(j)) * neg);
  }
  return g;
}

std::string_view to_string(Schedule s) { return s == Schedule::Cosine ? "cosine" : "constant"; }
std::string_view to_string(WarmupType w) { return w == WarmupType::Linear ? "linear" : "constant"; }

void TrainConfig::validate() const {
  if (!(lr > 0) || epochs < 1 || batch_size < 1 || M < 1 || warmup_epochs < 0 || !(init_sigma > 0) ||
      momentum < 0 || momentum >= 1 || weight_decay < 0 || !(warmup_constant_lr > 0))
    throw ConfigError(kModule, "invalid training configuration: " + to_json().dump());
  if (schedule == Schedule::Cosine && warmup_epochs >= epochs)
    throw ConfigError(kModule, "warmup_epochs must be smaller than epochs for the cosine schedule");
}

nlohmann::ordered_json TrainConfig::to_json() const {
  return {{"lr", lr},
          {"schedule", to_string(schedule)},
          {"warmup_epochs", warmup_epochs},
          {"warmup_type", to_string(warmup_type)},
          {"warmup_constant_lr", warmup_constant_lr},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"M", M},
          {"position", to_string(position)},
          {"init_sigma", init_sigma},
          {"seed", seed}};
}

void TrainConfig::update_from_json(const nlohmann::json& doc) {
  try {
    if (doc.contains("lr")) lr = doc.at("lr").get<double>();
    if (doc.contains("schedule")) {
      const auto s = to_lower(doc.at("schedule").get<std::string>());
      if (s == "cosine") schedule = Schedule::Cosine;
      else if (s == "constant") schedule = Schedule::Constant;
      else throw ConfigError(kModule, "unknown schedule '" + s + "'");
    }
    if (doc.contains("warmup_epochs")) warmup_epochs = doc.at("warmup_epochs").get<int>();
    if (doc.contains("warmup_type")) {
      const auto s = to_lower(doc.at("warmup_type").get<std::string>());
      if (s == "linear") warmup_type = WarmupType::Linear;
      else if (s == "constant") warmup_type = WarmupType::Constant;
      else throw ConfigError(kModule, "unknown warmup_type '" + s + "'");
    }
    if (doc.contains("warmup_constant_lr")) warmup_constant_lr = doc.at("warmup_constant_lr").get<double>();
    if (doc.contains("epochs")) epochs = doc.at("epochs").get<int>();
    if (doc.contains("batch_size")) batch_size = doc.at("batch_size").get<int>();
    if (doc.contains("momentum")) momentum = doc.at("momentum").get<double>();
    if (doc.contains("weight_decay")) weight_decay = doc.at("weight_decay").get<double>();
    if (doc.contains("M")) M = doc.at("M").get<int>();
    if (doc.contains("position")) position = parse_position_policy(doc.at("position").get<std::string>());
    if (doc.contains("init_sigma")) init_sigma = doc.at("init_sigma").get<double>();
    if (doc.contains("seed")) seed = doc.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(kModule, std::string("bad training configuration value: ") + e.what());
  }
}

double learning_rate(const TrainConfig& cfg, int epoch) {
  if (epoch < 1 || epoch > cfg.epochs) throw ContractViolation(kModule, "epoch out of range");
  if (epoch <= cfg.warmup_epochs) {
    if (cfg.warmup_type == WarmupType::Constant) return cfg.warmup_constant_lr;
    return cfg.lr * epoch / cfg.warmup_epochs;
  }
  if (cfg.schedule == Schedule::Constant) return cfg.lr;
  const double progress = static_cast<double>(epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs);
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

TrainState train(const TrainInputs& in, const TrainConfig& cfg) {
  cfg.validate();
  if (!in.bundle || !in.bank || !in.label_space) throw ContractViolation(kModule, "train needs bundle, bank and label space");
  if (in.train.empty()) throw TrainingError(kModule, "training pool is empty");
  const auto& bundle = *in.bundle;
  if (!in.bank->frozen()) throw ContractViolation(kModule, "training requires a frozen bank");
  if (cfg.M + 1 > bundle.max_sequence_length())
    throw ConfigError(kModule, "M=" + std::to_string(cfg.M) + " leaves no room for concept tokens");

  if (in.access_log) {
    for (const auto& s : in.train) in.access_log->record(s, "stage1/train");
    for (const auto& s : in.val) in.access_log->record(s, "stage1/val");
  }

  const auto tokens = concept_token_embeddings(bundle, *in.bank, *in.label_space);
  const std::size_t E = in.label_space->E();
  const Eigen::MatrixXd T = target_matrix(derive_concept_targets(in.train, *in.bank, *in.label_space), E);
  const Eigen::MatrixXd Tval =
      in.val.empty() ? Eigen::MatrixXd() : target_matrix(derive_concept_targets(in.val, *in.bank, *in.label_space), E);
  const Eigen::MatrixXd Fval = in.val.empty() ? Eigen::MatrixXd() : image_matrix(bundle, in.val, ImageMode::Eval, nullptr);

  TrainState st;
  st.fingerprint_before = bundle.fingerprint();
  Rng init = Rng::derive(cfg.seed, "stage1/init");
  st.context = PromptContext::random(cfg.M, bundle.token_dim(), cfg.init_sigma, cfg.position, init);
  st.best_context = st.context;
  st.best_val_metric = std::numeric_limits<double>::infinity();

  Rng shuffle_rng = Rng::derive(cfg.seed, "stage1/shuffle");
  Rng augment_rng = Rng::derive(cfg.seed, "stage1/augment");
  Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(cfg.M, bundle.token_dim());
  std::vector<std::size_t> order(in.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double scale = bundle.logit_scale();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = learning_rate(cfg, epoch);
    st.lr_history.push_back(lr);
    const Eigen::MatrixXd F = image_matrix(bundle, in.train, ImageMode::Train, &augment_rng);
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0, batch_no = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size), ++batch_no) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const auto B = static_cast<Eigen::Index>(stop - start);
      Eigen::MatrixXd Fb(B, F.cols()), Tb(B, T.cols());
      std::vector<const ImageSample*> batch;
      for (Eigen::Index b = 0; b < B; ++b) {
        const std::size_t i = order[start + static_cast<std::size_t>(b)];
        Fb.row(b) = F.row(static_cast<Eigen::Index>(i));
        Tb.row(b) = T.row(static_cast<Eigen::Index>(i));
        batch.push_back(&in.train[i]);
      }

      const auto enc = encode_concepts(bundle, st.context, tokens, true);
      const Eigen::MatrixXd S = scale * Fb * enc.features.transpose();  // B x E
      Eigen::MatrixXd dS(B, S.cols());
      double loss = 0.0;
      for (Eigen::Index b = 0; b < B; ++b) {
        const Eigen::VectorXd s = S.row(b).transpose();
        const Eigen::VectorXd t = Tb.row(b).transpose();
        loss += in.concept_loss_weight * concept_bce(sigmoid(s), t);
        dS.row(b) = in.concept_loss_weight * concept_bce_score_gradient(s, t).transpose() / static_cast<double>(B);
      }
      loss /= static_cast<double>(B);
      if (in.head) loss += in.head->forward_backward(S, batch, dS);
      if (!std::isfinite(loss))
        throw TrainingError(kModule, "non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_no) + " (first image '" + batch.front()->image_id +
                                         "'), lr " + std::to_string(lr));

      const Eigen::MatrixXd dG = scale * dS.transpose() * Fb;  // E x D
      Eigen::MatrixXd grad = context_gradient(bundle, enc, dG, cfg.M);
      if (cfg.weight_decay > 0) grad += cfg.weight_decay * st.context.vectors;
      velocity = cfg.momentum * velocity + grad;
      st.context.vectors -= lr * velocity;
      if (in.head) in.head->step(lr);

      st.loss_history.push_back(loss);
      epoch_loss += loss * static_cast<double>(B);
    }
    st.epoch_train_loss.push_back(epoch_loss / static_cast<double>(in.train.size()));
    st.epoch = epoch;

    double metric = st.epoch_train_loss.back();
    if (!in.val.empty()) {
      const Eigen::MatrixXd G = encode_concepts(bundle, st.context, tokens, false).features;
      metric = mean_bce_rows(scale * Fval * G.transpose(), Tval);
      st.epoch_val_loss.push_back(metric);
    }
    if (metric < st.best_val_metric) {
      st.best_val_metric = metric;
      st.best_epoch = epoch;
      st.best_context = st.context;
    }
  }

  const Eigen::MatrixXd G = encode_concepts(bundle, st.context, tokens, false).features;
  st.final_train_bce = mean_bce_rows(scale * image_matrix(bundle, in.train, ImageMode::Eval, nullptr) * G.transpose(), T);
  st.fingerprint_after = bundle.fingerprint();
  return st;
}

double mean_concept_bce(const EncoderBundle& bundle, const PromptContext& context, const ConceptBank& bank,
                        const LabelSpace& space, const std::vector<ImageSample>& samples) {
  if (samples.empty()) throw ContractViolation(kModule, "mean BCE over no samples");
  const Eigen::MatrixXd G = encode_concepts(bundle, context, bank, space);
  const Eigen::MatrixXd T = target_matrix(derive_concept_targets(samples, bank, space), space.E());
  return mean_bce_rows(bundle.logit_scale() * image_matrix(bundle, samples, ImageMode::Eval, nullptr) * G.transpose(), T);
}

// ---------------------------------------------------------------------------
// Checkpoints and logits files

PromptContext to_stored_precision(PromptContext context) {
  context.vectors = context.vectors.unaryExpr([](double v) { return binio::to_f32(v); });
  return context;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(kModule, "cannot write checkpoint '" + path.string() + "'");
  binio::write_header(out, kCheckpointMagic,
                      {{"M", ckpt.context.M()},
                       {"D_tok", ckpt.context.token_dim()},
                       {"position_policy", to_string(ckpt.context.policy)},
                       {"bank_version", ckpt.bank_version},
                       {"label_space_digest", ckpt.label_space_digest}});
  binio::write_matrix(out, ckpt.context.vectors);
  if (!out) throw IoError(kModule, "failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(kModule, "cannot read checkpoint '" + path.string() + "'");
  const auto h = binio::read_header(in, kCheckpointMagic, kModule, path.string());
  Checkpoint ckpt;
  try {
    const int M = h.at("M").get<int>();
    const int D = h.at("D_tok").get<int>();
    if (M < 1 || D < 1) throw ValidationError(kModule, path.string() + ": invalid context shape");
    ckpt.context.policy = parse_position_policy(h.at("position_policy").get<std::string>());
    ckpt.bank_version = h.at("bank_version").get<int>();
    ckpt.label_space_digest = h.at("label_space_digest").get<std::string>();
    ckpt.context.vectors = binio::read_matrix(in, M, D);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(kModule, path.string() + ": bad checkpoint header: " + e.what());
  }
  return ckpt;
}

std::vector<ConceptLogits> infer_concepts(const EncoderBundle& bundle, const Checkpoint& ckpt, const ConceptBank& bank,
                                          const LabelSpace& space, const std::vector<ImageSample>& samples) {
  if (ckpt.bank_version != bank.version())
    throw ConflictError(kModule, "checkpoint was trained against bank version " + std::to_string(ckpt.bank_version) +
                                     " but the bank is at version " + std::to_string(bank.version()));
  if (ckpt.label_space_digest != space.digest())
    throw ConflictError(kModule, "checkpoint label space " + ckpt.label_space_digest + " differs from " + space.digest());
  const Eigen::MatrixXd G = encode_concepts(bundle, ckpt.context, bank, space);
  std::vector<ConceptLogits> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    auto l = concept_scores(bundle, bundle.encode_image(s.image_ref, ImageMode::Eval), G, s.image_id);
    l.scores = l.scores.unaryExpr([](double v) { return binio::to_f32(v); });
    out.push_back(std::move(l));
  }
  return out;
}

void save_logits(const std::filesystem::path& path, const LogitsFile& file) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(kModule, "cannot write logits '" + path.string() + "'");
  const std::size_t E = file.rows.empty() ? 0 : static_cast<std::size_t>(file.rows.front().scores.size());
  binio::write_header(out, kLogitsMagic,
                      {{"bank_version", file.bank_version},
                       {"label_space_digest", file.label_space_digest},
                       {"E", E},
                       {"rows", file.rows.size()}});
  for (const auto& r : file.rows) {
    if (static_cast<std::size_t>(r.scores.size()) != E) throw ContractViolation(kModule, "ragged logits rows");
    binio::write_u32(out, static_cast<std::uint32_t>(r.image_id.size()));
    out.write(r.image_id.data(), static_cast<std::streamsize>(r.image_id.size()));
    for (Eigen::Index j = 0; j < r.scores.size(); ++j) binio::write_f32(out, r.scores(j));
  }
  if (!out) throw IoError(kModule, "failed writing logits '" + path.string() + "'");
}

LogitsFile load_logits(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(kModule, "cannot read logits '" + path.string() + "'");
  const auto h = binio::read_header(in, kLogitsMagic, kModule, path.string());
  LogitsFile f;
  try {
    f.bank_version = h.at("bank_version").get<int>();
    f.label_space_digest = h.at("label_space_digest").get<std::string>();
    const auto E = h.at("E").get<std::size_t>();
    const auto rows = h.at("rows").get<std::size_t>();
    for (std::size_t i = 0; i < rows; ++i) {
      ConceptLogits l;
      l.image_id.resize(binio::read_u32(in));
      if (!in.read(l.image_id.data(), static_cast<std::streamsize>(l.image_id.size())))
        throw ValidationError(kModule, path.string() + ": truncated row " + std::to_string(i));
      l.scores.resize(static_cast<Eigen::Index>(E));
      for (std::size_t j = 0; j < E; ++j) l.scores(static_cast<Eigen::Index>(j)) = binio::read_f32(in);
      f.rows.push_back(std::move(l));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(kModule, path.string() + ": bad logits header: " + e.what());
  }
  return f;
}

Eigen::MatrixXd logits_matrix(const std::vector<ConceptLogits>& rows, bool probabilities) {
  if (rows.empty()) return {};
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), rows.front().scores.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].scores.size() != X.cols()) throw ContractViolation(kModule, "ragged logits rows");
    X.row(static_cast<Eigen::Index>(i)) = (probabilities ? rows[i].probabilities() : rows[i].scores).transpose();
  }
  return X;
}

}  // namespace cgp
