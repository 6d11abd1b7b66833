#include "cgp/stage2.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <Eigen/Dense>

#include "cgp/binary_io.hpp"
#include "cgp/errors.hpp"
#include "cgp/rng.hpp"
#include "cgp/text.hpp"

namespace cgp {

namespace {
constexpr const char* kModule = "stage2";
constexpr std::string_view kModelMagic = "CGP-STAGE2 1";
constexpr double kSvmUnfittedMargin = -1e6;

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// L2-regularized logistic regression by damped Newton iterations. The bias
// is the last coordinate and is not penalized.
Eigen::VectorXd fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double lambda) {
  const Eigen::Index N = X.rows(), E = X.cols();
  Eigen::MatrixXd Xa(N, E + 1);
  Xa << X, Eigen::VectorXd::Ones(N);
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(E + 1, lambda);
  penalty(E) = 0.0;
  auto objective = [&](const Eigen::VectorXd& theta) {
    const Eigen::VectorXd z = Xa * theta;
    double f = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) f += softplus(z(i)) - y(i) * z(i);
    return f + 0.5 * theta.cwiseProduct(penalty).dot(theta);
  };
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(E + 1);
  double f = objective(theta);
  for (int iter = 0; iter < 100; ++iter) {
    const Eigen::VectorXd p = sigmoid(Eigen::VectorXd(Xa * theta));
    const Eigen::VectorXd grad = Xa.transpose() * (p - y) + penalty.cwiseProduct(theta);
    if (grad.lpNorm<Eigen::Infinity>() < 1e-10) break;
    const Eigen::VectorXd w = p.cwiseProduct((Eigen::VectorXd::Ones(N) - p));
    Eigen::MatrixXd H = Xa.transpose() * w.asDiagonal() * Xa;
    H.diagonal() += penalty + Eigen::VectorXd::Constant(E + 1, 1e-10);
    const Eigen::VectorXd step = H.ldlt().solve(grad);
    double t = 1.0;
    Eigen::VectorXd next = theta - step;
    double fn = objective(next);
    while (fn > f - 1e-4 * t * grad.dot(step) && t > 1e-10) {
      t *= 0.5;
      next = theta - t * step;
      fn = objective(next);
    }
    if (!(fn < f)) break;
    theta = next;
    const bool converged = f - fn < 1e-14 * std::max(1.0, std::abs(f));
    f = fn;
    if (converged) break;
  }
  return theta;
}

// Hinge-loss linear SVM by dual coordinate descent; the bias is an extra
// constant feature (regularized together with w).
Eigen::VectorXd fit_svm(const Eigen::MatrixXd& X, const Eigen::VectorXd& y01, double C, int max_iter, Rng& rng) {
  const Eigen::Index N = X.rows(), E = X.cols();
  Eigen::MatrixXd Xa(N, E + 1);
  Xa << X, Eigen::VectorXd::Ones(N);
  const Eigen::VectorXd y = 2.0 * y01.array() - 1.0;
  const Eigen::VectorXd Q = Xa.rowwise().squaredNorm();
  Eigen::VectorXd alpha = Eigen::VectorXd::Zero(N);
  Eigen::VectorXd w = Eigen::VectorXd::Zero(E + 1);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(N));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  for (int iter = 0; iter < max_iter; ++iter) {
    rng.shuffle(order);
    double pg_max = -1e300, pg_min = 1e300;
    for (Eigen::Index i : order) {
      if (Q(i) <= 0) continue;
      const double G = y(i) * Xa.row(i).dot(w) - 1.0;
      double pg = G;
      if (alpha(i) <= 0.0) pg = std::min(G, 0.0);
      else if (alpha(i) >= C) pg = std::max(G, 0.0);
      pg_max = std::max(pg_max, pg);
      pg_min = std::min(pg_min, pg);
      if (std::abs(pg) > 1e-12) {
        const double old = alpha(i);
        alpha(i) = std::clamp(old - G / Q(i), 0.0, C);
        w += (alpha(i) - old) * y(i) * Xa.row(i).transpose();
      }
    }
    if (pg_max - pg_min < 1e-6) break;
  }
  return w;
}

struct TreeParams {
  int max_depth = 0;
  int min_leaf = 1;
  int max_features = 1;
};

double gini(double pos, double n) {
  if (n <= 0) return 0.0;
  const double p = pos / n;
  return 2.0 * p * (1.0 - p);
}

DecisionTree build_tree(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, std::vector<Eigen::Index> rows,
                        const TreeParams& params, Rng& rng) {
  DecisionTree tree;
  struct Work {
    int node;
    std::vector<Eigen::Index> rows;
    int depth;
  };
  std::vector<Work> stack;
  tree.nodes.emplace_back();
  stack.push_back({0, std::move(rows), 0});
  std::vector<int> features(static_cast<std::size_t>(X.cols()));
  while (!stack.empty()) {
    Work w = std::move(stack.back());
    stack.pop_back();
    const double n = static_cast<double>(w.rows.size());
    double pos = 0.0;
    for (auto i : w.rows) pos += y(i);
    tree.nodes[static_cast<std::size_t>(w.node)].vote = 2.0 * pos >= n ? 1 : 0;
    const double parent = gini(pos, n);
    if (parent <= 0.0 || static_cast<int>(w.rows.size()) < 2 * params.min_leaf ||
        (params.max_depth > 0 && w.depth >= params.max_depth))
      continue;

    std::iota(features.begin(), features.end(), 0);
    for (int k = 0; k < params.max_features; ++k) {
      const auto j = static_cast<std::size_t>(k) + rng.uniform_below(features.size() - static_cast<std::size_t>(k));
      std::swap(features[static_cast<std::size_t>(k)], features[j]);
    }
    double best = parent * n - 1e-12;
    int best_feature = -1;
    double best_threshold = 0.0;
    std::vector<Eigen::Index> sorted = w.rows;
    for (int k = 0; k < params.max_features; ++k) {
      const int f = features[static_cast<std::size_t>(k)];
      std::stable_sort(sorted.begin(), sorted.end(), [&](Eigen::Index a, Eigen::Index b) { return X(a, f) < X(b, f); });
      double left_pos = 0.0;
      for (std::size_t s = 0; s + 1 < sorted.size(); ++s) {
        left_pos += y(sorted[s]);
        const double v = X(sorted[s], f), v_next = X(sorted[s + 1], f);
        if (!(v < v_next)) continue;
        const double nl = static_cast<double>(s + 1), nr = n - nl;
        if (nl < params.min_leaf || nr < params.min_leaf) continue;
        const double score = nl * gini(left_pos, nl) + nr * gini(pos - left_pos, nr);
        if (score < best) {
          best = score;
          best_feature = f;
          best_threshold = v;
        }
      }
    }
    if (best_feature < 0) continue;
    std::vector<Eigen::Index> left, right;
    for (auto i : w.rows) (X(i, best_feature) <= best_threshold ? left : right).push_back(i);
    const int l = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.nodes.emplace_back();
    auto& node = tree.nodes[static_cast<std::size_t>(w.node)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = l;
    node.right = l + 1;
    stack.push_back({l + 1, std::move(right), w.depth + 1});
    stack.push_back({l, std::move(left), w.depth + 1});
  }
  return tree;
}

struct Mlp {
  Eigen::MatrixXd W1, W2;
  Eigen::VectorXd b1, b2;
};

// Loss and gradients of the disease cross-entropy for a batch. Single-label
// uses softmax over the first label; multi-label uses per-disease sigmoid
// BCE averaged over K.
double mlp_loss(const Mlp& m, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, TaskMode mode, Mlp* grad,
                Eigen::MatrixXd* dX) {
  const Eigen::Index N = X.rows();
  const Eigen::MatrixXd pre = (X * m.W1.transpose()).rowwise() + m.b1.transpose();
  const Eigen::MatrixXd H = pre.cwiseMax(0.0);
  const Eigen::MatrixXd Z = (H * m.W2.transpose()).rowwise() + m.b2.transpose();
  Eigen::MatrixXd dZ(Z.rows(), Z.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < N; ++i) {
    if (mode == TaskMode::SingleLabel) {
      Eigen::Index label = 0;
      Y.row(i).maxCoeff(&label);
      const double mx = Z.row(i).maxCoeff();
      const Eigen::RowVectorXd e = (Z.row(i).array() - mx).exp();
      const double sum = e.sum();
      loss += -(Z(i, label) - mx - std::log(sum));
      dZ.row(i) = e / sum;
      dZ(i, label) -= 1.0;
    } else {
      for (Eigen::Index k = 0; k < Z.cols(); ++k) {
        loss += (softplus(Z(i, k)) - Y(i, k) * Z(i, k)) / static_cast<double>(Z.cols());
        dZ(i, k) = (sigmoid(Z(i, k)) - Y(i, k)) / static_cast<double>(Z.cols());
      }
    }
  }
  loss /= static_cast<double>(N);
  dZ /= static_cast<double>(N);
  const Eigen::MatrixXd dH = (dZ * m.W2).cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
  if (grad) {
    grad->W2 = dZ.transpose() * H;
    grad->b2 = dZ.colwise().sum().transpose();
    grad->W1 = dH.transpose() * X;
    grad->b1 = dH.colwise().sum().transpose();
  }
  if (dX) *dX = dH * m.W1;
  return loss;
}

Mlp init_mlp(int E, int H, int K, Rng& rng) {
  Mlp m;
  m.W1.resize(H, E);
  for (Eigen::Index r = 0; r < H; ++r)
    for (Eigen::Index c = 0; c < E; ++c) m.W1(r, c) = rng.normal() * std::sqrt(2.0 / E);
  m.W2.resize(K, H);
  for (Eigen::Index r = 0; r < K; ++r)
    for (Eigen::Index c = 0; c < H; ++c) m.W2(r, c) = rng.normal() * std::sqrt(1.0 / H);
  m.b1 = Eigen::VectorXd::Zero(H);
  m.b2 = Eigen::VectorXd::Zero(K);
  return m;
}

struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int t = 0;
  template <typename P>
  void update(P& param, const P& g, P& m, P& v, double lr) const {
    m = beta1 * m + (1 - beta1) * g;
    v = beta2 * v + (1 - beta2) * g.cwiseProduct(g);
    const double c1 = 1 - std::pow(beta1, t), c2 = 1 - std::pow(beta2, t);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

Mlp fit_mlp(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, TaskMode mode, const Stage2Hyper& h) {
  Rng rng = Rng::derive(h.seed, "stage2/mlp");
  Mlp m = init_mlp(static_cast<int>(X.cols()), h.mlp_hidden, static_cast<int>(Y.cols()), rng);
  Mlp mm{Eigen::MatrixXd::Zero(m.W1.rows(), m.W1.cols()), Eigen::MatrixXd::Zero(m.W2.rows(), m.W2.cols()),
         Eigen::VectorXd::Zero(m.b1.size()), Eigen::VectorXd::Zero(m.b2.size())};
  Mlp vv = mm;
  Adam adam;
  for (int epoch = 0; epoch < h.mlp_epochs; ++epoch) {
    Mlp g;
    mlp_loss(m, X, Y, mode, &g, nullptr);
    ++adam.t;
    adam.update(m.W1, g.W1, mm.W1, vv.W1, h.mlp_lr);
    adam.update(m.b1, g.b1, mm.b1, vv.b1, h.mlp_lr);
    adam.update(m.W2, g.W2, mm.W2, vv.W2, h.mlp_lr);
    adam.update(m.b2, g.b2, mm.b2, vv.b2, h.mlp_lr);
  }
  return m;
}

template <typename M>
void round_f32(M& m) {
  m = m.unaryExpr([](double v) { return binio::to_f32(v); });
}

void round_model(Stage2Model& m) {
  round_f32(m.W);
  round_f32(m.b);
  round_f32(m.W1);
  round_f32(m.b1);
  round_f32(m.W2);
  round_f32(m.b2);
  for (auto& forest : m.forests)
    for (auto& tree : forest)
      for (auto& node : tree.nodes) node.threshold = binio::to_f32(node.threshold);
}
}  // namespace

std::string_view to_string(Stage2Kind k) {
  switch (k) {
    case Stage2Kind::LogisticRegression: return "logistic_regression";
    case Stage2Kind::LinearSvm: return "linear_svm";
    case Stage2Kind::RandomForest: return "random_forest";
    case Stage2Kind::Mlp: return "mlp";
  }
  return "?";
}

Stage2Kind parse_stage2_kind(std::string_view name) {
  const std::string n = to_lower(trim(name));
  if (n == "lr" || n == "logistic_regression") return Stage2Kind::LogisticRegression;
  if (n == "svm" || n == "linear_svm") return Stage2Kind::LinearSvm;
  if (n == "rf" || n == "random_forest") return Stage2Kind::RandomForest;
  if (n == "mlp") return Stage2Kind::Mlp;
  throw ConfigError(kModule, "unknown stage-2 kind '" + std::string(name) + "' (expected lr, svm, rf or mlp)");
}

std::string_view to_string(TaskMode m) { return m == TaskMode::SingleLabel ? "single_label" : "multi_label"; }

TaskMode parse_task_mode(std::string_view name) {
  const std::string n = to_lower(trim(name));
  if (n == "single_label" || n == "single") return TaskMode::SingleLabel;
  if (n == "multi_label" || n == "multi") return TaskMode::MultiLabel;
  throw ConfigError(kModule, "unknown task mode '" + std::string(name) + "'");
}

nlohmann::ordered_json Stage2Hyper::to_json() const {
  return {{"lr_l2", lr_l2},
          {"svm_c", svm_c},
          {"svm_max_iter", svm_max_iter},
          {"rf_trees", rf_trees},
          {"rf_max_depth", rf_max_depth},
          {"rf_min_samples_leaf", rf_min_samples_leaf},
          {"rf_max_features", rf_max_features},
          {"mlp_hidden", mlp_hidden},
          {"mlp_epochs", mlp_epochs},
          {"mlp_lr", mlp_lr},
          {"e2e_concept_weight", e2e_concept_weight},
          {"use_probabilities", use_probabilities},
          {"seed", seed}};
}

void Stage2Hyper::update_from_json(const nlohmann::json& doc) {
  try {
    auto get = [&](const char* key, auto& field) {
      if (doc.contains(key)) field = doc.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("lr_l2", lr_l2);
    get("svm_c", svm_c);
    get("svm_max_iter", svm_max_iter);
    get("rf_trees", rf_trees);
    get("rf_max_depth", rf_max_depth);
    get("rf_min_samples_leaf", rf_min_samples_leaf);
    get("rf_max_features", rf_max_features);
    get("mlp_hidden", mlp_hidden);
    get("mlp_epochs", mlp_epochs);
    get("mlp_lr", mlp_lr);
    get("e2e_concept_weight", e2e_concept_weight);
    get("use_probabilities", use_probabilities);
    get("seed", seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(kModule, std::string("bad stage-2 hyperparameter: ") + e.what());
  }
  if (!(lr_l2 >= 0) || !(svm_c > 0) || rf_trees < 1 || rf_min_samples_leaf < 1 || mlp_hidden < 1 || mlp_epochs < 1 ||
      !(mlp_lr > 0) || svm_max_iter < 1)
    throw ConfigError(kModule, "invalid stage-2 hyperparameters: " + to_json().dump());
}

int DecisionTree::predict(const Eigen::VectorXd& x) const {
  if (nodes.empty()) throw ContractViolation(kModule, "empty decision tree");
  std::size_t i = 0;
  for (;;) {
    const auto& n = nodes[i];
    if (n.feature < 0) return n.vote;
    if (n.feature >= x.size()) throw ContractViolation(kModule, "tree feature index out of range");
    i = static_cast<std::size_t>(x(n.feature) <= n.threshold ? n.left : n.right);
  }
}

Stage2Model fit(Stage2Kind kind, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, TaskMode mode,
                const Stage2Hyper& hyper, std::string label_space_digest) {
  if (X.rows() != Y.rows()) throw ContractViolation(kModule, "inputs and labels differ in row count");
  if (X.rows() == 0) throw ContractViolation(kModule, "cannot fit on zero samples");
  Stage2Model m;
  m.kind = kind;
  m.mode = mode;
  m.K = static_cast<int>(Y.cols());
  m.E = static_cast<int>(X.cols());
  m.label_space_digest = std::move(label_space_digest);
  m.hyper = hyper;
  m.fitted.assign(static_cast<std::size_t>(m.K), true);

  for (int k = 0; k < m.K; ++k) {
    const double pos = Y.col(k).sum();
    if (pos < 1.0) {
      m.fitted[static_cast<std::size_t>(k)] = false;
      m.warnings.push_back("disease index " + std::to_string(k) + " has no positive training samples; head skipped");
    } else if (pos >= static_cast<double>(X.rows()) && kind != Stage2Kind::Mlp) {
      m.fitted[static_cast<std::size_t>(k)] = false;
      m.warnings.push_back("disease index " + std::to_string(k) + " has no negative training samples; head skipped");
    }
  }

  switch (kind) {
    case Stage2Kind::LogisticRegression:
    case Stage2Kind::LinearSvm: {
      m.W = Eigen::MatrixXd::Zero(m.K, m.E);
      m.b = Eigen::VectorXd::Zero(m.K);
      for (int k = 0; k < m.K; ++k) {
        if (!m.fitted[static_cast<std::size_t>(k)]) continue;
        Eigen::VectorXd theta;
        if (kind == Stage2Kind::LogisticRegression) {
          theta = fit_logistic(X, Y.col(k), hyper.lr_l2);
        } else {
          Rng rng = Rng::derive(hyper.seed, "stage2/svm/" + std::to_string(k));
          theta = fit_svm(X, Y.col(k), hyper.svm_c, hyper.svm_max_iter, rng);
        }
        m.W.row(k) = theta.head(m.E).transpose();
        m.b(k) = theta(m.E);
      }
      break;
    }
    case Stage2Kind::RandomForest: {
      TreeParams tp;
      tp.max_depth = hyper.rf_max_depth;
      tp.min_leaf = hyper.rf_min_samples_leaf;
      tp.max_features = hyper.rf_max_features > 0
                            ? std::min(hyper.rf_max_features, m.E)
                            : std::max(1, static_cast<int>(std::floor(std::sqrt(static_cast<double>(m.E)))));
      m.forests.resize(static_cast<std::size_t>(m.K));
      for (int k = 0; k < m.K; ++k) {
        if (!m.fitted[static_cast<std::size_t>(k)]) continue;
        Rng rng = Rng::derive(hyper.seed, "stage2/rf/" + std::to_string(k));
        for (int t = 0; t < hyper.rf_trees; ++t) {
          std::vector<Eigen::Index> rows(static_cast<std::size_t>(X.rows()));
          for (auto& r : rows) r = static_cast<Eigen::Index>(rng.uniform_below(static_cast<std::uint64_t>(X.rows())));
          m.forests[static_cast<std::size_t>(k)].push_back(build_tree(X, Y.col(k), std::move(rows), tp, rng));
        }
      }
      break;
    }
    case Stage2Kind::Mlp: {
      const Mlp net = fit_mlp(X, Y, mode, hyper);
      m.W1 = net.W1;
      m.b1 = net.b1;
      m.W2 = net.W2;
      m.b2 = net.b2;
      break;
    }
  }
  round_model(m);
  return m;
}

Eigen::MatrixXd stage2_inputs(const Stage2Hyper& hyper, const std::vector<ConceptLogits>& logits) {
  return logits_matrix(logits, hyper.use_probabilities);
}

Eigen::MatrixXd stage2_inputs(const Stage2Model& model, const std::vector<ConceptLogits>& logits) {
  return stage2_inputs(model.hyper, logits);
}

Stage2Model fit(Stage2Kind kind, const std::vector<ConceptLogits>& logits, const std::vector<ImageSample>& samples,
                const LabelSpace& space, TaskMode mode, const Stage2Hyper& hyper) {
  std::map<std::string, const ImageSample*> by_id;
  for (const auto& s : samples) by_id[s.image_id] = &s;
  std::vector<ImageSample> aligned;
  for (const auto& l : logits) {
    auto it = by_id.find(l.image_id);
    if (it == by_id.end()) throw ValidationError(kModule, "no labels for image '" + l.image_id + "'");
    aligned.push_back(*it->second);
  }
  const Eigen::MatrixXd X = stage2_inputs(hyper, logits);
  if (X.cols() != static_cast<Eigen::Index>(space.E()))
    throw ContractViolation(kModule, "logits have E=" + std::to_string(X.cols()) + " but the label space has E=" +
                                         std::to_string(space.E()));
  auto m = fit(kind, X, disease_matrix(aligned, space), mode, hyper, space.digest());
  for (auto& w : m.warnings)
    for (std::size_t k = 0; k < space.K(); ++k) {
      const std::string tag = "disease index " + std::to_string(k) + " ";
      if (w.rfind(tag, 0) == 0) w = "disease '" + space.diseases[k] + "' " + w.substr(tag.size());
    }
  return m;
}

Eigen::MatrixXd predict_scores(const Stage2Model& m, const Eigen::MatrixXd& X) {
  if (X.cols() != m.E)
    throw ContractViolation(kModule, "model expects E=" + std::to_string(m.E) + " inputs, got " + std::to_string(X.cols()));
  const Eigen::Index N = X.rows();
  Eigen::MatrixXd S(N, m.K);
  switch (m.kind) {
    case Stage2Kind::LogisticRegression:
    case Stage2Kind::LinearSvm: {
      S = (X * m.W.transpose()).rowwise() + m.b.transpose();
      if (m.kind == Stage2Kind::LogisticRegression) S = S.unaryExpr([](double z) { return sigmoid(z); });
      const double unfitted = m.kind == Stage2Kind::LinearSvm ? kSvmUnfittedMargin : 0.0;
      for (int k = 0; k < m.K; ++k)
        if (!m.fitted[static_cast<std::size_t>(k)]) S.col(k).setConstant(unfitted);
      break;
    }
    case Stage2Kind::RandomForest:
      for (Eigen::Index i = 0; i < N; ++i) {
        const Eigen::VectorXd x = X.row(i).transpose();
        for (int k = 0; k < m.K; ++k) {
          const auto& forest = m.forests[static_cast<std::size_t>(k)];
          double votes = 0.0;
          for (const auto& tree : forest) votes += tree.predict(x);
          S(i, k) = forest.empty() ? 0.0 : votes / static_cast<double>(forest.size());
        }
      }
      break;
    case Stage2Kind::Mlp: {
      const Eigen::MatrixXd H = ((X * m.W1.transpose()).rowwise() + m.b1.transpose()).cwiseMax(0.0);
      const Eigen::MatrixXd Z = (H * m.W2.transpose()).rowwise() + m.b2.transpose();
      for (Eigen::Index i = 0; i < N; ++i) {
        if (m.mode == TaskMode::SingleLabel) {
          const Eigen::RowVectorXd e = (Z.row(i).array() - Z.row(i).maxCoeff()).exp();
          S.row(i) = e / e.sum();
        } else {
          for (int k = 0; k < m.K; ++k) S(i, k) = sigmoid(Z(i, k));
        }
      }
      break;
    }
  }
  return S;
}

std::vector<int> decide(const Stage2Model& m, const Eigen::VectorXd& scores) {
  std::vector<int> out;
  if (scores.size() == 0) return out;
  if (m.mode == TaskMode::SingleLabel) {
    Eigen::Index best = 0;
    scores.maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  } else {
    for (Eigen::Index k = 0; k < scores.size(); ++k)
      if (scores(k) >= m.decision_threshold()) out.push_back(static_cast<int>(k));
  }
  return out;
}

std::vector<DiseasePrediction> predict(const Stage2Model& m, const std::vector<ConceptLogits>& logits,
                                       const std::string& input_digest) {
  const Eigen::Index E = logits.empty() ? m.E : logits.front().scores.size();
  if (E != m.E || input_digest != m.label_space_digest)
    throw ContractViolation(kModule, "input label space " + input_digest + " (E=" + std::to_string(E) +
                                         ") does not match model label space " + m.label_space_digest +
                                         " (E=" + std::to_string(m.E) + ")");
  std::vector<DiseasePrediction> out;
  if (logits.empty()) return out;
  const Eigen::MatrixXd S = predict_scores(m, stage2_inputs(m, logits));
  for (std::size_t i = 0; i < logits.size(); ++i) {
    DiseasePrediction p{logits[i].image_id, S.row(static_cast<Eigen::Index>(i)).transpose(), {}};
    p.decision = decide(m, p.scores);
    out.push_back(std::move(p));
  }
  return out;
}

const Eigen::MatrixXd& concept_weights(const Stage2Model& m) {
  if (!m.is_linear())
    throw UnsupportedOperation(kModule, std::string(to_string(m.kind)) +
                                            " has no per-concept weights; explaining it needs a surrogate model, "
                                            "which is not provided");
  return m.W;
}

// ---------------------------------------------------------------------------
// End-to-end head

MlpScoreHead::MlpScoreHead(const LabelSpace& space, TaskMode mode, const Stage2Hyper& hyper, double base_lr)
    : space_(&space), mode_(mode), hyper_(hyper), base_lr_(base_lr) {
  Rng rng = Rng::derive(hyper.seed, "stage2/mlp-e2e");
  Mlp m = init_mlp(static_cast<int>(space.E()), hyper.mlp_hidden, static_cast<int>(space.K()), rng);
  W1_ = m.W1;
  W2_ = m.W2;
  b1_ = m.b1;
  b2_ = m.b2;
  mW1_ = vW1_ = Eigen::MatrixXd::Zero(W1_.rows(), W1_.cols());
  mW2_ = vW2_ = Eigen::MatrixXd::Zero(W2_.rows(), W2_.cols());
  mb1_ = vb1_ = Eigen::VectorXd::Zero(b1_.size());
  mb2_ = vb2_ = Eigen::VectorXd::Zero(b2_.size());
}

double MlpScoreHead::forward_backward(const Eigen::MatrixXd& scores, const std::vector<const ImageSample*>& batch,
                                      Eigen::MatrixXd& d_scores) {
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(scores.rows(), static_cast<Eigen::Index>(space_->K()));
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (const auto& d : batch[i]->disease_labels) {
      const int k = space_->disease_index(d);
      if (k >= 0) Y(static_cast<Eigen::Index>(i), k) = 1.0;
    }
  Mlp net{W1_, W2_, b1_, b2_}, g;
  Eigen::MatrixXd dX;
  const double loss = mlp_loss(net, scores, Y, mode_, &g, &dX);
  gW1_ = g.W1;
  gW2_ = g.W2;
  gb1_ = g.b1;
  gb2_ = g.b2;
  d_scores += dX;
  return loss;
}

void MlpScoreHead::step(double lr) {
  Adam adam;
  adam.t = ++t_;
  // The head follows the context's warmup/cosine shape at its own base rate.
  const double rate = hyper_.mlp_lr * lr / base_lr_;
  adam.update(W1_, gW1_, mW1_, vW1_, rate);
  adam.update(b1_, gb1_, mb1_, vb1_, rate);
  adam.update(W2_, gW2_, mW2_, vW2_, rate);
  adam.update(b2_, gb2_, mb2_, vb2_, rate);
}

Stage2Model MlpScoreHead::model() const {
  Stage2Model m;
  m.kind = Stage2Kind::Mlp;
  m.mode = mode_;
  m.K = static_cast<int>(space_->K());
  m.E = static_cast<int>(space_->E());
  m.label_space_digest = space_->digest();
  m.hyper = hyper_;
  m.end_to_end = true;
  m.fitted.assign(static_cast<std::size_t>(m.K), true);
  m.W1 = W1_;
  m.b1 = b1_;
  m.W2 = W2_;
  m.b2 = b2_;
  round_model(m);
  return m;
}

// ---------------------------------------------------------------------------
// Model files

void save_model(const std::filesystem::path& path, const Stage2Model& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(kModule, "cannot write model '" + path.string() + "'");
  nlohmann::ordered_json h;
  h["kind"] = to_string(m.kind);
  h["mode"] = to_string(m.mode);
  h["K"] = m.K;
  h["E"] = m.E;
  h["label_space_digest"] = m.label_space_digest;
  h["hyperparameters"] = m.hyper.to_json();
  h["end_to_end"] = m.end_to_end;
  h["fitted"] = m.fitted;
  h["warnings"] = m.warnings;
  h["hidden"] = m.W1.rows();
  binio::write_header(out, kModelMagic, h);
  switch (m.kind) {
    case Stage2Kind::LogisticRegression:
    case Stage2Kind::LinearSvm:
      binio::write_matrix(out, m.W);
      binio::write_matrix(out, m.b.transpose());
      break;
    case Stage2Kind::Mlp:
      binio::write_matrix(out, m.W1);
      binio::write_matrix(out, m.b1.transpose());
      binio::write_matrix(out, m.W2);
      binio::write_matrix(out, m.b2.transpose());
      break;
    case Stage2Kind::RandomForest:
      for (const auto& forest : m.forests) {
        binio::write_u32(out, static_cast<std::uint32_t>(forest.size()));
        for (const auto& tree : forest) {
          binio::write_u32(out, static_cast<std::uint32_t>(tree.nodes.size()));
          for (const auto& n : tree.nodes) {
            binio::write_u32(out, static_cast<std::uint32_t>(n.feature + 1));
            binio::write_f32(out, n.threshold);
            binio::write_u32(out, static_cast<std::uint32_t>(n.left + 1));
            binio::write_u32(out, static_cast<std::uint32_t>(n.right + 1));
            binio::write_u32(out, static_cast<std::uint32_t>(n.vote));
          }
        }
      }
      break;
  }
  if (!out) throw IoError(kModule, "failed writing model '" + path.string() + "'");
}

Stage2Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(kModule, "cannot read model '" + path.string() + "'");
  const auto h = binio::read_header(in, kModelMagic, kModule, path.string());
  Stage2Model m;
  try {
    m.kind = parse_stage2_kind(h.at("kind").get<std::string>());
    m.mode = parse_task_mode(h.at("mode").get<std::string>());
    m.K = h.at("K").get<int>();
    m.E = h.at("E").get<int>();
    m.label_space_digest = h.at("label_space_digest").get<std::string>();
    m.hyper.update_from_json(h.at("hyperparameters"));
    m.end_to_end = h.at("end_to_end").get<bool>();
    m.fitted = h.at("fitted").get<std::vector<bool>>();
    m.warnings = h.at("warnings").get<std::vector<std::string>>();
    const auto hidden = h.at("hidden").get<Eigen::Index>();
    switch (m.kind) {
      case Stage2Kind::LogisticRegression:
      case Stage2Kind::LinearSvm:
        m.W = binio::read_matrix(in, m.K, m.E);
        m.b = binio::read_matrix(in, 1, m.K).row(0).transpose();
        break;
      case Stage2Kind::Mlp:
        m.W1 = binio::read_matrix(in, hidden, m.E);
        m.b1 = binio::read_matrix(in, 1, hidden).row(0).transpose();
        m.W2 = binio::read_matrix(in, m.K, hidden);
        m.b2 = binio::read_matrix(in, 1, m.K).row(0).transpose();
        break;
      case Stage2Kind::RandomForest:
        m.forests.resize(static_cast<std::size_t>(m.K));
        for (auto& forest : m.forests) {
          forest.resize(binio::read_u32(in));
          for (auto& tree : forest) {
            tree.nodes.resize(binio::read_u32(in));
            for (auto& n : tree.nodes) {
              n.feature = static_cast<int>(binio::read_u32(in)) - 1;
              n.threshold = binio::read_f32(in);
              n.left = static_cast<int>(binio::read_u32(in)) - 1;
              n.right = static_cast<int>(binio::read_u32(in)) - 1;
              n.vote = static_cast<int>(binio::read_u32(in));
            }
          }
        }
        break;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(kModule, path.string() + ": bad model header: " + e.what());
  }
  if (m.fitted.size() != static_cast<std::size_t>(m.K)) throw ValidationError(kModule, path.string() + ": bad fitted list");
  return m;
}

}  // namespace cgp
