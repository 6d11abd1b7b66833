#include <doctest.h>

#include <cmath>

#include "cgp/errors.hpp"
#include "cgp/stage2.hpp"
#include "support/oracles.hpp"

using namespace cgp;

namespace {

Stage2Model linear_model(Stage2Kind kind, const Eigen::MatrixXd& W, const Eigen::VectorXd& b,
                         TaskMode mode = TaskMode::SingleLabel) {
  Stage2Model m;
  m.kind = kind;
  m.mode = mode;
  m.K = static_cast<int>(W.rows());
  m.E = static_cast<int>(W.cols());
  m.W = W;
  m.b = b;
  m.fitted.assign(static_cast<std::size_t>(m.K), true);
  m.label_space_digest = "toy";
  return m;
}

DecisionTree leaf(int vote) {
  DecisionTree t;
  t.nodes.push_back({-1, 0.0, -1, -1, vote});
  return t;
}

// Ground-truth concept targets of the synthetic train split as Stage-2 inputs.
struct TargetData {
  SyntheticDataset ds;
  Eigen::MatrixXd X_train, Y_train, X_test, Y_test;

  TargetData() {
    SyntheticParams p;
    ds = generate_synthetic(p);
    auto build = [&](Split s, Eigen::MatrixXd& X, Eigen::MatrixXd& Y) {
      const auto samples = filter_split(ds.samples, s);
      const auto t = derive_concept_targets(samples, ds.bank, ds.label_space);
      X.resize(static_cast<Eigen::Index>(t.size()), static_cast<Eigen::Index>(ds.label_space.E()));
      for (std::size_t i = 0; i < t.size(); ++i) X.row(static_cast<Eigen::Index>(i)) = t[i].as_vector().transpose();
      Y = disease_matrix(samples, ds.label_space);
    };
    build(Split::Train, X_train, Y_train);
    build(Split::Test, X_test, Y_test);
  }
};

double accuracy(const Stage2Model& m, const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  const Eigen::MatrixXd S = predict_scores(m, X);
  int correct = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    Eigen::Index k;
    S.row(i).maxCoeff(&k);
    correct += Y(i, k) > 0.5;
  }
  return static_cast<double>(correct) / static_cast<double>(X.rows());
}

}  // namespace

TEST_SUITE("stage2") {
  TEST_CASE("random forest score is the vote fraction") {
    Stage2Model m;
    m.kind = Stage2Kind::RandomForest;
    m.K = 1;
    m.E = 2;
    m.fitted = {true};
    m.forests = {{leaf(1), leaf(0), leaf(1)}};
    const Eigen::MatrixXd x = Eigen::MatrixXd::Zero(1, 2);
    CHECK(predict_scores(m, x)(0, 0) == doctest::Approx(2.0 / 3.0));

    // A split tree routes by threshold.
    DecisionTree t;
    t.nodes = {{0, 0.5, 1, 2, 0}, {-1, 0, -1, -1, 0}, {-1, 0, -1, -1, 1}};
    Eigen::VectorXd lo(2), hi(2);
    lo << 0.5, 9;
    hi << 0.6, -9;
    CHECK(t.predict(lo) == 0);
    CHECK(t.predict(hi) == 1);
  }

  TEST_CASE("logistic regression and SVM closed forms") {
    Eigen::MatrixXd W(1, 2);
    W << 1.0, -1.0;
    Eigen::VectorXd b(1);
    b << 0.0;
    Eigen::MatrixXd x(1, 2);
    x << 0.7, 0.7;
    const auto lr = linear_model(Stage2Kind::LogisticRegression, W, b, TaskMode::MultiLabel);
    CHECK(predict_scores(lr, x)(0, 0) == doctest::Approx(0.5));

    const auto svm = linear_model(Stage2Kind::LinearSvm, W, b, TaskMode::MultiLabel);
    x << 1.0, 0.25;
    const Eigen::MatrixXd margin = predict_scores(svm, x);
    CHECK(margin(0, 0) == doctest::Approx(0.75));
    CHECK(decide(svm, margin.row(0).transpose()) == std::vector<int>{0});
    x << 0.0, 0.25;
    CHECK(decide(svm, predict_scores(svm, x).row(0).transpose()).empty());
  }

  TEST_CASE("zero input gives sigmoid of the bias") {
    Eigen::MatrixXd W(3, 2);
    W << 1, 2, 3, 4, 5, 6;
    Eigen::VectorXd b(3);
    b << -1.0, 0.0, 2.0;
    const auto m = linear_model(Stage2Kind::LogisticRegression, W, b);
    const Eigen::MatrixXd S = predict_scores(m, Eigen::MatrixXd::Zero(1, 2));
    for (int k = 0; k < 3; ++k) CHECK(S(0, k) == doctest::Approx(1.0 / (1.0 + std::exp(-b(k)))));
  }

  TEST_CASE("hand-set three-class LR matches the sigmoid table") {
    Eigen::MatrixXd W(3, 3);
    W << 2, -1, 0, -1, 2, -1, 0, -1, 2;
    Eigen::VectorXd b(3);
    b << 0.1, -0.2, 0.3;
    const auto m = linear_model(Stage2Kind::LogisticRegression, W, b);
    Eigen::MatrixXd X(3, 3);
    X << 1, 0, 0, 0, 1, 0, 0.5, 0.5, 2;
    const Eigen::MatrixXd S = predict_scores(m, X);
    for (int i = 0; i < 3; ++i)
      for (int k = 0; k < 3; ++k) {
        double z = b(k);
        for (int j = 0; j < 3; ++j) z += W(k, j) * X(i, j);
        CHECK(S(i, k) == doctest::Approx(1.0 / (1.0 + std::exp(-z))).epsilon(1e-12));
        CHECK(S(i, k) > 0.0);
        CHECK(S(i, k) < 1.0);
      }
    // Identical rows give identical predictions.
    Eigen::MatrixXd twice(2, 3);
    twice.row(0) = X.row(2);
    twice.row(1) = X.row(2);
    const Eigen::MatrixXd T = predict_scores(m, twice);
    CHECK(T.row(0) == T.row(1));
  }

  TEST_CASE("scaling inputs with inversely scaled weights keeps decisions") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      Eigen::MatrixXd W(4, 5), X(6, 5);
      Eigen::VectorXd b(4);
      for (int i = 0; i < W.size(); ++i) W(i) = rng.normal();
      for (int i = 0; i < X.size(); ++i) X(i) = rng.normal();
      for (int i = 0; i < b.size(); ++i) b(i) = rng.normal();
      const double c = 0.1 + 10 * rng.uniform();
      const auto m = linear_model(Stage2Kind::LogisticRegression, W, b);
      const auto ms = linear_model(Stage2Kind::LogisticRegression, W / c, b);
      const Eigen::MatrixXd S = predict_scores(m, X), Ss = predict_scores(ms, X * c);
      for (int i = 0; i < X.rows(); ++i)
        CHECK(decide(m, S.row(i).transpose()) == decide(ms, Ss.row(i).transpose()));
    }
  }

  TEST_CASE("LR on ground-truth concept targets is perfect") {
    TargetData d;
    const auto m = fit(Stage2Kind::LogisticRegression, d.X_train, d.Y_train, TaskMode::SingleLabel, Stage2Hyper{},
                       d.ds.label_space.digest());
    CHECK(accuracy(m, d.X_test, d.Y_test) == 1.0);
    CHECK(accuracy(m, d.X_train, d.Y_train) == 1.0);
    const Eigen::MatrixXd& W = concept_weights(m);
    CHECK(W.rows() == 4);
    CHECK(W.cols() == 12);
    for (std::size_t k = 0; k < d.ds.label_space.K(); ++k)
      for (const auto& id : d.ds.bank.disease(d.ds.label_space.diseases[k]).concept_ids)
        CHECK(W(static_cast<Eigen::Index>(k), d.ds.label_space.concept_index(id)) > 0.0);
  }

  TEST_CASE("every kind fits the noiseless targets") {
    TargetData d;
    for (const auto kind : {Stage2Kind::LinearSvm, Stage2Kind::RandomForest, Stage2Kind::Mlp}) {
      Stage2Hyper h;
      h.rf_trees = 20;
      const auto m = fit(kind, d.X_train, d.Y_train, TaskMode::SingleLabel, h, d.ds.label_space.digest());
      CHECK(accuracy(m, d.X_test, d.Y_test) == 1.0);
      if (kind == Stage2Kind::RandomForest) {
        const Eigen::MatrixXd S = predict_scores(m, d.X_test);
        CHECK(S.minCoeff() >= 0.0);
        CHECK(S.maxCoeff() <= 1.0);
      }
    }
  }

  TEST_CASE("permuting concept columns permutes LR weights") {
    TargetData d;
    const auto m = fit(Stage2Kind::LogisticRegression, d.X_train, d.Y_train, TaskMode::SingleLabel, Stage2Hyper{}, "x");
    std::vector<int> perm(12);
    for (int j = 0; j < 12; ++j) perm[static_cast<std::size_t>(j)] = (j * 5) % 12;
    Eigen::MatrixXd Xp(d.X_train.rows(), 12);
    for (int j = 0; j < 12; ++j) Xp.col(j) = d.X_train.col(perm[static_cast<std::size_t>(j)]);
    const auto mp = fit(Stage2Kind::LogisticRegression, Xp, d.Y_train, TaskMode::SingleLabel, Stage2Hyper{}, "x");
    for (int j = 0; j < 12; ++j)
      CHECK((mp.W.col(j) - m.W.col(perm[static_cast<std::size_t>(j)])).norm() < 1e-6);
  }

  TEST_CASE("weight shape on a 29 x 77 space") {
    Rng rng(1);
    Eigen::MatrixXd X(58, 77), Y = Eigen::MatrixXd::Zero(58, 29);
    for (int i = 0; i < X.size(); ++i) X(i) = rng.normal();
    for (int i = 0; i < 58; ++i) Y(i, i % 29) = 1;
    const auto m = fit(Stage2Kind::LogisticRegression, X, Y, TaskMode::MultiLabel, Stage2Hyper{}, "x");
    CHECK(concept_weights(m).rows() == 29);
    CHECK(concept_weights(m).cols() == 77);
  }

  TEST_CASE("non-linear models expose no concept weights") {
    TargetData d;
    Stage2Hyper h;
    h.rf_trees = 5;
    const auto rf = fit(Stage2Kind::RandomForest, d.X_train, d.Y_train, TaskMode::SingleLabel, h, "x");
    CHECK_THROWS_AS(concept_weights(rf), UnsupportedOperation);
  }

  TEST_CASE("predict refuses another label space") {
    const auto m = linear_model(Stage2Kind::LogisticRegression, Eigen::MatrixXd::Ones(2, 3), Eigen::VectorXd::Zero(2));
    const std::vector<ConceptLogits> rows{{"a", Eigen::VectorXd::Ones(3)}};
    CHECK(predict(m, rows, "toy").size() == 1);
    CHECK_THROWS_AS(predict(m, rows, "other"), ContractViolation);
    const std::vector<ConceptLogits> short_rows{{"a", Eigen::VectorXd::Ones(2)}};
    CHECK_THROWS_AS(predict(m, short_rows, "toy"), ContractViolation);
  }

  TEST_CASE("models round-trip through files") {
    TargetData d;
    oracle::TempDir dir("stage2");
    for (const auto kind :
         {Stage2Kind::LogisticRegression, Stage2Kind::LinearSvm, Stage2Kind::RandomForest, Stage2Kind::Mlp}) {
      Stage2Hyper h;
      h.rf_trees = 7;
      const auto m = fit(kind, d.X_train, d.Y_train, TaskMode::MultiLabel, h, "digest");
      save_model(dir / "m.bin", m);
      const auto back = load_model(dir / "m.bin");
      CHECK(back.kind == kind);
      CHECK(back.K == m.K);
      CHECK(back.E == m.E);
      CHECK(back.label_space_digest == "digest");
      CHECK(back.hyper.to_json() == m.hyper.to_json());
      CHECK((predict_scores(back, d.X_test) - predict_scores(m, d.X_test)).cwiseAbs().maxCoeff() < 1e-5);
    }
    CHECK_THROWS_AS(load_model(dir / "missing.bin"), IoError);
  }

  TEST_CASE("kind and mode names parse") {
    CHECK(parse_stage2_kind("svm") == Stage2Kind::LinearSvm);
    CHECK(parse_stage2_kind("rf") == Stage2Kind::RandomForest);
    CHECK(parse_task_mode("multi_label") == TaskMode::MultiLabel);
    CHECK_THROWS_AS(parse_stage2_kind("knn"), ConfigError);
  }
}
