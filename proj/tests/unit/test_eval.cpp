#include <doctest.h>

#include <cmath>
#include <set>

#include "cgp/errors.hpp"
#include "cgp/eval.hpp"
#include "support/oracles.hpp"

using namespace cgp;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out(i++) = x;
  return out;
}

struct Synthetic {
  SyntheticDataset ds;
  std::unique_ptr<EncoderBundle> bundle;
  EvalContext ctx;

  explicit Synthetic(int K = 4) {
    SyntheticParams p;
    p.K = K;
    ds = generate_synthetic(p);
    bundle = load_bundle("mock", 0);
    ctx.bundle = bundle.get();
    ctx.bank = &ds.bank;
    ctx.samples = &ds.samples;
    ctx.space = ds.label_space;
  }
};

ProtocolSpec quick_protocol() {
  ProtocolSpec p;
  p.shots = {4};
  p.seeds = {7};
  p.train.epochs = 20;
  p.train.M = 8;
  p.stage2.rf_trees = 10;
  p.stage2.mlp_epochs = 50;
  return p;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("average precision examples") {
    CHECK(average_precision(vec({0.9, 0.8, 0.1}), vec({1, 1, 0})) == 1.0);
    CHECK(average_precision(vec({0.9, 0.8, 0.7, 0.6}), vec({0, 1, 0, 1})) == doctest::Approx(0.5));
    CHECK(average_precision(vec({0.3}), vec({1})) == 1.0);
    const auto none = average_precision_detail(vec({0.3, 0.2}), vec({0, 0}));
    CHECK(none.no_positives);
    CHECK(none.value == 0.0);
  }

  TEST_CASE("average precision equals the exhaustive oracle") {
    Rng rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
      const int n = 1 + static_cast<int>(rng.uniform_below(10));
      Eigen::VectorXd s(n), r(n);
      for (int i = 0; i < n; ++i) {
        // Coarse scores so ties occur regularly.
        s(i) = static_cast<double>(rng.uniform_below(6)) / 5.0;
        r(i) = static_cast<double>(rng.uniform_below(2));
      }
      const double ap = average_precision(s, r);
      CHECK(ap == oracle::exhaustive_ap(s, r));
      CHECK(ap >= 0.0);
      CHECK(ap <= 1.0);
    }
  }

  TEST_CASE("ties are flagged and keep input order") {
    const auto tied = average_precision_detail(vec({0.5, 0.5}), vec({0, 1}));
    CHECK(tied.ties);
    CHECK(tied.value == doctest::Approx(0.5));
    CHECK_FALSE(average_precision_detail(vec({0.6, 0.5}), vec({0, 1})).ties);
  }

  TEST_CASE("mAP averages classes and excludes those without positives") {
    Eigen::MatrixXd S(4, 3), Y(4, 3);
    S << 0.9, 0.9, 0.1,
         0.8, 0.8, 0.2,
         0.7, 0.7, 0.3,
         0.6, 0.6, 0.4;
    Y << 1, 0, 0,
         1, 1, 0,
         0, 0, 0,
         0, 1, 0;
    const auto m = mean_average_precision(S, Y, {0, 1, 2}, {"a", "b", "c"});
    CHECK(m.per_class.at("a") == 1.0);
    CHECK(m.per_class.at("b") == doctest::Approx(0.5));
    CHECK(m.value == doctest::Approx(0.75));
    CHECK(m.excluded == std::vector<std::string>{"c"});
    CHECK_FALSE(m.warnings.empty());
  }

  TEST_CASE("mAP matches the per-class oracle on random instances") {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
      Eigen::MatrixXd S(5, 3), Y(5, 3);
      for (int i = 0; i < S.size(); ++i) {
        S(i) = rng.uniform();
        Y(i) = static_cast<double>(rng.uniform_below(2));
      }
      std::vector<double> aps;
      for (int k = 0; k < 3; ++k)
        if (Y.col(k).sum() > 0) aps.push_back(oracle::exhaustive_ap(S.col(k), Y.col(k)));
      const auto m = mean_average_precision(S, Y, {0, 1, 2}, {"a", "b", "c"});
      if (aps.empty()) continue;
      CHECK(m.value == doctest::Approx(oracle::mean(aps)).epsilon(1e-12));
      // A perfect ranker scores 1.
      CHECK(mean_average_precision(Y, Y, {0, 1, 2}, {"a", "b", "c"}).value == 1.0);
    }
  }

  TEST_CASE("weighted F1 examples") {
    Eigen::MatrixXd Y(4, 2), D(4, 2);
    Y << 1, 0, 1, 0, 1, 0, 0, 1;
    CHECK(weighted_f1(Y, Y) == 1.0);
    Eigen::MatrixXd wrong(4, 2);
    wrong << 0, 1, 0, 1, 0, 1, 1, 0;
    CHECK(weighted_f1(wrong, Y) == 0.0);
    // Class 0 perfectly predicted, class 1 never predicted.
    D << 1, 0, 1, 0, 1, 0, 1, 0;
    CHECK(weighted_f1(D, Y) == doctest::Approx((3 * (6.0 / 7.0) + 1 * 0.0) / 4));
    Eigen::MatrixXd D2(4, 2);
    D2 << 1, 0, 1, 0, 1, 0, 0, 0;
    CHECK(weighted_f1(D2, Y) == doctest::Approx(0.75));
  }

  TEST_CASE("weighted F1 matches the counting oracle") {
    Rng rng(8);
    for (int trial = 0; trial < 300; ++trial) {
      const int n = 1 + static_cast<int>(rng.uniform_below(12)), k = 1 + static_cast<int>(rng.uniform_below(4));
      Eigen::MatrixXd D(n, k), Y(n, k);
      for (int i = 0; i < D.size(); ++i) {
        D(i) = static_cast<double>(rng.uniform_below(2));
        Y(i) = static_cast<double>(rng.uniform_below(2));
      }
      const double f = weighted_f1(D, Y);
      CHECK(f == doctest::Approx(oracle::weighted_f1(D, Y)).epsilon(1e-12));
      CHECK(f >= 0.0);
      CHECK(f <= 1.0);
    }
  }

  TEST_CASE("aggregation uses the population standard deviation") {
    const std::vector<double> v{0.8, 0.9, 0.85, 0.7, 1.0};
    const auto r = MetricResult::aggregate(Metric::MeanAveragePrecision, v);
    CHECK(std::abs(r.mean - oracle::mean(v)) < 1e-9);
    CHECK(std::abs(r.std - oracle::population_std(v)) < 1e-9);
    CHECK(r.per_seed == v);
  }

  TEST_CASE("bank-prior scores rank a disease's own concepts first") {
    Synthetic s(3);
    const auto& space = s.ds.label_space;
    Eigen::MatrixXd P = Eigen::MatrixXd::Constant(1, static_cast<Eigen::Index>(space.E()), 0.1);
    for (const auto& id : s.ds.bank.disease(space.diseases[1]).concept_ids) P(0, space.concept_index(id)) = 0.9;
    const Eigen::MatrixXd S = bank_prior_scores(P, s.ds.bank, space, space.diseases);
    CHECK(S(0, 1) == doctest::Approx(0.8));
    CHECK(S(0, 0) < 0.0);
    CHECK(S(0, 2) < 0.0);
  }

  TEST_CASE("few-shot run is deterministic and its aggregates are consistent") {
    Synthetic s;
    auto p = quick_protocol();
    p.seeds = {7, 8};
    const auto a = run_few_shot(p, s.ctx);
    const auto b = run_few_shot(p, s.ctx);
    REQUIRE(a.status == "complete");
    CHECK(a.to_json().dump() == b.to_json().dump());
    REQUIRE(a.runs.size() == 2);
    std::vector<double> maps;
    for (const auto& r : a.runs) {
      maps.push_back(r.map);
      CHECK(r.encoder_unchanged);
      CHECK(r.test_images == 8);
      CHECK(r.map >= 0.0);
      CHECK(r.map <= 1.0);
      CHECK(r.weighted_f1 >= 0.0);
      CHECK(r.weighted_f1 <= 1.0);
    }
    const auto& agg = a.map_by_shots.at(4);
    CHECK(std::abs(agg.mean - oracle::mean(maps)) < 1e-9);
    CHECK(std::abs(agg.std - oracle::population_std(maps)) < 1e-9);
  }

  TEST_CASE("few-shot protocol table shape") {
    Synthetic s;
    auto p = quick_protocol();
    p.shots = {2, 4, 8, 16};
    p.seeds = {1, 2, 3, 4, 5};
    p.train.epochs = 3;
    p.train.warmup_epochs = 1;
    const auto r = run_few_shot(p, s.ctx);
    CHECK(r.runs.size() == 20);
    CHECK(r.map_by_shots.size() == 4);
    for (const auto& [shots, m] : r.map_by_shots) CHECK(m.per_seed.size() == 5);
  }

  TEST_CASE("base-to-novel reads no novel labels") {
    Synthetic s(6);
    auto p = quick_protocol();
    p.task = Task::BaseToNovel;
    p.shots = {16};
    p.train.epochs = 100;
    p.train.M = 32;
    AccessLog log;
    const auto r = run_base_to_novel(p, s.ctx, &log);
    REQUIRE(r.status == "complete");
    const auto novel = r.details.at("novel").get<std::vector<std::string>>();
    CHECK(novel.size() == 3);
    CHECK(log.size() > 0);
    CHECK(log.touching(std::set<std::string>(novel.begin(), novel.end())).empty());
    CHECK(r.map_by_shots.at(16).mean >= 0.9);
    CHECK(r.details.contains("novel_scoring"));
  }

  TEST_CASE("base-to-novel without novel test images is an error") {
    Synthetic s(4);
    // Keep only test rows of the two most frequent (base) diseases.
    const auto split = split_base_novel(s.ds.samples, s.ds.label_space);
    std::vector<ImageSample> kept;
    for (const auto& x : s.ds.samples)
      if (x.split != Split::Test || !x.has_label(split.novel[0]))
        if (x.split != Split::Test || !x.has_label(split.novel[1])) kept.push_back(x);
    s.ctx.samples = &kept;
    CHECK_THROWS_AS(run_base_to_novel(quick_protocol(), s.ctx), ValidationError);
  }

  TEST_CASE("ablation table shapes") {
    Synthetic s;
    auto p = quick_protocol();
    p.train.epochs = 3;
    p.train.warmup_epochs = 1;
    const auto pos = run_ablation(Sweep::TokenPosition, p, s.ctx);
    CHECK(pos.column_labels.size() == 3);
    CHECK(pos.row_labels.size() == 4);
    CHECK(pos.cells[0][0].has_value());
    CHECK_FALSE(pos.cells[1][0].has_value());

    const auto tokens = run_ablation(Sweep::NumTokens, p, s.ctx);
    CHECK(tokens.column_labels == std::vector<std::string>{"2", "4", "8", "16", "32", "64"});

    p.shots = {2, 4, 8, 16};
    const auto kinds = run_ablation(Sweep::Stage2Kind, p, s.ctx);
    CHECK(kinds.row_labels.size() == 4);
    CHECK(kinds.column_labels.size() == 4);
    std::size_t filled = 0;
    for (const auto& row : kinds.cells)
      for (const auto& c : row) filled += c.has_value();
    CHECK(filled == 16);
    CHECK(kinds.to_text().find("n=16") != std::string::npos);
  }
}
