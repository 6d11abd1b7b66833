#include <doctest.h>

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>

#include "cgp/errors.hpp"
#include "cgp/interpret.hpp"
#include "support/oracles.hpp"

using namespace cgp;

namespace {

Stage2Model lr_model(const Eigen::MatrixXd& W) {
  Stage2Model m;
  m.kind = Stage2Kind::LogisticRegression;
  m.K = static_cast<int>(W.rows());
  m.E = static_cast<int>(W.cols());
  m.W = W;
  m.b = Eigen::VectorXd::Zero(W.rows());
  m.fitted.assign(static_cast<std::size_t>(m.K), true);
  return m;
}

LabelSpace space_of(int K, int E) {
  LabelSpace s;
  for (int k = 0; k < K; ++k) s.diseases.push_back("d" + std::to_string(k));
  for (int j = 0; j < E; ++j) s.concept_ids.push_back("c" + std::to_string(10 + j));
  return s;
}

ImageSample labelled(const std::string& id, const std::string& disease) { return {id, id, {disease}, Split::Train}; }

// Report built directly from (concept id, contribution) pairs.
ContributionReport report_of(const std::string& disease, std::vector<std::pair<std::string, double>> values) {
  ContributionReport r;
  r.disease = disease;
  std::stable_sort(values.begin(), values.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  int rank = 1;
  for (const auto& [id, v] : values) r.entries.push_back({id, id, v, v, rank++});
  return r;
}

// Noiseless synthetic data with ground-truth concept targets standing in
// for stage-1 logits.
struct TargetFit {
  SyntheticDataset ds;
  std::vector<ImageSample> train;
  std::vector<ConceptLogits> logits;
  Stage2Model model;

  TargetFit() {
    ds = generate_synthetic(SyntheticParams{});
    train = filter_split(ds.samples, Split::Train);
    const auto t = derive_concept_targets(train, ds.bank, ds.label_space);
    for (const auto& x : t) logits.push_back({x.image_id, x.as_vector()});
    model = fit(Stage2Kind::LogisticRegression, logits, train, ds.label_space, TaskMode::SingleLabel, Stage2Hyper{});
  }
};

}  // namespace

TEST_SUITE("interpret") {
  TEST_CASE("single sample with a single nonzero weight") {
    Eigen::MatrixXd W = Eigen::MatrixXd::Zero(1, 3);
    W(0, 1) = 2.0;
    const auto r = contributions(lr_model(W), space_of(1, 3), {{"a", Eigen::Vector3d(0.5, 1.5, -1.0)}},
                                 {labelled("a", "d0")}, "d0");
    CHECK(r.entries[0].concept_id == "c11");
    CHECK(r.entries[0].contribution == doctest::Approx(1.0));
    CHECK(r.entries[0].raw == doctest::Approx(3.0));
    CHECK(r.entries[0].rank == 1);
    CHECK(r.entries[1].contribution == 0.0);
    CHECK_FALSE(r.normalization_skipped);
  }

  TEST_CASE("all-zero weights give zero contributions and a skipped flag") {
    const auto r = contributions(lr_model(Eigen::MatrixXd::Zero(2, 4)), space_of(2, 4),
                                 {{"a", Eigen::Vector4d(1, 2, 3, 4)}}, {labelled("a", "d1")}, "d1");
    CHECK(r.normalization_skipped);
    for (const auto& e : r.entries) CHECK(e.contribution == 0.0);
    const auto mm = contributions(lr_model(Eigen::MatrixXd::Zero(2, 4)), space_of(2, 4),
                                  {{"a", Eigen::Vector4d(1, 2, 3, 4)}}, {labelled("a", "d1")}, "d1",
                                  Normalization::MinMax);
    CHECK(mm.normalization_skipped);
  }

  TEST_CASE("contributions follow the mean of weight times input") {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
      const int K = 2, E = 2 + static_cast<int>(rng.uniform_below(6)), N = 1 + static_cast<int>(rng.uniform_below(5));
      Eigen::MatrixXd W(K, E);
      for (int i = 0; i < W.size(); ++i) W(i) = rng.normal();
      std::vector<ConceptLogits> logits;
      std::vector<ImageSample> samples;
      for (int i = 0; i < N; ++i) {
        Eigen::VectorXd x(E);
        for (int j = 0; j < E; ++j) x(j) = rng.normal();
        logits.push_back({"s" + std::to_string(i), x});
        samples.push_back(labelled("s" + std::to_string(i), i % 2 ? "d1" : "d0"));
      }
      const auto space = space_of(K, E);
      const auto r = contributions(lr_model(W), space, logits, samples, "d0", Normalization::None);
      for (const auto& e : r.entries) {
        const int j = space.concept_index(e.concept_id);
        double acc = 0;
        int n = 0;
        for (int i = 0; i < N; i += 2, ++n) acc += W(0, j) * logits[static_cast<std::size_t>(i)].scores(j);
        CHECK(e.raw == doctest::Approx(acc / n).epsilon(1e-12));
      }

      // Sum normalization: positive parts add up to 1.
      const auto s = contributions(lr_model(W), space, logits, samples, "d0");
      double pos = 0;
      for (const auto& e : s.entries)
        if (e.contribution > 0) pos += e.contribution;
      if (!s.normalization_skipped) CHECK(pos == doctest::Approx(1.0));
      for (std::size_t i = 1; i < s.entries.size(); ++i)
        CHECK(s.entries[i - 1].contribution >= s.entries[i].contribution);

      // Sample order does not matter.
      auto rl = logits;
      auto rs = samples;
      std::reverse(rl.begin(), rl.end());
      std::reverse(rs.begin(), rs.end());
      const auto p = contributions(lr_model(W), space, rl, rs, "d0");
      for (std::size_t i = 0; i < s.entries.size(); ++i) {
        CHECK(p.entries[i].concept_id == s.entries[i].concept_id);
        CHECK(p.entries[i].contribution == doctest::Approx(s.entries[i].contribution).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("top and bottom extraction") {
    const auto r = report_of("d", {{"a", 0.5}, {"b", 0.3}, {"c", 0.2}, {"d", -0.1}, {"e", -0.4}});
    const auto top = r.top(2);
    CHECK(top.size() == 2);
    CHECK(top[0].concept_id == "a");
    const auto bottom = r.bottom(2, 2);
    CHECK(bottom.size() == 2);
    CHECK(bottom[0].concept_id == "e");
    CHECK(bottom[1].concept_id == "d");
    // Bottom never repeats a top entry.
    CHECK(r.bottom(5, 4).size() == 1);
    CHECK(r.to_text(2, 2).find("a") != std::string::npos);
  }

  TEST_CASE("one disease with four top and four bottom concepts gives eight links") {
    std::vector<std::pair<std::string, double>> v;
    for (int j = 0; j < 12; ++j) v.push_back({"k" + std::to_string(j), 1.0 - 0.2 * j});
    const auto flow = export_sankey({report_of("DR", v)}, 4, 4);
    CHECK(flow["links"].size() == 8);
    CHECK(flow["nodes"].size() == 9);
    std::size_t top = 0;
    for (const auto& l : flow["links"]) {
      top += l["group"] == "top";
      CHECK(l["value"].get<double>() == doctest::Approx(std::abs(l["contribution"].get<double>())));
    }
    CHECK(top == 4);
    CHECK(export_sankey({report_of("DR", v)}, 4, 0)["links"].size() == 4);
  }

  TEST_CASE("a shared concept node feeds both diseases") {
    const auto a = report_of("DR", {{"hemorrhages", 0.6}, {"microaneurysms", 0.4}, {"drusen", -0.2}});
    const auto b = report_of("CRVO", {{"hemorrhages", 0.7}, {"venous engorgement", 0.3}, {"drusen", -0.1}});
    const auto flow = export_sankey({a, b}, 2, 0);
    int shared = -1;
    for (const auto& n : flow["nodes"])
      if (n["id"] == "concept:hemorrhages") shared = n["index"].get<int>();
    REQUIRE(shared >= 0);
    std::set<int> targets;
    for (const auto& l : flow["links"])
      if (l["source"].get<int>() == shared) targets.insert(l["target"].get<int>());
    CHECK(targets.size() == 2);
    CHECK_THROWS_AS(export_sankey({a, a}, 2, 0), ContractViolation);
    CHECK_THROWS_AS(export_sankey({}, 2, 0), ContractViolation);
  }

  TEST_CASE("sankey export is byte-deterministic") {
    TargetFit f;
    std::vector<ContributionReport> reports;
    for (const auto& d : f.ds.label_space.diseases)
      reports.push_back(contributions(f.model, f.ds.label_space, f.logits, f.train, d, Normalization::Sum, &f.ds.bank));
    oracle::TempDir dir("sankey");
    save_sankey(dir / "a.json", export_sankey(reports, 4, 4));
    std::reverse(reports.begin(), reports.end());
    save_sankey(dir / "b.json", export_sankey(reports, 4, 4));
    auto slurp = [](const std::filesystem::path& p) {
      std::ifstream in(p);
      return std::string(std::istreambuf_iterator<char>(in), {});
    };
    CHECK(slurp(dir / "a.json") == slurp(dir / "b.json"));
    CHECK_FALSE(slurp(dir / "a.json").empty());
  }

  TEST_CASE("a disease's own concepts rank first on noiseless data") {
    TargetFit f;
    for (const auto& d : f.ds.label_space.diseases) {
      const auto r = contributions(f.model, f.ds.label_space, f.logits, f.train, d, Normalization::Sum, &f.ds.bank);
      const auto& own = f.ds.bank.disease(d).concept_ids;
      for (const auto& e : r.top(own.size())) CHECK(own.contains(e.concept_id));
      CHECK(r.sample_count == 16);
      CHECK(r.entries[0].display_name == f.ds.bank.concept_by_id(r.entries[0].concept_id).display_name);
    }
  }

  TEST_CASE("errors for non-linear models, unknown diseases and empty selections") {
    TargetFit f;
    Stage2Hyper h;
    h.rf_trees = 5;
    const auto rf = fit(Stage2Kind::RandomForest, f.logits, f.train, f.ds.label_space, TaskMode::SingleLabel, h);
    const auto& d0 = f.ds.label_space.diseases[0];
    CHECK_THROWS_AS(contributions(rf, f.ds.label_space, f.logits, f.train, d0), UnsupportedOperation);
    CHECK_THROWS_AS(contributions(f.model, f.ds.label_space, f.logits, f.train, "no such disease"), ValidationError);
    CHECK_THROWS_AS(contributions(f.model, f.ds.label_space, f.logits, {}, d0), ValidationError);
    CHECK_THROWS_AS(contributions(f.model, space_of(2, 2), f.logits, f.train, "d0"), ConflictError);
  }

  TEST_CASE("normalization names parse") {
    CHECK(parse_normalization("minmax") == Normalization::MinMax);
    CHECK(parse_normalization("min-max") == Normalization::MinMax);
    CHECK(parse_normalization("raw") == Normalization::None);
    CHECK_THROWS_AS(parse_normalization("zscore"), ConfigError);
  }
}
