#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "cgp/concept_bank.hpp"
#include "cgp/data.hpp"
#include "cgp/errors.hpp"
#include "support/oracles.hpp"

using namespace cgp;

namespace {

Concept validated(const std::string& id) {
  Concept c;
  c.id = id;
  c.display_name = id;
  c.status = ConceptStatus::Validated;
  c.provenance = {{TemplateId::ExplicitConcepts, 0}, {TemplateId::VsNormalComparison, 0}};
  return c;
}

// Frozen bank from {disease: [concept ids]}.
ConceptBank bank_of(const std::map<std::string, std::vector<std::string>>& layout) {
  ConceptBank bank;
  for (const auto& [name, ids] : layout)
    for (const auto& id : ids)
      if (!bank.has_concept(id)) bank.add_concept(validated(id));
  for (const auto& [name, ids] : layout) bank.set_disease({name, std::set<std::string>(ids.begin(), ids.end())});
  bank.freeze();
  return bank;
}

ImageSample sample(const std::string& id, std::set<std::string> labels, Split split = Split::Train) {
  return {id, "ref/" + id, std::move(labels), split};
}

Manifest parse(const std::string& text, const ConceptBank& bank) {
  std::istringstream in(text);
  return parse_manifest(in, bank);
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("manifest split counts and multi-label rows") {
    const auto bank = bank_of({{"DR", {"microaneurysms"}}, {"CRVO", {"venous engorgement"}}});
    std::ostringstream text;
    text << "image_id,image_ref,disease_labels,split\n";
    int id = 0;
    const std::pair<const char*, int> counts[] = {{"train", 2928}, {"val", 727}, {"test", 880}};
    for (const auto& [split, n] : counts)
      for (int i = 0; i < n; ++i, ++id) text << "img" << id << ",f" << id << ".png," << (id % 3 ? "DR" : "DR;CRVO") << "," << split << "\n";
    const auto m = parse(text.str(), bank);
    CHECK(filter_split(m.samples, Split::Train).size() == 2928);
    CHECK(filter_split(m.samples, Split::Val).size() == 727);
    CHECK(filter_split(m.samples, Split::Test).size() == 880);
    CHECK(m.samples[0].disease_labels == std::set<std::string>{"CRVO", "DR"});
    CHECK(m.label_space.K() == 2);
    CHECK(m.label_space.diseases == std::vector<std::string>{"CRVO", "DR"});
  }

  TEST_CASE("empty manifest is not an error") {
    const auto bank = bank_of({{"DR", {"microaneurysms"}}});
    const auto m = parse("image_id,image_ref,disease_labels,split\n", bank);
    CHECK(m.samples.empty());
    CHECK(m.label_space.K() == 0);
    CHECK(m.label_space.E() == 0);
  }

  TEST_CASE("manifest errors are reported") {
    const auto bank = bank_of({{"DR", {"microaneurysms"}}});
    CHECK_THROWS_AS(parse("id,ref\n", bank), ValidationError);
    CHECK_THROWS_AS(parse("image_id,image_ref,disease_labels,split\na,r,DR,train\na,r,DR,test\n", bank),
                    ValidationError);
    try {
      parse("image_id,image_ref,disease_labels,split\na,r,AMD,train\n", bank);
      FAIL("expected an unknown-disease error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("AMD") != std::string::npos);
    }
    CHECK_THROWS_AS(parse("image_id,image_ref,disease_labels,split\na,r,DR,holdout\n", bank), ValidationError);
    CHECK_THROWS_AS(load_manifest("/nonexistent/manifest.csv", bank), IoError);
  }

  TEST_CASE("manifest round-trips through a file with a stable label space") {
    SyntheticParams p;
    const auto ds = generate_synthetic(p);
    oracle::TempDir dir("manifest");
    save_manifest(dir / "m.csv", ds.samples);
    const auto a = load_manifest(dir / "m.csv", ds.bank);
    const auto b = load_manifest(dir / "m.csv", ds.bank);
    CHECK(a.samples == ds.samples);
    CHECK(a.label_space == ds.label_space);
    CHECK(a.label_space.digest() == b.label_space.digest());
    CHECK(a.hash == manifest_hash(ds.samples));
  }

  TEST_CASE("concept targets are the union of disease concept sets") {
    const auto bank = bank_of({{"A", {"a1", "a2"}}, {"B", {"b1", "b2", "b3"}}, {"C", {"a1", "c1", "c2"}},
                               {"DR", {"hard exudates", "hemorrhages", "microaneurysms"}}});
    const auto space = make_label_space(bank);
    const std::vector<ImageSample> samples{sample("s1", {"DR"}), sample("s2", {"A", "B"}), sample("s3", {"A", "C"})};
    const auto t = derive_concept_targets(samples, bank, space);
    CHECK(t[0].count() == 3);
    CHECK(t[1].count() == 5);
    // Oracle: size of the set union.
    std::set<std::string> u;
    for (const auto& d : {"A", "C"})
      for (const auto& id : bank.disease(d).concept_ids) u.insert(id);
    CHECK(t[2].count() == u.size());
    CHECK(t[2].count() == 4);
    for (std::size_t j = 0; j < space.E(); ++j)
      CHECK(static_cast<bool>(t[2].targets[j]) == u.contains(space.concept_ids[j]));
  }

  TEST_CASE("concept targets need a frozen bank and known diseases") {
    ConceptBank open;
    open.add_concept(validated("x"));
    open.set_disease({"X", {"x"}});
    CHECK_THROWS_AS(derive_concept_targets({sample("s", {"X"})}, open, make_label_space(open)), ContractViolation);
    const auto bank = bank_of({{"X", {"x"}}});
    CHECK_THROWS_AS(derive_concept_targets({sample("s", {"Y"})}, bank, make_label_space(bank)), ValidationError);
  }

  TEST_CASE("episode draws n per disease without leakage") {
    std::vector<ImageSample> samples;
    std::vector<std::string> diseases;
    for (int d = 0; d < 29; ++d) {
      diseases.push_back("d" + std::to_string(d));
      for (int i = 0; i < 20; ++i)
        samples.push_back(sample(diseases.back() + "-" + std::to_string(i), {diseases.back()},
                                 i < 17 ? Split::Train : (i < 19 ? Split::Val : Split::Test)));
    }
    const auto ep = sample_episode(samples, 16, 3);
    std::size_t slots = 0;
    for (const auto& [d, ids] : ep.selected_ids) {
      slots += ids.size();
      CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == ids.size());
    }
    CHECK(slots == 29 * 16);
    CHECK(ep.shortfall.empty());
    std::set<std::string> held_out;
    for (const auto& s : samples)
      if (s.split != Split::Train) held_out.insert(s.image_id);
    for (const auto& id : ep.unique_ids()) CHECK_FALSE(held_out.contains(id));

    const auto again = sample_episode(samples, 16, 3);
    CHECK(again.selected_ids == ep.selected_ids);
    CHECK(sample_episode(samples, 16, 4).selected_ids != ep.selected_ids);
  }

  TEST_CASE("single-image pools are forced") {
    const std::vector<ImageSample> samples{sample("a0", {"A"}), sample("b0", {"B"})};
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto ep = sample_episode(samples, 1, seed);
      CHECK(ep.selected_ids.at("A") == std::vector<std::string>{"a0"});
      CHECK(ep.selected_ids.at("B") == std::vector<std::string>{"b0"});
    }
  }

  TEST_CASE("shortfall and multi-label de-duplication are recorded") {
    const std::vector<ImageSample> samples{sample("x", {"A", "B"}), sample("a1", {"A"}), sample("b1", {"B"}),
                                           sample("b2", {"B"})};
    const auto ep = sample_episode(samples, 3, 1);
    CHECK(ep.shortfall.at("A") == 1);
    CHECK_FALSE(ep.shortfall.contains("B"));
    CHECK(ep.unique_ids().size() == 4);
    CHECK(ep.effective_counts.at("A") == 2);
    CHECK(ep.effective_counts.at("B") == 3);
    CHECK(episode_samples(samples, ep).size() == 4);
    CHECK_THROWS_AS(sample_episode(samples, 0, 1), ContractViolation);
  }

  TEST_CASE("one-shot selections are uniform within a pool") {
    const int pool = 8, seeds = 8000;
    std::vector<ImageSample> samples;
    for (int i = 0; i < pool; ++i) samples.push_back(sample("img" + std::to_string(i), {"A"}));
    std::map<std::string, int> counts;
    for (int s = 0; s < seeds; ++s) ++counts[sample_episode(samples, 1, static_cast<std::uint64_t>(s)).selected_ids.at("A")[0]];
    CHECK(counts.size() == pool);
    const double expected = static_cast<double>(seeds) / pool;
    double chi2 = 0;
    for (const auto& [id, c] : counts) chi2 += (c - expected) * (c - expected) / expected;
    CHECK(chi2 < 24.32);  // 99.9th percentile, 7 degrees of freedom
  }

  TEST_CASE("episode json round-trip") {
    const auto ds = generate_synthetic(SyntheticParams{});
    const auto ep = sample_episode(ds.samples, 4, 9);
    const auto back = episode_from_json(episode_to_json(ep));
    CHECK(back.n_shots == ep.n_shots);
    CHECK(back.seed == ep.seed);
    CHECK(back.selected_ids == ep.selected_ids);
    CHECK(back.effective_counts == ep.effective_counts);
    CHECK(back.shortfall == ep.shortfall);
    CHECK_THROWS_AS(episode_from_json(nlohmann::json{{"n_shots", "many"}}), ValidationError);
  }

  TEST_CASE("base/novel split sizes") {
    for (const auto& [K, base_n] : std::vector<std::pair<int, std::size_t>>{{29, 15}, {46, 23}, {3, 2}}) {
      std::vector<ImageSample> samples;
      LabelSpace space;
      for (int d = 0; d < K; ++d) {
        const std::string name = "d" + std::to_string(100 + d);
        space.diseases.push_back(name);
        for (int i = 0; i <= d % 5; ++i) samples.push_back(sample(name + "-" + std::to_string(i), {name}));
      }
      const auto split = split_base_novel(samples, space);
      CHECK(split.base.size() == base_n);
      CHECK(split.novel.size() == static_cast<std::size_t>(K) - base_n);
    }
  }

  TEST_CASE("base/novel split ranks by frequency and filters the train pool") {
    std::vector<ImageSample> samples;
    for (int i = 0; i < 10; ++i) samples.push_back(sample("a" + std::to_string(i), {"A"}));
    for (int i = 0; i < 5; ++i) samples.push_back(sample("b" + std::to_string(i), {"B"}));
    samples.push_back(sample("ab", {"A", "B"}));
    samples.push_back(sample("test-a", {"A"}, Split::Test));
    const LabelSpace space{{"A", "B"}, {}};
    const auto split = split_base_novel(samples, space);
    CHECK(split.base == std::vector<std::string>{"A"});
    CHECK(split.novel == std::vector<std::string>{"B"});
    CHECK(split.train_pool.size() == 10);
    for (const auto& s : split.train_pool) CHECK_FALSE(s.has_label("B"));

    // Ties go to the smaller name.
    const std::vector<ImageSample> tied{sample("1", {"Z"}), sample("2", {"M"})};
    CHECK(split_base_novel(tied, LabelSpace{{"M", "Z"}, {}}).base == std::vector<std::string>{"M"});
    CHECK_THROWS_AS(split_base_novel({sample("t", {"A"}, Split::Test)}, space), ContractViolation);
  }

  TEST_CASE("zero-shot hygiene keeps the full concept space") {
    SyntheticParams p;
    p.K = 6;
    const auto ds = generate_synthetic(p);
    const auto split = split_base_novel(ds.samples, ds.label_space);
    const std::set<std::string> novel(split.novel.begin(), split.novel.end());
    for (const auto& s : split.train_pool)
      for (const auto& d : s.disease_labels) CHECK_FALSE(novel.contains(d));
    const auto targets = derive_concept_targets(split.train_pool, ds.bank, ds.label_space);
    for (const auto& t : targets) CHECK(t.targets.size() == 18);
  }

  TEST_CASE("synthetic generator arithmetic and determinism") {
    SyntheticParams p;
    const auto ds = generate_synthetic(p);
    CHECK(ds.bank.validated_count() == 12);
    CHECK(ds.bank.disease_count() == 4);
    CHECK(ds.samples.size() == 80);
    CHECK(filter_split(ds.samples, Split::Train).size() == 64);
    CHECK(filter_split(ds.samples, Split::Val).size() == 8);
    CHECK(filter_split(ds.samples, Split::Test).size() == 8);
    const auto targets = derive_concept_targets(ds.samples, ds.bank, ds.label_space);
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
      const auto& sig = ds.signatures.at(ds.samples[i].image_id);
      for (std::size_t j = 0; j < ds.label_space.E(); ++j)
        CHECK(static_cast<bool>(targets[i].targets[j]) == sig.contains(ds.label_space.concept_ids[j]));
    }
    std::ostringstream a, b;
    write_manifest(a, ds.samples);
    write_manifest(b, generate_synthetic(p).samples);
    CHECK(a.str() == b.str());
  }

  TEST_CASE("synthetic sharing borrows concepts from the neighbouring disease") {
    SyntheticParams p;
    p.K = 3;
    p.concepts_per_disease = 4;
    p.shared_fraction = 0.5;
    const auto ds = generate_synthetic(p);
    CHECK(ds.bank.validated_count() == 6);
    for (const auto& [name, d] : ds.bank.diseases()) CHECK(d.concept_ids.size() == 4);
    p.shared_fraction = 1.0;
    CHECK_THROWS_AS(generate_synthetic(p), ContractViolation);
  }

  TEST_CASE("access log filters by label") {
    AccessLog log;
    log.record(sample("a", {"A"}), "train");
    log.record(sample("b", {"B", "C"}), "train");
    CHECK(log.size() == 2);
    CHECK(log.touching({"C"}).size() == 1);
    CHECK(log.touching({"Z"}).empty());
  }
}
