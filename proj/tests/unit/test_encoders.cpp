#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "cgp/encoders.hpp"
#include "cgp/errors.hpp"
#include "cgp/stage1.hpp"
#include "support/oracles.hpp"

using namespace cgp;

namespace {

// Distinct rows so every slot of an assembled sequence can be identified.
PromptContext labelled_context(int M, PositionPolicy policy) {
  PromptContext ctx;
  ctx.policy = policy;
  ctx.vectors = Eigen::MatrixXd::Zero(M, 2);
  for (int m = 0; m < M; ++m) ctx.vectors(m, 0) = m + 1;
  return ctx;
}

Eigen::MatrixXd labelled_tokens(int n) {
  Eigen::MatrixXd t = Eigen::MatrixXd::Zero(n, 2);
  for (int i = 0; i < n; ++i) t(i, 1) = i + 1;
  return t;
}

// Reads a sequence back as "w<k>" / "c<k>" labels.
std::vector<std::string> labels_of(const Eigen::MatrixXd& seq) {
  std::vector<std::string> out;
  for (int r = 0; r < seq.rows(); ++r)
    out.push_back(seq(r, 0) != 0 ? "w" + std::to_string(static_cast<int>(seq(r, 0)))
                                 : "c" + std::to_string(static_cast<int>(seq(r, 1))));
  return out;
}

}  // namespace

TEST_SUITE("encoders") {
  TEST_CASE("assemble_prompt examples") {
    CHECK(labels_of(assemble_prompt(labelled_context(4, PositionPolicy::End), labelled_tokens(2), 77)) ==
          std::vector<std::string>{"w1", "w2", "w3", "w4", "c1", "c2"});
    CHECK(labels_of(assemble_prompt(labelled_context(4, PositionPolicy::Middle), labelled_tokens(1), 77)) ==
          std::vector<std::string>{"w1", "w2", "c1", "w3", "w4"});
    auto start = labels_of(assemble_prompt(labelled_context(1, PositionPolicy::Start), labelled_tokens(1), 77));
    auto end = labels_of(assemble_prompt(labelled_context(1, PositionPolicy::End), labelled_tokens(1), 77));
    std::reverse(end.begin(), end.end());
    CHECK(start == end);
  }

  TEST_CASE("assemble_prompt arithmetic holds for every size and policy") {
    for (PositionPolicy policy : {PositionPolicy::Start, PositionPolicy::Middle, PositionPolicy::End})
      for (int M = 1; M <= 64; ++M)
        for (int T = 1; T <= 8; ++T) {
          const auto seq = labels_of(assemble_prompt(labelled_context(M, policy), labelled_tokens(T), 77));
          REQUIRE(static_cast<int>(seq.size()) == M + T);
          // Oracle: where the concept block starts.
          const int first = policy == PositionPolicy::Start ? 0 : policy == PositionPolicy::End ? M : (M + 1) / 2;
          for (int i = 0; i < M + T; ++i) {
            const bool in_concept = i >= first && i < first + T;
            const int w_index = i < first ? i + 1 : i - T + 1;
            CHECK(seq[static_cast<std::size_t>(i)] ==
                  (in_concept ? "c" + std::to_string(i - first + 1) : "w" + std::to_string(w_index)));
          }
          const auto layout = prompt_layout(M, T, policy);
          CHECK(layout.length == M + T);
          CHECK(static_cast<int>(layout.context_slots.size()) == M);
          CHECK(layout.concept_slots.front() == first);
        }
  }

  TEST_CASE("overlong prompts are refused, not truncated") {
    CHECK_THROWS_AS(assemble_prompt(labelled_context(70, PositionPolicy::End), labelled_tokens(8), 77),
                    ContractViolation);
    CHECK_NOTHROW(assemble_prompt(labelled_context(69, PositionPolicy::End), labelled_tokens(8), 77));
  }

  TEST_CASE("mock bundle determinism and dimensions") {
    MockBundle a(5, 16), b(5, 16), c(6, 16);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() != c.fingerprint());
    CHECK(a.feature_dim() == 16);
    CHECK(a.encode_image("synth:x|y#1").size() == 16);
    CHECK(a.encode_image("photo.png") == a.encode_image("photo.png"));
    Rng rng(1);
    const auto ctx = PromptContext::random(4, 16, 0.02, PositionPolicy::End, rng);
    CHECK(a.encode_text(assemble_prompt(ctx, a.embed_tokens(a.tokenize("drusen")), 77)).size() == 16);
    CHECK_THROWS_AS(a.tokenize("  ..  "), ValidationError);
  }

  TEST_CASE("load_bundle builds mocks and refuses pretrained names") {
    const auto mock = load_bundle("mock", 3);
    CHECK(mock->feature_dim() == kMockDefaultDim);
    CHECK(load_bundle("mock", 3, 16)->feature_dim() == 16);
    CHECK_THROWS_AS(load_bundle("clip-vit-b16"), UnsupportedOperation);
  }

  TEST_CASE("every emitted feature is unit length") {
    SyntheticParams p;
    p.K = 5;
    p.shared_fraction = 0.4;
    p.noise = 0.1;
    const auto ds = generate_synthetic(p);
    MockBundle bundle(2, 32);
    Rng rng(4);
    for (const auto policy : {PositionPolicy::Start, PositionPolicy::Middle, PositionPolicy::End}) {
      const auto ctx = PromptContext::random(8, 32, 0.3, policy, rng);
      const Eigen::MatrixXd G = encode_concepts(bundle, ctx, ds.bank, ds.label_space);
      CHECK(G.rows() == static_cast<Eigen::Index>(ds.label_space.E()));
      for (int j = 0; j < G.rows(); ++j) CHECK(std::abs(G.row(j).norm() - 1.0) < 1e-6);
    }
    for (const auto& s : ds.samples) CHECK(std::abs(bundle.encode_image(s.image_ref).norm() - 1.0) < 1e-6);
    CHECK(std::abs(bundle.encode_image("fundus/001.png").norm() - 1.0) < 1e-6);
  }

  TEST_CASE("synthetic images sit on the sum of their concept encodings") {
    MockBundle bundle(9, 48);
    auto bare = [&](const std::string& name) { return bundle.encode_text(bundle.embed_tokens(bundle.tokenize(name))); };
    const Eigen::VectorXd expected = (bare("hard exudates") + bare("hemorrhages")).normalized();
    const auto f = bundle.encode_image("synth:hard exudates|hemorrhages#img7");
    CHECK(f.dot(expected) > 0.99);
    CHECK(f.dot(expected) < 1.0);  // the id-seeded jitter is present
    CHECK(f != bundle.encode_image("synth:hard exudates|hemorrhages#img8"));
  }

  TEST_CASE("encode_concepts is permutation-equivariant and shares the context") {
    SyntheticParams p;
    p.K = 3;
    const auto ds = generate_synthetic(p);
    MockBundle bundle(1, 24);
    Rng rng(8);
    const auto ctx = PromptContext::random(4, 24, 0.2, PositionPolicy::Middle, rng);
    auto tokens = concept_token_embeddings(bundle, ds.bank, ds.label_space);
    const Eigen::MatrixXd G = encode_concepts(bundle, ctx, tokens).features;

    std::vector<int> perm(tokens.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<Eigen::MatrixXd> permuted;
    for (int i : perm) permuted.push_back(tokens[static_cast<std::size_t>(i)]);
    const Eigen::MatrixXd Gp = encode_concepts(bundle, ctx, permuted).features;
    for (std::size_t r = 0; r < perm.size(); ++r)
      CHECK(Gp.row(static_cast<Eigen::Index>(r)) == G.row(perm[r]));

    // Duplicated concept text yields identical rows.
    const Eigen::MatrixXd dup = encode_concepts(bundle, ctx, {tokens[0], tokens[0]}).features;
    CHECK(dup.row(0) == dup.row(1));

    // Nudging w_1 moves every concept feature.
    auto nudged = ctx;
    nudged.vectors.row(0).array() += 1e-3;
    const Eigen::MatrixXd Gn = encode_concepts(bundle, nudged, tokens).features;
    for (int j = 0; j < G.rows(); ++j) CHECK((Gn.row(j) - G.row(j)).norm() > 1e-9);
  }

  TEST_CASE("text encoder backward matches central differences") {
    MockBundle bundle(3, 16);
    Rng rng(12);
    const auto ctx = PromptContext::random(4, 16, 0.5, PositionPolicy::End, rng);
    const Eigen::MatrixXd seq = assemble_prompt(ctx, bundle.embed_tokens(bundle.tokenize("cotton wool spots")), 77);
    Eigen::VectorXd probe(16);
    for (int i = 0; i < 16; ++i) probe(i) = rng.normal();
    std::unique_ptr<TextTape> tape;
    bundle.encode_text(seq, &tape);
    const Eigen::MatrixXd analytic = bundle.text_backward(*tape, probe);
    REQUIRE(analytic.rows() == seq.rows());
    const double h = 1e-5;
    Eigen::MatrixXd numeric(seq.rows(), seq.cols());
    for (int r = 0; r < seq.rows(); ++r)
      for (int c = 0; c < seq.cols(); ++c) {
        auto plus = seq, minus = seq;
        plus(r, c) += h;
        minus(r, c) -= h;
        numeric(r, c) = (probe.dot(bundle.encode_text(plus)) - probe.dot(bundle.encode_text(minus))) / (2 * h);
      }
    CHECK((analytic - numeric).norm() / numeric.norm() < 1e-4);
  }

  TEST_CASE("context gradient matches central differences on a toy bundle") {
    for (const auto policy : {PositionPolicy::Start, PositionPolicy::Middle, PositionPolicy::End}) {
      const auto r = oracle::check_context_gradient(16, 4, policy, 31);
      CHECK(r.gradient_norm > 0);
      CHECK(r.max_relative_error < 1e-4);
    }
  }

  TEST_CASE("position policy names parse") {
    CHECK(parse_position_policy("middle") == PositionPolicy::Middle);
    CHECK(to_string(PositionPolicy::Start) == "START");
    CHECK_THROWS_AS(parse_position_policy("left"), ConfigError);
  }
}
