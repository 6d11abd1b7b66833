#include "cgp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "cgp/errors.hpp"
#include "cgp/text.hpp"

namespace cgp {

namespace {
constexpr const char* kModule = "eval";

Eigen::MatrixXd decision_matrix(const Stage2Model& model, const Eigen::MatrixXd& scores) {
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i)
    for (int k : decide(model, scores.row(i).transpose())) D(i, k) = 1.0;
  return D;
}

std::vector<int> all_classes(std::size_t K) {
  std::vector<int> v(K);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::string seed_tag(int shots, std::uint64_t seed) {
  return "shots " + std::to_string(shots) + ", seed " + std::to_string(seed);
}

void aggregate_runs(EvaluationReport& r) {
  std::map<int, std::vector<double>> maps, f1s;
  for (const auto& run : r.runs) {
    maps[run.shots].push_back(run.map);
    f1s[run.shots].push_back(run.weighted_f1);
  }
  r.map_by_shots.clear();
  r.f1_by_shots.clear();
  for (auto& [shots, v] : maps) r.map_by_shots[shots] = MetricResult::aggregate(Metric::MeanAveragePrecision, v);
  for (auto& [shots, v] : f1s) r.f1_by_shots[shots] = MetricResult::aggregate(Metric::WeightedF1, v);
}

EvaluationReport start_report(const ProtocolSpec& protocol, const EvalContext& ctx) {
  if (!ctx.bundle || !ctx.bank || !ctx.samples) throw ContractViolation(kModule, "evaluation context is incomplete");
  if (protocol.shots.empty() || protocol.seeds.empty())
    throw ConfigError(kModule, "protocol needs at least one shot count and one seed");
  EvaluationReport r;
  r.protocol = protocol;
  r.manifest_hash = manifest_hash(*ctx.samples);
  r.label_space_digest = ctx.space.digest();
  r.bank_version = ctx.bank->version();
  r.encoder = ctx.bundle->name();
  r.encoder_fingerprint = ctx.bundle->fingerprint();
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Shared stage runners

Stage1Outcome train_stage1(const ProtocolSpec& protocol, const EvalContext& ctx, std::uint64_t seed,
                           std::vector<ImageSample> train_samples, std::vector<ImageSample> val_samples,
                           AccessLog* log) {
  TrainConfig cfg = protocol.train;
  cfg.seed = seed;
  Stage2Hyper hyper = protocol.stage2;
  hyper.seed = seed;
  TrainInputs in{ctx.bundle, ctx.bank, &ctx.space, std::move(train_samples), std::move(val_samples), log};
  std::optional<MlpScoreHead> head;
  const bool e2e = protocol.stage2_kind == Stage2Kind::Mlp && protocol.mlp_end_to_end;
  if (e2e) {
    head.emplace(ctx.space, protocol.mode, hyper, cfg.lr);
    in.head = &*head;
    in.concept_loss_weight = hyper.e2e_concept_weight;
  }
  Stage1Outcome out;
  out.state = train(in, cfg);
  // The jointly trained head matches the final context, not the best one.
  const PromptContext& chosen = e2e ? out.state.context : out.state.best_context;
  out.checkpoint = {to_stored_precision(chosen), ctx.bank->version(), ctx.space.digest()};
  if (e2e) out.e2e_model = head->model();
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

ApResult average_precision_detail(const Eigen::VectorXd& scores, const Eigen::VectorXd& relevance) {
  if (scores.size() != relevance.size()) throw ContractViolation(kModule, "scores and relevance differ in length");
  ApResult r;
  const Eigen::Index n = scores.size();
  const double positives = (relevance.array() > 0.5).cast<double>().sum();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return scores(a) > scores(b); });
  for (std::size_t k = 1; k < order.size(); ++k)
    if (scores(order[k]) == scores(order[k - 1])) r.ties = true;
  if (positives == 0) {
    r.no_positives = true;
    return r;
  }
  double hits = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (relevance(order[k]) > 0.5) hits += 1.0;
    const double recall = hits / positives;
    const double precision = hits / static_cast<double>(k + 1);
    r.value += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return r;
}

double average_precision(const Eigen::VectorXd& scores, const Eigen::VectorXd& relevance) {
  return average_precision_detail(scores, relevance).value;
}

MapResult mean_average_precision(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& truth,
                                 const std::vector<int>& class_set, const std::vector<std::string>& names) {
  if (scores.rows() != truth.rows() || scores.cols() != truth.cols())
    throw ContractViolation(kModule, "score and truth matrices differ in shape");
  MapResult out;
  double total = 0.0;
  int counted = 0;
  for (int k : class_set) {
    if (k < 0 || k >= scores.cols()) throw ContractViolation(kModule, "class index out of range");
    const std::string name = static_cast<std::size_t>(k) < names.size() ? names[static_cast<std::size_t>(k)]
                                                                        : "class " + std::to_string(k);
    const auto ap = average_precision_detail(scores.col(k), truth.col(k));
    if (ap.no_positives) {
      out.excluded.push_back(name);
      out.warnings.push_back("class '" + name + "' has no positives in the evaluation set; excluded from mAP");
      continue;
    }
    if (ap.ties) out.warnings.push_back("tied scores for class '" + name + "'; ranked by input order");
    out.per_class[name] = ap.value;
    total += ap.value;
    ++counted;
  }
  out.value = counted > 0 ? total / counted : 0.0;
  return out;
}

double weighted_f1(const Eigen::MatrixXd& decisions, const Eigen::MatrixXd& truth, const std::vector<int>& class_set) {
  if (decisions.rows() != truth.rows() || decisions.cols() != truth.cols())
    throw ContractViolation(kModule, "decision and truth matrices differ in shape");
  const auto classes = class_set.empty() ? all_classes(static_cast<std::size_t>(truth.cols())) : class_set;
  double weighted = 0.0, support_total = 0.0;
  for (int k : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (Eigen::Index i = 0; i < truth.rows(); ++i) {
      const bool d = decisions(i, k) > 0.5, t = truth(i, k) > 0.5;
      tp += d && t;
      fp += d && !t;
      fn += !d && t;
    }
    const double support = tp + fn;
    const double denom = 2 * tp + fp + fn;
    const double f1 = denom > 0 ? 2 * tp / denom : 0.0;
    weighted += support * f1;
    support_total += support;
  }
  return support_total > 0 ? weighted / support_total : 0.0;
}

std::string_view to_string(Metric m) { return m == Metric::MeanAveragePrecision ? "mAP" : "weighted_f1"; }

MetricResult MetricResult::aggregate(Metric metric, std::vector<double> per_seed) {
  MetricResult r;
  r.metric = metric;
  r.per_seed = std::move(per_seed);
  if (r.per_seed.empty()) return r;
  const double n = static_cast<double>(r.per_seed.size());
  r.mean = std::accumulate(r.per_seed.begin(), r.per_seed.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : r.per_seed) ss += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(ss / n);
  return r;
}

nlohmann::ordered_json MetricResult::to_json() const {
  nlohmann::ordered_json j{{"metric", to_string(metric)}, {"mean", mean}, {"std", std}, {"per_seed", per_seed}};
  if (per_class) j["per_class"] = *per_class;
  return j;
}

std::string_view to_string(Task t) { return t == Task::FewShot ? "few_shot" : "base_to_novel"; }

nlohmann::ordered_json ProtocolSpec::to_json() const {
  return {{"task", to_string(task)},
          {"shots", shots},
          {"seeds", seeds},
          {"stage2_kind", to_string(stage2_kind)},
          {"mode", to_string(mode)},
          {"mlp_end_to_end", mlp_end_to_end},
          {"train", train.to_json()},
          {"stage2", stage2.to_json()},
          {"config_digest", config_digest}};
}

nlohmann::ordered_json SeedOutcome::to_json() const {
  nlohmann::ordered_json j{{"shots", shots},
                           {"seed", seed},
                           {"mAP", map},
                           {"weighted_f1", weighted_f1},
                           {"per_class_ap", per_class_ap},
                           {"train_images", train_images},
                           {"test_images", test_images},
                           {"effective_counts", effective_counts},
                           {"shortfall", shortfall},
                           {"final_train_bce", final_train_bce},
                           {"best_epoch", best_epoch},
                           {"encoder_unchanged", encoder_unchanged}};
  if (base_map) j["base_mAP"] = *base_map;
  j["warnings"] = warnings;
  return j;
}

nlohmann::ordered_json EvaluationReport::to_json() const {
  nlohmann::ordered_json j;
  j["report"] = to_string(protocol.task);
  j["status"] = status;
  if (!error.empty()) j["error"] = error;
  j["protocol"] = protocol.to_json();
  j["provenance"] = {{"manifest_hash", manifest_hash},
                     {"label_space_digest", label_space_digest},
                     {"bank_version", bank_version},
                     {"encoder", encoder},
                     {"encoder_fingerprint", encoder_fingerprint},
                     {"episodes", "re-drawn per seed"}};
  if (!details.is_null()) j["details"] = details;
  nlohmann::ordered_json results = nlohmann::ordered_json::array();
  for (const auto& [shots, m] : map_by_shots)
    results.push_back({{"shots", shots}, {"mAP", m.to_json()}, {"weighted_f1", f1_by_shots.at(shots).to_json()}});
  j["results"] = results;
  nlohmann::ordered_json runs_json = nlohmann::ordered_json::array();
  for (const auto& r : runs) runs_json.push_back(r.to_json());
  j["runs"] = runs_json;
  j["warnings"] = warnings;
  return j;
}

// ---------------------------------------------------------------------------
// Few-shot protocol

EvaluationReport run_few_shot(const ProtocolSpec& protocol, const EvalContext& ctx) {
  auto report = start_report(protocol, ctx);
  report.details = {{"evaluation_set", "full test split"}, {"class_set", "all diseases with test positives"}};
  const auto& samples = *ctx.samples;
  const auto val = filter_split(samples, Split::Val);
  const auto test = filter_split(samples, Split::Test);
  if (test.empty()) throw ValidationError(kModule, "the manifest has no test split");
  const Eigen::MatrixXd Y = disease_matrix(test, ctx.space);
  const auto classes = all_classes(ctx.space.K());

  for (int shots : protocol.shots) {
    for (std::uint64_t seed : protocol.seeds) {
      try {
        SeedOutcome o;
        o.shots = shots;
        o.seed = seed;
        const auto ep = sample_episode(samples, shots, seed);
        auto train_samples = episode_samples(samples, ep);
        o.effective_counts = ep.effective_counts;
        o.shortfall = ep.shortfall;
        o.train_images = static_cast<int>(train_samples.size());
        o.test_images = static_cast<int>(test.size());
        for (const auto& [d, missing] : ep.shortfall)
          o.warnings.push_back("disease '" + d + "' has " + std::to_string(missing) + " fewer train images than requested");

        auto stages = train_stage1(protocol, ctx, seed, train_samples, val, nullptr);
        o.final_train_bce = stages.state.final_train_bce;
        o.best_epoch = stages.state.best_epoch;
        o.encoder_unchanged = stages.state.fingerprint_before == stages.state.fingerprint_after;

        const auto test_logits = infer_concepts(*ctx.bundle, stages.checkpoint, *ctx.bank, ctx.space, test);
        Stage2Model model;
        if (stages.e2e_model) {
          model = *stages.e2e_model;
        } else {
          Stage2Hyper hyper = protocol.stage2;
          hyper.seed = seed;
          const auto train_logits = infer_concepts(*ctx.bundle, stages.checkpoint, *ctx.bank, ctx.space, train_samples);
          model = fit(protocol.stage2_kind, train_logits, train_samples, ctx.space, protocol.mode, hyper);
        }
        for (const auto& w : model.warnings) o.warnings.push_back(w);
        const Eigen::MatrixXd S = predict_scores(model, stage2_inputs(model, test_logits));
        const auto map = mean_average_precision(S, Y, classes, ctx.space.diseases);
        o.map = map.value;
        o.per_class_ap = map.per_class;
        for (const auto& w : map.warnings) o.warnings.push_back(w);
        o.weighted_f1 = weighted_f1(decision_matrix(model, S), Y);
        report.runs.push_back(std::move(o));
      } catch (const std::exception& e) {
        report.status = "failed";
        report.error = seed_tag(shots, seed) + ": " + e.what();
        aggregate_runs(report);
        if (ctx.on_progress) ctx.on_progress(report.to_json());
        return report;
      }
      aggregate_runs(report);
      if (ctx.on_progress) ctx.on_progress(report.to_json());
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Base-to-novel protocol

Eigen::MatrixXd bank_prior_scores(const Eigen::MatrixXd& P, const ConceptBank& bank, const LabelSpace& space,
                                  const std::vector<std::string>& diseases) {
  if (P.cols() != static_cast<Eigen::Index>(space.E()))
    throw ContractViolation(kModule, "probability matrix width differs from the label space E");
  Eigen::MatrixXd S(P.rows(), static_cast<Eigen::Index>(diseases.size()));
  for (std::size_t d = 0; d < diseases.size(); ++d) {
    std::vector<bool> in_bank(space.E(), false);
    for (const auto& id : bank.disease(diseases[d]).concept_ids) {
      const int j = space.concept_index(id);
      if (j >= 0) in_bank[static_cast<std::size_t>(j)] = true;
    }
    const auto n_in = std::count(in_bank.begin(), in_bank.end(), true);
    const auto n_out = static_cast<long>(space.E()) - n_in;
    if (n_in == 0) throw ValidationError(kModule, "disease '" + diseases[d] + "' has no bank concepts to score with");
    for (Eigen::Index i = 0; i < P.rows(); ++i) {
      double a = 0.0, b = 0.0;
      for (std::size_t j = 0; j < space.E(); ++j) (in_bank[j] ? a : b) += P(i, static_cast<Eigen::Index>(j));
      S(i, static_cast<Eigen::Index>(d)) = a / static_cast<double>(n_in) - (n_out > 0 ? b / static_cast<double>(n_out) : 0.0);
    }
  }
  return S;
}

EvaluationReport run_base_to_novel(const ProtocolSpec& protocol, const EvalContext& ctx, AccessLog* external_log) {
  auto report = start_report(protocol, ctx);
  const auto& samples = *ctx.samples;
  const auto split = split_base_novel(samples, ctx.space);
  const std::set<std::string> base(split.base.begin(), split.base.end());
  const std::set<std::string> novel(split.novel.begin(), split.novel.end());
  auto only_base = [&](const ImageSample& s) {
    return std::all_of(s.disease_labels.begin(), s.disease_labels.end(), [&](const auto& d) { return base.contains(d); });
  };

  std::vector<ImageSample> val, novel_test, base_test;
  for (const auto& s : samples) {
    if (s.split == Split::Val && only_base(s)) val.push_back(s);
    if (s.split != Split::Test) continue;
    if (std::any_of(s.disease_labels.begin(), s.disease_labels.end(), [&](const auto& d) { return novel.contains(d); }))
      novel_test.push_back(s);
    else
      base_test.push_back(s);
  }
  if (novel_test.empty()) throw ValidationError(kModule, "no test images carry a novel label; nothing to evaluate");

  // Evaluation restricted to the novel columns.
  std::vector<int> novel_idx, base_idx;
  for (const auto& d : split.novel) novel_idx.push_back(ctx.space.disease_index(d));
  for (const auto& d : split.base) base_idx.push_back(ctx.space.disease_index(d));
  const Eigen::MatrixXd Yall = disease_matrix(novel_test, ctx.space);
  Eigen::MatrixXd Y(Yall.rows(), static_cast<Eigen::Index>(novel_idx.size()));
  for (std::size_t c = 0; c < novel_idx.size(); ++c) Y.col(static_cast<Eigen::Index>(c)) = Yall.col(novel_idx[c]);
  const LabelSpace base_space{split.base, ctx.space.concept_ids};

  report.details = {{"base", split.base},
                    {"novel", split.novel},
                    {"train_counts", split.train_counts},
                    {"filtered_train_pool", split.train_pool.size()},
                    {"novel_test_images", novel_test.size()},
                    {"novel_scoring",
                     "bank-prior head: mean probability of the disease's bank concepts minus mean probability of "
                     "all other concepts; base diseases use the fitted stage-2 model"},
                    {"novel_decisions", protocol.mode == TaskMode::SingleLabel ? "argmax over novel diseases"
                                                                               : "bank-prior score > 0"}};

  AccessLog local_log;
  AccessLog& log = external_log ? *external_log : local_log;
  for (int shots : protocol.shots) {
    for (std::uint64_t seed : protocol.seeds) {
      try {
        SeedOutcome o;
        o.shots = shots;
        o.seed = seed;
        const auto ep = sample_episode(split.train_pool, shots, seed);
        auto train_samples = episode_samples(split.train_pool, ep);
        o.effective_counts = ep.effective_counts;
        o.shortfall = ep.shortfall;
        o.train_images = static_cast<int>(train_samples.size());
        o.test_images = static_cast<int>(novel_test.size());

        ProtocolSpec p = protocol;
        p.mlp_end_to_end = false;  // the base head is fitted after stage 1 here
        auto stages = train_stage1(p, ctx, seed, train_samples, val, &log);
        o.final_train_bce = stages.state.final_train_bce;
        o.best_epoch = stages.state.best_epoch;
        o.encoder_unchanged = stages.state.fingerprint_before == stages.state.fingerprint_after;

        // Base head, fitted on base labels only.
        const auto train_logits = infer_concepts(*ctx.bundle, stages.checkpoint, *ctx.bank, ctx.space, train_samples);
        for (const auto& s : train_samples) log.record(s, "stage2/train");
        Stage2Hyper hyper = protocol.stage2;
        hyper.seed = seed;
        const auto base_model = fit(protocol.stage2_kind, train_logits, train_samples, base_space, protocol.mode, hyper);
        for (const auto& w : base_model.warnings) o.warnings.push_back(w);

        const auto leaked = log.touching(novel);
        if (!leaked.empty())
          throw ContractViolation(kModule, "training read image '" + leaked.front().image_id + "' carrying a novel label");

        const auto test_logits = infer_concepts(*ctx.bundle, stages.checkpoint, *ctx.bank, ctx.space, novel_test);
        const Eigen::MatrixXd S = bank_prior_scores(logits_matrix(test_logits, true), *ctx.bank, ctx.space, split.novel);
        std::vector<int> cols(split.novel.size());
        std::iota(cols.begin(), cols.end(), 0);
        const auto map = mean_average_precision(S, Y, cols, split.novel);
        o.map = map.value;
        o.per_class_ap = map.per_class;
        for (const auto& w : map.warnings) o.warnings.push_back(w);

        Eigen::MatrixXd D = Eigen::MatrixXd::Zero(S.rows(), S.cols());
        for (Eigen::Index i = 0; i < S.rows(); ++i) {
          if (protocol.mode == TaskMode::SingleLabel) {
            Eigen::Index k = 0;
            S.row(i).maxCoeff(&k);
            D(i, k) = 1.0;
          } else {
            for (Eigen::Index k = 0; k < S.cols(); ++k) D(i, k) = S(i, k) > 0.0 ? 1.0 : 0.0;
          }
        }
        o.weighted_f1 = weighted_f1(D, Y);

        if (!base_test.empty()) {
          const auto base_logits = infer_concepts(*ctx.bundle, stages.checkpoint, *ctx.bank, ctx.space, base_test);
          const Eigen::MatrixXd Sb = predict_scores(base_model, stage2_inputs(base_model, base_logits));
          std::vector<int> bcols(split.base.size());
          std::iota(bcols.begin(), bcols.end(), 0);
          o.base_map = mean_average_precision(Sb, disease_matrix(base_test, base_space), bcols, split.base).value;
        }
        report.runs.push_back(std::move(o));
      } catch (const std::exception& e) {
        report.status = "failed";
        report.error = seed_tag(shots, seed) + ": " + e.what();
        aggregate_runs(report);
        if (ctx.on_progress) ctx.on_progress(report.to_json());
        return report;
      }
      aggregate_runs(report);
      if (ctx.on_progress) ctx.on_progress(report.to_json());
    }
  }
  report.details["access_log"] = {{"reads", log.size()}, {"novel_label_reads", log.touching(novel).size()}};
  return report;
}

// ---------------------------------------------------------------------------
// Ablations

std::string_view to_string(Sweep s) {
  switch (s) {
    case Sweep::TokenPosition: return "token-position";
    case Sweep::NumTokens: return "num-tokens";
    case Sweep::Stage2Kind: return "stage2";
  }
  return "?";
}

Sweep parse_sweep(std::string_view name) {
  const std::string n = to_lower(trim(name));
  if (n == "token-position" || n == "token_position") return Sweep::TokenPosition;
  if (n == "num-tokens" || n == "num_tokens") return Sweep::NumTokens;
  if (n == "stage2" || n == "stage2-kind" || n == "stage2_kind") return Sweep::Stage2Kind;
  throw ConfigError(kModule, "unknown sweep '" + std::string(name) + "'");
}

const std::vector<std::string>& prompt_learner_rows() {
  static const std::vector<std::string> rows{"shared context + concepts", "conditional context + concepts",
                                             "prompt distribution + concepts", "multi-modal prompts + concepts"};
  return rows;
}

nlohmann::ordered_json AblationTable::to_json() const {
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    nlohmann::ordered_json row{{"label", row_labels[r]}};
    nlohmann::ordered_json cols = nlohmann::ordered_json::array();
    for (const auto& cell : cells[r]) cols.push_back(cell ? cell->to_json() : nlohmann::ordered_json(nullptr));
    row["cells"] = cols;
    rows.push_back(row);
  }
  return {{"sweep", to_string(sweep)}, {"corner", corner}, {"columns", column_labels}, {"rows", rows}, {"notes", notes}};
}

std::string AblationTable::to_text() const {
  std::ostringstream out;
  out << corner;
  for (const auto& c : column_labels) out << " | " << c;
  out << '\n';
  out.setf(std::ios::fixed);
  out.precision(2);
  for (std::size_t r = 0; r < row_labels.size(); ++r) {
    out << row_labels[r];
    for (const auto& cell : cells[r]) {
      out << " | ";
      if (cell) out << 100.0 * cell->mean << " +- " << 100.0 * cell->std;
      else out << "n/a";
    }
    out << '\n';
  }
  return out.str();
}

AblationTable run_ablation(Sweep sweep, const ProtocolSpec& base, const EvalContext& ctx) {
  if (base.shots.empty()) throw ConfigError(kModule, "ablation needs at least one shot count");
  AblationTable t;
  t.sweep = sweep;
  const int top_shots = *std::max_element(base.shots.begin(), base.shots.end());
  auto run_cell = [&](ProtocolSpec p) -> MetricResult {
    p.task = Task::FewShot;
    const auto report = run_few_shot(p, ctx);
    if (report.status != "complete") throw TrainingError(kModule, "ablation cell failed: " + report.error);
    return report.map_by_shots.begin()->second;
  };

  switch (sweep) {
    case Sweep::TokenPosition:
    case Sweep::NumTokens: {
      t.corner = sweep == Sweep::TokenPosition ? "method / concept token position" : "method / learnable tokens";
      t.row_labels = prompt_learner_rows();
      std::vector<ProtocolSpec> columns;
      if (sweep == Sweep::TokenPosition) {
        for (auto pos : {PositionPolicy::Start, PositionPolicy::Middle, PositionPolicy::End}) {
          ProtocolSpec p = base;
          p.train.position = pos;
          columns.push_back(p);
          t.column_labels.emplace_back(to_string(pos));
        }
      } else {
        for (int M : {2, 4, 8, 16, 32, 64}) {
          ProtocolSpec p = base;
          p.train.M = M;
          columns.push_back(p);
          t.column_labels.push_back(std::to_string(M));
        }
      }
      t.cells.assign(t.row_labels.size(), std::vector<std::optional<MetricResult>>(columns.size()));
      for (std::size_t c = 0; c < columns.size(); ++c) {
        columns[c].shots = {top_shots};
        t.cells[0][c] = run_cell(columns[c]);
      }
      t.notes.push_back("cells are mAP mean and population std over seeds at " + std::to_string(top_shots) + " shots");
      t.notes.push_back("only the shared-context prompt learner is implemented; other rows are empty");
      break;
    }
    case Sweep::Stage2Kind: {
      t.corner = "stage-2 model / shots";
      const std::vector<std::pair<Stage2Kind, std::string>> rows{
          {Stage2Kind::LogisticRegression, "logistic regression"},
          {Stage2Kind::LinearSvm, "linear SVM"},
          {Stage2Kind::RandomForest, "random forest"},
          {Stage2Kind::Mlp, "MLP (end-to-end with stage 1)"}};
      for (int n : base.shots) t.column_labels.push_back("n=" + std::to_string(n));
      t.cells.assign(rows.size(), std::vector<std::optional<MetricResult>>(base.shots.size()));
      for (std::size_t r = 0; r < rows.size(); ++r) {
        t.row_labels.push_back(rows[r].second);
        for (std::size_t c = 0; c < base.shots.size(); ++c) {
          ProtocolSpec p = base;
          p.stage2_kind = rows[r].first;
          p.mlp_end_to_end = true;
          p.shots = {base.shots[c]};
          t.cells[r][c] = run_cell(p);
        }
      }
      t.notes.push_back("cells are mAP mean and population std over seeds; SVM ranks by margin");
      break;
    }
  }
  return t;
}

}  // namespace cgp
