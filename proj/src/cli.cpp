#include "cgp/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "cgp/concept_bank.hpp"
#include "cgp/data.hpp"
#include "cgp/digest.hpp"
#include "cgp/encoders.hpp"
#include "cgp/errors.hpp"
#include "cgp/eval.hpp"
#include "cgp/generator.hpp"
#include "cgp/interpret.hpp"
#include "cgp/stage1.hpp"
#include "cgp/stage2.hpp"
#include "cgp/text.hpp"

namespace cgp::cli {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {
constexpr const char* kModule = "cli";

// ---------------------------------------------------------------------------
// Small helpers

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(kModule, "cannot write '" + path.string() + "'");
  out << text;
}

void write_json(const fs::path& path, const Json& doc) { write_text(path, doc.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(kModule, "cannot read '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(kModule, "'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

std::string type_name(const nlohmann::json& v) {
  if (v.is_number()) return "a number";
  if (v.is_string()) return "a string";
  if (v.is_boolean()) return "a boolean";
  if (v.is_array()) return "a list";
  if (v.is_object()) return "an object";
  return "null";
}

bool same_kind(const Json& a, const nlohmann::json& b) {
  if (a.is_number()) return b.is_number();
  if (a.is_string()) return b.is_string();
  if (a.is_boolean()) return b.is_boolean();
  if (a.is_array()) return b.is_array();
  if (a.is_object()) return b.is_object();
  return true;
}

void merge_at(Json& base, const nlohmann::json& layer, const std::string& path) {
  if (!layer.is_object()) throw ConfigError(kModule, "config " + (path.empty() ? "root" : "'" + path + "'") + " must be an object");
  for (const auto& [key, value] : layer.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError(kModule, "unknown config key '" + here + "'");
    Json& slot = base[key];
    if (!same_kind(slot, value))
      throw ConfigError(kModule, "config key '" + here + "' expects " + type_name(slot) + ", got " + type_name(value));
    if (slot.is_object())
      merge_at(slot, value, here);
    else
      slot = value;
  }
}

std::vector<int> int_list(std::string_view list, const char* what) {
  std::vector<int> out;
  for (long long v : parse_int_list(list)) {
    if (v < 1) throw ConfigError(kModule, std::string(what) + " must be positive, got " + std::to_string(v));
    out.push_back(static_cast<int>(v));
  }
  return out;
}

Task parse_task(std::string_view name) {
  const auto n = to_lower(trim(name));
  if (n == "few_shot" || n == "few-shot") return Task::FewShot;
  if (n == "base_to_novel" || n == "base-novel" || n == "base_novel" || n == "zero_shot") return Task::BaseToNovel;
  throw ConfigError(kModule, "unknown task '" + std::string(name) + "' (expected few_shot|base_to_novel)");
}

// ---------------------------------------------------------------------------
// Config -> objects

SyntheticParams synthetic_params(const Json& s) {
  SyntheticParams p;
  p.K = s.at("K").get<int>();
  p.concepts_per_disease = s.at("concepts_per_disease").get<int>();
  p.shared_fraction = s.at("shared_fraction").get<double>();
  p.images_per_disease = s.at("images_per_disease").get<int>();
  p.noise = s.at("noise").get<double>();
  p.seed = s.at("seed").get<std::uint64_t>();
  p.train_fraction = s.at("train_fraction").get<double>();
  p.val_fraction = s.at("val_fraction").get<double>();
  return p;
}

Json synthetic_json(const SyntheticParams& p) {
  return {{"K", p.K},
          {"concepts_per_disease", p.concepts_per_disease},
          {"shared_fraction", p.shared_fraction},
          {"images_per_disease", p.images_per_disease},
          {"noise", p.noise},
          {"seed", p.seed},
          {"train_fraction", p.train_fraction},
          {"val_fraction", p.val_fraction}};
}

TrainConfig train_config(const Json& config) {
  TrainConfig t;
  t.update_from_json(config.at("train"));
  t.validate();
  return t;
}

Stage2Hyper stage2_hyper(const Json& config) {
  Stage2Hyper h;
  h.update_from_json(config.at("stage2").at("hyper"));
  return h;
}

ProtocolSpec protocol_spec(const Json& config, const std::string& digest) {
  ProtocolSpec p;
  const auto& proto = config.at("protocol");
  p.task = parse_task(proto.at("task").get<std::string>());
  p.shots = proto.at("shots").get<std::vector<int>>();
  p.seeds = proto.at("seeds").get<std::vector<std::uint64_t>>();
  const auto& s2 = config.at("stage2");
  p.stage2_kind = parse_stage2_kind(s2.at("kind").get<std::string>());
  p.mode = parse_task_mode(s2.at("mode").get<std::string>());
  p.mlp_end_to_end = s2.at("end_to_end").get<bool>();
  p.train = train_config(config);
  p.stage2 = stage2_hyper(config);
  p.config_digest = digest;
  if (p.shots.empty() || p.seeds.empty()) throw ConfigError(kModule, "protocol needs shots and seeds");
  for (int n : p.shots)
    if (n < 1) throw ConfigError(kModule, "shot counts must be positive");
  return p;
}

std::unique_ptr<EncoderBundle> make_bundle(const Json& config) {
  const auto& e = config.at("encoder");
  return load_bundle(e.at("name").get<std::string>(), e.at("seed").get<std::uint64_t>(), e.at("dim").get<int>());
}

struct Data {
  ConceptBank bank;
  std::vector<ImageSample> samples;
  LabelSpace space;
  std::string manifest_hash;
};

Data load_data(const Json& config) {
  const auto& d = config.at("data");
  const auto source = to_lower(d.at("source").get<std::string>());
  Data out;
  if (source == "synthetic") {
    auto ds = generate_synthetic(synthetic_params(d.at("synthetic")));
    out.bank = std::move(ds.bank);
    out.samples = std::move(ds.samples);
    out.space = std::move(ds.label_space);
  } else if (source == "files") {
    const auto bank_path = d.at("bank").get<std::string>();
    const auto manifest_path = d.at("manifest").get<std::string>();
    if (bank_path.empty()) throw ConfigError(kModule, "no concept bank given (use --bank or data.bank)");
    out.bank = load_bank(bank_path);
    if (manifest_path.empty()) throw ConfigError(kModule, "no manifest given (use --manifest or data.manifest)");
    auto m = load_manifest(manifest_path, out.bank);
    out.samples = std::move(m.samples);
    out.space = std::move(m.label_space);
  } else {
    throw ConfigError(kModule, "data.source must be 'files' or 'synthetic', got '" + source + "'");
  }
  out.manifest_hash = manifest_hash(out.samples);
  return out;
}

std::vector<ImageSample> split_samples(const std::vector<ImageSample>& samples, const std::string& split) {
  if (to_lower(split) == "all") return samples;
  return filter_split(samples, parse_split(split));
}

// ---------------------------------------------------------------------------
// Report text

std::string report_summary(const EvaluationReport& r) {
  std::string out = std::string(to_string(r.protocol.task)) + " report: " + r.status + "\n";
  if (!r.error.empty()) out += "error: " + r.error + "\n";
  out += "stage 2: " + std::string(to_string(r.protocol.stage2_kind)) + ", config digest " +
         (r.protocol.config_digest.empty() ? "(none)" : r.protocol.config_digest) + "\n";
  for (const auto& [shots, m] : r.map_by_shots) {
    const auto& f = r.f1_by_shots.at(shots);
    out += "  " + std::to_string(shots) + "-shot  mAP " + fixed(m.mean, 4) + " +- " + fixed(m.std, 4) +
           "  weighted F1 " + fixed(f.mean, 4) + " +- " + fixed(f.std, 4) + "  (" + std::to_string(m.per_seed.size()) +
           " seeds)\n";
  }
  std::size_t warnings = r.warnings.size();
  for (const auto& run : r.runs) warnings += run.warnings.size();
  if (warnings) out += "warnings: " + std::to_string(warnings) + " (see the JSON report)\n";
  return out;
}

std::string run_dir_name(const std::string& digest) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return std::string("run-") + buf + "-" + digest.substr(0, 12);
}

fs::path fresh_run_dir(const fs::path& root, const std::string& digest) {
  fs::create_directories(root);
  const std::string base = run_dir_name(digest);
  fs::path dir = root / base;
  for (int i = 2; fs::exists(dir); ++i) dir = root / (base + "-" + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

Json predictions_json(const std::vector<DiseasePrediction>& preds, const LabelSpace* space) {
  Json rows = Json::array();
  for (const auto& p : preds) {
    Json scores = Json::array();
    for (Eigen::Index k = 0; k < p.scores.size(); ++k) scores.push_back(p.scores(k));
    Json decision = Json::array();
    for (int k : p.decision)
      decision.push_back(space ? Json(space->diseases[static_cast<std::size_t>(k)]) : Json(k));
    rows.push_back({{"image_id", p.image_id}, {"scores", scores}, {"decision", decision}});
  }
  Json doc;
  if (space) doc["diseases"] = space->diseases;
  doc["predictions"] = rows;
  return doc;
}

// ---------------------------------------------------------------------------
// Command-line state

struct Flags {
  std::string config;
  std::vector<std::string> sets;
  std::string manifest, bank;
  bool synthetic = false;
  std::string encoder;
  std::optional<std::uint64_t> seed;
  std::string shots, seeds;
  std::optional<int> epochs, num_tokens;
  std::optional<double> lr;
  std::string position, kind, mode;
};

Json resolve_config(const Flags& f) {
  Json config = f.config.empty() ? default_config() : load_config(f.config);
  for (const auto& s : f.sets) apply_override(config, s);
  if (f.synthetic) config["data"]["source"] = "synthetic";
  if (!f.bank.empty() || !f.manifest.empty()) {
    config["data"]["source"] = "files";
    if (!f.bank.empty()) config["data"]["bank"] = fs::absolute(f.bank).lexically_normal().string();
    if (!f.manifest.empty()) config["data"]["manifest"] = fs::absolute(f.manifest).lexically_normal().string();
  }
  if (!f.encoder.empty()) config["encoder"]["name"] = f.encoder;
  if (f.seed) {
    config["protocol"]["seeds"] = Json::array({*f.seed});
    config["train"]["seed"] = *f.seed;
    config["stage2"]["hyper"]["seed"] = *f.seed;
  }
  if (!f.shots.empty()) config["protocol"]["shots"] = int_list(f.shots, "--shots");
  if (!f.seeds.empty()) {
    Json seeds = Json::array();
    for (int s : int_list(f.seeds, "--seeds")) seeds.push_back(static_cast<std::uint64_t>(s));
    config["protocol"]["seeds"] = seeds;
  }
  if (f.epochs) config["train"]["epochs"] = *f.epochs;
  if (f.num_tokens) config["train"]["M"] = *f.num_tokens;
  if (f.lr) config["train"]["lr"] = *f.lr;
  if (!f.position.empty()) config["train"]["position"] = std::string(to_string(parse_position_policy(f.position)));
  if (!f.kind.empty()) config["stage2"]["kind"] = std::string(to_string(parse_stage2_kind(f.kind)));
  if (!f.mode.empty()) config["stage2"]["mode"] = std::string(to_string(parse_task_mode(f.mode)));
  return config;
}

void add_config_options(CLI::App* app, Flags& f) {
  app->add_option("--config", f.config, "Run config: 'quickstart' or a JSON file");
  app->add_option("--set", f.sets, "Config override key.path=value (repeatable)");
}

void add_data_options(CLI::App* app, Flags& f) {
  add_config_options(app, f);
  app->add_option("--manifest", f.manifest, "Image manifest (CSV)");
  app->add_option("--bank", f.bank, "Concept bank (JSON)");
  app->add_flag("--synthetic", f.synthetic, "Use the synthetic dataset described by data.synthetic");
}

void add_train_options(CLI::App* app, Flags& f) {
  app->add_option("--epochs", f.epochs, "Training epochs");
  app->add_option("--lr", f.lr, "Base learning rate");
  app->add_option("--num-tokens", f.num_tokens, "Number of learnable context vectors M");
  app->add_option("--position", f.position, "Concept token position: start|middle|end");
}

void add_stage2_options(CLI::App* app, Flags& f) {
  app->add_option("--stage2", f.kind, "Stage-2 model: lr|svm|rf|mlp");
  app->add_option("--mode", f.mode, "single_label|multi_label");
}

std::uint64_t single_seed(const Json& config) {
  const auto seeds = config.at("protocol").at("seeds").get<std::vector<std::uint64_t>>();
  if (seeds.size() != 1) throw ConfigError(kModule, "this command takes exactly one seed (use --seed)");
  return seeds.front();
}

int single_shots(const Json& config) {
  const auto shots = config.at("protocol").at("shots").get<std::vector<int>>();
  if (shots.size() != 1) throw ConfigError(kModule, "this command takes exactly one shot count (use --shots)");
  return shots.front();
}

void check_logits(const LogitsFile& logits, const Data& data) {
  if (logits.label_space_digest != data.space.digest())
    throw ConflictError(kModule, "logits were made for label space " + logits.label_space_digest +
                                     " but the data describes " + data.space.digest());
}

// ---------------------------------------------------------------------------
// Commands

int cmd_bank_build(const Flags& f, const std::vector<std::string>& diseases, const std::string& fixture, bool live,
                   int repeats, int retries, std::optional<int> min_support, const std::string& synonyms, bool parallel,
                   const std::string& out_path, const std::string& raw_out, std::ostream& out, std::ostream& err) {
  if (diseases.empty()) throw ConfigError(kModule, "bank build needs at least one --disease");
  ConceptBank bank = f.bank.empty() ? ConceptBank{} : load_bank(f.bank);
  std::unique_ptr<ConceptGenerator> gen;
  SynonymMap syn;
  if (live) {
    gen = std::make_unique<LiveGenerator>(LiveGeneratorConfig::from_environment());
  } else if (fixture.empty() || fixture == "builtin") {
    gen = std::make_unique<FixtureGenerator>(FixtureGenerator::builtin());
    syn = FixtureGenerator::builtin_synonyms();
  } else {
    gen = std::make_unique<FixtureGenerator>(FixtureGenerator::from_json(read_json(fixture)));
  }
  if (!synonyms.empty())
    for (const auto& [k, v] : read_json(synonyms).get<std::map<std::string, std::string>>()) syn[k] = v;

  CollectOptions opts;
  opts.repeats_per_template = repeats;
  opts.max_retries = retries;
  opts.parallel = parallel;
  std::vector<RawGeneration> all_raw;
  for (const auto& disease : diseases) {
    auto raw = collect_generations(disease, *gen, opts);
    for (const auto& g : raw)
      if (g.warning) err << "warning: " << disease << ": " << g.warning_message << "\n";
    auto concepts = intersect_generations(raw, syn, min_support);
    std::vector<std::string> names;
    for (const auto& c : concepts) names.push_back(c.display_name);
    bank.merge_generated(disease, concepts);
    out << disease << ": " << concepts.size() << " concepts" << (names.empty() ? "" : ": " + join(names, ", "))
        << "\n";
    all_raw.insert(all_raw.end(), raw.begin(), raw.end());
  }
  save_bank(bank, out_path);
  if (!raw_out.empty()) write_json(raw_out, generations_to_json(all_raw));
  out << "wrote " << out_path << " (version " << bank.version() << ")\n";
  return 0;
}

int cmd_bank_review(const std::string& bank_path, const std::vector<std::string>& ids, bool all_pending,
                    const std::string& decision, const std::string& reviewer, bool force, bool manual_override,
                    const std::string& timestamp, const std::string& out_path, std::ostream& out) {
  ConceptBank bank = load_bank(bank_path);
  std::vector<std::string> targets = ids;
  if (all_pending)
    for (const auto& [id, c] : bank.concepts())
      if (c.status == ConceptStatus::Generated) targets.push_back(id);
  if (targets.empty()) throw ConfigError(kModule, "nothing to review (use --concept or --all-pending)");
  ReviewOptions opts{force, manual_override, timestamp};
  const auto status = parse_concept_status(decision);
  for (const auto& id : targets) bank = validate_concept(bank, id, status, reviewer, opts);
  const auto dest = out_path.empty() ? bank_path : out_path;
  save_bank(bank, dest);
  out << "recorded " << targets.size() << " decision(s) as " << to_string(status) << "; wrote " << dest << "\n";
  return 0;
}

int cmd_bank_freeze(const std::string& bank_path, const std::string& out_path, std::ostream& out) {
  ConceptBank bank = load_bank(bank_path);
  bank.freeze();
  const auto dest = out_path.empty() ? bank_path : out_path;
  save_bank(bank, dest);
  out << "frozen: " << bank.disease_count() << " diseases, " << bank.validated_count() << " validated concepts; wrote "
      << dest << "\n";
  return 0;
}

int cmd_bank_show(const std::string& bank_path, std::ostream& out) {
  const ConceptBank bank = load_bank(bank_path);
  out << "version " << bank.version() << (bank.frozen() ? ", frozen" : ", not frozen") << "\n";
  std::map<std::string, int> by_status;
  for (const auto& [id, c] : bank.concepts()) ++by_status[std::string(to_string(c.status))];
  for (const auto& [s, n] : by_status) out << "  " << s << ": " << n << "\n";
  for (const auto& [name, d] : bank.diseases()) {
    std::vector<std::string> names;
    for (const auto& id : d.concept_ids) names.push_back(bank.concept_by_id(id).display_name);
    out << name << ": " << join(names, ", ") << "\n";
  }
  return 0;
}

int cmd_data_validate(const Json& config, std::ostream& out) {
  const auto data = load_data(config);
  std::map<std::string, std::map<std::string, int>> counts;
  std::map<std::string, int> per_split;
  for (const auto& s : data.samples) {
    ++per_split[std::string(to_string(s.split))];
    for (const auto& l : s.disease_labels) ++counts[l][std::string(to_string(s.split))];
  }
  out << "manifest ok: " << data.samples.size() << " images (train " << per_split["train"] << ", val "
      << per_split["val"] << ", test " << per_split["test"] << ")\n";
  out << "diseases " << data.space.K() << ", concepts " << data.space.E() << ", hash " << data.manifest_hash << "\n";
  for (const auto& d : data.space.diseases) {
    auto& c = counts[d];
    out << "  " << d << ": train " << c["train"] << ", val " << c["val"] << ", test " << c["test"] << "\n";
  }
  return 0;
}

int cmd_data_episode(const Json& config, const std::string& out_path, std::ostream& out) {
  const auto data = load_data(config);
  const auto ep = sample_episode(data.samples, single_shots(config), single_seed(config));
  const auto doc = episode_to_json(ep);
  if (out_path.empty())
    out << doc.dump(2) << "\n";
  else
    write_json(out_path, doc), out << "wrote " << out_path << " (" << ep.unique_ids().size() << " images)\n";
  return 0;
}

int cmd_data_split(const Json& config, const std::string& out_path, std::ostream& out) {
  const auto data = load_data(config);
  const auto split = split_base_novel(data.samples, data.space);
  std::vector<std::string> pool;
  for (const auto& s : split.train_pool) pool.push_back(s.image_id);
  const Json doc = {{"manifest_hash", data.manifest_hash},
                    {"base", split.base},
                    {"novel", split.novel},
                    {"train_counts", split.train_counts},
                    {"base_train_pool", pool}};
  if (out_path.empty())
    out << doc.dump(2) << "\n";
  else
    write_json(out_path, doc), out << "wrote " << out_path << "\n";
  return 0;
}

int cmd_data_synth(Json config, const std::string& out_dir, const std::vector<std::string>& params, std::ostream& out) {
  for (const auto& p : params) apply_override(config, "data.synthetic." + p);
  const auto ds = generate_synthetic(synthetic_params(config.at("data").at("synthetic")));
  const fs::path dir(out_dir);
  fs::create_directories(dir);
  save_bank(ds.bank, dir / "bank.json");
  save_manifest(dir / "manifest.csv", ds.samples);
  out << "wrote " << (dir / "bank.json").string() << " and " << (dir / "manifest.csv").string() << " ("
      << ds.samples.size() << " images, " << ds.label_space.K() << " diseases, " << ds.label_space.E()
      << " concepts)\n";
  return 0;
}

int cmd_stage1_train(const Json& config, const std::string& episode_path, const std::string& out_path,
                     const std::string& history_path, std::ostream& out) {
  const auto data = load_data(config);
  const auto bundle = make_bundle(config);
  FewShotEpisode ep;
  if (!episode_path.empty()) {
    ep = episode_from_json(read_json(episode_path));
    if (ep.manifest_hash != data.manifest_hash)
      throw ConflictError(kModule, "episode was drawn from manifest " + ep.manifest_hash + ", not " + data.manifest_hash);
  } else {
    ep = sample_episode(data.samples, single_shots(config), single_seed(config));
  }
  const auto protocol = protocol_spec(config, config_digest(config));
  EvalContext ctx{bundle.get(), &data.bank, &data.samples, data.space, {}};
  const auto stage = train_stage1(protocol, ctx, protocol.train.seed, episode_samples(data.samples, ep),
                                  filter_split(data.samples, Split::Val), nullptr);
  save_checkpoint(out_path, stage.checkpoint);
  if (!history_path.empty())
    write_json(history_path, {{"epoch_train_loss", stage.state.epoch_train_loss},
                              {"epoch_val_loss", stage.state.epoch_val_loss},
                              {"lr", stage.state.lr_history},
                              {"best_epoch", stage.state.best_epoch},
                              {"final_train_bce", stage.state.final_train_bce}});
  out << "trained " << stage.state.epoch << " epochs on " << ep.unique_ids().size() << " images; final train BCE "
      << fixed(stage.state.final_train_bce, 6) << ", best epoch " << stage.state.best_epoch << "\n";
  out << "encoder unchanged: " << (stage.state.fingerprint_before == stage.state.fingerprint_after ? "yes" : "NO")
      << "\nwrote " << out_path << "\n";
  return 0;
}

int cmd_stage1_infer(const Json& config, const std::string& ckpt_path, const std::string& split,
                     const std::string& episode_path, const std::string& out_path, std::ostream& out) {
  const auto data = load_data(config);
  const auto bundle = make_bundle(config);
  const auto ckpt = load_checkpoint(ckpt_path);
  std::vector<ImageSample> samples = episode_path.empty()
                                         ? split_samples(data.samples, split)
                                         : episode_samples(data.samples, episode_from_json(read_json(episode_path)));
  LogitsFile file{data.bank.version(), data.space.digest(),
                  infer_concepts(*bundle, ckpt, data.bank, data.space, samples)};
  save_logits(out_path, file);
  out << "wrote " << file.rows.size() << " logit rows to " << out_path << "\n";
  return 0;
}

int cmd_stage2_fit(const Json& config, const std::string& logits_path, const std::string& out_path, std::ostream& out) {
  const auto data = load_data(config);
  const auto logits = load_logits(logits_path);
  check_logits(logits, data);
  const auto protocol = protocol_spec(config, config_digest(config));
  if (protocol.stage2_kind == Stage2Kind::Mlp && protocol.mlp_end_to_end)
    out << "note: fitting the MLP on fixed logits; end-to-end training happens in 'eval' and 'pipeline'\n";
  const auto model = fit(protocol.stage2_kind, logits.rows, data.samples, data.space, protocol.mode, protocol.stage2);
  save_model(out_path, model);
  for (const auto& w : model.warnings) out << "warning: " << w << "\n";
  out << "fitted " << to_string(model.kind) << " on " << logits.rows.size() << " images; wrote " << out_path << "\n";
  return 0;
}

int cmd_stage2_predict(const Flags& f, const std::string& model_path, const std::string& logits_path,
                       const std::string& out_path, std::ostream& out) {
  const auto model = load_model(model_path);
  const auto logits = load_logits(logits_path);
  std::optional<Data> data;
  if (!f.config.empty() || !f.bank.empty() || f.synthetic) data = load_data(resolve_config(f));
  const auto preds = predict(model, logits.rows, logits.label_space_digest);
  const auto doc = predictions_json(preds, data ? &data->space : nullptr);
  if (out_path.empty())
    out << doc.dump(2) << "\n";
  else
    write_json(out_path, doc), out << "wrote " << preds.size() << " predictions to " << out_path << "\n";
  return 0;
}

int cmd_eval(const Json& config, Task task, const std::string& out_path, std::ostream& out) {
  const auto digest = config_digest(config);
  const auto data = load_data(config);
  const auto bundle = make_bundle(config);
  auto protocol = protocol_spec(config, digest);
  protocol.task = task;
  EvalContext ctx{bundle.get(), &data.bank, &data.samples, data.space, {}};
  if (!out_path.empty()) ctx.on_progress = [&](const Json& partial) { write_json(out_path, partial); };
  const auto report = task == Task::FewShot ? run_few_shot(protocol, ctx) : run_base_to_novel(protocol, ctx);
  if (!out_path.empty()) write_json(out_path, report.to_json());
  out << report_summary(report);
  if (!out_path.empty()) out << "wrote " << out_path << "\n";
  return report.status == "complete" ? 0 : 1;
}

int cmd_ablate(const Json& config, const std::string& sweep_name, const std::string& out_path, std::ostream& out) {
  const auto data = load_data(config);
  const auto bundle = make_bundle(config);
  const auto protocol = protocol_spec(config, config_digest(config));
  EvalContext ctx{bundle.get(), &data.bank, &data.samples, data.space, {}};
  const auto table = run_ablation(parse_sweep(sweep_name), protocol, ctx);
  if (!out_path.empty()) {
    Json doc = table.to_json();
    doc["config_digest"] = protocol.config_digest;
    write_json(out_path, doc);
  }
  out << table.to_text();
  return 0;
}

struct InterpretInputs {
  Data data;
  Stage2Model model;
  std::vector<ConceptLogits> logits;
  std::vector<ImageSample> samples;
};

InterpretInputs interpret_inputs(const Json& config, const std::string& model_path, const std::string& logits_path,
                                 const std::string& split) {
  InterpretInputs in{load_data(config), load_model(model_path), {}, {}};
  const auto logits = load_logits(logits_path);
  check_logits(logits, in.data);
  in.logits = logits.rows;
  in.samples = split_samples(in.data.samples, split);
  return in;
}

int cmd_interpret_report(const Json& config, const std::string& model_path, const std::string& logits_path,
                         const std::string& split, const std::string& disease, int top, int bottom,
                         const std::string& normalization, const std::string& out_path, std::ostream& out) {
  const auto in = interpret_inputs(config, model_path, logits_path, split);
  const auto report = contributions(in.model, in.data.space, in.logits, in.samples, disease,
                                    parse_normalization(normalization), &in.data.bank);
  out << report.to_text(static_cast<std::size_t>(top), static_cast<std::size_t>(bottom));
  if (!out_path.empty()) write_json(out_path, report.to_json()), out << "wrote " << out_path << "\n";
  return 0;
}

std::vector<ContributionReport> reports_for(const InterpretInputs& in, std::vector<std::string> diseases,
                                            Normalization norm, std::ostream& note) {
  const bool chosen = !diseases.empty();
  if (!chosen) diseases = in.data.space.diseases;
  std::vector<ContributionReport> reports;
  for (const auto& d : diseases) {
    const int k = in.data.space.disease_index(d);
    const bool has_samples = std::any_of(in.samples.begin(), in.samples.end(), [&](const ImageSample& s) {
      return s.has_label(d);
    });
    if (!chosen && (!has_samples || k < 0 || !in.model.fitted[static_cast<std::size_t>(k)])) {
      note << "skipping '" << d << "': " << (has_samples ? "no fitted head" : "no samples") << "\n";
      continue;
    }
    reports.push_back(contributions(in.model, in.data.space, in.logits, in.samples, d, norm, &in.data.bank));
  }
  if (reports.empty()) throw ValidationError(kModule, "no disease has samples to attribute");
  return reports;
}

int cmd_interpret_sankey(const Json& config, const std::string& model_path, const std::string& logits_path,
                         const std::string& split, const std::vector<std::string>& diseases, int top, int bottom,
                         const std::string& normalization, const std::string& out_path, std::ostream& out) {
  const auto in = interpret_inputs(config, model_path, logits_path, split);
  const auto reports = reports_for(in, diseases, parse_normalization(normalization), out);
  const auto flow = export_sankey(reports, static_cast<std::size_t>(top), static_cast<std::size_t>(bottom));
  save_sankey(out_path, flow);
  out << "wrote " << flow["nodes"].size() << " nodes and " << flow["links"].size() << " links to " << out_path << "\n";
  return 0;
}

int cmd_pipeline(const Json& config, const std::string& out_dir, std::ostream& out) {
  const auto result = run_pipeline(config, out_dir, out);
  out << "run directory: " << result.run_dir.string() << "\nconfig digest: " << result.digest << "\n";
  return result.complete ? 0 : 1;
}

void print_error(std::ostream& err, const std::string& module, const std::string& kind, const std::string& message) {
  err << "error: " << module << ": " << message << "\n";
  err << Json{{"status", "error"}, {"module", module}, {"kind", kind}, {"message", message}}.dump() << "\n";
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

Json default_config() {
  Json synthetic = synthetic_json(SyntheticParams{});
  return {{"data", {{"source", "files"}, {"bank", ""}, {"manifest", ""}, {"synthetic", synthetic}}},
          {"encoder", {{"name", "mock"}, {"seed", 0}, {"dim", kMockDefaultDim}}},
          {"train", TrainConfig{}.to_json()},
          {"stage2",
           {{"kind", "lr"}, {"mode", "single_label"}, {"end_to_end", true}, {"hyper", Stage2Hyper{}.to_json()}}},
          {"protocol", {{"task", "few_shot"}, {"shots", {2, 4, 8, 16}}, {"seeds", {1, 2, 3, 4, 5}}}},
          {"interpret", {{"top_k", 5}, {"bottom_k", 5}, {"normalization", "sum"}, {"diseases", Json::array()}}}};
}

Json quickstart_config() {
  Json c = default_config();
  c["data"]["source"] = "synthetic";
  c["protocol"]["shots"] = {4, 16};
  c["protocol"]["seeds"] = {1, 2, 3};
  c["interpret"]["top_k"] = 4;
  c["interpret"]["bottom_k"] = 4;
  return c;
}

void merge_config(Json& base, const nlohmann::json& layer) { merge_at(base, layer, ""); }

void apply_override(Json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError(kModule, "override '" + assignment + "' must look like key.path=value");
  const auto keys = split(assignment.substr(0, eq), '.');
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) value = nlohmann::json{{*it, value}};
  merge_config(config, value);
}

std::string config_digest(const Json& config) { return sha256_hex(nlohmann::json(config).dump()); }

Json load_config(const std::string& source) {
  if (to_lower(trim(source)) == "quickstart") return quickstart_config();
  const fs::path path(source);
  Json config = default_config();
  merge_config(config, read_json(path));
  const fs::path dir = fs::absolute(path).parent_path();
  for (const char* key : {"bank", "manifest"}) {
    auto& slot = config["data"][key];
    const auto value = slot.get<std::string>();
    if (!value.empty() && fs::path(value).is_relative()) slot = (dir / value).lexically_normal().string();
  }
  return config;
}

// ---------------------------------------------------------------------------
// Pipeline

PipelineResult run_pipeline(const Json& config, const fs::path& out_root, std::ostream& log) {
  PipelineResult result;
  result.digest = config_digest(config);
  const auto protocol = protocol_spec(config, result.digest);
  const auto data = load_data(config);
  const auto bundle = make_bundle(config);
  const auto& interp = config.at("interpret");

  result.run_dir = fresh_run_dir(out_root, result.digest);
  const fs::path dir = result.run_dir;
  write_json(dir / "config.json", {{"config_digest", result.digest}, {"config", config}});
  save_bank(data.bank, dir / "bank.json");
  save_manifest(dir / "manifest.csv", data.samples);
  log << "run directory " << dir.string() << "\n";

  // One fully materialised run (largest shot count, first seed) provides the
  // episode, checkpoint, logits and model that the interpretation reads.
  const int shots = *std::max_element(protocol.shots.begin(), protocol.shots.end());
  const std::uint64_t seed = protocol.seeds.front();
  std::vector<ImageSample> pool = data.samples;
  std::vector<ImageSample> val = filter_split(data.samples, Split::Val);
  std::vector<std::string> explained = interp.at("diseases").get<std::vector<std::string>>();
  if (protocol.task == Task::BaseToNovel) {
    const auto split = split_base_novel(data.samples, data.space);
    const std::set<std::string> base(split.base.begin(), split.base.end());
    pool = split.train_pool;
    std::erase_if(val, [&](const ImageSample& s) {
      return std::any_of(s.disease_labels.begin(), s.disease_labels.end(),
                         [&](const std::string& l) { return !base.contains(l); });
    });
    if (explained.empty()) explained = split.base;
  }
  const auto ep = sample_episode(pool, shots, seed);
  write_json(dir / "episode.json", episode_to_json(ep));
  const auto train_samples = episode_samples(pool, ep);
  EvalContext ctx{bundle.get(), &data.bank, &data.samples, data.space, {}};
  log << "stage 1: " << shots << "-shot episode, seed " << seed << ", " << train_samples.size() << " images\n";
  const auto stage = train_stage1(protocol, ctx, seed, train_samples, val, nullptr);
  save_checkpoint(dir / "context.ckpt", stage.checkpoint);
  write_json(dir / "training.json", {{"epoch_train_loss", stage.state.epoch_train_loss},
                                     {"epoch_val_loss", stage.state.epoch_val_loss},
                                     {"lr", stage.state.lr_history},
                                     {"best_epoch", stage.state.best_epoch},
                                     {"final_train_bce", stage.state.final_train_bce},
                                     {"encoder_unchanged", stage.state.fingerprint_before == stage.state.fingerprint_after}});

  const auto test = filter_split(data.samples, Split::Test);
  const LogitsFile train_logits{data.bank.version(), data.space.digest(),
                                infer_concepts(*bundle, stage.checkpoint, data.bank, data.space, train_samples)};
  const LogitsFile test_logits{data.bank.version(), data.space.digest(),
                               infer_concepts(*bundle, stage.checkpoint, data.bank, data.space, test)};
  save_logits(dir / "logits_train.bin", train_logits);
  save_logits(dir / "logits_test.bin", test_logits);

  Stage2Hyper hyper = protocol.stage2;
  hyper.seed = seed;
  const Stage2Model model = stage.e2e_model
                                ? *stage.e2e_model
                                : fit(protocol.stage2_kind, train_logits.rows, train_samples, data.space, protocol.mode, hyper);
  save_model(dir / "model.bin", model);
  write_json(dir / "predictions.json",
             predictions_json(predict(model, test_logits.rows, data.space.digest()), &data.space));
  log << "stage 2: " << to_string(model.kind) << " fitted\n";

  log << "evaluating " << to_string(protocol.task) << " over " << protocol.shots.size() << " shot count(s) x "
      << protocol.seeds.size() << " seed(s)\n";
  ctx.on_progress = [&](const Json& partial) { write_json(dir / "report.json", partial); };
  const auto report = protocol.task == Task::FewShot ? run_few_shot(protocol, ctx) : run_base_to_novel(protocol, ctx);
  write_json(dir / "report.json", report.to_json());
  write_text(dir / "report.txt", report_summary(report));
  log << report_summary(report);

  Json interpretation;
  if (model.is_linear()) {
    InterpretInputs in{data, model, test_logits.rows, test};
    std::ostringstream notes;
    const auto reports = reports_for(in, explained, parse_normalization(interp.at("normalization").get<std::string>()),
                                     notes);
    const auto top = interp.at("top_k").get<std::size_t>();
    const auto bottom = interp.at("bottom_k").get<std::size_t>();
    Json list = Json::array();
    std::string text;
    for (const auto& r : reports) {
      list.push_back(r.to_json());
      text += r.to_text(top, bottom) + "\n";
    }
    write_json(dir / "contributions.json", list);
    write_text(dir / "contributions.txt", text + notes.str());
    save_sankey(dir / "sankey.json", export_sankey(reports, top, bottom));
    interpretation = {{"status", "complete"}, {"diseases", reports.size()}};
  } else {
    interpretation = {{"status", "skipped"},
                      {"reason", std::string(to_string(model.kind)) + " has no per-concept weights"}};
  }

  write_json(dir / "summary.json", {{"config_digest", result.digest},
                                    {"report_status", report.status},
                                    {"interpretation", interpretation},
                                    {"artifacts",
                                     {"config.json", "bank.json", "manifest.csv", "episode.json", "context.ckpt",
                                      "training.json", "logits_train.bin", "logits_test.bin", "model.bin",
                                      "predictions.json", "report.json", "report.txt", "contributions.json",
                                      "contributions.txt", "sankey.json"}}});
  result.complete = report.status == "complete";
  return result;
}

// ---------------------------------------------------------------------------
// Dispatch

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Concept-guided prompt learning: concept banks, two-stage training, evaluation and attribution", "cgp"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--seed", f.seed, "Seed for episodes, training and stage 2");
  app.add_option("--shots", f.shots, "Shot counts, e.g. 2,4,8,16");
  app.add_option("--encoder", f.encoder, "Encoder bundle (mock)");

  std::function<int()> action;
  auto set_action = [&](CLI::App* sub, std::function<int()> fn) {
    sub->callback([&action, fn = std::move(fn)] { action = fn; });
  };

  // bank
  auto* bank = app.add_subcommand("bank", "Build, review and freeze concept banks");
  bank->require_subcommand(1);
  std::vector<std::string> diseases;
  std::string fixture, synonyms, out_path, raw_out, decision, reviewer, timestamp;
  bool live = false, parallel = false, all_pending = false, force = false, manual_override = false;
  int repeats = 2, retries = 3;
  std::optional<int> min_support;
  std::vector<std::string> concept_ids;

  auto* bank_build = bank->add_subcommand("build", "Generate concepts per disease and intersect the lists");
  bank_build->add_option("--disease", diseases, "Disease name (repeatable)")->required();
  bank_build->add_option("--fixture", fixture, "Fixture responses: 'builtin' or a JSON file");
  bank_build->add_flag("--live", live, "Use the chat-completion endpoint from CGP_LLM_* variables");
  bank_build->add_option("--repeats", repeats, "Generations per template")->check(CLI::PositiveNumber);
  bank_build->add_option("--retries", retries, "Retries per generation")->check(CLI::NonNegativeNumber);
  bank_build->add_option("--min-support", min_support, "Generations a concept must appear in (default: all)");
  bank_build->add_option("--synonyms", synonyms, "JSON map from surface form to concept");
  bank_build->add_flag("--parallel", parallel, "Issue generations concurrently");
  bank_build->add_option("--bank", f.bank, "Existing bank to extend");
  bank_build->add_option("--out", out_path, "Bank file to write")->required();
  bank_build->add_option("--raw-out", raw_out, "Write the raw generations for review");
  set_action(bank_build, [&] {
    return cmd_bank_build(f, diseases, fixture, live, repeats, retries, min_support, synonyms, parallel, out_path,
                          raw_out, out, err);
  });

  auto* bank_review = bank->add_subcommand("review", "Record expert decisions on concepts");
  bank_review->add_option("--bank", f.bank, "Bank file")->required();
  bank_review->add_option("--concept", concept_ids, "Concept id (repeatable)");
  bank_review->add_flag("--all-pending", all_pending, "Decide every concept still awaiting review");
  bank_review->add_option("--decision", decision, "validated|rejected")->required();
  bank_review->add_option("--reviewer", reviewer, "Reviewer name")->required();
  bank_review->add_flag("--force", force, "Override an earlier decision");
  bank_review->add_flag("--manual-override", manual_override, "Validate despite too little generation support");
  bank_review->add_option("--timestamp", timestamp, "Decision time (default: now, UTC)");
  bank_review->add_option("--out", out_path, "Output file (default: in place)");
  set_action(bank_review, [&] {
    return cmd_bank_review(f.bank, concept_ids, all_pending, decision, reviewer, force, manual_override, timestamp,
                           out_path, out);
  });

  auto* bank_freeze = bank->add_subcommand("freeze", "Seal a reviewed bank");
  bank_freeze->add_option("--bank", f.bank, "Bank file")->required();
  bank_freeze->add_option("--out", out_path, "Output file (default: in place)");
  set_action(bank_freeze, [&] { return cmd_bank_freeze(f.bank, out_path, out); });

  auto* bank_show = bank->add_subcommand("show", "Print a bank summary");
  bank_show->add_option("--bank", f.bank, "Bank file")->required();
  set_action(bank_show, [&] { return cmd_bank_show(f.bank, out); });

  // data
  auto* data = app.add_subcommand("data", "Manifests, episodes and synthetic datasets");
  data->require_subcommand(1);
  std::string out_dir = "runs";
  std::vector<std::string> synth_params;

  auto* data_validate = data->add_subcommand("validate", "Check a manifest against a bank");
  add_data_options(data_validate, f);
  set_action(data_validate, [&] { return cmd_data_validate(resolve_config(f), out); });

  auto* data_episode = data->add_subcommand("episode", "Draw a few-shot episode");
  add_data_options(data_episode, f);
  data_episode->add_option("--out", out_path, "Episode file (default: stdout)");
  set_action(data_episode, [&] { return cmd_data_episode(resolve_config(f), out_path, out); });

  auto* data_split = data->add_subcommand("split-base-novel", "Partition diseases into base and novel");
  add_data_options(data_split, f);
  data_split->add_option("--out", out_path, "Split file (default: stdout)");
  set_action(data_split, [&] { return cmd_data_split(resolve_config(f), out_path, out); });

  auto* data_synth = data->add_subcommand("synth", "Write a synthetic bank and manifest");
  add_config_options(data_synth, f);
  data_synth->add_option("--param", synth_params, "Synthetic parameter key=value, e.g. K=6 (repeatable)");
  data_synth->add_option("--out-dir", out_dir, "Output directory")->required();
  set_action(data_synth, [&] { return cmd_data_synth(resolve_config(f), out_dir, synth_params, out); });

  // stage1
  auto* stage1 = app.add_subcommand("stage1", "Prompt-context training and concept inference");
  stage1->require_subcommand(1);
  std::string episode_path, history_path, ckpt_path, split_name = "test", logits_path, model_path;

  auto* s1_train = stage1->add_subcommand("train", "Train the shared context vectors");
  add_data_options(s1_train, f);
  add_train_options(s1_train, f);
  add_stage2_options(s1_train, f);
  s1_train->add_option("--episode", episode_path, "Episode file (default: draw one with --shots/--seed)");
  s1_train->add_option("--out", out_path, "Checkpoint file")->required();
  s1_train->add_option("--history", history_path, "Write per-epoch losses as JSON");
  set_action(s1_train, [&] { return cmd_stage1_train(resolve_config(f), episode_path, out_path, history_path, out); });

  auto* s1_infer = stage1->add_subcommand("infer", "Write concept logits for a split");
  add_data_options(s1_infer, f);
  s1_infer->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  s1_infer->add_option("--split", split_name, "train|val|test|all");
  s1_infer->add_option("--episode", episode_path, "Infer on an episode's images instead of a split");
  s1_infer->add_option("--out", out_path, "Logits file")->required();
  set_action(s1_infer, [&] {
    return cmd_stage1_infer(resolve_config(f), ckpt_path, split_name, episode_path, out_path, out);
  });

  // stage2
  auto* stage2 = app.add_subcommand("stage2", "Disease models over concept logits");
  stage2->require_subcommand(1);
  auto* s2_fit = stage2->add_subcommand("fit", "Fit a stage-2 model");
  add_data_options(s2_fit, f);
  add_stage2_options(s2_fit, f);
  s2_fit->add_option("--logits", logits_path, "Training logits file")->required();
  s2_fit->add_option("--out", out_path, "Model file")->required();
  set_action(s2_fit, [&] { return cmd_stage2_fit(resolve_config(f), logits_path, out_path, out); });

  auto* s2_predict = stage2->add_subcommand("predict", "Score logits with a fitted model");
  add_data_options(s2_predict, f);
  s2_predict->add_option("--model", model_path, "Model file")->required();
  s2_predict->add_option("--logits", logits_path, "Logits file")->required();
  s2_predict->add_option("--out", out_path, "Predictions file (default: stdout)");
  set_action(s2_predict, [&] { return cmd_stage2_predict(f, model_path, logits_path, out_path, out); });

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluation protocols and ablations");
  eval->require_subcommand(1);
  std::string sweep;
  auto add_eval = [&](CLI::App* sub) {
    add_data_options(sub, f);
    add_train_options(sub, f);
    add_stage2_options(sub, f);
    sub->add_option("--seeds", f.seeds, "Seeds, e.g. 1-5");
    sub->add_option("--out", out_path, "Report file (JSON)");
  };
  auto* few_shot = eval->add_subcommand("few-shot", "n-shot training, full test split");
  add_eval(few_shot);
  set_action(few_shot, [&] { return cmd_eval(resolve_config(f), Task::FewShot, out_path, out); });
  auto* base_novel = eval->add_subcommand("base-novel", "Train on base diseases, score novel ones");
  add_eval(base_novel);
  set_action(base_novel, [&] { return cmd_eval(resolve_config(f), Task::BaseToNovel, out_path, out); });
  auto* ablate = eval->add_subcommand("ablate", "Token-position, token-count or stage-2 sweeps");
  add_eval(ablate);
  ablate->add_option("--sweep", sweep, "token-position|num-tokens|stage2")->required();
  set_action(ablate, [&] { return cmd_ablate(resolve_config(f), sweep, out_path, out); });

  // interpret
  auto* interpret = app.add_subcommand("interpret", "Concept contributions and Sankey exports");
  interpret->require_subcommand(1);
  std::string disease, normalization = "sum";
  std::vector<std::string> sankey_diseases;
  int top = 5, bottom = 5;
  auto add_interp = [&](CLI::App* sub) {
    add_data_options(sub, f);
    sub->add_option("--model", model_path, "Linear stage-2 model file")->required();
    sub->add_option("--logits", logits_path, "Logits file of the evaluated images")->required();
    sub->add_option("--split", split_name, "Split whose labels select the images (train|val|test|all)");
    sub->add_option("--top", top, "Highest contributions to show")->check(CLI::NonNegativeNumber);
    sub->add_option("--bottom", bottom, "Lowest contributions to show")->check(CLI::NonNegativeNumber);
    sub->add_option("--normalization", normalization, "sum|minmax|none");
  };
  auto* report = interpret->add_subcommand("report", "Contribution report for one disease");
  add_interp(report);
  report->add_option("--disease", disease, "Disease name")->required();
  report->add_option("--out", out_path, "Report file (JSON)");
  set_action(report, [&] {
    return cmd_interpret_report(resolve_config(f), model_path, logits_path, split_name, disease, top, bottom,
                                normalization, out_path, out);
  });
  auto* sankey = interpret->add_subcommand("sankey", "Flow file of top and bottom concepts per disease");
  add_interp(sankey);
  sankey->add_option("--disease", sankey_diseases, "Disease (repeatable; default: every disease with samples)");
  sankey->add_option("--out", out_path, "Flow file (JSON)")->required();
  set_action(sankey, [&] {
    return cmd_interpret_sankey(resolve_config(f), model_path, logits_path, split_name, sankey_diseases, top, bottom,
                                normalization, out_path, out);
  });

  // pipeline
  auto* pipeline = app.add_subcommand("pipeline", "End-to-end runs");
  pipeline->require_subcommand(1);
  auto* run = pipeline->add_subcommand("run", "Bank, episode, stage 1, stage 2, evaluation and attribution");
  add_config_options(run, f);
  run->get_option("--config")->required();
  run->add_option("--out-dir", out_dir, "Directory that receives the timestamped run directory");
  set_action(run, [&] { return cmd_pipeline(resolve_config(f), out_dir, out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  if (!action) {
    err << app.help();
    return 2;
  }
  try {
    return action();
  } catch (const Error& e) {
    print_error(err, e.module(), e.kind(), e.what());
  } catch (const nlohmann::json::exception& e) {
    print_error(err, kModule, "validation_error", e.what());
  } catch (const fs::filesystem_error& e) {
    print_error(err, kModule, "io_error", e.what());
  } catch (const std::exception& e) {
    print_error(err, kModule, "internal_error", e.what());
  }
  return 1;
}

int dispatch(int argc, const char* const* argv) { return dispatch(argc, argv, std::cout, std::cerr); }

}  // namespace cgp::cli
