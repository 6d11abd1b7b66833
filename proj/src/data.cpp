#include "cgp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "cgp/digest.hpp"
#include "cgp/errors.hpp"
#include "cgp/rng.hpp"
#include "cgp/text.hpp"

namespace cgp {

namespace {
constexpr const char* kModule = "data";
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split parse_split(std::string_view name) {
  const std::string n = to_lower(trim(name));
  if (n == "train") return Split::Train;
  if (n == "val" || n == "validation") return Split::Val;
  if (n == "test") return Split::Test;
  throw ValidationError(kModule, "unknown split '" + std::string(name) + "'");
}

int LabelSpace::disease_index(std::string_view name) const {
  auto it = std::lower_bound(diseases.begin(), diseases.end(), name);
  return it != diseases.end() && *it == name ? static_cast<int>(it - diseases.begin()) : -1;
}

int LabelSpace::concept_index(std::string_view id) const {
  auto it = std::lower_bound(concept_ids.begin(), concept_ids.end(), id);
  return it != concept_ids.end() && *it == id ? static_cast<int>(it - concept_ids.begin()) : -1;
}

std::string LabelSpace::digest() const {
  Sha256 h;
  h.update(std::uint64_t{diseases.size()});
  for (const auto& d : diseases) h.update(d).update(std::string_view("\0", 1));
  h.update(std::uint64_t{concept_ids.size()});
  for (const auto& c : concept_ids) h.update(c).update(std::string_view("\0", 1));
  return h.hex();
}

LabelSpace make_label_space(const ConceptBank& bank) {
  LabelSpace ls;
  for (const auto& [name, _] : bank.diseases()) ls.diseases.push_back(name);
  ls.concept_ids = bank.validated_ids();
  return ls;
}

// ---------------------------------------------------------------------------
// Manifest

Manifest parse_manifest(std::istream& in, const ConceptBank& bank, const std::string& source) {
  Manifest m;
  std::string line;
  std::size_t line_no = 0;
  int col_id = -1, col_ref = -1, col_labels = -1, col_split = -1;
  bool header_seen = false;
  std::vector<std::string> problems;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (!header_seen) {
      for (std::size_t i = 0; i < fields.size(); ++i) {
        const std::string name = to_lower(trim(fields[i]));
        if (name == "image_id") col_id = static_cast<int>(i);
        else if (name == "image_ref") col_ref = static_cast<int>(i);
        else if (name == "disease_labels") col_labels = static_cast<int>(i);
        else if (name == "split") col_split = static_cast<int>(i);
      }
      if (col_id < 0 || col_ref < 0 || col_labels < 0 || col_split < 0)
        throw ValidationError(kModule, source + ": header must name image_id, image_ref, disease_labels, split");
      header_seen = true;
      continue;
    }
    const int needed = std::max({col_id, col_ref, col_labels, col_split});
    if (static_cast<int>(fields.size()) <= needed) {
      problems.push_back("line " + std::to_string(line_no) + ": expected " + std::to_string(needed + 1) + " columns");
      continue;
    }
    ImageSample s;
    s.image_id = trim(fields[col_id]);
    s.image_ref = trim(fields[col_ref]);
    for (const auto& label : split(fields[col_labels], ';')) {
      const std::string name = trim(label);
      if (name.empty()) continue;
      if (!bank.has_disease(name)) {
        problems.push_back("line " + std::to_string(line_no) + " (" + s.image_id + "): unknown disease '" + name + "'");
        continue;
      }
      s.disease_labels.insert(name);
    }
    if (s.disease_labels.empty() && problems.empty())
      problems.push_back("line " + std::to_string(line_no) + " (" + s.image_id + "): no disease labels");
    try {
      s.split = parse_split(fields[col_split]);
    } catch (const ValidationError& e) {
      problems.push_back("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (s.image_id.empty()) problems.push_back("line " + std::to_string(line_no) + ": empty image_id");
    if (!ids.insert(s.image_id).second)
      throw ValidationError(kModule, source + ": duplicate image_id '" + s.image_id + "' at line " +
                                         std::to_string(line_no));
    m.samples.push_back(std::move(s));
  }
  if (!problems.empty())
    throw ValidationError(kModule, source + ": invalid rows:\n  " + join(problems, "\n  "));
  if (!m.samples.empty()) m.label_space = make_label_space(bank);
  m.hash = manifest_hash(m.samples);
  return m;
}

Manifest load_manifest(const std::filesystem::path& path, const ConceptBank& bank) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(kModule, "cannot read manifest '" + path.string() + "'");
  return parse_manifest(in, bank, path.string());
}

void write_manifest(std::ostream& out, const std::vector<ImageSample>& samples) {
  out << "image_id,image_ref,disease_labels,split\n";
  for (const auto& s : samples) {
    std::vector<std::string> labels(s.disease_labels.begin(), s.disease_labels.end());
    out << csv_field(s.image_id) << ',' << csv_field(s.image_ref) << ',' << csv_field(join(labels, ";")) << ','
        << to_string(s.split) << '\n';
  }
}

void save_manifest(const std::filesystem::path& path, const std::vector<ImageSample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(kModule, "cannot write manifest '" + path.string() + "'");
  write_manifest(out, samples);
}

std::string manifest_hash(const std::vector<ImageSample>& samples) {
  std::ostringstream ss;
  write_manifest(ss, samples);
  return sha256_hex(ss.str());
}

std::vector<ImageSample> filter_split(const std::vector<ImageSample>& samples, Split split) {
  std::vector<ImageSample> out;
  std::copy_if(samples.begin(), samples.end(), std::back_inserter(out),
               [&](const ImageSample& s) { return s.split == split; });
  return out;
}

// ---------------------------------------------------------------------------
// Targets

Eigen::VectorXd ConceptTarget::as_vector() const {
  Eigen::VectorXd v(static_cast<Eigen::Index>(targets.size()));
  for (std::size_t j = 0; j < targets.size(); ++j) v(static_cast<Eigen::Index>(j)) = targets[j];
  return v;
}

std::size_t ConceptTarget::count() const {
  return static_cast<std::size_t>(std::count(targets.begin(), targets.end(), std::uint8_t{1}));
}

std::vector<ConceptTarget> derive_concept_targets(const std::vector<ImageSample>& samples,
                                                  const ConceptBank& bank, const LabelSpace& space) {
  if (!bank.frozen()) throw ContractViolation(kModule, "concept targets require a frozen bank");
  std::map<std::string, std::vector<int>> disease_concepts;
  for (const auto& [name, entry] : bank.diseases()) {
    auto& idx = disease_concepts[name];
    for (const auto& id : entry.concept_ids) {
      const int j = space.concept_index(id);
      if (j < 0) throw ContractViolation(kModule, "concept '" + id + "' missing from label space");
      idx.push_back(j);
    }
  }
  std::vector<ConceptTarget> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    ConceptTarget t{s.image_id, std::vector<std::uint8_t>(space.E(), 0)};
    for (const auto& d : s.disease_labels) {
      auto it = disease_concepts.find(d);
      if (it == disease_concepts.end())
        throw ValidationError(kModule, "sample '" + s.image_id + "' has unknown disease '" + d + "'");
      if (it->second.empty())
        throw ValidationError(kModule, "disease '" + d + "' has no validated concepts; it cannot be trained");
      for (int j : it->second) t.targets[static_cast<std::size_t>(j)] = 1;
    }
    out.push_back(std::move(t));
  }
  return out;
}

Eigen::MatrixXd disease_matrix(const std::vector<ImageSample>& samples, const LabelSpace& space) {
  Eigen::MatrixXd Y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(samples.size()),
                                            static_cast<Eigen::Index>(space.K()));
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (const auto& d : samples[i].disease_labels) {
      const int k = space.disease_index(d);
      if (k >= 0) Y(static_cast<Eigen::Index>(i), k) = 1.0;
    }
  return Y;
}

// ---------------------------------------------------------------------------
// Episodes

std::vector<std::string> FewShotEpisode::unique_ids() const {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& [_, ids] : selected_ids)
    for (const auto& id : ids)
      if (seen.insert(id).second) out.push_back(id);
  return out;
}

FewShotEpisode sample_episode(const std::vector<ImageSample>& samples, int n_shots, std::uint64_t seed) {
  if (n_shots < 1) throw ContractViolation(kModule, "n_shots must be >= 1");
  FewShotEpisode ep;
  ep.n_shots = n_shots;
  ep.seed = seed;
  ep.manifest_hash = manifest_hash(samples);

  std::map<std::string, std::vector<std::string>> pools;
  for (const auto& s : samples)
    if (s.split == Split::Train)
      for (const auto& d : s.disease_labels) pools[d].push_back(s.image_id);

  for (auto& [disease, pool] : pools) {
    std::sort(pool.begin(), pool.end());
    Rng rng = Rng::derive(seed, disease);
    const std::size_t take = std::min<std::size_t>(pool.size(), static_cast<std::size_t>(n_shots));
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.uniform_below(pool.size() - i);
      std::swap(pool[i], pool[j]);
    }
    ep.selected_ids[disease].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    if (take < static_cast<std::size_t>(n_shots)) ep.shortfall[disease] = n_shots - static_cast<int>(take);
  }

  const auto ids = ep.unique_ids();
  const std::set<std::string> chosen(ids.begin(), ids.end());
  for (const auto& s : samples)
    if (chosen.contains(s.image_id))
      for (const auto& d : s.disease_labels) ++ep.effective_counts[d];
  return ep;
}

std::vector<ImageSample> episode_samples(const std::vector<ImageSample>& samples, const FewShotEpisode& ep) {
  const auto ids = ep.unique_ids();
  const std::set<std::string> chosen(ids.begin(), ids.end());
  std::vector<ImageSample> out;
  for (const auto& s : samples)
    if (chosen.contains(s.image_id)) out.push_back(s);
  return out;
}

nlohmann::ordered_json episode_to_json(const FewShotEpisode& ep) {
  return {{"n_shots", ep.n_shots},
          {"seed", ep.seed},
          {"manifest_hash", ep.manifest_hash},
          {"selected_ids", ep.selected_ids},
          {"effective_counts", ep.effective_counts},
          {"shortfall", ep.shortfall}};
}

FewShotEpisode episode_from_json(const nlohmann::json& doc) {
  try {
    FewShotEpisode ep;
    ep.n_shots = doc.at("n_shots").get<int>();
    ep.seed = doc.at("seed").get<std::uint64_t>();
    ep.manifest_hash = doc.at("manifest_hash").get<std::string>();
    ep.selected_ids = doc.at("selected_ids").get<std::map<std::string, std::vector<std::string>>>();
    ep.effective_counts = doc.value("effective_counts", std::map<std::string, int>{});
    ep.shortfall = doc.value("shortfall", std::map<std::string, int>{});
    return ep;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(kModule, std::string("malformed episode document: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Base / novel

BaseNovelSplit split_base_novel(const std::vector<ImageSample>& samples, const LabelSpace& space) {
  BaseNovelSplit out;
  for (const auto& d : space.diseases) out.train_counts[d] = 0;
  bool any_train = false;
  for (const auto& s : samples) {
    if (s.split != Split::Train) continue;
    any_train = true;
    for (const auto& d : s.disease_labels) ++out.train_counts[d];
  }
  if (!any_train) throw ContractViolation(kModule, "base/novel split needs a non-empty train split");

  std::vector<std::string> ranked = space.diseases;
  std::stable_sort(ranked.begin(), ranked.end(), [&](const std::string& a, const std::string& b) {
    const int ca = out.train_counts.at(a), cb = out.train_counts.at(b);
    return ca != cb ? ca > cb : a < b;
  });
  const std::size_t n_base = (ranked.size() + 1) / 2;
  const std::set<std::string> base(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(n_base));
  for (const auto& d : space.diseases) (base.contains(d) ? out.base : out.novel).push_back(d);

  for (const auto& s : samples) {
    if (s.split != Split::Train) continue;
    if (std::all_of(s.disease_labels.begin(), s.disease_labels.end(),
                    [&](const std::string& d) { return base.contains(d); }))
      out.train_pool.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

std::string pseudo_word(Rng& rng) {
  static constexpr std::string_view kOnsets = "bdfgklmnprstvz";
  static constexpr std::string_view kVowels = "aeiou";
  std::string w;
  for (int i = 0; i < 3; ++i) {
    w.push_back(kOnsets[rng.uniform_below(kOnsets.size())]);
    w.push_back(kVowels[rng.uniform_below(kVowels.size())]);
  }
  return w;
}

std::string zero_pad(int value, int width) {
  std::string s = std::to_string(value);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))), '0') + s;
}

std::string signature_hex(const std::vector<bool>& bits) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string hex;
  for (std::size_t i = 0; i < bits.size(); i += 4) {
    int nibble = 0;
    for (std::size_t b = 0; b < 4; ++b) nibble = (nibble << 1) | ((i + b < bits.size() && bits[i + b]) ? 1 : 0);
    hex.push_back(kDigits[nibble]);
  }
  return hex;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticParams& p) {
  if (p.K < 1 || p.concepts_per_disease < 1 || p.images_per_disease < 1)
    throw ContractViolation(kModule, "synthetic parameters must be positive");
  if (p.shared_fraction < 0.0 || p.shared_fraction >= 1.0)
    throw ContractViolation(kModule, "shared_fraction must lie in [0, 1)");
  if (p.noise < 0.0 || p.noise > 1.0) throw ContractViolation(kModule, "noise must lie in [0, 1]");

  const int width = p.K >= 100 ? 3 : 2;
  // Borrowed concepts come from the previous disease's own concepts, so at
  // most half of a disease's set can be shared.
  const int shared = p.K > 1 ? std::min(static_cast<int>(std::floor(p.shared_fraction * p.concepts_per_disease)),
                                        p.concepts_per_disease / 2)
                             : 0;
  const int own = p.concepts_per_disease - shared;

  Rng name_rng = Rng::derive(p.seed, "synthetic-concepts");
  std::set<std::string> used;
  std::vector<std::vector<std::string>> own_names(static_cast<std::size_t>(p.K));
  for (auto& names : own_names)
    for (int j = 0; j < own; ++j) {
      std::string n;
      do n = pseudo_word(name_rng) + " " + pseudo_word(name_rng);
      while (!used.insert(n).second);
      names.push_back(n);
    }

  ConceptBank bank;
  const std::vector<Provenance> prov = {{TemplateId::ExplicitConcepts, 0},
                                        {TemplateId::ExplicitConcepts, 1},
                                        {TemplateId::VsNormalComparison, 0},
                                        {TemplateId::VsNormalComparison, 1}};
  for (const auto& names : own_names)
    for (const auto& n : names) {
      Concept c;
      c.id = canonicalize(n);
      c.display_name = n;
      c.status = ConceptStatus::Validated;
      c.provenance = prov;
      c.audit.push_back({ConceptStatus::Validated, "synthetic", "1970-01-01T00:00:00Z", false});
      bank.add_concept(std::move(c));
    }
  std::vector<std::string> disease_names;
  for (int k = 0; k < p.K; ++k) {
    DiseaseEntry d;
    d.name = "disease_" + zero_pad(k, width);
    for (const auto& n : own_names[static_cast<std::size_t>(k)]) d.concept_ids.insert(canonicalize(n));
    const auto& prev = own_names[static_cast<std::size_t>((k + p.K - 1) % p.K)];
    for (int j = 0; j < shared; ++j) d.concept_ids.insert(canonicalize(prev[static_cast<std::size_t>(j)]));
    disease_names.push_back(d.name);
    bank.set_disease(std::move(d));
  }
  bank.freeze();

  SyntheticDataset ds;
  ds.label_space = make_label_space(bank);
  const auto& ids = ds.label_space.concept_ids;
  Rng noise_rng = Rng::derive(p.seed, "synthetic-images");
  const int n_train = static_cast<int>(std::lround(p.train_fraction * p.images_per_disease));
  const int n_val = static_cast<int>(std::lround(p.val_fraction * p.images_per_disease));
  for (int k = 0; k < p.K; ++k) {
    const auto& disease = bank.disease(disease_names[static_cast<std::size_t>(k)]);
    for (int i = 0; i < p.images_per_disease; ++i) {
      std::vector<bool> bits(ids.size(), false);
      for (std::size_t j = 0; j < ids.size(); ++j) {
        bool present = disease.concept_ids.contains(ids[j]);
        if (p.noise > 0.0 && noise_rng.bernoulli(p.noise)) present = !present;
        bits[j] = present;
      }
      ImageSample s;
      s.image_id = "syn" + std::to_string(p.seed) + "-d" + zero_pad(k, width) + "-i" + zero_pad(i, 3) + "-" +
                   signature_hex(bits);
      std::vector<std::string> names;
      std::set<std::string> present_ids;
      for (std::size_t j = 0; j < ids.size(); ++j)
        if (bits[j]) {
          names.push_back(bank.concept_by_id(ids[j]).display_name);
          present_ids.insert(ids[j]);
        }
      s.image_ref = std::string(kSyntheticRefPrefix) + join(names, "|") + "#" + s.image_id;
      s.disease_labels = {disease.name};
      s.split = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);
      ds.signatures[s.image_id] = std::move(present_ids);
      ds.samples.push_back(std::move(s));
    }
  }
  ds.bank = std::move(bank);
  return ds;
}

// ---------------------------------------------------------------------------
// Access log

void AccessLog::record(const ImageSample& sample, std::string_view purpose) {
  std::lock_guard lock(mutex_);
  entries_.push_back({sample.image_id, sample.disease_labels, std::string(purpose)});
}

std::vector<AccessLog::Entry> AccessLog::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

std::vector<AccessLog::Entry> AccessLog::touching(const std::set<std::string>& labels) const {
  std::lock_guard lock(mutex_);
  std::vector<Entry> out;
  for (const auto& e : entries_)
    if (std::any_of(e.labels.begin(), e.labels.end(), [&](const std::string& l) { return labels.contains(l); }))
      out.push_back(e);
  return out;
}

std::size_t AccessLog::size() const {
  std::lock_guard lock(mutex_);
  return entries_.size();
}

}  // namespace cgp
