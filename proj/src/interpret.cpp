#include "cgp/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <unordered_map>

#include "cgp/errors.hpp"
#include "cgp/text.hpp"

namespace cgp {

namespace {
constexpr const char* kModule = "interpret";

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}
}  // namespace

std::string_view to_string(Normalization n) {
  switch (n) {
    case Normalization::Sum: return "sum";
    case Normalization::MinMax: return "minmax";
    case Normalization::None: return "none";
  }
  return "?";
}

Normalization parse_normalization(std::string_view name) {
  const auto n = to_lower(trim(name));
  if (n == "sum") return Normalization::Sum;
  if (n == "minmax" || n == "min-max") return Normalization::MinMax;
  if (n == "none" || n == "raw") return Normalization::None;
  throw ConfigError(kModule, "unknown normalization '" + std::string(name) + "' (expected sum|minmax|none)");
}

std::vector<ContributionEntry> ContributionReport::top(std::size_t k) const {
  k = std::min(k, entries.size());
  return {entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(k)};
}

std::vector<ContributionEntry> ContributionReport::bottom(std::size_t k, std::size_t k_top) const {
  const std::size_t taken = std::min(k_top, entries.size());
  k = std::min(k, entries.size() - taken);
  std::vector<ContributionEntry> out(entries.end() - static_cast<std::ptrdiff_t>(k), entries.end());
  std::reverse(out.begin(), out.end());  // most negative first
  return out;
}

nlohmann::ordered_json ContributionReport::to_json() const {
  nlohmann::ordered_json doc;
  doc["disease"] = disease;
  doc["stage2_kind"] = stage2_kind;
  doc["attribution"] = attribution;
  doc["normalization"] = to_string(normalization);
  doc["normalization_skipped"] = normalization_skipped;
  doc["sample_count"] = sample_count;
  auto& list = doc["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : entries)
    list.push_back({{"rank", e.rank},
                    {"concept_id", e.concept_id},
                    {"display_name", e.display_name},
                    {"contribution", e.contribution},
                    {"raw", e.raw}});
  return doc;
}

std::string ContributionReport::to_text(std::size_t top_k, std::size_t bottom_k) const {
  std::string out = "disease: " + disease + "\n";
  out += "samples: " + std::to_string(sample_count) + "\n";
  out += "model: " + stage2_kind + "\n";
  out += "attribution: " + attribution + "\n";
  out += "normalization: " + std::string(to_string(normalization)) +
         (normalization_skipped ? " (skipped: nothing to normalize)" : "") + "\n";
  auto section = [&](const char* title, const std::vector<ContributionEntry>& rows) {
    out += title;
    out += "\n";
    for (const auto& e : rows)
      out += "  " + std::to_string(e.rank) + ". " + e.display_name + "  " + fixed(e.contribution, 6) +
             "  (raw " + fixed(e.raw, 6) + ")\n";
  };
  section("top:", top(top_k));
  section("bottom:", bottom(bottom_k, top_k));
  return out;
}

ContributionReport contributions(const Stage2Model& model, const LabelSpace& space,
                                 const std::vector<ConceptLogits>& logits, const std::vector<ImageSample>& samples,
                                 std::string_view disease, Normalization normalization, const ConceptBank* bank) {
  const Eigen::MatrixXd& W = concept_weights(model);
  if (model.K != static_cast<int>(space.K()) || model.E != static_cast<int>(space.E()))
    throw ConflictError(kModule, "model shape " + std::to_string(model.K) + "x" + std::to_string(model.E) +
                                     " does not match the label space " + std::to_string(space.K()) + "x" +
                                     std::to_string(space.E()));
  const int d = space.disease_index(disease);
  if (d < 0) throw ValidationError(kModule, "unknown disease '" + std::string(disease) + "'");

  std::unordered_map<std::string, const ImageSample*> by_id;
  for (const auto& s : samples) by_id.emplace(s.image_id, &s);
  std::vector<ConceptLogits> selected;
  for (const auto& l : logits) {
    auto it = by_id.find(l.image_id);
    if (it != by_id.end() && it->second->has_label(std::string(disease))) selected.push_back(l);
  }
  if (selected.empty())
    throw ValidationError(kModule, "no samples labelled '" + std::string(disease) + "' to attribute");

  const Eigen::MatrixXd X = stage2_inputs(model, selected);
  const Eigen::VectorXd mean_input = X.colwise().mean().transpose();
  const Eigen::VectorXd raw = W.row(d).transpose().cwiseProduct(mean_input);

  ContributionReport report;
  report.disease = std::string(disease);
  report.normalization = normalization;
  report.sample_count = static_cast<int>(selected.size());
  report.stage2_kind = std::string(to_string(model.kind));

  Eigen::VectorXd value = raw;
  switch (normalization) {
    case Normalization::Sum: {
      double total = 0.0;
      for (Eigen::Index j = 0; j < raw.size(); ++j)
        if (raw(j) > 0) total += raw(j);
      if (total > 0) {
        for (Eigen::Index j = 0; j < raw.size(); ++j)
          if (raw(j) > 0) value(j) = raw(j) / total;
      } else {
        report.normalization_skipped = true;
      }
      break;
    }
    case Normalization::MinMax: {
      const double lo = raw.minCoeff(), hi = raw.maxCoeff();
      if (hi > lo)
        value = (raw.array() - lo) / (hi - lo);
      else
        report.normalization_skipped = true;
      break;
    }
    case Normalization::None: break;
  }

  for (std::size_t j = 0; j < space.E(); ++j) {
    ContributionEntry e;
    e.concept_id = space.concept_ids[j];
    e.display_name = bank && bank->has_concept(e.concept_id) ? bank->concept_by_id(e.concept_id).display_name
                                                             : e.concept_id;
    e.contribution = value(static_cast<Eigen::Index>(j));
    e.raw = raw(static_cast<Eigen::Index>(j));
    report.entries.push_back(std::move(e));
  }
  std::stable_sort(report.entries.begin(), report.entries.end(),
                   [](const ContributionEntry& a, const ContributionEntry& b) { return a.contribution > b.contribution; });
  for (std::size_t i = 0; i < report.entries.size(); ++i) report.entries[i].rank = static_cast<int>(i + 1);
  return report;
}

nlohmann::ordered_json export_sankey(const std::vector<ContributionReport>& reports, std::size_t top_k,
                                     std::size_t bottom_k) {
  if (reports.empty()) throw ContractViolation(kModule, "sankey export needs at least one report");

  struct Link {
    std::string concept_id, disease, group;
    double contribution;
  };
  std::map<std::string, std::string> concepts;  // id -> display name
  std::set<std::string> diseases;
  std::vector<Link> links;
  for (const auto& r : reports) {
    if (!diseases.insert(r.disease).second)
      throw ContractViolation(kModule, "disease '" + r.disease + "' appears in more than one report");
    for (const auto& e : r.top(top_k)) {
      concepts.emplace(e.concept_id, e.display_name);
      links.push_back({e.concept_id, r.disease, "top", e.contribution});
    }
    for (const auto& e : r.bottom(bottom_k, top_k)) {
      concepts.emplace(e.concept_id, e.display_name);
      links.push_back({e.concept_id, r.disease, "bottom", e.contribution});
    }
  }

  nlohmann::ordered_json flow;
  auto& nodes = flow["nodes"] = nlohmann::ordered_json::array();
  std::map<std::string, int> concept_node, disease_node;
  for (const auto& [id, name] : concepts) {
    concept_node[id] = static_cast<int>(nodes.size());
    nodes.push_back({{"index", nodes.size()}, {"id", "concept:" + id}, {"name", name}, {"kind", "concept"}});
  }
  for (const auto& name : diseases) {
    disease_node[name] = static_cast<int>(nodes.size());
    nodes.push_back({{"index", nodes.size()}, {"id", "disease:" + name}, {"name", name}, {"kind", "disease"}});
  }

  std::stable_sort(links.begin(), links.end(), [&](const Link& a, const Link& b) {
    return std::pair(disease_node[a.disease], concept_node[a.concept_id]) <
           std::pair(disease_node[b.disease], concept_node[b.concept_id]);
  });
  auto& out = flow["links"] = nlohmann::ordered_json::array();
  for (const auto& l : links)
    out.push_back({{"source", concept_node[l.concept_id]},
                   {"target", disease_node[l.disease]},
                   {"value", std::abs(l.contribution)},
                   {"contribution", l.contribution},
                   {"group", l.group}});
  flow["top_k"] = top_k;
  flow["bottom_k"] = bottom_k;
  return flow;
}

void save_sankey(const std::filesystem::path& path, const nlohmann::ordered_json& flow) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(kModule, "cannot write flow file '" + path.string() + "'");
  out << flow.dump(2) << '\n';
}

}  // namespace cgp
