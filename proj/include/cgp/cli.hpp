#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include <json.hpp>

namespace cgp::cli {

/// Runs the command line. Exit codes: 0 success or help, 1 failure inside a
/// module (reported verbatim), 2 usage error.
int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int dispatch(int argc, const char* const* argv);

/// Every key a run config may hold, with its default value.
nlohmann::ordered_json default_config();
/// Synthetic data, mock encoder, few-shot protocol.
nlohmann::ordered_json quickstart_config();
/// Overlays `layer` onto `base`; objects merge key by key, anything else
/// replaces. Unknown keys raise ConfigError naming their path.
void merge_config(nlohmann::ordered_json& base, const nlohmann::json& layer);
/// Applies "a.b.c=value"; value is parsed as JSON, or taken as a string.
void apply_override(nlohmann::ordered_json& config, const std::string& assignment);
/// SHA-256 of the config with keys sorted.
std::string config_digest(const nlohmann::ordered_json& config);
/// "quickstart" or a JSON file layered over the defaults. Relative data
/// paths in a file resolve against the file's directory.
nlohmann::ordered_json load_config(const std::string& source);

struct PipelineResult {
  std::filesystem::path run_dir;
  std::string digest;
  bool complete = false;
};

/// bank and data -> episode -> stage 1 -> stage 2 -> evaluation ->
/// interpretation. Artifacts go to a fresh timestamped directory under
/// out_root; their contents depend only on the config and its inputs.
PipelineResult run_pipeline(const nlohmann::ordered_json& config, const std::filesystem::path& out_root,
                            std::ostream& log);

}  // namespace cgp::cli
