#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include <Eigen/Core>
#include <json.hpp>

namespace cgp::binio {

/// Artifact files start with a magic line, then one line of JSON header,
/// then little-endian binary payload.
void write_header(std::ostream& out, std::string_view magic, const nlohmann::ordered_json& header);
/// Throws ValidationError (module given) on a wrong magic or malformed header.
nlohmann::json read_header(std::istream& in, std::string_view magic, const std::string& module,
                           const std::string& source);

void write_u32(std::ostream& out, std::uint32_t v);
std::uint32_t read_u32(std::istream& in);
void write_f32(std::ostream& out, double v);
double read_f32(std::istream& in);

/// Row-major float32 matrix payload (no dimensions; they live in the header).
void write_matrix(std::ostream& out, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(std::istream& in, Eigen::Index rows, Eigen::Index cols);

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace cgp::binio
