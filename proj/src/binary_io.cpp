#include "cgp/binary_io.hpp"

#include <bit>
#include <istream>
#include <ostream>

#include "cgp/errors.hpp"

namespace cgp::binio {

void write_header(std::ostream& out, std::string_view magic, const nlohmann::ordered_json& header) {
  out << magic << '\n' << header.dump() << '\n';
}

nlohmann::json read_header(std::istream& in, std::string_view magic, const std::string& module,
                           const std::string& source) {
  std::string line;
  if (!std::getline(in, line) || line != magic)
    throw ValidationError(module, source + ": not a " + std::string(magic) + " file");
  if (!std::getline(in, line)) throw ValidationError(module, source + ": missing header");
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(module, source + ": malformed header: " + e.what());
  }
}

void write_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffU);
  out.write(b, 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw ValidationError("io", "unexpected end of binary payload");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void write_f32(std::ostream& out, double v) { write_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

double read_f32(std::istream& in) { return static_cast<double>(std::bit_cast<float>(read_u32(in))); }

void write_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) write_f32(out, m(r, c));
}

Eigen::MatrixXd read_matrix(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = read_f32(in);
  return m;
}

}  // namespace cgp::binio
