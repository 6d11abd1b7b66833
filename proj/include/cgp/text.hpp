#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace cgp {

/// Lowercase, strip punctuation, trim, collapse internal whitespace.
/// Hyphens, slashes and underscores separate words ("orange-red" ->
/// "orange red"); other ASCII punctuation is dropped. Idempotent.
std::string canonicalize(std::string_view text);

std::string trim(std::string_view text);
std::string to_lower(std::string_view text);
std::vector<std::string> split(std::string_view text, char sep);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Splits one delimited-text line, honouring double-quoted fields.
std::vector<std::string> split_csv_line(std::string_view line, char sep = ',');
/// Quotes a field if it contains the separator, a quote or a newline.
std::string csv_field(std::string_view field, char sep = ',');

/// Parses "1-5", "1,2,3" or "2,4-6" into an inclusive integer list.
std::vector<long long> parse_int_list(std::string_view list);

}  // namespace cgp
