#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace rarecell {

// FNV-1a 64 over the canonical (sorted-key, compact) JSON dump, as 16 hex chars.
std::string content_hash(const nlohmann::json& j);
std::string content_hash_bytes(std::string_view bytes);

// Write to a sibling temp file and rename into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);
std::string read_file(const std::filesystem::path& path);

// Shortest round-tripping decimal form of a double.
std::string format_double(double v);

// RFC 4180 quoting, applied only when the field needs it.
std::string csv_field(std::string_view v);
// Splits one CSV record; throws ParseError (with `line`) on an unterminated quote.
std::vector<std::string> parse_csv_line(std::string_view line, std::size_t line_no = 0);

}  // namespace rarecell
