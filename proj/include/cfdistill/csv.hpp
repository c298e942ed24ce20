#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cfdistill {

/// Minimal comma-separated table: a header row plus string cells.
/// Quoted fields are not supported.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of `name` in the header; throws naming the column when absent.
  std::size_t column(std::string_view name) const;
  bool has_column(std::string_view name) const;
};

CsvTable read_csv(const std::filesystem::path& path);
CsvTable parse_csv(std::string_view text);
void write_csv(const std::filesystem::path& path, const CsvTable& table);
std::vector<std::string> split_csv_line(std::string_view line);

/// std::from_chars based parse; throws std::invalid_argument mentioning `what`.
double parse_double(std::string_view text, std::string_view what = "value");

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double value);

}  // namespace cfdistill
