#pragma once

// Small tidy-table writer shared by the CLI subcommands. Cells are strings
// produced with format_double, so CSV and JSON carry the same values: a cell
// that parses as a number is emitted as a JSON number, an empty cell as null.

#include <charconv>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "quantaudit/audit.hpp"
#include "quantaudit/detail/files.hpp"
#include "quantaudit/detail/numfmt.hpp"

namespace qa_cli {

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) { rows.push_back(std::move(row)); }
};

inline std::string num(double v) { return quantaudit::detail::format_double(v); }
inline std::string num(std::int64_t v) { return std::to_string(v); }

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string to_csv(const Table& t) {
  std::string out;
  for (std::size_t i = 0; i < t.columns.size(); ++i) out += (i ? "," : "") + csv_escape(t.columns[i]);
  out += "\n";
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + csv_escape(r[i]);
    out += "\n";
  }
  return out;
}

inline nlohmann::ordered_json cell_json(const std::string& s) {
  if (s.empty()) return nullptr;
  if (s == "nan" || s == "inf" || s == "-inf") return s;
  double v = 0.0;
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec == std::errc() && p == end) {
    std::int64_t iv = 0;
    auto [pi, eci] = std::from_chars(s.data(), end, iv);
    if (eci == std::errc() && pi == end) return iv;
    return v;
  }
  return s;
}

inline nlohmann::ordered_json to_json(const Table& t) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : t.rows) {
    nlohmann::ordered_json o;
    for (std::size_t i = 0; i < t.columns.size(); ++i) o[t.columns[i]] = cell_json(i < r.size() ? r[i] : "");
    arr.push_back(o);
  }
  return arr;
}

inline std::string render(const Table& t, quantaudit::ExportFormat fmt) {
  return fmt == quantaudit::ExportFormat::json ? to_json(t).dump(2) + "\n" : to_csv(t);
}

// Writes <dir>/<stem>.<csv|json>; returns the path.
inline std::filesystem::path write_table(const Table& t, const std::filesystem::path& dir, const std::string& stem,
                                         quantaudit::ExportFormat fmt) {
  const auto path = dir / (stem + (fmt == quantaudit::ExportFormat::json ? ".json" : ".csv"));
  quantaudit::detail::write_file_if_changed(path, render(t, fmt));
  return path;
}

// Reads one numeric column from a CSV file with a header row. Empty cells
// are skipped.
inline std::vector<double> read_csv_column(const std::filesystem::path& path, const std::string& column) {
  using namespace quantaudit;
  const auto text = detail::read_text_file(path);
  std::vector<double> out;
  std::size_t pos = 0;
  std::optional<std::size_t> col;
  std::size_t line_no = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++line_no;
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (!col) {
      for (std::size_t i = 0; i < cells.size(); ++i)
        if (detail::trim(cells[i]) == column) col = i;
      if (!col) throw FormatError(path.string() + " has no column '" + column + "'");
      continue;
    }
    if (*col >= cells.size()) throw FormatError(path.string() + ":" + std::to_string(line_no) + ": missing column '" + column + "'");
    if (auto v = detail::parse_optional_double(cells[*col])) out.push_back(*v);
  }
  if (!col) throw FormatError(path.string() + " is empty");
  return out;
}

}  // namespace qa_cli
