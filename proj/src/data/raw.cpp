#include "pcql/data/raw.hpp"

#include <algorithm>
#include <map>
#include <sstream>

#include "pcql/core/errors.hpp"
#include "pcql/core/util.hpp"

namespace pcql::data {

namespace {

std::string cell(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

std::vector<std::string> lines_of(std::string_view text) {
  std::vector<std::string> lines;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    lines.push_back(line);
  }
  return lines;
}

}  // namespace

std::string_view to_string(AnestheticType t) {
  return t == AnestheticType::kPropofol ? "propofol" : "inhaled";
}

AnestheticType anesthetic_from_string(std::string_view s) {
  if (s == "propofol") return AnestheticType::kPropofol;
  if (s == "inhaled") return AnestheticType::kInhaled;
  throw SchemaError("unknown anesthetic type '" + std::string(s) + "'");
}

std::int64_t RawSurgery::duration_steps() const {
  if (rows.empty()) return 0;
  return rows.back().t - rows.front().t;
}

void RawSurgery::validate() const {
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].t <= rows[i - 1].t) {
      throw SchemaError("surgery " + surgery_id + ": timestamps must be strictly increasing");
    }
  }
}

std::string surgery_to_csv(const RawSurgery& s) {
  std::string out(kSurgeryCsvHeader);
  out += '\n';
  for (const auto& r : s.rows) {
    out += std::to_string(r.t);
    for (const auto* v : {&r.ap_sys, &r.ap_dia, &r.map, &r.propofol, &r.remifentanil}) {
      out += ',';
      out += cell(*v);
    }
    out += '\n';
  }
  return out;
}

std::vector<RawRow> surgery_rows_from_csv(std::string_view text, std::string_view source) {
  const auto lines = lines_of(text);
  if (lines.empty() || trim(lines.front()) != kSurgeryCsvHeader) {
    throw SchemaError(std::string(source) + ": expected header '" + std::string(kSurgeryCsvHeader) + "'");
  }
  std::vector<RawRow> rows;
  rows.reserve(lines.size() - 1);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv_line(lines[i]);
    if (cells.size() != 6) {
      throw SchemaError(std::string(source) + ": line " + std::to_string(i + 1) + " must have 6 cells");
    }
    RawRow r;
    const double t = parse_double(cells[0]);
    r.t = static_cast<std::int64_t>(t);
    if (static_cast<double>(r.t) != t || r.t < 0) {
      throw SchemaError(std::string(source) + ": timestamp must be a nonnegative integer");
    }
    r.ap_sys = parse_optional_double(cells[1]);
    r.ap_dia = parse_optional_double(cells[2]);
    r.map = parse_optional_double(cells[3]);
    r.propofol = parse_optional_double(cells[4]);
    r.remifentanil = parse_optional_double(cells[5]);
    rows.push_back(r);
  }
  return rows;
}

std::string clinical_to_csv(const std::vector<RawSurgery>& surgeries) {
  std::string out(kClinicalCsvHeader);
  out += '\n';
  for (const auto& s : surgeries) {
    const auto& c = s.clinical;
    out += s.surgery_id;
    for (const auto* v : {&c.age, &c.sex, &c.height, &c.weight, &c.bmi, &c.asa}) {
      out += ',';
      out += cell(*v);
    }
    out += ',';
    out += to_string(s.anesthetic_type);
    out += '\n';
  }
  return out;
}

void write_raw_directory(const std::vector<RawSurgery>& surgeries, const std::filesystem::path& dir) {
  write_text_file(dir / "clinical.csv", clinical_to_csv(surgeries));
  for (const auto& s : surgeries) write_text_file(dir / (s.surgery_id + ".csv"), surgery_to_csv(s));
}

std::vector<RawSurgery> read_raw_directory(const std::filesystem::path& dir) {
  const auto clinical_path = dir / "clinical.csv";
  if (!std::filesystem::exists(clinical_path)) throw IoError("missing " + clinical_path.string());
  const auto lines = lines_of(read_text_file(clinical_path));
  if (lines.empty() || trim(lines.front()) != kClinicalCsvHeader) {
    throw SchemaError("clinical.csv: expected header '" + std::string(kClinicalCsvHeader) + "'");
  }
  std::vector<RawSurgery> out;
  std::map<std::string, bool> seen;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto cells = split_csv_line(lines[i]);
    if (cells.size() != 8) throw SchemaError("clinical.csv: line " + std::to_string(i + 1) + " must have 8 cells");
    RawSurgery s;
    s.surgery_id = cells[0];
    if (s.surgery_id.empty() || s.surgery_id.find('/') != std::string::npos) {
      throw SchemaError("clinical.csv: invalid surgery id on line " + std::to_string(i + 1));
    }
    if (seen[s.surgery_id]) throw SchemaError("clinical.csv: duplicate surgery id " + s.surgery_id);
    seen[s.surgery_id] = true;
    s.clinical = {parse_optional_double(cells[1]), parse_optional_double(cells[2]),
                  parse_optional_double(cells[3]), parse_optional_double(cells[4]),
                  parse_optional_double(cells[5]), parse_optional_double(cells[6])};
    s.anesthetic_type = anesthetic_from_string(cells[7]);
    const auto path = dir / (s.surgery_id + ".csv");
    s.rows = surgery_rows_from_csv(read_text_file(path), path.string());
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pcql::data
