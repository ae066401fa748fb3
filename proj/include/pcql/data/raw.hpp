#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pcql::data {

enum class AnestheticType { kPropofol, kInhaled };

std::string_view to_string(AnestheticType t);
AnestheticType anesthetic_from_string(std::string_view s);

// One monitor record. Empty optionals are missing cells.
struct RawRow {
  std::int64_t t = 0;
  std::optional<double> ap_sys;
  std::optional<double> ap_dia;
  std::optional<double> map;
  std::optional<double> propofol;      // mg/kg/h
  std::optional<double> remifentanil;  // ug/kg/min
};

struct RawClinical {
  std::optional<double> age;
  std::optional<double> sex;
  std::optional<double> height;
  std::optional<double> weight;
  std::optional<double> bmi;
  std::optional<double> asa;
};

// A surgery with T+1 monitor rows carries T dose records: the propofol cell
// of the last row is structurally empty (no action follows the last frame).
struct RawSurgery {
  std::string surgery_id;
  std::vector<RawRow> rows;
  RawClinical clinical;
  AnestheticType anesthetic_type = AnestheticType::kPropofol;

  // Number of time steps between the first and the last record.
  std::int64_t duration_steps() const;
  void validate() const;
};

inline constexpr std::string_view kSurgeryCsvHeader = "t,ap_sys,ap_dia,map,propofol,remifentanil";
inline constexpr std::string_view kClinicalCsvHeader =
    "surgery_id,age,sex,height,weight,bmi,asa,anesthetic_type";

std::string surgery_to_csv(const RawSurgery& s);
std::vector<RawRow> surgery_rows_from_csv(std::string_view text, std::string_view source);

std::string clinical_to_csv(const std::vector<RawSurgery>& surgeries);

// Writes clinical.csv plus one <surgery_id>.csv per surgery.
void write_raw_directory(const std::vector<RawSurgery>& surgeries, const std::filesystem::path& dir);
std::vector<RawSurgery> read_raw_directory(const std::filesystem::path& dir);

}  // namespace pcql::data
