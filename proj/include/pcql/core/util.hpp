#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pcql {

// 64-bit FNV-1a over raw bytes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

std::uint64_t splitmix64(std::uint64_t x);

// Per-stage seed: the stage name is hashed into the global seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stage, std::uint64_t index);

// Shortest decimal text that parses back to the same double.
std::string format_double(double x);

std::vector<std::string> split_csv_line(std::string_view line);
std::optional<double> parse_optional_double(std::string_view cell);
double parse_double(std::string_view cell);
std::string trim(std::string_view s);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view contents);

std::string hex64(std::uint64_t v);

}  // namespace pcql
