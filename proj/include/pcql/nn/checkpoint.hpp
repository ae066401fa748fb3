#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "pcql/nn/tensor.hpp"

namespace pcql::nn {

// File layout: {"schema_version", "checksum", "payload"}; the checksum is the
// FNV-1a hash of the serialized payload. Doubles are written in shortest
// round-trip form, so reading back is bit-exact.
std::string checkpoint_to_string(const nlohmann::json& payload);
nlohmann::json checkpoint_from_string(const std::string& text);

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& payload);
nlohmann::json load_checkpoint(const std::filesystem::path& path);

// {"rows", "cols", "values"} with row-major values.
nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j);

}  // namespace pcql::nn
