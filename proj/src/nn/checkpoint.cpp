#include "pcql/nn/checkpoint.hpp"

#include "pcql/core/errors.hpp"
#include "pcql/core/types.hpp"
#include "pcql/core/util.hpp"

namespace pcql::nn {

std::string checkpoint_to_string(const nlohmann::json& payload) {
  nlohmann::json doc;
  doc["schema_version"] = kSchemaVersion;
  doc["checksum"] = hex64(fnv1a64(payload.dump()));
  doc["payload"] = payload;
  return doc.dump() + "\n";
}

nlohmann::json checkpoint_from_string(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("schema_version") || !doc.contains("checksum") || !doc.contains("payload")) {
    throw SchemaError("checkpoint is missing schema_version, checksum or payload");
  }
  if (doc["schema_version"] != kSchemaVersion) {
    throw SchemaError("checkpoint schema_version " + doc["schema_version"].dump() + " is not supported");
  }
  const auto& payload = doc["payload"];
  if (doc["checksum"] != hex64(fnv1a64(payload.dump()))) throw SchemaError("checkpoint checksum mismatch");
  return payload;
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& payload) {
  write_text_file(path, checkpoint_to_string(payload));
}

nlohmann::json load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_string(read_text_file(path));
}

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  j["values"] = std::vector<double>(m.data(), m.data() + m.size());
  return j;
}

Matrix matrix_from_json(const nlohmann::json& j) {
  try {
    const auto rows = j.at("rows").get<Index>();
    const auto cols = j.at("cols").get<Index>();
    const auto values = j.at("values").get<std::vector<double>>();
    if (rows < 0 || cols < 0 || static_cast<Index>(values.size()) != rows * cols) {
      throw SchemaError("matrix value count does not match its shape");
    }
    return Eigen::Map<const Matrix>(values.data(), rows, cols);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("matrix: ") + e.what());
  }
}

}  // namespace pcql::nn
