#include "grouppref/archive.hpp"

#include <fstream>
#include <sstream>

namespace grouppref {

const NamedTensor& ModelArchive::find(std::string_view name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw LookupError("archive has no tensor named '" + std::string(name) + "'");
}

nlohmann::json archive_to_json(const ModelArchive& archive) {
  nlohmann::json j;
  j["format_version"] = archive.format_version;
  j["stage"] = archive.stage;
  j["config_hash"] = archive.config_hash;
  j["config"] = archive.config;
  auto& ts = j["tensors"] = nlohmann::json::array();
  for (const auto& t : archive.tensors) {
    ts.push_back({{"name", t.name}, {"shape", t.shape}, {"values", t.values}});
  }
  return j;
}

ModelArchive archive_from_json(const nlohmann::json& j) {
  ModelArchive a;
  a.format_version = j.at("format_version").get<int>();
  if (a.format_version != ModelArchive::kFormatVersion)
    throw ConfigError("unsupported archive format version " + std::to_string(a.format_version));
  a.stage = j.at("stage").get<std::string>();
  a.config_hash = j.at("config_hash").get<std::string>();
  a.config = j.at("config");
  for (const auto& t : j.at("tensors")) {
    NamedTensor nt;
    nt.name = t.at("name").get<std::string>();
    nt.shape = t.at("shape").get<std::vector<std::size_t>>();
    nt.values = t.at("values").get<std::vector<double>>();
    std::size_t expect = 1;
    for (auto s : nt.shape) expect *= s;
    if (expect != nt.values.size())
      throw ConfigError("tensor '" + nt.name + "' shape does not match its value count");
    a.tensors.push_back(std::move(nt));
  }
  return a;
}

void save_archive(const ModelArchive& archive, const std::filesystem::path& path) {
  write_text_atomic(path, archive_to_json(archive).dump() + "\n");
}

ModelArchive load_archive(const std::filesystem::path& path) {
  return archive_from_json(nlohmann::json::parse(read_text(path)));
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError(path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace grouppref
