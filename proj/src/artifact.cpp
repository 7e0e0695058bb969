#include "plrank/artifact.hpp"

#include <fstream>
#include <json.hpp>
#include <regex>
#include <sstream>

#include "plrank/errors.hpp"

namespace plrank {

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

ArtifactMeta from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object() || !j.contains("config_hash") || !j.contains("seed") || !j["config_hash"].is_string() ||
      !j["seed"].is_number_unsigned()) {
    throw ParseError(path + ": no config_hash/seed stamp");
  }
  return {j["config_hash"].get<std::string>(), j["seed"].get<std::uint64_t>()};
}

}  // namespace

std::string meta_comment(const ArtifactMeta& meta) {
  return "# config_hash=" + meta.config_hash + ",seed=" + std::to_string(meta.seed);
}

ArtifactMeta read_artifact_meta(const std::string& path) {
  if (ends_with(path, ".ckpt")) return read_artifact_meta(path + ".meta.json");
  const std::string text = slurp(path);
  if (ends_with(path, ".jsonl") || ends_with(path, ".json")) {
    const std::string first = text.substr(0, text.find('\n'));
    try {
      return from_json(nlohmann::json::parse(first), path);
    } catch (const nlohmann::json::exception&) {
      throw ParseError(path + ": unreadable header");
    }
  }
  static const std::regex stamp("config_hash=([0-9a-f]+),seed=([0-9]+)");
  std::smatch m;
  if (ends_with(path, ".csv")) {
    const std::string first = text.substr(0, text.find('\n'));
    if (first.rfind("# ", 0) == 0 && std::regex_search(first, m, stamp)) {
      return {m[1].str(), std::stoull(m[2].str())};
    }
  } else if (ends_with(path, ".svg")) {
    const auto open = text.find("<desc>");
    const auto close = text.find("</desc>");
    if (open != std::string::npos && close != std::string::npos) {
      const std::string desc = text.substr(open, close - open);
      if (std::regex_search(desc, m, stamp)) return {m[1].str(), std::stoull(m[2].str())};
    }
  }
  throw ParseError(path + ": no config_hash/seed stamp");
}

}  // namespace plrank
