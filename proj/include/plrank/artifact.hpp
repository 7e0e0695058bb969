#pragma once

// Provenance stamp carried by every file the pipeline writes.

#include <cstdint>
#include <string>

namespace plrank {

struct ArtifactMeta {
  std::string config_hash;
  std::uint64_t seed = 0;

  bool empty() const { return config_hash.empty(); }
  bool operator==(const ArtifactMeta&) const = default;
};

/// "# config_hash=<hash>,seed=<seed>"
std::string meta_comment(const ArtifactMeta& meta);

/// Reads the stamp from a .jsonl header, a .csv comment line, an .svg <desc>
/// or a checkpoint's ".meta.json" sidecar. Throws ParseError when absent.
ArtifactMeta read_artifact_meta(const std::string& path);

}  // namespace plrank
