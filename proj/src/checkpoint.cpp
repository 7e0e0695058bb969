#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "plrank/policy.hpp"

namespace plrank {

namespace {

constexpr char kMagic[4] = {'P', 'L', 'R', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  static_assert(std::is_integral_v<T>);
  std::array<char, sizeof(T)> bytes;
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(bytes.data(), bytes.size());
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw ParseError("checkpoint " + path + " is truncated");
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void save_checkpoint(const PolicyParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint " + path + " for writing");
  const auto named = params.named_all();
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, params.config.hash());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, m] : named) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(os, 2);
    put<std::uint64_t>(os, static_cast<std::uint64_t>(m->rows()));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(m->cols()));
    for (Eigen::Index i = 0; i < m->size(); ++i) put<std::uint64_t>(os, std::bit_cast<std::uint64_t>(m->data()[i]));
  }
  if (!os) throw IoError("failed writing checkpoint " + path);
}

PolicyParams load_checkpoint(const ModelConfig& config, const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw ParseError("checkpoint " + path + " has a bad magic number");
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kVersion) throw ParseError("checkpoint " + path + " has unsupported version " + std::to_string(version));
  const auto hash = get<std::uint64_t>(is, path);
  if (hash != config.hash()) {
    throw ConfigError("checkpoint " + path + " was written for a different model config");
  }
  const auto count = get<std::uint32_t>(is, path);
  std::map<std::string, Matrix> tensors;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = get<std::uint32_t>(is, path);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw ParseError("checkpoint " + path + " is truncated");
    const auto rank = get<std::uint32_t>(is, path);
    if (rank != 2) throw ParseError("checkpoint tensor " + name + " has rank " + std::to_string(rank));
    const auto rows = get<std::uint64_t>(is, path);
    const auto cols = get<std::uint64_t>(is, path);
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<double>(get<std::uint64_t>(is, path));
    tensors.emplace(std::move(name), std::move(m));
  }

  RandomStream unused(0);
  PolicyParams params = PolicyParams::init(config, unused);
  auto named = params.named_all();
  if (named.size() != tensors.size()) throw ParseError("checkpoint " + path + " has the wrong tensor count");
  for (auto& [name, m] : named) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ParseError("checkpoint " + path + " lacks tensor " + name);
    if (it->second.rows() != m->rows() || it->second.cols() != m->cols()) {
      throw ParseError("checkpoint tensor " + name + " has the wrong shape");
    }
    *m = std::move(it->second);
  }
  return params;
}

}  // namespace plrank
