#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "hcount/network.hpp"

namespace hcount {

class ModelFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kModelMagic[4] = {'H', 'C', 'N', 'T'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

/// A network plus optional named header sections (e.g. anchor geometry).
struct ModelFile {
  Network net;
  nlohmann::json sections = nlohmann::json::object();
};

// Container layout, all integers little-endian:
//   "HCNT" | u32 version | u64 header length | header JSON
//   | float32 weight blocks (kernel then bias) for each parametrized layer
// The header JSON holds {"spec", "rng_seed", "sections"}.
void write_model(std::ostream& out, const Network& net,
                 const nlohmann::json& sections = nlohmann::json::object());
ModelFile read_model(std::istream& in);

void save_model(const std::filesystem::path& path, const Network& net,
                const nlohmann::json& sections = nlohmann::json::object());
ModelFile load_model(const std::filesystem::path& path);

}  // namespace hcount
