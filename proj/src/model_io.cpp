#include "hcount/model_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace hcount {
namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return v;
}

template <typename U>
void put(std::ostream& out, U v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in, const char* what) {
  U v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(U))) {
    throw ModelFormatError(std::string("truncated model file while reading ") + what);
  }
  return to_little(v);
}

void put_floats(std::ostream& out, const Tensor& t) {
  for (float f : t.values()) put(out, std::bit_cast<std::uint32_t>(f));
}

void get_floats(std::istream& in, Tensor& t) {
  for (float& f : t.values()) f = std::bit_cast<float>(get<std::uint32_t>(in, "weights"));
}

}  // namespace

void write_model(std::ostream& out, const Network& net, const nlohmann::json& sections) {
  nlohmann::json header;
  header["spec"] = nlohmann::json::parse(spec_to_json(net.spec()));
  header["rng_seed"] = net.rng_seed();
  header["sections"] = sections;
  const std::string text = header.dump();
  out.write(kModelMagic, 4);
  put<std::uint32_t>(out, kModelFormatVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : net.params()) {
    if (p.empty()) continue;
    put_floats(out, p.kernel);
    put_floats(out, p.bias);
  }
  if (!out) throw ModelFormatError("failed to write model");
}

ModelFile read_model(std::istream& in) {
  char magic[4] = {};
  if (!in.read(magic, 4) || std::memcmp(magic, kModelMagic, 4) != 0) {
    throw ModelFormatError("not an HCNT model (bad magic)");
  }
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kModelFormatVersion) {
    throw ModelFormatError("unsupported model format version " + std::to_string(version));
  }
  const auto length = get<std::uint64_t>(in, "header length");
  if (length > (1u << 26)) throw ModelFormatError("implausible header length");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
    throw ModelFormatError("truncated model header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ModelFormatError(std::string("malformed model header: ") + e.what());
  }
  const NetworkSpec spec = spec_from_json(header.at("spec").dump());
  Network shaped(spec, 0);
  auto params = shaped.params();
  for (auto& p : params) {
    if (p.empty()) continue;
    get_floats(in, p.kernel);
    get_floats(in, p.bias);
  }
  ModelFile file{Network(spec, header.at("rng_seed").get<std::uint64_t>(), std::move(params)),
                 header.value("sections", nlohmann::json::object())};
  return file;
}

void save_model(const std::filesystem::path& path, const Network& net,
                const nlohmann::json& sections) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ModelFormatError("cannot open " + path.string() + " for writing");
  write_model(out, net, sections);
}

ModelFile load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelFormatError("cannot open model " + path.string());
  try {
    return read_model(in);
  } catch (const ModelFormatError& e) {
    throw ModelFormatError(path.string() + ": " + e.what());
  }
}

}  // namespace hcount
