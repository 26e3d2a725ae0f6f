#include "diffsal/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace diffsal {

namespace {

static_assert(std::endian::native == std::endian::little, "DSTN I/O assumes a little-endian host");

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t get_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error("truncated DSTN stream");
  return v;
}

}  // namespace

void write_dstn(std::ostream& os, const Tensor& t) {
  if (t.dim() > 255) throw ShapeError("DSTN rank limited to 255");
  os.write("DSTN", 4);
  const char header[2] = {static_cast<char>(kDstnVersion), static_cast<char>(t.dim())};
  os.write(header, 2);
  for (int64_t d : t.shape()) put_u32(os, static_cast<uint32_t>(d));
  std::vector<float> payload(t.data().begin(), t.data().end());
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
}

Tensor read_dstn(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || std::memcmp(magic.data(), "DSTN", 4) != 0) throw std::runtime_error("bad DSTN magic");
  char header[2];
  is.read(header, 2);
  if (!is) throw std::runtime_error("truncated DSTN header");
  if (static_cast<uint8_t>(header[0]) != kDstnVersion) {
    throw std::runtime_error("unsupported DSTN version " + std::to_string(static_cast<uint8_t>(header[0])));
  }
  const int rank = static_cast<uint8_t>(header[1]);
  Shape shape(rank);
  for (int i = 0; i < rank; ++i) shape[i] = get_u32(is);
  std::vector<float> payload(numel(shape));
  is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size() * 4));
  if (!is && !payload.empty()) throw std::runtime_error("truncated DSTN payload");
  return Tensor(std::move(shape), std::vector<double>(payload.begin(), payload.end()));
}

void atomic_write(const std::string& path, const std::string& bytes) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::filesystem::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_dstn(os, t);
  atomic_write(path, os.str());
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_dstn(is);
}

void save_checkpoint(const std::string& path, const TensorDict& dict) {
  std::ostringstream os(std::ios::binary);
  for (const auto& [name, t] : dict) {
    put_u32(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_dstn(os, t);
  }
  atomic_write(path, os.str());
}

TensorDict load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  TensorDict dict;
  while (is.peek() != std::char_traits<char>::eof()) {
    const uint32_t len = get_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (!is) throw std::runtime_error("truncated checkpoint record in " + path);
    dict.emplace(std::move(name), read_dstn(is));
  }
  return dict;
}

}  // namespace diffsal
