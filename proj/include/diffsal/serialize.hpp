#pragma once

#include <iosfwd>
#include <map>
#include <string>

#include "diffsal/tensor.hpp"

namespace diffsal {

// DSTN layout: "DSTN", u8 version, u8 rank, rank x u32 dims (LE), then
// float32 payload (LE, row-major).
inline constexpr uint8_t kDstnVersion = 1;

void write_dstn(std::ostream& os, const Tensor& t);
Tensor read_dstn(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// Checkpoint: records of (u32 name length, name bytes, DSTN tensor) until EOF.
using TensorDict = std::map<std::string, Tensor>;
void save_checkpoint(const std::string& path, const TensorDict& dict);
TensorDict load_checkpoint(const std::string& path);

// Writes to a temporary sibling and renames into place.
void atomic_write(const std::string& path, const std::string& bytes);

}  // namespace diffsal
