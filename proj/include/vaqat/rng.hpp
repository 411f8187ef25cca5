#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace vaqat {

using Rng = std::mt19937_64;

/// Independent generator for a named purpose ("data", "init", "crops",
/// "shuffle", ...). Turning one consumer on or off never shifts another.
Rng substream(std::uint64_t master_seed, std::string_view name);

}  // namespace vaqat
