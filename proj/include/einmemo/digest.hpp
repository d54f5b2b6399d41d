#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace einmemo {

using Sha256 = std::array<uint8_t, 32>;

Sha256 sha256(std::span<const uint8_t> bytes);
std::string to_hex(std::span<const uint8_t> bytes);

}  // namespace einmemo
