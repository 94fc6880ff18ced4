#pragma once

// SEGT tensor files: one JSON header line
//   {"dtype":"f32"|"f64"|"u8","magic":"SEGT1","shape":[...]}\n
// followed by the little-endian row-major payload.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>

#include "imloss/numerics.hpp"

namespace imloss {

using AnyTensor = std::variant<Tensor<float>, Tensor<double>, Tensor<std::uint8_t>>;

std::string encode_segt(const AnyTensor& tensor);
AnyTensor decode_segt(std::string_view bytes);

void write_segt(const std::filesystem::path& path, const AnyTensor& tensor);
AnyTensor read_segt(const std::filesystem::path& path);

/// Reads any dtype and converts values to Scalar.
template <typename Scalar>
Tensor<Scalar> read_segt_as(const std::filesystem::path& path) {
  return std::visit([](const auto& t) { return t.template cast<Scalar>(); }, read_segt(path));
}

std::string dtype_name(const AnyTensor& tensor);

}  // namespace imloss
