#include "imloss/segt.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

#include <json.hpp>

#include "imloss/io_util.hpp"

namespace imloss {
namespace {

constexpr std::string_view kMagic = "SEGT1";

template <typename T>
void append_le(std::string& out, const T* values, Index count) {
  const auto* bytes = reinterpret_cast<const char*>(values);
  const std::size_t n = sizeof(T) * static_cast<std::size_t>(count);
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    out.append(bytes, n);
  } else {
    for (Index i = 0; i < count; ++i) {
      for (std::size_t b = sizeof(T); b-- > 0;) out.push_back(bytes[i * sizeof(T) + b]);
    }
  }
}

template <typename T>
Tensor<T> payload_to_tensor(const Shape& shape, std::string_view payload) {
  Tensor<T> t(shape);
  const std::size_t need = sizeof(T) * static_cast<std::size_t>(t.size());
  if (payload.size() != need) {
    throw ValidationError("SEGT payload has " + std::to_string(payload.size()) + " bytes, expected " +
                          std::to_string(need));
  }
  auto* dst = reinterpret_cast<char*>(t.data().data());
  if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
    std::memcpy(dst, payload.data(), need);
  } else {
    for (Index i = 0; i < t.size(); ++i) {
      for (std::size_t b = 0; b < sizeof(T); ++b) {
        dst[i * sizeof(T) + b] = payload[i * sizeof(T) + sizeof(T) - 1 - b];
      }
    }
  }
  return t;
}

}  // namespace

std::string dtype_name(const AnyTensor& tensor) {
  switch (tensor.index()) {
    case 0: return "f32";
    case 1: return "f64";
    default: return "u8";
  }
}

std::string encode_segt(const AnyTensor& tensor) {
  return std::visit(
      [&](const auto& t) {
        nlohmann::json header = {{"magic", kMagic}, {"dtype", dtype_name(tensor)}, {"shape", t.shape()}};
        std::string out = header.dump();
        out.push_back('\n');
        append_le(out, t.data().data(), t.size());
        return out;
      },
      tensor);
}

AnyTensor decode_segt(std::string_view bytes) {
  const auto newline = bytes.find('\n');
  if (newline == std::string_view::npos) throw ValidationError("SEGT: missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(0, newline));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("SEGT: header is not JSON: ") + e.what());
  }
  if (!header.is_object() || header.value("magic", "") != kMagic) {
    throw ValidationError("SEGT: bad magic");
  }
  if (!header.contains("shape") || !header["shape"].is_array()) {
    throw ValidationError("SEGT: header field 'shape' missing");
  }
  Shape shape;
  for (const auto& d : header["shape"]) {
    if (!d.is_number_integer()) throw ValidationError("SEGT: header field 'shape' must hold integers");
    shape.push_back(d.get<Index>());
  }
  const std::string dtype = header.value("dtype", "");
  const auto payload = bytes.substr(newline + 1);
  if (dtype == "f32") return payload_to_tensor<float>(shape, payload);
  if (dtype == "f64") return payload_to_tensor<double>(shape, payload);
  if (dtype == "u8") return payload_to_tensor<std::uint8_t>(shape, payload);
  throw ValidationError("SEGT: unsupported dtype '" + dtype + "'");
}

void write_segt(const std::filesystem::path& path, const AnyTensor& tensor) {
  write_file_atomic(path, encode_segt(tensor));
}

AnyTensor read_segt(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("SEGT file not found: " + path.string());
  return decode_segt(read_file(path));
}

}  // namespace imloss
