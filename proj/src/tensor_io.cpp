#include "stmn/tensor_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <limits>
#include <ostream>

namespace stmn {

namespace {

constexpr std::array<char, 4> kMagic{'S', 'T', 'M', 'N'};

template <typename U>
void put_le(std::vector<unsigned char>& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<unsigned char>((value >> (8 * i)) & 0xFFu));
  }
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

template <typename T>
Tensor<T> decode_payload(const Shape& dims, const unsigned char* p, std::size_t avail) {
  const std::size_t n = shape_count(dims);
  if (avail != n * sizeof(T)) {
    throw IoError("tensor payload has " + std::to_string(avail) + " bytes, expected " +
                  std::to_string(n * sizeof(T)));
  }
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    data[i] = std::bit_cast<T>(get_le<Bits<T>>(p + i * sizeof(T)));
  }
  return Tensor<T>(dims, std::move(data));
}

}  // namespace

template <typename T>
std::vector<unsigned char> encode_tensor(const Tensor<T>& t) {
  if (t.rank() > std::numeric_limits<std::uint8_t>::max()) {
    throw IoError("tensor rank too large for file format");
  }
  std::vector<unsigned char> out;
  out.reserve(8 + 4 * t.rank() + sizeof(T) * t.size());
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  out.push_back(kTensorFormatVersion);
  out.push_back(static_cast<unsigned char>(dtype_of<T>()));
  out.push_back(static_cast<unsigned char>(t.rank()));
  for (std::size_t d : t.dims()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw IoError("tensor extent exceeds u32");
    put_le(out, static_cast<std::uint32_t>(d));
  }
  for (T v : t.values()) put_le(out, std::bit_cast<Bits<T>>(v));
  return out;
}

AnyTensor decode_tensor(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 7 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0) {
    throw IoError("not a tensor file (bad magic)");
  }
  if (bytes[4] != kTensorFormatVersion) {
    throw IoError("unsupported tensor file version " + std::to_string(bytes[4]));
  }
  const unsigned char dtype = bytes[5];
  const std::size_t ndim = bytes[6];
  if (bytes.size() < 7 + 4 * ndim) throw IoError("truncated tensor header");
  Shape dims(ndim);
  for (std::size_t i = 0; i < ndim; ++i) dims[i] = get_le<std::uint32_t>(bytes.data() + 7 + 4 * i);
  const std::size_t header = 7 + 4 * ndim;
  const unsigned char* payload = bytes.data() + header;
  const std::size_t avail = bytes.size() - header;
  switch (dtype) {
    case static_cast<unsigned char>(DType::f32):
      return decode_payload<float>(dims, payload, avail);
    case static_cast<unsigned char>(DType::f64):
      return decode_payload<double>(dims, payload, avail);
    default:
      throw IoError("unknown tensor dtype code " + std::to_string(dtype));
  }
}

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  const auto bytes = encode_tensor(t);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing tensor");
}

AnyTensor read_any_tensor(std::istream& is) {
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

AnyTensor load_any_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_any_tensor(is);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  return as_precision<T>(load_any_tensor(path));
}

template std::vector<unsigned char> encode_tensor(const Tensor<float>&);
template std::vector<unsigned char> encode_tensor(const Tensor<double>&);
template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace stmn
