#include "mscl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "mscl/error.hpp"

namespace mscl {

namespace {

static_assert(sizeof(float) == 4);

void put_u32(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& buf, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  put_u32(buf, v);
}

struct Reader {
  explicit Reader(const std::filesystem::path& path) : in(path, std::ios::binary) {
    if (!in) throw FormatError("cannot open '" + path.string() + "'", 0);
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) {
      throw FormatError(std::string("truncated file while reading ") + what, offset);
    }
    offset += 4;
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  void bytes(char* dst, std::size_t n, const char* what) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
      throw FormatError(std::string("truncated file while reading ") + what, offset);
    }
    offset += n;
  }

  bool at_eof() {
    in.peek();
    return in.eof();
  }

  std::ifstream in;
  std::uint64_t offset = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::string buf;
  buf.append("MSCL");
  put_u32(buf, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    put_u32(buf, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t d : t.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
    for (const float f : t.data()) put_f32(buf, f);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'", 0);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FormatError("write failed for '" + path.string() + "'", 0);
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "MSCL", 4) != 0) throw FormatError("bad magic, expected MSCL", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  NamedTensors out;
  while (!r.at_eof()) {
    const std::uint32_t name_len = r.u32("name length");
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len, "name");
    const std::uint32_t ndim = r.u32("ndim");
    std::vector<std::size_t> shape(ndim);
    std::size_t numel = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      shape[i] = r.u32("dim");
      numel *= shape[i];
    }
    std::vector<float> data(numel);
    for (std::size_t i = 0; i < numel; ++i) {
      std::uint32_t v = r.u32("payload");
      if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
      std::memcpy(&data[i], &v, 4);
    }
    out.emplace(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace mscl
