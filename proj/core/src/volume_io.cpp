#include "xwd/volume_io.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "xwd/error.hpp"

namespace xwd {

namespace {

constexpr std::array<char, 4> kMagic = {'X', 'W', 'D', '1'};

void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_vol(const std::filesystem::path& path, const Tensor& volume) {
  if (volume.channels() != 1) {
    throw Error(ErrorKind::kShapeMismatch, ".vol holds single-channel volumes only");
  }
  std::vector<unsigned char> buf(kMagic.begin(), kMagic.end());
  buf.reserve(16 + 4 * volume.size());
  put_u32(buf, static_cast<std::uint32_t>(volume.depth()));
  put_u32(buf, static_cast<std::uint32_t>(volume.height()));
  put_u32(buf, static_cast<std::uint32_t>(volume.width()));
  for (double v : volume.data()) put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Tensor read_vol(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 16 || std::memcmp(buf.data(), kMagic.data(), 4) != 0) {
    throw Error(ErrorKind::kIo, path.string() + " is not a .vol file");
  }
  const std::uint32_t t = get_u32(&buf[4]), h = get_u32(&buf[8]), w = get_u32(&buf[12]);
  const std::size_t n = static_cast<std::size_t>(t) * h * w;
  if (buf.size() != 16 + 4 * n) throw Error(ErrorKind::kIo, path.string() + " has a truncated body");
  Tensor out = Tensor::volume(t, h, w);
  for (std::size_t i = 0; i < n; ++i) {
    out.data()[i] = static_cast<double>(std::bit_cast<float>(get_u32(&buf[16 + 4 * i])));
  }
  return out;
}

}  // namespace xwd
