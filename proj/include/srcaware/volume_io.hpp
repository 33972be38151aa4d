#pragma once

// CTV1 volume container:
//   bytes 0..3   magic "CTV1"
//   bytes 4..15  slices, rows, cols as uint32 little-endian
//   then slices*rows*cols float32 little-endian values, row-major (slice, row, col)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "srcaware/error.hpp"
#include "srcaware/volume.hpp"

namespace srcaware {

namespace detail {

inline void put_u32le(std::uint32_t v, unsigned char* out) {
  for (int i = 0; i < 4; ++i) out[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
}

inline std::uint32_t get_u32le(const unsigned char* in) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline constexpr std::array<char, 4> kVolumeMagic{'C', 'T', 'V', '1'};

inline void write_volume(const std::filesystem::path& path, const VolumeF& v) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open volume file for writing: " + path.string());
  unsigned char header[16];
  std::memcpy(header, kVolumeMagic.data(), 4);
  detail::put_u32le(static_cast<std::uint32_t>(v.slices()), header + 4);
  detail::put_u32le(static_cast<std::uint32_t>(v.rows()), header + 8);
  detail::put_u32le(static_cast<std::uint32_t>(v.cols()), header + 12);
  out.write(reinterpret_cast<const char*>(header), sizeof header);

  std::vector<unsigned char> body(v.size() * 4);
  for (std::size_t i = 0; i < v.size(); ++i)
    detail::put_u32le(std::bit_cast<std::uint32_t>(v.data()[i]), body.data() + 4 * i);
  out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (!out) throw Error("failed writing volume file: " + path.string());
}

inline VolumeF read_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open volume file: " + path.string());
  unsigned char header[16];
  in.read(reinterpret_cast<char*>(header), sizeof header);
  if (in.gcount() != sizeof header || std::memcmp(header, kVolumeMagic.data(), 4) != 0)
    throw Error("not a CTV1 volume file: " + path.string());
  Shape3 shape{static_cast<int>(detail::get_u32le(header + 4)), static_cast<int>(detail::get_u32le(header + 8)),
               static_cast<int>(detail::get_u32le(header + 12))};
  std::vector<unsigned char> body(shape.size() * 4);
  in.read(reinterpret_cast<char*>(body.data()), static_cast<std::streamsize>(body.size()));
  if (static_cast<std::size_t>(in.gcount()) != body.size())
    throw Error("truncated volume file: " + path.string());
  std::vector<float> data(shape.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = std::bit_cast<float>(detail::get_u32le(body.data() + 4 * i));
  return VolumeF(shape, std::move(data));
}

}  // namespace srcaware
