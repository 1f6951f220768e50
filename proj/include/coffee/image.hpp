#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "coffee/common.hpp"

// Grayscale raster images and their on-disk formats: 8/16-bit grayscale PNG
// and 32-bit float PFM (little-endian, bottom-up rows).

namespace coffee {

/// Grayscale image, values in [0, 1], row-major, y down.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(static_cast<size_t>(w) * h, fill) {}

  double& at(int x, int y) { return pixels[static_cast<size_t>(y) * width + x]; }
  double at(int x, int y) const {
    return pixels[static_cast<size_t>(y) * width + x];
  }

  bool in_bounds(int x, int y) const {
    return x >= 0 && x < width && y >= 0 && y < height;
  }

  /// Bilinear sample at a pixel-center coordinate system (integer + 0.5 is
  /// the center of a pixel); clamps to the border.
  double sample_bilinear(double x, double y) const {
    const double fx = std::clamp(x - 0.5, 0.0, static_cast<double>(width - 1));
    const double fy = std::clamp(y - 0.5, 0.0, static_cast<double>(height - 1));
    const int x0 = std::min(static_cast<int>(fx), width - 2 >= 0 ? width - 2 : 0);
    const int y0 = std::min(static_cast<int>(fy), height - 2 >= 0 ? height - 2 : 0);
    const int x1 = std::min(x0 + 1, width - 1);
    const int y1 = std::min(y0 + 1, height - 1);
    const double ax = fx - x0, ay = fy - y0;
    return (1 - ax) * (1 - ay) * at(x0, y0) + ax * (1 - ay) * at(x1, y0) +
           (1 - ax) * ay * at(x0, y1) + ax * ay * at(x1, y1);
  }
};

namespace detail {

inline void put_u32_be(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t read_u32_be(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) |
         (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void append_chunk(std::vector<uint8_t>& out, const char type[4],
                         const std::vector<uint8_t>& data) {
  put_u32_be(out, static_cast<uint32_t>(data.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uint32_t crc = static_cast<uint32_t>(
      ::crc32(0, out.data() + start, static_cast<uInt>(out.size() - start)));
  put_u32_be(out, crc);
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace detail

/// Write a grayscale PNG. bit_depth is 8 or 16; filter_type (0..4) selects
/// the per-scanline filter, normally 0 (None).
inline void save_png(const Image& img, const std::string& path,
                     int bit_depth = 16, int filter_type = 0) {
  if (bit_depth != 8 && bit_depth != 16)
    throw ValidationError("save_png: bit depth must be 8 or 16");
  if (filter_type < 0 || filter_type > 4)
    throw ValidationError("save_png: filter type must be 0..4");
  const int bpp = bit_depth / 8;
  const size_t stride = static_cast<size_t>(img.width) * bpp;

  // Raw sample bytes (big-endian within a 16-bit sample).
  std::vector<uint8_t> raw(static_cast<size_t>(img.height) * stride);
  const double maxval = bit_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double v = std::clamp(img.at(x, y), 0.0, 1.0);
      const auto q = static_cast<uint32_t>(std::lround(v * maxval));
      uint8_t* p = raw.data() + y * stride + static_cast<size_t>(x) * bpp;
      if (bit_depth == 16) {
        p[0] = static_cast<uint8_t>(q >> 8);
        p[1] = static_cast<uint8_t>(q & 0xff);
      } else {
        p[0] = static_cast<uint8_t>(q);
      }
    }
  }

  // Filtered scanlines: one filter byte then the filtered bytes.
  std::vector<uint8_t> filtered;
  filtered.reserve(static_cast<size_t>(img.height) * (stride + 1));
  for (int y = 0; y < img.height; ++y) {
    filtered.push_back(static_cast<uint8_t>(filter_type));
    const uint8_t* cur = raw.data() + y * stride;
    const uint8_t* up = y > 0 ? raw.data() + (y - 1) * stride : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      const int x = cur[i];
      const int a = i >= static_cast<size_t>(bpp) ? cur[i - bpp] : 0;
      const int b = up ? up[i] : 0;
      const int c = (up && i >= static_cast<size_t>(bpp)) ? up[i - bpp] : 0;
      int out = x;
      switch (filter_type) {
        case 1: out = x - a; break;
        case 2: out = x - b; break;
        case 3: out = x - (a + b) / 2; break;
        case 4: out = x - detail::paeth(a, b, c); break;
        default: break;
      }
      filtered.push_back(static_cast<uint8_t>(out & 0xff));
    }
  }

  uLongf comp_size = compressBound(static_cast<uLong>(filtered.size()));
  std::vector<uint8_t> compressed(comp_size);
  if (compress2(compressed.data(), &comp_size, filtered.data(),
                static_cast<uLong>(filtered.size()), 6) != Z_OK)
    throw IoError("save_png: zlib compression failed");
  compressed.resize(comp_size);

  std::vector<uint8_t> file = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<uint8_t> ihdr;
  detail::put_u32_be(ihdr, static_cast<uint32_t>(img.width));
  detail::put_u32_be(ihdr, static_cast<uint32_t>(img.height));
  ihdr.push_back(static_cast<uint8_t>(bit_depth));
  ihdr.push_back(0);  // color type: grayscale
  ihdr.push_back(0);  // compression
  ihdr.push_back(0);  // filter method
  ihdr.push_back(0);  // no interlace
  detail::append_chunk(file, "IHDR", ihdr);
  detail::append_chunk(file, "IDAT", compressed);
  detail::append_chunk(file, "IEND", {});

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_png: cannot open " + path);
  out.write(reinterpret_cast<const char*>(file.data()),
            static_cast<std::streamsize>(file.size()));
  if (!out) throw IoError("save_png: write failed for " + path);
}

/// Read a grayscale PNG (color type 0, bit depth 8 or 16, no interlace).
inline Image load_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_png: cannot open " + path);
  std::vector<uint8_t> file((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
  static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (file.size() < 8 || std::memcmp(file.data(), sig, 8) != 0)
    throw IoError("load_png: not a PNG file: " + path);

  int width = 0, height = 0, bit_depth = 0;
  std::vector<uint8_t> idat;
  size_t pos = 8;
  while (pos + 8 <= file.size()) {
    const uint32_t len = detail::read_u32_be(file.data() + pos);
    if (pos + 12 + len > file.size())
      throw IoError("load_png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(file.data() + pos + 4);
    const uint8_t* data = file.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      width = static_cast<int>(detail::read_u32_be(data));
      height = static_cast<int>(detail::read_u32_be(data + 4));
      bit_depth = data[8];
      if (data[9] != 0)
        throw IoError("load_png: only grayscale PNGs are supported");
      if (bit_depth != 8 && bit_depth != 16)
        throw IoError("load_png: unsupported bit depth");
      if (data[12] != 0) throw IoError("load_png: interlace not supported");
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      break;
    }
    pos += 12 + len;
  }
  if (width <= 0 || height <= 0 || idat.empty())
    throw IoError("load_png: missing image data");

  const int bpp = bit_depth / 8;
  const size_t stride = static_cast<size_t>(width) * bpp;
  std::vector<uint8_t> filtered(static_cast<size_t>(height) * (stride + 1));
  uLongf out_size = static_cast<uLongf>(filtered.size());
  if (uncompress(filtered.data(), &out_size, idat.data(),
                 static_cast<uLong>(idat.size())) != Z_OK ||
      out_size != filtered.size())
    throw IoError("load_png: zlib decompression failed");

  std::vector<uint8_t> raw(static_cast<size_t>(height) * stride);
  for (int y = 0; y < height; ++y) {
    const uint8_t filter = filtered[y * (stride + 1)];
    const uint8_t* src = filtered.data() + y * (stride + 1) + 1;
    uint8_t* cur = raw.data() + y * stride;
    const uint8_t* up = y > 0 ? raw.data() + (y - 1) * stride : nullptr;
    for (size_t i = 0; i < stride; ++i) {
      const int a = i >= static_cast<size_t>(bpp) ? cur[i - bpp] : 0;
      const int b = up ? up[i] : 0;
      const int c = (up && i >= static_cast<size_t>(bpp)) ? up[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: v += detail::paeth(a, b, c); break;
        default: throw IoError("load_png: bad filter byte");
      }
      cur[i] = static_cast<uint8_t>(v & 0xff);
    }
  }

  Image img(width, height);
  const double maxval = bit_depth == 16 ? 65535.0 : 255.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const uint8_t* p = raw.data() + y * stride + static_cast<size_t>(x) * bpp;
      const uint32_t q =
          bit_depth == 16 ? (static_cast<uint32_t>(p[0]) << 8) | p[1] : p[0];
      img.at(x, y) = q / maxval;
    }
  }
  return img;
}

/// Write a single-channel PFM: "Pf", dimensions, scale -1 (little-endian),
/// then float32 rows bottom-up.
inline void save_pfm(const Image& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_pfm: cannot open " + path);
  out << "Pf\n" << img.width << ' ' << img.height << "\n-1.0\n";
  for (int y = img.height - 1; y >= 0; --y) {
    std::vector<float> row(img.width);
    for (int x = 0; x < img.width; ++x)
      row[x] = static_cast<float>(img.at(x, y));
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size() * sizeof(float)));
  }
  if (!out) throw IoError("save_pfm: write failed for " + path);
}

inline Image load_pfm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_pfm: cannot open " + path);
  std::string magic;
  int width = 0, height = 0;
  double scale = 0.0;
  in >> magic >> width >> height >> scale;
  if (magic != "Pf" || width <= 0 || height <= 0)
    throw IoError("load_pfm: bad header in " + path);
  if (scale >= 0.0)
    throw IoError("load_pfm: big-endian PFM not supported");
  in.get();  // the single whitespace after the scale line
  Image img(width, height);
  for (int y = height - 1; y >= 0; --y) {
    std::vector<float> row(width);
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size() * sizeof(float)));
    if (!in) throw IoError("load_pfm: truncated data in " + path);
    for (int x = 0; x < width; ++x) img.at(x, y) = row[x];
  }
  return img;
}

}  // namespace coffee
