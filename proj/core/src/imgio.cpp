#include "rawformer/imgio.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "rawformer/errors.hpp"

namespace rawformer {
namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(std::string_view in, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

}  // namespace

std::string encode_rawimg(const ImageTensor& img) {
  const nn::Shape& s = img.shape();
  std::string out;
  out.reserve(kRawimgHeaderBytes + img.size() * 4);
  out += "RWIM";
  put_u32(out, kRawimgVersion);
  put_u32(out, static_cast<std::uint32_t>(s.n * s.c));
  put_u32(out, static_cast<std::uint32_t>(s.h));
  put_u32(out, static_cast<std::uint32_t>(s.w));
  for (float v : img.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

ImageTensor decode_rawimg(std::string_view bytes, std::uint64_t base_offset) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != "RWIM")
    throw FormatError("rawimg: bad magic", base_offset);
  if (bytes.size() < kRawimgHeaderBytes)
    throw FormatError("rawimg: truncated header", base_offset + bytes.size());
  const std::uint32_t version = get_u32(bytes, 4);
  if (version != kRawimgVersion)
    throw FormatError("rawimg: unsupported version " + std::to_string(version), base_offset + 4);
  const std::uint64_t c = get_u32(bytes, 8), h = get_u32(bytes, 12), w = get_u32(bytes, 16);
  if (c == 0 || h == 0 || w == 0)
    throw FormatError("rawimg: zero dimension in header", base_offset + 8);
  constexpr std::uint64_t kMaxExtent = std::numeric_limits<int>::max();
  if (c > kMaxExtent || h > kMaxExtent || w > kMaxExtent || c * h > kMaxExtent || c * h * w > kMaxExtent / 4)
    throw FormatError("rawimg: dimensions overflow", base_offset + 8);
  const std::uint64_t count = c * h * w;
  const std::uint64_t payload = bytes.size() - kRawimgHeaderBytes;
  if (payload < count * 4)
    throw FormatError("rawimg: truncated payload, expected " + std::to_string(count * 4) + " bytes",
                      base_offset + bytes.size());
  if (payload > count * 4)
    throw FormatError("rawimg: trailing bytes after payload", base_offset + kRawimgHeaderBytes + count * 4);
  std::vector<float> data(count);
  for (std::uint64_t i = 0; i < count; ++i)
    data[i] = std::bit_cast<float>(get_u32(bytes, kRawimgHeaderBytes + 4 * i));
  return ImageTensor(nn::Shape{1, static_cast<int>(c), static_cast<int>(h), static_cast<int>(w)}, std::move(data));
}

void write_rawimg(const std::filesystem::path& path, const ImageTensor& img) {
  const auto parent = path.parent_path();
  if (!parent.empty() && !std::filesystem::is_directory(parent))
    throw IoError("rawimg: directory does not exist: " + parent.string());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("rawimg: cannot open for writing: " + path.string());
  const std::string bytes = encode_rawimg(img);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("rawimg: write failed: " + path.string());
}

ImageTensor read_rawimg(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("rawimg: cannot open: " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return decode_rawimg(ss.str());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

std::vector<std::filesystem::path> list_rawimg(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".rawimg") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

ImageTensor normalize_raw(const ImageTensor& img, float black_level, float white_level) {
  if (!(black_level >= 0.0f) || !(white_level > black_level))
    throw ParameterError("normalize_raw: need white_level > black_level >= 0, got black=" +
                         std::to_string(black_level) + " white=" + std::to_string(white_level));
  ImageTensor out(img.shape());
  const float range = white_level - black_level;
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = std::clamp((img[i] - black_level) / range, 0.0f, 1.0f);
  return out;
}

PatchGrid extract_patches(const ImageTensor& img, int patch_size) {
  if (patch_size < 8) throw ParameterError("extract_patches: patch size must be >= 8");
  const nn::Shape s = img.shape();
  if (s.n != 1) throw DimensionError("extract_patches: expected a single image, got " + nn::to_string(s));
  if (patch_size > std::min(s.h, s.w))
    throw DimensionError("extract_patches: patch size " + std::to_string(patch_size) + " exceeds " +
                         std::to_string(s.h) + "x" + std::to_string(s.w) + " image, grid would be empty");
  PatchGrid grid;
  grid.patch_size = patch_size;
  for (int r = 0; r + patch_size <= s.h; r += patch_size)
    for (int c = 0; c + patch_size <= s.w; c += patch_size) {
      ImageTensor p = make_image(s.c, patch_size, patch_size);
      for (int ch = 0; ch < s.c; ++ch)
        for (int y = 0; y < patch_size; ++y)
          std::memcpy(&p.at(0, ch, y, 0), &img.at(0, ch, r + y, c), sizeof(float) * patch_size);
      grid.patches.push_back(std::move(p));
      grid.origins.emplace_back(r, c);
    }
  return grid;
}

ImageTensor demosaic_bilinear(const ImageTensor& mosaic) {
  const nn::Shape s = mosaic.shape();
  if (s.n != 1 || s.c != 1) throw DimensionError("demosaic: expected a 1-channel mosaic, got " + nn::to_string(s));
  // RGGB: R at (even, even), B at (odd, odd), G elsewhere.
  auto channel_at = [](int y, int x) { return (y % 2 == 0) ? (x % 2 == 0 ? 0 : 1) : (x % 2 == 0 ? 1 : 2); };
  ImageTensor out = make_image(3, s.h, s.w);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const int own = channel_at(y, x);
      for (int ch = 0; ch < 3; ++ch) {
        if (ch == own) {
          out.at(0, ch, y, x) = mosaic.at(0, 0, y, x);
          continue;
        }
        // Nearest same-colour samples: the 4-neighbourhood for green, otherwise
        // whichever of the 8 neighbours carry the colour.
        float acc = 0.0f;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (dy == 0 && dx == 0) continue;
            if (ch == 1 && dy != 0 && dx != 0) continue;
            const int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= s.h || xx < 0 || xx >= s.w || channel_at(yy, xx) != ch) continue;
            acc += mosaic.at(0, 0, yy, xx);
            ++n;
          }
        out.at(0, ch, y, x) = n ? acc / static_cast<float>(n) : 0.0f;
      }
    }
  return out;
}

void export_png(const ImageTensor& img, const std::filesystem::path& path, double gamma) {
  const nn::Shape s = img.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3))
    throw DimensionError("export_png: unsupported layout " + nn::to_string(s) + " (need 1 or 3 channels)");
  if (!(gamma > 0.0)) throw ParameterError("export_png: gamma must be positive");
  std::vector<unsigned char> pixels(static_cast<std::size_t>(s.c) * s.h * s.w);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < s.c; ++c) {
        const double v = std::clamp(static_cast<double>(img.at(0, c, y, x)), 0.0, 1.0);
        pixels[(static_cast<std::size_t>(y) * s.w + x) * s.c + c] =
            static_cast<unsigned char>(std::lround(255.0 * std::pow(v, 1.0 / gamma)));
      }
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(s.w);
  image.height = static_cast<png_uint_32>(s.h);
  image.format = s.c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("export_png: " + path.string() + ": " + msg);
  }
}

}  // namespace rawformer
