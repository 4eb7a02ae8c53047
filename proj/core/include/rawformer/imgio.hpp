#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "rawformer/nn/tensor.hpp"

namespace rawformer {

/// Channel-first float image. Single images use batch extent 1; the
/// `.rawimg` codec folds the batch axis into channels.
using ImageTensor = nn::Tensor<float>;

inline ImageTensor make_image(int channels, int height, int width, float fill = 0.0f) {
  return ImageTensor(nn::Shape{1, channels, height, width}, fill);
}

// ---- .rawimg --------------------------------------------------------------
//
// Little-endian: "RWIM", u32 version (1), u32 channels, u32 height, u32 width,
// then channels*height*width float32 values, channel-major then row-major.

inline constexpr std::uint32_t kRawimgVersion = 1;
inline constexpr std::size_t kRawimgHeaderBytes = 20;

std::string encode_rawimg(const ImageTensor& img);
/// `base_offset` is added to the offsets reported by FormatError, so a blob
/// embedded in a larger file reports file positions.
ImageTensor decode_rawimg(std::string_view bytes, std::uint64_t base_offset = 0);

void write_rawimg(const std::filesystem::path& path, const ImageTensor& img);
ImageTensor read_rawimg(const std::filesystem::path& path);

/// Sorted list of `*.rawimg` files directly inside `dir`.
std::vector<std::filesystem::path> list_rawimg(const std::filesystem::path& dir);

// ---- raw conditioning -------------------------------------------------------

/// clip((img - black) / (white - black), 0, 1).
ImageTensor normalize_raw(const ImageTensor& img, float black_level, float white_level);

struct PatchGrid {
  std::vector<ImageTensor> patches;
  std::vector<std::pair<int, int>> origins;  // (row, col) of each top-left corner
  int patch_size = 0;
};

/// Non-overlapping p x p tiles in row-major scan order; remainders dropped.
PatchGrid extract_patches(const ImageTensor& img, int patch_size);

/// Bilinear demosaic of a single-channel RGGB mosaic to 3 channels.
ImageTensor demosaic_bilinear(const ImageTensor& mosaic);

/// 8-bit PNG (gray or RGB), pixel = round(255 * clamp(v)^(1/gamma)).
void export_png(const ImageTensor& img, const std::filesystem::path& path, double gamma = 2.2);

}  // namespace rawformer
