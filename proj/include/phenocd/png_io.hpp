#pragma once

// Thin libpng wrapper for the 8-bit grayscale and RGB images the dataset
// uses, plus the byte<->unit-interval conversions shared by the generator and
// the loader so quantization is identical everywhere.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "phenocd/common.hpp"
#include "phenocd/tensor.hpp"

namespace phenocd::img {

struct ImageU8 {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 (grayscale) or 3 (RGB)
    std::vector<uint8_t> pixels;  // row-major, interleaved

    uint8_t& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
};

// Throws IngestError on unreadable or malformed files. Palette, 16-bit and
// alpha inputs are normalized to 8-bit gray/RGB on read.
ImageU8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageU8& image);

// Round-half-up quantization: 0.5 maps to byte 128. Values are clamped to
// [0,1] first.
inline uint8_t quantize_unit(double v) {
    if (v < 0.0) v = 0.0;
    if (v > 1.0) v = 1.0;
    int b = static_cast<int>(v * 255.0 + 0.5);
    return static_cast<uint8_t>(b > 255 ? 255 : b);
}

inline double dequantize_unit(uint8_t b) { return b / 255.0; }

// [3,h,w] float image in [0,1] -> interleaved RGB bytes.
template <typename T>
ImageU8 to_rgb8(const nn::Tensor<T>& chw) {
    if (chw.rank() != 3 || chw.shape[0] != 3)
        throw ShapeError("to_rgb8: want [3,h,w], got " + chw.shape_str());
    ImageU8 im;
    im.height = chw.shape[1];
    im.width = chw.shape[2];
    im.channels = 3;
    im.pixels.resize(static_cast<size_t>(im.height) * im.width * 3);
    int64_t plane = static_cast<int64_t>(im.height) * im.width;
    for (int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c)
            im.pixels[i * 3 + c] = quantize_unit(static_cast<double>(chw.data[c * plane + i]));
    return im;
}

template <typename T>
nn::Tensor<T> from_rgb8(const ImageU8& im) {
    if (im.channels != 3) throw IngestError("from_rgb8: want 3 channels, got " +
                                            std::to_string(im.channels));
    nn::Tensor<T> t = nn::Tensor<T>::zeros({3, im.height, im.width});
    int64_t plane = static_cast<int64_t>(im.height) * im.width;
    for (int64_t i = 0; i < plane; ++i)
        for (int c = 0; c < 3; ++c)
            t.data[c * plane + i] = static_cast<T>(dequantize_unit(im.pixels[i * 3 + c]));
    return t;
}

// Label maps travel as grayscale PNGs whose byte value is the label id.
ImageU8 labels_to_gray(const nn::Tensor<int>& map);        // [h,w]
nn::Tensor<int> gray_to_labels(const ImageU8& im, int num_values, const char* what);

}  // namespace phenocd::img
