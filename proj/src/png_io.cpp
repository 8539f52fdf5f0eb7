#include "phenocd/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>

namespace phenocd::img {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

}  // namespace

ImageU8 read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IngestError("cannot open PNG for reading: " + path.string());

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
        throw IngestError("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IngestError("libpng allocation failed reading " + path.string());
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IngestError("libpng allocation failed reading " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IngestError("malformed PNG: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_uint_32 width = png_get_image_width(png, info);
    png_uint_32 height = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    color_type = png_get_color_type(png, info);
    int channels;
    if (color_type == PNG_COLOR_TYPE_GRAY)
        channels = 1;
    else if (color_type == PNG_COLOR_TYPE_RGB)
        channels = 3;
    else {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IngestError("unsupported PNG color type in " + path.string());
    }

    ImageU8 im;
    im.width = static_cast<int>(width);
    im.height = static_cast<int>(height);
    im.channels = channels;
    im.pixels.resize(static_cast<size_t>(width) * height * channels);
    std::vector<png_bytep> rows(height);
    for (png_uint_32 y = 0; y < height; ++y)
        rows[y] = im.pixels.data() + static_cast<size_t>(y) * width * channels;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return im;
}

void write_png(const std::filesystem::path& path, const ImageU8& image) {
    if (image.channels != 1 && image.channels != 3)
        throw IngestError("write_png: channels must be 1 or 3");
    if (image.width < 1 || image.height < 1 ||
        image.pixels.size() !=
            static_cast<size_t>(image.width) * image.height * image.channels)
        throw IngestError("write_png: inconsistent image buffer for " + path.string());

    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IngestError("cannot open PNG for writing: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IngestError("libpng allocation failed writing " + path.string());
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IngestError("libpng allocation failed writing " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IngestError("PNG write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width),
                 static_cast<png_uint_32>(image.height), 8,
                 image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(image.height);
    for (int y = 0; y < image.height; ++y)
        rows[y] = const_cast<png_bytep>(image.pixels.data() +
                                        static_cast<size_t>(y) * image.width * image.channels);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageU8 labels_to_gray(const nn::Tensor<int>& map) {
    if (map.rank() != 2) throw ShapeError("labels_to_gray: want [h,w], got " + map.shape_str());
    ImageU8 im;
    im.height = map.shape[0];
    im.width = map.shape[1];
    im.channels = 1;
    im.pixels.resize(static_cast<size_t>(im.height) * im.width);
    for (int64_t i = 0; i < map.numel(); ++i) {
        int v = map.data[i];
        if (v < 0 || v > 255)
            throw IngestError("labels_to_gray: label " + std::to_string(v) +
                              " does not fit one byte");
        im.pixels[i] = static_cast<uint8_t>(v);
    }
    return im;
}

nn::Tensor<int> gray_to_labels(const ImageU8& im, int num_values, const char* what) {
    if (im.channels != 1)
        throw IngestError(std::string(what) + ": label map must be grayscale");
    nn::Tensor<int> t = nn::Tensor<int>::zeros({im.height, im.width});
    for (size_t i = 0; i < im.pixels.size(); ++i) {
        int v = im.pixels[i];
        if (v >= num_values)
            throw IngestError(std::string(what) + ": label " + std::to_string(v) +
                              " outside [0," + std::to_string(num_values) + ")");
        t.data[static_cast<int64_t>(i)] = v;
    }
    return t;
}

}  // namespace phenocd::img
