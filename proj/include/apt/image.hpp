#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "apt/tensor.hpp"

namespace apt {

// 8-bit interleaved image, c is 1 (gray) or 3 (RGB)
struct ImageU8 {
    int w = 0;
    int h = 0;
    int c = 0;
    std::vector<uint8_t> px;

    ImageU8() = default;
    ImageU8(int width, int height, int channels, uint8_t fill = 0)
        : w(width), h(height), c(channels), px(size_t(width) * height * channels, fill) {}

    uint8_t& at(int x, int y, int ch) { return px[(size_t(y) * w + x) * c + ch]; }
    uint8_t at(int x, int y, int ch) const { return px[(size_t(y) * w + x) * c + ch]; }
};

// PNG (8-bit gray/RGB/RGBA, non-interlaced; RGBA is flattened to RGB on load)
void save_png(const std::string& path, const ImageU8& img);
ImageU8 load_png(const std::string& path);

// PPM/PGM binary
void save_ppm(const std::string& path, const ImageU8& img);
ImageU8 load_ppm(const std::string& path);

// any supported extension (.png/.ppm/.pgm)
ImageU8 load_image(const std::string& path);

// value-range conversions; tensors are CHW in [-1, 1]
ImageU8 tensor_to_u8(const Tensor& chw);
Tensor u8_to_tensor(const ImageU8& img);

// tile CHW tensors into a grid image (ceil-sqrt columns, 2px gutter)
ImageU8 make_grid(const std::vector<Tensor>& images);

// ---- tiny drawing helpers for report plots ----
struct Rgb {
    uint8_t r, g, b;
};

void fill_rect(ImageU8& img, int x0, int y0, int x1, int y1, Rgb col);
void draw_line(ImageU8& img, double x0, double y0, double x1, double y1, Rgb col);
// 3x5 digit font, scale 2; supports 0-9 . - e
void draw_text(ImageU8& img, int x, int y, const std::string& text, Rgb col);

} // namespace apt
