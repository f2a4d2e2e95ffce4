#include "apt/image.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace apt {

namespace {

void put_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

uint32_t read_u32be(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void write_chunk(std::ofstream& f, const char type[4], const std::vector<uint8_t>& data) {
    std::vector<uint8_t> hdr;
    put_u32be(hdr, uint32_t(data.size()));
    f.write(reinterpret_cast<const char*>(hdr.data()), 4);
    f.write(type, 4);
    if (!data.empty()) f.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(type), 4);
    if (!data.empty()) crc = crc32(crc, data.data(), uInt(data.size()));
    std::vector<uint8_t> crcb;
    put_u32be(crcb, uint32_t(crc));
    f.write(reinterpret_cast<const char*>(crcb.data()), 4);
}

uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return uint8_t(a);
    if (pb <= pc) return uint8_t(b);
    return uint8_t(c);
}

} // namespace

void save_png(const std::string& path, const ImageU8& img) {
    if (img.c != 1 && img.c != 3) throw std::invalid_argument("save_png: channels must be 1 or 3");
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_png: cannot open " + path);
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    f.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<uint8_t> ihdr;
    put_u32be(ihdr, uint32_t(img.w));
    put_u32be(ihdr, uint32_t(img.h));
    ihdr.push_back(8);                            // bit depth
    ihdr.push_back(img.c == 3 ? 2 : 0);           // color type
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    write_chunk(f, "IHDR", ihdr);

    // filter 0 per scanline
    const size_t stride = size_t(img.w) * img.c;
    std::vector<uint8_t> raw((stride + 1) * size_t(img.h));
    for (int y = 0; y < img.h; ++y) {
        raw[(stride + 1) * size_t(y)] = 0;
        std::memcpy(raw.data() + (stride + 1) * size_t(y) + 1, img.px.data() + stride * size_t(y),
                    stride);
    }
    uLongf bound = compressBound(uLong(raw.size()));
    std::vector<uint8_t> comp(bound);
    if (compress2(comp.data(), &bound, raw.data(), uLong(raw.size()), 9) != Z_OK)
        throw std::runtime_error("save_png: deflate failed");
    comp.resize(bound);
    write_chunk(f, "IDAT", comp);
    write_chunk(f, "IEND", {});
    if (!f) throw std::runtime_error("save_png: write failed for " + path);
}

ImageU8 load_png(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_png: cannot open " + path);
    std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 8 || buf[1] != 'P' || buf[2] != 'N' || buf[3] != 'G')
        throw std::runtime_error("load_png: not a PNG file: " + path);

    size_t pos = 8;
    int w = 0, h = 0, channels = 0;
    std::vector<uint8_t> idat;
    while (pos + 8 <= buf.size()) {
        const uint32_t len = read_u32be(&buf[pos]);
        const std::string type(reinterpret_cast<const char*>(&buf[pos + 4]), 4);
        const uint8_t* data = buf.data() + pos + 8;
        if (pos + 12 + len > buf.size()) throw std::runtime_error("load_png: truncated chunk");
        if (type == "IHDR") {
            w = int(read_u32be(data));
            h = int(read_u32be(data + 4));
            const int depth = data[8], color = data[9], interlace = data[12];
            if (depth != 8 || interlace != 0)
                throw std::runtime_error("load_png: only 8-bit non-interlaced supported");
            if (color == 0) channels = 1;
            else if (color == 2) channels = 3;
            else if (color == 6) channels = 4;
            else throw std::runtime_error("load_png: unsupported color type");
        } else if (type == "IDAT") {
            idat.insert(idat.end(), data, data + len);
        } else if (type == "IEND") {
            break;
        }
        pos += 12 + len;
    }
    if (w <= 0 || h <= 0 || channels == 0) throw std::runtime_error("load_png: missing IHDR");

    const size_t stride = size_t(w) * channels;
    std::vector<uint8_t> raw((stride + 1) * size_t(h));
    uLongf rawlen = uLongf(raw.size());
    if (uncompress(raw.data(), &rawlen, idat.data(), uLong(idat.size())) != Z_OK ||
        rawlen != raw.size())
        throw std::runtime_error("load_png: inflate failed");

    // undo per-scanline filters
    std::vector<uint8_t> pix(stride * size_t(h));
    const int bpp = channels;
    for (int y = 0; y < h; ++y) {
        const uint8_t filter = raw[(stride + 1) * size_t(y)];
        const uint8_t* src = raw.data() + (stride + 1) * size_t(y) + 1;
        uint8_t* dst = pix.data() + stride * size_t(y);
        const uint8_t* up = y > 0 ? pix.data() + stride * size_t(y - 1) : nullptr;
        for (size_t i = 0; i < stride; ++i) {
            const int a = i >= size_t(bpp) ? dst[i - size_t(bpp)] : 0;
            const int b = up ? up[i] : 0;
            const int c = (up && i >= size_t(bpp)) ? up[i - size_t(bpp)] : 0;
            int v = src[i];
            switch (filter) {
                case 0: break;
                case 1: v += a; break;
                case 2: v += b; break;
                case 3: v += (a + b) / 2; break;
                case 4: v += paeth(a, b, c); break;
                default: throw std::runtime_error("load_png: bad filter");
            }
            dst[i] = uint8_t(v);
        }
    }

    ImageU8 img(w, h, channels == 1 ? 1 : 3);
    if (channels == 4) {
        for (size_t p = 0; p < size_t(w) * h; ++p)
            for (int ch = 0; ch < 3; ++ch) img.px[p * 3 + size_t(ch)] = pix[p * 4 + size_t(ch)];
    } else {
        img.px.assign(pix.begin(), pix.end());
    }
    return img;
}

void save_ppm(const std::string& path, const ImageU8& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_ppm: cannot open " + path);
    f << (img.c == 1 ? "P5\n" : "P6\n") << img.w << " " << img.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.px.data()), std::streamsize(img.px.size()));
}

ImageU8 load_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6" && magic != "P5") throw std::runtime_error("load_ppm: bad magic in " + path);
    int w, h, maxv;
    f >> w >> h >> maxv;
    f.get();
    if (maxv != 255) throw std::runtime_error("load_ppm: only maxval 255 supported");
    ImageU8 img(w, h, magic == "P6" ? 3 : 1);
    f.read(reinterpret_cast<char*>(img.px.data()), std::streamsize(img.px.size()));
    if (!f) throw std::runtime_error("load_ppm: truncated file " + path);
    return img;
}

ImageU8 load_image(const std::string& path) {
    auto ends_with = [&](const char* suf) {
        const size_t n = std::strlen(suf);
        return path.size() >= n && path.compare(path.size() - n, n, suf) == 0;
    };
    if (ends_with(".png")) return load_png(path);
    if (ends_with(".ppm") || ends_with(".pgm")) return load_ppm(path);
    throw std::runtime_error("load_image: unsupported extension: " + path);
}

ImageU8 tensor_to_u8(const Tensor& chw) {
    if (chw.ndim() != 3) throw std::invalid_argument("tensor_to_u8: need CHW");
    const int c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
    ImageU8 img(w, h, c);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                const double v = chw[(int64_t(ch) * h + y) * w + x];
                const double t = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
                img.at(x, y, ch) = uint8_t(std::lround(t * 255.0));
            }
    return img;
}

Tensor u8_to_tensor(const ImageU8& img) {
    Tensor t({img.c, img.h, img.w});
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < img.c; ++ch)
                t[(int64_t(ch) * img.h + y) * img.w + x] = double(img.at(x, y, ch)) / 127.5 - 1.0;
    return t;
}

ImageU8 make_grid(const std::vector<Tensor>& images) {
    if (images.empty()) throw std::invalid_argument("make_grid: no images");
    const int c = images[0].dim(0), h = images[0].dim(1), w = images[0].dim(2);
    const int n = int(images.size());
    const int cols = int(std::ceil(std::sqrt(double(n))));
    const int rows = (n + cols - 1) / cols;
    const int pad = 2;
    ImageU8 grid(cols * w + (cols + 1) * pad, rows * h + (rows + 1) * pad, c, 32);
    for (int i = 0; i < n; ++i) {
        const ImageU8 tile = tensor_to_u8(images[size_t(i)]);
        const int gx = (i % cols) * (w + pad) + pad;
        const int gy = (i / cols) * (h + pad) + pad;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < c; ++ch) grid.at(gx + x, gy + y, ch) = tile.at(x, y, ch);
    }
    return grid;
}

void fill_rect(ImageU8& img, int x0, int y0, int x1, int y1, Rgb col) {
    x0 = std::max(0, x0);
    y0 = std::max(0, y0);
    x1 = std::min(img.w - 1, x1);
    y1 = std::min(img.h - 1, y1);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            img.at(x, y, 0) = col.r;
            if (img.c == 3) {
                img.at(x, y, 1) = col.g;
                img.at(x, y, 2) = col.b;
            }
        }
}

void draw_line(ImageU8& img, double x0, double y0, double x1, double y1, Rgb col) {
    const double dx = x1 - x0, dy = y1 - y0;
    const int steps = std::max(1, int(std::ceil(std::max(std::abs(dx), std::abs(dy)))));
    for (int i = 0; i <= steps; ++i) {
        const double t = double(i) / steps;
        const int x = int(std::lround(x0 + t * dx));
        const int y = int(std::lround(y0 + t * dy));
        if (x < 0 || y < 0 || x >= img.w || y >= img.h) continue;
        img.at(x, y, 0) = col.r;
        if (img.c == 3) {
            img.at(x, y, 1) = col.g;
            img.at(x, y, 2) = col.b;
        }
    }
}

namespace {

// 3x5 glyphs, row-major bits
const uint16_t kGlyphs[13][5] = {
    {0b111, 0b101, 0b101, 0b101, 0b111}, // 0
    {0b010, 0b110, 0b010, 0b010, 0b111}, // 1
    {0b111, 0b001, 0b111, 0b100, 0b111}, // 2
    {0b111, 0b001, 0b111, 0b001, 0b111}, // 3
    {0b101, 0b101, 0b111, 0b001, 0b001}, // 4
    {0b111, 0b100, 0b111, 0b001, 0b111}, // 5
    {0b111, 0b100, 0b111, 0b101, 0b111}, // 6
    {0b111, 0b001, 0b010, 0b010, 0b010}, // 7
    {0b111, 0b101, 0b111, 0b101, 0b111}, // 8
    {0b111, 0b101, 0b111, 0b001, 0b111}, // 9
    {0b000, 0b000, 0b000, 0b000, 0b010}, // .
    {0b000, 0b000, 0b111, 0b000, 0b000}, // -
    {0b011, 0b100, 0b110, 0b100, 0b011}, // e
};

int glyph_index(char ch) {
    if (ch >= '0' && ch <= '9') return ch - '0';
    if (ch == '.') return 10;
    if (ch == '-') return 11;
    if (ch == 'e' || ch == 'E') return 12;
    return -1;
}

} // namespace

void draw_text(ImageU8& img, int x, int y, const std::string& text, Rgb col) {
    const int scale = 2;
    int cx = x;
    for (char ch : text) {
        const int gi = glyph_index(ch);
        if (gi >= 0) {
            for (int r = 0; r < 5; ++r)
                for (int c = 0; c < 3; ++c)
                    if (kGlyphs[gi][r] & (1u << (2 - c)))
                        fill_rect(img, cx + c * scale, y + r * scale, cx + c * scale + scale - 1,
                                  y + r * scale + scale - 1, col);
        }
        cx += 4 * scale;
    }
}

} // namespace apt
