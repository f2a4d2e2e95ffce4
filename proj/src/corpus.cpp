#include "apt/corpus.hpp"

#include <array>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "apt/image.hpp"

namespace apt {

namespace {

struct NamedColor {
    const char* name;
    double r, g, b;
};

const std::array<NamedColor, 7> kPalette = {{
    {"red", 0.9, -0.7, -0.7},
    {"green", -0.7, 0.85, -0.7},
    {"blue", -0.7, -0.7, 0.9},
    {"yellow", 0.9, 0.85, -0.7},
    {"purple", 0.6, -0.7, 0.9},
    {"orange", 0.9, 0.2, -0.7},
    {"teal", -0.7, 0.8, 0.8},
}};

const std::array<const char*, 3> kStyles = {"solid", "gradient", "checker"};

struct Scene {
    int bg_color_a;
    int bg_color_b;
    int style; // 0 solid, 1 gradient, 2 checker
    int shape; // 0 circle, 1 square, 2 triangle
    int shape_color;
    double cx, cy, radius;
    int grad_axis; // gradient direction
};

void paint(Tensor& img, const Scene& s) {
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    const NamedColor& ca = kPalette[size_t(s.bg_color_a)];
    const NamedColor& cb = kPalette[size_t(s.bg_color_b)];
    const NamedColor& sc = kPalette[size_t(s.shape_color)];
    const double bg_dim = 0.45; // keep backgrounds darker than subjects

    auto put = [&](int x, int y, double r, double g, double b) {
        if (c == 1) {
            img[int64_t(y) * w + x] = 0.299 * r + 0.587 * g + 0.114 * b;
        } else {
            img[(0 * int64_t(h) + y) * w + x] = r;
            img[(1 * int64_t(h) + y) * w + x] = g;
            img[(2 * int64_t(h) + y) * w + x] = b;
        }
    };

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double r, g, b;
            if (s.style == 0) {
                r = ca.r;
                g = ca.g;
                b = ca.b;
            } else if (s.style == 1) {
                const double t = s.grad_axis == 0 ? double(x) / (w - 1) : double(y) / (h - 1);
                r = ca.r + t * (cb.r - ca.r);
                g = ca.g + t * (cb.g - ca.g);
                b = ca.b + t * (cb.b - ca.b);
            } else {
                const bool odd = ((x / 4) + (y / 4)) % 2 != 0;
                const NamedColor& cc = odd ? cb : ca;
                r = cc.r;
                g = cc.g;
                b = cc.b;
            }
            put(x, y, r * bg_dim, g * bg_dim, b * bg_dim);
        }
    }

    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double dx = x - s.cx, dy = y - s.cy;
            bool inside = false;
            if (s.shape == 0) {
                inside = dx * dx + dy * dy <= s.radius * s.radius;
            } else if (s.shape == 1) {
                inside = std::abs(dx) <= s.radius && std::abs(dy) <= s.radius;
            } else {
                // upward triangle: apex at cy - r, base at cy + r
                const double yy = dy + s.radius;
                inside = yy >= 0.0 && yy <= 2.0 * s.radius && std::abs(dx) <= yy * 0.5;
            }
            if (inside) put(x, y, sc.r, sc.g, sc.b);
        }
    }
}

std::string make_template(const Scene& s) {
    const NamedColor& ca = kPalette[size_t(s.bg_color_a)];
    const NamedColor& cb = kPalette[size_t(s.bg_color_b)];
    if (s.style == 0) return std::string("a photo of {} on a ") + ca.name + " solid background";
    if (s.style == 1)
        return std::string("a photo of {} on a ") + ca.name + " and " + cb.name +
               " gradient background";
    return std::string("a photo of {} on a ") + ca.name + " and " + cb.name +
           " checker background";
}

Scene random_scene(Rng& rng, int image_size) {
    Scene s;
    s.bg_color_a = int(rng.uniform_int(kPalette.size()));
    s.bg_color_b = int(rng.uniform_int(kPalette.size()));
    s.style = int(rng.uniform_int(kStyles.size()));
    s.shape = int(rng.uniform_int(3));
    do {
        s.shape_color = int(rng.uniform_int(kPalette.size()));
    } while (s.shape_color == s.bg_color_a || s.shape_color == s.bg_color_b);
    const double margin = image_size * 0.3;
    s.cx = margin + rng.uniform() * (image_size - 2 * margin);
    s.cy = margin + rng.uniform() * (image_size - 2 * margin);
    s.radius = image_size * (0.15 + 0.12 * rng.uniform());
    s.grad_axis = int(rng.uniform_int(2));
    return s;
}

} // namespace

std::vector<std::string> default_word_list() {
    std::vector<std::string> words = {"[null]", "a", "photo", "of", "on", "and",
                                      "solid",  "gradient", "checker", "background"};
    for (const auto& c : kPalette) words.push_back(c.name);
    for (const auto& s : shape_class_words()) words.push_back(s);
    return words;
}

const std::vector<std::string>& shape_class_words() {
    static const std::vector<std::string> kShapes = {"circle", "square", "triangle"};
    return kShapes;
}

std::vector<CorpusItem> generate_corpus(const CorpusSpec& spec) {
    if (spec.count < 1) throw std::invalid_argument("generate_corpus: count must be >= 1");
    if (spec.channels != 1 && spec.channels != 3)
        throw std::invalid_argument("generate_corpus: channels must be 1 or 3");
    Rng rng(spec.seed);
    std::vector<CorpusItem> items;
    items.reserve(size_t(spec.count));
    for (int i = 0; i < spec.count; ++i) {
        const Scene s = random_scene(rng, spec.image_size);
        CorpusItem item;
        item.image = Tensor({spec.channels, spec.image_size, spec.image_size});
        paint(item.image, s);
        item.caption_template = make_template(s);
        item.class_word = shape_class_words()[size_t(s.shape)];
        items.push_back(std::move(item));
    }
    return items;
}

std::vector<CorpusItem> generate_references(int n, const std::string& class_word, int image_size,
                                            int channels, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("generate_references: n must be >= 1");
    int shape = -1;
    for (int i = 0; i < int(shape_class_words().size()); ++i)
        if (shape_class_words()[size_t(i)] == class_word) shape = i;
    if (shape < 0)
        throw std::invalid_argument("generate_references: unknown class word '" + class_word + "'");
    Rng rng(seed);
    // the subject is fixed across views; backgrounds vary
    const int subject_color = int(rng.uniform_int(kPalette.size()));
    const double radius = image_size * 0.24;
    std::vector<CorpusItem> items;
    for (int i = 0; i < n; ++i) {
        Scene s = random_scene(rng, image_size);
        s.shape = shape;
        s.shape_color = subject_color;
        while (s.bg_color_a == subject_color || s.bg_color_b == subject_color) {
            s.bg_color_a = int(rng.uniform_int(kPalette.size()));
            s.bg_color_b = int(rng.uniform_int(kPalette.size()));
        }
        s.radius = radius;
        s.cx = image_size * 0.5 + (rng.uniform() - 0.5) * image_size * 0.12;
        s.cy = image_size * 0.5 + (rng.uniform() - 0.5) * image_size * 0.12;
        CorpusItem item;
        item.image = Tensor({channels, image_size, image_size});
        paint(item.image, s);
        item.caption_template = make_template(s);
        item.class_word = class_word;
        items.push_back(std::move(item));
    }
    return items;
}

std::string write_corpus(const std::vector<CorpusItem>& items, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<RefRecord> records;
    for (size_t i = 0; i < items.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04zu.png", i);
        const std::string path = (fs::path(dir) / name).string();
        save_png(path, tensor_to_u8(items[i].image));
        records.push_back({path, items[i].caption_template, items[i].class_word});
    }
    const std::string manifest = (fs::path(dir) / "manifest.txt").string();
    write_manifest(manifest, records);
    return manifest;
}

std::vector<CorpusItem> load_corpus(const std::string& manifest_path) {
    std::vector<CorpusItem> items;
    for (const auto& rec : read_manifest(manifest_path)) {
        CorpusItem item;
        item.image = u8_to_tensor(load_image(rec.image_path));
        item.caption_template = rec.caption_template;
        item.class_word = rec.class_word;
        items.push_back(std::move(item));
    }
    return items;
}

} // namespace apt
