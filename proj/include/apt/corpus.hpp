#pragma once

#include <string>
#include <vector>

#include "apt/cond.hpp"
#include "apt/rng.hpp"
#include "apt/tensor.hpp"

namespace apt {

// One captioned training image. Captions keep the subject slot open and
// describe the background, so conditioning words carry scene information.
struct CorpusItem {
    Tensor image; // (C, H, W) in [-1, 1]
    std::string caption_template;
    std::string class_word;
};

struct CorpusSpec {
    int count = 256;
    int image_size = 32;
    int channels = 3;
    uint64_t seed = 7;
};

// word list shared by the corpus generator and the vocabulary
std::vector<std::string> default_word_list();
const std::vector<std::string>& shape_class_words();

// colored shapes (circle/square/triangle) over varied backgrounds
std::vector<CorpusItem> generate_corpus(const CorpusSpec& spec);

// n views of one fixed subject over varied backgrounds, for personalization
std::vector<CorpusItem> generate_references(int n, const std::string& class_word, int image_size,
                                            int channels, uint64_t seed);

// writes img_%04d.png plus a manifest.txt into dir; returns the manifest path
std::string write_corpus(const std::vector<CorpusItem>& items, const std::string& dir);

// reads a manifest and loads the referenced images
std::vector<CorpusItem> load_corpus(const std::string& manifest_path);

} // namespace apt
