#include <doctest.h>

#include <cmath>

#include "apt/cond.hpp"
#include "apt/corpus.hpp"
#include "test_util.hpp"

using namespace apt;

namespace {

Vocabulary make_vocab() {
    Rng rng(5);
    return Vocabulary(default_word_list(), 8, 16, rng);
}

double cosine(const Tensor& a, const Tensor& b) {
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / std::sqrt(na * nb);
}

} // namespace

TEST_CASE("build_pair differs only at the placeholder") {
    Vocabulary v = make_vocab();
    v.register_identifier("V*", "circle");
    const ConditioningPair p = v.build_pair("a photo of {} on a red solid background", "V*",
                                            "circle");
    REQUIRE(p.tokens_star.size() == p.tokens_class.size());
    REQUIRE(p.null_tokens.size() == p.tokens_star.size());
    int diffs = 0;
    for (size_t i = 0; i < p.tokens_star.size(); ++i) {
        if (p.tokens_star[i] != p.tokens_class[i]) {
            ++diffs;
            CHECK(v.token_of(p.tokens_star[i]) == "V*");
            CHECK(v.token_of(p.tokens_class[i]) == "circle");
        }
        CHECK(p.null_tokens[i] == v.null_id());
    }
    CHECK(diffs == 1);
}

TEST_CASE("build_pair placeholder errors") {
    Vocabulary v = make_vocab();
    v.register_identifier("V*", "circle");
    CHECK_THROWS_AS(v.build_pair("a photo of circle", "V*", "circle"), std::invalid_argument);
    CHECK_THROWS_AS(v.build_pair("{} and {}", "V*", "circle"), std::invalid_argument);
    CHECK_THROWS_AS(v.build_pair("a photo of {}", "W*", "circle"), std::invalid_argument);
}

TEST_CASE("register_identifier copies the class embedding") {
    Vocabulary v = make_vocab();
    v.register_identifier("V*", "circle");
    const Tensor& ident = v.identifiers()[0].embedding.value();
    Tensor cls({v.token_dim()});
    const double* src = v.base_table().value().data() + size_t(v.id_of("circle")) * v.token_dim();
    for (int i = 0; i < v.token_dim(); ++i) cls[i] = src[i];
    CHECK(cosine(ident, cls) == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_AS(v.register_identifier("V*", "circle"), std::invalid_argument);
    CHECK_THROWS_AS(v.register_identifier("W*", "notaword"), std::invalid_argument);
    CHECK_THROWS_AS(v.register_identifier("circle", "square"), std::invalid_argument);
}

TEST_CASE("fresh identifier embeds identically to its class") {
    Vocabulary v = make_vocab();
    v.register_identifier("V*", "circle");
    const ConditioningPair p = v.build_pair("a photo of {} on a red solid background", "V*",
                                            "circle");
    const Var star = v.embed(p.tokens_star);
    const Var cls = v.embed(p.tokens_class);
    CHECK(apt::test::tensors_equal(star.value(), cls.value()));
}

TEST_CASE("embed is an order-preserving row lookup") {
    Vocabulary v = make_vocab();
    CHECK(v.embed({}).value().dim(0) == 0);

    const int ida = v.id_of("red");
    const int idb = v.id_of("blue");
    const Var e1 = v.embed({ida, idb});
    const Var e2 = v.embed({idb, ida});
    const int d = v.token_dim();
    // positional rows differ, so compare after subtracting them
    const Tensor& pos = v.positional().value();
    const Tensor& tab = v.base_table().value();
    for (int i = 0; i < d; ++i) {
        CHECK(e1.value()[i] == doctest::Approx(tab[ida * d + i] + pos[i]).epsilon(1e-15));
        CHECK(e1.value()[d + i] == doctest::Approx(tab[idb * d + i] + pos[d + i]).epsilon(1e-15));
        // permutation equivariance of the table part
        CHECK(e1.value()[i] - pos[i] == doctest::Approx(e2.value()[d + i] - pos[d + i]));
        CHECK(e1.value()[d + i] - pos[d + i] == doctest::Approx(e2.value()[i] - pos[i]));
    }
    CHECK_THROWS_AS(v.embed({9999}), std::out_of_range);
    CHECK_THROWS_AS(v.id_of("definitely-not-a-token"), std::invalid_argument);
}

TEST_CASE("gradients reach only identifier embeddings") {
    Vocabulary v = make_vocab();
    v.register_identifier("V*", "circle");
    const ConditioningPair p = v.build_pair("a photo of {} on a red solid background", "V*",
                                            "circle");
    v.identifiers()[0].embedding.node->requires_grad = true;
    // base table stays frozen
    CHECK_FALSE(v.base_table().requires_grad());
    Var emb = v.embed(p.tokens_star);
    CHECK(emb.requires_grad());
    backward(mean_all(square(emb)));
    const Tensor& g = v.identifiers()[0].embedding.grad();
    double norm = 0;
    for (int64_t i = 0; i < g.numel(); ++i) norm += g[i] * g[i];
    CHECK(norm > 0.0);
    // frozen table never allocated a gradient
    CHECK(v.base_table().grad().numel() == 0);
}

TEST_CASE("manifest round-trip and parse errors") {
    apt::test::TempDir dir("manifest");
    const std::string path = dir.file("manifest.txt");
    std::vector<RefRecord> recs = {
        {"img_0000.png", "a photo of {} on a red solid background", "circle"},
        {"img_0001.png", "a photo of {} on a blue and teal gradient background", "square"},
    };
    write_manifest(path, recs);
    const auto back = read_manifest(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].image_path == recs[0].image_path);
    CHECK(back[0].caption_template == recs[0].caption_template);
    CHECK(back[1].class_word == recs[1].class_word);

    std::ofstream bad(dir.file("bad.txt"));
    bad << "only-one-field\n";
    bad.close();
    CHECK_THROWS_WITH_AS(read_manifest(dir.file("bad.txt")),
                         doctest::Contains("line 1"), std::runtime_error);
}

TEST_CASE("fill_template replaces exactly one slot") {
    CHECK(fill_template("a {} b", "x") == "a x b");
    CHECK_THROWS_AS(fill_template("a b", "x"), std::invalid_argument);
    CHECK_THROWS_AS(fill_template("{} {}", "x"), std::invalid_argument);
}
