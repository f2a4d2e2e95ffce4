#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "apt/autodiff.hpp"
#include "apt/rng.hpp"

namespace apt {

// Paired conditionings for one caption: identifier sequence (c*), class
// sequence (c), and the unconditional sequence used for guidance.
struct ConditioningPair {
    std::vector<int> tokens_star;
    std::vector<int> tokens_class;
    std::vector<int> null_tokens;
};

struct IdentifierSlot {
    std::string token;
    int class_id = -1;
    Var embedding; // trainable (D)
};

// Token vocabulary with a learned embedding table plus positional rows.
// Base rows and positions are ordinary weights (trained during pretraining,
// frozen during personalization); identifier embeddings are separate
// trainable rows initialized as copies of their class token.
class Vocabulary {
public:
    Vocabulary() = default;
    Vocabulary(std::vector<std::string> words, int token_dim, int max_len, Rng& rng);

    // rebuild from serialized parts (checkpoint loading)
    static Vocabulary from_parts(std::vector<std::string> words, Tensor embeddings,
                                 Tensor positional, std::vector<IdentifierSlot> identifiers);

    int base_size() const { return int(tokens_.size()); }
    int size() const { return base_size() + int(identifiers_.size()); }
    int token_dim() const { return token_dim_; }
    int max_len() const { return max_len_; }

    bool has(const std::string& token) const;
    int id_of(const std::string& token) const; // throws on unknown token
    const std::string& token_of(int id) const;
    int null_id() const { return null_id_; }

    void register_identifier(const std::string& identifier, const std::string& class_word);
    const std::vector<IdentifierSlot>& identifiers() const { return identifiers_; }
    std::vector<IdentifierSlot>& identifiers() { return identifiers_; }

    // whitespace tokenization; every word must be in the vocabulary
    std::vector<int> tokenize(const std::string& caption) const;

    // Row-wise lookup plus positional rows -> (S, D). The identifier
    // embedding stands in for the text-encoder adapter, so it toggles with
    // the same dial: rows blend class + identifier_scale * (ident - class).
    Var embed(const std::vector<int>& ids, double identifier_scale = 1.0) const;

    ConditioningPair build_pair(const std::string& caption_template,
                                const std::string& identifier,
                                const std::string& class_word) const;

    Var& base_table() { return embeddings_; }
    const Var& base_table() const { return embeddings_; }
    Var& positional() { return positional_; }
    const Var& positional() const { return positional_; }

    const std::vector<std::string>& tokens() const { return tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    Var embeddings_; // (V, D)
    Var positional_; // (max_len, D)
    std::vector<IdentifierSlot> identifiers_;
    int token_dim_ = 0;
    int max_len_ = 0;
    int null_id_ = -1;
};

// replace the single "{}" placeholder; throws unless exactly one is present
std::string fill_template(const std::string& caption_template, const std::string& word);

// caption manifest: one tab-separated record per reference image
struct RefRecord {
    std::string image_path;
    std::string caption_template;
    std::string class_word;
};

void write_manifest(const std::string& path, const std::vector<RefRecord>& records);
std::vector<RefRecord> read_manifest(const std::string& path);

} // namespace apt
