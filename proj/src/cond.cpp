#include "apt/cond.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace apt {

Vocabulary::Vocabulary(std::vector<std::string> words, int token_dim, int max_len, Rng& rng)
    : tokens_(std::move(words)), token_dim_(token_dim), max_len_(max_len) {
    if (tokens_.empty()) throw std::invalid_argument("Vocabulary: empty word list");
    if (token_dim < 1 || max_len < 1)
        throw std::invalid_argument("Vocabulary: token_dim and max_len must be positive");
    for (int i = 0; i < int(tokens_.size()); ++i) {
        if (!index_.emplace(tokens_[size_t(i)], i).second)
            throw std::invalid_argument("Vocabulary: duplicate word '" + tokens_[size_t(i)] + "'");
    }
    auto it = index_.find("[null]");
    if (it == index_.end()) {
        tokens_.insert(tokens_.begin(), "[null]");
        index_.clear();
        for (int i = 0; i < int(tokens_.size()); ++i) index_.emplace(tokens_[size_t(i)], i);
        null_id_ = 0;
    } else {
        null_id_ = it->second;
    }
    embeddings_ = Var(Tensor::randn({base_size(), token_dim_}, rng, 0.3), false);
    positional_ = Var(Tensor::randn({max_len_, token_dim_}, rng, 0.1), false);
}

Vocabulary Vocabulary::from_parts(std::vector<std::string> words, Tensor embeddings,
                                  Tensor positional, std::vector<IdentifierSlot> identifiers) {
    if (embeddings.ndim() != 2 || positional.ndim() != 2 ||
        embeddings.dim(1) != positional.dim(1) || embeddings.dim(0) != int(words.size()))
        throw std::invalid_argument("Vocabulary::from_parts: inconsistent tensor shapes");
    Vocabulary v;
    v.tokens_ = std::move(words);
    v.token_dim_ = embeddings.dim(1);
    v.max_len_ = positional.dim(0);
    for (int i = 0; i < int(v.tokens_.size()); ++i) v.index_.emplace(v.tokens_[size_t(i)], i);
    auto it = v.index_.find("[null]");
    if (it == v.index_.end())
        throw std::invalid_argument("Vocabulary::from_parts: missing [null] token");
    v.null_id_ = it->second;
    v.embeddings_ = Var(std::move(embeddings), false);
    v.positional_ = Var(std::move(positional), false);
    v.identifiers_ = std::move(identifiers);
    return v;
}

bool Vocabulary::has(const std::string& token) const {
    if (index_.count(token)) return true;
    for (const auto& slot : identifiers_)
        if (slot.token == token) return true;
    return false;
}

int Vocabulary::id_of(const std::string& token) const {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    for (int k = 0; k < int(identifiers_.size()); ++k)
        if (identifiers_[size_t(k)].token == token) return base_size() + k;
    throw std::invalid_argument("Vocabulary: unknown token '" + token + "'");
}

const std::string& Vocabulary::token_of(int id) const {
    if (id >= 0 && id < base_size()) return tokens_[size_t(id)];
    const int k = id - base_size();
    if (k >= 0 && k < int(identifiers_.size())) return identifiers_[size_t(k)].token;
    throw std::out_of_range("Vocabulary: id " + std::to_string(id) + " out of range");
}

void Vocabulary::register_identifier(const std::string& identifier, const std::string& class_word) {
    for (const auto& slot : identifiers_)
        if (slot.token == identifier)
            throw std::invalid_argument("Vocabulary: duplicate identifier '" + identifier + "'");
    if (index_.count(identifier))
        throw std::invalid_argument("Vocabulary: identifier '" + identifier +
                                    "' collides with a base token");
    auto it = index_.find(class_word);
    if (it == index_.end())
        throw std::invalid_argument("Vocabulary: unknown class word '" + class_word + "'");
    IdentifierSlot slot;
    slot.token = identifier;
    slot.class_id = it->second;
    Tensor emb({token_dim_});
    const double* src = embeddings_.value().data() + size_t(it->second) * token_dim_;
    for (int i = 0; i < token_dim_; ++i) emb[i] = src[i];
    slot.embedding = Var(std::move(emb), true);
    identifiers_.push_back(std::move(slot));
}

std::vector<int> Vocabulary::tokenize(const std::string& caption) const {
    std::vector<int> ids;
    std::istringstream ss(caption);
    std::string word;
    while (ss >> word) ids.push_back(id_of(word));
    return ids;
}

Var Vocabulary::embed(const std::vector<int>& ids, double identifier_scale) const {
    if (ids.empty()) return Var(Tensor({0, token_dim_}), false);
    if (int(ids.size()) > max_len_)
        throw std::invalid_argument("Vocabulary: sequence length " + std::to_string(ids.size()) +
                                    " exceeds max_len " + std::to_string(max_len_));
    std::vector<Var> rows;
    rows.reserve(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        Var tok;
        if (id >= 0 && id < base_size()) {
            tok = take_row(embeddings_, id);
        } else {
            const int k = id - base_size();
            if (k < 0 || k >= int(identifiers_.size()))
                throw std::out_of_range("Vocabulary: token id " + std::to_string(id) +
                                        " out of range");
            const IdentifierSlot& slot = identifiers_[size_t(k)];
            if (identifier_scale == 1.0) {
                tok = slot.embedding;
            } else if (identifier_scale == 0.0) {
                tok = take_row(embeddings_, slot.class_id);
            } else {
                Var cls = take_row(embeddings_, slot.class_id);
                tok = add(scale(cls, 1.0 - identifier_scale),
                          scale(slot.embedding, identifier_scale));
            }
        }
        rows.push_back(add(tok, take_row(positional_, int(i))));
    }
    return stack_rows(rows);
}

std::string fill_template(const std::string& caption_template, const std::string& word) {
    const std::string ph = "{}";
    const size_t first = caption_template.find(ph);
    if (first == std::string::npos)
        throw std::invalid_argument("caption template is missing the '{}' placeholder: '" +
                                    caption_template + "'");
    if (caption_template.find(ph, first + ph.size()) != std::string::npos)
        throw std::invalid_argument("caption template must contain exactly one '{}' placeholder");
    std::string out = caption_template;
    out.replace(first, ph.size(), word);
    return out;
}

ConditioningPair Vocabulary::build_pair(const std::string& caption_template,
                                        const std::string& identifier,
                                        const std::string& class_word) const {
    ConditioningPair pair;
    pair.tokens_star = tokenize(fill_template(caption_template, identifier));
    pair.tokens_class = tokenize(fill_template(caption_template, class_word));
    pair.null_tokens.assign(pair.tokens_star.size(), null_id_);
    return pair;
}

void write_manifest(const std::string& path, const std::vector<RefRecord>& records) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_manifest: cannot open " + path);
    for (const auto& r : records)
        f << r.image_path << "\t" << r.caption_template << "\t" << r.class_word << "\n";
}

std::vector<RefRecord> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("read_manifest: cannot open " + path);
    std::vector<RefRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const size_t p1 = line.find('\t');
        const size_t p2 = p1 == std::string::npos ? std::string::npos : line.find('\t', p1 + 1);
        if (p1 == std::string::npos || p2 == std::string::npos)
            throw std::runtime_error("read_manifest: line " + std::to_string(lineno) +
                                     ": expected 3 tab-separated fields");
        out.push_back({line.substr(0, p1), line.substr(p1 + 1, p2 - p1 - 1), line.substr(p2 + 1)});
    }
    return out;
}

} // namespace apt
