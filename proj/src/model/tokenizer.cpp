#include "kepil/model/tokenizer.hpp"

#include <algorithm>
#include <cctype>

#include "kepil/errors.hpp"
#include "kepil/knowledge/text.hpp"

namespace kepil::model {

namespace {
const std::vector<std::string> kSpecials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
}

Tokenizer::Tokenizer() {
    for (const auto& s : kSpecials) add(s);
}

Tokenizer::Tokenizer(const std::vector<std::string>& vocab) {
    if (vocab.size() < kSpecials.size() || !std::equal(kSpecials.begin(), kSpecials.end(), vocab.begin()))
        throw ValidationError("tokenizer vocabulary must start with [PAD] [UNK] [CLS] [SEP]");
    for (const auto& t : vocab) {
        if (index_.count(t)) throw ValidationError("duplicate token in vocabulary: " + t);
        add(t);
    }
}

void Tokenizer::add(const std::string& token) {
    if (index_.count(token)) return;
    index_[token] = vocab_.size();
    vocab_.push_back(token);
}

std::vector<std::string> Tokenizer::split(const std::string& text) {
    std::vector<std::string> out;
    for (auto& t : knowledge::tokenize(knowledge::normalize_text(text))) {
        // specials are matched case-insensitively but stored upper case
        if (t.text.size() > 2 && t.text.front() == '[' && t.text.back() == ']') {
            std::string up = t.text;
            for (char& c : up) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            out.push_back(up);
        } else {
            out.push_back(std::move(t.text));
        }
    }
    return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& texts) {
    Tokenizer tok;
    for (const auto& text : texts)
        for (const auto& t : split(text)) tok.add(t);
    return tok;
}

std::size_t Tokenizer::id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> Tokenizer::encode(const std::string& text, std::size_t max_tokens) const {
    if (max_tokens == 0) throw DomainError("encode: max_tokens must be positive");
    std::vector<std::size_t> ids{kCls};
    for (const auto& t : split(text)) {
        if (ids.size() >= max_tokens) break;
        ids.push_back(id(t));
    }
    return ids;
}

} // namespace kepil::model
