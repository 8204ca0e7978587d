#pragma once

#include <map>
#include <string>
#include <vector>

namespace kepil::model {

// Closed-vocabulary word tokenizer: lowercased words and punctuation marks.
// Ids 0..3 are the specials [PAD] [UNK] [CLS] [SEP].
class Tokenizer {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;
    static constexpr std::size_t kCls = 2;
    static constexpr std::size_t kSep = 3;

    Tokenizer();
    explicit Tokenizer(const std::vector<std::string>& vocab);  // must start with the specials

    // Adds every token of the texts in first-seen order.
    static Tokenizer build(const std::vector<std::string>& texts);

    static std::vector<std::string> split(const std::string& text);

    // [CLS] followed by the text's tokens, truncated to max_tokens in total.
    std::vector<std::size_t> encode(const std::string& text, std::size_t max_tokens) const;

    std::size_t id(const std::string& token) const;  // kUnk when unknown
    const std::vector<std::string>& vocab() const { return vocab_; }
    std::size_t size() const { return vocab_.size(); }

    friend bool operator==(const Tokenizer& a, const Tokenizer& b) { return a.vocab_ == b.vocab_; }

private:
    void add(const std::string& token);

    std::vector<std::string> vocab_;
    std::map<std::string, std::size_t> index_;
};

} // namespace kepil::model
