#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace kepil::knowledge {

// Lowercases ASCII letters, collapses whitespace runs to one space and trims.
std::string normalize_text(std::string_view text);

std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
std::vector<std::string> split_whitespace(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

bool is_punct(char c);
bool is_sentence_end(char c);

// Word or punctuation token with character offsets into the source string.
struct Token {
    std::string text;
    std::size_t begin = 0;
    std::size_t end = 0;  // one past the last character
    bool punct = false;
};

// Words are maximal runs of non-space, non-punctuation characters; each
// punctuation character is its own token. Bracketed specials like "[SEP]"
// stay whole.
std::vector<Token> tokenize(std::string_view text);

} // namespace kepil::knowledge
