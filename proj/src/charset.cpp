#include "glyphdiff/charset.hpp"

#include <stdexcept>

namespace glyphdiff::charset {

int char_to_index(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'z') return 10 + (c - 'a');
    if (c >= 'A' && c <= 'Z') return 36 + (c - 'A');
    throw std::invalid_argument(std::string("char_to_index: unsupported character '") + c + "'");
}

char index_to_char(int idx) {
    if (idx >= 0 && idx <= 9) return static_cast<char>('0' + idx);
    if (idx >= 10 && idx <= 35) return static_cast<char>('a' + (idx - 10));
    if (idx >= 36 && idx <= 61) return static_cast<char>('A' + (idx - 36));
    throw std::invalid_argument("index_to_char: index " + std::to_string(idx) +
                                " is not a glyph index");
}

TextLabel encode_text(const std::string& text) {
    if (text.size() > static_cast<size_t>(kMaxLen)) {
        throw std::invalid_argument("encode_text: word '" + text + "' exceeds " +
                                    std::to_string(kMaxLen) + " characters");
    }
    TextLabel label;
    label.text = text;
    label.length = static_cast<int>(text.size());
    label.indices.assign(kMaxLen, kPadIndex);
    for (size_t i = 0; i < text.size(); ++i) {
        label.indices[i] = char_to_index(text[i]);
    }
    return label;
}

std::string decode_indices(const std::vector<int>& indices) {
    std::string out;
    for (int idx : indices) {
        if (idx == kPadIndex) continue;
        out.push_back(index_to_char(idx));  // throws on invalid index
    }
    return out;
}

}  // namespace glyphdiff::charset
