#ifndef GLYPHDIFF_CHARSET_HPP
#define GLYPHDIFF_CHARSET_HPP

#include <string>
#include <vector>

namespace glyphdiff::charset {

// 62 case-sensitive alphanumerics ordered digits, lowercase, uppercase.
// One trailing pad class fills fixed-length label sequences.
inline constexpr int kNumGlyphs = 62;
inline constexpr int kPadIndex = 62;
inline constexpr int kVocabSize = 63;
inline constexpr int kMaxLen = 12;

struct TextLabel {
    std::string text;
    std::vector<int> indices;  // length kMaxLen, pad-filled past `length`
    int length = 0;
};

// Index of a charset symbol. Throws std::invalid_argument for characters
// outside the alphabet, with the offending character in the message.
int char_to_index(char c);

// Inverse of char_to_index. Throws std::invalid_argument for pad or
// out-of-range indices.
char index_to_char(int idx);

// Pads with kPadIndex to kMaxLen. The empty word is valid (all pad).
TextLabel encode_text(const std::string& text);

// Drops pad positions; throws std::invalid_argument on invalid indices.
std::string decode_indices(const std::vector<int>& indices);

}  // namespace glyphdiff::charset

#endif  // GLYPHDIFF_CHARSET_HPP
