#ifndef GLYPHDIFF_FONT5X7_HPP
#define GLYPHDIFF_FONT5X7_HPP

#include <array>
#include <cstddef>
#include <cstdint>

namespace glyphdiff::font {

inline constexpr int kGlyphCols = 5;
inline constexpr int kGlyphRows = 7;

// Row bitmap for a charset glyph index: 7 bytes, low 5 bits used, bit 4 is
// the leftmost pixel. Throws std::invalid_argument for non-glyph indices.
const std::array<uint8_t, 7>& glyph_bitmap(int charset_index);

inline bool glyph_pixel(const std::array<uint8_t, 7>& rows, int y, int x) {
    return (rows[static_cast<size_t>(y)] >> (kGlyphCols - 1 - x)) & 1;
}

}  // namespace glyphdiff::font

#endif  // GLYPHDIFF_FONT5X7_HPP
