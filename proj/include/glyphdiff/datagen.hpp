#ifndef GLYPHDIFF_DATAGEN_HPP
#define GLYPHDIFF_DATAGEN_HPP

#include <map>
#include <string>
#include <vector>

#include "glyphdiff/charset.hpp"
#include "glyphdiff/tensor.hpp"

namespace glyphdiff::datagen {

struct TextImageSample {
    Tensor image;         // [3,H,W], values in [0,1]
    Tensor mask;          // [H,W], binary
    Tensor masked_image;  // [3,H,W], image zeroed inside the mask
    charset::TextLabel label;
    Tensor seg_maps;      // [L,H,W], binary, all-zero planes for pad positions
    // placement metadata
    int scale = 0;
    int x0 = 0;
    int y0 = 0;
    int bg_kind = 0;  // 0 flat, 1 gradient, 2 low-frequency noise
};

struct SceneConfig {
    int canvas = 64;
    int min_len = 1;
    int max_len = 5;
    Scalar min_contrast = 0.35;  // luminance gap between text and covered background
};

struct Placement {
    int scale = 2;
    int x0 = 0;
    int y0 = 0;
};

struct BackgroundSpec {
    int kind = 0;                    // 0 flat, 1 gradient, 2 low-frequency noise
    Scalar c0[3] = {0.5, 0.5, 0.5};  // flat color / gradient endpoints / noise range
    Scalar c1[3] = {0.5, 0.5, 0.5};
    bool horizontal = false;         // gradient axis
    uint64_t noise_seed = 0;
};

// Horizontal glyph advance in pixels at a given integer scale (2px gap).
int advance(int scale);

Scalar luminance(Scalar r, Scalar g, Scalar b);

Tensor render_background(const BackgroundSpec& bg, int canvas);

// Renders `word` at the placement onto the background, producing the full
// sample with mask and per-position segmentation maps (via the raw-class-map
// augmentation path below). Throws std::invalid_argument when glyphs do not
// fit the canvas at the requested placement.
TextImageSample render_sample(const std::string& word, const BackgroundSpec& bg,
                              const Scalar text_color[3], const Placement& p, int canvas);

// Raw maps keyed by charset index, merging repeated characters, standing in
// for a position-unaware segmentor output.
std::map<int, Tensor> raw_class_maps(const std::string& word, const Placement& p, int canvas);

struct AugmentResult {
    Tensor seg_maps;  // [L,H,W]
    bool usable = false;
    std::string diagnostic;
};

// Opening (2x2 square) -> 8-connected split -> reading-order assignment by
// centroid x (ties by y) -> dilation (3x3 cross, one pass). Marks the sample
// unusable when a class map yields fewer components than character
// occurrences.
AugmentResult augment_seg_maps(const std::map<int, Tensor>& class_maps, const std::string& word,
                               int canvas);

// False iff mask area < 1% of the image or any non-pad seg map < 0.1%.
bool filter_sample(const TextImageSample& sample);

// Replaces the label with a uniformly random word of identical length;
// pixels untouched.
TextImageSample make_editing_pair(const TextImageSample& sample, Rng& rng);

// Deterministic scene synthesis: all randomness derives from (seed, index).
TextImageSample synth_scene(const SceneConfig& cfg, uint64_t seed, uint64_t index);

std::string random_word(Rng& rng, int min_len, int max_len);

// Clean black-on-white strip render (recognizer geometry), any length 0..12.
Tensor render_reference(const std::string& word, int h = 32, int w = 128);

// Directory of PPM/PGM files plus a JSON-lines manifest.
void save_dataset(const std::string& dir, const std::vector<TextImageSample>& samples);
std::vector<TextImageSample> load_dataset(const std::string& dir);

}  // namespace glyphdiff::datagen

#endif  // GLYPHDIFF_DATAGEN_HPP
