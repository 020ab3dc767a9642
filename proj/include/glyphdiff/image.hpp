#ifndef GLYPHDIFF_IMAGE_HPP
#define GLYPHDIFF_IMAGE_HPP

#include <string>
#include <utility>
#include <vector>

#include "glyphdiff/tensor.hpp"

namespace glyphdiff::img {

// Binary PPM/PGM round-trips. Images are [3,H,W] (PPM) or [H,W] (PGM) with
// values in [0,1], quantized to 8 bits on save.
void save_ppm(const std::string& path, const Tensor& rgb);
Tensor load_ppm(const std::string& path);
void save_pgm(const std::string& path, const Tensor& gray);
Tensor load_pgm(const std::string& path);

// Morphology on [H,W] maps with entries in {0,1}. Structuring elements are
// (dy,dx) offset lists.
using Element = std::vector<std::pair<int, int>>;
const Element& square2();  // 2x2 block anchored at its top-left pixel
const Element& cross3();   // 3x3 cross centered on the anchor

Tensor erode(const Tensor& m, const Element& se);
Tensor dilate(const Tensor& m, const Element& se);
Tensor opening(const Tensor& m, const Element& se);

// 8-connected labeling. Returns component count; labels get 1..count in
// first-encounter scan order, 0 for background.
int connected_components(const Tensor& m, std::vector<int>& labels);

// Mean-pool to the target grid (exact when sizes divide), then threshold.
Tensor area_downsample(const Tensor& m, int oh, int ow);
Tensor binarize(const Tensor& m, Scalar threshold);

}  // namespace glyphdiff::img

#endif  // GLYPHDIFF_IMAGE_HPP
