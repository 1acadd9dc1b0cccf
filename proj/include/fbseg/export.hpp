#pragma once

// Grayscale export of attention rows and predicted label maps.

#include <algorithm>
#include <string>

#include "fbseg/attention.hpp"
#include "fbseg/image_io.hpp"
#include "fbseg/tensor.hpp"

namespace fbseg {

// Writes the attention row of one query pixel as an HxW grayscale image,
// linearly mapped [0, max-weight] -> [0, 255].
template <typename T>
void export_attention_row(const AttentionMapView<T>& view, int batch, int query_index,
                          const std::string& path) {
  const std::int64_t hw = static_cast<std::int64_t>(view.h) * view.w;
  if (batch < 0 || batch >= static_cast<int>(view.per_batch.size()))
    throw UsageError("attention export: batch index out of range");
  if (query_index < 0 || query_index >= hw)
    throw UsageError("attention export: query index " + std::to_string(query_index) +
                     " out of range for " + std::to_string(hw) + " positions");
  const T* row = view.per_batch[batch].data() + static_cast<size_t>(query_index) * hw;
  T mx = T(0);
  for (std::int64_t i = 0; i < hw; ++i) mx = std::max(mx, row[i]);
  GrayImage img;
  img.height = view.h;
  img.width = view.w;
  img.pixels.resize(hw);
  for (std::int64_t i = 0; i < hw; ++i)
    img.pixels[i] = mx > T(0) ? static_cast<std::uint8_t>(std::clamp(
                                    static_cast<double>(row[i] / mx) * 255.0, 0.0, 255.0))
                              : 0;
  write_gray(path, img);
}

// Argmax label map, written with raw class indices (same encoding the label
// files use).
template <typename T>
void export_prediction(const Tensor<T>& logits, int batch, const std::string& path) {
  const Shape& s = logits.shape();
  GrayImage img;
  img.height = s[2];
  img.width = s[3];
  img.pixels.resize(static_cast<size_t>(s[2]) * s[3]);
  for (int h = 0; h < s[2]; ++h)
    for (int w = 0; w < s[3]; ++w) {
      int pred = 0;
      T best = logits.at(batch, 0, h, w);
      for (int c = 1; c < s[1]; ++c)
        if (logits.at(batch, c, h, w) > best) {
          best = logits.at(batch, c, h, w);
          pred = c;
        }
      img.at(h, w) = static_cast<std::uint8_t>(pred);
    }
  write_gray(path, img);
}

}  // namespace fbseg
