#include "fbseg/image_io.hpp"

#include <opencv2/imgcodecs.hpp>

#include "fbseg/common.hpp"

namespace fbseg {

GrayImage read_gray(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw DataError("cannot read image: " + path);
  GrayImage img;
  img.height = m.rows;
  img.width = m.cols;
  img.pixels.resize(static_cast<size_t>(m.rows) * m.cols);
  for (int h = 0; h < m.rows; ++h)
    for (int w = 0; w < m.cols; ++w) img.at(h, w) = m.at<std::uint8_t>(h, w);
  return img;
}

void write_gray(const std::string& path, const GrayImage& img) {
  cv::Mat m(img.height, img.width, CV_8UC1);
  for (int h = 0; h < img.height; ++h)
    for (int w = 0; w < img.width; ++w) m.at<std::uint8_t>(h, w) = img.at(h, w);
  if (!cv::imwrite(path, m)) throw DataError("cannot write image: " + path);
}

}  // namespace fbseg
