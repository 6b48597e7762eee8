#ifndef CVFLOW_IMAGE_HPP_
#define CVFLOW_IMAGE_HPP_

#include <string>
#include <vector>

namespace cvflow {

// Interleaved RGB float image. Raw images live in [0,1]; normalized images
// have zero mean and unit standard deviation over all pixels and channels.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> data;  // size = width*height*3, RGB interleaved

    Image() = default;
    Image(int w, int h, float fill = 0.0f)
        : width(w), height(h), data(static_cast<size_t>(w) * h * 3, fill) {}

    float& at(int x, int y, int c) { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    float at(int x, int y, int c) const { return data[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    size_t pixel_count() const { return static_cast<size_t>(width) * height; }
};

// Rescales to zero mean, unit standard deviation (population, all pixels and
// channels jointly). Throws on constant images ("degenerate image").
Image normalize_image(const Image& raw);

// Block-averages each 3x3 cell; trailing rows/columns that do not fill a
// block are dropped. Throws if the image is smaller than 3x3.
Image downsample3(const Image& img);

// Binary PPM (P6, maxval 255).
Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

// 8-bit PNG; gray and alpha variants are converted to RGB on read.
Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);

// Dispatches on file extension (.png / .ppm).
Image read_image(const std::string& path);
void write_image(const std::string& path, const Image& img);

}  // namespace cvflow

#endif
