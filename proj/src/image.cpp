#include "cvflow/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace cvflow {

Image normalize_image(const Image& raw) {
    if (raw.width < 1 || raw.height < 1) throw std::invalid_argument("normalize_image: empty image");
    const size_t n = raw.data.size();
    double sum = 0.0;
    for (float v : raw.data) sum += v;
    const double mean = sum / n;
    double var = 0.0;
    for (float v : raw.data) {
        double d = v - mean;
        var += d * d;
    }
    var /= n;
    if (var < 1e-24) throw std::runtime_error("normalize_image: degenerate image (zero variance)");
    const double inv_std = 1.0 / std::sqrt(var);
    Image out(raw.width, raw.height);
    for (size_t i = 0; i < n; ++i) out.data[i] = static_cast<float>((raw.data[i] - mean) * inv_std);
    return out;
}

Image downsample3(const Image& img) {
    if (img.width < 3 || img.height < 3)
        throw std::invalid_argument("downsample3: image smaller than 3x3");
    const int ow = img.width / 3;
    const int oh = img.height / 3;
    Image out(ow, oh);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            for (int c = 0; c < 3; ++c) {
                double acc = 0.0;
                for (int dy = 0; dy < 3; ++dy)
                    for (int dx = 0; dx < 3; ++dx) acc += img.at(3 * x + dx, 3 * y + dy, c);
                out.at(x, y, c) = static_cast<float>(acc / 9.0);
            }
        }
    }
    return out;
}

Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw std::runtime_error("read_ppm: not a binary PPM: " + path);
    auto next_int = [&]() {
        // skip whitespace and # comments
        int c = f.get();
        while (c == '#' || std::isspace(c)) {
            if (c == '#') {
                while (c != '\n' && c != EOF) c = f.get();
            }
            c = f.get();
        }
        f.unget();
        long v = -1;
        f >> v;
        return v;
    };
    long w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0) throw std::runtime_error("read_ppm: bad dimensions in " + path);
    if (maxval != 255) throw std::runtime_error("read_ppm: only maxval 255 supported: " + path);
    f.get();  // single whitespace after header
    std::vector<unsigned char> buf(static_cast<size_t>(w) * h * 3);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("read_ppm: truncated payload in " + path);
    Image img(static_cast<int>(w), static_cast<int>(h));
    for (size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0f;
    return img;
}

void write_ppm(const std::string& path, const Image& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_ppm: cannot open " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> buf(img.data.size());
    for (size_t i = 0; i < buf.size(); ++i) {
        float v = std::clamp(img.data[i], 0.0f, 1.0f);
        buf[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("write_ppm: write failed for " + path);
}

static bool has_suffix(const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

Image read_image(const std::string& path) {
    if (has_suffix(path, ".png") || has_suffix(path, ".PNG")) return read_png(path);
    if (has_suffix(path, ".ppm") || has_suffix(path, ".PPM")) return read_ppm(path);
    throw std::runtime_error("read_image: unsupported extension (want .png or .ppm): " + path);
}

void write_image(const std::string& path, const Image& img) {
    if (has_suffix(path, ".png") || has_suffix(path, ".PNG")) {
        write_png(path, img);
        return;
    }
    if (has_suffix(path, ".ppm") || has_suffix(path, ".PPM")) {
        write_ppm(path, img);
        return;
    }
    throw std::runtime_error("write_image: unsupported extension (want .png or .ppm): " + path);
}

}  // namespace cvflow
