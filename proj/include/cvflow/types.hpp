#ifndef CVFLOW_TYPES_HPP_
#define CVFLOW_TYPES_HPP_

#include <cmath>
#include <cstdint>
#include <vector>

namespace cvflow {

struct Vec2f {
    float x = 0.0f;
    float y = 0.0f;
};

inline bool operator==(const Vec2f& a, const Vec2f& b) { return a.x == b.x && a.y == b.y; }

inline float norm(const Vec2f& a) { return std::sqrt(a.x * a.x + a.y * a.y); }

// Per-pixel 2D displacement with a validity mask. Invalid pixels carry no
// vector semantics.
struct FlowField {
    int width = 0;
    int height = 0;
    std::vector<Vec2f> vec;
    std::vector<uint8_t> valid;

    FlowField() = default;
    FlowField(int w, int h, bool all_valid = true)
        : width(w), height(h), vec(static_cast<size_t>(w) * h),
          valid(static_cast<size_t>(w) * h, all_valid ? 1 : 0) {}

    size_t index(int x, int y) const { return static_cast<size_t>(y) * width + x; }
    Vec2f& at(int x, int y) { return vec[index(x, y)]; }
    const Vec2f& at(int x, int y) const { return vec[index(x, y)]; }
    bool is_valid(int x, int y) const { return valid[index(x, y)] != 0; }
    void set(int x, int y, float u, float v, bool ok = true) {
        vec[index(x, y)] = {u, v};
        valid[index(x, y)] = ok ? 1 : 0;
    }
    size_t size() const { return vec.size(); }
};

}  // namespace cvflow

#endif
