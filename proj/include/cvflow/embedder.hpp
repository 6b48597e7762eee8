#ifndef CVFLOW_EMBEDDER_HPP_
#define CVFLOW_EMBEDDER_HPP_

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cvflow/image.hpp"
#include "cvflow/types.hpp"

namespace cvflow {

// Fixed architecture: four 3x3 valid convolutions, channel plan
// 3 -> 64 -> 64 -> 64 -> dim, ReLU after the first three layers, L2
// normalization after the last. Receptive field 9x9.
constexpr int kPatchSize = 9;
constexpr int kNetPad = 4;      // (9-1)/2, applied as replicate padding per side
constexpr int kHiddenChannels = 64;
constexpr int kNumLayers = 4;

// Dense (channels, height, width) tensor, double precision.
struct Tensor3 {
    int ch = 0, h = 0, w = 0;
    std::vector<double> v;

    Tensor3() = default;
    Tensor3(int c, int hh, int ww) { resize(c, hh, ww); }
    void resize(int c, int hh, int ww) {
        ch = c;
        h = hh;
        w = ww;
        v.assign(static_cast<size_t>(c) * hh * ww, 0.0);
    }
    double& at(int c, int y, int x) { return v[(static_cast<size_t>(c) * h + y) * w + x]; }
    double at(int c, int y, int x) const { return v[(static_cast<size_t>(c) * h + y) * w + x]; }
    double* row(int c, int y) { return v.data() + (static_cast<size_t>(c) * h + y) * w; }
    const double* row(int c, int y) const { return v.data() + (static_cast<size_t>(c) * h + y) * w; }
};

struct ConvLayer {
    int out_ch = 0, in_ch = 0;
    std::vector<double> w;  // [out][in][3][3]
    std::vector<double> b;  // [out]

    double& wat(int oc, int ic, int ky, int kx) {
        return w[((static_cast<size_t>(oc) * in_ch + ic) * 3 + ky) * 3 + kx];
    }
    double wat(int oc, int ic, int ky, int kx) const {
        return w[((static_cast<size_t>(oc) * in_ch + ic) * 3 + ky) * 3 + kx];
    }
};

struct NetworkParams {
    int dim = 0;
    std::array<ConvLayer, kNumLayers> layers;
};

NetworkParams init_network(int dim, uint64_t seed);
NetworkParams zeros_like(const NetworkParams& params);
size_t param_count(const NetworkParams& params);

// Binary model file: magic "DCFE", version u32, d u32, then per layer
// (out u32, in u32, weights f32 little-endian row-major, bias f32).
void save_network(const std::string& path, const NetworkParams& params);
NetworkParams load_network(const std::string& path);

// Per-pixel unit-length feature vectors, d floats per pixel.
struct FeatureGrid {
    int width = 0, height = 0, dim = 0;
    std::vector<float> data;

    FeatureGrid() = default;
    FeatureGrid(int w, int h, int d)
        : width(w), height(h), dim(d), data(static_cast<size_t>(w) * h * d, 0.0f) {}
    float* at(int x, int y) { return data.data() + (static_cast<size_t>(y) * width + x) * dim; }
    const float* at(int x, int y) const {
        return data.data() + (static_cast<size_t>(y) * width + x) * dim;
    }
};

// Embedding of a single 9x9x3 patch (no padding).
std::vector<double> embed_patch(const NetworkParams& params, const Tensor3& patch);

// Embeds every pixel in one pass. The image is replicate-padded by 4 px per
// side first, so the grid is pixel-aligned with the input.
FeatureGrid forward_embed(const Image& img, const NetworkParams& params, int threads = 1);

// Triplets are stored with shared anchors: triplet i uses anchors[i/3],
// positives[i/3] and negatives[i]. Patches are 3x9x9 normalized values.
struct TripletBatch {
    std::vector<Tensor3> anchors;
    std::vector<Tensor3> positives;
    std::vector<Tensor3> negatives;
    size_t size() const { return negatives.size(); }
};

double triplet_loss(const TripletBatch& batch, const NetworkParams& params, double margin,
                    int threads = 1);

struct LossAndGrad {
    double loss = 0.0;
    NetworkParams grads;
};
// Mean hinge loss over the batch and its exact analytic gradient. Triplets
// whose hinge is inactive contribute zero to both.
LossAndGrad triplet_loss_and_grad(const TripletBatch& batch, const NetworkParams& params,
                                  double margin, int threads = 1);

// Classic momentum: v <- momentum*v - lr*g; theta <- theta + v.
void sgd_step(NetworkParams& params, const NetworkParams& grads, NetworkParams& velocity,
              double lr, double momentum);

// Samples count/3 anchors (count must be a positive multiple of 3); each
// anchor gets its ground-truth positive and 3 negatives whose centers lie
// 1..5 px from the positive center. All patches fully inside image bounds.
TripletBatch sample_triplets(const Image& img1, const Image& img2, const FlowField& gt_flow,
                             int count, uint64_t seed);

struct TrainStage {
    int iterations = 0;
    double learning_rate = 0.0;
};

struct TrainSchedule {
    double momentum = 0.9;
    std::vector<TrainStage> stages = {{10000, 1e-1}, {10000, 1e-2}, {20000, 1e-3}};
    int batch_size = 30000;
    double margin = 0.2;
};

// One training sample: a working-resolution normalized image pair plus its
// working-resolution ground-truth flow.
struct TrainSample {
    Image img1;
    Image img2;
    FlowField gt;
};

// Runs the schedule with a sampling thread feeding a bounded batch queue.
// Deterministic for a fixed seed and thread count.
NetworkParams train(const std::vector<TrainSample>& dataset, const TrainSchedule& schedule,
                    int dim, uint64_t seed, int threads = 1, std::ostream* log = nullptr);

}  // namespace cvflow

#endif
