#include "cvflow/embedder.hpp"

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <random>
#include <stdexcept>
#include <thread>

#include "cvflow/parallel.hpp"

namespace cvflow {

namespace {

constexpr double kNormEps = 1e-8;  // below this, the normalization Jacobian is treated as zero

void check_layer_plan(const NetworkParams& params) {
    const int plan_in[kNumLayers] = {3, kHiddenChannels, kHiddenChannels, kHiddenChannels};
    for (int l = 0; l < kNumLayers; ++l) {
        const ConvLayer& L = params.layers[l];
        int want_out = (l == kNumLayers - 1) ? params.dim : kHiddenChannels;
        if (L.in_ch != plan_in[l] || L.out_ch != want_out)
            throw std::invalid_argument("network: layer channel plan mismatch");
        if (L.w.size() != static_cast<size_t>(L.out_ch) * L.in_ch * 9 ||
            L.b.size() != static_cast<size_t>(L.out_ch))
            throw std::invalid_argument("network: layer buffer size mismatch");
    }
}

// 3x3 valid convolution; rows [y0, y1) of the output.
void conv_valid_rows(const Tensor3& in, const ConvLayer& L, Tensor3& out, int y0, int y1) {
    const int ow = out.w;
    for (int oc = 0; oc < L.out_ch; ++oc) {
        for (int y = y0; y < y1; ++y) {
            double* orow = out.row(oc, y);
            std::fill(orow, orow + ow, L.b[oc]);
        }
        for (int ic = 0; ic < L.in_ch; ++ic) {
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const double w = L.wat(oc, ic, ky, kx);
                    for (int y = y0; y < y1; ++y) {
                        const double* irow = in.row(ic, y + ky) + kx;
                        double* orow = out.row(oc, y);
                        for (int x = 0; x < ow; ++x) orow[x] += w * irow[x];
                    }
                }
            }
        }
    }
}

void conv_valid(const Tensor3& in, const ConvLayer& L, Tensor3& out, int threads = 1) {
    assert(in.ch == L.in_ch && in.h >= 3 && in.w >= 3);
    out.resize(L.out_ch, in.h - 2, in.w - 2);
    if (threads <= 1 || out.h < 4) {
        conv_valid_rows(in, L, out, 0, out.h);
    } else {
        parallel_for(static_cast<size_t>(out.h), threads, [&](size_t a, size_t b) {
            conv_valid_rows(in, L, out, static_cast<int>(a), static_cast<int>(b));
        });
    }
}

void relu_inplace(Tensor3& t) {
    for (double& x : t.v)
        if (x < 0.0) x = 0.0;
}

// Accumulates dW/db for this layer into dL and, when din != nullptr, the
// gradient with respect to the layer input.
void conv_backward(const Tensor3& in, const ConvLayer& L, const Tensor3& dout, ConvLayer& dL,
                   Tensor3* din) {
    const int oh = dout.h, ow = dout.w;
    if (din) din->resize(in.ch, in.h, in.w);
    for (int oc = 0; oc < L.out_ch; ++oc) {
        double db = 0.0;
        for (int y = 0; y < oh; ++y) {
            const double* drow = dout.row(oc, y);
            for (int x = 0; x < ow; ++x) db += drow[x];
        }
        dL.b[oc] += db;
        for (int ic = 0; ic < L.in_ch; ++ic) {
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    double dw = 0.0;
                    for (int y = 0; y < oh; ++y) {
                        const double* drow = dout.row(oc, y);
                        const double* irow = in.row(ic, y + ky) + kx;
                        for (int x = 0; x < ow; ++x) dw += drow[x] * irow[x];
                    }
                    dL.wat(oc, ic, ky, kx) += dw;
                    if (din) {
                        const double w = L.wat(oc, ic, ky, kx);
                        for (int y = 0; y < oh; ++y) {
                            const double* drow = dout.row(oc, y);
                            double* irow = din->row(ic, y + ky) + kx;
                            for (int x = 0; x < ow; ++x) irow[x] += w * drow[x];
                        }
                    }
                }
            }
        }
    }
}

// Activations of one patch pass; act[0] is the input, act[1..3] the
// post-ReLU maps, act[4] the pre-normalization output (dim x 1 x 1).
struct PatchWorkspace {
    std::array<Tensor3, kNumLayers + 1> act;
    std::vector<double> feature;
    double prenorm = 0.0;
};

void forward_patch(const NetworkParams& params, const Tensor3& patch, PatchWorkspace& ws) {
    assert(patch.ch == 3 && patch.h == kPatchSize && patch.w == kPatchSize);
    ws.act[0] = patch;
    for (int l = 0; l < kNumLayers; ++l) {
        conv_valid(ws.act[l], params.layers[l], ws.act[l + 1]);
        if (l < kNumLayers - 1) relu_inplace(ws.act[l + 1]);
    }
    const Tensor3& out = ws.act[kNumLayers];
    assert(out.h == 1 && out.w == 1 && out.ch == params.dim);
    double n2 = 0.0;
    for (double x : out.v) n2 += x * x;
    ws.prenorm = std::sqrt(n2);
    ws.feature.assign(out.v.begin(), out.v.end());
    if (ws.prenorm >= kNormEps) {
        for (double& x : ws.feature) x /= ws.prenorm;
    } else {
        std::fill(ws.feature.begin(), ws.feature.end(), 0.0);
    }
}

// Backpropagates a gradient on the unit-length feature through the
// normalization and the conv stack, accumulating into grads.
void backward_patch(const NetworkParams& params, PatchWorkspace& ws,
                    const std::vector<double>& dfeat, NetworkParams& grads) {
    const int d = params.dim;
    Tensor3 delta(d, 1, 1);
    if (ws.prenorm >= kNormEps) {
        double fdotg = 0.0;
        for (int k = 0; k < d; ++k) fdotg += ws.feature[k] * dfeat[k];
        for (int k = 0; k < d; ++k)
            delta.v[k] = (dfeat[k] - ws.feature[k] * fdotg) / ws.prenorm;
    }  // else: Jacobian treated as zero, delta stays 0

    Tensor3 din;
    for (int l = kNumLayers - 1; l >= 0; --l) {
        conv_backward(ws.act[l], params.layers[l], delta, grads.layers[l], l > 0 ? &din : nullptr);
        if (l > 0) {
            // ReLU gate: post-activation > 0 iff pre-activation > 0
            const Tensor3& a = ws.act[l];
            for (size_t i = 0; i < din.v.size(); ++i)
                if (a.v[i] <= 0.0) din.v[i] = 0.0;
            delta = std::move(din);
            din = Tensor3();
        }
    }
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

void check_batch(const TripletBatch& batch) {
    if (batch.anchors.empty() || batch.negatives.empty())
        throw std::invalid_argument("triplet batch is empty");
    if (batch.positives.size() != batch.anchors.size() ||
        batch.negatives.size() % batch.anchors.size() != 0)
        throw std::invalid_argument("triplet batch shape mismatch");
}

void add_params(NetworkParams& dst, const NetworkParams& src) {
    for (int l = 0; l < kNumLayers; ++l) {
        ConvLayer& a = dst.layers[l];
        const ConvLayer& b = src.layers[l];
        for (size_t i = 0; i < a.w.size(); ++i) a.w[i] += b.w[i];
        for (size_t i = 0; i < a.b.size(); ++i) a.b[i] += b.b[i];
    }
}

}  // namespace

NetworkParams init_network(int dim, uint64_t seed) {
    if (dim < 1) throw std::invalid_argument("init_network: dim must be >= 1");
    NetworkParams p;
    p.dim = dim;
    std::mt19937_64 rng(seed);
    const int plan_in[kNumLayers] = {3, kHiddenChannels, kHiddenChannels, kHiddenChannels};
    for (int l = 0; l < kNumLayers; ++l) {
        ConvLayer& L = p.layers[l];
        L.in_ch = plan_in[l];
        L.out_ch = (l == kNumLayers - 1) ? dim : kHiddenChannels;
        const double s = std::sqrt(1.0 / (L.in_ch * 9));
        std::uniform_real_distribution<double> dist(-s, s);
        L.w.resize(static_cast<size_t>(L.out_ch) * L.in_ch * 9);
        // drawn values are rounded to f32 so that a freshly initialized model
        // survives the f32 model file bit-exactly
        for (double& w : L.w) w = static_cast<double>(static_cast<float>(dist(rng)));
        L.b.assign(static_cast<size_t>(L.out_ch), 0.0);
    }
    return p;
}

NetworkParams zeros_like(const NetworkParams& params) {
    NetworkParams z = params;
    for (ConvLayer& L : z.layers) {
        std::fill(L.w.begin(), L.w.end(), 0.0);
        std::fill(L.b.begin(), L.b.end(), 0.0);
    }
    return z;
}

size_t param_count(const NetworkParams& params) {
    size_t n = 0;
    for (const ConvLayer& L : params.layers) n += L.w.size() + L.b.size();
    return n;
}

namespace {

void write_u32(std::ostream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t read_u32(std::istream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    if (!f) throw std::runtime_error("model file: truncated");
    return v;
}

}  // namespace

void save_network(const std::string& path, const NetworkParams& params) {
    check_layer_plan(params);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_network: cannot open " + path);
    f.write("DCFE", 4);
    write_u32(f, 1);  // version
    write_u32(f, static_cast<uint32_t>(params.dim));
    for (const ConvLayer& L : params.layers) {
        write_u32(f, static_cast<uint32_t>(L.out_ch));
        write_u32(f, static_cast<uint32_t>(L.in_ch));
        std::vector<float> buf(L.w.size() + L.b.size());
        size_t i = 0;
        for (double w : L.w) buf[i++] = static_cast<float>(w);
        for (double b : L.b) buf[i++] = static_cast<float>(b);
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!f) throw std::runtime_error("save_network: write failed for " + path);
}

NetworkParams load_network(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_network: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "DCFE", 4) != 0)
        throw std::runtime_error("load_network: bad magic in " + path);
    uint32_t version = read_u32(f);
    if (version != 1) throw std::runtime_error("load_network: unsupported version");
    uint32_t dim = read_u32(f);
    if (dim < 1 || dim > 4096) throw std::runtime_error("load_network: bad feature dim");
    NetworkParams p;
    p.dim = static_cast<int>(dim);
    for (int l = 0; l < kNumLayers; ++l) {
        ConvLayer& L = p.layers[l];
        L.out_ch = static_cast<int>(read_u32(f));
        L.in_ch = static_cast<int>(read_u32(f));
        if (L.out_ch < 1 || L.in_ch < 1 || L.out_ch > 4096 || L.in_ch > 4096)
            throw std::runtime_error("load_network: bad layer shape");
        std::vector<float> buf(static_cast<size_t>(L.out_ch) * L.in_ch * 9 + L.out_ch);
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!f) throw std::runtime_error("model file: truncated");
        L.w.assign(buf.begin(), buf.begin() + static_cast<long>(L.w.size() ? 0 : 0));
        L.w.resize(static_cast<size_t>(L.out_ch) * L.in_ch * 9);
        for (size_t i = 0; i < L.w.size(); ++i) L.w[i] = buf[i];
        L.b.resize(static_cast<size_t>(L.out_ch));
        for (size_t i = 0; i < L.b.size(); ++i) L.b[i] = buf[L.w.size() + i];
    }
    check_layer_plan(p);
    return p;
}

std::vector<double> embed_patch(const NetworkParams& params, const Tensor3& patch) {
    check_layer_plan(params);
    if (patch.ch != 3 || patch.h != kPatchSize || patch.w != kPatchSize)
        throw std::invalid_argument("embed_patch: patch must be 3x9x9");
    PatchWorkspace ws;
    forward_patch(params, patch, ws);
    return ws.feature;
}

FeatureGrid forward_embed(const Image& img, const NetworkParams& params, int threads) {
    check_layer_plan(params);
    if (img.width < 1 || img.height < 1)
        throw std::invalid_argument("forward_embed: image too small");
    const int W = img.width, H = img.height, pad = kNetPad;

    Tensor3 in(3, H + 2 * pad, W + 2 * pad);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < in.h; ++y) {
            const int sy = std::clamp(y - pad, 0, H - 1);
            double* row = in.row(c, y);
            for (int x = 0; x < in.w; ++x)
                row[x] = img.at(std::clamp(x - pad, 0, W - 1), sy, c);
        }

    Tensor3 cur = std::move(in), next;
    for (int l = 0; l < kNumLayers; ++l) {
        conv_valid(cur, params.layers[l], next, threads);
        if (l < kNumLayers - 1) relu_inplace(next);
        cur = std::move(next);
        next = Tensor3();
    }
    assert(cur.h == H && cur.w == W && cur.ch == params.dim);

    FeatureGrid grid(W, H, params.dim);
    const int d = params.dim;
    parallel_for(static_cast<size_t>(H), threads, [&](size_t y0, size_t y1) {
        for (size_t y = y0; y < y1; ++y) {
            for (int x = 0; x < W; ++x) {
                double n2 = 0.0;
                for (int k = 0; k < d; ++k) {
                    double v = cur.at(k, static_cast<int>(y), x);
                    n2 += v * v;
                }
                double n = std::sqrt(n2);
                float* out = grid.at(x, static_cast<int>(y));
                if (n >= kNormEps)
                    for (int k = 0; k < d; ++k)
                        out[k] = static_cast<float>(cur.at(k, static_cast<int>(y), x) / n);
                else
                    for (int k = 0; k < d; ++k) out[k] = 0.0f;
            }
        }
    });
    return grid;
}

namespace {

// Shared core of the loss-only and loss+grad paths over one group range.
template <bool WithGrad>
void loss_over_groups(const TripletBatch& batch, const NetworkParams& params, double margin,
                      size_t g0, size_t g1, double& loss_out, NetworkParams* grads) {
    const size_t groups = batch.anchors.size();
    const size_t per_anchor = batch.negatives.size() / groups;
    const double scale = 1.0 / static_cast<double>(batch.size());
    const int d = params.dim;

    PatchWorkspace wa, wp;
    std::vector<PatchWorkspace> wn(per_anchor);
    std::vector<double> dfa(d), dfp(d), dfn(d);
    double loss = 0.0;

    for (size_t g = g0; g < g1; ++g) {
        forward_patch(params, batch.anchors[g], wa);
        forward_patch(params, batch.positives[g], wp);
        const double da = sq_dist(wa.feature, wp.feature);

        std::fill(dfa.begin(), dfa.end(), 0.0);
        std::fill(dfp.begin(), dfp.end(), 0.0);
        int n_active = 0;
        for (size_t j = 0; j < per_anchor; ++j) {
            PatchWorkspace& w = wn[j];
            forward_patch(params, batch.negatives[g * per_anchor + j], w);
            const double dn = sq_dist(wa.feature, w.feature);
            const double h = margin + da - dn;
            if (h > 0.0) {
                loss += h;
                ++n_active;
                if constexpr (WithGrad) {
                    for (int k = 0; k < d; ++k) {
                        dfa[k] += 2.0 * (w.feature[k] - wp.feature[k]) * scale;
                        dfn[k] = 2.0 * (wa.feature[k] - w.feature[k]) * scale;
                    }
                    backward_patch(params, w, dfn, *grads);
                }
            }
        }
        if constexpr (WithGrad) {
            if (n_active > 0) {
                for (int k = 0; k < d; ++k)
                    dfp[k] = -2.0 * n_active * (wa.feature[k] - wp.feature[k]) * scale;
                backward_patch(params, wa, dfa, *grads);
                backward_patch(params, wp, dfp, *grads);
            }
        }
    }
    loss_out = loss;
}

template <bool WithGrad>
double batch_reduce(const TripletBatch& batch, const NetworkParams& params, double margin,
                    int threads, NetworkParams* grads_out) {
    check_batch(batch);
    check_layer_plan(params);
    const size_t groups = batch.anchors.size();
    size_t nthreads = threads < 1 ? 1 : std::min<size_t>(threads, groups);

    std::vector<double> losses(nthreads, 0.0);
    std::vector<NetworkParams> grads;
    if constexpr (WithGrad) {
        grads.reserve(nthreads);
        for (size_t t = 0; t < nthreads; ++t) grads.push_back(zeros_like(params));
    }
    // fixed chunking by index range; partial sums merged in ascending chunk
    // order so the result is reproducible for a fixed thread count
    const size_t chunk = (groups + nthreads - 1) / nthreads;
    parallel_for(nthreads, static_cast<int>(nthreads), [&](size_t t0, size_t t1) {
        for (size_t t = t0; t < t1; ++t) {
            size_t g0 = t * chunk, g1 = std::min(groups, g0 + chunk);
            if (g0 >= g1) continue;
            loss_over_groups<WithGrad>(batch, params, margin, g0, g1, losses[t],
                                       WithGrad ? &grads[t] : nullptr);
        }
    });
    double loss = 0.0;
    for (size_t t = 0; t < nthreads; ++t) loss += losses[t];
    if constexpr (WithGrad) {
        *grads_out = std::move(grads[0]);
        for (size_t t = 1; t < nthreads; ++t) add_params(*grads_out, grads[t]);
    }
    return loss / static_cast<double>(batch.size());
}

}  // namespace

double triplet_loss(const TripletBatch& batch, const NetworkParams& params, double margin,
                    int threads) {
    return batch_reduce<false>(batch, params, margin, threads, nullptr);
}

LossAndGrad triplet_loss_and_grad(const TripletBatch& batch, const NetworkParams& params,
                                  double margin, int threads) {
    LossAndGrad out;
    out.loss = batch_reduce<true>(batch, params, margin, threads, &out.grads);
    return out;
}

void sgd_step(NetworkParams& params, const NetworkParams& grads, NetworkParams& velocity,
              double lr, double momentum) {
    if (lr <= 0.0) throw std::invalid_argument("sgd_step: lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("sgd_step: momentum must be in [0,1)");
    if (grads.dim != params.dim || velocity.dim != params.dim)
        throw std::invalid_argument("sgd_step: shape mismatch");
    for (int l = 0; l < kNumLayers; ++l) {
        ConvLayer& P = params.layers[l];
        const ConvLayer& G = grads.layers[l];
        ConvLayer& V = velocity.layers[l];
        if (G.w.size() != P.w.size() || V.w.size() != P.w.size())
            throw std::invalid_argument("sgd_step: shape mismatch");
        for (size_t i = 0; i < P.w.size(); ++i) {
            V.w[i] = momentum * V.w[i] - lr * G.w[i];
            P.w[i] += V.w[i];
        }
        for (size_t i = 0; i < P.b.size(); ++i) {
            V.b[i] = momentum * V.b[i] - lr * G.b[i];
            P.b[i] += V.b[i];
        }
    }
}

namespace {

Tensor3 extract_patch(const Image& img, int cx, int cy) {
    Tensor3 p(3, kPatchSize, kPatchSize);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < kPatchSize; ++y)
            for (int x = 0; x < kPatchSize; ++x)
                p.at(c, y, x) = img.at(cx - kNetPad + x, cy - kNetPad + y, c);
    return p;
}

bool patch_inside(const Image& img, int cx, int cy) {
    return cx >= kNetPad && cy >= kNetPad && cx < img.width - kNetPad &&
           cy < img.height - kNetPad;
}

const std::vector<std::pair<int, int>>& negative_offsets() {
    static const std::vector<std::pair<int, int>> offsets = [] {
        std::vector<std::pair<int, int>> v;
        for (int dy = -5; dy <= 5; ++dy)
            for (int dx = -5; dx <= 5; ++dx) {
                int d2 = dx * dx + dy * dy;
                if (d2 >= 1 && d2 <= 25) v.emplace_back(dx, dy);
            }
        return v;
    }();
    return offsets;
}

}  // namespace

TripletBatch sample_triplets(const Image& img1, const Image& img2, const FlowField& gt_flow,
                             int count, uint64_t seed) {
    if (count <= 0 || count % 3 != 0)
        throw std::invalid_argument("sample_triplets: count must be a positive multiple of 3");
    if (gt_flow.width != img1.width || gt_flow.height != img1.height)
        throw std::invalid_argument("sample_triplets: flow/image size mismatch");
    const int n_anchors = count / 3;
    const auto& offsets = negative_offsets();

    std::mt19937_64 rng(seed);
    TripletBatch batch;
    batch.anchors.reserve(n_anchors);
    batch.positives.reserve(n_anchors);
    batch.negatives.reserve(count);

    if (img1.width <= 2 * kNetPad || img1.height <= 2 * kNetPad)
        throw std::runtime_error("sample_triplets: no valid anchor available");
    std::uniform_int_distribution<int> ax_dist(kNetPad, img1.width - 1 - kNetPad);
    std::uniform_int_distribution<int> ay_dist(kNetPad, img1.height - 1 - kNetPad);
    std::uniform_int_distribution<size_t> off_dist(0, offsets.size() - 1);

    long attempts = 0;
    const long max_attempts = 10000L + 2000L * n_anchors;
    while (static_cast<int>(batch.anchors.size()) < n_anchors) {
        if (++attempts > max_attempts)
            throw std::runtime_error("sample_triplets: no valid anchor available");
        const int ax = ax_dist(rng), ay = ay_dist(rng);
        if (!gt_flow.is_valid(ax, ay)) continue;
        const Vec2f f = gt_flow.at(ax, ay);
        const int px = static_cast<int>(std::lround(ax + f.x));
        const int py = static_cast<int>(std::lround(ay + f.y));
        if (!patch_inside(img2, px, py)) continue;

        std::array<std::pair<int, int>, 3> negs;
        int found = 0;
        for (int tries = 0; tries < 64 && found < 3; ++tries) {
            auto [dx, dy] = offsets[off_dist(rng)];
            if (patch_inside(img2, px + dx, py + dy)) negs[found++] = {px + dx, py + dy};
        }
        if (found < 3) continue;

        batch.anchors.push_back(extract_patch(img1, ax, ay));
        batch.positives.push_back(extract_patch(img2, px, py));
        for (int j = 0; j < 3; ++j)
            batch.negatives.push_back(extract_patch(img2, negs[j].first, negs[j].second));
    }
    return batch;
}

NetworkParams train(const std::vector<TrainSample>& dataset, const TrainSchedule& schedule,
                    int dim, uint64_t seed, int threads, std::ostream* log) {
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    NetworkParams params = init_network(dim, seed);
    NetworkParams velocity = zeros_like(params);

    long total = 0;
    for (const TrainStage& s : schedule.stages) total += s.iterations;
    if (total == 0) return params;

    BoundedQueue<TripletBatch> queue(3);
    std::exception_ptr producer_error;
    std::atomic<bool> done{false};
    std::thread producer([&] {
        try {
            std::mt19937_64 pick_rng(seed ^ 0x9e3779b97f4a7c15ULL);
            std::uniform_int_distribution<size_t> pick(0, dataset.size() - 1);
            uint64_t batch_seed = seed + 1;
            while (!done.load(std::memory_order_relaxed)) {
                const TrainSample& s = dataset[pick(pick_rng)];
                TripletBatch b =
                    sample_triplets(s.img1, s.img2, s.gt, schedule.batch_size, batch_seed++);
                if (!queue.push(std::move(b))) break;
            }
        } catch (...) {
            producer_error = std::current_exception();
            queue.close();
        }
    });

    long step = 0;
    double running = 0.0;
    long running_n = 0;
    try {
        for (const TrainStage& stage : schedule.stages) {
            for (int it = 0; it < stage.iterations; ++it) {
                TripletBatch batch;
                if (!queue.pop(batch)) {
                    producer.join();
                    if (producer_error) std::rethrow_exception(producer_error);
                    throw std::runtime_error("train: batch stream ended unexpectedly");
                }
                LossAndGrad lg = triplet_loss_and_grad(batch, params, schedule.margin, threads);
                sgd_step(params, lg.grads, velocity, stage.learning_rate, schedule.momentum);
                ++step;
                running += lg.loss;
                ++running_n;
                if (log && (step % 50 == 0 || step == total)) {
                    (*log) << "step " << step << "/" << total << "  lr " << stage.learning_rate
                           << "  loss " << running / running_n << "\n";
                    running = 0.0;
                    running_n = 0;
                }
            }
        }
    } catch (...) {
        done.store(true);
        queue.close();
        if (producer.joinable()) producer.join();
        throw;
    }
    done.store(true);
    queue.close();
    producer.join();
    if (producer_error) std::rethrow_exception(producer_error);
    return params;
}

}  // namespace cvflow
