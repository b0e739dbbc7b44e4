#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dexmoe/common.hpp"
#include "dexmoe/rng.hpp"

namespace dexmoe::nn {

enum class Act : uint8_t { elu = 0, tanh_fn = 1, identity = 2 };

// x for x >= 0, exp(x) - 1 otherwise. Continuous and monotone.
double elu(double x);

// Max-subtracted softmax. Output is a pure function of the shifted logits,
// nonnegative, and sums to 1 within 1e-12. Throws on empty input.
void softmax(std::span<const double> logits, Vec& out);
Vec softmax(std::span<const double> logits);

struct Layer {
    int in = 0;
    int out = 0;
    Vec w;  // row-major [out x in]
    Vec b;  // [out]
    Act act = Act::identity;
};

struct DenseNet {
    std::vector<Layer> layers;

    int input_dim() const { return layers.empty() ? 0 : layers.front().in; }
    int output_dim() const { return layers.empty() ? 0 : layers.back().out; }
    size_t param_count() const;

    // Throws unless consecutive layer dims chain and all parameters are finite.
    void validate() const;
};

// Activation trace kept by the forward pass; `dense_backward` replays it for
// exact reverse-mode gradients.
struct ForwardCache {
    Vec input;
    std::vector<Vec> pre;   // pre-activations per layer
    std::vector<Vec> post;  // post-activations per layer
};

struct NetGrads {
    struct LayerGrads {
        Vec dw, db;
    };
    std::vector<LayerGrads> layers;

    void init_like(const DenseNet& net);
    void zero();
    void add(const NetGrads& other);
    double sq_norm() const;
    void scale(double s);
};

// y = net(x). Pass a cache to enable a later backward call.
Vec dense_forward(const DenseNet& net, std::span<const double> x, ForwardCache* cache = nullptr);

// Accumulates dL/dparams into `g` (if non-null) and writes dL/dinput into
// `dx` (if non-null). `dy` is dL/doutput for the forward call that produced
// `cache`; a cache from a different shape throws.
void dense_backward(const DenseNet& net, const ForwardCache& cache, std::span<const double> dy,
                    NetGrads* g, Vec* dx);

// Scaled-uniform (Glorot-style) init with a per-layer stream derived from
// (seed, component_tag, layer index). Biases start at zero.
DenseNet make_net(int input, std::span<const int> hidden, int output, Act hidden_act,
                  Act output_act, uint64_t seed, uint64_t component_tag);

struct AdamConfig {
    double lr = 5e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Moments congruent with a list of parameter blocks.
struct AdamState {
    std::vector<Vec> m, v;
    int64_t step_count = 0;

    void init_like(const std::vector<std::span<double>>& blocks);
    bool congruent_with(const std::vector<std::span<double>>& blocks) const;
};

// Standard bias-corrected Adam over a block list. Returns false and leaves
// parameters and state untouched if any gradient entry is non-finite.
bool adam_step(const std::vector<std::span<double>>& params,
               const std::vector<std::span<const double>>& grads, AdamState& state,
               const AdamConfig& cfg);

// Mutable views over a net's parameters, in fixed (w0, b0, w1, b1, ...) order.
std::vector<std::span<double>> param_blocks(DenseNet& net);
std::vector<std::span<const double>> param_blocks(const DenseNet& net);
std::vector<std::span<const double>> grad_blocks(const NetGrads& g);

// Small dense kernels shared across the project.
double dot(std::span<const double> a, std::span<const double> b);
void matvec(std::span<const double> w, int rows, int cols, std::span<const double> x,
            std::span<double> y);   // y = W x
void matvec_t(std::span<const double> w, int rows, int cols, std::span<const double> y,
              std::span<double> x);  // x = W^T y

}  // namespace dexmoe::nn
