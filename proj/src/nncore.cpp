#include "dexmoe/nncore.hpp"

#include <algorithm>
#include <cmath>

namespace dexmoe::nn {

double elu(double x) { return x >= 0.0 ? x : std::expm1(x); }

namespace {

double act_apply(Act a, double x) {
    switch (a) {
        case Act::elu: return elu(x);
        case Act::tanh_fn: return std::tanh(x);
        case Act::identity: return x;
    }
    return x;
}

// derivative at pre-activation `z` with post-activation `y` available
double act_grad(Act a, double z, double y) {
    switch (a) {
        case Act::elu: return z >= 0.0 ? 1.0 : y + 1.0;
        case Act::tanh_fn: return 1.0 - y * y;
        case Act::identity: return 1.0;
    }
    return 1.0;
}

}  // namespace

void softmax(std::span<const double> logits, Vec& out) {
    require(!logits.empty(), "softmax: empty input");
    double mx = logits[0];
    for (double l : logits)
        mx = std::max(mx, l);
    out.resize(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    const double inv = 1.0 / sum;
    for (double& p : out)
        p *= inv;
}

Vec softmax(std::span<const double> logits) {
    Vec out;
    softmax(logits, out);
    return out;
}

size_t DenseNet::param_count() const {
    size_t n = 0;
    for (const auto& l : layers)
        n += l.w.size() + l.b.size();
    return n;
}

void DenseNet::validate() const {
    require(!layers.empty(), "DenseNet: no layers");
    for (size_t k = 0; k < layers.size(); ++k) {
        const auto& l = layers[k];
        require(l.in > 0 && l.out > 0, "DenseNet: non-positive layer dims");
        require(l.w.size() == static_cast<size_t>(l.in) * l.out, "DenseNet: weight size mismatch");
        require(l.b.size() == static_cast<size_t>(l.out), "DenseNet: bias size mismatch");
        require(all_finite(l.w) && all_finite(l.b), "DenseNet: non-finite parameters");
        if (k + 1 < layers.size())
            require(l.out == layers[k + 1].in, "DenseNet: layer dims do not chain");
    }
}

void NetGrads::init_like(const DenseNet& net) {
    layers.resize(net.layers.size());
    for (size_t k = 0; k < layers.size(); ++k) {
        layers[k].dw.assign(net.layers[k].w.size(), 0.0);
        layers[k].db.assign(net.layers[k].b.size(), 0.0);
    }
}

void NetGrads::zero() {
    for (auto& l : layers) {
        std::fill(l.dw.begin(), l.dw.end(), 0.0);
        std::fill(l.db.begin(), l.db.end(), 0.0);
    }
}

void NetGrads::add(const NetGrads& other) {
    for (size_t k = 0; k < layers.size(); ++k) {
        for (size_t i = 0; i < layers[k].dw.size(); ++i)
            layers[k].dw[i] += other.layers[k].dw[i];
        for (size_t i = 0; i < layers[k].db.size(); ++i)
            layers[k].db[i] += other.layers[k].db[i];
    }
}

double NetGrads::sq_norm() const {
    double s = 0.0;
    for (const auto& l : layers) {
        for (double g : l.dw)
            s += g * g;
        for (double g : l.db)
            s += g * g;
    }
    return s;
}

void NetGrads::scale(double s) {
    for (auto& l : layers) {
        for (double& g : l.dw)
            g *= s;
        for (double& g : l.db)
            g *= s;
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        s += a[i] * b[i];
    return s;
}

void matvec(std::span<const double> w, int rows, int cols, std::span<const double> x,
            std::span<double> y) {
    for (int r = 0; r < rows; ++r)
        y[r] = dot(w.subspan(static_cast<size_t>(r) * cols, cols), x);
}

void matvec_t(std::span<const double> w, int rows, int cols, std::span<const double> y,
              std::span<double> x) {
    std::fill(x.begin(), x.end(), 0.0);
    for (int r = 0; r < rows; ++r) {
        const double yr = y[r];
        const double* wr = w.data() + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c)
            x[c] += wr[c] * yr;
    }
}

Vec dense_forward(const DenseNet& net, std::span<const double> x, ForwardCache* cache) {
    require(!net.layers.empty(), "dense_forward: empty net");
    require(static_cast<int>(x.size()) == net.input_dim(), "dense_forward: input dim mismatch");
    require(all_finite(x), "dense_forward: non-finite input");

    if (cache) {
        cache->input.assign(x.begin(), x.end());
        cache->pre.resize(net.layers.size());
        cache->post.resize(net.layers.size());
    }

    Vec cur(x.begin(), x.end());
    Vec nxt;
    for (size_t k = 0; k < net.layers.size(); ++k) {
        const Layer& l = net.layers[k];
        nxt.resize(l.out);
        matvec(l.w, l.out, l.in, cur, nxt);
        for (int r = 0; r < l.out; ++r)
            nxt[r] += l.b[r];
        if (cache)
            cache->pre[k] = nxt;
        for (int r = 0; r < l.out; ++r)
            nxt[r] = act_apply(l.act, nxt[r]);
        if (cache)
            cache->post[k] = nxt;
        cur.swap(nxt);
    }
    return cur;
}

void dense_backward(const DenseNet& net, const ForwardCache& cache, std::span<const double> dy,
                    NetGrads* g, Vec* dx) {
    const size_t L = net.layers.size();
    require(cache.pre.size() == L && cache.post.size() == L, "dense_backward: stale cache");
    require(static_cast<int>(cache.input.size()) == net.input_dim(),
            "dense_backward: cache input dim mismatch");
    require(static_cast<int>(dy.size()) == net.output_dim(), "dense_backward: dy dim mismatch");
    if (g)
        require(g->layers.size() == L, "dense_backward: grads not congruent");

    Vec da(dy.begin(), dy.end());
    Vec dz, dprev;
    for (size_t k = L; k-- > 0;) {
        const Layer& l = net.layers[k];
        require(cache.pre[k].size() == static_cast<size_t>(l.out), "dense_backward: stale cache");
        dz.resize(l.out);
        for (int r = 0; r < l.out; ++r)
            dz[r] = da[r] * act_grad(l.act, cache.pre[k][r], cache.post[k][r]);

        const Vec& a_prev = (k == 0) ? cache.input : cache.post[k - 1];
        if (g) {
            auto& lg = g->layers[k];
            for (int r = 0; r < l.out; ++r) {
                double* dwr = lg.dw.data() + static_cast<size_t>(r) * l.in;
                const double dzr = dz[r];
                for (int c = 0; c < l.in; ++c)
                    dwr[c] += dzr * a_prev[c];
                lg.db[r] += dzr;
            }
        }
        if (k > 0 || dx) {
            dprev.resize(l.in);
            matvec_t(l.w, l.out, l.in, dz, dprev);
            da.swap(dprev);
        }
    }
    if (dx)
        *dx = da;
}

DenseNet make_net(int input, std::span<const int> hidden, int output, Act hidden_act,
                  Act output_act, uint64_t seed, uint64_t component_tag) {
    require(input > 0 && output > 0, "make_net: non-positive dims");
    DenseNet net;
    int prev = input;
    uint64_t layer_idx = 0;
    auto push_layer = [&](int out, Act act) {
        Layer l;
        l.in = prev;
        l.out = out;
        l.act = act;
        l.w.resize(static_cast<size_t>(out) * prev);
        l.b.assign(out, 0.0);
        Rng rng = Rng::stream(seed, {stream_tag::init, component_tag, layer_idx++});
        const double scale = std::sqrt(6.0 / (prev + out));
        for (double& w : l.w)
            w = rng.uniform(-scale, scale);
        prev = out;
        net.layers.push_back(std::move(l));
    };
    for (int h : hidden)
        push_layer(h, hidden_act);
    push_layer(output, output_act);
    net.validate();
    return net;
}

void AdamState::init_like(const std::vector<std::span<double>>& blocks) {
    m.resize(blocks.size());
    v.resize(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) {
        m[i].assign(blocks[i].size(), 0.0);
        v[i].assign(blocks[i].size(), 0.0);
    }
    step_count = 0;
}

bool AdamState::congruent_with(const std::vector<std::span<double>>& blocks) const {
    if (m.size() != blocks.size() || v.size() != blocks.size())
        return false;
    for (size_t i = 0; i < blocks.size(); ++i)
        if (m[i].size() != blocks[i].size() || v[i].size() != blocks[i].size())
            return false;
    return true;
}

bool adam_step(const std::vector<std::span<double>>& params,
               const std::vector<std::span<const double>>& grads, AdamState& state,
               const AdamConfig& cfg) {
    require(params.size() == grads.size(), "adam_step: block count mismatch");
    require(state.congruent_with(params), "adam_step: state not congruent");
    for (size_t i = 0; i < params.size(); ++i) {
        require(params[i].size() == grads[i].size(), "adam_step: block shape mismatch");
        if (!all_finite(grads[i]))
            return false;  // reported to caller, step skipped
    }

    state.step_count += 1;
    const double t = static_cast<double>(state.step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (size_t i = 0; i < params.size(); ++i) {
        auto& mi = state.m[i];
        auto& vi = state.v[i];
        auto p = params[i];
        auto g = grads[i];
        for (size_t j = 0; j < p.size(); ++j) {
            mi[j] = cfg.beta1 * mi[j] + (1.0 - cfg.beta1) * g[j];
            vi[j] = cfg.beta2 * vi[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = mi[j] / bc1;
            const double vhat = vi[j] / bc2;
            p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
    return true;
}

std::vector<std::span<double>> param_blocks(DenseNet& net) {
    std::vector<std::span<double>> blocks;
    blocks.reserve(net.layers.size() * 2);
    for (auto& l : net.layers) {
        blocks.emplace_back(l.w);
        blocks.emplace_back(l.b);
    }
    return blocks;
}

std::vector<std::span<const double>> param_blocks(const DenseNet& net) {
    std::vector<std::span<const double>> blocks;
    blocks.reserve(net.layers.size() * 2);
    for (const auto& l : net.layers) {
        blocks.emplace_back(l.w);
        blocks.emplace_back(l.b);
    }
    return blocks;
}

std::vector<std::span<const double>> grad_blocks(const NetGrads& g) {
    std::vector<std::span<const double>> blocks;
    blocks.reserve(g.layers.size() * 2);
    for (const auto& l : g.layers) {
        blocks.emplace_back(l.dw);
        blocks.emplace_back(l.db);
    }
    return blocks;
}

}  // namespace dexmoe::nn
