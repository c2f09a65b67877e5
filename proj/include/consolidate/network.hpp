#pragma once

// The testbed network: a stack of affine layers read from a checkpoint
// manifest, ReLU between layers, softmax on the last. Hidden layers come from
// `weight` entries in depth order, followed by the `head_weight` layer if the
// manifest has one. Low-rank factors, when present, add scale·(b·a) to their
// target weight.
//
// Parameters are held in double while training; checkpoints store float32.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "consolidate/checkpoint.hpp"
#include "consolidate/random.hpp"
#include "consolidate/tensor.hpp"

namespace consolidate {

struct LowRankFactors {
    std::string a_name;
    std::string b_name;
    Matrix a;  // r x in
    Matrix b;  // out x r
    double scale = 1.0;
};

struct AffineLayer {
    std::string weight_name;
    std::string bias_name;
    int depth = 1;
    Matrix weight;  // out x in
    std::vector<double> bias;
    std::optional<LowRankFactors> lowrank;

    std::size_t in_dim() const noexcept { return weight.cols; }
    std::size_t out_dim() const noexcept { return weight.rows; }

    Matrix effective_weight() const {
        if (!lowrank) return weight;
        Matrix w = weight;
        const Matrix delta = matmul(lowrank->b, lowrank->a);
        for (std::size_t i = 0; i < w.values.size(); ++i) w.values[i] += lowrank->scale * delta.values[i];
        return w;
    }
};

inline std::string hidden_weight_name(int depth) { return "layer" + std::to_string(depth) + ".weight"; }
inline std::string hidden_bias_name(int depth) { return "layer" + std::to_string(depth) + ".bias"; }

struct MlpArch {
    std::size_t input_dim = 16;
    std::size_t width = 32;
    int hidden_layers = 4;
    std::size_t n_classes = 4;
};

/// Manifest of an MLP; the head shares the deepest hidden depth.
inline Manifest mlp_manifest(const MlpArch& arch) {
    Manifest m;
    m.layer_count = arch.hidden_layers;
    std::size_t in = arch.input_dim;
    for (int l = 1; l <= arch.hidden_layers; ++l) {
        m.entries.push_back({hidden_weight_name(l), {arch.width, in}, Role::weight, l, {}});
        m.entries.push_back({hidden_bias_name(l), {arch.width}, Role::bias, l, {}});
        in = arch.width;
    }
    m.entries.push_back({"head.weight", {arch.n_classes, in}, Role::head_weight, arch.hidden_layers, {}});
    m.entries.push_back({"head.bias", {arch.n_classes}, Role::head_bias, arch.hidden_layers, {}});
    return m;
}

class Network {
public:
    std::vector<AffineLayer> layers;

    static Network from_checkpoint(const Checkpoint& c) {
        Network net;
        const auto& m = c.manifest;
        std::vector<const ManifestEntry*> weights;
        const ManifestEntry* head = nullptr;
        for (const auto& e : m.entries) {
            if (e.role == Role::weight) weights.push_back(&e);
            if (e.role == Role::head_weight) head = &e;
        }
        std::stable_sort(weights.begin(), weights.end(), [](auto* a, auto* b) { return a->depth < b->depth; });
        if (head) weights.push_back(head);
        if (weights.empty()) fail(ErrorCode::validation, "checkpoint has no weight tensors");

        for (const auto* w : weights) {
            const Role bias_role = w->role == Role::head_weight ? Role::head_bias : Role::bias;
            const ManifestEntry* bias = nullptr;
            for (const auto& e : m.entries)
                if (e.role == bias_role && e.depth == w->depth) bias = &e;
            if (!bias) fail(ErrorCode::validation, "weight '" + w->name + "' has no bias");
            AffineLayer layer;
            layer.weight_name = w->name;
            layer.bias_name = bias->name;
            layer.depth = w->depth;
            layer.weight = Matrix::from_tensor(c.at(w->name));
            layer.bias = to_double(c.at(bias->name).data());
            if (layer.bias.size() != layer.out_dim())
                fail(ErrorCode::shape, "bias '" + bias->name + "' does not match weight '" + w->name + "'");
            if (!net.layers.empty() && net.layers.back().out_dim() != layer.in_dim())
                fail(ErrorCode::shape, "weight '" + w->name + "' does not chain with the previous layer");
            net.layers.push_back(std::move(layer));
        }
        if (m.lowrank) {
            for (auto& layer : net.layers) {
                const ManifestEntry* fa = nullptr;
                const ManifestEntry* fb = nullptr;
                for (const auto& e : m.entries) {
                    if (e.target != layer.weight_name) continue;
                    if (e.role == Role::lowrank_a) fa = &e;
                    if (e.role == Role::lowrank_b) fb = &e;
                }
                if (fa && fb) {
                    layer.lowrank = LowRankFactors{fa->name, fb->name, Matrix::from_tensor(c.at(fa->name)),
                                                   Matrix::from_tensor(c.at(fb->name)), m.lowrank->scale()};
                }
            }
        }
        return net;
    }

    /// Writes parameters back into a copy of `like` (same manifest).
    Checkpoint to_checkpoint(const Checkpoint& like) const {
        Checkpoint c = like;
        for (const auto& layer : layers) {
            c.tensors.at(layer.weight_name) = layer.weight.to_tensor();
            c.tensors.at(layer.bias_name) = Tensor::vector(to_float(layer.bias));
            if (layer.lowrank) {
                c.tensors.at(layer.lowrank->a_name) = layer.lowrank->a.to_tensor();
                c.tensors.at(layer.lowrank->b_name) = layer.lowrank->b.to_tensor();
            }
        }
        return c;
    }

    std::size_t input_dim() const { return layers.front().in_dim(); }
    std::size_t output_dim() const { return layers.back().out_dim(); }
};

struct ForwardCache {
    std::vector<Matrix> inputs;   // input of each layer, n x in
    std::vector<Matrix> weights;  // effective weight used for each layer
    Matrix logits;                // n x classes
    Matrix probs;                 // softmax(logits)
};

inline void affine(const Matrix& x, const Matrix& w, std::span<const double> b, Matrix& out) {
    out = matmul_nt(x, w);
    for (std::size_t r = 0; r < out.rows; ++r)
        for (std::size_t c = 0; c < out.cols; ++c) out(r, c) += b[c];
}

inline Matrix softmax_rows(const Matrix& logits) {
    Matrix p(logits.rows, logits.cols);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        const auto row = logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (std::size_t c = 0; c < logits.cols; ++c) z += (p(r, c) = std::exp(row[c] - mx));
        for (std::size_t c = 0; c < logits.cols; ++c) p(r, c) /= z;
    }
    return p;
}

inline ForwardCache forward(const Network& net, const Matrix& x) {
    if (x.cols != net.input_dim())
        fail(ErrorCode::shape, "input dimension " + std::to_string(x.cols) + " does not match network input " +
                                   std::to_string(net.input_dim()));
    ForwardCache cache;
    Matrix h = x;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        cache.inputs.push_back(h);
        cache.weights.push_back(net.layers[l].effective_weight());
        Matrix z;
        affine(h, cache.weights.back(), net.layers[l].bias, z);
        if (l + 1 < net.layers.size()) {
            for (auto& v : z.values) v = std::max(v, 0.0);
        }
        h = std::move(z);
    }
    cache.logits = std::move(h);
    cache.probs = softmax_rows(cache.logits);
    return cache;
}

inline std::vector<int> predict(const Network& net, const Matrix& x) {
    const Matrix logits = forward(net, x).logits;
    std::vector<int> out(logits.rows);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        const auto row = logits.row(r);
        out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

struct Gradients {
    std::vector<Matrix> weight;               // d/d effective weight
    std::vector<std::vector<double>> bias;
    std::vector<std::optional<Matrix>> lowrank_a;
    std::vector<std::optional<Matrix>> lowrank_b;
};

/// Backpropagates d(loss)/d(logits) through the cached forward pass.
inline Gradients backward(const Network& net, const ForwardCache& cache, Matrix dz) {
    const std::size_t n_layers = net.layers.size();
    Gradients g;
    g.weight.resize(n_layers);
    g.bias.resize(n_layers);
    g.lowrank_a.resize(n_layers);
    g.lowrank_b.resize(n_layers);
    for (std::size_t l = n_layers; l-- > 0;) {
        const Matrix& x = cache.inputs[l];
        g.weight[l] = matmul_tn(dz, x);  // out x in
        g.bias[l].assign(dz.cols, 0.0);
        for (std::size_t r = 0; r < dz.rows; ++r)
            for (std::size_t c = 0; c < dz.cols; ++c) g.bias[l][c] += dz(r, c);
        if (const auto& lr = net.layers[l].lowrank) {
            g.lowrank_a[l] = matmul_tn(lr->b, g.weight[l]) * lr->scale;  // r x in
            g.lowrank_b[l] = matmul_nt(g.weight[l], lr->a) * lr->scale;  // out x r
        }
        if (l == 0) break;
        Matrix dx = matmul(dz, cache.weights[l]);  // n x in
        // ReLU: the previous layer's output is this layer's input.
        for (std::size_t i = 0; i < dx.values.size(); ++i)
            if (!(x.values[i] > 0.0)) dx.values[i] = 0.0;
        dz = std::move(dx);
    }
    return g;
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
inline std::pair<double, Matrix> cross_entropy(const ForwardCache& cache, std::span<const int> labels) {
    const Matrix& p = cache.probs;
    const double n = static_cast<double>(p.rows);
    Matrix dz = p;
    double loss = 0.0;
    for (std::size_t r = 0; r < p.rows; ++r) {
        const auto y = static_cast<std::size_t>(labels[r]);
        const auto row = cache.logits.row(r);
        const double mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (double v : row) z += std::exp(v - mx);
        loss -= row[y] - mx - std::log(z);
        dz(r, y) -= 1.0;
    }
    dz *= 1.0 / n;
    return {loss / n, std::move(dz)};
}

/// Mean Shannon entropy of the predicted distributions and its gradient
/// w.r.t. the logits: dH/dz_k = −p_k (ln p_k + H).
inline std::pair<double, Matrix> mean_entropy(const ForwardCache& cache) {
    const Matrix& p = cache.probs;
    const double n = static_cast<double>(p.rows);
    Matrix dz(p.rows, p.cols);
    double total = 0.0;
    for (std::size_t r = 0; r < p.rows; ++r) {
        double h = 0.0;
        for (std::size_t c = 0; c < p.cols; ++c)
            if (p(r, c) > 0.0) h -= p(r, c) * std::log(p(r, c));
        total += h;
        for (std::size_t c = 0; c < p.cols; ++c) {
            const double pc = p(r, c);
            dz(r, c) = pc > 0.0 ? -pc * (std::log(pc) + h) / n : 0.0;
        }
    }
    return {total / n, std::move(dz)};
}

}  // namespace consolidate
