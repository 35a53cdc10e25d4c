#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "hitpr/tensor.hpp"

namespace hitpr {

enum class Mode { train, eval };

/// One learnable tensor with its gradient and Adam slots.
struct ParamTensor {
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;
    std::string path;

    ParamTensor() = default;
    ParamTensor(std::string p, Tensor v)
        : value(std::move(v)), grad(value.shape()), adam_m(value.shape()), adam_v(value.shape()),
          path(std::move(p)) {}

    void zero_grad() { grad.fill(0.0); }
};

struct LinearParams {
    ParamTensor w;  // Din x Dout
    ParamTensor b;  // Dout

    std::size_t in() const { return w.value.dim(0); }
    std::size_t out() const { return w.value.dim(1); }
};

struct MlpParams {
    std::vector<LinearParams> layers;  // ReLU between layers, last layer linear only

    std::size_t in() const { return layers.front().in(); }
    std::size_t out() const { return layers.back().out(); }
};

struct BatchNormState {
    ParamTensor gamma;
    ParamTensor beta;
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.1;
    double epsilon = 1e-5;

    std::size_t width() const { return gamma.value.numel(); }
};

struct LayerNormParams {
    ParamTensor gamma;
    ParamTensor beta;
    double epsilon = 1e-5;
};

inline LinearParams make_linear(const std::string& path, std::size_t din, std::size_t dout,
                                std::mt19937_64& rng) {
    // Xavier-uniform weights. Biases get a small uniform init rather than zeros:
    // relative offsets contain exact (0,0,0) rows (every cell lists itself), and
    // zero biases would park the following ReLU preactivations exactly on the kink.
    double a = std::sqrt(6.0 / double(din + dout));
    std::uniform_real_distribution<double> dist(-a, a);
    Tensor w({din, dout});
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = dist(rng);
    std::uniform_real_distribution<double> bdist(-0.1 * a, 0.1 * a);
    Tensor b({dout});
    for (std::size_t i = 0; i < b.numel(); ++i) b[i] = bdist(rng);
    LinearParams p;
    p.w = ParamTensor(path + ".w", std::move(w));
    p.b = ParamTensor(path + ".b", std::move(b));
    return p;
}

inline MlpParams make_mlp(const std::string& path, const std::vector<std::size_t>& widths,
                          std::mt19937_64& rng) {
    if (widths.size() < 2) throw std::invalid_argument("mlp: spec needs at least input and output width");
    MlpParams m;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
        m.layers.push_back(make_linear(path + "." + std::to_string(i), widths[i], widths[i + 1], rng));
    return m;
}

inline BatchNormState make_batch_norm(const std::string& path, std::size_t d) {
    BatchNormState s;
    s.gamma = ParamTensor(path + ".gamma", Tensor::full({d}, 1.0));
    s.beta = ParamTensor(path + ".beta", Tensor({d}));
    s.running_mean = Tensor({d});
    s.running_var = Tensor::full({d}, 1.0);
    return s;
}

inline LayerNormParams make_layer_norm(const std::string& path, std::size_t d) {
    LayerNormParams p;
    p.gamma = ParamTensor(path + ".gamma", Tensor::full({d}, 1.0));
    p.beta = ParamTensor(path + ".beta", Tensor({d}));
    return p;
}

/// Standard Adam with bias correction over a flat parameter list.
/// Zeroes every gradient after applying the update.
inline void adam_step(const std::vector<ParamTensor*>& params, std::int64_t& step, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    ++step;
    double bc1 = 1.0 - std::pow(beta1, double(step));
    double bc2 = 1.0 - std::pow(beta2, double(step));
    for (ParamTensor* p : params) {
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            double g = p->grad[i];
            p->adam_m[i] = beta1 * p->adam_m[i] + (1.0 - beta1) * g;
            p->adam_v[i] = beta2 * p->adam_v[i] + (1.0 - beta2) * g * g;
            double mhat = p->adam_m[i] / bc1;
            double vhat = p->adam_v[i] / bc2;
            p->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
        p->zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file: version byte, entry count, (path, shape) manifest, then a
// flat little-endian float64 payload in manifest order.
// ---------------------------------------------------------------------------

inline constexpr std::uint8_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::vector<ParamTensor*>& params, const std::string& file) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot open for write: " + file);
    auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    out.put(char(kCheckpointVersion));
    put_u32(std::uint32_t(params.size()));
    for (const ParamTensor* p : params) {
        put_u32(std::uint32_t(p->path.size()));
        out.write(p->path.data(), std::streamsize(p->path.size()));
        put_u32(std::uint32_t(p->value.ndim()));
        for (std::size_t d : p->value.shape()) put_u32(std::uint32_t(d));
    }
    for (const ParamTensor* p : params)
        out.write(reinterpret_cast<const char*>(p->value.data()),
                  std::streamsize(p->value.numel() * sizeof(double)));
    if (!out) throw std::runtime_error("checkpoint: write failed: " + file);
}

/// Loads a checkpoint into an already-built parameter list; paths and shapes
/// must match the manifest exactly.
inline void load_checkpoint(const std::vector<ParamTensor*>& params, const std::string& file) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open: " + file);
    auto get_u32 = [&]() {
        std::uint32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    int version = in.get();
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported format version in " + file);
    std::uint32_t count = get_u32();
    if (count != params.size())
        throw std::runtime_error("checkpoint: parameter count mismatch: file has " + std::to_string(count) +
                                 ", model has " + std::to_string(params.size()));
    for (ParamTensor* p : params) {
        std::uint32_t plen = get_u32();
        std::string path(plen, '\0');
        in.read(path.data(), plen);
        if (path != p->path)
            throw std::runtime_error("checkpoint: path mismatch: expected " + p->path + ", found " + path);
        std::uint32_t nd = get_u32();
        std::vector<std::size_t> shape(nd);
        for (auto& d : shape) d = get_u32();
        if (shape != p->value.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + p->path);
        if (!in) throw std::runtime_error("checkpoint: truncated manifest in " + file);
    }
    for (ParamTensor* p : params) {
        in.read(reinterpret_cast<char*>(p->value.data()),
                std::streamsize(p->value.numel() * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint: truncated payload in " + file);
    }
}

}  // namespace hitpr
