#pragma once

#include <cassert>
#include <functional>
#include <memory>
#include <vector>

#include "hitpr/nn.hpp"
#include "hitpr/tensor.hpp"

namespace hitpr {

class Tape;

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& val() const;
};

/// Reverse-mode autodiff tape. Ops append nodes with a backward closure;
/// backward() runs the closures in reverse and flushes leaf gradients into
/// their ParamTensor slots.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;
        std::function<void(Tape&)> back;  // reads this node's grad, accumulates into parents
        ParamTensor* leaf = nullptr;
    };

    Var input(Tensor v) {
        nodes_.push_back(Node{std::move(v), {}, nullptr, nullptr});
        return {this, nodes_.size() - 1};
    }

    Var param(ParamTensor& p) {
        nodes_.push_back(Node{p.value, {}, nullptr, &p});
        return {this, nodes_.size() - 1};
    }

    Var make(Tensor v, std::function<void(Tape&)> back) {
        nodes_.push_back(Node{std::move(v), {}, std::move(back), nullptr});
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const { return nodes_[id].value; }

    Tensor& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    /// Backpropagates from a scalar node; accumulates into ParamTensor::grad.
    void backward(Var loss) {
        if (value(loss.id).numel() != 1)
            throw std::invalid_argument("backward: loss must be a scalar, got " +
                                        value(loss.id).shape_str());
        grad(loss.id)[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.numel() == 0) continue;  // not reached from the loss
            if (n.back) n.back(*this);
            if (n.leaf) {
                for (std::size_t j = 0; j < n.grad.numel(); ++j) n.leaf->grad[j] += n.grad[j];
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

inline const Tensor& Var::val() const { return tape->value(id); }

namespace ops {

inline Tape& same_tape(Var a, Var b, const char* op) {
    if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": vars on different tapes");
    return *a.tape;
}

// ---- elementwise -----------------------------------------------------------

inline Var add(Var a, Var b) {
    Tape& t = same_tape(a, b, "add");
    check_same_shape(a.val(), b.val(), "add");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.val()[i];
    return t.make(std::move(out), [a, b, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor &ga = tp.grad(a.id), &gb = tp.grad(b.id);
        for (std::size_t i = 0; i < g.numel(); ++i) { ga[i] += g[i]; gb[i] += g[i]; }
    });
}

inline Var sub(Var a, Var b) {
    Tape& t = same_tape(a, b, "sub");
    check_same_shape(a.val(), b.val(), "sub");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.val()[i];
    return t.make(std::move(out), [a, b, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor &ga = tp.grad(a.id), &gb = tp.grad(b.id);
        for (std::size_t i = 0; i < g.numel(); ++i) { ga[i] += g[i]; gb[i] -= g[i]; }
    });
}

inline Var mul(Var a, Var b) {
    Tape& t = same_tape(a, b, "mul");
    check_same_shape(a.val(), b.val(), "mul");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
    return t.make(std::move(out), [a, b, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor &av = tp.value(a.id), &bv = tp.value(b.id);
        Tensor &ga = tp.grad(a.id), &gb = tp.grad(b.id);
        for (std::size_t i = 0; i < g.numel(); ++i) { ga[i] += g[i] * bv[i]; gb[i] += g[i] * av[i]; }
    });
}

inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return t.make(std::move(out), [a, s, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor& ga = tp.grad(a.id);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
    });
}

inline Var relu(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return t.make(std::move(out), [a, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& av = tp.value(a.id);
        Tensor& ga = tp.grad(a.id);
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (av[i] > 0.0) ga[i] += g[i];
    });
}

inline Var sum_all(Var a) {
    Tape& t = *a.tape;
    double s = 0.0;
    for (std::size_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
    return t.make(Tensor::scalar(s), [a, id = t.size()](Tape& tp) {
        double g = tp.grad(id)[0];
        Tensor& ga = tp.grad(a.id);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

// ---- linear algebra --------------------------------------------------------

inline Var matmul(Var a, Var b) {
    Tape& t = same_tape(a, b, "matmul");
    const Tensor &av = a.val(), &bv = b.val();
    if (av.ndim() != 2 || bv.ndim() != 2 || av.dim(1) != bv.dim(0))
        throw std::invalid_argument("matmul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    std::size_t n = av.dim(0), d = av.dim(1), m = bv.dim(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t kk = 0; kk < d; ++kk) {
            double x = av.data()[i * d + kk];
            if (x == 0.0) continue;
            const double* brow = bv.data() + kk * m;
            double* orow = out.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += x * brow[j];
        }
    return t.make(std::move(out), [a, b, n, d, m, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor &av2 = tp.value(a.id), &bv2 = tp.value(b.id);
        Tensor &ga = tp.grad(a.id), &gb = tp.grad(b.id);
        // dA = G B^T
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) {
                double gij = g.data()[i * m + j];
                if (gij == 0.0) continue;
                const double* brow = bv2.data() + 0;
                for (std::size_t kk = 0; kk < d; ++kk) ga.data()[i * d + kk] += gij * brow[kk * m + j];
            }
        // dB = A^T G
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t kk = 0; kk < d; ++kk) {
                double aik = av2.data()[i * d + kk];
                if (aik == 0.0) continue;
                const double* grow = g.data() + i * m;
                double* gbrow = gb.data() + kk * m;
                for (std::size_t j = 0; j < m; ++j) gbrow[j] += aik * grow[j];
            }
    });
}

inline Var add_row_bias(Var x, Var b) {
    Tape& t = same_tape(x, b, "add_row_bias");
    const Tensor &xv = x.val(), &bv = b.val();
    if (xv.ndim() != 2 || bv.numel() != xv.dim(1))
        throw std::invalid_argument("add_row_bias: shape mismatch " + xv.shape_str() + " vs " + bv.shape_str());
    std::size_t n = xv.dim(0), d = xv.dim(1);
    Tensor out = xv;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out.data()[i * d + j] += bv[j];
    return t.make(std::move(out), [x, b, n, d, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor &gx = tp.grad(x.id), &gb = tp.grad(b.id);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                gx.data()[i * d + j] += g.data()[i * d + j];
                gb[j] += g.data()[i * d + j];
            }
    });
}

/// out[n,j] = sum_i x[n,i] w[i,j] + b[j]
inline Var linear(Var x, Tape& t, LinearParams& p) {
    const Tensor& xv = x.val();
    if (xv.ndim() != 2 || xv.dim(1) != p.in())
        throw std::invalid_argument("linear: input " + xv.shape_str() + " does not match weight " +
                                    p.w.value.shape_str());
    return add_row_bias(matmul(x, t.param(p.w)), t.param(p.b));
}

inline Var mlp(Var x, Tape& t, MlpParams& m) {
    if (m.layers.empty()) throw std::invalid_argument("mlp: empty layer spec");
    Var h = x;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        h = linear(h, t, m.layers[i]);
        if (i + 1 < m.layers.size()) h = relu(h);
    }
    return h;
}

// ---- row / group reshuffling ----------------------------------------------

/// Each row of x repeated `times` consecutive times.
inline Var repeat_rows(Var x, std::size_t times) {
    Tape& t = *x.tape;
    const Tensor& xv = x.val();
    std::size_t n = xv.dim(0), d = xv.dim(1);
    Tensor out({n * times, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < times; ++r)
            std::copy(xv.data() + i * d, xv.data() + (i + 1) * d, out.data() + (i * times + r) * d);
    return t.make(std::move(out), [x, n, d, times, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t r = 0; r < times; ++r)
                for (std::size_t j = 0; j < d; ++j) gx.data()[i * d + j] += g.data()[(i * times + r) * d + j];
    });
}

/// Sums each consecutive block of `group` rows: (N*group) x D -> N x D.
inline Var sum_group_rows(Var x, std::size_t group) {
    Tape& t = *x.tape;
    const Tensor& xv = x.val();
    if (group == 0 || xv.dim(0) % group != 0)
        throw std::invalid_argument("sum_group_rows: rows not divisible by group");
    std::size_t n = xv.dim(0) / group, d = xv.dim(1);
    Tensor out({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < group; ++r)
            for (std::size_t j = 0; j < d; ++j) out.data()[i * d + j] += xv.data()[(i * group + r) * d + j];
    return t.make(std::move(out), [x, n, d, group, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t r = 0; r < group; ++r)
                for (std::size_t j = 0; j < d; ++j) gx.data()[(i * group + r) * d + j] += g.data()[i * d + j];
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    Tape& t = *parts[0].tape;
    std::size_t n = parts[0].val().dim(0), total = 0;
    for (const Var& p : parts) {
        if (p.val().dim(0) != n) throw std::invalid_argument("concat_cols: row count mismatch");
        total += p.val().dim(1);
    }
    Tensor out({n, total});
    std::size_t off = 0;
    for (const Var& p : parts) {
        std::size_t d = p.val().dim(1);
        for (std::size_t i = 0; i < n; ++i)
            std::copy(p.val().data() + i * d, p.val().data() + (i + 1) * d, out.data() + i * total + off);
        off += d;
    }
    return t.make(std::move(out), [parts, n, total, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        std::size_t off2 = 0;
        for (const Var& p : parts) {
            std::size_t d = tp.value(p.id).dim(1);
            Tensor& gp = tp.grad(p.id);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) gp.data()[i * d + j] += g.data()[i * total + off2 + j];
            off2 += d;
        }
    });
}

// ---- normalizations --------------------------------------------------------

inline Var layer_norm(Var x, Tape& t, LayerNormParams& p) {
    if (p.gamma.value.numel() != x.val().dim(1))
        throw std::invalid_argument("layer_norm: width mismatch " + x.val().shape_str() + " vs " +
                                    p.gamma.value.shape_str());
    // param() may reallocate the node store; take the input reference after
    Var gamma = t.param(p.gamma), beta = t.param(p.beta);
    const Tensor& xv = x.val();
    std::size_t n = xv.dim(0), d = xv.dim(1);
    double eps = p.epsilon;
    Tensor out({n, d});
    auto xhat = std::make_shared<Tensor>(Tensor({n, d}));
    auto inv_sigma = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= double(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= double(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            double xh = (row[j] - mean) * is;
            xhat->data()[i * d + j] = xh;
            out.data()[i * d + j] = xh * gamma.val()[j] + beta.val()[j];
        }
    }
    return t.make(std::move(out), [x, gamma, beta, xhat, inv_sigma, n, d, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& gv = tp.value(gamma.id);
        Tensor &gx = tp.grad(x.id), &gg = tp.grad(gamma.id), &gb = tp.grad(beta.id);
        for (std::size_t i = 0; i < n; ++i) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                double gij = g.data()[i * d + j], xh = xhat->data()[i * d + j];
                gg[j] += gij * xh;
                gb[j] += gij;
                double dxh = gij * gv[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh;
            }
            mean_dxh /= double(d);
            mean_dxh_xh /= double(d);
            double is = (*inv_sigma)[i];
            for (std::size_t j = 0; j < d; ++j) {
                double dxh = g.data()[i * d + j] * gv[j];
                double xh = xhat->data()[i * d + j];
                gx.data()[i * d + j] += is * (dxh - mean_dxh - xh * mean_dxh_xh);
            }
        }
    });
}

/// Column-wise batch norm over the rows of x. Train mode uses batch
/// statistics and updates the running stats; eval mode reads running stats.
inline Var batch_norm(Var x, Tape& t, BatchNormState& s, Mode mode) {
    if (s.width() != x.val().dim(1))
        throw std::invalid_argument("batch_norm: width mismatch " + x.val().shape_str() + " vs width " +
                                    std::to_string(s.width()));
    Var gamma = t.param(s.gamma), beta = t.param(s.beta);
    const Tensor& xv = x.val();
    std::size_t n = xv.dim(0), d = xv.dim(1);
    double eps = s.epsilon;
    Tensor out({n, d});
    if (mode == Mode::eval) {
        auto inv_sigma = std::make_shared<std::vector<double>>(d);
        for (std::size_t j = 0; j < d; ++j) (*inv_sigma)[j] = 1.0 / std::sqrt(s.running_var[j] + eps);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double xh = (xv.data()[i * d + j] - s.running_mean[j]) * (*inv_sigma)[j];
                out.data()[i * d + j] = xh * gamma.val()[j] + beta.val()[j];
            }
        auto mean_copy = std::make_shared<Tensor>(s.running_mean);
        return t.make(std::move(out), [x, gamma, beta, inv_sigma, mean_copy, n, d, id = t.size()](Tape& tp) {
            const Tensor& g = tp.grad(id);
            const Tensor& xv2 = tp.value(x.id);
            const Tensor& gv = tp.value(gamma.id);
            Tensor &gx = tp.grad(x.id), &gg = tp.grad(gamma.id), &gb = tp.grad(beta.id);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) {
                    double gij = g.data()[i * d + j];
                    double xh = (xv2.data()[i * d + j] - (*mean_copy)[j]) * (*inv_sigma)[j];
                    gg[j] += gij * xh;
                    gb[j] += gij;
                    gx.data()[i * d + j] += gij * gv[j] * (*inv_sigma)[j];
                }
        });
    }
    // train mode
    auto xhat = std::make_shared<Tensor>(Tensor({n, d}));
    auto inv_sigma = std::make_shared<std::vector<double>>(d);
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += xv.data()[i * d + j];
        mean /= double(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double c = xv.data()[i * d + j] - mean;
            var += c * c;
        }
        var /= double(n);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[j] = is;
        for (std::size_t i = 0; i < n; ++i) {
            double xh = (xv.data()[i * d + j] - mean) * is;
            xhat->data()[i * d + j] = xh;
            out.data()[i * d + j] = xh * gamma.val()[j] + beta.val()[j];
        }
        s.running_mean[j] = (1.0 - s.momentum) * s.running_mean[j] + s.momentum * mean;
        s.running_var[j] = (1.0 - s.momentum) * s.running_var[j] + s.momentum * var;
    }
    return t.make(std::move(out), [x, gamma, beta, xhat, inv_sigma, n, d, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor& gv = tp.value(gamma.id);
        Tensor &gx = tp.grad(x.id), &gg = tp.grad(gamma.id), &gb = tp.grad(beta.id);
        for (std::size_t j = 0; j < d; ++j) {
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double gij = g.data()[i * d + j], xh = xhat->data()[i * d + j];
                gg[j] += gij * xh;
                gb[j] += gij;
                double dxh = gij * gv[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh;
            }
            mean_dxh /= double(n);
            mean_dxh_xh /= double(n);
            double is = (*inv_sigma)[j];
            for (std::size_t i = 0; i < n; ++i) {
                double dxh = g.data()[i * d + j] * gv[j];
                double xh = xhat->data()[i * d + j];
                gx.data()[i * d + j] += is * (dxh - mean_dxh - xh * mean_dxh_xh);
            }
        }
    });
}

// ---- softmax family --------------------------------------------------------

inline Var softmax_rows(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = x.val();
    std::size_t n = xv.dim(0), d = xv.dim(1);
    Tensor out({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = xv.data() + i * d;
        double mx = row[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < d; ++j) sum += (out.data()[i * d + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < d; ++j) out.data()[i * d + j] /= sum;
    }
    return t.make(std::move(out), [x, n, d, id = t.size()](Tape& tp) {
        const Tensor &g = tp.grad(id), &y = tp.value(id);
        Tensor& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += g.data()[i * d + j] * y.data()[i * d + j];
            for (std::size_t j = 0; j < d; ++j)
                gx.data()[i * d + j] += y.data()[i * d + j] * (g.data()[i * d + j] - dot);
        }
    });
}

/// Per column, softmax over the `group` consecutive rows of each block
/// (the channel-wise neighbor softmax of vector attention).
inline Var softmax_group_cols(Var x, std::size_t group) {
    Tape& t = *x.tape;
    const Tensor& xv = x.val();
    if (group == 0 || xv.dim(0) % group != 0)
        throw std::invalid_argument("softmax_group_cols: rows not divisible by group");
    std::size_t n = xv.dim(0) / group, d = xv.dim(1);
    Tensor out(xv.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < d; ++j) {
            double mx = -1e300;
            for (std::size_t r = 0; r < group; ++r) mx = std::max(mx, xv.data()[(b * group + r) * d + j]);
            double sum = 0.0;
            for (std::size_t r = 0; r < group; ++r)
                sum += (out.data()[(b * group + r) * d + j] = std::exp(xv.data()[(b * group + r) * d + j] - mx));
            for (std::size_t r = 0; r < group; ++r) out.data()[(b * group + r) * d + j] /= sum;
        }
    return t.make(std::move(out), [x, n, d, group, id = t.size()](Tape& tp) {
        const Tensor &g = tp.grad(id), &y = tp.value(id);
        Tensor& gx = tp.grad(x.id);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t j = 0; j < d; ++j) {
                double dot = 0.0;
                for (std::size_t r = 0; r < group; ++r)
                    dot += g.data()[(b * group + r) * d + j] * y.data()[(b * group + r) * d + j];
                for (std::size_t r = 0; r < group; ++r) {
                    std::size_t idx = (b * group + r) * d + j;
                    gx.data()[idx] += y.data()[idx] * (g.data()[idx] - dot);
                }
            }
    });
}

/// Generic 2-D softmax: axis 1 = along each row, axis 0 = down each column.
inline Var softmax(Var x, int axis) {
    if (axis == 1) return softmax_rows(x);
    if (axis == 0) return softmax_group_cols(x, x.val().dim(0));
    throw std::invalid_argument("softmax: axis must be 0 or 1 for rank-2 input");
}

// ---- pooling ----------------------------------------------------------------

/// Column-wise max over each consecutive block of `group` rows.
/// Gradient routes to the first maximal row of each block.
inline Var max_pool_groups(Var x, std::size_t group) {
    Tape& t = *x.tape;
    const Tensor& xv = x.val();
    if (xv.dim(0) == 0) throw std::invalid_argument("max_pool: empty input");
    if (group == 0 || xv.dim(0) % group != 0)
        throw std::invalid_argument("max_pool: rows not divisible by group");
    std::size_t n = xv.dim(0) / group, d = xv.dim(1);
    Tensor out({n, d});
    auto argmax = std::make_shared<std::vector<std::size_t>>(n * d);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t j = 0; j < d; ++j) {
            std::size_t best = 0;
            double mx = xv.data()[(b * group) * d + j];
            for (std::size_t r = 1; r < group; ++r) {
                double v = xv.data()[(b * group + r) * d + j];
                if (v > mx) { mx = v; best = r; }
            }
            out.data()[b * d + j] = mx;
            (*argmax)[b * d + j] = best;
        }
    return t.make(std::move(out), [x, argmax, n, d, group, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        Tensor& gx = tp.grad(x.id);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t j = 0; j < d; ++j)
                gx.data()[(b * group + (*argmax)[b * d + j]) * d + j] += g.data()[b * d + j];
    });
}

inline Var max_pool_rows(Var x) { return max_pool_groups(x, x.val().dim(0)); }

// ---- attention --------------------------------------------------------------

/// Scaled dot-product attention applied independently to each consecutive
/// block of `n` rows (block-diagonal over a batch of point clouds).
inline Var scaled_dot_attention(Var q, Var k, Var v, std::size_t n) {
    Tape& t = same_tape(q, k, "attention");
    same_tape(q, v, "attention");
    const Tensor &qv = q.val(), &kv = k.val(), &vv = v.val();
    if (n == 0 || qv.dim(0) == 0) throw std::invalid_argument("attention: empty input");
    if (qv.dim(1) != kv.dim(1) || qv.dim(0) != kv.dim(0) || qv.dim(0) != vv.dim(0) || qv.dim(0) % n != 0)
        throw std::invalid_argument("attention: shape mismatch q=" + qv.shape_str() + " k=" + kv.shape_str() +
                                    " v=" + vv.shape_str());
    std::size_t blocks = qv.dim(0) / n, dk = qv.dim(1), dv = vv.dim(1);
    double sc = 1.0 / std::sqrt(double(dk));
    Tensor out({qv.dim(0), dv});
    auto attn = std::make_shared<std::vector<Tensor>>();  // per-block n x n softmax weights
    attn->reserve(blocks);
    for (std::size_t b = 0; b < blocks; ++b) {
        const double* qb = qv.data() + b * n * dk;
        const double* kb = kv.data() + b * n * dk;
        const double* vb = vv.data() + b * n * dv;
        Tensor a({n, n});
        for (std::size_t i = 0; i < n; ++i) {
            double mx = -1e300;
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dk; ++c) s += qb[i * dk + c] * kb[j * dk + c];
                s *= sc;
                a.data()[i * n + j] = s;
                mx = std::max(mx, s);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) sum += (a.data()[i * n + j] = std::exp(a.data()[i * n + j] - mx));
            for (std::size_t j = 0; j < n; ++j) a.data()[i * n + j] /= sum;
            double* orow = out.data() + (b * n + i) * dv;
            for (std::size_t j = 0; j < n; ++j) {
                double w = a.data()[i * n + j];
                for (std::size_t c = 0; c < dv; ++c) orow[c] += w * vb[j * dv + c];
            }
        }
        attn->push_back(std::move(a));
    }
    return t.make(std::move(out), [q, k, v, attn, blocks, n, dk, dv, sc, id = t.size()](Tape& tp) {
        const Tensor& g = tp.grad(id);
        const Tensor &qv2 = tp.value(q.id), &kv2 = tp.value(k.id), &vv2 = tp.value(v.id);
        Tensor &gq = tp.grad(q.id), &gk = tp.grad(k.id), &gv = tp.grad(v.id);
        for (std::size_t b = 0; b < blocks; ++b) {
            const Tensor& a = (*attn)[b];
            const double* qb = qv2.data() + b * n * dk;
            const double* kb = kv2.data() + b * n * dk;
            const double* vb = vv2.data() + b * n * dv;
            const double* gb = g.data() + b * n * dv;
            for (std::size_t i = 0; i < n; ++i) {
                // dA[i,:] = dO[i,:] V^T ; dS = A o (dA - rowdot) ; dV += A^T dO
                std::vector<double> da(n, 0.0);
                for (std::size_t j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (std::size_t c = 0; c < dv; ++c) s += gb[i * dv + c] * vb[j * dv + c];
                    da[j] = s;
                    double w = a.data()[i * n + j];
                    for (std::size_t c = 0; c < dv; ++c) gv.data()[(b * n + j) * dv + c] += w * gb[i * dv + c];
                }
                double rowdot = 0.0;
                for (std::size_t j = 0; j < n; ++j) rowdot += da[j] * a.data()[i * n + j];
                for (std::size_t j = 0; j < n; ++j) {
                    double ds = a.data()[i * n + j] * (da[j] - rowdot) * sc;
                    for (std::size_t c = 0; c < dk; ++c) {
                        gq.data()[(b * n + i) * dk + c] += ds * kb[j * dk + c];
                        gk.data()[(b * n + j) * dk + c] += ds * qb[i * dk + c];
                    }
                }
            }
        }
    });
}

}  // namespace ops
}  // namespace hitpr
