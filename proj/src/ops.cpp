#include "dadrop/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "dadrop/errors.hpp"
#include "dadrop/losses.hpp"

namespace dadrop {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConstMat = Eigen::Map<const RowMat>;

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

void bump(OpKind kind) { OpCounters::instance().bump(kind); }

struct ConvGeom {
    std::int64_t cin, h, w, cout, k, stride, pad, ho, wo;
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Column matrix rows are (c, ky, kx); each row holds ld floats, this image's
// output positions at the given offset.
void im2col(const float* x, const ConvGeom& g, float* cols, std::int64_t ld) {
    // Strided convs gather from input rows split by column phase.
    thread_local std::vector<float> phases;
    const std::int64_t wp = (g.w + g.stride - 1) / g.stride;
    if (g.stride > 1) {
        phases.resize(static_cast<std::size_t>(g.cin * g.h * g.stride * wp));
        for (std::int64_t r = 0; r < g.cin * g.h; ++r) {
            const float* src = x + r * g.w;
            for (std::int64_t ph = 0; ph < g.stride; ++ph) {
                float* dst = phases.data() + (r * g.stride + ph) * wp;
                for (std::int64_t j = 0; j < wp; ++j) {
                    const std::int64_t ix = j * g.stride + ph;
                    dst[j] = ix < g.w ? src[ix] : 0.0f;
                }
            }
        }
    }
    for (std::int64_t c = 0; c < g.cin; ++c) {
        for (std::int64_t ky = 0; ky < g.k; ++ky) {
            for (std::int64_t kx = 0; kx < g.k; ++kx) {
                float* row = cols + ((c * g.k + ky) * g.k + kx) * ld;
                const std::int64_t off = kx - g.pad;
                const std::int64_t phase = ((off % g.stride) + g.stride) % g.stride;
                const std::int64_t shift = (off - phase) / g.stride;
                // Output columns whose input column lies inside the image.
                const std::int64_t lo = std::clamp<std::int64_t>((g.pad - kx + g.stride - 1) / g.stride, 0, g.wo);
                const std::int64_t hi = std::clamp<std::int64_t>((g.w + g.pad - kx + g.stride - 1) / g.stride, lo, g.wo);
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ky;
                    float* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, 0.0f);
                        continue;
                    }
                    std::fill(dst, dst + lo, 0.0f);
                    if (g.stride == 1) {
                        const float* src = x + (c * g.h + iy) * g.w - g.pad + kx;
                        std::copy(src + lo, src + hi, dst + lo);
                    } else {
                        const float* src = phases.data() + ((c * g.h + iy) * g.stride + phase) * wp + shift;
                        std::copy(src + lo, src + hi, dst + lo);
                    }
                    std::fill(dst + hi, dst + g.wo, 0.0f);
                }
            }
        }
    }
}

void col2im(const float* cols, const ConvGeom& g, float* dx, std::int64_t ld) {
    for (std::int64_t c = 0; c < g.cin; ++c) {
        for (std::int64_t ky = 0; ky < g.k; ++ky) {
            for (std::int64_t kx = 0; kx < g.k; ++kx) {
                const float* row = cols + ((c * g.k + ky) * g.k + kx) * ld;
                const std::int64_t lo = std::clamp<std::int64_t>((g.pad - kx + g.stride - 1) / g.stride, 0, g.wo);
                const std::int64_t hi = std::clamp<std::int64_t>((g.w + g.pad - kx + g.stride - 1) / g.stride, lo, g.wo);
                for (std::int64_t oy = 0; oy < g.ho; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h) continue;
                    float* dst = dx + (c * g.h + iy) * g.w - g.pad + kx;
                    const float* src = row + oy * g.wo;
                    for (std::int64_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
                }
            }
        }
    }
}

}  // namespace

OpCounters& OpCounters::instance() {
    static OpCounters counters;
    return counters;
}

void OpCounters::reset() {
    for (auto& c : counts_) c.store(0);
}

std::map<std::string, std::uint64_t> OpCounters::snapshot() const {
    std::map<std::string, std::uint64_t> out;
    for (std::size_t i = 0; i < counts_.size(); ++i) {
        out[op_name(static_cast<OpKind>(i))] = counts_[i].load();
    }
    return out;
}

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::add: return "add";
        case OpKind::relu: return "relu";
        case OpKind::gelu: return "gelu";
        case OpKind::conv2d: return "conv2d";
        case OpKind::batch_norm: return "batch_norm";
        case OpKind::max_pool: return "max_pool";
        case OpKind::linear: return "linear";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::attention: return "attention";
        case OpKind::to_tokens: return "to_tokens";
        case OpKind::add_position: return "add_position";
        case OpKind::mean_tokens: return "mean_tokens";
        case OpKind::mean_features: return "mean_features";
        case OpKind::mean_spatial: return "mean_spatial";
        case OpKind::mask_channels: return "mask_channels";
        case OpKind::mask_tokens: return "mask_tokens";
        case OpKind::scale: return "scale";
        case OpKind::grad_reversal: return "grad_reversal";
        case OpKind::slice_batch: return "slice_batch";
        case OpKind::concat_batch: return "concat_batch";
        case OpKind::au_loss: return "au_loss";
        case OpKind::domain_head: return "domain_head";
        case OpKind::count_: break;
    }
    return "?";
}

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    bump(OpKind::add);
    std::vector<float> out(a.data().begin(), a.data().end());
    const auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            auto& in = *self.inputs[k];
            if (!in.requires_grad) continue;
            auto& g = in.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor relu(const Tensor& x) {
    bump(OpKind::relu);
    std::vector<float> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = v > 0.0f ? v : 0.0f;
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (self.value[i] > 0.0f) g[i] += self.grad[i];
        }
    });
}

// tanh through a single exp; saturates cleanly at both ends.
inline float fast_tanh(float u) {
    return 1.0f - 2.0f / (std::exp(2.0f * u) + 1.0f);
}

Tensor gelu(const Tensor& x) {
    bump(OpKind::gelu);
    constexpr float c = 0.7978845608028654f;  // sqrt(2/pi)
    const auto xd = x.data();
    std::vector<float> out(xd.size());
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const float v = xd[i];
        out[i] = 0.5f * v * (1.0f + fast_tanh(c * (v + 0.044715f * v * v * v)));
    }
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        const auto& xv = self.inputs[0]->value;
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const float v = xv[i];
            const float u = c * (v + 0.044715f * v * v * v);
            const float t = fast_tanh(u);
            const float du = c * (1.0f + 3.0f * 0.044715f * v * v);
            g[i] += self.grad[i] * (0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du);
        }
    });
}

Tensor scale(const Tensor& x, float factor) {
    bump(OpKind::scale);
    std::vector<float> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= factor;
    return make_result(x.shape(), std::move(out), {x}, [factor](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias, int stride, int pad) {
    require(x.rank() == 4 && weight.rank() == 4, "conv2d: expected 4-D input and weight");
    require(x.dim(1) == weight.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) +
                                           " channels, weight expects " + std::to_string(weight.dim(1)));
    require(weight.dim(2) == weight.dim(3), "conv2d: square kernels only");
    bump(OpKind::conv2d);
    ConvGeom g{};
    g.cin = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.cout = weight.dim(0);
    g.k = weight.dim(2);
    g.stride = stride;
    g.pad = pad;
    g.ho = (g.h + 2 * pad - g.k) / stride + 1;
    g.wo = (g.w + 2 * pad - g.k) / stride + 1;
    require(g.ho > 0 && g.wo > 0, "conv2d: input too small for kernel");
    if (bias) require(bias->numel() == g.cout, "conv2d: bias size mismatch");
    const std::int64_t batch = x.dim(0);
    const std::int64_t kdim = g.cin * g.k * g.k;
    const std::int64_t hw_out = g.ho * g.wo;
    const std::int64_t in_stride = g.cin * g.h * g.w;

    std::vector<float> out(static_cast<std::size_t>(batch * g.cout * hw_out));
    std::vector<float> cols(g.pointwise() ? 0 : static_cast<std::size_t>(kdim * hw_out));
    MapConstMat w(weight.data().data(), g.cout, kdim);
    for (std::int64_t b = 0; b < batch; ++b) {
        const float* cp = x.data().data() + b * in_stride;
        if (!g.pointwise()) {
            im2col(cp, g, cols.data(), hw_out);
            cp = cols.data();
        }
        MapMat ob(out.data() + b * g.cout * hw_out, g.cout, hw_out);
        ob.noalias() = w * MapConstMat(cp, kdim, hw_out);
        if (bias) {
            for (std::int64_t c = 0; c < g.cout; ++c) {
                float* row = ob.data() + c * hw_out;
                const float v = bias->data()[c];
                for (std::int64_t i = 0; i < hw_out; ++i) row[i] += v;
            }
        }
    }

    std::vector<Tensor> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    const bool has_bias = bias != nullptr;
    return make_result({batch, g.cout, g.ho, g.wo}, std::move(out), std::move(inputs),
                       [g, batch, kdim, hw_out, in_stride, has_bias](Node& self) {
        Node& xn = *self.inputs[0];
        Node& wn = *self.inputs[1];
        std::vector<float> cols(static_cast<std::size_t>(kdim * hw_out));
        MapConstMat w(wn.value.data(), g.cout, kdim);
        float* dw = wn.requires_grad ? wn.grad_buffer().data() : nullptr;
        float* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        for (std::int64_t b = 0; b < batch; ++b) {
            MapConstMat dout(self.grad.data() + b * g.cout * hw_out, g.cout, hw_out);
            const float* xb = xn.value.data() + b * in_stride;
            if (dw) {
                const float* cp = xb;
                if (!g.pointwise()) {
                    im2col(xb, g, cols.data(), hw_out);
                    cp = cols.data();
                }
                MapMat(dw, g.cout, kdim).noalias() += dout * MapConstMat(cp, kdim, hw_out).transpose();
            }
            if (dx) {
                if (g.pointwise()) {
                    MapMat(dx + b * in_stride, kdim, hw_out).noalias() += w.transpose() * dout;
                } else {
                    MapMat(cols.data(), kdim, hw_out).noalias() = w.transpose() * dout;
                    col2im(cols.data(), g, dx + b * in_stride, hw_out);
                }
            }
        }
        if (has_bias && self.inputs[2]->requires_grad) {
            auto& db = self.inputs[2]->grad_buffer();
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t c = 0; c < g.cout; ++c) {
                    const float* row = self.grad.data() + (b * g.cout + c) * hw_out;
                    float s = 0.0f;
                    for (std::int64_t i = 0; i < hw_out; ++i) s += row[i];
                    db[c] += s;
                }
            }
        }
    });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  bool training) {
    require(x.rank() == 4, "batch_norm: expected (B,C,H,W)");
    const std::int64_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    require(gamma.numel() == ch && beta.numel() == ch, "batch_norm: parameter size mismatch");
    require(static_cast<std::int64_t>(state.running_mean.size()) == ch, "batch_norm: running stats size mismatch");
    bump(OpKind::batch_norm);
    const auto xd = x.data();
    const auto gd = gamma.data();
    const auto bd = beta.data();
    std::vector<float> out(xd.size());
    std::vector<float> inv_std(static_cast<std::size_t>(ch));
    std::vector<float> mean(static_cast<std::size_t>(ch));
    const double count = static_cast<double>(batch * hw);
    for (std::int64_t c = 0; c < ch; ++c) {
        double m, v;
        if (training) {
            double s = 0.0, ss = 0.0;
            for (std::int64_t b = 0; b < batch; ++b) {
                const float* p = xd.data() + (b * ch + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) s += p[i];
            }
            m = s / count;
            for (std::int64_t b = 0; b < batch; ++b) {
                const float* p = xd.data() + (b * ch + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) ss += (p[i] - m) * (p[i] - m);
            }
            v = ss / count;
            const double unbiased = count > 1 ? ss / (count - 1) : v;
            state.running_mean[c] = static_cast<float>((1.0 - state.momentum) * state.running_mean[c] + state.momentum * m);
            state.running_var[c] = static_cast<float>((1.0 - state.momentum) * state.running_var[c] + state.momentum * unbiased);
        } else {
            m = state.running_mean[c];
            v = state.running_var[c];
        }
        mean[c] = static_cast<float>(m);
        inv_std[c] = static_cast<float>(1.0 / std::sqrt(v + state.eps));
        for (std::int64_t b = 0; b < batch; ++b) {
            const float* p = xd.data() + (b * ch + c) * hw;
            float* o = out.data() + (b * ch + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) o[i] = (p[i] - mean[c]) * inv_std[c] * gd[c] + bd[c];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gamma, beta},
                       [batch, ch, hw, mean, inv_std, training](Node& self) {
        Node& xn = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        const double count = static_cast<double>(batch * hw);
        for (std::int64_t c = 0; c < ch; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::int64_t b = 0; b < batch; ++b) {
                const float* p = xn.value.data() + (b * ch + c) * hw;
                const float* dy = self.grad.data() + (b * ch + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * (p[i] - mean[c]) * inv_std[c];
                }
            }
            if (gn.requires_grad) gn.grad_buffer()[c] += static_cast<float>(sum_dy_xhat);
            if (bn.requires_grad) bn.grad_buffer()[c] += static_cast<float>(sum_dy);
            if (!xn.requires_grad) continue;
            auto& dx = xn.grad_buffer();
            const float gscale = gn.value[c] * inv_std[c];
            for (std::int64_t b = 0; b < batch; ++b) {
                const float* p = xn.value.data() + (b * ch + c) * hw;
                const float* dy = self.grad.data() + (b * ch + c) * hw;
                float* d = dx.data() + (b * ch + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    if (training) {
                        const double xhat = (p[i] - mean[c]) * inv_std[c];
                        d[i] += static_cast<float>(gscale * (dy[i] - sum_dy / count - xhat * sum_dy_xhat / count));
                    } else {
                        d[i] += gscale * dy[i];
                    }
                }
            }
        }
    });
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad) {
    require(x.rank() == 4, "max_pool2d: expected (B,C,H,W)");
    bump(OpKind::max_pool);
    const std::int64_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t ho = (h + 2 * pad - kernel) / stride + 1;
    const std::int64_t wo = (w + 2 * pad - kernel) / stride + 1;
    std::vector<float> out(static_cast<std::size_t>(batch * ch * ho * wo));
    std::vector<std::int64_t> arg(out.size());
    const auto xd = x.data();
    for (std::int64_t bc = 0; bc < batch * ch; ++bc) {
        const float* p = xd.data() + bc * h * w;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
            for (std::int64_t ox = 0; ox < wo; ++ox) {
                float best = -std::numeric_limits<float>::infinity();
                std::int64_t best_i = -1;
                for (int ky = 0; ky < kernel; ++ky) {
                    const std::int64_t iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < kernel; ++kx) {
                        const std::int64_t ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        const float v = p[iy * w + ix];
                        if (v > best) {
                            best = v;
                            best_i = iy * w + ix;
                        }
                    }
                }
                const std::int64_t o = (bc * ho + oy) * wo + ox;
                out[o] = best;
                arg[o] = bc * h * w + best_i;
            }
        }
    }
    return make_result({batch, ch, ho, wo}, std::move(out), {x}, [arg = std::move(arg)](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < arg.size(); ++i) g[arg[i]] += self.grad[i];
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias) {
    require(weight.rank() == 2, "linear: weight must be 2-D");
    const std::int64_t in = weight.dim(1), out_dim = weight.dim(0);
    require(x.shape().back() == in, "linear: input width " + std::to_string(x.shape().back()) +
                                        " != weight width " + std::to_string(in));
    if (bias) require(bias->numel() == out_dim, "linear: bias size mismatch");
    bump(OpKind::linear);
    const std::int64_t rows = x.numel() / in;
    std::vector<float> out(static_cast<std::size_t>(rows * out_dim));
    MapMat y(out.data(), rows, out_dim);
    y.noalias() = MapConstMat(x.data().data(), rows, in) * MapConstMat(weight.data().data(), out_dim, in).transpose();
    if (bias) {
        Eigen::Map<const Eigen::RowVectorXf> bv(bias->data().data(), out_dim);
        y.rowwise() += bv;
    }
    Shape shape = x.shape();
    shape.back() = out_dim;
    std::vector<Tensor> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    const bool has_bias = bias != nullptr;
    return make_result(std::move(shape), std::move(out), std::move(inputs),
                       [rows, in, out_dim, has_bias](Node& self) {
        Node& xn = *self.inputs[0];
        Node& wn = *self.inputs[1];
        MapConstMat dy(self.grad.data(), rows, out_dim);
        if (xn.requires_grad) {
            MapMat(xn.grad_buffer().data(), rows, in).noalias() += dy * MapConstMat(wn.value.data(), out_dim, in);
        }
        if (wn.requires_grad) {
            MapMat(wn.grad_buffer().data(), out_dim, in).noalias() +=
                dy.transpose() * MapConstMat(xn.value.data(), rows, in);
        }
        if (has_bias && self.inputs[2]->requires_grad) {
            float* db = self.inputs[2]->grad_buffer().data();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t o = 0; o < out_dim; ++o) db[o] += self.grad[r * out_dim + o];
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    const std::int64_t d = x.shape().back();
    require(gamma.numel() == d && beta.numel() == d, "layer_norm: parameter size mismatch");
    bump(OpKind::layer_norm);
    const std::int64_t rows = x.numel() / d;
    const auto xd = x.data();
    std::vector<float> out(xd.size());
    std::vector<float> xhat(xd.size());
    std::vector<float> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const float* p = xd.data() + r * d;
        double m = 0.0;
        for (std::int64_t i = 0; i < d; ++i) m += p[i];
        m /= d;
        double v = 0.0;
        for (std::int64_t i = 0; i < d; ++i) v += (p[i] - m) * (p[i] - m);
        v /= d;
        inv_std[r] = static_cast<float>(1.0 / std::sqrt(v + eps));
        for (std::int64_t i = 0; i < d; ++i) {
            const float xh = static_cast<float>((p[i] - m) * inv_std[r]);
            xhat[r * d + i] = xh;
            out[r * d + i] = xh * gamma.data()[i] + beta.data()[i];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gamma, beta},
                       [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& xn = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        float* dg = gn.requires_grad ? gn.grad_buffer().data() : nullptr;
        float* db = bn.requires_grad ? bn.grad_buffer().data() : nullptr;
        float* dx = xn.requires_grad ? xn.grad_buffer().data() : nullptr;
        std::vector<float> dxhat(static_cast<std::size_t>(d));
        for (std::int64_t r = 0; r < rows; ++r) {
            const float* dy = self.grad.data() + r * d;
            const float* xh = xhat.data() + r * d;
            double s1 = 0.0, s2 = 0.0;
            for (std::int64_t i = 0; i < d; ++i) {
                if (dg) dg[i] += dy[i] * xh[i];
                if (db) db[i] += dy[i];
                dxhat[i] = dy[i] * gn.value[i];
                s1 += dxhat[i];
                s2 += dxhat[i] * xh[i];
            }
            if (!dx) continue;
            for (std::int64_t i = 0; i < d; ++i) {
                dx[r * d + i] += static_cast<float>(inv_std[r] * (dxhat[i] - s1 / d - xh[i] * s2 / d));
            }
        }
    });
}

Tensor attention(const Tensor& qkv, int heads) {
    require(qkv.rank() == 3 && qkv.dim(2) % 3 == 0, "attention: expected (B,N,3D)");
    const std::int64_t batch = qkv.dim(0), n = qkv.dim(1), d = qkv.dim(2) / 3;
    require(heads > 0 && d % heads == 0, "attention: heads must divide token width");
    bump(OpKind::attention);
    const std::int64_t dh = d / heads;
    const float scale_factor = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<float> out(static_cast<std::size_t>(batch * n * d));
    std::vector<float> probs(static_cast<std::size_t>(batch * heads * n * n));
    const float* src = qkv.data().data();
    RowMat q(n, dh), k(n, dh), v(n, dh);
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t h = 0; h < heads; ++h) {
            for (std::int64_t t = 0; t < n; ++t) {
                const float* row = src + (b * n + t) * 3 * d;
                for (std::int64_t e = 0; e < dh; ++e) {
                    q(t, e) = row[h * dh + e];
                    k(t, e) = row[d + h * dh + e];
                    v(t, e) = row[2 * d + h * dh + e];
                }
            }
            MapMat p(probs.data() + (b * heads + h) * n * n, n, n);
            p.noalias() = (q * k.transpose()) * scale_factor;
            // Plain loops: Eigen reductions over mapped rows vary with alignment.
            for (std::int64_t t = 0; t < n; ++t) {
                float* row = &p(t, 0);
                const float m = *std::max_element(row, row + n);
                float sum = 0.0f;
                for (std::int64_t u = 0; u < n; ++u) {
                    row[u] = std::exp(row[u] - m);
                    sum += row[u];
                }
                for (std::int64_t u = 0; u < n; ++u) row[u] /= sum;
            }
            RowMat o = p * v;
            for (std::int64_t t = 0; t < n; ++t) {
                for (std::int64_t e = 0; e < dh; ++e) out[(b * n + t) * d + h * dh + e] = o(t, e);
            }
        }
    }
    return make_result({batch, n, d}, std::move(out), {qkv},
                       [batch, n, d, dh, heads, scale_factor, probs = std::move(probs)](Node& self) {
        Node& in = *self.inputs[0];
        auto& g = in.grad_buffer();
        const float* src = in.value.data();
        RowMat q(n, dh), k(n, dh), v(n, dh), dout(n, dh);
        for (std::int64_t b = 0; b < batch; ++b) {
            for (std::int64_t h = 0; h < heads; ++h) {
                for (std::int64_t t = 0; t < n; ++t) {
                    const float* row = src + (b * n + t) * 3 * d;
                    for (std::int64_t e = 0; e < dh; ++e) {
                        q(t, e) = row[h * dh + e];
                        k(t, e) = row[d + h * dh + e];
                        v(t, e) = row[2 * d + h * dh + e];
                        dout(t, e) = self.grad[(b * n + t) * d + h * dh + e];
                    }
                }
                MapConstMat p(probs.data() + (b * heads + h) * n * n, n, n);
                RowMat dv = p.transpose() * dout;
                RowMat dp = dout * v.transpose();
                RowMat ds(n, n);
                for (std::int64_t t = 0; t < n; ++t) {
                    float dot = 0.0f;
                    for (std::int64_t u = 0; u < n; ++u) dot += p(t, u) * dp(t, u);
                    ds.row(t) = p.row(t).array() * (dp.row(t).array() - dot);
                }
                ds *= scale_factor;
                RowMat dq = ds * k;
                RowMat dk = ds.transpose() * q;
                for (std::int64_t t = 0; t < n; ++t) {
                    float* row = g.data() + (b * n + t) * 3 * d;
                    for (std::int64_t e = 0; e < dh; ++e) {
                        row[h * dh + e] += dq(t, e);
                        row[d + h * dh + e] += dk(t, e);
                        row[2 * d + h * dh + e] += dv(t, e);
                    }
                }
            }
        }
    });
}

Tensor to_tokens(const Tensor& x) {
    require(x.rank() == 4, "to_tokens: expected (B,C,H,W)");
    bump(OpKind::to_tokens);
    const std::int64_t batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<float> out(x.data().size());
    const auto xd = x.data();
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t c = 0; c < ch; ++c)
            for (std::int64_t i = 0; i < hw; ++i) out[(b * hw + i) * ch + c] = xd[(b * ch + c) * hw + i];
    return make_result({batch, hw, ch}, std::move(out), {x}, [batch, ch, hw](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t c = 0; c < ch; ++c)
                for (std::int64_t i = 0; i < hw; ++i) g[(b * ch + c) * hw + i] += self.grad[(b * hw + i) * ch + c];
    });
}

Tensor add_position(const Tensor& x, const Tensor& pos) {
    require(x.rank() == 3 && pos.rank() == 2 && x.dim(1) == pos.dim(0) && x.dim(2) == pos.dim(1),
            "add_position: expected x (B,N,D) and pos (N,D)");
    bump(OpKind::add_position);
    const std::int64_t nd = pos.numel();
    std::vector<float> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += pos.data()[i % nd];
    return make_result(x.shape(), std::move(out), {x, pos}, [nd](Node& self) {
        Node& xn = *self.inputs[0];
        Node& pn = *self.inputs[1];
        if (xn.requires_grad) {
            auto& g = xn.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pn.requires_grad) {
            auto& g = pn.grad_buffer();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % nd] += self.grad[i];
        }
    });
}

Tensor mean_tokens(const Tensor& x) {
    require(x.rank() == 3, "mean_tokens: expected (B,N,D)");
    bump(OpKind::mean_tokens);
    const std::int64_t batch = x.dim(0), n = x.dim(1), d = x.dim(2);
    std::vector<float> out(static_cast<std::size_t>(batch * d), 0.0f);
    const auto xd = x.data();
    for (std::int64_t b = 0; b < batch; ++b)
        for (std::int64_t t = 0; t < n; ++t)
            for (std::int64_t e = 0; e < d; ++e) out[b * d + e] += xd[(b * n + t) * d + e];
    for (auto& v : out) v /= static_cast<float>(n);
    return make_result({batch, d}, std::move(out), {x}, [batch, n, d](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const float inv = 1.0f / static_cast<float>(n);
        for (std::int64_t b = 0; b < batch; ++b)
            for (std::int64_t t = 0; t < n; ++t)
                for (std::int64_t e = 0; e < d; ++e) g[(b * n + t) * d + e] += self.grad[b * d + e] * inv;
    });
}

Tensor mean_features(const Tensor& x) {
    require(x.rank() == 3, "mean_features: expected (B,N,D)");
    bump(OpKind::mean_features);
    const std::int64_t rows = x.dim(0) * x.dim(1), d = x.dim(2);
    std::vector<float> out(static_cast<std::size_t>(rows), 0.0f);
    const auto xd = x.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::int64_t e = 0; e < d; ++e) s += xd[r * d + e];
        out[r] = static_cast<float>(s / d);
    }
    return make_result({x.dim(0), x.dim(1)}, std::move(out), {x}, [rows, d](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const float inv = 1.0f / static_cast<float>(d);
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t e = 0; e < d; ++e) g[r * d + e] += self.grad[r] * inv;
    });
}

Tensor mean_spatial(const Tensor& x) {
    require(x.rank() == 4, "mean_spatial: expected (B,C,H,W)");
    bump(OpKind::mean_spatial);
    const std::int64_t rows = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<float> out(static_cast<std::size_t>(rows));
    const auto xd = x.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::int64_t i = 0; i < hw; ++i) s += xd[r * hw + i];
        out[r] = static_cast<float>(s / hw);
    }
    return make_result({x.dim(0), x.dim(1)}, std::move(out), {x}, [rows, hw](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        const float inv = 1.0f / static_cast<float>(hw);
        for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t i = 0; i < hw; ++i) g[r * hw + i] += self.grad[r] * inv;
    });
}

namespace {
// x viewed as (units, inner) where unit u is masked by masks[u].
Tensor mask_units(const Tensor& x, std::span<const float> masks, std::int64_t inner) {
    std::vector<float> m(masks.begin(), masks.end());
    std::vector<float> out(x.data().begin(), x.data().end());
    for (std::size_t u = 0; u < m.size(); ++u)
        for (std::int64_t i = 0; i < inner; ++i) out[u * inner + i] *= m[u];
    return make_result(x.shape(), std::move(out), {x}, [m = std::move(m), inner](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t u = 0; u < m.size(); ++u)
            for (std::int64_t i = 0; i < inner; ++i) g[u * inner + i] += self.grad[u * inner + i] * m[u];
    });
}
}  // namespace

Tensor mask_channels(const Tensor& x, std::span<const float> masks) {
    require(x.rank() == 4, "mask_channels: expected (B,C,H,W)");
    require(static_cast<std::int64_t>(masks.size()) == x.dim(0) * x.dim(1),
            "mask_channels: mask length does not match channel count");
    bump(OpKind::mask_channels);
    return mask_units(x, masks, x.dim(2) * x.dim(3));
}

Tensor mask_tokens(const Tensor& x, std::span<const float> masks) {
    require(x.rank() == 3, "mask_tokens: expected (B,N,D)");
    require(static_cast<std::int64_t>(masks.size()) == x.dim(0) * x.dim(1),
            "mask_tokens: mask length does not match token count");
    bump(OpKind::mask_tokens);
    return mask_units(x, masks, x.dim(2));
}

Tensor gradient_reversal(const Tensor& x, float lambda) {
    if (lambda < 0.0f) throw ConfigError("gradient_reversal: lambda must be >= 0");
    bump(OpKind::grad_reversal);
    std::vector<float> out(x.data().begin(), x.data().end());
    return make_result(x.shape(), std::move(out), {x}, [lambda](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += -lambda * self.grad[i];
    });
}

Tensor slice_batch(const Tensor& x, std::int64_t begin, std::int64_t end) {
    require(begin >= 0 && begin < end && end <= x.dim(0), "slice_batch: bad range");
    bump(OpKind::slice_batch);
    const std::int64_t inner = x.numel() / x.dim(0);
    std::vector<float> out(x.data().begin() + begin * inner, x.data().begin() + end * inner);
    Shape shape = x.shape();
    shape[0] = end - begin;
    return make_result(std::move(shape), std::move(out), {x}, [begin, inner](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * inner + i] += self.grad[i];
    });
}

Tensor concat_batch(const Tensor& a, const Tensor& b) {
    require(a.rank() == b.rank(), "concat_batch: rank mismatch");
    for (std::size_t i = 1; i < a.rank(); ++i) require(a.dim(i) == b.dim(i), "concat_batch: shape mismatch");
    bump(OpKind::concat_batch);
    std::vector<float> out(a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    const std::size_t split = a.data().size();
    return make_result(std::move(shape), std::move(out), {a, b}, [split](Node& self) {
        if (self.inputs[0]->requires_grad) {
            auto& g = self.inputs[0]->grad_buffer();
            for (std::size_t i = 0; i < split; ++i) g[i] += self.grad[i];
        }
        if (self.inputs[1]->requires_grad) {
            auto& g = self.inputs[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[split + i];
        }
    });
}

Tensor au_loss(const Tensor& logits, std::span<const float> labels) {
    require(logits.rank() == 2, "au_loss: logits must be (B,J)");
    require(static_cast<std::int64_t>(labels.size()) == logits.numel(), "au_loss: labels size mismatch");
    bump(OpKind::au_loss);
    const std::vector<double> z(logits.data().begin(), logits.data().end());
    const std::vector<double> y(labels.begin(), labels.end());
    auto res = losses::au_loss(z, y, static_cast<int>(logits.dim(0)), static_cast<int>(logits.dim(1)));
    return make_result({1}, {static_cast<float>(res.loss)}, {logits}, [grad = std::move(res.grad)](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<float>(grad[i] * self.grad[0]);
    });
}

Tensor domain_head_loss(const Tensor& pooled, const Tensor& weight, const Tensor& bias,
                        std::span<const int> domains) {
    require(pooled.rank() == 2, "domain_head_loss: pooled must be (B,K)");
    require(weight.rank() == 2 && weight.dim(0) == 2 && weight.dim(1) == pooled.dim(1),
            "domain_head_loss: discriminator width " + (weight.rank() == 2 ? std::to_string(weight.dim(1)) : std::string("?")) +
                " does not match feature width " + std::to_string(pooled.dim(1)));
    require(static_cast<std::int64_t>(domains.size()) == pooled.dim(0), "domain_head_loss: domains size mismatch");
    bump(OpKind::domain_head);
    const std::vector<double> p(pooled.data().begin(), pooled.data().end());
    const std::vector<double> w(weight.data().begin(), weight.data().end());
    const std::vector<double> bb(bias.data().begin(), bias.data().end());
    auto res = losses::domain_head(p, w, bb, domains, static_cast<int>(pooled.dim(0)), static_cast<int>(pooled.dim(1)));
    const auto loss = static_cast<float>(res.loss);
    return make_result({1}, {loss}, {pooled, weight, bias}, [res = std::move(res)](Node& self) {
        const double up = self.grad[0];
        const std::vector<double>* grads[3] = {&res.d_pooled, &res.d_weight, &res.d_bias};
        for (int k = 0; k < 3; ++k) {
            if (!self.inputs[k]->requires_grad) continue;
            auto& g = self.inputs[k]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<float>((*grads[k])[i] * up);
        }
    });
}

}  // namespace ops
}  // namespace dadrop
