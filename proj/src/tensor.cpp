// SPDX-License-Identifier: Apache-2.0
#include "sop2/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <sstream>

namespace sop2 {

namespace {

constexpr double kMaskBias = -1e30;

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw DimensionError("negative extent in shape " + Tensor::shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             Tensor::shape_str(a.shape()) + " vs " +
                             Tensor::shape_str(b.shape()));
    }
}

void require_rank2(const Tensor& x, const char* op) {
    if (x.rank() != 2) {
        throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " +
                             Tensor::shape_str(x.shape()));
    }
}

bool tracking(const Tensor& t) { return Tape::current() != nullptr && t.requires_grad(); }

// Marks `out` as a tape product and registers its reverse step.
void record(Tensor& out, std::function<void()> step) {
    out.set_requires_grad(true);
    Tape::current()->record(out.storage(), std::move(step));
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    Tensor t;
    std::size_t n = shape_numel(shape);
    t.s_->shape = std::move(shape);
    t.s_->value.assign(n, 0.0);
    t.s_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.s_->value.begin(), t.s_->value.end(), v);
    return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("from: shape " + shape_str(shape) + " does not hold " +
                             std::to_string(data.size()) + " values");
    }
    Tensor t;
    t.s_->shape = std::move(shape);
    t.s_->value = std::move(data);
    t.s_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item: tensor " + shape_str(shape()) + " is not a scalar");
    }
    return s_->value[0];
}

Tensor Tensor::clone() const {
    Tensor t;
    t.s_->shape = s_->shape;
    t.s_->value = s_->value;
    t.s_->requires_grad = s_->requires_grad;
    t.s_->name = s_->name;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : s_->value) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::check_finite(const std::string& context) const {
    if (!all_finite()) {
        throw NumericError("non-finite value in tensor '" +
                           (s_->name.empty() ? context : s_->name) + "' (" + context + ")");
    }
}

std::string Tensor::shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << ")";
    return os.str();
}

// ---- Tape ------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape::Tape() : prev_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::current() { return g_active_tape; }

void Tape::record(std::shared_ptr<Tensor::Storage> out, std::function<void()> backward_step) {
    entries_.push_back({std::move(out), std::move(backward_step)});
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be a scalar, got " +
                            Tensor::shape_str(loss.shape()));
    }
    bool found = false;
    for (auto& e : entries_) {
        e.out->ensure_grad();
        std::fill(e.out->grad.begin(), e.out->grad.end(), 0.0);
        if (e.out == loss.storage()) found = true;
    }
    if (!found) {
        throw ContractError("backward: loss was not produced on this tape");
    }
    loss.storage()->grad[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        it->step();
    }
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (tracking(a) || tracking(b)) {
        auto sa = a.storage(), sb = b.storage(), so = out.storage();
        record(out, [sa, sb, so] {
            const std::size_t m = so->numel();
            if (sa->requires_grad) {
                sa->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) sa->grad[i] += so->grad[i];
            }
            if (sb->requires_grad) {
                sb->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) sb->grad[i] += so->grad[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (tracking(a) || tracking(b)) {
        auto sa = a.storage(), sb = b.storage(), so = out.storage();
        record(out, [sa, sb, so] {
            const std::size_t m = so->numel();
            if (sa->requires_grad) {
                sa->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) sa->grad[i] += so->grad[i];
            }
            if (sb->requires_grad) {
                sb->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) sb->grad[i] -= so->grad[i];
            }
        });
    }
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (tracking(a) || tracking(b)) {
        auto sa = a.storage(), sb = b.storage(), so = out.storage();
        record(out, [sa, sb, so] {
            const std::size_t m = so->numel();
            if (sa->requires_grad) {
                sa->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) sa->grad[i] += so->grad[i] * sb->value[i];
            }
            if (sb->requires_grad) {
                sb->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) sb->grad[i] += so->grad[i] * sa->value[i];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (tracking(a)) {
        auto sa = a.storage(), so = out.storage();
        record(out, [sa, so, c] {
            sa->ensure_grad();
            const std::size_t m = so->numel();
            for (std::size_t i = 0; i < m; ++i) sa->grad[i] += so->grad[i] * c;
        });
    }
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so] {
            sx->ensure_grad();
            const std::size_t m = so->numel();
            for (std::size_t i = 0; i < m; ++i) {
                if (sx->value[i] > 0.0) sx->grad[i] += so->grad[i];
            }
        });
    }
    return out;
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double z = x.data()[i];
        out.data()[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                 : std::exp(z) / (1.0 + std::exp(z));
    }
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so] {
            sx->ensure_grad();
            const std::size_t m = so->numel();
            for (std::size_t i = 0; i < m; ++i) {
                const double y = so->value[i];
                sx->grad[i] += so->grad[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

Tensor abs_val(const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::fabs(x.data()[i]);
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so] {
            sx->ensure_grad();
            const std::size_t m = so->numel();
            for (std::size_t i = 0; i < m; ++i) {
                const double v = sx->value[i];
                // subgradient 0 at the kink
                sx->grad[i] += so->grad[i] * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
            }
        });
    }
    return out;
}

Tensor pow_const(const Tensor& x, double e) {
    Tensor out = Tensor::zeros(x.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::pow(x.data()[i], e);
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so, e] {
            sx->ensure_grad();
            const std::size_t m = so->numel();
            for (std::size_t i = 0; i < m; ++i) {
                sx->grad[i] += so->grad[i] * e * std::pow(sx->value[i], e - 1.0);
            }
        });
    }
    return out;
}

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so] {
            sx->ensure_grad();
            const double g = so->grad[0];
            for (double& gi : sx->grad) gi += g;
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + Tensor::shape_str(x.shape()) + " to " +
                             Tensor::shape_str(shape) + " changes element count");
    }
    Tensor out = Tensor::from(std::move(shape), x.data());
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so] {
            sx->ensure_grad();
            const std::size_t m = so->numel();
            for (std::size_t i = 0; i < m; ++i) sx->grad[i] += so->grad[i];
        });
    }
    return out;
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner extents disagree, " +
                             Tensor::shape_str(a.shape()) + " x " +
                             Tensor::shape_str(b.shape()));
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            if (av == 0.0) continue;
            const double* brow = pb + static_cast<std::size_t>(p) * n;
            double* orow = po + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    if (tracking(a) || tracking(b)) {
        auto sa = a.storage(), sb = b.storage(), so = out.storage();
        record(out, [sa, sb, so, m, k, n] {
            const double* go = so->grad.data();
            if (sa->requires_grad) {
                sa->ensure_grad();
                // dA = dC . B^T
                for (int i = 0; i < m; ++i) {
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* grow = go + static_cast<std::size_t>(i) * n;
                        const double* brow = sb->value.data() + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        sa->grad[static_cast<std::size_t>(i) * k + p] += acc;
                    }
                }
            }
            if (sb->requires_grad) {
                sb->ensure_grad();
                // dB = A^T . dC
                for (int i = 0; i < m; ++i) {
                    const double* arow = sa->value.data() + static_cast<std::size_t>(i) * k;
                    const double* grow = go + static_cast<std::size_t>(i) * n;
                    for (int p = 0; p < k; ++p) {
                        const double av = arow[p];
                        if (av == 0.0) continue;
                        double* brow = sb->grad.data() + static_cast<std::size_t>(p) * n;
                        for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.data()[static_cast<std::size_t>(j) * m + i] =
                a.data()[static_cast<std::size_t>(i) * n + j];
    if (tracking(a)) {
        auto sa = a.storage(), so = out.storage();
        record(out, [sa, so, m, n] {
            sa->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    sa->grad[static_cast<std::size_t>(i) * n + j] +=
                        so->grad[static_cast<std::size_t>(j) * m + i];
        });
    }
    return out;
}

// ---- normalizations ------------------------------------------------------

Tensor softmax(const Tensor& x) {
    if (x.rank() < 1) throw DimensionError("softmax: rank-0 input");
    const int n = x.shape().back();
    if (n == 0) throw DimensionError("softmax: empty last axis");
    const std::size_t rows = x.numel() / static_cast<std::size_t>(n);
    Tensor out = Tensor::zeros(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = x.data().data() + r * n;
        double* yi = out.data().data() + r * n;
        double mx = xi[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            z += yi[j];
        }
        for (int j = 0; j < n; ++j) yi[j] /= z;
    }
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so, rows, n] {
            sx->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = so->value.data() + r * n;
                const double* gy = so->grad.data() + r * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
                double* gx = sx->grad.data() + r * n;
                for (int j = 0; j < n; ++j) gx[j] += (gy[j] - dot) * y[j];
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.rank() < 1) throw DimensionError("layer_norm: rank-0 input");
    const int c = x.shape().back();
    if (gamma.numel() != static_cast<std::size_t>(c) ||
        beta.numel() != static_cast<std::size_t>(c)) {
        throw DimensionError("layer_norm: gamma/beta extent mismatch with channels " +
                             std::to_string(c));
    }
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / static_cast<std::size_t>(c);
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> inv_std(rows), means(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = x.data().data() + r * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += xi[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
        var /= c;
        const double istd = 1.0 / std::sqrt(var + eps);
        means[r] = mean;
        inv_std[r] = istd;
        double* yi = out.data().data() + r * c;
        for (int j = 0; j < c; ++j) {
            yi[j] = (xi[j] - mean) * istd * gamma.data()[j] + beta.data()[j];
        }
    }
    if (tracking(x) || tracking(gamma) || tracking(beta)) {
        auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage(), so = out.storage();
        record(out, [sx, sg, sb, so, rows, c, means, inv_std] {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* xi = sx->value.data() + r * c;
                const double* gy = so->grad.data() + r * c;
                const double mean = means[r];
                const double istd = inv_std[r];
                if (sg->requires_grad) {
                    sg->ensure_grad();
                    for (int j = 0; j < c; ++j) {
                        sg->grad[j] += gy[j] * (xi[j] - mean) * istd;
                    }
                }
                if (sb->requires_grad) {
                    sb->ensure_grad();
                    for (int j = 0; j < c; ++j) sb->grad[j] += gy[j];
                }
                if (sx->requires_grad) {
                    sx->ensure_grad();
                    // dL/dxhat_j = gy_j * gamma_j; standard layernorm backward
                    double sum_g = 0.0, sum_gx = 0.0;
                    for (int j = 0; j < c; ++j) {
                        const double gh = gy[j] * sg->value[j];
                        sum_g += gh;
                        sum_gx += gh * (xi[j] - mean) * istd;
                    }
                    double* gx = sx->grad.data() + r * c;
                    for (int j = 0; j < c; ++j) {
                        const double gh = gy[j] * sg->value[j];
                        const double xhat = (xi[j] - mean) * istd;
                        gx[j] += istd * (gh - sum_g / c - xhat * sum_gx / c);
                    }
                }
            }
        });
    }
    return out;
}

// ---- token/row structure -----------------------------------------------------

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no parts");
    int c = -1;
    int total = 0;
    for (const Tensor& p : parts) {
        require_rank2(p, "concat_rows");
        if (c < 0) c = p.dim(1);
        if (p.dim(1) != c) {
            throw DimensionError("concat_rows: channel mismatch " +
                                 Tensor::shape_str(parts[0].shape()) + " vs " +
                                 Tensor::shape_str(p.shape()));
        }
        total += p.dim(0);
    }
    Tensor out = Tensor::zeros({total, c});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.numel();
    }
    bool track = false;
    for (const Tensor& p : parts) track = track || tracking(p);
    if (track) {
        std::vector<std::shared_ptr<Tensor::Storage>> srcs;
        for (const Tensor& p : parts) srcs.push_back(p.storage());
        auto so = out.storage();
        record(out, [srcs, so] {
            std::size_t off2 = 0;
            for (auto& s : srcs) {
                const std::size_t m = s->numel();
                if (s->requires_grad) {
                    s->ensure_grad();
                    for (std::size_t i = 0; i < m; ++i) s->grad[i] += so->grad[off2 + i];
                }
                off2 += m;
            }
        });
    }
    return out;
}

Tensor concat_tokens(const Tensor& a, const Tensor& b) { return concat_rows({a, b}); }

Tensor slice_rows(const Tensor& x, int r0, int r1) {
    require_rank2(x, "slice_rows");
    if (r0 < 0 || r1 < r0 || r1 > x.dim(0)) {
        throw DimensionError("slice_rows: range [" + std::to_string(r0) + "," +
                             std::to_string(r1) + ") out of " + Tensor::shape_str(x.shape()));
    }
    const int c = x.dim(1);
    Tensor out = Tensor::zeros({r1 - r0, c});
    std::copy(x.data().begin() + static_cast<std::size_t>(r0) * c,
              x.data().begin() + static_cast<std::size_t>(r1) * c, out.data().begin());
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so, r0, c] {
            sx->ensure_grad();
            const std::size_t m = so->numel();
            const std::size_t base = static_cast<std::size_t>(r0) * c;
            for (std::size_t i = 0; i < m; ++i) sx->grad[base + i] += so->grad[i];
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
    require_rank2(x, "slice_cols");
    if (c0 < 0 || c1 < c0 || c1 > x.dim(1)) {
        throw DimensionError("slice_cols: range [" + std::to_string(c0) + "," +
                             std::to_string(c1) + ") out of " + Tensor::shape_str(x.shape()));
    }
    const int n = x.dim(0), c = x.dim(1), w = c1 - c0;
    Tensor out = Tensor::zeros({n, w});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j)
            out.data()[static_cast<std::size_t>(i) * w + j] =
                x.data()[static_cast<std::size_t>(i) * c + c0 + j];
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so, n, c, c0, w] {
            sx->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < w; ++j)
                    sx->grad[static_cast<std::size_t>(i) * c + c0 + j] +=
                        so->grad[static_cast<std::size_t>(i) * w + j];
        });
    }
    return out;
}

Tensor add_bias_rows(const Tensor& x, const Tensor& b) {
    require_rank2(x, "add_bias_rows");
    const int n = x.dim(0), c = x.dim(1);
    if (b.numel() != static_cast<std::size_t>(c)) {
        throw DimensionError("add_bias_rows: bias " + Tensor::shape_str(b.shape()) +
                             " vs channels " + std::to_string(c));
    }
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<std::size_t>(i) * c + j] =
                x.data()[static_cast<std::size_t>(i) * c + j] + b.data()[j];
    if (tracking(x) || tracking(b)) {
        auto sx = x.storage(), sb = b.storage(), so = out.storage();
        record(out, [sx, sb, so, n, c] {
            if (sx->requires_grad) {
                sx->ensure_grad();
                const std::size_t m = so->numel();
                for (std::size_t i = 0; i < m; ++i) sx->grad[i] += so->grad[i];
            }
            if (sb->requires_grad) {
                sb->ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < c; ++j)
                        sb->grad[j] += so->grad[static_cast<std::size_t>(i) * c + j];
            }
        });
    }
    return out;
}

Tensor scale_rows(const Tensor& x, const std::vector<double>& factors) {
    require_rank2(x, "scale_rows");
    const int n = x.dim(0), c = x.dim(1);
    if (factors.size() != static_cast<std::size_t>(n)) {
        throw DimensionError("scale_rows: " + std::to_string(factors.size()) +
                             " factors vs " + std::to_string(n) + " rows");
    }
    Tensor out = Tensor::zeros(x.shape());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<std::size_t>(i) * c + j] =
                x.data()[static_cast<std::size_t>(i) * c + j] * factors[static_cast<std::size_t>(i)];
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so, n, c, factors] {
            sx->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < c; ++j)
                    sx->grad[static_cast<std::size_t>(i) * c + j] +=
                        so->grad[static_cast<std::size_t>(i) * c + j] *
                        factors[static_cast<std::size_t>(i)];
        });
    }
    return out;
}

Tensor max_pool_rows(const Tensor& x, const Mask& mask) {
    require_rank2(x, "max_pool_rows");
    const int n = x.dim(0), c = x.dim(1);
    if (mask.size() != static_cast<std::size_t>(n)) {
        throw DimensionError("max_pool_rows: mask length " + std::to_string(mask.size()) +
                             " vs " + std::to_string(n) + " rows");
    }
    bool any = false;
    for (std::uint8_t m : mask) any = any || (m != 0);
    if (!any) throw EmptySetError("max_pool_rows: all rows masked out");
    Tensor out = Tensor::zeros({c});
    std::vector<int> argmax(static_cast<std::size_t>(c), -1);
    for (int j = 0; j < c; ++j) {
        double best = -std::numeric_limits<double>::infinity();
        int bi = -1;
        for (int i = 0; i < n; ++i) {
            if (!mask[static_cast<std::size_t>(i)]) continue;
            const double v = x.data()[static_cast<std::size_t>(i) * c + j];
            if (v > best) {  // strict: first maximal row wins ties
                best = v;
                bi = i;
            }
        }
        out.data()[static_cast<std::size_t>(j)] = best;
        argmax[static_cast<std::size_t>(j)] = bi;
    }
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so, c, argmax] {
            sx->ensure_grad();
            for (int j = 0; j < c; ++j) {
                const int bi = argmax[static_cast<std::size_t>(j)];
                if (bi < 0) continue;
                sx->grad[static_cast<std::size_t>(bi) * c + j] +=
                    so->grad[static_cast<std::size_t>(j)];
            }
        });
    }
    return out;
}

Tensor cosine_similarity(const Tensor& u, const Tensor& v, double eps) {
    if (u.numel() != v.numel()) {
        throw DimensionError("cosine_similarity: " + Tensor::shape_str(u.shape()) + " vs " +
                             Tensor::shape_str(v.shape()));
    }
    if (eps <= 0.0) throw ContractError("cosine_similarity: eps must be positive");
    const std::size_t n = u.numel();
    double dot = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += u.data()[i] * v.data()[i];
        uu += u.data()[i] * u.data()[i];
        vv += v.data()[i] * v.data()[i];
    }
    const double nu = std::sqrt(uu), nv = std::sqrt(vv);
    const double au = std::max(nu, eps), av = std::max(nv, eps);
    const double s = dot / (au * av);
    Tensor out = Tensor::scalar(s);
    if (tracking(u) || tracking(v)) {
        auto su = u.storage(), sv = v.storage(), so = out.storage();
        const bool u_clamped = nu < eps, v_clamped = nv < eps;
        record(out, [su, sv, so, n, au, av, s, u_clamped, v_clamped] {
            const double g = so->grad[0];
            if (su->requires_grad) {
                su->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double d = sv->value[i] / (au * av);
                    if (!u_clamped) d -= s * su->value[i] / (au * au);
                    su->grad[i] += g * d;
                }
            }
            if (sv->requires_grad) {
                sv->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    double d = su->value[i] / (au * av);
                    if (!v_clamped) d -= s * sv->value[i] / (av * av);
                    sv->grad[i] += g * d;
                }
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    require_rank2(x, "gather_rows");
    const int c = x.dim(1), v = x.dim(0);
    const int n = static_cast<int>(rows.size());
    Tensor out = Tensor::zeros({n, c});
    for (int i = 0; i < n; ++i) {
        const int r = rows[static_cast<std::size_t>(i)];
        if (r < 0) continue;  // padding slot stays zero
        if (r >= v) throw DimensionError("gather_rows: index " + std::to_string(r) +
                                         " out of " + Tensor::shape_str(x.shape()));
        std::copy(x.data().begin() + static_cast<std::size_t>(r) * c,
                  x.data().begin() + static_cast<std::size_t>(r + 1) * c,
                  out.data().begin() + static_cast<std::size_t>(i) * c);
    }
    if (tracking(x)) {
        auto sx = x.storage(), so = out.storage();
        record(out, [sx, so, rows, c] {
            sx->ensure_grad();
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const int r = rows[i];
                if (r < 0) continue;
                for (int j = 0; j < c; ++j)
                    sx->grad[static_cast<std::size_t>(r) * c + j] += so->grad[i * c + j];
            }
        });
    }
    return out;
}

Tensor scatter_rows(const std::vector<Tensor>& parts,
                    const std::vector<std::vector<int>>& rows, int out_rows) {
    if (parts.size() != rows.size()) {
        throw DimensionError("scatter_rows: " + std::to_string(parts.size()) + " parts vs " +
                             std::to_string(rows.size()) + " index lists");
    }
    int c = -1;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        require_rank2(parts[p], "scatter_rows");
        if (c < 0) c = parts[p].dim(1);
        if (parts[p].dim(1) != c) {
            throw DimensionError("scatter_rows: channel mismatch across parts");
        }
        if (rows[p].size() != static_cast<std::size_t>(parts[p].dim(0))) {
            throw DimensionError("scatter_rows: part " + std::to_string(p) +
                                 " row count mismatch");
        }
    }
    if (c < 0) c = 0;
    Tensor out = Tensor::zeros({out_rows, c});
    for (std::size_t p = 0; p < parts.size(); ++p) {
        for (std::size_t i = 0; i < rows[p].size(); ++i) {
            const int r = rows[p][i];
            if (r < 0) continue;
            if (r >= out_rows) throw DimensionError("scatter_rows: target row out of range");
            for (int j = 0; j < c; ++j)
                out.data()[static_cast<std::size_t>(r) * c + j] +=
                    parts[p].data()[i * static_cast<std::size_t>(c) + j];
        }
    }
    bool track = false;
    for (const Tensor& p : parts) track = track || tracking(p);
    if (track) {
        std::vector<std::shared_ptr<Tensor::Storage>> srcs;
        for (const Tensor& p : parts) srcs.push_back(p.storage());
        auto so = out.storage();
        const int cc = c;
        record(out, [srcs, so, rows, cc] {
            for (std::size_t p = 0; p < srcs.size(); ++p) {
                if (!srcs[p]->requires_grad) continue;
                srcs[p]->ensure_grad();
                for (std::size_t i = 0; i < rows[p].size(); ++i) {
                    const int r = rows[p][i];
                    if (r < 0) continue;
                    for (int j = 0; j < cc; ++j)
                        srcs[p]->grad[i * static_cast<std::size_t>(cc) + j] +=
                            so->grad[static_cast<std::size_t>(r) * cc + j];
                }
            }
        });
    }
    return out;
}

Tensor bce_with_logits(const Tensor& z, const Tensor& y) {
    require_same_shape(z, y, "bce_with_logits");
    if (y.requires_grad()) {
        throw ContractError("bce_with_logits: targets must be constant");
    }
    Tensor out = Tensor::zeros(z.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double zi = z.data()[i];
        out.data()[i] = std::max(zi, 0.0) - zi * y.data()[i] + std::log1p(std::exp(-std::fabs(zi)));
    }
    if (tracking(z)) {
        auto sz = z.storage(), sy = y.storage(), so = out.storage();
        record(out, [sz, sy, so] {
            sz->ensure_grad();
            const std::size_t m = so->numel();
            for (std::size_t i = 0; i < m; ++i) {
                const double zi = sz->value[i];
                const double p = zi >= 0.0 ? 1.0 / (1.0 + std::exp(-zi))
                                           : std::exp(zi) / (1.0 + std::exp(zi));
                sz->grad[i] += so->grad[i] * (p - sy->value[i]);
            }
        });
    }
    return out;
}

// ---- layers ----------------------------------------------------------------

Tensor Linear::forward(const Tensor& x) const {
    Tensor out = add_bias_rows(matmul(x, w), b);
    if (lora) {
        Tensor delta = matmul(matmul(x, lora->down), lora->up);
        out = add(out, scale(delta, lora->scaling()));
    }
    return out;
}

Tensor mhsa(const Tensor& tokens, const Mask& mask, const AttentionWeights& w, int heads) {
    require_rank2(tokens, "mhsa");
    const int n = tokens.dim(0), c = tokens.dim(1);
    if (mask.size() != static_cast<std::size_t>(n)) {
        throw DimensionError("mhsa: mask length mismatch");
    }
    if (heads < 1 || c % heads != 0) {
        throw ConfigError("mhsa: heads=" + std::to_string(heads) +
                          " must divide channels=" + std::to_string(c));
    }
    const int d = c / heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<double> keep(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) keep[static_cast<std::size_t>(i)] = mask[static_cast<std::size_t>(i)] ? 1.0 : 0.0;

    // Zero masked rows up front so their content can never reach a valid row.
    Tensor x = scale_rows(tokens, keep);
    Tensor q = w.q.forward(x);
    Tensor k = w.k.forward(x);
    Tensor v = w.v.forward(x);

    // Additive key bias: -1e30 on masked columns.
    Tensor key_bias = Tensor::zeros({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (!mask[static_cast<std::size_t>(j)])
                key_bias.data()[static_cast<std::size_t>(i) * n + j] = kMaskBias;

    std::vector<Tensor> head_outs_t;  // each [d x n]
    head_outs_t.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * d, (h + 1) * d);
        Tensor kh = slice_cols(k, h * d, (h + 1) * d);
        Tensor vh = slice_cols(v, h * d, (h + 1) * d);
        Tensor scores = add(scale(matmul(qh, transpose(kh)), att_scale), key_bias);
        Tensor attn = softmax(scores);
        head_outs_t.push_back(transpose(matmul(attn, vh)));
    }
    Tensor concat = transpose(concat_rows(head_outs_t));  // [n x C]
    Tensor out = w.o.forward(concat);
    // Masked query rows come out as zeros.
    return scale_rows(out, keep);
}

// ---- gradient oracle -------------------------------------------------------

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor x, double h) {
    if (h <= 0.0) throw ContractError("finite_diff_grad: h must be positive");
    Tensor g = Tensor::zeros(x.shape());
    const std::size_t n = x.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const double saved = x.data()[i];
        x.data()[i] = saved + h;
        const double fp = f(x);
        x.data()[i] = saved - h;
        const double fm = f(x);
        x.data()[i] = saved;
        g.data()[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// ---- init ------------------------------------------------------------------

std::uint64_t name_hash(const std::string& name) {
    // FNV-1a
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : name) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

void fill_uniform(Tensor& t, double lo, double hi, std::uint64_t seed) {
    std::mt19937_64 rng(seed ^ (name_hash(t.name()) * 0x9e3779b97f4a7c15ull + 0x2545f4914f6cdd1dull));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.data()) v = dist(rng);
}

}  // namespace sop2
