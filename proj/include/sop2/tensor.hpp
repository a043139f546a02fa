// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sop2/error.hpp"

namespace sop2 {

using Mask = std::vector<std::uint8_t>;

// Dense row-major tensor of 64-bit floats with optional participation in
// reverse-mode differentiation. Copies share storage; values are treated
// as immutable once produced by an operation (the optimizer mutates
// parameter storage explicitly, outside any tape).
class Tensor {
  public:
    struct Storage {
        std::vector<int> shape;
        std::vector<double> value;
        std::vector<double> grad;  // empty until first needed
        bool requires_grad = false;
        std::string name;

        std::size_t numel() const { return value.size(); }
        void ensure_grad() {
            if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        }
    };

    Tensor() : s_(std::make_shared<Storage>()) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double v);
    static Tensor from(std::vector<int> shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor scalar(double v);

    const std::vector<int>& shape() const { return s_->shape; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return s_->value.size(); }

    std::vector<double>& data() { return s_->value; }
    const std::vector<double>& data() const { return s_->value; }

    double item() const;
    double at(int i) const { return s_->value[static_cast<std::size_t>(i)]; }
    double at(int i, int j) const {
        return s_->value[static_cast<std::size_t>(i) *
                             static_cast<std::size_t>(s_->shape.back()) +
                         static_cast<std::size_t>(j)];
    }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool b) { s_->requires_grad = b; }

    const std::string& name() const { return s_->name; }
    Tensor& set_name(std::string n) {
        s_->name = std::move(n);
        return *this;
    }

    std::vector<double>& grad() {
        s_->ensure_grad();
        return s_->grad;
    }
    const std::vector<double>& grad() const {
        s_->ensure_grad();
        return s_->grad;
    }
    bool has_grad() const { return !s_->grad.empty(); }
    void zero_grad() {
        if (!s_->grad.empty()) s_->grad.assign(s_->value.size(), 0.0);
    }

    // Deep copy: fresh storage, same values, grad not copied.
    Tensor clone() const;

    bool all_finite() const;
    // Throws NumericError naming the tensor if any entry is NaN/Inf.
    void check_finite(const std::string& context) const;

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }
    const std::shared_ptr<Storage>& storage() const { return s_; }

    static std::string shape_str(const std::vector<int>& shape);

  private:
    std::shared_ptr<Storage> s_;
};

// Ordered record of primitive applications. Constructing a Tape makes it
// the active tape for the current thread; destruction restores the
// previous one. Single-threaded by design: parallel forward passes need
// independent tapes on independent threads.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    void record(std::shared_ptr<Tensor::Storage> out,
                std::function<void()> backward_step);

    // Zeroes the gradients of every tape-produced value, seeds
    // d(loss)/d(loss) = 1 and replays the record in reverse. Leaf
    // gradients accumulate; the caller zeroes them between passes.
    void backward(const Tensor& loss);

    std::size_t size() const { return entries_.size(); }

  private:
    struct Entry {
        std::shared_ptr<Tensor::Storage> out;
        std::function<void()> step;
    };
    std::vector<Entry> entries_;
    Tape* prev_ = nullptr;
};

// ---- primitive operations ------------------------------------------------
// Every op is pure: inputs untouched, fresh output storage. When a tape is
// active and any input requires grad, the op registers its reverse step.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs_val(const Tensor& x);
Tensor pow_const(const Tensor& x, double e);
Tensor sum_all(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<int> shape);

// Softmax over the last axis with max-subtraction stabilization.
Tensor softmax(const Tensor& x);

// Per-row normalization to zero mean / unit variance (population
// variance, eps inside the square root), then gamma * x + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

// Row concatenation along the token dimension; all parts share the
// channel extent.
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_tokens(const Tensor& a, const Tensor& b);

Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);

// x: [n x C], b: [C]; adds b to every row.
Tensor add_bias_rows(const Tensor& x, const Tensor& b);

// Multiplies row i of x by the constant factors[i].
Tensor scale_rows(const Tensor& x, const std::vector<double>& factors);

// Per-channel maximum over rows with mask true; gradient routes to the
// first (lowest-index) maximal row per channel. Returns [C].
Tensor max_pool_rows(const Tensor& x, const Mask& mask);

// u.v / (max(|u|,eps) * max(|v|,eps)); scalar output.
Tensor cosine_similarity(const Tensor& u, const Tensor& v, double eps = 1e-8);

// Gathers rows of x (rank 2) by index; index -1 yields a zero row.
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);

// Scatters each part's rows into a fresh [out_rows x C] tensor at the
// given target rows (-1 entries are skipped). Overlapping targets add.
Tensor scatter_rows(const std::vector<Tensor>& parts,
                    const std::vector<std::vector<int>>& rows, int out_rows);

// Numerically stable elementwise binary cross-entropy on logits z against
// constant targets y in [0,1]: max(z,0) - z*y + log(1+exp(-|z|)).
Tensor bce_with_logits(const Tensor& z, const Tensor& y);

// ---- layers ----------------------------------------------------------------

// Optional low-rank bypass on a linear layer: y += scaling * (x.down).up,
// down: [in x r], up: [r x out]. `up` starts at zero so a freshly wrapped
// layer matches its base exactly.
struct LoraState {
    Tensor down;
    Tensor up;
    int rank = 0;
    double alpha = 0.0;
    double scaling() const { return alpha / static_cast<double>(rank); }
};

struct Linear {
    Tensor w;  // [in x out]
    Tensor b;  // [out]
    std::optional<LoraState> lora;

    int in_features() const { return w.dim(0); }
    int out_features() const { return w.dim(1); }
    Tensor forward(const Tensor& x) const;
};

struct AttentionWeights {
    Linear q, k, v, o;
};

// Multi-head self-attention over one token set. Masked tokens are zeroed
// on entry, excluded as keys/values via a -1e30 additive score bias, and
// their output rows are returned as zeros.
Tensor mhsa(const Tensor& tokens, const Mask& mask, const AttentionWeights& w,
            int heads);

// ---- gradient oracle -------------------------------------------------------

// Central finite differences: (f(x+h e_i) - f(x-h e_i)) / 2h. Perturbs the
// storage of x in place and restores it bit-exactly.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        Tensor x, double h = 1e-5);

// ---- deterministic initialization ------------------------------------------

std::uint64_t name_hash(const std::string& name);

// Uniform(lo, hi) fill from a stream derived from (seed, tensor name), so
// adding or removing other tensors never shifts an existing one's values.
void fill_uniform(Tensor& t, double lo, double hi, std::uint64_t seed);

}  // namespace sop2
