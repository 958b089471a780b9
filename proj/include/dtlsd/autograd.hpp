#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "dtlsd/tensor.hpp"

namespace dtlsd {

/// Trainable tensor plus gradient and AdamW moment buffers, all same shape.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;

    Parameter() = default;
    Parameter(std::string n, Tensor v)
        : name(std::move(n)),
          value(std::move(v)),
          grad(value.shape()),
          adam_m(value.shape()),
          adam_v(value.shape()) {}

    void zero_grad() { grad.fill(0.0); }
};

namespace ag {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
};

/// Reverse-mode gradient tape. Nodes are appended in evaluation order;
/// backward() walks them in reverse and accumulates (+=) into parameter grads.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Tracked leaf whose gradient is folded into p.grad after backward().
    Var leaf(Parameter& p);
    /// Untracked input; no gradient is ever computed for it.
    Var constant(Tensor v);
    /// Tracked input that is not a parameter (its grad is readable via grad()).
    Var input(Tensor v);

    /// Reference stays valid for the lifetime of the tape (node storage
    /// never relocates), including across later node creation.
    const Tensor& value(Var v) const { return nodes_[check(v)].value; }
    /// Gradient of the last backward() target w.r.t. this node. Zero-shaped
    /// tensor if the node never received a contribution.
    const Tensor& grad(Var v) const;

    /// Seeds d(loss)=1 and propagates. `loss` must be a scalar (size 1).
    void backward(Var loss);

    void clear();
    std::size_t node_count() const { return nodes_.size(); }

    // --- op construction plumbing ---
    using BackwardFn = std::function<void(Tape&, int)>;
    Var make_node(Tensor value, const std::vector<Var>& parents, BackwardFn fn);
    bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
    /// Grad buffer of a node, allocated on demand; marks the node as touched.
    Tensor& grad_buf(int id);
    /// Null when the node does not require grad (caller skips the work).
    Tensor* maybe_grad(int id);
    const Tensor& node_value(int id) const { return nodes_[id].value; }
    bool touched(int id) const { return nodes_[id].touched; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        BackwardFn backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
        bool touched = false;
    };

    int check(Var v) const;

    std::deque<Node> nodes_;
    std::vector<int> param_leaves_;
};

// ---- elementwise / arithmetic ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double c);
Var neg(Var a);
Var log(Var a);
Var exp(Var a);
Var sigmoid(Var a);
Var gelu(Var a);
Var abs(Var a);
Var clamp(Var a, double lo, double hi);
/// Inverse sigmoid with the argument clamped to [eps, 1-eps].
Var logit(Var a, double eps = 1e-3);

// ---- linear algebra ----
Var matmul(Var a, Var b);
/// a [n,k] times b [m,k] transposed: result [n,m] = a b^T.
Var matmul_nt(Var a, Var b);
/// x [n x d_in] * w [d_in x d_out] + b [d_out].
Var linear(Var x, Var w, Var b);
Var softmax(Var x, std::size_t axis);
/// Row-wise softmax over a 2D score matrix where blocked[i*m+j] entries are
/// excluded from the max, the sum, and the output (they come out as 0).
Var masked_softmax_rows(Var scores, std::vector<std::uint8_t> blocked);
/// Normalizes over the last axis of a 2D tensor, then applies gain and bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

// ---- shape / selection ----
Var reshape(Var a, std::vector<std::size_t> shape);
/// For a [n, 4] matrix, swaps columns (0,1) with (2,3) in every row whose
/// flag is set. Used to put endpoint pairs into canonical order while
/// keeping the graph differentiable (the permutation is fixed at build time).
Var swap_endpoints(Var a, std::vector<std::uint8_t> swap);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var gather_rows(Var a, std::vector<std::size_t> idx);

// ---- reductions ----
Var sum(Var a);
Var mean(Var a);

// ---- convolution (HWC layout) ----
/// 3x3 stride-2 convolution with padding 1: x [H x W x Cin], k [3 x 3 x Cin x Cout].
Var conv3x3_s2(Var x, Var k, Var b);

}  // namespace ag
}  // namespace dtlsd
