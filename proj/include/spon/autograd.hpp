#pragma once

#include "spon/tensor.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Tape-based reverse-mode differentiation over spon::Tensor.
//
// Every op appends a node holding its output value and, when any input needs a
// gradient, a closure that pushes the node's gradient to its inputs. backward()
// runs those closures in exact reverse recording order.
namespace spon::ag {

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // A leaf that never receives a gradient.
    Var constant(Tensor value);
    // A leaf registered as a trainable parameter.
    Var parameter(Tensor value);

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;
    bool is_parameter(Var v) const;

    // Reverse pass from a scalar (single-element) loss. Gradients of earlier
    // backward calls are cleared first.
    void backward(Var loss);

    // d loss / d p for a registered parameter `p`; zeros if p did not influence
    // the loss. Throws if p is not a parameter of this tape.
    Tensor grad(Var p) const;

    // Convenience: backward(loss) then grad(p) for each p.
    std::vector<Tensor> gradients(Var loss, std::span<const Var> params);

    std::size_t size() const noexcept { return nodes_.size(); }
    std::string_view op_name(std::uint32_t id) const { return nodes_.at(id).op; }
    // Node ids in the order the last backward() executed their closures.
    const std::vector<std::uint32_t>& last_backward_order() const noexcept { return visited_; }

    // ---- op-author API
    Var record(std::string op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    // Gradient buffer of a node, allocated as zeros on first access.
    Tensor& grad_buffer(std::uint32_t id);
    const Tensor* grad_if_any(std::uint32_t id) const;
    bool needs_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

private:
    struct Node {
        std::string op;
        Tensor value;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        bool parameter = false;
        BackwardFn backward;
    };

    void check_owned(Var v) const;

    std::vector<Node> nodes_;
    std::vector<std::uint32_t> visited_;
};

// ---- Differentiable ops

Var matmul(Var a, Var b);
// `b` has a's shape or is a row vector of a.cols() entries.
Var add(Var a, Var b);
Var mul(Var a, Var b);  // same shape
Var scale(Var a, float s);
Var relu(Var x);        // d/dx at exactly 0 is 0
Var silu(Var x);
Var softmax(Var x);     // along the last axis
Var rms_norm(Var x, Var gain, float eps);
Var sum(Var x);         // scalar [1]

// Rows of `table` selected by `ids`: out[i] = table[ids[i]].
Var gather_rows(Var table, std::span<const std::int32_t> ids);

// Causal multi-head self-attention over q, k, v of shape [batch*seq, d]:
// softmax(q_h k_h^T / sqrt(d/heads)) v_h per head with position t attending to
// positions <= t. Returns the concatenated heads, [batch*seq, d].
Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads);

// Magnitude mask with a constant keep-pattern: out = |x| > tau ? x : 0. The
// gradient flows only through kept entries. Returns the masked count through
// `masked` when non-null.
Var threshold_mask(Var x, float tau, std::size_t* masked = nullptr);

// Mean next-token negative log-likelihood of `targets` under softmax(logits).
Var cross_entropy(Var logits, std::span<const std::int32_t> targets);

// Mean over rows of KL(softmax(teacher) || softmax(student)); teacher is constant.
Var kl_divergence(const Tensor& teacher_logits, Var student_logits);

}  // namespace spon::ag
