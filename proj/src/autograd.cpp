#include "spon/autograd.hpp"

#include "spon/error.hpp"
#include "spon/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace spon::ag {

const Tensor& Var::value() const {
    if (!tape) throw Error("use of an unbound Var");
    return tape->value(*this);
}

void Tape::check_owned(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw InputError("variable does not belong to this tape");
}

Var Tape::constant(Tensor value) {
    require_finite(value, "constant");
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::parameter(Tensor value) {
    require_finite(value, "parameter");
    Node n;
    n.op = "parameter";
    n.value = std::move(value);
    n.requires_grad = true;
    n.parameter = true;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Tensor& Tape::value(Var v) const {
    check_owned(v);
    return nodes_[v.id].value;
}

bool Tape::requires_grad(Var v) const {
    check_owned(v);
    return nodes_[v.id].requires_grad;
}

bool Tape::is_parameter(Var v) const {
    check_owned(v);
    return nodes_[v.id].parameter;
}

Var Tape::record(std::string op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    require_finite(value, op);
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    for (const Var& in : inputs) {
        check_owned(in);
        n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
        n.grad = Tensor(n.value.shape());
        n.has_grad = true;
    }
    return n.grad;
}

const Tensor* Tape::grad_if_any(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.has_grad ? &n.grad : nullptr;
}

void Tape::backward(Var loss) {
    check_owned(loss);
    if (nodes_[loss.id].value.numel() != 1)
        throw DimensionError("backward: loss must be a scalar, got shape " +
                             shape_string(nodes_[loss.id].value.shape()));
    for (Node& n : nodes_) {
        n.has_grad = false;
        n.grad = Tensor();
    }
    visited_.clear();
    grad_buffer(loss.id)[0] = 1.0f;
    for (std::uint32_t id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.has_grad || !n.backward) continue;
        visited_.push_back(id);
        n.backward(*this, id);
    }
}

Tensor Tape::grad(Var p) const {
    check_owned(p);
    const Node& n = nodes_[p.id];
    if (!n.parameter) throw InputError("grad requested for a variable that is not a registered parameter");
    return n.has_grad ? n.grad : Tensor(n.value.shape());
}

std::vector<Tensor> Tape::gradients(Var loss, std::span<const Var> params) {
    for (const Var& p : params) {
        check_owned(p);
        if (!nodes_[p.id].parameter)
            throw InputError("gradient requested for a variable that is not a registered parameter");
    }
    backward(loss);
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const Var& p : params) out.push_back(grad(p));
    return out;
}

namespace {

void accumulate(Tape& t, Var target, const Tensor& g) {
    if (!t.needs_grad(target.id)) return;
    Tensor& buf = t.grad_buffer(target.id);
    kernels::active().add(buf.ptr(), g.ptr(), buf.mutable_ptr(), buf.numel());
}

const Tensor& upstream(Tape& t, std::uint32_t self) { return t.grad_buffer(self); }

}  // namespace

Var matmul(Var a, Var b) {
    Tape& t = *a.tape;
    return t.record("matmul", spon::matmul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
        const Tensor& g = upstream(tp, self);
        if (tp.needs_grad(a.id)) accumulate(tp, a, spon::matmul(g, transpose(b.value())));
        if (tp.needs_grad(b.id)) accumulate(tp, b, spon::matmul(transpose(a.value()), g));
    });
}

Var add(Var a, Var b) {
    Tape& t = *a.tape;
    const bool row = a.shape() != b.shape();
    return t.record("add", spon::add(a.value(), b.value()), {a, b}, [a, b, row](Tape& tp, std::uint32_t self) {
        const Tensor& g = upstream(tp, self);
        accumulate(tp, a, g);
        if (!tp.needs_grad(b.id)) return;
        if (!row) {
            accumulate(tp, b, g);
            return;
        }
        const std::size_t cols = g.cols();
        std::vector<double> acc(cols, 0.0);
        for (std::size_t r = 0; r < g.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) acc[c] += g.at(r, c);
        Tensor gb(b.shape());
        for (std::size_t c = 0; c < cols; ++c) gb[c] = static_cast<float>(acc[c]);
        accumulate(tp, b, gb);
    });
}

Var mul(Var a, Var b) {
    if (a.shape() != b.shape()) throw DimensionError("mul: operands must have the same shape");
    Tape& t = *a.tape;
    return t.record("mul", spon::mul(a.value(), b.value()), {a, b}, [a, b](Tape& tp, std::uint32_t self) {
        const Tensor& g = upstream(tp, self);
        if (tp.needs_grad(a.id)) accumulate(tp, a, spon::mul(g, b.value()));
        if (tp.needs_grad(b.id)) accumulate(tp, b, spon::mul(g, a.value()));
    });
}

Var scale(Var a, float s) {
    Tape& t = *a.tape;
    return t.record("scale", spon::scale(a.value(), s), {a}, [a, s](Tape& tp, std::uint32_t self) {
        accumulate(tp, a, spon::scale(upstream(tp, self), s));
    });
}

Var relu(Var x) {
    Tape& t = *x.tape;
    return t.record("relu", spon::relu(x.value()), {x}, [x](Tape& tp, std::uint32_t self) {
        const Tensor& g = upstream(tp, self);
        const Tensor& xv = x.value();
        Tensor gx(xv.shape());
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] = xv[i] > 0.0f ? g[i] : 0.0f;
        accumulate(tp, x, gx);
    });
}

Var silu(Var x) {
    Tape& t = *x.tape;
    return t.record("silu", spon::silu(x.value()), {x}, [x](Tape& tp, std::uint32_t self) {
        const Tensor& g = upstream(tp, self);
        const Tensor& xv = x.value();
        Tensor gx(xv.shape());
        for (std::size_t i = 0; i < gx.numel(); ++i) {
            const float s = sigmoid(xv[i]);
            gx[i] = g[i] * (s * (1.0f + xv[i] * (1.0f - s)));
        }
        accumulate(tp, x, gx);
    });
}

Var softmax(Var x) {
    Tape& t = *x.tape;
    return t.record("softmax", spon::softmax(x.value(), x.value().rank() - 1), {x},
                    [x](Tape& tp, std::uint32_t self) {
                        const Tensor& g = upstream(tp, self);
                        const Tensor& y = tp.value(Var{&tp, self});
                        Tensor gx(y.shape());
                        const std::size_t cols = y.cols();
                        for (std::size_t r = 0; r < y.rows(); ++r) {
                            double dot = 0.0;
                            for (std::size_t c = 0; c < cols; ++c)
                                dot += static_cast<double>(g.at(r, c)) * y.at(r, c);
                            for (std::size_t c = 0; c < cols; ++c)
                                gx.at(r, c) = static_cast<float>(y.at(r, c) * (g.at(r, c) - dot));
                        }
                        accumulate(tp, x, gx);
                    });
}

Var rms_norm(Var x, Var gain, float eps) {
    Tape& t = *x.tape;
    return t.record("rms_norm", spon::rms_norm(x.value(), gain.value(), eps), {x, gain},
                    [x, gain, eps](Tape& tp, std::uint32_t self) {
                        const Tensor& g = upstream(tp, self);
                        const Tensor& xv = x.value();
                        const Tensor& gv = gain.value();
                        const std::size_t d = xv.cols();
                        Tensor gx(xv.shape());
                        std::vector<double> ggain(d, 0.0);
                        for (std::size_t r = 0; r < xv.rows(); ++r) {
                            const float* xr = xv.ptr() + r * d;
                            const float* gr = g.ptr() + r * d;
                            const double ms = kernels::active().sum_squares(xr, d) / static_cast<double>(d);
                            const double inv = 1.0 / std::sqrt(ms + static_cast<double>(eps));
                            // y_j = x_j * inv * gain_j
                            double dot = 0.0;  // sum_j g_j gain_j x_j
                            for (std::size_t j = 0; j < d; ++j) {
                                dot += static_cast<double>(gr[j]) * gv[j] * xr[j];
                                ggain[j] += static_cast<double>(gr[j]) * xr[j] * inv;
                            }
                            const double coef = dot * inv * inv * inv / static_cast<double>(d);
                            float* out = gx.mutable_ptr() + r * d;
                            for (std::size_t j = 0; j < d; ++j)
                                out[j] = static_cast<float>(static_cast<double>(gr[j]) * gv[j] * inv - xr[j] * coef);
                        }
                        accumulate(tp, x, gx);
                        if (tp.needs_grad(gain.id)) {
                            Tensor gg(gv.shape());
                            for (std::size_t j = 0; j < d; ++j) gg[j] = static_cast<float>(ggain[j]);
                            accumulate(tp, gain, gg);
                        }
                    });
}

Var sum(Var x) {
    Tape& t = *x.tape;
    return t.record("sum", Tensor::scalar(static_cast<float>(spon::sum(x.value()))), {x},
                    [x](Tape& tp, std::uint32_t self) {
                        accumulate(tp, x, Tensor::full(x.shape(), upstream(tp, self)[0]));
                    });
}

Var gather_rows(Var table, std::span<const std::int32_t> ids) {
    Tape& t = *table.tape;
    const Tensor& tv = table.value();
    const std::size_t d = tv.cols();
    const std::size_t n_rows = tv.rows();
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= n_rows)
            throw InputError("gather_rows: index " + std::to_string(ids[i]) + " out of range for " +
                             std::to_string(n_rows) + " rows");
        std::copy_n(tv.ptr() + static_cast<std::size_t>(ids[i]) * d, d, out.mutable_ptr() + i * d);
    }
    auto saved = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
    return t.record("gather_rows", std::move(out), {table}, [table, saved](Tape& tp, std::uint32_t self) {
        const Tensor& g = upstream(tp, self);
        Tensor& buf = tp.grad_buffer(table.id);
        const std::size_t dd = buf.cols();
        for (std::size_t i = 0; i < saved->size(); ++i) {
            float* dst = buf.mutable_ptr() + static_cast<std::size_t>((*saved)[i]) * dd;
            const float* src = g.ptr() + i * dd;
            for (std::size_t j = 0; j < dd; ++j) dst[j] += src[j];
        }
    });
}

namespace {

// Copies head `h` of sequence `b` out of a [batch*seq, d] matrix into [seq, hd].
void gather_head(const Tensor& src, std::size_t b, std::size_t h, std::size_t seq, std::size_t hd, float* dst) {
    const std::size_t d = src.cols();
    for (std::size_t t = 0; t < seq; ++t)
        std::copy_n(src.ptr() + (b * seq + t) * d + h * hd, hd, dst + t * hd);
}

void scatter_head_add(const float* src, std::size_t b, std::size_t h, std::size_t seq, std::size_t hd, Tensor& dst) {
    const std::size_t d = dst.cols();
    for (std::size_t t = 0; t < seq; ++t) {
        float* out = dst.mutable_ptr() + (b * seq + t) * d + h * hd;
        for (std::size_t j = 0; j < hd; ++j) out[j] += src[t * hd + j];
    }
}

void transpose_into(const float* src, std::size_t rows, std::size_t cols, float* dst) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace

Var causal_attention(Var q, Var k, Var v, std::size_t batch, std::size_t seq, std::size_t heads) {
    const Tensor& qv = q.value();
    if (qv.rank() != 2 || k.shape() != qv.shape() || v.shape() != qv.shape())
        throw DimensionError("causal_attention: q, k, v must be matrices of equal shape");
    if (qv.rows() != batch * seq) throw DimensionError("causal_attention: rows != batch * seq");
    const std::size_t d = qv.cols();
    if (heads == 0 || d % heads != 0) throw DimensionError("causal_attention: d not divisible by heads");
    const std::size_t hd = d / heads;
    const float scale_factor = static_cast<float>(1.0 / std::sqrt(static_cast<double>(hd)));
    const auto& kern = kernels::active();

    auto probs = std::make_shared<std::vector<float>>(batch * heads * seq * seq);
    Tensor out({batch * seq, d});
    std::vector<float> qh(seq * hd), kt(hd * seq), vh(seq * hd), oh(seq * hd), kh(seq * hd);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            gather_head(qv, b, h, seq, hd, qh.data());
            gather_head(k.value(), b, h, seq, hd, kh.data());
            gather_head(v.value(), b, h, seq, hd, vh.data());
            transpose_into(kh.data(), seq, hd, kt.data());
            float* p = probs->data() + (b * heads + h) * seq * seq;
            kern.gemm(seq, seq, hd, qh.data(), kt.data(), p);
            for (std::size_t i = 0; i < seq; ++i) {
                std::span<float> row(p + i * seq, seq);
                for (std::size_t j = 0; j <= i; ++j) row[j] *= scale_factor;
                softmax_row_inplace(row, i + 1);
            }
            kern.gemm(seq, hd, seq, p, vh.data(), oh.data());
            scatter_head_add(oh.data(), b, h, seq, hd, out);
        }
    }

    Tape& t = *q.tape;
    return t.record(
        "causal_attention", std::move(out), {q, k, v},
        [q, k, v, batch, seq, heads, hd, scale_factor, probs](Tape& tp, std::uint32_t self) {
            const Tensor& g = upstream(tp, self);
            const auto& kn = kernels::active();
            const std::size_t dd = hd * heads;
            Tensor gq({batch * seq, dd}), gk({batch * seq, dd}), gv({batch * seq, dd});
            std::vector<float> go(seq * hd), vt(hd * seq), dp(seq * seq), pt(seq * seq), dvh(seq * hd);
            std::vector<float> qh(seq * hd), kh(seq * hd), vh(seq * hd), dsT(seq * seq), dqh(seq * hd), dkh(seq * hd);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const float* p = probs->data() + (b * heads + h) * seq * seq;
                    gather_head(g, b, h, seq, hd, go.data());
                    gather_head(q.value(), b, h, seq, hd, qh.data());
                    gather_head(k.value(), b, h, seq, hd, kh.data());
                    gather_head(v.value(), b, h, seq, hd, vh.data());
                    // dP = dO V^T, dV = P^T dO
                    transpose_into(vh.data(), seq, hd, vt.data());
                    kn.gemm(seq, seq, hd, go.data(), vt.data(), dp.data());
                    transpose_into(p, seq, seq, pt.data());
                    kn.gemm(seq, hd, seq, pt.data(), go.data(), dvh.data());
                    // dS = P * (dP - rowsum(P * dP)) * scale, causal entries only
                    for (std::size_t i = 0; i < seq; ++i) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j <= i; ++j)
                            dot += static_cast<double>(p[i * seq + j]) * dp[i * seq + j];
                        for (std::size_t j = 0; j < seq; ++j) {
                            dp[i * seq + j] =
                                j <= i ? static_cast<float>(p[i * seq + j] * (dp[i * seq + j] - dot)) * scale_factor
                                       : 0.0f;
                        }
                    }
                    // dQ = dS K, dK = dS^T Q
                    kn.gemm(seq, hd, seq, dp.data(), kh.data(), dqh.data());
                    transpose_into(dp.data(), seq, seq, dsT.data());
                    kn.gemm(seq, hd, seq, dsT.data(), qh.data(), dkh.data());
                    scatter_head_add(dqh.data(), b, h, seq, hd, gq);
                    scatter_head_add(dkh.data(), b, h, seq, hd, gk);
                    scatter_head_add(dvh.data(), b, h, seq, hd, gv);
                }
            }
            accumulate(tp, q, gq);
            accumulate(tp, k, gk);
            accumulate(tp, v, gv);
        });
}

Var threshold_mask(Var x, float tau, std::size_t* masked) {
    if (!(tau >= 0.0f)) throw InputError("threshold_mask: tau must be >= 0");
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    auto keep = std::make_shared<std::vector<unsigned char>>(xv.numel());
    const std::size_t n_masked =
        kernels::active().threshold_mask(xv.ptr(), xv.numel(), tau, out.mutable_ptr(), keep->data());
    if (masked) *masked = n_masked;
    Tape& t = *x.tape;
    return t.record("threshold_mask", std::move(out), {x}, [x, keep](Tape& tp, std::uint32_t self) {
        const Tensor& g = upstream(tp, self);
        Tensor gx(g.shape());
        for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] = (*keep)[i] ? g[i] : 0.0f;
        accumulate(tp, x, gx);
    });
}

namespace {

// log-softmax of one row in double.
void log_softmax_row(const float* row, std::size_t n, std::vector<double>& out) {
    out.resize(n);
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < n; ++j) out[j] = row[j] - lse;
}

}  // namespace

Var cross_entropy(Var logits, std::span<const std::int32_t> targets) {
    const Tensor& lv = logits.value();
    if (lv.rank() != 2 || lv.rows() != targets.size())
        throw DimensionError("cross_entropy: need one target per logits row");
    const std::size_t n = lv.rows(), vocab = lv.cols();
    std::vector<double> lsm;
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
            throw InputError("cross_entropy: target out of range");
        log_softmax_row(lv.ptr() + r * vocab, vocab, lsm);
        total -= lsm[static_cast<std::size_t>(targets[r])];
    }
    auto saved = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
    Tape& t = *logits.tape;
    return t.record("cross_entropy", Tensor::scalar(static_cast<float>(total / static_cast<double>(n))), {logits},
                    [logits, saved](Tape& tp, std::uint32_t self) {
                        const double g = upstream(tp, self)[0];
                        const Tensor& lv2 = logits.value();
                        const std::size_t rows = lv2.rows(), cols = lv2.cols();
                        Tensor gl(lv2.shape());
                        std::vector<double> ls;
                        for (std::size_t r = 0; r < rows; ++r) {
                            log_softmax_row(lv2.ptr() + r * cols, cols, ls);
                            for (std::size_t j = 0; j < cols; ++j) {
                                const double p = std::exp(ls[j]);
                                const double onehot = static_cast<std::size_t>((*saved)[r]) == j ? 1.0 : 0.0;
                                gl.at(r, j) = static_cast<float>(g * (p - onehot) / static_cast<double>(rows));
                            }
                        }
                        accumulate(tp, logits, gl);
                    });
}

Var kl_divergence(const Tensor& teacher_logits, Var student_logits) {
    const Tensor& sv = student_logits.value();
    if (teacher_logits.shape() != sv.shape()) throw DimensionError("kl_divergence: logits shapes differ");
    const std::size_t n = sv.rows(), vocab = sv.cols();
    std::vector<double> lp, lq;
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        log_softmax_row(teacher_logits.ptr() + r * vocab, vocab, lp);
        log_softmax_row(sv.ptr() + r * vocab, vocab, lq);
        for (std::size_t j = 0; j < vocab; ++j) total += std::exp(lp[j]) * (lp[j] - lq[j]);
    }
    auto teacher = std::make_shared<Tensor>(teacher_logits);
    Tape& t = *student_logits.tape;
    return t.record("kl_divergence", Tensor::scalar(static_cast<float>(total / static_cast<double>(n))),
                    {student_logits}, [student_logits, teacher](Tape& tp, std::uint32_t self) {
                        const double g = upstream(tp, self)[0];
                        const Tensor& s = student_logits.value();
                        const std::size_t rows = s.rows(), cols = s.cols();
                        Tensor gs(s.shape());
                        std::vector<double> a, b;
                        for (std::size_t r = 0; r < rows; ++r) {
                            log_softmax_row(teacher->ptr() + r * cols, cols, a);
                            log_softmax_row(s.ptr() + r * cols, cols, b);
                            for (std::size_t j = 0; j < cols; ++j)
                                gs.at(r, j) = static_cast<float>(g * (std::exp(b[j]) - std::exp(a[j])) /
                                                                 static_cast<double>(rows));
                        }
                        accumulate(tp, student_logits, gs);
                    });
}

}  // namespace spon::ag
