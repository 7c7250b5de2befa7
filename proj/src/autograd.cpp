#include "neurovid/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace neurovid::ag {

namespace {

NodePtr make_node(std::vector<int64_t> shape, std::vector<NodePtr> inputs) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val.assign(static_cast<size_t>(Tensor::numel_of(n->shape)), 0.0);
    n->inputs = std::move(inputs);
    for (const auto& in : n->inputs)
        if (in->needs_grad) n->needs_grad = true;
    return n;
}

// C[n,m] (+)= A[n,k] * B[k,m]
void gemm_nn(const double* A, const double* B, double* C, int64_t n, int64_t k, int64_t m,
             bool acc) {
    for (int64_t i = 0; i < n; ++i) {
        double* crow = C + i * m;
        if (!acc)
            for (int64_t j = 0; j < m; ++j) crow[j] = 0.0;
        const double* arow = A + i * k;
        for (int64_t l = 0; l < k; ++l) {
            const double a = arow[l];
            if (a == 0.0) continue;
            const double* brow = B + l * m;
            for (int64_t j = 0; j < m; ++j) crow[j] += a * brow[j];
        }
    }
}

// C[n,m] (+)= A[n,k] * B[m,k]^T
void gemm_nt(const double* A, const double* B, double* C, int64_t n, int64_t k, int64_t m,
             bool acc) {
    for (int64_t i = 0; i < n; ++i) {
        const double* arow = A + i * k;
        double* crow = C + i * m;
        for (int64_t j = 0; j < m; ++j) {
            const double* brow = B + j * k;
            double s = 0.0;
            for (int64_t l = 0; l < k; ++l) s += arow[l] * brow[l];
            if (acc)
                crow[j] += s;
            else
                crow[j] = s;
        }
    }
}

// C[k,m] (+)= A[n,k]^T * B[n,m]
void gemm_tn(const double* A, const double* B, double* C, int64_t n, int64_t k, int64_t m,
             bool acc) {
    if (!acc)
        for (int64_t i = 0; i < k * m; ++i) C[i] = 0.0;
    for (int64_t l = 0; l < n; ++l) {
        const double* arow = A + l * k;
        const double* brow = B + l * m;
        for (int64_t i = 0; i < k; ++i) {
            const double a = arow[i];
            if (a == 0.0) continue;
            double* crow = C + i * m;
            for (int64_t j = 0; j < m; ++j) crow[j] += a * brow[j];
        }
    }
}

void softmax_row(const double* in, double* out, int64_t m) {
    double mx = in[0];
    for (int64_t j = 1; j < m; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < m; ++j) {
        out[j] = std::exp(in[j] - mx);
        sum += out[j];
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < m; ++j) out[j] *= inv;
}

Var unary(const Var& a, const std::function<double(double)>& f,
          const std::function<double(double, double)>& dfdx_times_g) {
    auto n = make_node(a.shape(), {a.n});
    for (size_t i = 0; i < n->val.size(); ++i) n->val[i] = f(a.n->val[i]);
    if (n->needs_grad) {
        NodePtr an = a.n;
        n->backward = [an, dfdx_times_g](Node& self) {
            an->ensure_grad();
            for (size_t i = 0; i < self.val.size(); ++i)
                an->grad[i] += dfdx_times_g(an->val[i], self.grad[i]);
        };
    }
    return Var(n);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Multi-head attention over already-extracted token rows. One instance per
// (frame / location); caches everything needed for the backward pass.
struct MhaSeq {
    int64_t sq = 0, sk = 0, c = 0, heads = 1;
    std::vector<double> tq, tkv;          // input tokens [sq, cq_in], [sk, ckv_in]
    int64_t cq_in = 0, ckv_in = 0;
    std::vector<double> q, k, v;          // [sq|sk, c]
    std::vector<double> attn;             // heads * sq * sk, post-softmax
    std::vector<double> ohead;            // [sq, c] concat of per-head outputs
    std::vector<double> out;              // [sq, c] after wo
    // mask: allowed iff k_idx in [max(0, q_idx - lookback), q_idx] when causal
    bool causal = false;
    int lookback = 0;

    void forward(const double* wq, const double* wk, const double* wv, const double* wo) {
        const int64_t dh = c / heads;
        q.assign(static_cast<size_t>(sq * c), 0.0);
        k.assign(static_cast<size_t>(sk * c), 0.0);
        v.assign(static_cast<size_t>(sk * c), 0.0);
        gemm_nn(tq.data(), wq, q.data(), sq, cq_in, c, false);
        gemm_nn(tkv.data(), wk, k.data(), sk, ckv_in, c, false);
        gemm_nn(tkv.data(), wv, v.data(), sk, ckv_in, c, false);
        attn.assign(static_cast<size_t>(heads * sq * sk), 0.0);
        ohead.assign(static_cast<size_t>(sq * c), 0.0);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> logits(static_cast<size_t>(sk));
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t i = 0; i < sq; ++i) {
                const double* qi = q.data() + i * c + h * dh;
                int64_t lo = 0, hi = sk;  // [lo, hi)
                if (causal) {
                    lo = std::max<int64_t>(0, i - lookback);
                    hi = i + 1;
                }
                for (int64_t j = lo; j < hi; ++j) {
                    const double* kj = k.data() + j * c + h * dh;
                    double s = 0.0;
                    for (int64_t l = 0; l < dh; ++l) s += qi[l] * kj[l];
                    logits[static_cast<size_t>(j - lo)] = s * inv_sqrt;
                }
                std::vector<double> p(static_cast<size_t>(hi - lo));
                softmax_row(logits.data(), p.data(), hi - lo);
                double* arow = attn.data() + (h * sq + i) * sk;
                for (int64_t j = lo; j < hi; ++j) arow[j] = p[static_cast<size_t>(j - lo)];
                double* orow = ohead.data() + i * c + h * dh;
                for (int64_t j = lo; j < hi; ++j) {
                    const double a = arow[j];
                    const double* vj = v.data() + j * c + h * dh;
                    for (int64_t l = 0; l < dh; ++l) orow[l] += a * vj[l];
                }
            }
        }
        out.assign(static_cast<size_t>(sq * c), 0.0);
        gemm_nn(ohead.data(), wo, out.data(), sq, c, c, false);
    }

    // dout [sq, c]; accumulates into the weight grads and returns token grads.
    void backward(const double* dout, const double* wq, const double* wk, const double* wv,
                  const double* wo, double* dwq, double* dwk, double* dwv, double* dwo,
                  double* dtq, double* dtkv) const {
        const int64_t dh = c / heads;
        std::vector<double> dohead(static_cast<size_t>(sq * c), 0.0);
        gemm_tn(ohead.data(), dout, dwo, sq, c, c, true);
        gemm_nt(dout, wo, dohead.data(), sq, c, c, false);

        std::vector<double> dq(static_cast<size_t>(sq * c), 0.0);
        std::vector<double> dk(static_cast<size_t>(sk * c), 0.0);
        std::vector<double> dv(static_cast<size_t>(sk * c), 0.0);
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int64_t h = 0; h < heads; ++h) {
            for (int64_t i = 0; i < sq; ++i) {
                const double* arow = attn.data() + (h * sq + i) * sk;
                const double* dorow = dohead.data() + i * c + h * dh;
                // dV and dA
                double da_dot_a = 0.0;
                std::vector<double> da(static_cast<size_t>(sk), 0.0);
                for (int64_t j = 0; j < sk; ++j) {
                    if (arow[j] == 0.0) continue;
                    const double* vj = v.data() + j * c + h * dh;
                    double s = 0.0;
                    for (int64_t l = 0; l < dh; ++l) s += dorow[l] * vj[l];
                    da[static_cast<size_t>(j)] = s;
                    da_dot_a += s * arow[j];
                    double* dvj = dv.data() + j * c + h * dh;
                    for (int64_t l = 0; l < dh; ++l) dvj[l] += arow[j] * dorow[l];
                }
                // softmax backward, then into q/k
                const double* qi = q.data() + i * c + h * dh;
                double* dqi = dq.data() + i * c + h * dh;
                for (int64_t j = 0; j < sk; ++j) {
                    if (arow[j] == 0.0) continue;
                    const double ds = arow[j] * (da[static_cast<size_t>(j)] - da_dot_a) * inv_sqrt;
                    const double* kj = k.data() + j * c + h * dh;
                    double* dkj = dk.data() + j * c + h * dh;
                    for (int64_t l = 0; l < dh; ++l) {
                        dqi[l] += ds * kj[l];
                        dkj[l] += ds * qi[l];
                    }
                }
            }
        }
        gemm_tn(tq.data(), dq.data(), dwq, sq, cq_in, c, true);
        gemm_tn(tkv.data(), dk.data(), dwk, sk, ckv_in, c, true);
        gemm_tn(tkv.data(), dv.data(), dwv, sk, ckv_in, c, true);
        if (dtq) gemm_nt(dq.data(), wq, dtq, sq, c, cq_in, true);
        if (dtkv) {
            gemm_nt(dk.data(), wk, dtkv, sk, c, ckv_in, true);
            gemm_nt(dv.data(), wv, dtkv, sk, c, ckv_in, true);
        }
    }
};

}  // namespace

Var leaf(std::vector<int64_t> shape, std::vector<double> data, bool needs_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    require(Tensor::numel_of(n->shape) == static_cast<int64_t>(data.size()),
            ErrorKind::Validation, "leaf data does not match shape");
    n->val = std::move(data);
    n->needs_grad = needs_grad;
    return Var(n);
}

Var constant(std::vector<int64_t> shape, std::vector<double> data) {
    return leaf(std::move(shape), std::move(data), false);
}

Var zeros(std::vector<int64_t> shape, bool needs_grad) {
    const int64_t n = Tensor::numel_of(shape);
    return leaf(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0), needs_grad);
}

Var from_tensor(const Tensor& t, bool needs_grad) {
    std::vector<double> d(t.data.begin(), t.data.end());
    return leaf(t.shape, std::move(d), needs_grad);
}

Tensor to_tensor(const Var& v) {
    std::vector<float> d(v.n->val.size());
    for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(v.n->val[i]);
    return Tensor(v.shape(), std::move(d));
}

Var add(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), ErrorKind::Validation, "add: shape mismatch");
    auto n = make_node(a.shape(), {a.n, b.n});
    for (size_t i = 0; i < n->val.size(); ++i) n->val[i] = a.n->val[i] + b.n->val[i];
    if (n->needs_grad) {
        NodePtr an = a.n, bn = b.n;
        n->backward = [an, bn](Node& self) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
            }
        };
    }
    return Var(n);
}

Var sub(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), ErrorKind::Validation, "sub: shape mismatch");
    auto n = make_node(a.shape(), {a.n, b.n});
    for (size_t i = 0; i < n->val.size(); ++i) n->val[i] = a.n->val[i] - b.n->val[i];
    if (n->needs_grad) {
        NodePtr an = a.n, bn = b.n;
        n->backward = [an, bn](Node& self) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
            }
        };
    }
    return Var(n);
}

Var mul(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), ErrorKind::Validation, "mul: shape mismatch");
    auto n = make_node(a.shape(), {a.n, b.n});
    for (size_t i = 0; i < n->val.size(); ++i) n->val[i] = a.n->val[i] * b.n->val[i];
    if (n->needs_grad) {
        NodePtr an = a.n, bn = b.n;
        n->backward = [an, bn](Node& self) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i] * bn->val[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] += self.grad[i] * an->val[i];
            }
        };
    }
    return Var(n);
}

Var scale(const Var& a, double c) {
    return unary(a, [c](double x) { return c * x; },
                 [c](double, double g) { return c * g; });
}

Var add_scalar(const Var& a, double c) {
    return unary(a, [c](double x) { return x + c; },
                 [](double, double g) { return g; });
}

Var relu(const Var& a) {
    return unary(a, [](double x) { return x > 0 ? x : 0.0; },
                 [](double x, double g) { return x > 0 ? g : 0.0; });
}

Var gelu(const Var& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475;
    constexpr double inv_sqrt2pi = 0.3989422804014327;
    return unary(a,
                 [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
                 [=](double x, double g) {
                     const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                     const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                     return g * (cdf + x * pdf);
                 });
}

Var silu(const Var& a) {
    return unary(a, [](double x) { return x * sigmoid(x); },
                 [](double x, double g) {
                     const double s = sigmoid(x);
                     return g * s * (1.0 + x * (1.0 - s));
                 });
}

Var square(const Var& a) {
    return unary(a, [](double x) { return x * x; },
                 [](double x, double g) { return 2.0 * x * g; });
}

Var matmul(const Var& a, const Var& b) {
    require(a.shape().size() == 2 && b.shape().size() == 2 && a.dim(1) == b.dim(0),
            ErrorKind::Validation, "matmul: incompatible shapes");
    const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    auto node = make_node({n, m}, {a.n, b.n});
    gemm_nn(a.n->val.data(), b.n->val.data(), node->val.data(), n, k, m, false);
    if (node->needs_grad) {
        NodePtr an = a.n, bn = b.n;
        node->backward = [an, bn, n, k, m](Node& self) {
            if (an->needs_grad) {
                an->ensure_grad();
                gemm_nt(self.grad.data(), bn->val.data(), an->grad.data(), n, m, k, true);
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                gemm_tn(an->val.data(), self.grad.data(), bn->grad.data(), n, k, m, true);
            }
        };
    }
    return Var(node);
}

Var transpose(const Var& a) {
    require(a.shape().size() == 2, ErrorKind::Validation, "transpose: rank-2 only");
    const int64_t n = a.dim(0), m = a.dim(1);
    auto node = make_node({m, n}, {a.n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) node->val[static_cast<size_t>(j * n + i)] =
            a.n->val[static_cast<size_t>(i * m + j)];
    if (node->needs_grad) {
        NodePtr an = a.n;
        node->backward = [an, n, m](Node& self) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < m; ++j)
                    an->grad[static_cast<size_t>(i * m + j)] +=
                        self.grad[static_cast<size_t>(j * n + i)];
        };
    }
    return Var(node);
}

Var add_rowvec(const Var& x, const Var& r) {
    require(x.shape().size() == 2 && r.shape().size() == 1 && x.dim(1) == r.dim(0),
            ErrorKind::Validation, "add_rowvec: shape mismatch");
    const int64_t n = x.dim(0), m = x.dim(1);
    auto node = make_node(x.shape(), {x.n, r.n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j)
            node->val[static_cast<size_t>(i * m + j)] =
                x.n->val[static_cast<size_t>(i * m + j)] + r.n->val[static_cast<size_t>(j)];
    if (node->needs_grad) {
        NodePtr xn = x.n, rn = r.n;
        node->backward = [xn, rn, n, m](Node& self) {
            if (xn->needs_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
            }
            if (rn->needs_grad) {
                rn->ensure_grad();
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < m; ++j)
                        rn->grad[static_cast<size_t>(j)] +=
                            self.grad[static_cast<size_t>(i * m + j)];
            }
        };
    }
    return Var(node);
}

Var slice_cols(const Var& a, int64_t start, int64_t len) {
    require(a.shape().size() == 2, ErrorKind::Validation, "slice_cols: rank-2 only");
    const int64_t n = a.dim(0), m = a.dim(1);
    require(start >= 0 && start + len <= m, ErrorKind::Index, "slice_cols out of range");
    auto node = make_node({n, len}, {a.n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < len; ++j)
            node->val[static_cast<size_t>(i * len + j)] =
                a.n->val[static_cast<size_t>(i * m + start + j)];
    if (node->needs_grad) {
        NodePtr an = a.n;
        node->backward = [an, n, m, start, len](Node& self) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < len; ++j)
                    an->grad[static_cast<size_t>(i * m + start + j)] +=
                        self.grad[static_cast<size_t>(i * len + j)];
        };
    }
    return Var(node);
}

Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), ErrorKind::Validation, "concat_cols: empty");
    const int64_t n = parts[0].dim(0);
    int64_t m = 0;
    std::vector<NodePtr> ins;
    for (const auto& p : parts) {
        require(p.shape().size() == 2 && p.dim(0) == n, ErrorKind::Validation,
                "concat_cols: row mismatch");
        m += p.dim(1);
        ins.push_back(p.n);
    }
    auto node = make_node({n, m}, ins);
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t w = p.dim(1);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < w; ++j)
                node->val[static_cast<size_t>(i * m + off + j)] =
                    p.n->val[static_cast<size_t>(i * w + j)];
        off += w;
    }
    if (node->needs_grad) {
        std::vector<NodePtr> srcs = ins;
        node->backward = [srcs, n, m](Node& self) {
            int64_t off = 0;
            for (auto& s : srcs) {
                const int64_t w = s->shape[1];
                if (s->needs_grad) {
                    s->ensure_grad();
                    for (int64_t i = 0; i < n; ++i)
                        for (int64_t j = 0; j < w; ++j)
                            s->grad[static_cast<size_t>(i * w + j)] +=
                                self.grad[static_cast<size_t>(i * m + off + j)];
                }
                off += w;
            }
        };
    }
    return Var(node);
}

Var slice_rows(const Var& a, int64_t start, int64_t len) {
    require(a.shape().size() == 2, ErrorKind::Validation, "slice_rows: rank-2 only");
    const int64_t n = a.dim(0), m = a.dim(1);
    require(start >= 0 && start + len <= n, ErrorKind::Index, "slice_rows out of range");
    auto node = make_node({len, m}, {a.n});
    std::copy_n(a.n->val.begin() + start * m, len * m, node->val.begin());
    if (node->needs_grad) {
        NodePtr an = a.n;
        node->backward = [an, m, start, len](Node& self) {
            an->ensure_grad();
            for (int64_t i = 0; i < len * m; ++i)
                an->grad[static_cast<size_t>(start * m + i)] += self.grad[static_cast<size_t>(i)];
        };
    }
    return Var(node);
}

Var concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), ErrorKind::Validation, "concat_rows: empty");
    const int64_t m = parts[0].dim(1);
    int64_t n = 0;
    std::vector<NodePtr> ins;
    for (const auto& p : parts) {
        require(p.shape().size() == 2 && p.dim(1) == m, ErrorKind::Validation,
                "concat_rows: col mismatch");
        n += p.dim(0);
        ins.push_back(p.n);
    }
    auto node = make_node({n, m}, ins);
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.n->val.begin(), p.n->val.end(), node->val.begin() + off);
        off += p.numel();
    }
    if (node->needs_grad) {
        std::vector<NodePtr> srcs = ins;
        node->backward = [srcs](Node& self) {
            int64_t off = 0;
            for (auto& s : srcs) {
                if (s->needs_grad) {
                    s->ensure_grad();
                    for (size_t i = 0; i < s->grad.size(); ++i)
                        s->grad[i] += self.grad[static_cast<size_t>(off) + i];
                }
                off += s->numel();
            }
        };
    }
    return Var(node);
}

Var softmax_rows(const Var& a) {
    require(a.shape().size() == 2, ErrorKind::Validation, "softmax_rows: rank-2 only");
    const int64_t n = a.dim(0), m = a.dim(1);
    auto node = make_node(a.shape(), {a.n});
    for (int64_t i = 0; i < n; ++i)
        softmax_row(a.n->val.data() + i * m, node->val.data() + i * m, m);
    if (node->needs_grad) {
        NodePtr an = a.n;
        node->backward = [an, n, m](Node& self) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const double* y = self.val.data() + i * m;
                const double* g = self.grad.data() + i * m;
                double dot = 0.0;
                for (int64_t j = 0; j < m; ++j) dot += y[j] * g[j];
                double* da = an->grad.data() + i * m;
                for (int64_t j = 0; j < m; ++j) da[j] += y[j] * (g[j] - dot);
            }
        };
    }
    return Var(node);
}

Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require(x.shape().size() == 2, ErrorKind::Validation, "layernorm: rank-2 only");
    const int64_t n = x.dim(0), m = x.dim(1);
    require(gamma.numel() == m && beta.numel() == m, ErrorKind::Validation,
            "layernorm: gamma/beta size mismatch");
    auto node = make_node(x.shape(), {x.n, gamma.n, beta.n});
    auto cache = std::make_shared<std::vector<double>>(static_cast<size_t>(n * 2));  // mean, invstd
    for (int64_t i = 0; i < n; ++i) {
        const double* row = x.n->val.data() + i * m;
        double mean = 0.0;
        for (int64_t j = 0; j < m; ++j) mean += row[j];
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (int64_t j = 0; j < m; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(m);
        const double invstd = 1.0 / std::sqrt(var + eps);
        (*cache)[static_cast<size_t>(2 * i)] = mean;
        (*cache)[static_cast<size_t>(2 * i + 1)] = invstd;
        double* out = node->val.data() + i * m;
        for (int64_t j = 0; j < m; ++j)
            out[j] = (row[j] - mean) * invstd * gamma.n->val[static_cast<size_t>(j)] +
                     beta.n->val[static_cast<size_t>(j)];
    }
    if (node->needs_grad) {
        NodePtr xn = x.n, gn = gamma.n, bn = beta.n;
        node->backward = [xn, gn, bn, cache, n, m](Node& self) {
            for (int64_t i = 0; i < n; ++i) {
                const double mean = (*cache)[static_cast<size_t>(2 * i)];
                const double invstd = (*cache)[static_cast<size_t>(2 * i + 1)];
                const double* row = xn->val.data() + i * m;
                const double* g = self.grad.data() + i * m;
                if (gn->needs_grad || bn->needs_grad) {
                    gn->ensure_grad();
                    bn->ensure_grad();
                    for (int64_t j = 0; j < m; ++j) {
                        gn->grad[static_cast<size_t>(j)] += g[j] * (row[j] - mean) * invstd;
                        bn->grad[static_cast<size_t>(j)] += g[j];
                    }
                }
                if (xn->needs_grad) {
                    xn->ensure_grad();
                    double sum_gh = 0.0, sum_ghx = 0.0;
                    for (int64_t j = 0; j < m; ++j) {
                        const double gh = g[j] * gn->val[static_cast<size_t>(j)];
                        sum_gh += gh;
                        sum_ghx += gh * (row[j] - mean) * invstd;
                    }
                    double* dx = xn->grad.data() + i * m;
                    const double inv_m = 1.0 / static_cast<double>(m);
                    for (int64_t j = 0; j < m; ++j) {
                        const double gh = g[j] * gn->val[static_cast<size_t>(j)];
                        const double xhat = (row[j] - mean) * invstd;
                        dx[j] += invstd * (gh - inv_m * sum_gh - xhat * inv_m * sum_ghx);
                    }
                }
            }
        };
    }
    return Var(node);
}

Var l2normalize_rows(const Var& x) {
    require(x.shape().size() == 2, ErrorKind::Validation, "l2normalize: rank-2 only");
    const int64_t n = x.dim(0), m = x.dim(1);
    constexpr double eps2 = 1e-12;
    auto node = make_node(x.shape(), {x.n});
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double* row = x.n->val.data() + i * m;
        double ss = 0.0;
        for (int64_t j = 0; j < m; ++j) ss += row[j] * row[j];
        const double r = std::sqrt(ss + eps2);
        (*norms)[static_cast<size_t>(i)] = r;
        double* out = node->val.data() + i * m;
        for (int64_t j = 0; j < m; ++j) out[j] = row[j] / r;
    }
    if (node->needs_grad) {
        NodePtr xn = x.n;
        node->backward = [xn, norms, n, m](Node& self) {
            xn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const double r = (*norms)[static_cast<size_t>(i)];
                const double* y = self.val.data() + i * m;
                const double* g = self.grad.data() + i * m;
                double dot = 0.0;
                for (int64_t j = 0; j < m; ++j) dot += y[j] * g[j];
                double* dx = xn->grad.data() + i * m;
                for (int64_t j = 0; j < m; ++j) dx[j] += (g[j] - y[j] * dot) / r;
            }
        };
    }
    return Var(node);
}

Var mean_rows(const Var& x) {
    require(x.shape().size() == 2, ErrorKind::Validation, "mean_rows: rank-2 only");
    const int64_t n = x.dim(0), m = x.dim(1);
    auto node = make_node({1, m}, {x.n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j)
            node->val[static_cast<size_t>(j)] += x.n->val[static_cast<size_t>(i * m + j)];
    for (int64_t j = 0; j < m; ++j) node->val[static_cast<size_t>(j)] /= static_cast<double>(n);
    if (node->needs_grad) {
        NodePtr xn = x.n;
        node->backward = [xn, n, m](Node& self) {
            xn->ensure_grad();
            const double inv = 1.0 / static_cast<double>(n);
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < m; ++j)
                    xn->grad[static_cast<size_t>(i * m + j)] +=
                        self.grad[static_cast<size_t>(j)] * inv;
        };
    }
    return Var(node);
}

Var reshape(const Var& x, std::vector<int64_t> shape) {
    require(Tensor::numel_of(shape) == x.numel(), ErrorKind::Validation,
            "reshape: element count mismatch");
    auto node = make_node(std::move(shape), {x.n});
    node->val = x.n->val;
    if (node->needs_grad) {
        NodePtr xn = x.n;
        node->backward = [xn](Node& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        };
    }
    return Var(node);
}

Var sum_all(const Var& x) {
    auto node = make_node({1}, {x.n});
    double s = 0.0;
    for (double v : x.n->val) s += v;
    node->val[0] = s;
    if (node->needs_grad) {
        NodePtr xn = x.n;
        node->backward = [xn](Node& self) {
            xn->ensure_grad();
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[0];
        };
    }
    return Var(node);
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Var mse_loss(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), ErrorKind::Validation, "mse_loss: shape mismatch");
    auto node = make_node({1}, {a.n, b.n});
    double s = 0.0;
    for (size_t i = 0; i < a.n->val.size(); ++i) {
        const double d = a.n->val[i] - b.n->val[i];
        s += d * d;
    }
    node->val[0] = s / static_cast<double>(a.numel());
    if (node->needs_grad) {
        NodePtr an = a.n, bn = b.n;
        node->backward = [an, bn](Node& self) {
            const double c = 2.0 * self.grad[0] / static_cast<double>(an->val.size());
            if (an->needs_grad) {
                an->ensure_grad();
                for (size_t i = 0; i < an->val.size(); ++i)
                    an->grad[i] += c * (an->val[i] - bn->val[i]);
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (size_t i = 0; i < bn->val.size(); ++i)
                    bn->grad[i] -= c * (an->val[i] - bn->val[i]);
            }
        };
    }
    return Var(node);
}

Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets) {
    require(logits.shape().size() == 2, ErrorKind::Validation, "cross_entropy: rank-2 only");
    const int64_t n = logits.dim(0), m = logits.dim(1);
    require(static_cast<int64_t>(targets.size()) == n, ErrorKind::Validation,
            "cross_entropy: target count mismatch");
    auto node = make_node({1}, {logits.n});
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n * m));
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        require(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < m,
                ErrorKind::Index, "cross_entropy: target out of range");
        softmax_row(logits.n->val.data() + i * m, probs->data() + i * m, m);
        loss -= std::log(std::max((*probs)[static_cast<size_t>(i * m + targets[static_cast<size_t>(i)])],
                                  1e-300));
    }
    node->val[0] = loss / static_cast<double>(n);
    if (node->needs_grad) {
        NodePtr ln = logits.n;
        auto tg = std::make_shared<std::vector<int>>(targets);
        node->backward = [ln, probs, tg, n, m](Node& self) {
            ln->ensure_grad();
            const double c = self.grad[0] / static_cast<double>(n);
            for (int64_t i = 0; i < n; ++i) {
                double* dl = ln->grad.data() + i * m;
                const double* p = probs->data() + i * m;
                for (int64_t j = 0; j < m; ++j) dl[j] += c * p[j];
                dl[(*tg)[static_cast<size_t>(i)]] -= c;
            }
        };
    }
    return Var(node);
}

Var conv2d(const Var& x, const Var& w, const Var& b, int pad, bool replicate_pad) {
    require(x.shape().size() == 4 && w.shape().size() == 4, ErrorKind::Validation,
            "conv2d: x [N,C,H,W], w [Co,Ci,kh,kw]");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Co = w.dim(0), Ci = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    require(Ci == C, ErrorKind::Validation, "conv2d: channel mismatch");
    require(b.numel() == Co, ErrorKind::Validation, "conv2d: bias size mismatch");
    const int64_t Ho = H + 2 * pad - kh + 1;
    const int64_t Wo = W + 2 * pad - kw + 1;
    require(Ho >= 1 && Wo >= 1, ErrorKind::Validation, "conv2d: kernel larger than input");
    auto node = make_node({N, Co, Ho, Wo}, {x.n, w.n, b.n});

    // Padding taps either read zeros (skip) or clamp to the nearest edge.
    auto clamp_idx = [](int64_t i, int64_t n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); };

    const double* xv = x.n->val.data();
    const double* wv = w.n->val.data();
    const double* bv = b.n->val.data();
    double* ov = node->val.data();
    for (int64_t n0 = 0; n0 < N; ++n0)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t ho = 0; ho < Ho; ++ho)
                for (int64_t wo = 0; wo < Wo; ++wo) {
                    double acc = bv[co];
                    for (int64_t ci = 0; ci < C; ++ci)
                        for (int64_t dy = 0; dy < kh; ++dy) {
                            int64_t hi = ho + dy - pad;
                            if (hi < 0 || hi >= H) {
                                if (!replicate_pad) continue;
                                hi = clamp_idx(hi, H);
                            }
                            const double* xrow = xv + ((n0 * C + ci) * H + hi) * W;
                            const double* wrow = wv + ((co * Ci + ci) * kh + dy) * kw;
                            for (int64_t dx = 0; dx < kw; ++dx) {
                                int64_t wi = wo + dx - pad;
                                if (wi < 0 || wi >= W) {
                                    if (!replicate_pad) continue;
                                    wi = clamp_idx(wi, W);
                                }
                                acc += xrow[wi] * wrow[dx];
                            }
                        }
                    ov[((n0 * Co + co) * Ho + ho) * Wo + wo] = acc;
                }

    if (node->needs_grad) {
        NodePtr xn = x.n, wn = w.n, bn = b.n;
        node->backward = [xn, wn, bn, pad, replicate_pad, clamp_idx, N, C, H, W, Co, Ci, kh, kw,
                          Ho, Wo](Node& self) {
            const double* g = self.grad.data();
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t n0 = 0; n0 < N; ++n0)
                    for (int64_t co = 0; co < Co; ++co) {
                        double s = 0.0;
                        const double* gp = g + (n0 * Co + co) * Ho * Wo;
                        for (int64_t i = 0; i < Ho * Wo; ++i) s += gp[i];
                        bn->grad[static_cast<size_t>(co)] += s;
                    }
            }
            const bool need_x = xn->needs_grad, need_w = wn->needs_grad;
            if (need_x) xn->ensure_grad();
            if (need_w) wn->ensure_grad();
            if (!need_x && !need_w) return;
            for (int64_t n0 = 0; n0 < N; ++n0)
                for (int64_t co = 0; co < Co; ++co)
                    for (int64_t ho = 0; ho < Ho; ++ho)
                        for (int64_t wo = 0; wo < Wo; ++wo) {
                            const double go = g[((n0 * Co + co) * Ho + ho) * Wo + wo];
                            if (go == 0.0) continue;
                            for (int64_t ci = 0; ci < C; ++ci)
                                for (int64_t dy = 0; dy < kh; ++dy) {
                                    int64_t hi = ho + dy - pad;
                                    if (hi < 0 || hi >= H) {
                                        if (!replicate_pad) continue;
                                        hi = clamp_idx(hi, H);
                                    }
                                    for (int64_t dx = 0; dx < kw; ++dx) {
                                        int64_t wi = wo + dx - pad;
                                        if (wi < 0 || wi >= W) {
                                            if (!replicate_pad) continue;
                                            wi = clamp_idx(wi, W);
                                        }
                                        const size_t xi =
                                            static_cast<size_t>(((n0 * C + ci) * H + hi) * W + wi);
                                        const size_t wix =
                                            static_cast<size_t>(((co * Ci + ci) * kh + dy) * kw + dx);
                                        if (need_x) xn->grad[xi] += go * wn->val[wix];
                                        if (need_w) wn->grad[wix] += go * xn->val[xi];
                                    }
                                }
                        }
        };
    }
    return Var(node);
}

Var avgpool2(const Var& x) {
    require(x.shape().size() == 4, ErrorKind::Validation, "avgpool2: rank-4 only");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(H % 2 == 0 && W % 2 == 0, ErrorKind::Validation, "avgpool2: odd spatial dims");
    auto node = make_node({N, C, H / 2, W / 2}, {x.n});
    for (int64_t n0 = 0; n0 < N; ++n0)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t h = 0; h < H / 2; ++h)
                for (int64_t w0 = 0; w0 < W / 2; ++w0) {
                    const double* base = x.n->val.data() + ((n0 * C + c) * H + 2 * h) * W + 2 * w0;
                    node->val[static_cast<size_t>(((n0 * C + c) * (H / 2) + h) * (W / 2) + w0)] =
                        0.25 * (base[0] + base[1] + base[W] + base[W + 1]);
                }
    if (node->needs_grad) {
        NodePtr xn = x.n;
        node->backward = [xn, N, C, H, W](Node& self) {
            xn->ensure_grad();
            for (int64_t n0 = 0; n0 < N; ++n0)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t h = 0; h < H / 2; ++h)
                        for (int64_t w0 = 0; w0 < W / 2; ++w0) {
                            const double gq =
                                0.25 * self.grad[static_cast<size_t>(
                                           ((n0 * C + c) * (H / 2) + h) * (W / 2) + w0)];
                            double* base =
                                xn->grad.data() + ((n0 * C + c) * H + 2 * h) * W + 2 * w0;
                            base[0] += gq;
                            base[1] += gq;
                            base[W] += gq;
                            base[W + 1] += gq;
                        }
        };
    }
    return Var(node);
}

Var upsample2(const Var& x) {
    require(x.shape().size() == 4, ErrorKind::Validation, "upsample2: rank-4 only");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto node = make_node({N, C, H * 2, W * 2}, {x.n});
    for (int64_t n0 = 0; n0 < N; ++n0)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t h = 0; h < H * 2; ++h)
                for (int64_t w0 = 0; w0 < W * 2; ++w0)
                    node->val[static_cast<size_t>(((n0 * C + c) * H * 2 + h) * W * 2 + w0)] =
                        x.n->val[static_cast<size_t>(((n0 * C + c) * H + h / 2) * W + w0 / 2)];
    if (node->needs_grad) {
        NodePtr xn = x.n;
        node->backward = [xn, N, C, H, W](Node& self) {
            xn->ensure_grad();
            for (int64_t n0 = 0; n0 < N; ++n0)
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t h = 0; h < H * 2; ++h)
                        for (int64_t w0 = 0; w0 < W * 2; ++w0)
                            xn->grad[static_cast<size_t>(((n0 * C + c) * H + h / 2) * W + w0 / 2)] +=
                                self.grad[static_cast<size_t>(
                                    ((n0 * C + c) * H * 2 + h) * W * 2 + w0)];
        };
    }
    return Var(node);
}

Var groupnorm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    require(x.shape().size() == 4, ErrorKind::Validation, "groupnorm: rank-4 only");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(C % groups == 0, ErrorKind::Validation, "groupnorm: C % groups != 0");
    require(gamma.numel() == C && beta.numel() == C, ErrorKind::Validation,
            "groupnorm: gamma/beta size mismatch");
    const int64_t cpg = C / groups;
    const int64_t gsize = cpg * H * W;
    auto node = make_node(x.shape(), {x.n, gamma.n, beta.n});
    auto cache = std::make_shared<std::vector<double>>(static_cast<size_t>(N * groups * 2));
    for (int64_t n0 = 0; n0 < N; ++n0)
        for (int64_t g = 0; g < groups; ++g) {
            const double* base = x.n->val.data() + (n0 * C + g * cpg) * H * W;
            double mean = 0.0;
            for (int64_t i = 0; i < gsize; ++i) mean += base[i];
            mean /= static_cast<double>(gsize);
            double var = 0.0;
            for (int64_t i = 0; i < gsize; ++i) var += (base[i] - mean) * (base[i] - mean);
            var /= static_cast<double>(gsize);
            const double invstd = 1.0 / std::sqrt(var + eps);
            (*cache)[static_cast<size_t>(2 * (n0 * groups + g))] = mean;
            (*cache)[static_cast<size_t>(2 * (n0 * groups + g) + 1)] = invstd;
            double* out = node->val.data() + (n0 * C + g * cpg) * H * W;
            for (int64_t c = 0; c < cpg; ++c) {
                const double gm = gamma.n->val[static_cast<size_t>(g * cpg + c)];
                const double bt = beta.n->val[static_cast<size_t>(g * cpg + c)];
                for (int64_t i = 0; i < H * W; ++i)
                    out[c * H * W + i] = (base[c * H * W + i] - mean) * invstd * gm + bt;
            }
        }
    if (node->needs_grad) {
        NodePtr xn = x.n, gn = gamma.n, bn = beta.n;
        node->backward = [xn, gn, bn, cache, N, C, H, W, groups, cpg, gsize](Node& self) {
            for (int64_t n0 = 0; n0 < N; ++n0)
                for (int64_t g = 0; g < groups; ++g) {
                    const double mean = (*cache)[static_cast<size_t>(2 * (n0 * groups + g))];
                    const double invstd = (*cache)[static_cast<size_t>(2 * (n0 * groups + g) + 1)];
                    const double* base = xn->val.data() + (n0 * C + g * cpg) * H * W;
                    const double* gr = self.grad.data() + (n0 * C + g * cpg) * H * W;
                    if (gn->needs_grad || bn->needs_grad) {
                        gn->ensure_grad();
                        bn->ensure_grad();
                        for (int64_t c = 0; c < cpg; ++c) {
                            double sg = 0.0, sb = 0.0;
                            for (int64_t i = 0; i < H * W; ++i) {
                                sg += gr[c * H * W + i] * (base[c * H * W + i] - mean) * invstd;
                                sb += gr[c * H * W + i];
                            }
                            gn->grad[static_cast<size_t>(g * cpg + c)] += sg;
                            bn->grad[static_cast<size_t>(g * cpg + c)] += sb;
                        }
                    }
                    if (xn->needs_grad) {
                        xn->ensure_grad();
                        double sum_gh = 0.0, sum_ghx = 0.0;
                        for (int64_t c = 0; c < cpg; ++c) {
                            const double gm = gn->val[static_cast<size_t>(g * cpg + c)];
                            for (int64_t i = 0; i < H * W; ++i) {
                                const double gh = gr[c * H * W + i] * gm;
                                sum_gh += gh;
                                sum_ghx += gh * (base[c * H * W + i] - mean) * invstd;
                            }
                        }
                        double* dx = xn->grad.data() + (n0 * C + g * cpg) * H * W;
                        const double inv_n = 1.0 / static_cast<double>(gsize);
                        for (int64_t c = 0; c < cpg; ++c) {
                            const double gm = gn->val[static_cast<size_t>(g * cpg + c)];
                            for (int64_t i = 0; i < H * W; ++i) {
                                const double gh = gr[c * H * W + i] * gm;
                                const double xhat = (base[c * H * W + i] - mean) * invstd;
                                dx[c * H * W + i] +=
                                    invstd * (gh - inv_n * sum_gh - xhat * inv_n * sum_ghx);
                            }
                        }
                    }
                }
        };
    }
    return Var(node);
}

Var add_bias_chw(const Var& x, const Var& bias) {
    require(x.shape().size() == 4 && bias.shape().size() == 1 && bias.numel() == x.dim(1),
            ErrorKind::Validation, "add_bias_chw: shape mismatch");
    const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    auto node = make_node(x.shape(), {x.n, bias.n});
    for (int64_t n0 = 0; n0 < N; ++n0)
        for (int64_t c = 0; c < C; ++c) {
            const double b = bias.n->val[static_cast<size_t>(c)];
            const double* src = x.n->val.data() + (n0 * C + c) * HW;
            double* dst = node->val.data() + (n0 * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] + b;
        }
    if (node->needs_grad) {
        NodePtr xn = x.n, bn = bias.n;
        node->backward = [xn, bn, N, C, HW](Node& self) {
            if (xn->needs_grad) {
                xn->ensure_grad();
                for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t n0 = 0; n0 < N; ++n0)
                    for (int64_t c = 0; c < C; ++c) {
                        double s = 0.0;
                        const double* g = self.grad.data() + (n0 * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) s += g[i];
                        bn->grad[static_cast<size_t>(c)] += s;
                    }
            }
        };
    }
    return Var(node);
}

Var concat_channels(const Var& a, const Var& b) {
    require(a.shape().size() == 4 && b.shape().size() == 4 && a.dim(0) == b.dim(0) &&
                a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            ErrorKind::Validation, "concat_channels: shape mismatch");
    const int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), HW = a.dim(2) * a.dim(3);
    auto node = make_node({N, Ca + Cb, a.dim(2), a.dim(3)}, {a.n, b.n});
    for (int64_t n0 = 0; n0 < N; ++n0) {
        std::copy_n(a.n->val.begin() + n0 * Ca * HW, Ca * HW,
                    node->val.begin() + n0 * (Ca + Cb) * HW);
        std::copy_n(b.n->val.begin() + n0 * Cb * HW, Cb * HW,
                    node->val.begin() + n0 * (Ca + Cb) * HW + Ca * HW);
    }
    if (node->needs_grad) {
        NodePtr an = a.n, bn = b.n;
        node->backward = [an, bn, N, Ca, Cb, HW](Node& self) {
            if (an->needs_grad) {
                an->ensure_grad();
                for (int64_t n0 = 0; n0 < N; ++n0)
                    for (int64_t i = 0; i < Ca * HW; ++i)
                        an->grad[static_cast<size_t>(n0 * Ca * HW + i)] +=
                            self.grad[static_cast<size_t>(n0 * (Ca + Cb) * HW + i)];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (int64_t n0 = 0; n0 < N; ++n0)
                    for (int64_t i = 0; i < Cb * HW; ++i)
                        bn->grad[static_cast<size_t>(n0 * Cb * HW + i)] +=
                            self.grad[static_cast<size_t>(n0 * (Ca + Cb) * HW + Ca * HW + i)];
            }
        };
    }
    return Var(node);
}

namespace {

// Shared machinery for the three fused attention variants over [N,C,H,W].
enum class AttnMode { Spatial, Cross, Temporal };

Var attention_impl(AttnMode mode, const Var& x, const Var& cond, const Var& wq, const Var& wk,
                   const Var& wv, const Var& wo, int heads, int lookback) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t HW = H * W;
    require(C % heads == 0, ErrorKind::Validation, "attention: C % heads != 0");
    require(wq.shape() == std::vector<int64_t>({C, C}) && wo.shape() == std::vector<int64_t>({C, C}),
            ErrorKind::Validation, "attention: wq/wo must be [C,C]");
    const int64_t ckv = mode == AttnMode::Cross ? cond.dim(1) : C;
    require(wk.shape() == std::vector<int64_t>({ckv, C}) &&
                wv.shape() == std::vector<int64_t>({ckv, C}),
            ErrorKind::Validation, "attention: wk/wv input dim mismatch");

    std::vector<NodePtr> ins = {x.n, wq.n, wk.n, wv.n, wo.n};
    if (mode == AttnMode::Cross) ins.push_back(cond.n);
    auto node = make_node(x.shape(), ins);

    auto seqs = std::make_shared<std::vector<MhaSeq>>();
    if (mode == AttnMode::Temporal) {
        // One sequence per spatial location, attending across frames.
        seqs->resize(static_cast<size_t>(HW));
        for (int64_t loc = 0; loc < HW; ++loc) {
            MhaSeq& s = (*seqs)[static_cast<size_t>(loc)];
            s.sq = s.sk = N;
            s.c = C;
            s.heads = heads;
            s.cq_in = s.ckv_in = C;
            s.causal = true;
            s.lookback = lookback;
            s.tq.resize(static_cast<size_t>(N * C));
            for (int64_t n0 = 0; n0 < N; ++n0)
                for (int64_t c = 0; c < C; ++c)
                    s.tq[static_cast<size_t>(n0 * C + c)] =
                        x.n->val[static_cast<size_t>((n0 * C + c) * HW + loc)];
            s.tkv = s.tq;
            s.forward(wq.n->val.data(), wk.n->val.data(), wv.n->val.data(), wo.n->val.data());
            for (int64_t n0 = 0; n0 < N; ++n0)
                for (int64_t c = 0; c < C; ++c)
                    node->val[static_cast<size_t>((n0 * C + c) * HW + loc)] =
                        s.out[static_cast<size_t>(n0 * C + c)];
        }
    } else {
        // One sequence per frame over H*W tokens.
        seqs->resize(static_cast<size_t>(N));
        for (int64_t n0 = 0; n0 < N; ++n0) {
            MhaSeq& s = (*seqs)[static_cast<size_t>(n0)];
            s.sq = HW;
            s.c = C;
            s.heads = heads;
            s.cq_in = C;
            s.tq.resize(static_cast<size_t>(HW * C));
            for (int64_t loc = 0; loc < HW; ++loc)
                for (int64_t c = 0; c < C; ++c)
                    s.tq[static_cast<size_t>(loc * C + c)] =
                        x.n->val[static_cast<size_t>((n0 * C + c) * HW + loc)];
            if (mode == AttnMode::Cross) {
                s.sk = cond.dim(0);
                s.ckv_in = ckv;
                s.tkv.assign(cond.n->val.begin(), cond.n->val.end());
            } else {
                s.sk = HW;
                s.ckv_in = C;
                s.tkv = s.tq;
            }
            s.forward(wq.n->val.data(), wk.n->val.data(), wv.n->val.data(), wo.n->val.data());
            for (int64_t loc = 0; loc < HW; ++loc)
                for (int64_t c = 0; c < C; ++c)
                    node->val[static_cast<size_t>((n0 * C + c) * HW + loc)] =
                        s.out[static_cast<size_t>(loc * C + c)];
        }
    }

    if (node->needs_grad) {
        NodePtr xn = x.n, condn = mode == AttnMode::Cross ? cond.n : nullptr;
        NodePtr wqn = wq.n, wkn = wk.n, wvn = wv.n, won = wo.n;
        node->backward = [=](Node& self) {
            xn->ensure_grad();
            wqn->ensure_grad();
            wkn->ensure_grad();
            wvn->ensure_grad();
            won->ensure_grad();
            if (condn && condn->needs_grad) condn->ensure_grad();
            if (mode == AttnMode::Temporal) {
                std::vector<double> dout(static_cast<size_t>(N * C));
                std::vector<double> dt(static_cast<size_t>(N * C));
                for (int64_t loc = 0; loc < HW; ++loc) {
                    const MhaSeq& s = (*seqs)[static_cast<size_t>(loc)];
                    for (int64_t n0 = 0; n0 < N; ++n0)
                        for (int64_t c = 0; c < C; ++c)
                            dout[static_cast<size_t>(n0 * C + c)] =
                                self.grad[static_cast<size_t>((n0 * C + c) * HW + loc)];
                    std::fill(dt.begin(), dt.end(), 0.0);
                    s.backward(dout.data(), wqn->val.data(), wkn->val.data(), wvn->val.data(),
                               won->val.data(), wqn->grad.data(), wkn->grad.data(),
                               wvn->grad.data(), won->grad.data(), dt.data(), dt.data());
                    for (int64_t n0 = 0; n0 < N; ++n0)
                        for (int64_t c = 0; c < C; ++c)
                            xn->grad[static_cast<size_t>((n0 * C + c) * HW + loc)] +=
                                dt[static_cast<size_t>(n0 * C + c)];
                }
            } else {
                std::vector<double> dout(static_cast<size_t>(HW * C));
                std::vector<double> dtq(static_cast<size_t>(HW * C));
                std::vector<double> dtkv;
                for (int64_t n0 = 0; n0 < N; ++n0) {
                    const MhaSeq& s = (*seqs)[static_cast<size_t>(n0)];
                    for (int64_t loc = 0; loc < HW; ++loc)
                        for (int64_t c = 0; c < C; ++c)
                            dout[static_cast<size_t>(loc * C + c)] =
                                self.grad[static_cast<size_t>((n0 * C + c) * HW + loc)];
                    std::fill(dtq.begin(), dtq.end(), 0.0);
                    double* dtkv_ptr = nullptr;
                    if (mode == AttnMode::Cross) {
                        dtkv.assign(static_cast<size_t>(s.sk * s.ckv_in), 0.0);
                        dtkv_ptr = dtkv.data();
                    } else {
                        dtkv_ptr = dtq.data();  // self-attention: kv tokens are the q tokens
                    }
                    s.backward(dout.data(), wqn->val.data(), wkn->val.data(), wvn->val.data(),
                               won->val.data(), wqn->grad.data(), wkn->grad.data(),
                               wvn->grad.data(), won->grad.data(), dtq.data(), dtkv_ptr);
                    for (int64_t loc = 0; loc < HW; ++loc)
                        for (int64_t c = 0; c < C; ++c)
                            xn->grad[static_cast<size_t>((n0 * C + c) * HW + loc)] +=
                                dtq[static_cast<size_t>(loc * C + c)];
                    if (mode == AttnMode::Cross && condn && condn->needs_grad)
                        for (size_t i = 0; i < dtkv.size(); ++i) condn->grad[i] += dtkv[i];
                }
            }
        };
    }
    return Var(node);
}

}  // namespace

Var spatial_attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& wo,
                      int heads) {
    return attention_impl(AttnMode::Spatial, x, Var(), wq, wk, wv, wo, heads, 0);
}

Var cross_attention(const Var& x, const Var& cond, const Var& wq, const Var& wk, const Var& wv,
                    const Var& wo, int heads) {
    require(cond.shape().size() == 2, ErrorKind::Validation, "cross_attention: cond rank-2");
    return attention_impl(AttnMode::Cross, x, cond, wq, wk, wv, wo, heads, 0);
}

Var temporal_attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& wo,
                       int heads, int lookback) {
    require(lookback >= 0, ErrorKind::Validation, "temporal_attention: lookback >= 0");
    return attention_impl(AttnMode::Temporal, x, Var(), wq, wk, wv, wo, heads, lookback);
}

void backward(const Var& loss) {
    require(loss.numel() == 1, ErrorKind::Validation, "backward: loss must be scalar");
    // Topological order via iterative DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<NodePtr, size_t>> stack;
    stack.emplace_back(loss.n, 0);
    visited.insert(loss.n.get());
    std::vector<NodePtr> keep;  // hold refs while walking
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            NodePtr child = node->inputs[idx++];
            if (child->needs_grad && !visited.count(child.get())) {
                visited.insert(child.get());
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node.get());
            keep.push_back(node);
            stack.pop_back();
        }
    }
    loss.n->ensure_grad();
    loss.n->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

Var ParamStore::add(const std::string& name, std::vector<int64_t> shape,
                    const std::function<double(Rng&)>& init, Rng rng) {
    require(!params_.count(name), ErrorKind::Validation, "duplicate parameter: " + name);
    const int64_t n = Tensor::numel_of(shape);
    std::vector<double> data(static_cast<size_t>(n));
    for (auto& v : data) v = round_f32(init(rng));
    Var var = leaf(std::move(shape), std::move(data), true);
    params_[name] = var.n;
    return var;
}

Var ParamStore::add_zeros(const std::string& name, std::vector<int64_t> shape) {
    require(!params_.count(name), ErrorKind::Validation, "duplicate parameter: " + name);
    Var var = zeros(std::move(shape), true);
    params_[name] = var.n;
    return var;
}

Var ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), ErrorKind::Validation, "no parameter named " + name);
    return Var(it->second);
}

bool ParamStore::contains(const std::string& name) const { return params_.count(name) > 0; }

void ParamStore::zero_grad() {
    for (auto& [name, n] : params_) std::fill(n->grad.begin(), n->grad.end(), 0.0);
}

size_t ParamStore::count_scalars() const {
    size_t n = 0;
    for (const auto& [name, node] : params_) n += node->val.size();
    return n;
}

void ParamStore::save(NamedTensors& out, const std::string& prefix) const {
    for (const auto& [name, node] : params_) {
        std::vector<float> data(node->val.size());
        for (size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(node->val[i]);
        out.add(prefix + name, Tensor(node->shape, std::move(data)));
    }
}

void ParamStore::load(const NamedTensors& in, const std::string& prefix) {
    for (auto& [name, node] : params_) {
        const Tensor& t = in.get(prefix + name);
        require(t.shape == node->shape, ErrorKind::Validation,
                "checkpoint shape mismatch for " + name);
        for (size_t i = 0; i < node->val.size(); ++i)
            node->val[i] = static_cast<double>(t.data[i]);
    }
}

void Adam::step(ParamStore& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, node] : params.all()) {
        if (node->grad.empty()) continue;
        auto& [m, v] = state_[name];
        if (m.size() != node->val.size()) {
            m.assign(node->val.size(), 0.0);
            v.assign(node->val.size(), 0.0);
        }
        for (size_t i = 0; i < node->val.size(); ++i) {
            const double g = node->grad[i];
            require(std::isfinite(g), ErrorKind::Numeric, "non-finite gradient in " + name);
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            node->val[i] = round_f32(node->val[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
}

}  // namespace neurovid::ag
