#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "neurovid/archive.hpp"
#include "neurovid/rng.hpp"
#include "neurovid/tensor.hpp"

namespace neurovid::ag {

// Reverse-mode tape over dense double buffers. Values are double for
// finite-difference-friendly gradients; parameters are kept on the f32 grid
// (rounded after every update) so checkpoints round-trip bit-exactly through
// the f32 archive.
struct Node {
    std::vector<int64_t> shape;
    std::vector<double> val;
    std::vector<double> grad;
    bool needs_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    int64_t numel() const { return static_cast<int64_t>(val.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    void ensure_grad() {
        if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

struct Var {
    NodePtr n;

    Var() = default;
    explicit Var(NodePtr p) : n(std::move(p)) {}
    bool defined() const { return static_cast<bool>(n); }
    const std::vector<int64_t>& shape() const { return n->shape; }
    int64_t dim(size_t i) const { return n->dim(i); }
    int64_t numel() const { return n->numel(); }
    double scalar() const { return n->val.at(0); }
    const std::vector<double>& val() const { return n->val; }
};

Var leaf(std::vector<int64_t> shape, std::vector<double> data, bool needs_grad = false);
Var constant(std::vector<int64_t> shape, std::vector<double> data);
Var zeros(std::vector<int64_t> shape, bool needs_grad = false);
Var from_tensor(const Tensor& t, bool needs_grad = false);
Tensor to_tensor(const Var& v);

// Elementwise (shape-agnostic).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var relu(const Var& a);
Var gelu(const Var& a);
Var silu(const Var& a);
Var square(const Var& a);

// 2D linear algebra; shapes are [rows, cols].
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add_rowvec(const Var& x, const Var& r);   // [n,m] + [m]
Var slice_cols(const Var& a, int64_t start, int64_t len);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, int64_t start, int64_t len);
Var concat_rows(const std::vector<Var>& parts);
Var softmax_rows(const Var& a);
Var layernorm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2normalize_rows(const Var& x);
Var mean_rows(const Var& x);                  // [n,m] -> [1,m]
Var reshape(const Var& x, std::vector<int64_t> shape);

// Reductions / losses.
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var mse_loss(const Var& a, const Var& b);
Var cross_entropy_rows(const Var& logits, const std::vector<int>& targets);

// 4D image ops; layout [N, C, H, W]. Convolution padding reads zeros by
// default; `replicate_pad` clamps to the nearest edge pixel instead, which
// keeps spatially constant inputs constant.
Var conv2d(const Var& x, const Var& w, const Var& b, int pad, bool replicate_pad = false);
Var avgpool2(const Var& x);
Var upsample2(const Var& x);
Var groupnorm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var add_bias_chw(const Var& x, const Var& bias);
Var concat_channels(const Var& a, const Var& b);

// Attention over feature maps. All project with square weights [C, C] unless
// noted. spatial: per-frame full self-attention over H*W tokens. cross:
// queries from the map, keys/values from condition rows [S_c, d_c] through
// wk/wv [d_c, C]. temporal: per spatial location, causal attention over the
// current and `lookback` previous frames.
Var spatial_attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& wo,
                      int heads);
Var cross_attention(const Var& x, const Var& cond, const Var& wq, const Var& wk, const Var& wv,
                    const Var& wo, int heads);
Var temporal_attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& wo,
                       int heads, int lookback);

void backward(const Var& loss);

// Named parameter set. Values live on the f32 grid; `step` rounds after each
// Adam update so the archive round trip is lossless.
class ParamStore {
  public:
    Var add(const std::string& name, std::vector<int64_t> shape,
            const std::function<double(Rng&)>& init, Rng rng);
    Var add_zeros(const std::string& name, std::vector<int64_t> shape);
    Var get(const std::string& name) const;
    bool contains(const std::string& name) const;
    const std::map<std::string, NodePtr>& all() const { return params_; }
    void zero_grad();
    size_t count_scalars() const;

    void save(NamedTensors& out, const std::string& prefix) const;
    void load(const NamedTensors& in, const std::string& prefix);

  private:
    std::map<std::string, NodePtr> params_;
};

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
    void step(ParamStore& params);
    void set_lr(double lr) { cfg_.lr = lr; }
    int64_t steps_taken() const { return t_; }

  private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

inline double round_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace neurovid::ag
