#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dladiff/tensor.hpp"

/// Minimal reverse-mode automatic differentiation over dladiff::Tensor.
///
/// A Var is a handle to a node in a dynamically recorded graph. Nodes that do
/// not (transitively) depend on a grad-requiring leaf record nothing, so pure
/// inference passes cost no more than the forward arithmetic.
namespace dladiff::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    /// Accumulated gradient; zero-filled if backward never reached this node.
    Tensor grad() const;
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }
    double item() const;

    const NodePtr& node() const { return node_; }

private:
    friend Var make_node(Tensor, std::vector<Var>, std::function<void(Node&)>);
    NodePtr node_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var param(Tensor t) { return Var(std::move(t), true); }

/// Builds an interior node; `fn` runs during backward with the node's grad
/// filled and must accumulate into parents that require grad.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn);

/// Runs reverse accumulation from a scalar root.
void backward(const Var& root);

// Elementwise / broadcast arithmetic.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// a[n x m] + b[m] broadcast over rows.
Var add_row(const Var& a, const Var& b);
/// a[n x m] * b[m] broadcast over rows.
Var mul_row(const Var& a, const Var& b);

Var silu(const Var& a);
Var relu(const Var& a);
/// Clamp to [lo, hi]; gradient is passed only where the input is strictly inside.
Var clamp(const Var& a, double lo, double hi);

/// Treats `a` as rows x cols (last axis = cols) and `b` as a 2-D matrix.
/// Output keeps a's leading dims with last dim = b.cols().
Var matmul(const Var& a, const Var& b);
/// a x W + bias, bias optional (undefined Var skips it).
Var linear(const Var& a, const Var& w, const Var& bias);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape s);

Var softmax_rows(const Var& a);
Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);

/// [h,w,c] -> [h*w, 9c] with zero padding, column order (ky, kx, c).
Var im2col3x3(const Var& a);
/// 3x3 same-padding convolution; w is [9*cin, cout].
Var conv3x3(const Var& a, const Var& w, const Var& bias);
Var space_to_depth(const Var& a, int block);
Var depth_to_space(const Var& a, int block);
Var avg_pool(const Var& a, int k);
Var concat_cols(const Var& a, const Var& b);
Var select_col(const Var& a, int j);
/// Mean over all rows: [.., c] -> [1, c].
Var mean_rows(const Var& a);

Var sum(const Var& a);
Var mean(const Var& a);
Var sum_sq(const Var& a);
Var l2_normalize(const Var& a, double eps = 1e-12);
/// Cosine similarity of two flattened tensors, as a scalar node.
Var cosine(const Var& a, const Var& b, double eps = 1e-12);

/// Mean cross-entropy of row-wise logits against integer labels.
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

/// Affine 2x3 map from output pixel coordinates to source coordinates.
struct AffineSampler {
    double m[2][3];
};

/// One bilinear tap: output pixel `out` reads source pixel `src` with weight
/// `wt` (flat row-major pixel indices). Out-of-range taps are omitted.
struct WarpTap {
    int out;
    int src;
    double wt;
};
std::vector<WarpTap> bilinear_taps(const AffineSampler& out_to_src, int h, int w, int out_h, int out_w);

/// Bilinear resampling of an [H,W,c] image onto an [out_h,out_w,c] grid.
/// Pixel (i,j) has its center at (j+0.5, i+0.5). Samples outside the source
/// read as zero.
Var warp_bilinear(const Var& img, const AffineSampler& out_to_src, int out_h, int out_w);

}  // namespace dladiff::ag
