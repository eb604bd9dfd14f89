#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace hybridla {

using Shape = std::vector<int>;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily by ensure_grad()
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Pulls this node's grad into its parents. Null for leaves.
    std::function<void(Node&)> backward;

    size_t size() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major f64 tensor participating in a reverse-mode gradient graph.
// Copies share the underlying node (shallow value semantics); ops execute
// eagerly and record a backward closure. Graphs are acyclic by construction.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v, bool requires_grad = false);
    static Tensor from_data(const Shape& shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    size_t size() const { return node_->value.size(); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }

    std::vector<double>& data() { return node_->value; }
    const std::vector<double>& data() const { return node_->value; }
    const std::vector<double>& grad() const;
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    void zero_grad();

    // Scalar extraction; ContractError unless size() == 1.
    double item() const;
    double at(std::initializer_list<int> idx) const;

    // Detached copy of the current values (no graph edge).
    Tensor detach_copy() const;

    std::shared_ptr<detail::Node> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> n);

private:
    std::shared_ptr<detail::Node> node_;
};

// Custom-op escape hatch: builds a graph node with an explicit backward
// closure. Exposed so tests can construct deliberately broken ops.
Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward_fn);

// ---- elementwise / arithmetic ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// mat [N x C] + bias [C] broadcast over rows.
Tensor add_row_bias(const Tensor& mat, const Tensor& bias);
// map [C x H x W] + bias [C] broadcast over spatial positions.
Tensor add_channel_bias(const Tensor& map, const Tensor& bias);

// ---- normalization / probability ----
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
// Normalizes the last dimension to zero mean / unit variance, then affine.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// ---- convolution / attention ----
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad);
// Scaled dot-product attention: q [Nq x C], k,v [Nk x C], C divisible by heads.
// mask, when given, is [Nq x Nk] additive (0 = visible, large negative = hidden).
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                            const Tensor* mask = nullptr);

// ---- shape manipulation ----
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int start, int count);
Tensor slice_cols(const Tensor& x, int start, int count);
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);

// ---- reductions ----
Tensor sum(const Tensor& x);
// mat [N x C] -> [1 x C] column means.
Tensor mean_rows(const Tensor& x);

// ---- detection-specific ----
// Boxes [N x 4] as (cx, cy, w, h): clamps cx, cy to [0,1] and w, h to
// [kMinBoxExtent, 1] so refined boxes always keep positive area.
inline constexpr double kMinBoxExtent = 1e-4;
Tensor clamp_box_unit(const Tensor& boxes);

// Negative log likelihood over log_probs [N x K] at integer targets, weighted
// per class and normalized by the total target weight (weighted mean).
Tensor nll_loss(const Tensor& log_probs, const std::vector<int>& targets,
                const std::vector<double>& class_weights);
// Numerically stable binary cross entropy from a logit tensor (scalar) and target.
Tensor bce_with_logits(const Tensor& logit, double target);

// ---- autodiff driver ----
// Populates grads of every requires_grad node reachable from `loss` (scalar).
// Grads accumulate across calls until zeroed.
void backward(const Tensor& loss);

// Max over coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|) against
// central finite differences with step h. f must be a pure function of x.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h);

}  // namespace hybridla
