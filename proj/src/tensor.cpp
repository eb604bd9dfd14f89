#include "hybridla/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "hybridla/errors.hpp"

namespace hybridla {

namespace {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

bool any_requires_grad(const std::vector<Tensor>& parents) {
    for (const auto& p : parents)
        if (p.requires_grad()) return true;
    return false;
}

// Shared helper for unary elementwise ops: y = fwd(x), dx += dfn(x, y) * g.
template <typename Fwd, typename Dfn>
Tensor unary_op(const Tensor& a, Fwd fwd, Dfn dfn) {
    std::vector<double> out(a.size());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
    return make_op(a.shape(), std::move(out), {a}, [dfn](detail::Node& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.value.size(); ++i) p.grad[i] += dfn(p.value[i], n.value[i]) * n.grad[i];
    });
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return from_data(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
    return from_data(shape, std::vector<double>(shape_numel(shape), v), requires_grad);
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw DimensionError("from_data: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
    auto n = std::make_shared<detail::Node>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return wrap(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from_data({1}, {v}, requires_grad); }

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    if (idx.size() != node_->shape.size()) throw DimensionError("at(): index rank mismatch");
    size_t flat = 0;
    size_t d = 0;
    for (int i : idx) {
        flat = flat * static_cast<size_t>(node_->shape[d]) + static_cast<size_t>(i);
        ++d;
    }
    return node_->value[flat];
}

Tensor Tensor::detach_copy() const { return from_data(shape(), data(), false); }

Tensor make_op(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
               std::function<void(detail::Node&)> backward_fn) {
    if (shape_numel(shape) != value.size()) throw DimensionError("make_op: value size does not match shape");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = any_requires_grad(parents);
    if (n->requires_grad) {
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(backward_fn);
    }
    return Tensor::wrap(std::move(n));
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        for (int side = 0; side < 2; ++side) {
            auto& p = *n.parents[static_cast<size_t>(side)];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) p.grad[i] += n.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pa.grad[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pb.grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pa.grad[i] += pb.value[i] * n.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < n.value.size(); ++i) pb.grad[i] += pa.value[i] * n.grad[i];
        }
    });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    return make_op(a.shape(), std::move(out), {a}, [c](detail::Node& n) {
        auto& p = *n.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < n.value.size(); ++i) p.grad[i] += c * n.grad[i];
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(
        a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a,
        [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sin(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor abs(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor softplus(const Tensor& a) {
    // log(1 + e^x), computed without overflow for large |x|.
    return unary_op(
        a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x, double) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "minimum");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(a.data()[i], b.data()[i]);
    // Ties route the gradient to the first argument.
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (size_t i = 0; i < n.value.size(); ++i) {
            if (pa.value[i] <= pb.value[i]) {
                if (pa.requires_grad) {
                    pa.ensure_grad();
                    pa.grad[i] += n.grad[i];
                }
            } else if (pb.requires_grad) {
                pb.ensure_grad();
                pb.grad[i] += n.grad[i];
            }
        }
    });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "maximum");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], b.data()[i]);
    return make_op(a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (size_t i = 0; i < n.value.size(); ++i) {
            if (pa.value[i] >= pb.value[i]) {
                if (pa.requires_grad) {
                    pa.ensure_grad();
                    pa.grad[i] += n.grad[i];
                }
            } else if (pb.requires_grad) {
                pb.ensure_grad();
                pb.grad[i] += n.grad[i];
            }
        }
    });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
    const double* av = a.data().data();
    const double* bv = b.data().data();
    for (int i = 0; i < m; ++i) {
        double* orow = out.data() + static_cast<size_t>(i) * n;
        const double* arow = av + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double aik = arow[p];
            if (aik == 0.0) continue;
            const double* brow = bv + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    return make_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        const double* g = nd.grad.data();
        if (pa.requires_grad) {
            pa.ensure_grad();
            // dA[i,p] += sum_j g[i,j] * B[p,j]
            for (int i = 0; i < m; ++i) {
                const double* grow = g + static_cast<size_t>(i) * n;
                double* darow = pa.grad.data() + static_cast<size_t>(i) * k;
                for (int p = 0; p < k; ++p) {
                    const double* brow = pb.value.data() + static_cast<size_t>(p) * n;
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    darow[p] += acc;
                }
            }
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            // dB[p,j] += sum_i A[i,p] * g[i,j]
            for (int i = 0; i < m; ++i) {
                const double* arow = pa.value.data() + static_cast<size_t>(i) * k;
                const double* grow = g + static_cast<size_t>(i) * n;
                for (int p = 0; p < k; ++p) {
                    const double aip = arow[p];
                    if (aip == 0.0) continue;
                    double* dbrow = pb.grad.data() + static_cast<size_t>(p) * n;
                    for (int j = 0; j < n; ++j) dbrow[j] += aip * grow[j];
                }
            }
        }
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw DimensionError("transpose: expects rank-2, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    std::vector<double> out(a.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
    return make_op({n, m}, std::move(out), {a}, [m, n](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                p.grad[static_cast<size_t>(i) * n + j] += nd.grad[static_cast<size_t>(j) * m + i];
    });
}

Tensor add_row_bias(const Tensor& mat, const Tensor& bias) {
    if (mat.rank() != 2 || bias.rank() != 1 || bias.dim(0) != mat.dim(1))
        throw DimensionError("add_row_bias: " + shape_str(mat.shape()) + " + " + shape_str(bias.shape()));
    const int rows = mat.dim(0), cols = mat.dim(1);
    std::vector<double> out(mat.size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            out[static_cast<size_t>(i) * cols + j] = mat.data()[static_cast<size_t>(i) * cols + j] + bias.data()[static_cast<size_t>(j)];
    return make_op(mat.shape(), std::move(out), {mat, bias}, [rows, cols](detail::Node& nd) {
        auto& pm = *nd.parents[0];
        auto& pb = *nd.parents[1];
        if (pm.requires_grad) {
            pm.ensure_grad();
            for (size_t i = 0; i < nd.value.size(); ++i) pm.grad[i] += nd.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) pb.grad[static_cast<size_t>(j)] += nd.grad[static_cast<size_t>(i) * cols + j];
        }
    });
}

Tensor add_channel_bias(const Tensor& map, const Tensor& bias) {
    if (map.rank() != 3 || bias.rank() != 1 || bias.dim(0) != map.dim(0))
        throw DimensionError("add_channel_bias: " + shape_str(map.shape()) + " + " + shape_str(bias.shape()));
    const int c = map.dim(0);
    const size_t hw = map.size() / static_cast<size_t>(c);
    std::vector<double> out(map.size());
    for (int ch = 0; ch < c; ++ch)
        for (size_t i = 0; i < hw; ++i) out[static_cast<size_t>(ch) * hw + i] = map.data()[static_cast<size_t>(ch) * hw + i] + bias.data()[static_cast<size_t>(ch)];
    return make_op(map.shape(), std::move(out), {map, bias}, [c, hw](detail::Node& nd) {
        auto& pm = *nd.parents[0];
        auto& pb = *nd.parents[1];
        if (pm.requires_grad) {
            pm.ensure_grad();
            for (size_t i = 0; i < nd.value.size(); ++i) pm.grad[i] += nd.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (int ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (size_t i = 0; i < hw; ++i) acc += nd.grad[static_cast<size_t>(ch) * hw + i];
                pb.grad[static_cast<size_t>(ch)] += acc;
            }
        }
    });
}

// ---- normalization / probability ----

namespace {

struct AxisSplit {
    size_t outer, dim, inner;
};

AxisSplit split_axis(const Tensor& x, int axis, const char* op) {
    if (axis < 0 || axis >= x.rank())
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                             shape_str(x.shape()));
    AxisSplit s{1, static_cast<size_t>(x.dim(axis)), 1};
    for (int i = 0; i < axis; ++i) s.outer *= static_cast<size_t>(x.dim(i));
    for (int i = axis + 1; i < x.rank(); ++i) s.inner *= static_cast<size_t>(x.dim(i));
    return s;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    const AxisSplit s = split_axis(x, axis, "softmax");
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (size_t o = 0; o < s.outer; ++o)
        for (size_t in = 0; in < s.inner; ++in) {
            double mx = -std::numeric_limits<double>::infinity();
            for (size_t d = 0; d < s.dim; ++d) mx = std::max(mx, xv[(o * s.dim + d) * s.inner + in]);
            double z = 0.0;
            for (size_t d = 0; d < s.dim; ++d) {
                const size_t idx = (o * s.dim + d) * s.inner + in;
                out[idx] = std::exp(xv[idx] - mx);
                z += out[idx];
            }
            for (size_t d = 0; d < s.dim; ++d) out[(o * s.dim + d) * s.inner + in] /= z;
        }
    return make_op(x.shape(), std::move(out), {x}, [s](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t o = 0; o < s.outer; ++o)
            for (size_t in = 0; in < s.inner; ++in) {
                double dot = 0.0;
                for (size_t d = 0; d < s.dim; ++d) {
                    const size_t idx = (o * s.dim + d) * s.inner + in;
                    dot += nd.grad[idx] * nd.value[idx];
                }
                for (size_t d = 0; d < s.dim; ++d) {
                    const size_t idx = (o * s.dim + d) * s.inner + in;
                    p.grad[idx] += (nd.grad[idx] - dot) * nd.value[idx];
                }
            }
    });
}

Tensor log_softmax(const Tensor& x, int axis) {
    const AxisSplit s = split_axis(x, axis, "log_softmax");
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (size_t o = 0; o < s.outer; ++o)
        for (size_t in = 0; in < s.inner; ++in) {
            double mx = -std::numeric_limits<double>::infinity();
            for (size_t d = 0; d < s.dim; ++d) mx = std::max(mx, xv[(o * s.dim + d) * s.inner + in]);
            double z = 0.0;
            for (size_t d = 0; d < s.dim; ++d) z += std::exp(xv[(o * s.dim + d) * s.inner + in] - mx);
            const double lz = mx + std::log(z);
            for (size_t d = 0; d < s.dim; ++d) {
                const size_t idx = (o * s.dim + d) * s.inner + in;
                out[idx] = xv[idx] - lz;
            }
        }
    return make_op(x.shape(), std::move(out), {x}, [s](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t o = 0; o < s.outer; ++o)
            for (size_t in = 0; in < s.inner; ++in) {
                double gsum = 0.0;
                for (size_t d = 0; d < s.dim; ++d) gsum += nd.grad[(o * s.dim + d) * s.inner + in];
                for (size_t d = 0; d < s.dim; ++d) {
                    const size_t idx = (o * s.dim + d) * s.inner + in;
                    p.grad[idx] += nd.grad[idx] - std::exp(nd.value[idx]) * gsum;
                }
            }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0.0) throw ParameterError("layer_norm: eps must be positive, got " + std::to_string(eps));
    if (x.rank() < 1) throw DimensionError("layer_norm: rank-0 input");
    const int c = x.dim(x.rank() - 1);
    if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
        throw DimensionError("layer_norm: gamma/beta must be [" + std::to_string(c) + "], got " +
                             shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    const size_t rows = x.size() / static_cast<size_t>(c);
    std::vector<double> out(x.size());
    std::vector<double> inv_std(rows);
    std::vector<double> x_hat(x.size());
    const auto& xv = x.data();
    for (size_t r = 0; r < rows; ++r) {
        const double* row = xv.data() + r * static_cast<size_t>(c);
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= c;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (int j = 0; j < c; ++j) {
            const size_t idx = r * static_cast<size_t>(c) + static_cast<size_t>(j);
            x_hat[idx] = (row[j] - mean) * is;
            out[idx] = x_hat[idx] * gamma.data()[static_cast<size_t>(j)] + beta.data()[static_cast<size_t>(j)];
        }
    }
    return make_op(x.shape(), std::move(out), {x, gamma, beta},
                   [c, rows, inv_std = std::move(inv_std), x_hat = std::move(x_hat)](detail::Node& nd) {
                       auto& px = *nd.parents[0];
                       auto& pg = *nd.parents[1];
                       auto& pb = *nd.parents[2];
                       const size_t cc = static_cast<size_t>(c);
                       for (size_t r = 0; r < rows; ++r) {
                           const double* g = nd.grad.data() + r * cc;
                           const double* xh = x_hat.data() + r * cc;
                           if (pg.requires_grad) {
                               pg.ensure_grad();
                               for (int j = 0; j < c; ++j) pg.grad[static_cast<size_t>(j)] += g[j] * xh[j];
                           }
                           if (pb.requires_grad) {
                               pb.ensure_grad();
                               for (int j = 0; j < c; ++j) pb.grad[static_cast<size_t>(j)] += g[j];
                           }
                           if (px.requires_grad) {
                               px.ensure_grad();
                               double mean_gy = 0.0, mean_gy_xh = 0.0;
                               for (int j = 0; j < c; ++j) {
                                   const double gy = g[j] * pg.value[static_cast<size_t>(j)];
                                   mean_gy += gy;
                                   mean_gy_xh += gy * xh[j];
                               }
                               mean_gy /= c;
                               mean_gy_xh /= c;
                               for (int j = 0; j < c; ++j) {
                                   const double gy = g[j] * pg.value[static_cast<size_t>(j)];
                                   px.grad[r * cc + static_cast<size_t>(j)] +=
                                       inv_std[r] * (gy - mean_gy - xh[j] * mean_gy_xh);
                               }
                           }
                       }
                   });
}

// ---- convolution ----

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad) {
    if (stride <= 0) throw ParameterError("conv2d: stride must be positive, got " + std::to_string(stride));
    if (pad < 0) throw ParameterError("conv2d: pad must be non-negative, got " + std::to_string(pad));
    if (x.rank() != 3 || kernel.rank() != 4)
        throw DimensionError("conv2d: expects x [Cin x H x W] and kernel [Cout x Cin x kh x kw], got " +
                             shape_str(x.shape()) + " and " + shape_str(kernel.shape()));
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int cout = kernel.dim(0), kcin = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kcin != cin)
        throw DimensionError("conv2d: kernel input channels " + std::to_string(kcin) + " vs map channels " +
                             std::to_string(cin));
    if (kh > h + 2 * pad || kw > w + 2 * pad)
        throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " larger than padded input " + std::to_string(h + 2 * pad) + "x" +
                             std::to_string(w + 2 * pad));
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<size_t>(cout) * oh * ow, 0.0);
    const auto& xv = x.data();
    const auto& kv = kernel.data();
    for (int co = 0; co < cout; ++co)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (int ci = 0; ci < cin; ++ci)
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= w) continue;
                            acc += xv[(static_cast<size_t>(ci) * h + iy) * w + ix] *
                                   kv[((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx];
                        }
                    }
                out[(static_cast<size_t>(co) * oh + oy) * ow + ox] = acc;
            }
    return make_op({cout, oh, ow}, std::move(out), {x, kernel},
                   [cin, h, w, cout, kh, kw, oh, ow, stride, pad](detail::Node& nd) {
                       auto& px = *nd.parents[0];
                       auto& pk = *nd.parents[1];
                       if (px.requires_grad) px.ensure_grad();
                       if (pk.requires_grad) pk.ensure_grad();
                       if (!px.requires_grad && !pk.requires_grad) return;
                       for (int co = 0; co < cout; ++co)
                           for (int oy = 0; oy < oh; ++oy)
                               for (int ox = 0; ox < ow; ++ox) {
                                   const double g = nd.grad[(static_cast<size_t>(co) * oh + oy) * ow + ox];
                                   if (g == 0.0) continue;
                                   for (int ci = 0; ci < cin; ++ci)
                                       for (int ky = 0; ky < kh; ++ky) {
                                           const int iy = oy * stride - pad + ky;
                                           if (iy < 0 || iy >= h) continue;
                                           for (int kx = 0; kx < kw; ++kx) {
                                               const int ix = ox * stride - pad + kx;
                                               if (ix < 0 || ix >= w) continue;
                                               const size_t xi = (static_cast<size_t>(ci) * h + iy) * w + ix;
                                               const size_t ki =
                                                   ((static_cast<size_t>(co) * cin + ci) * kh + ky) * kw + kx;
                                               if (px.requires_grad) px.grad[xi] += g * pk.value[ki];
                                               if (pk.requires_grad) pk.grad[ki] += g * px.value[xi];
                                           }
                                       }
                               }
                   });
}

// ---- attention ----

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads, const Tensor* mask) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
        throw DimensionError("multi_head_attention: q, k, v must be rank-2 token matrices");
    const int c = q.dim(1);
    if (k.dim(1) != c || v.dim(1) != c)
        throw DimensionError("multi_head_attention: feature dims disagree: " + shape_str(q.shape()) + ", " +
                             shape_str(k.shape()) + ", " + shape_str(v.shape()));
    if (k.dim(0) != v.dim(0))
        throw DimensionError("multi_head_attention: key/value token counts disagree");
    if (heads <= 0 || c % heads != 0)
        throw ParameterError("multi_head_attention: model dimension " + std::to_string(c) +
                             " not divisible by heads " + std::to_string(heads));
    if (mask && (mask->rank() != 2 || mask->dim(0) != q.dim(0) || mask->dim(1) != k.dim(0)))
        throw DimensionError("multi_head_attention: mask must be [Nq x Nk]");
    const int dh = c / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int hidx = 0; hidx < heads; ++hidx) {
        Tensor qh = slice_cols(q, hidx * dh, dh);
        Tensor kh = slice_cols(k, hidx * dh, dh);
        Tensor vh = slice_cols(v, hidx * dh, dh);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        if (mask) scores = add(scores, *mask);
        Tensor attn = softmax(scores, 1);
        head_outs.push_back(matmul(attn, vh));
    }
    return heads == 1 ? head_outs[0] : concat_cols(head_outs);
}

// ---- shape manipulation ----

Tensor reshape(const Tensor& x, const Shape& shape) {
    if (shape_numel(shape) != x.size())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    return make_op(shape, x.data(), {x}, [](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < nd.value.size(); ++i) p.grad[i] += nd.grad[i];
    });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const int cols = parts[0].dim(1);
    int rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != cols)
            throw DimensionError("concat_rows: incompatible part " + shape_str(p.shape()));
        rows += p.dim(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<size_t>(rows) * cols);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_op({rows, cols}, std::move(out), parts, [](detail::Node& nd) {
        size_t off = 0;
        for (auto& pp : nd.parents) {
            auto& p = *pp;
            if (p.requires_grad) {
                p.ensure_grad();
                for (size_t i = 0; i < p.value.size(); ++i) p.grad[i] += nd.grad[off + i];
            }
            off += p.value.size();
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const int rows = parts[0].dim(0);
    int cols = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows)
            throw DimensionError("concat_cols: incompatible part " + shape_str(p.shape()));
        cols += p.dim(1);
    }
    std::vector<double> out(static_cast<size_t>(rows) * cols);
    int coff = 0;
    for (const auto& p : parts) {
        const int pc = p.dim(1);
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < pc; ++j)
                out[static_cast<size_t>(r) * cols + coff + j] = p.data()[static_cast<size_t>(r) * pc + j];
        coff += pc;
    }
    return make_op({rows, cols}, std::move(out), parts, [rows, cols](detail::Node& nd) {
        int coff2 = 0;
        for (auto& pp : nd.parents) {
            auto& p = *pp;
            const int pc = p.shape[1];
            if (p.requires_grad) {
                p.ensure_grad();
                for (int r = 0; r < rows; ++r)
                    for (int j = 0; j < pc; ++j)
                        p.grad[static_cast<size_t>(r) * pc + j] += nd.grad[static_cast<size_t>(r) * cols + coff2 + j];
            }
            coff2 += pc;
        }
    });
}

Tensor slice_rows(const Tensor& x, int start, int count) {
    if (x.rank() != 2) throw DimensionError("slice_rows: expects rank-2, got " + shape_str(x.shape()));
    if (start < 0 || count < 0 || start + count > x.dim(0))
        throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                             ") out of " + std::to_string(x.dim(0)) + " rows");
    const int cols = x.dim(1);
    std::vector<double> out(x.data().begin() + static_cast<size_t>(start) * cols,
                            x.data().begin() + static_cast<size_t>(start + count) * cols);
    return make_op({count, cols}, std::move(out), {x}, [start, cols](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const size_t off = static_cast<size_t>(start) * cols;
        for (size_t i = 0; i < nd.value.size(); ++i) p.grad[off + i] += nd.grad[i];
    });
}

Tensor slice_cols(const Tensor& x, int start, int count) {
    if (x.rank() != 2) throw DimensionError("slice_cols: expects rank-2, got " + shape_str(x.shape()));
    if (start < 0 || count < 0 || start + count > x.dim(1))
        throw DimensionError("slice_cols: range out of " + std::to_string(x.dim(1)) + " columns");
    const int rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(static_cast<size_t>(rows) * count);
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < count; ++j)
            out[static_cast<size_t>(r) * count + j] = x.data()[static_cast<size_t>(r) * cols + start + j];
    return make_op({rows, count}, std::move(out), {x}, [rows, cols, start, count](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < count; ++j)
                p.grad[static_cast<size_t>(r) * cols + start + j] += nd.grad[static_cast<size_t>(r) * count + j];
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    if (x.rank() != 2) throw DimensionError("gather_rows: expects rank-2, got " + shape_str(x.shape()));
    const int cols = x.dim(1);
    std::vector<double> out;
    out.reserve(rows.size() * static_cast<size_t>(cols));
    for (int r : rows) {
        if (r < 0 || r >= x.dim(0)) throw DimensionError("gather_rows: row " + std::to_string(r) + " out of range");
        out.insert(out.end(), x.data().begin() + static_cast<size_t>(r) * cols,
                   x.data().begin() + static_cast<size_t>(r + 1) * cols);
    }
    return make_op({static_cast<int>(rows.size()), cols}, std::move(out), {x}, [rows, cols](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < cols; ++j)
                p.grad[static_cast<size_t>(rows[i]) * cols + j] += nd.grad[i * static_cast<size_t>(cols) + j];
    });
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    return make_op({1}, {acc}, {x}, [](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < p.value.size(); ++i) p.grad[i] += nd.grad[0];
    });
}

Tensor mean_rows(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("mean_rows: expects rank-2, got " + shape_str(x.shape()));
    const int rows = x.dim(0), cols = x.dim(1);
    std::vector<double> out(static_cast<size_t>(cols), 0.0);
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < cols; ++j) out[static_cast<size_t>(j)] += x.data()[static_cast<size_t>(r) * cols + j];
    for (auto& v : out) v /= rows;
    return make_op({1, cols}, std::move(out), {x}, [rows, cols](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < cols; ++j)
                p.grad[static_cast<size_t>(r) * cols + j] += nd.grad[static_cast<size_t>(j)] / rows;
    });
}

// ---- detection-specific ----

Tensor clamp_box_unit(const Tensor& boxes) {
    if (boxes.rank() != 2 || boxes.dim(1) != 4)
        throw DimensionError("clamp_box_unit: expects [N x 4], got " + shape_str(boxes.shape()));
    const int n = boxes.dim(0);
    std::vector<double> out(boxes.size());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < 4; ++j) {
            const double lo = j < 2 ? 0.0 : kMinBoxExtent;
            const double v = boxes.data()[static_cast<size_t>(i) * 4 + j];
            out[static_cast<size_t>(i) * 4 + j] = std::min(1.0, std::max(lo, v));
        }
    return make_op(boxes.shape(), std::move(out), {boxes}, [n](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < 4; ++j) {
                const size_t idx = static_cast<size_t>(i) * 4 + j;
                if (p.value[idx] == nd.value[idx]) p.grad[idx] += nd.grad[idx];
            }
    });
}

Tensor nll_loss(const Tensor& log_probs, const std::vector<int>& targets, const std::vector<double>& class_weights) {
    if (log_probs.rank() != 2) throw DimensionError("nll_loss: expects [N x K] log-probs");
    const int n = log_probs.dim(0), k = log_probs.dim(1);
    if (static_cast<int>(targets.size()) != n)
        throw DimensionError("nll_loss: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) +
                             " rows");
    if (static_cast<int>(class_weights.size()) != k)
        throw DimensionError("nll_loss: weight count " + std::to_string(class_weights.size()) + " vs " +
                             std::to_string(k) + " classes");
    double wsum = 0.0, acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const int t = targets[static_cast<size_t>(i)];
        if (t < 0 || t >= k) throw InputError("nll_loss: target " + std::to_string(t) + " out of range");
        const double w = class_weights[static_cast<size_t>(t)];
        wsum += w;
        acc -= w * log_probs.data()[static_cast<size_t>(i) * k + t];
    }
    if (wsum <= 0.0) return Tensor::scalar(0.0);
    const double inv_wsum = 1.0 / wsum;
    return make_op({1}, {acc * inv_wsum}, {log_probs}, [targets, class_weights, k, inv_wsum](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        for (size_t i = 0; i < targets.size(); ++i) {
            const int t = targets[i];
            p.grad[i * static_cast<size_t>(k) + t] -= nd.grad[0] * class_weights[static_cast<size_t>(t)] * inv_wsum;
        }
    });
}

Tensor bce_with_logits(const Tensor& logit, double target) {
    if (logit.size() != 1) throw ContractError("bce_with_logits: expects a scalar logit");
    const double x = logit.data()[0];
    // softplus(x) - target * x, stable for both signs of x.
    const double loss = (x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x))) - target * x;
    return make_op({1}, {loss}, {logit}, [target](detail::Node& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const double x2 = p.value[0];
        const double sig = x2 >= 0.0 ? 1.0 / (1.0 + std::exp(-x2)) : std::exp(x2) / (1.0 + std::exp(x2));
        p.grad[0] += (sig - target) * nd.grad[0];
    });
}

// ---- autodiff driver ----

void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got shape tensor of size " +
                                              std::to_string(loss.size()));
    auto root = loss.node();
    if (!root->requires_grad) return;  // nothing reachable requires grad

    // Iterative post-order topological sort over requires_grad nodes.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* parent = node->parents[next].get();
            ++next;
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward && !node->grad.empty()) node->backward(*node);
    }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
    if (h <= 0.0) throw ParameterError("grad_check: h must be positive");
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor y = f(x);
    if (y.size() != 1) throw ContractError("grad_check: f must return a scalar");
    backward(y);
    std::vector<double> g_ad = x.grad();
    double worst = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double saved = x.data()[i];
        x.data()[i] = saved + h;
        const double fp = f(x).item();
        x.data()[i] = saved - h;
        const double fm = f(x).item();
        x.data()[i] = saved;
        const double g_fd = (fp - fm) / (2.0 * h);
        const double denom = std::max(1e-8, std::fabs(g_ad[i]) + std::fabs(g_fd));
        worst = std::max(worst, std::fabs(g_ad[i] - g_fd) / denom);
    }
    return worst;
}

}  // namespace hybridla
