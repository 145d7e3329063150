#include "dladiff/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace dladiff::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

MapC as_mat(const Tensor& t) { return MapC(t.data(), t.rows(), t.cols()); }
Map as_mat(Tensor& t) { return Map(t.data(), t.rows(), t.cols()); }

void require_same(const Var& a, const Var& b, const char* op) {
    if (a.value().size() != b.value().size())
        throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_hwc(const Var& a, const char* op) {
    if (a.shape().size() != 3) throw ShapeError(std::string(op) + " expects [h,w,c], got " + shape_str(a.shape()));
}

Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }

}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor(value.shape(), 0.0);
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
    if (node_->grad.size() == node_->value.size()) return node_->grad;
    return Tensor(node_->value.shape(), 0.0);
}

double Var::item() const {
    if (value().size() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
    return value()[0];
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    Var out;
    out.node_ = std::make_shared<Node>();
    out.node_->value = std::move(value);
    bool rg = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
    out.node_->requires_grad = rg;
    if (rg) {
        out.node_->parents.reserve(parents.size());
        for (auto& p : parents) out.node_->parents.push_back(p.node());
        out.node_->backward_fn = std::move(fn);
    }
    return out;
}

void backward(const Var& root) {
    if (root.value().size() != 1) throw ShapeError("backward() needs a scalar root");
    if (!root.requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
    }
}

Var add(const Var& a, const Var& b) {
    require_same(a, b, "add");
    return make_node(a.value() + b.value(), {a, b}, [](Node& n) {
        for (std::size_t i = 0; i < 2; ++i)
            if (parent(n, i).requires_grad) parent(n, i).grad_buffer() += n.grad;
    });
}

Var sub(const Var& a, const Var& b) {
    require_same(a, b, "sub");
    return make_node(a.value() - b.value(), {a, b}, [](Node& n) {
        if (parent(n, 0).requires_grad) parent(n, 0).grad_buffer() += n.grad;
        if (parent(n, 1).requires_grad) parent(n, 1).grad_buffer() -= n.grad;
    });
}

Var mul(const Var& a, const Var& b) {
    require_same(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        Node& pa = parent(n, 0);
        Node& pb = parent(n, 1);
        if (pa.requires_grad) {
            Tensor& g = pa.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            Tensor& g = pb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    return make_node(a.value() * s, {a}, [s](Node& n) {
        Tensor& g = parent(n, 0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (double& v : out.values()) v += s;
    return make_node(std::move(out), {a}, [](Node& n) { parent(n, 0).grad_buffer() += n.grad; });
}

Var add_row(const Var& a, const Var& b) {
    const int m = a.value().cols();
    if (static_cast<int>(b.value().size()) != m)
        throw ShapeError("add_row: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
    Tensor out = a.value();
    as_mat(out).rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), m);
    return make_node(std::move(out), {a, b}, [m](Node& n) {
        if (parent(n, 0).requires_grad) parent(n, 0).grad_buffer() += n.grad;
        if (parent(n, 1).requires_grad) {
            Tensor& g = parent(n, 1).grad_buffer();
            Eigen::Map<Eigen::RowVectorXd>(g.data(), m) += as_mat(n.grad).colwise().sum();
        }
    });
}

Var mul_row(const Var& a, const Var& b) {
    const int m = a.value().cols();
    if (static_cast<int>(b.value().size()) != m)
        throw ShapeError("mul_row: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    Tensor out = a.value();
    Eigen::Map<const Eigen::RowVectorXd> bv(b.value().data(), m);
    as_mat(out).array().rowwise() *= bv.array();
    return make_node(std::move(out), {a, b}, [m](Node& n) {
        Node& pa = parent(n, 0);
        Node& pb = parent(n, 1);
        if (pa.requires_grad) {
            Eigen::Map<const Eigen::RowVectorXd> bv(pb.value.data(), m);
            as_mat(pa.grad_buffer()).array() += as_mat(n.grad).array().rowwise() * bv.array();
        }
        if (pb.requires_grad) {
            Eigen::Map<Eigen::RowVectorXd>(pb.grad_buffer().data(), m) +=
                (as_mat(n.grad).array() * as_mat(pa.value).array()).colwise().sum().matrix();
        }
    });
}

Var silu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.values()) v = v / (1.0 + std::exp(-v));
    return make_node(std::move(out), {a}, [](Node& n) {
        Node& p = parent(n, 0);
        Tensor& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = p.value[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            g[i] += n.grad[i] * (s + x * s * (1.0 - s));
        }
    });
}

Var relu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return make_node(std::move(out), {a}, [](Node& n) {
        Node& p = parent(n, 0);
        Tensor& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p.value[i] > 0.0) g[i] += n.grad[i];
    });
}

Var clamp(const Var& a, double lo, double hi) {
    Tensor out = a.value();
    for (double& v : out.values()) v = std::clamp(v, lo, hi);
    return make_node(std::move(out), {a}, [lo, hi](Node& n) {
        Node& p = parent(n, 0);
        Tensor& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p.value[i] > lo && p.value[i] < hi) g[i] += n.grad[i];
    });
}

Var matmul(const Var& a, const Var& b) {
    if (b.shape().size() != 2 || a.value().cols() != b.value().rows())
        throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Shape os = a.shape();
    os.back() = b.value().cols();
    Tensor out(os);
    as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value());
    return make_node(std::move(out), {a, b}, [](Node& n) {
        Node& pa = parent(n, 0);
        Node& pb = parent(n, 1);
        if (pa.requires_grad) as_mat(pa.grad_buffer()).noalias() += as_mat(n.grad) * as_mat(pb.value).transpose();
        if (pb.requires_grad) as_mat(pb.grad_buffer()).noalias() += as_mat(pa.value).transpose() * as_mat(n.grad);
    });
}

Var linear(const Var& a, const Var& w, const Var& bias) {
    Var y = matmul(a, w);
    return bias.defined() ? add_row(y, bias) : y;
}

Var transpose(const Var& a) {
    const int r = a.value().rows(), c = a.value().cols();
    Tensor out({c, r});
    as_mat(out) = as_mat(a.value()).transpose();
    return make_node(std::move(out), {a}, [](Node& n) {
        as_mat(parent(n, 0).grad_buffer()) += as_mat(n.grad).transpose();
    });
}

Var reshape(const Var& a, Shape s) {
    Tensor out = a.value().reshaped(std::move(s));
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = parent(n, 0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

Var softmax_rows(const Var& a) {
    Tensor out = a.value();
    const int r = out.rows(), c = out.cols();
    for (int i = 0; i < r; ++i) {
        double* row = out.data() + static_cast<std::size_t>(i) * c;
        double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += (row[j] = std::exp(row[j] - mx));
        for (int j = 0; j < c; ++j) row[j] /= s;
    }
    return make_node(std::move(out), {a}, [r, c](Node& n) {
        Tensor& g = parent(n, 0).grad_buffer();
        for (int i = 0; i < r; ++i) {
            const double* y = n.value.data() + static_cast<std::size_t>(i) * c;
            const double* gy = n.grad.data() + static_cast<std::size_t>(i) * c;
            double d = 0.0;
            for (int j = 0; j < c; ++j) d += y[j] * gy[j];
            for (int j = 0; j < c; ++j) g.data()[static_cast<std::size_t>(i) * c + j] += y[j] * (gy[j] - d);
        }
    });
}

Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps) {
    const int r = a.value().rows(), c = a.value().cols();
    if (static_cast<int>(gamma.value().size()) != c || static_cast<int>(beta.value().size()) != c)
        throw ShapeError("layer_norm: affine params must match " + std::to_string(c) + " channels");
    Tensor xhat(a.shape());
    std::vector<double> inv_std(r);
    for (int i = 0; i < r; ++i) {
        const double* x = a.value().data() + static_cast<std::size_t>(i) * c;
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += x[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
        var /= c;
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < c; ++j) xhat.data()[static_cast<std::size_t>(i) * c + j] = (x[j] - mu) * inv_std[i];
    }
    Tensor out = xhat;
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(i, j) = out.at(i, j) * gamma.value()[j] + beta.value()[j];
    return make_node(std::move(out), {a, gamma, beta},
                     [r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                         Node& px = parent(n, 0);
                         Node& pg = parent(n, 1);
                         Node& pb = parent(n, 2);
                         if (pg.requires_grad || pb.requires_grad) {
                             Tensor& gg = pg.grad_buffer();
                             Tensor& gb = pb.grad_buffer();
                             for (int i = 0; i < r; ++i)
                                 for (int j = 0; j < c; ++j) {
                                     gg[j] += n.grad.at(i, j) * xhat.at(i, j);
                                     gb[j] += n.grad.at(i, j);
                                 }
                         }
                         if (px.requires_grad) {
                             Tensor& gx = px.grad_buffer();
                             std::vector<double> dxh(c);
                             for (int i = 0; i < r; ++i) {
                                 double m1 = 0.0, m2 = 0.0;
                                 for (int j = 0; j < c; ++j) {
                                     dxh[j] = n.grad.at(i, j) * pg.value[j];
                                     m1 += dxh[j];
                                     m2 += dxh[j] * xhat.at(i, j);
                                 }
                                 m1 /= c;
                                 m2 /= c;
                                 for (int j = 0; j < c; ++j)
                                     gx.at(i, j) += inv_std[i] * (dxh[j] - m1 - xhat.at(i, j) * m2);
                             }
                         }
                     });
}

Var im2col3x3(const Var& a) {
    require_hwc(a, "im2col3x3");
    const int h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
    Tensor out({h * w, 9 * c});
    const double* x = a.value().data();
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double* row = out.data() + static_cast<std::size_t>(i * w + j) * 9 * c;
            for (int ky = 0; ky < 3; ++ky) {
                int yy = i + ky - 1;
                for (int kx = 0; kx < 3; ++kx) {
                    int xx = j + kx - 1;
                    double* dst = row + (ky * 3 + kx) * c;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    std::copy_n(x + static_cast<std::size_t>(yy * w + xx) * c, c, dst);
                }
            }
        }
    return make_node(std::move(out), {a}, [h, w, c](Node& n) {
        Tensor& g = parent(n, 0).grad_buffer();
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double* row = n.grad.data() + static_cast<std::size_t>(i * w + j) * 9 * c;
                for (int ky = 0; ky < 3; ++ky) {
                    int yy = i + ky - 1;
                    if (yy < 0 || yy >= h) continue;
                    for (int kx = 0; kx < 3; ++kx) {
                        int xx = j + kx - 1;
                        if (xx < 0 || xx >= w) continue;
                        double* dst = g.data() + static_cast<std::size_t>(yy * w + xx) * c;
                        const double* src = row + (ky * 3 + kx) * c;
                        for (int k = 0; k < c; ++k) dst[k] += src[k];
                    }
                }
            }
    });
}

Var conv3x3(const Var& a, const Var& w, const Var& bias) {
    require_hwc(a, "conv3x3");
    const int h = a.shape()[0], wd = a.shape()[1];
    Var y = linear(im2col3x3(a), w, bias);
    return reshape(y, {h, wd, y.value().cols()});
}

Var space_to_depth(const Var& a, int b) {
    require_hwc(a, "space_to_depth");
    const int h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
    if (h % b || w % b) throw ShapeError("space_to_depth: " + shape_str(a.shape()) + " not divisible by block");
    const int oh = h / b, ow = w / b, oc = c * b * b;
    Tensor out({oh, ow, oc});
    auto index = [=](int i, int j, int dy, int dx, int k) {
        return std::pair<std::size_t, std::size_t>{
            static_cast<std::size_t>(((i * b + dy) * w + (j * b + dx)) * c + k),
            static_cast<std::size_t>((i * ow + j) * oc + (dy * b + dx) * c + k)};
    };
    for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j)
            for (int dy = 0; dy < b; ++dy)
                for (int dx = 0; dx < b; ++dx)
                    for (int k = 0; k < c; ++k) {
                        auto [s, d] = index(i, j, dy, dx, k);
                        out[d] = a.value()[s];
                    }
    return make_node(std::move(out), {a}, [=](Node& n) {
        Tensor& g = parent(n, 0).grad_buffer();
        for (int i = 0; i < oh; ++i)
            for (int j = 0; j < ow; ++j)
                for (int dy = 0; dy < b; ++dy)
                    for (int dx = 0; dx < b; ++dx)
                        for (int k = 0; k < c; ++k) {
                            auto [s, d] = index(i, j, dy, dx, k);
                            g[s] += n.grad[d];
                        }
    });
}

Var depth_to_space(const Var& a, int b) {
    require_hwc(a, "depth_to_space");
    const int h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
    if (c % (b * b)) throw ShapeError("depth_to_space: channels not divisible by block^2");
    const int oc = c / (b * b), oh = h * b, ow = w * b;
    Tensor out({oh, ow, oc});
    auto index = [=](int i, int j, int dy, int dx, int k) {
        return std::pair<std::size_t, std::size_t>{
            static_cast<std::size_t>((i * w + j) * c + (dy * b + dx) * oc + k),
            static_cast<std::size_t>(((i * b + dy) * ow + (j * b + dx)) * oc + k)};
    };
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            for (int dy = 0; dy < b; ++dy)
                for (int dx = 0; dx < b; ++dx)
                    for (int k = 0; k < oc; ++k) {
                        auto [s, d] = index(i, j, dy, dx, k);
                        out[d] = a.value()[s];
                    }
    return make_node(std::move(out), {a}, [=](Node& n) {
        Tensor& g = parent(n, 0).grad_buffer();
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int dy = 0; dy < b; ++dy)
                    for (int dx = 0; dx < b; ++dx)
                        for (int k = 0; k < oc; ++k) {
                            auto [s, d] = index(i, j, dy, dx, k);
                            g[s] += n.grad[d];
                        }
    });
}

Var avg_pool(const Var& a, int k) {
    require_hwc(a, "avg_pool");
    const int h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
    if (h % k || w % k) throw ShapeError("avg_pool: " + shape_str(a.shape()) + " not divisible by " + std::to_string(k));
    const int oh = h / k, ow = w / k;
    const double inv = 1.0 / (k * k);
    Tensor out({oh, ow, c});
    const double* x = a.value().data();
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double* dst = out.data() + static_cast<std::size_t>((i / k) * ow + j / k) * c;
            const double* src = x + static_cast<std::size_t>(i * w + j) * c;
            for (int q = 0; q < c; ++q) dst[q] += inv * src[q];
        }
    return make_node(std::move(out), {a}, [=](Node& n) {
        Tensor& g = parent(n, 0).grad_buffer();
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double* src = n.grad.data() + static_cast<std::size_t>((i / k) * ow + j / k) * c;
                double* dst = g.data() + static_cast<std::size_t>(i * w + j) * c;
                for (int q = 0; q < c; ++q) dst[q] += inv * src[q];
            }
    });
}

Var concat_cols(const Var& a, const Var& b) {
    const int r = a.value().rows();
    if (b.value().rows() != r) throw ShapeError("concat_cols: " + shape_str(a.shape()) + " , " + shape_str(b.shape()));
    const int ca = a.value().cols(), cb = b.value().cols();
    Shape os = a.shape();
    os.back() = ca + cb;
    Tensor out(os);
    for (int i = 0; i < r; ++i) {
        std::copy_n(a.value().data() + static_cast<std::size_t>(i) * ca, ca, out.data() + static_cast<std::size_t>(i) * (ca + cb));
        std::copy_n(b.value().data() + static_cast<std::size_t>(i) * cb, cb,
                    out.data() + static_cast<std::size_t>(i) * (ca + cb) + ca);
    }
    return make_node(std::move(out), {a, b}, [=](Node& n) {
        Node& pa = parent(n, 0);
        Node& pb = parent(n, 1);
        for (int i = 0; i < r; ++i) {
            const double* g = n.grad.data() + static_cast<std::size_t>(i) * (ca + cb);
            if (pa.requires_grad)
                for (int j = 0; j < ca; ++j) pa.grad_buffer().data()[static_cast<std::size_t>(i) * ca + j] += g[j];
            if (pb.requires_grad)
                for (int j = 0; j < cb; ++j) pb.grad_buffer().data()[static_cast<std::size_t>(i) * cb + j] += g[ca + j];
        }
    });
}

Var select_col(const Var& a, int j) {
    const int r = a.value().rows(), c = a.value().cols();
    if (j < 0 || j >= c) throw ShapeError("select_col: column " + std::to_string(j) + " out of " + std::to_string(c));
    Tensor out({r, 1});
    for (int i = 0; i < r; ++i) out[i] = a.value().at(i, j);
    return make_node(std::move(out), {a}, [=](Node& n) {
        Tensor& g = parent(n, 0).grad_buffer();
        for (int i = 0; i < r; ++i) g.at(i, j) += n.grad[i];
    });
}

Var mean_rows(const Var& a) {
    const int r = a.value().rows(), c = a.value().cols();
    Tensor out({1, c});
    Eigen::Map<Eigen::RowVectorXd>(out.data(), c) = as_mat(a.value()).colwise().mean();
    return make_node(std::move(out), {a}, [=](Node& n) {
        Eigen::Map<const Eigen::RowVectorXd> gv(n.grad.data(), c);
        as_mat(parent(n, 0).grad_buffer()).rowwise() += gv / static_cast<double>(r);
    });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return make_node(Tensor({1}, {s}), {a}, [](Node& n) {
        for (double& g : parent(n, 0).grad_buffer().values()) g += n.grad[0];
    });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_sq(const Var& a) {
    return make_node(Tensor({1}, {dladiff::sum_sq(a.value())}), {a}, [](Node& n) {
        Node& p = parent(n, 0);
        Tensor& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * p.value[i] * n.grad[0];
    });
}

Var l2_normalize(const Var& a, double eps) {
    const double norm = std::sqrt(dladiff::sum_sq(a.value())) + eps;
    Tensor out = a.value() * (1.0 / norm);
    return make_node(std::move(out), {a}, [norm](Node& n) {
        // d(x/|x|) = (g - y <y,g>) / |x|
        double yg = dladiff::dot(n.value, n.grad);
        Tensor& g = parent(n, 0).grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (n.grad[i] - n.value[i] * yg) / norm;
    });
}

Var cosine(const Var& a, const Var& b, double eps) {
    require_same(a, b, "cosine");
    const double na = std::sqrt(dladiff::sum_sq(a.value())) + eps;
    const double nb = std::sqrt(dladiff::sum_sq(b.value())) + eps;
    const double ab = dladiff::dot(a.value(), b.value());
    const double c = ab / (na * nb);
    return make_node(Tensor({1}, {c}), {a, b}, [na, nb, c](Node& n) {
        Node& pa = parent(n, 0);
        Node& pb = parent(n, 1);
        const double g = n.grad[0];
        if (pa.requires_grad) {
            Tensor& ga = pa.grad_buffer();
            for (std::size_t i = 0; i < ga.size(); ++i)
                ga[i] += g * (pb.value[i] / (na * nb) - c * pa.value[i] / (na * na));
        }
        if (pb.requires_grad) {
            Tensor& gb = pb.grad_buffer();
            for (std::size_t i = 0; i < gb.size(); ++i)
                gb[i] += g * (pa.value[i] / (na * nb) - c * pb.value[i] / (nb * nb));
        }
    });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const int r = logits.value().rows(), c = logits.value().cols();
    if (static_cast<int>(labels.size()) != r) throw ShapeError("cross_entropy: label count mismatch");
    Tensor prob = logits.value();
    double loss = 0.0;
    for (int i = 0; i < r; ++i) {
        if (labels[i] < 0 || labels[i] >= c) throw ShapeError("cross_entropy: label out of range");
        double* row = prob.data() + static_cast<std::size_t>(i) * c;
        double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += (row[j] = std::exp(row[j] - mx));
        for (int j = 0; j < c; ++j) row[j] /= s;
        loss -= std::log(std::max(row[labels[i]], 1e-300));
    }
    loss /= r;
    return make_node(Tensor({1}, {loss}), {logits}, [r, c, labels, prob = std::move(prob)](Node& n) {
        Tensor& g = parent(n, 0).grad_buffer();
        const double s = n.grad[0] / r;
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g.at(i, j) += s * (prob.at(i, j) - (j == labels[i] ? 1.0 : 0.0));
    });
}

std::vector<WarpTap> bilinear_taps(const AffineSampler& A, int h, int w, int out_h, int out_w) {
    std::vector<WarpTap> taps;
    taps.reserve(static_cast<std::size_t>(out_h) * out_w * 4);
    for (int i = 0; i < out_h; ++i)
        for (int j = 0; j < out_w; ++j) {
            const double u = j + 0.5, v = i + 0.5;
            const double sx = A.m[0][0] * u + A.m[0][1] * v + A.m[0][2] - 0.5;
            const double sy = A.m[1][0] * u + A.m[1][1] * v + A.m[1][2] - 0.5;
            const double fx = std::floor(sx), fy = std::floor(sy);
            const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
            const double ax = sx - fx, ay = sy - fy;
            const int o = i * out_w + j;
            const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
            const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
            const double ws[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
            for (int q = 0; q < 4; ++q) {
                if (xs[q] < 0 || xs[q] >= w || ys[q] < 0 || ys[q] >= h || ws[q] == 0.0) continue;
                taps.push_back({o, ys[q] * w + xs[q], ws[q]});
            }
        }
    return taps;
}

Var warp_bilinear(const Var& img, const AffineSampler& A, int out_h, int out_w) {
    require_hwc(img, "warp_bilinear");
    const int h = img.shape()[0], w = img.shape()[1], c = img.shape()[2];
    std::vector<WarpTap> taps = bilinear_taps(A, h, w, out_h, out_w);
    Tensor out({out_h, out_w, c});
    const double* x = img.value().data();
    for (const WarpTap& t : taps) {
        double* dst = out.data() + static_cast<std::size_t>(t.out) * c;
        const double* src = x + static_cast<std::size_t>(t.src) * c;
        for (int k = 0; k < c; ++k) dst[k] += t.wt * src[k];
    }
    return make_node(std::move(out), {img}, [c, taps = std::move(taps)](Node& n) {
        Tensor& g = parent(n, 0).grad_buffer();
        for (const WarpTap& t : taps) {
            double* dst = g.data() + static_cast<std::size_t>(t.src) * c;
            const double* src = n.grad.data() + static_cast<std::size_t>(t.out) * c;
            for (int k = 0; k < c; ++k) dst[k] += t.wt * src[k];
        }
    });
}

}  // namespace dladiff::ag
