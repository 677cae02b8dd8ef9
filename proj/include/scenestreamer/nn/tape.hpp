#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scenestreamer/random.hpp"
#include "scenestreamer/sequence.hpp"

namespace scenestreamer::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Parameter {
    std::string name;
    Mat<T> value;
    Mat<T> grad;
    Mat<T> m;  // first moment
    Mat<T> v;  // second moment

    Parameter() = default;
    Parameter(std::string n, Mat<T> init) : name(std::move(n)), value(std::move(init)) { reset_state(); }

    void reset_state() {
        grad = Mat<T>::Zero(value.rows(), value.cols());
        m = Mat<T>::Zero(value.rows(), value.cols());
        v = Mat<T>::Zero(value.rows(), value.cols());
    }
    void zero_grad() { grad.setZero(); }
    Eigen::Index size() const { return value.size(); }
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Per-head statistics of a cross-entropy term.
struct CeStats {
    double loss = 0.0;
    int count = 0;
    int correct = 0;
};

/// Sparse relative attention settings. The pattern's keys index rows of K/V;
/// its pair entries index rows of the relation hidden matrix.
struct AttentionArgs {
    const AttentionPattern* pattern = nullptr;
    int heads = 1;
};

/// Reverse-mode tape over row-major matrices. Values are computed eagerly;
/// `backward` replays the recorded closures in reverse order.
template <typename T>
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }
    std::size_t size() const { return nodes_.size(); }

    const Mat<T>& value(Var v) const {
        const Node& n = nodes_[static_cast<std::size_t>(v.id)];
        return n.external ? *n.external : n.value;
    }
    T scalar(Var v) const { return value(v)(0, 0); }
    const Mat<T>& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

    Var constant(Mat<T> m) { return push(std::move(m), false); }

    /// Keeps `obj` alive for the lifetime of the tape (e.g. patterns that
    /// backward closures refer to).
    template <typename U>
    const U& hold(U obj) {
        auto p = std::make_shared<U>(std::move(obj));
        held_.push_back(p);
        return *p;
    }

    /// Borrows an external matrix without copying; never receives gradient.
    Var view(const Mat<T>& m) {
        Node n;
        n.external = &m;
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1};
    }

    /// Borrows a parameter; gradient is accumulated into `p.grad` on backward.
    Var param(Parameter<T>& p) {
        Node n;
        n.external = &p.value;
        n.param = &p;
        n.requires_grad = grad_enabled_;
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1};
    }

    void backward(Var loss) {
        if (!grad_enabled_) throw std::logic_error("backward on a no-grad tape");
        if (value(loss).size() != 1) throw std::logic_error("backward needs a scalar");
        acc(loss, Mat<T>::Ones(1, 1));
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.size() == 0) continue;
            if (n.backward) n.backward();
            if (n.param) n.param->grad += n.grad;
        }
    }

    // -- elementwise and linear algebra ------------------------------------

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Var out = push(value(a) + value(b), needs(a) || needs(b));
        record(out, [this, a, b, out] {
            if (needs(a)) acc(a, g(out));
            if (needs(b)) acc(b, g(out));
        });
        return out;
    }

    Var sum(const std::vector<Var>& xs) {
        Var out = xs.at(0);
        for (std::size_t i = 1; i < xs.size(); ++i) out = add(out, xs[i]);
        return out;
    }

    /// a (n x m) + row (1 x m) broadcast over rows.
    Var add_row(Var a, Var row) {
        Mat<T> y = value(a);
        y.rowwise() += value(row).row(0);
        Var out = push(std::move(y), needs(a) || needs(row));
        record(out, [this, a, row, out] {
            if (needs(a)) acc(a, g(out));
            if (needs(row)) acc(row, g(out).colwise().sum());
        });
        return out;
    }

    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        Var out = push(value(a).cwiseProduct(value(b)), needs(a) || needs(b));
        record(out, [this, a, b, out] {
            if (needs(a)) acc(a, g(out).cwiseProduct(value(b)));
            if (needs(b)) acc(b, g(out).cwiseProduct(value(a)));
        });
        return out;
    }

    Var scale(Var a, T s) {
        Var out = push(value(a) * s, needs(a));
        record(out, [this, a, s, out] { acc(a, g(out) * s); });
        return out;
    }

    Var matmul(Var a, Var b) {
        Var out = push(value(a) * value(b), needs(a) || needs(b));
        record(out, [this, a, b, out] {
            if (needs(a)) acc(a, g(out) * value(b).transpose());
            if (needs(b)) acc(b, value(a).transpose() * g(out));
        });
        return out;
    }

    /// a * b^T
    Var matmul_nt(Var a, Var b) {
        Var out = push(value(a) * value(b).transpose(), needs(a) || needs(b));
        record(out, [this, a, b, out] {
            if (needs(a)) acc(a, g(out) * value(b));
            if (needs(b)) acc(b, g(out).transpose() * value(a));
        });
        return out;
    }

    /// x W + b with W (in x out) and b (1 x out) optional.
    Var linear(Var x, Var w, Var b = {}) {
        Mat<T> y = value(x) * value(w);
        if (b.valid()) y.rowwise() += value(b).row(0);
        Var out = push(std::move(y), needs(x) || needs(w) || (b.valid() && needs(b)));
        record(out, [this, x, w, b, out] {
            const Mat<T>& go = g(out);
            if (needs(x)) acc(x, go * value(w).transpose());
            if (needs(w)) acc(w, value(x).transpose() * go);
            if (b.valid() && needs(b)) acc(b, go.colwise().sum());
        });
        return out;
    }

    Var relu(Var a) {
        Var out = push(value(a).cwiseMax(T(0)), needs(a));
        record(out, [this, a, out] {
            acc(a, (value(a).array() > T(0)).select(g(out), Mat<T>::Zero(g(out).rows(), g(out).cols())));
        });
        return out;
    }

    /// tanh approximation of GELU.
    Var gelu(Var a) {
        const auto& x = value(a);
        const T c = static_cast<T>(0.7978845608028654);
        const T k = static_cast<T>(0.044715);
        Mat<T> th = (c * (x.array() + k * x.array().cube())).tanh().matrix();
        Mat<T> y = (T(0.5) * x.array() * (T(1) + th.array())).matrix();
        Var out = push(std::move(y), needs(a));
        if (needs(a)) {
            auto keep = std::make_shared<Mat<T>>(std::move(th));
            record(out, [this, a, out, keep, c, k] {
                const auto& x = value(a).array();
                const auto& t = keep->array();
                auto dy = T(0.5) * (T(1) + t) +
                          T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
                acc(a, (g(out).array() * dy).matrix());
            });
        }
        return out;
    }

    /// Row-wise normalization; gamma/beta (1 x d) optional.
    Var layer_norm(Var x, Var gamma = {}, Var beta = {}, T eps = T(1e-5)) {
        const auto& xv = value(x);
        const Eigen::Index n = xv.rows(), d = xv.cols();
        Mat<T> xhat(n, d);
        Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const T mu = xv.row(i).mean();
            const T var = (xv.row(i).array() - mu).square().mean();
            rstd(i) = T(1) / std::sqrt(var + eps);
            xhat.row(i) = (xv.row(i).array() - mu) * rstd(i);
        }
        Mat<T> y = xhat;
        if (gamma.valid()) y.array().rowwise() *= value(gamma).row(0).array();
        if (beta.valid()) y.rowwise() += value(beta).row(0);
        const bool rg = needs(x) || (gamma.valid() && needs(gamma)) || (beta.valid() && needs(beta));
        Var out = push(std::move(y), rg);
        if (rg) {
            auto keep = std::make_shared<std::pair<Mat<T>, Eigen::Matrix<T, Eigen::Dynamic, 1>>>(std::move(xhat), std::move(rstd));
            record(out, [this, x, gamma, beta, out, keep] {
                const Mat<T>& go = g(out);
                const Mat<T>& xh = keep->first;
                if (gamma.valid() && needs(gamma)) acc(gamma, go.cwiseProduct(xh).colwise().sum());
                if (beta.valid() && needs(beta)) acc(beta, go.colwise().sum());
                if (!needs(x)) return;
                Mat<T> gx = go;
                if (gamma.valid()) gx.array().rowwise() *= value(gamma).row(0).array();
                const T inv_d = T(1) / static_cast<T>(gx.cols());
                Mat<T> dx(gx.rows(), gx.cols());
                for (Eigen::Index i = 0; i < gx.rows(); ++i) {
                    const T m1 = gx.row(i).mean();
                    const T m2 = gx.row(i).dot(xh.row(i)) * inv_d;
                    dx.row(i) = keep->second(i) * (gx.row(i).array() - m1 - xh.row(i).array() * m2);
                }
                acc(x, dx);
            });
        }
        return out;
    }

    /// x * (1 + scale) + shift, all the same shape.
    Var modulate(Var x, Var scale_v, Var shift) {
        const auto& xv = value(x);
        Mat<T> y = (xv.array() * (T(1) + value(scale_v).array()) + value(shift).array()).matrix();
        Var out = push(std::move(y), needs(x) || needs(scale_v) || needs(shift));
        record(out, [this, x, scale_v, shift, out] {
            const Mat<T>& go = g(out);
            if (needs(x)) acc(x, (go.array() * (T(1) + value(scale_v).array())).matrix());
            if (needs(scale_v)) acc(scale_v, go.cwiseProduct(value(x)));
            if (needs(shift)) acc(shift, go);
        });
        return out;
    }

    // -- indexing -----------------------------------------------------------

    /// Rows of `table` at `idx`.
    Var embedding(Var table, std::vector<int> idx) { return gather_rows(table, std::move(idx)); }

    Var gather_rows(Var x, std::vector<int> idx) {
        const auto& xv = value(x);
        Mat<T> y(static_cast<Eigen::Index>(idx.size()), xv.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] < 0 || idx[i] >= xv.rows()) throw std::out_of_range("gather_rows index");
            y.row(static_cast<Eigen::Index>(i)) = xv.row(idx[i]);
        }
        Var out = push(std::move(y), needs(x));
        if (needs(x)) {
            auto keep = std::make_shared<std::vector<int>>(std::move(idx));
            record(out, [this, x, out, keep] {
                Mat<T> gx = Mat<T>::Zero(value(x).rows(), value(x).cols());
                const Mat<T>& go = g(out);
                for (std::size_t i = 0; i < keep->size(); ++i) gx.row((*keep)[i]) += go.row(static_cast<Eigen::Index>(i));
                acc(x, gx);
            });
        }
        return out;
    }

    /// out (n x d) zero except out[rows[i]] += x[i].
    Var scatter_rows(Var x, std::vector<int> rows, Eigen::Index n) {
        const auto& xv = value(x);
        Mat<T> y = Mat<T>::Zero(n, xv.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) y.row(rows[i]) += xv.row(static_cast<Eigen::Index>(i));
        Var out = push(std::move(y), needs(x));
        if (needs(x)) {
            auto keep = std::make_shared<std::vector<int>>(std::move(rows));
            record(out, [this, x, out, keep] {
                const Mat<T>& go = g(out);
                Mat<T> gx(static_cast<Eigen::Index>(keep->size()), go.cols());
                for (std::size_t i = 0; i < keep->size(); ++i) gx.row(static_cast<Eigen::Index>(i)) = go.row((*keep)[i]);
                acc(x, gx);
            });
        }
        return out;
    }

    Var concat_rows(const std::vector<Var>& xs) {
        Eigen::Index n = 0, d = value(xs.at(0)).cols();
        bool rg = false;
        for (Var v : xs) {
            n += value(v).rows();
            rg = rg || needs(v);
        }
        Mat<T> y(n, d);
        Eigen::Index r = 0;
        for (Var v : xs) {
            y.middleRows(r, value(v).rows()) = value(v);
            r += value(v).rows();
        }
        Var out = push(std::move(y), rg);
        record(out, [this, xs, out] {
            Eigen::Index r = 0;
            for (Var v : xs) {
                const Eigen::Index k = value(v).rows();
                if (needs(v)) acc(v, g(out).middleRows(r, k));
                r += k;
            }
        });
        return out;
    }

    /// Row r of the output is columns [block[r]*width, (block[r]+1)*width) of x.
    Var block_select(Var x, std::vector<int> block, Eigen::Index width) {
        const auto& xv = value(x);
        Mat<T> y(xv.rows(), width);
        for (Eigen::Index r = 0; r < xv.rows(); ++r) y.row(r) = xv.row(r).segment(block[static_cast<std::size_t>(r)] * width, width);
        Var out = push(std::move(y), needs(x));
        if (needs(x)) {
            auto keep = std::make_shared<std::vector<int>>(std::move(block));
            record(out, [this, x, out, keep, width] {
                Mat<T> gx = Mat<T>::Zero(value(x).rows(), value(x).cols());
                for (Eigen::Index r = 0; r < gx.rows(); ++r)
                    gx.row(r).segment((*keep)[static_cast<std::size_t>(r)] * width, width) = g(out).row(r);
                acc(x, gx);
            });
        }
        return out;
    }

    /// Max over each group of `group` consecutive rows, ignoring rows whose
    /// `valid` flag is 0. Groups without valid rows produce zeros.
    Var masked_max_pool(Var x, std::vector<std::uint8_t> valid, Eigen::Index group) {
        const auto& xv = value(x);
        const Eigen::Index groups = xv.rows() / group;
        Mat<T> y = Mat<T>::Zero(groups, xv.cols());
        auto arg = std::make_shared<std::vector<int>>(static_cast<std::size_t>(groups * xv.cols()), -1);
        for (Eigen::Index gi = 0; gi < groups; ++gi) {
            for (Eigen::Index c = 0; c < xv.cols(); ++c) {
                int best = -1;
                for (Eigen::Index r = gi * group; r < (gi + 1) * group; ++r) {
                    if (!valid[static_cast<std::size_t>(r)]) continue;
                    if (best < 0 || xv(r, c) > xv(best, c)) best = static_cast<int>(r);
                }
                (*arg)[static_cast<std::size_t>(gi * xv.cols() + c)] = best;
                if (best >= 0) y(gi, c) = xv(best, c);
            }
        }
        Var out = push(std::move(y), needs(x));
        record(out, [this, x, out, arg] {
            const Mat<T>& go = g(out);
            Mat<T> gx = Mat<T>::Zero(value(x).rows(), value(x).cols());
            for (Eigen::Index gi = 0; gi < go.rows(); ++gi)
                for (Eigen::Index c = 0; c < go.cols(); ++c) {
                    const int r = (*arg)[static_cast<std::size_t>(gi * go.cols() + c)];
                    if (r >= 0) gx(r, c) += go(gi, c);
                }
            acc(x, gx);
        });
        return out;
    }

    Var dropout(Var x, double p, Rng& rng) {
        if (p <= 0.0 || !grad_enabled_) return x;
        const auto& xv = value(x);
        auto mask = std::make_shared<Mat<T>>(xv.rows(), xv.cols());
        const T keep = static_cast<T>(1.0 / (1.0 - p));
        for (Eigen::Index i = 0; i < mask->size(); ++i) mask->data()[i] = rng.uniform() < p ? T(0) : keep;
        Var out = push(xv.cwiseProduct(*mask), needs(x));
        record(out, [this, x, out, mask] { acc(x, g(out).cwiseProduct(*mask)); });
        return out;
    }

    // -- losses -------------------------------------------------------------

    /// Summed cross-entropy of rows of `logits` against `targets` (1 x 1).
    Var cross_entropy(Var logits, const std::vector<int>& targets, CeStats* stats = nullptr) {
        const auto& z = value(logits);
        Mat<T> p(z.rows(), z.cols());
        double loss = 0.0;
        int correct = 0;
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            const T mx = z.row(i).maxCoeff();
            p.row(i) = (z.row(i).array() - mx).exp();
            const T s = p.row(i).sum();
            p.row(i) /= s;
            const int t = targets[static_cast<std::size_t>(i)];
            loss += static_cast<double>(mx + std::log(s) - z(i, t));
            Eigen::Index am;
            z.row(i).maxCoeff(&am);
            if (am == t) ++correct;
        }
        if (stats) {
            stats->loss += loss;
            stats->count += static_cast<int>(z.rows());
            stats->correct += correct;
        }
        Mat<T> out_v(1, 1);
        out_v(0, 0) = static_cast<T>(loss);
        Var out = push(std::move(out_v), needs(logits));
        if (needs(logits)) {
            auto keep = std::make_shared<Mat<T>>(std::move(p));
            record(out, [this, logits, out, keep, targets] {
                Mat<T> gz = *keep;
                for (std::size_t i = 0; i < targets.size(); ++i) gz(static_cast<Eigen::Index>(i), targets[i]) -= T(1);
                acc(logits, gz * g(out)(0, 0));
            });
        }
        return out;
    }

    // -- attention ----------------------------------------------------------

    /// Sparse multi-head attention with a relative bias. For query row i and
    /// entry e (key j, pair p), head h:
    ///   s = (q_i.k_j + [p >= 0] (qr_i . (H_p W2 + b2))) / sqrt(d_h)
    /// The relation term is evaluated through the factorization
    ///   qr.(H_p W2 + b2) = H_p . (W2 qr) + b2 . qr
    /// so its cost per entry is the relation width, not d.
    /// `rel_h`, `w2`, `b2` may be invalid when the pattern has no pairs; `b2`
    /// is optional on its own.
    Var relative_attention(Var q, Var k, Var v, Var qr, Var rel_h, Var w2, Var b2, const AttentionArgs& args) {
        const AttentionPattern& pat = *args.pattern;
        const auto& Q = value(q);
        const auto& K = value(k);
        const auto& V = value(v);
        const Eigen::Index n = Q.rows(), d = Q.cols();
        const int heads = args.heads;
        const Eigen::Index dh = d / heads;
        const T sc = T(1) / std::sqrt(static_cast<T>(dh));
        if (pat.rows() != n) throw std::logic_error("attention pattern rows != queries");
        const bool rel = rel_h.valid() && !pat.deltas.empty();

        auto st = std::make_shared<AttnState>();
        st->a.resize(pat.keys.size() * static_cast<std::size_t>(heads));
        if (rel) {
            const auto& Qr = value(qr);
            const auto& W2 = value(w2);
            st->gmat.resize(static_cast<std::size_t>(heads));
            st->cvec.assign(static_cast<std::size_t>(heads), Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(n));
            for (int h = 0; h < heads; ++h) {
                st->gmat[static_cast<std::size_t>(h)] = Qr.middleCols(h * dh, dh) * W2.middleCols(h * dh, dh).transpose();
                if (b2.valid())
                    st->cvec[static_cast<std::size_t>(h)] = Qr.middleCols(h * dh, dh) * value(b2).row(0).segment(h * dh, dh).transpose();
            }
        }
        const Mat<T>* H = rel ? &value(rel_h) : nullptr;

        Mat<T> out = Mat<T>::Zero(n, d);
        std::vector<T> s;
        for (Eigen::Index i = 0; i < n; ++i) {
            const int b = pat.row_begin[static_cast<std::size_t>(i)];
            const int e_end = pat.row_begin[static_cast<std::size_t>(i) + 1];
            if (e_end == b) continue;
            s.resize(static_cast<std::size_t>(e_end - b));
            for (int h = 0; h < heads; ++h) {
                const auto qh = Q.row(i).segment(h * dh, dh);
                T mx = -std::numeric_limits<T>::infinity();
                for (int e = b; e < e_end; ++e) {
                    const int key = pat.keys[static_cast<std::size_t>(e)];
                    T val = qh.dot(K.row(key).segment(h * dh, dh));
                    const int p = pat.pair[static_cast<std::size_t>(e)];
                    if (rel && p >= 0)
                        val += st->gmat[static_cast<std::size_t>(h)].row(i).dot(H->row(p)) + st->cvec[static_cast<std::size_t>(h)](i);
                    val *= sc;
                    s[static_cast<std::size_t>(e - b)] = val;
                    mx = std::max(mx, val);
                }
                T z = 0;
                for (auto& x : s) {
                    x = std::exp(x - mx);
                    z += x;
                }
                auto oh = out.row(i).segment(h * dh, dh);
                for (int e = b; e < e_end; ++e) {
                    const T a = s[static_cast<std::size_t>(e - b)] / z;
                    st->a[static_cast<std::size_t>(e) * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] = a;
                    oh += a * V.row(pat.keys[static_cast<std::size_t>(e)]).segment(h * dh, dh);
                }
            }
        }
        const bool rg = needs(q) || needs(k) || needs(v) || (rel && (needs(qr) || needs(rel_h) || needs(w2) || (b2.valid() && needs(b2))));
        Var o = push(std::move(out), rg);
        if (!rg) return o;
        record(o, [this, q, k, v, qr, rel_h, w2, b2, o, st, &pat, heads, dh, sc, rel] {
            const auto& Q = value(q);
            const auto& K = value(k);
            const auto& V = value(v);
            const Mat<T>& go = g(o);
            const Eigen::Index n = Q.rows(), d = Q.cols();
            Mat<T> gq = Mat<T>::Zero(n, d);
            Mat<T> gk = Mat<T>::Zero(K.rows(), d);
            Mat<T> gv = Mat<T>::Zero(V.rows(), d);
            const Mat<T>* H = rel ? &value(rel_h) : nullptr;
            Mat<T> gH;
            std::vector<Mat<T>> gG;
            std::vector<Eigen::Matrix<T, Eigen::Dynamic, 1>> gc;
            if (rel) {
                gH = Mat<T>::Zero(H->rows(), H->cols());
                gG.assign(static_cast<std::size_t>(heads), Mat<T>::Zero(n, H->cols()));
                gc.assign(static_cast<std::size_t>(heads), Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(n));
            }
            std::vector<T> da;
            for (Eigen::Index i = 0; i < n; ++i) {
                const int b = pat.row_begin[static_cast<std::size_t>(i)];
                const int e_end = pat.row_begin[static_cast<std::size_t>(i) + 1];
                if (e_end == b) continue;
                da.resize(static_cast<std::size_t>(e_end - b));
                for (int h = 0; h < heads; ++h) {
                    const auto goh = go.row(i).segment(h * dh, dh);
                    T dot = 0;
                    for (int e = b; e < e_end; ++e) {
                        const int key = pat.keys[static_cast<std::size_t>(e)];
                        const T a = st->a[static_cast<std::size_t>(e) * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
                        gv.row(key).segment(h * dh, dh) += a * goh;
                        const T dae = goh.dot(V.row(key).segment(h * dh, dh));
                        da[static_cast<std::size_t>(e - b)] = dae;
                        dot += a * dae;
                    }
                    for (int e = b; e < e_end; ++e) {
                        const int key = pat.keys[static_cast<std::size_t>(e)];
                        const T a = st->a[static_cast<std::size_t>(e) * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
                        const T ds = a * (da[static_cast<std::size_t>(e - b)] - dot) * sc;
                        if (ds == T(0)) continue;
                        gq.row(i).segment(h * dh, dh) += ds * K.row(key).segment(h * dh, dh);
                        gk.row(key).segment(h * dh, dh) += ds * Q.row(i).segment(h * dh, dh);
                        const int p = pat.pair[static_cast<std::size_t>(e)];
                        if (rel && p >= 0) {
                            gG[static_cast<std::size_t>(h)].row(i) += ds * H->row(p);
                            gH.row(p) += ds * st->gmat[static_cast<std::size_t>(h)].row(i);
                            gc[static_cast<std::size_t>(h)](i) += ds;
                        }
                    }
                }
            }
            if (needs(q)) acc(q, gq);
            if (needs(k)) acc(k, gk);
            if (needs(v)) acc(v, gv);
            if (!rel) return;
            if (needs(rel_h)) acc(rel_h, gH);
            const auto& Qr = value(qr);
            const auto& W2 = value(w2);
            Mat<T> gqr = Mat<T>::Zero(Qr.rows(), Qr.cols());
            Mat<T> gw2 = Mat<T>::Zero(W2.rows(), W2.cols());
            Mat<T> gb2 = Mat<T>::Zero(1, W2.cols());
            for (int h = 0; h < heads; ++h) {
                const auto& G = gG[static_cast<std::size_t>(h)];
                const auto& c = gc[static_cast<std::size_t>(h)];
                gqr.middleCols(h * dh, dh) += G * W2.middleCols(h * dh, dh);
                gw2.middleCols(h * dh, dh) += G.transpose() * Qr.middleCols(h * dh, dh);
                if (b2.valid()) {
                    gqr.middleCols(h * dh, dh) += c * value(b2).row(0).segment(h * dh, dh);
                    gb2.row(0).segment(h * dh, dh) += c.transpose() * Qr.middleCols(h * dh, dh);
                }
            }
            if (needs(qr)) acc(qr, gqr);
            if (needs(w2)) acc(w2, gw2);
            if (b2.valid() && needs(b2)) acc(b2, gb2);
        });
        return o;
    }

private:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
        const Mat<T>* external = nullptr;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
        std::function<void()> backward;
    };

    struct AttnState {
        std::vector<T> a;
        std::vector<Mat<T>> gmat;
        std::vector<Eigen::Matrix<T, Eigen::Dynamic, 1>> cvec;
    };

    Var push(Mat<T> m, bool requires_grad) {
        Node n;
        n.value = std::move(m);
        n.requires_grad = grad_enabled_ && requires_grad;
        nodes_.push_back(std::move(n));
        return {static_cast<int>(nodes_.size()) - 1};
    }

    void record(Var out, std::function<void()> fn) {
        Node& n = nodes_[static_cast<std::size_t>(out.id)];
        if (n.requires_grad) n.backward = std::move(fn);
    }

    bool needs(Var v) const { return v.valid() && nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
    const Mat<T>& g(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }

    template <typename Expr>
    void acc(Var v, const Expr& gr) {
        Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = gr;
        } else {
            n.grad += gr;
        }
    }

    void check_same(Var a, Var b, const char* op) const {
        if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
            throw std::logic_error(std::string(op) + ": shape mismatch");
    }

    bool grad_enabled_;
    std::deque<Node> nodes_;
    std::vector<std::shared_ptr<void>> held_;
};

}  // namespace scenestreamer::nn
