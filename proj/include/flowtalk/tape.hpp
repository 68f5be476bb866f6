#pragma once

// Minimal reverse-mode autodiff over dense matrices. A Tape owns every
// intermediate value; ops append nodes eagerly and record a closure that
// scatters the output gradient back to the inputs. Scalar type is a template
// parameter: training runs in float, gradient checks in double.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "flowtalk/common.hpp"
#include "flowtalk/mat.hpp"
#include "flowtalk/rope.hpp"

namespace flowtalk::ad {

template <typename S>
class Tape;

template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    int id = -1;

    const MatT<S>& val() const;
    Eigen::Index rows() const { return val().rows(); }
    Eigen::Index cols() const { return val().cols(); }
    S scalar() const;
};

template <typename S>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const MatT<S>&)>;

    struct Node {
        MatT<S> value;
        BackwardFn backward;  // empty for leaves
        bool needs_grad = false;
    };

    Var<S> leaf(MatT<S> value, bool needs_grad = false) {
        nodes_.push_back(Node{std::move(value), BackwardFn{}, needs_grad});
        return Var<S>{this, int(nodes_.size()) - 1};
    }

    Var<S> make(MatT<S> value, bool needs_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(value), needs_grad ? std::move(backward) : BackwardFn{}, needs_grad});
        return Var<S>{this, int(nodes_.size()) - 1};
    }

    const MatT<S>& value(int id) const { return nodes_[size_t(id)].value; }
    bool needs_grad(const Var<S>& v) const { return nodes_[size_t(v.id)].needs_grad; }

    void accumulate(int id, const MatT<S>& g) {
        auto& slot = grads_[size_t(id)];
        if (slot.size() == 0)
            slot = g;
        else
            slot += g;
    }

    // Reverse sweep from a 1x1 loss node.
    void backward(const Var<S>& loss) {
        if (loss.val().rows() != 1 || loss.val().cols() != 1)
            throw ValidationError("backward expects a scalar loss node");
        grads_.assign(nodes_.size(), MatT<S>());
        grads_[size_t(loss.id)] = MatT<S>::Ones(1, 1);
        for (int i = loss.id; i >= 0; --i) {
            const auto& node = nodes_[size_t(i)];
            if (!node.backward || grads_[size_t(i)].size() == 0) continue;
            node.backward(*this, grads_[size_t(i)]);
        }
    }

    // Gradient from the last backward(); zeros if the node was never reached.
    MatT<S> grad(const Var<S>& v) const {
        if (size_t(v.id) >= grads_.size() || grads_[size_t(v.id)].size() == 0)
            return MatT<S>::Zero(v.rows(), v.cols());
        return grads_[size_t(v.id)];
    }

    size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    std::vector<MatT<S>> grads_;
};

template <typename S>
const MatT<S>& Var<S>::val() const {
    return tape->value(id);
}

template <typename S>
S Var<S>::scalar() const {
    const auto& v = val();
    if (v.rows() != 1 || v.cols() != 1) throw ValidationError("scalar() on non 1x1 node");
    return v(0, 0);
}

namespace detail {
template <typename S>
void check_same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ValidationError(strf("%s: shape mismatch (%ldx%ld vs %ldx%ld)", op, long(a.rows()),
                                   long(a.cols()), long(b.rows()), long(b.cols())));
}
}  // namespace detail

// ---- elementwise / linear ----

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    if (a.cols() != b.rows())
        throw ValidationError(
            strf("matmul: inner dimensions differ (%ld vs %ld)", long(a.cols()), long(b.rows())));
    Tape<S>& t = *a.tape;
    MatT<S> y = a.val() * b.val();
    const int ia = a.id, ib = b.id;
    return t.make(std::move(y), t.needs_grad(a) || t.needs_grad(b), [ia, ib](Tape<S>& tp, const MatT<S>& g) {
        tp.accumulate(ia, g * tp.value(ib).transpose());
        tp.accumulate(ib, tp.value(ia).transpose() * g);
    });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    detail::check_same_shape(a, b, "add");
    Tape<S>& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return t.make(a.val() + b.val(), t.needs_grad(a) || t.needs_grad(b),
                  [ia, ib](Tape<S>& tp, const MatT<S>& g) {
                      tp.accumulate(ia, g);
                      tp.accumulate(ib, g);
                  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    detail::check_same_shape(a, b, "sub");
    Tape<S>& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return t.make(a.val() - b.val(), t.needs_grad(a) || t.needs_grad(b),
                  [ia, ib](Tape<S>& tp, const MatT<S>& g) {
                      tp.accumulate(ia, g);
                      tp.accumulate(ib, MatT<S>(-g));
                  });
}

template <typename S>
Var<S> cmul(const Var<S>& a, const Var<S>& b) {
    detail::check_same_shape(a, b, "cmul");
    Tape<S>& t = *a.tape;
    const int ia = a.id, ib = b.id;
    return t.make(MatT<S>(a.val().cwiseProduct(b.val())), t.needs_grad(a) || t.needs_grad(b),
                  [ia, ib](Tape<S>& tp, const MatT<S>& g) {
                      tp.accumulate(ia, MatT<S>(g.cwiseProduct(tp.value(ib))));
                      tp.accumulate(ib, MatT<S>(g.cwiseProduct(tp.value(ia))));
                  });
}

template <typename S>
Var<S> scale(const Var<S>& a, double c) {
    Tape<S>& t = *a.tape;
    const int ia = a.id;
    const S sc = S(c);
    return t.make(MatT<S>(a.val() * sc), t.needs_grad(a),
                  [ia, sc](Tape<S>& tp, const MatT<S>& g) { tp.accumulate(ia, MatT<S>(g * sc)); });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, double c) {
    Tape<S>& t = *a.tape;
    const int ia = a.id;
    return t.make(MatT<S>(a.val().array() + S(c)), t.needs_grad(a),
                  [ia](Tape<S>& tp, const MatT<S>& g) { tp.accumulate(ia, g); });
}

// broadcast a 1xC row over all rows of x
template <typename S>
Var<S> add_rowvec(const Var<S>& x, const Var<S>& r) {
    if (r.rows() != 1 || r.cols() != x.cols()) throw ValidationError("add_rowvec: row vector width mismatch");
    Tape<S>& t = *x.tape;
    MatT<S> y = x.val();
    y.array().rowwise() += r.val().row(0).array();
    const int ix = x.id, ir = r.id;
    return t.make(std::move(y), t.needs_grad(x) || t.needs_grad(r), [ix, ir](Tape<S>& tp, const MatT<S>& g) {
        tp.accumulate(ix, g);
        tp.accumulate(ir, MatT<S>(g.colwise().sum()));
    });
}

template <typename S>
Var<S> mul_rowvec(const Var<S>& x, const Var<S>& r) {
    if (r.rows() != 1 || r.cols() != x.cols()) throw ValidationError("mul_rowvec: row vector width mismatch");
    Tape<S>& t = *x.tape;
    MatT<S> y = (x.val().array().rowwise() * r.val().row(0).array()).matrix();
    const int ix = x.id, ir = r.id;
    return t.make(std::move(y), t.needs_grad(x) || t.needs_grad(r), [ix, ir](Tape<S>& tp, const MatT<S>& g) {
        tp.accumulate(ix, MatT<S>((g.array().rowwise() * tp.value(ir).row(0).array()).matrix()));
        tp.accumulate(ir, MatT<S>(g.cwiseProduct(tp.value(ix)).colwise().sum()));
    });
}

// ---- nonlinearities ----

template <typename S>
Var<S> gelu(const Var<S>& x) {
    Tape<S>& t = *x.tape;
    MatT<S> y = x.val().unaryExpr([](S v) { return S(0.5) * v * (S(1) + S(std::erf(double(v) * M_SQRT1_2))); });
    const int ix = x.id;
    return t.make(std::move(y), t.needs_grad(x), [ix](Tape<S>& tp, const MatT<S>& g) {
        const MatT<S>& v = tp.value(ix);
        MatT<S> d = v.unaryExpr([](S a) {
            double ad = double(a);
            double cdf = 0.5 * (1.0 + std::erf(ad * M_SQRT1_2));
            double pdf = std::exp(-0.5 * ad * ad) / std::sqrt(2.0 * M_PI);
            return S(cdf + ad * pdf);
        });
        tp.accumulate(ix, MatT<S>(g.cwiseProduct(d)));
    });
}

template <typename S>
Var<S> silu(const Var<S>& x) {
    Tape<S>& t = *x.tape;
    MatT<S> y = x.val().unaryExpr([](S v) { return S(double(v) / (1.0 + std::exp(-double(v)))); });
    const int ix = x.id;
    return t.make(std::move(y), t.needs_grad(x), [ix](Tape<S>& tp, const MatT<S>& g) {
        const MatT<S>& v = tp.value(ix);
        MatT<S> d = v.unaryExpr([](S a) {
            double s = 1.0 / (1.0 + std::exp(-double(a)));
            return S(s * (1.0 + double(a) * (1.0 - s)));
        });
        tp.accumulate(ix, MatT<S>(g.cwiseProduct(d)));
    });
}

// ---- normalization ----

// Per-row layer norm without affine terms; scale/shift come from adaptive
// modulation where needed.
template <typename S>
Var<S> layer_norm(const Var<S>& x, double eps = 1e-5) {
    Tape<S>& t = *x.tape;
    const Eigen::Index n = x.rows(), d = x.cols();
    MatT<S> y(n, d);
    std::vector<S> inv_std(static_cast<size_t>(n));
    for (Eigen::Index r = 0; r < n; ++r) {
        S mu = x.val().row(r).mean();
        S var = (x.val().row(r).array() - mu).square().mean();
        S is = S(1.0 / std::sqrt(double(var) + eps));
        inv_std[size_t(r)] = is;
        y.row(r) = ((x.val().row(r).array() - mu) * is).matrix();
    }
    const int ix = x.id;
    // save normalized output; dx = is * (g - mean(g) - y * mean(g .* y))
    MatT<S> y_saved = y;
    return t.make(std::move(y), t.needs_grad(x),
                  [ix, y_saved, inv_std](Tape<S>& tp, const MatT<S>& g) {
                      const Eigen::Index n2 = g.rows(), d2 = g.cols();
                      MatT<S> dx(n2, d2);
                      for (Eigen::Index r = 0; r < n2; ++r) {
                          S gm = g.row(r).mean();
                          S gym = g.row(r).cwiseProduct(y_saved.row(r)).mean();
                          dx.row(r) = ((g.row(r).array() - gm - y_saved.row(r).array() * gym) *
                                       inv_std[size_t(r)])
                                          .matrix();
                      }
                      tp.accumulate(ix, dx);
                  });
}

template <typename S>
Var<S> softmax_rows(const Var<S>& x) {
    Tape<S>& t = *x.tape;
    MatT<S> p(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        S m = x.val().row(r).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e = (x.val().row(r).array() - m).exp();
        p.row(r) = (e / e.sum()).matrix();
    }
    const int ix = x.id;
    MatT<S> p_saved = p;
    return t.make(std::move(p), t.needs_grad(x), [ix, p_saved](Tape<S>& tp, const MatT<S>& g) {
        MatT<S> dx(g.rows(), g.cols());
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
            S dot = g.row(r).cwiseProduct(p_saved.row(r)).sum();
            dx.row(r) = (p_saved.row(r).array() * (g.row(r).array() - dot)).matrix();
        }
        tp.accumulate(ix, dx);
    });
}

// ---- shape ops ----

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ValidationError("concat_rows: empty input");
    Tape<S>& t = *parts.front().tape;
    Eigen::Index total = 0, cols = parts.front().cols();
    bool ng = false;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ValidationError("concat_rows: width mismatch");
        total += p.rows();
        ng = ng || t.needs_grad(p);
    }
    MatT<S> y(total, cols);
    std::vector<int> ids;
    std::vector<Eigen::Index> offs;
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        y.middleRows(off, p.rows()) = p.val();
        ids.push_back(p.id);
        offs.push_back(off);
        off += p.rows();
    }
    return t.make(std::move(y), ng, [ids, offs](Tape<S>& tp, const MatT<S>& g) {
        for (size_t i = 0; i < ids.size(); ++i) {
            Eigen::Index rows = tp.value(ids[i]).rows();
            tp.accumulate(ids[i], MatT<S>(g.middleRows(offs[i], rows)));
        }
    });
}

template <typename S>
Var<S> slice_rows(const Var<S>& x, Eigen::Index r0, Eigen::Index nrows) {
    if (r0 < 0 || r0 + nrows > x.rows()) throw ValidationError("slice_rows: out of range");
    Tape<S>& t = *x.tape;
    const int ix = x.id;
    const Eigen::Index total = x.rows(), cols = x.cols();
    return t.make(MatT<S>(x.val().middleRows(r0, nrows)), t.needs_grad(x),
                  [ix, r0, nrows, total, cols](Tape<S>& tp, const MatT<S>& g) {
                      MatT<S> gx = MatT<S>::Zero(total, cols);
                      gx.middleRows(r0, nrows) = g;
                      tp.accumulate(ix, gx);
                  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
    if (parts.empty()) throw ValidationError("concat_cols: empty input");
    Tape<S>& t = *parts.front().tape;
    Eigen::Index total = 0, rows = parts.front().rows();
    bool ng = false;
    for (const auto& p : parts) {
        if (p.rows() != rows) throw ValidationError("concat_cols: height mismatch");
        total += p.cols();
        ng = ng || t.needs_grad(p);
    }
    MatT<S> y(rows, total);
    std::vector<int> ids;
    std::vector<Eigen::Index> offs;
    Eigen::Index off = 0;
    for (const auto& p : parts) {
        y.middleCols(off, p.cols()) = p.val();
        ids.push_back(p.id);
        offs.push_back(off);
        off += p.cols();
    }
    return t.make(std::move(y), ng, [ids, offs](Tape<S>& tp, const MatT<S>& g) {
        for (size_t i = 0; i < ids.size(); ++i) {
            Eigen::Index cols = tp.value(ids[i]).cols();
            tp.accumulate(ids[i], MatT<S>(g.middleCols(offs[i], cols)));
        }
    });
}

template <typename S>
Var<S> slice_cols(const Var<S>& x, Eigen::Index c0, Eigen::Index ncols) {
    if (c0 < 0 || c0 + ncols > x.cols()) throw ValidationError("slice_cols: out of range");
    Tape<S>& t = *x.tape;
    const int ix = x.id;
    const Eigen::Index rows = x.rows(), total = x.cols();
    return t.make(MatT<S>(x.val().middleCols(c0, ncols)), t.needs_grad(x),
                  [ix, c0, ncols, rows, total](Tape<S>& tp, const MatT<S>& g) {
                      MatT<S> gx = MatT<S>::Zero(rows, total);
                      gx.middleCols(c0, ncols) = g;
                      tp.accumulate(ix, gx);
                  });
}

// ---- lookup / convolution ----

template <typename S>
Var<S> embedding(const Var<S>& table, const std::vector<int>& ids) {
    Tape<S>& t = *table.tape;
    const Eigen::Index vocab = table.rows(), d = table.cols();
    MatT<S> y(Eigen::Index(ids.size()), d);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= vocab)
            throw ValidationError(strf("embedding: id %d out of range [0, %ld)", ids[i], long(vocab)));
        y.row(Eigen::Index(i)) = table.val().row(ids[i]);
    }
    const int it = table.id;
    return t.make(std::move(y), t.needs_grad(table), [it, ids, vocab, d](Tape<S>& tp, const MatT<S>& g) {
        MatT<S> gt = MatT<S>::Zero(vocab, d);
        for (size_t i = 0; i < ids.size(); ++i) gt.row(ids[i]) += g.row(Eigen::Index(i));
        tp.accumulate(it, gt);
    });
}

// Depthwise convolution along the time axis with zero padding ("same" size).
// x is N×C, w is C×K with the kernel centered at K/2.
template <typename S>
Var<S> dwconv_time(const Var<S>& x, const Var<S>& w) {
    Tape<S>& t = *x.tape;
    const Eigen::Index n = x.rows(), c = x.cols(), k = w.cols();
    if (w.rows() != c) throw ValidationError("dwconv_time: kernel channel count mismatch");
    const Eigen::Index half = k / 2;
    MatT<S> y = MatT<S>::Zero(n, c);
    for (Eigen::Index j = 0; j < k; ++j) {
        const Eigen::Index shift = j - half;
        const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
        const Eigen::Index hi = std::min<Eigen::Index>(n, n - shift);
        if (lo >= hi) continue;
        y.middleRows(lo, hi - lo).array() +=
            x.val().middleRows(lo + shift, hi - lo).array().rowwise() * w.val().col(j).transpose().array();
    }
    const int ix = x.id, iw = w.id;
    return t.make(std::move(y), t.needs_grad(x) || t.needs_grad(w),
                  [ix, iw, n, c, k, half](Tape<S>& tp, const MatT<S>& g) {
                      MatT<S> gx = MatT<S>::Zero(n, c);
                      MatT<S> gw = MatT<S>::Zero(c, k);
                      const MatT<S>& xv = tp.value(ix);
                      const MatT<S>& wv = tp.value(iw);
                      for (Eigen::Index j = 0; j < k; ++j) {
                          const Eigen::Index shift = j - half;
                          const Eigen::Index lo = std::max<Eigen::Index>(0, -shift);
                          const Eigen::Index hi = std::min<Eigen::Index>(n, n - shift);
                          if (lo >= hi) continue;
                          gx.middleRows(lo + shift, hi - lo).array() +=
                              g.middleRows(lo, hi - lo).array().rowwise() * wv.col(j).transpose().array();
                          gw.col(j) = g.middleRows(lo, hi - lo)
                                          .cwiseProduct(xv.middleRows(lo + shift, hi - lo))
                                          .colwise()
                                          .sum()
                                          .transpose();
                      }
                      tp.accumulate(ix, gx);
                      tp.accumulate(iw, gw);
                  });
}

// ---- attention ----

// Captures row-stochastic attention weights for inspection in tests.
struct AttnProbe {
    std::vector<MatD> head_probs;
};

struct AttnOptions {
    int n_heads = 1;
    bool use_rope = true;
    double rope_base = net::kRopeBase;
    std::vector<double> pos_q;            // required when use_rope
    std::vector<double> pos_k;
    const std::vector<uint8_t>* key_mask = nullptr;  // optional; 1 = visible
    AttnProbe* probe = nullptr;
};

// Fused multi-head scaled-dot-product attention with rotary positions.
// q: Nq×d, k/v: Nk×d with d = n_heads * d_head.
template <typename S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, const AttnOptions& opt) {
    Tape<S>& t = *q.tape;
    const Eigen::Index nq = q.rows(), nk = k.rows(), d = q.cols();
    if (k.cols() != d || v.cols() != d) throw ValidationError("attention: feature width mismatch");
    if (v.rows() != nk) throw ValidationError("attention: key/value length mismatch");
    if (d % opt.n_heads != 0) throw ValidationError("attention: width not divisible by head count");
    const Eigen::Index dh = d / opt.n_heads;
    if (opt.use_rope && dh % 2 != 0) throw ValidationError("attention: rotary needs even head dim");
    if (opt.key_mask && Eigen::Index(opt.key_mask->size()) != nk)
        throw ValidationError("attention: key mask length mismatch");

    MatT<S> q_rot = q.val(), k_rot = k.val();
    if (opt.use_rope) {
        for (int h = 0; h < opt.n_heads; ++h) {
            MatT<S> qb = q_rot.middleCols(Eigen::Index(h) * dh, dh);
            net::rope_rotate_inplace(qb, opt.pos_q, opt.rope_base);
            q_rot.middleCols(Eigen::Index(h) * dh, dh) = qb;
            MatT<S> kb = k_rot.middleCols(Eigen::Index(h) * dh, dh);
            net::rope_rotate_inplace(kb, opt.pos_k, opt.rope_base);
            k_rot.middleCols(Eigen::Index(h) * dh, dh) = kb;
        }
    }

    const S inv_sqrt = S(1.0 / std::sqrt(double(dh)));
    std::vector<MatT<S>> probs(size_t(opt.n_heads));
    MatT<S> out(nq, d);
    for (int h = 0; h < opt.n_heads; ++h) {
        auto qb = q_rot.middleCols(Eigen::Index(h) * dh, dh);
        auto kb = k_rot.middleCols(Eigen::Index(h) * dh, dh);
        auto vb = v.val().middleCols(Eigen::Index(h) * dh, dh);
        MatT<S> logits = qb * kb.transpose() * inv_sqrt;
        MatT<S>& p = probs[size_t(h)];
        p.resize(nq, nk);
        for (Eigen::Index r = 0; r < nq; ++r) {
            // softmax over the visible keys only; masked keys get an exact zero
            S m = -std::numeric_limits<S>::infinity();
            bool any_visible = false;
            for (Eigen::Index j = 0; j < nk; ++j) {
                if (!opt.key_mask || (*opt.key_mask)[size_t(j)]) {
                    m = std::max(m, logits(r, j));
                    any_visible = true;
                }
            }
            if (!any_visible)
                throw ValidationError("attention: every key masked out for some query");
            // a visible key with a non-finite best logit means the activations
            // overflowed upstream, which is a numeric failure, not a caller bug
            if (!std::isfinite(double(m)))
                throw NumericError("attention: logits are not finite");
            S z = S(0);
            for (Eigen::Index j = 0; j < nk; ++j) {
                if (opt.key_mask && !(*opt.key_mask)[size_t(j)]) {
                    p(r, j) = S(0);
                } else {
                    p(r, j) = S(std::exp(double(logits(r, j) - m)));
                    z += p(r, j);
                }
            }
            p.row(r) /= z;
        }
        if (opt.probe) opt.probe->head_probs.push_back(p.template cast<double>());
        out.middleCols(Eigen::Index(h) * dh, dh) = p * vb;
    }

    const int iq = q.id, ik = k.id, iv = v.id;
    const int n_heads = opt.n_heads;
    const bool use_rope = opt.use_rope;
    const double rope_base = opt.rope_base;
    const std::vector<double> pos_q = opt.pos_q, pos_k = opt.pos_k;
    bool ng = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
    return t.make(std::move(out), ng,
                  [iq, ik, iv, n_heads, use_rope, rope_base, pos_q, pos_k, q_rot, k_rot, probs, dh,
                   inv_sqrt](Tape<S>& tp, const MatT<S>& g) {
                      const Eigen::Index nq2 = g.rows();
                      const Eigen::Index nk2 = tp.value(ik).rows();
                      const Eigen::Index d2 = g.cols();
                      MatT<S> gq(nq2, d2), gk(nk2, d2), gv(nk2, d2);
                      for (int h = 0; h < n_heads; ++h) {
                          const Eigen::Index c0 = Eigen::Index(h) * dh;
                          auto go = g.middleCols(c0, dh);
                          auto vb = tp.value(iv).middleCols(c0, dh);
                          const MatT<S>& p = probs[size_t(h)];
                          MatT<S> dp = go * vb.transpose();
                          gv.middleCols(c0, dh) = p.transpose() * go;
                          MatT<S> ds(nq2, nk2);
                          for (Eigen::Index r = 0; r < nq2; ++r) {
                              S dot = dp.row(r).cwiseProduct(p.row(r)).sum();
                              ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
                          }
                          MatT<S> dq_rot = ds * k_rot.middleCols(c0, dh) * inv_sqrt;
                          MatT<S> dk_rot = ds.transpose() * q_rot.middleCols(c0, dh) * inv_sqrt;
                          if (use_rope) {
                              net::rope_rotate_inplace(dq_rot, pos_q, rope_base, /*inverse=*/true);
                              net::rope_rotate_inplace(dk_rot, pos_k, rope_base, /*inverse=*/true);
                          }
                          gq.middleCols(c0, dh) = dq_rot;
                          gk.middleCols(c0, dh) = dk_rot;
                      }
                      tp.accumulate(iq, gq);
                      tp.accumulate(ik, gk);
                      tp.accumulate(iv, gv);
                  });
}

template <typename S>
Var<S> sum(const Var<S>& x) {
    Tape<S>& t = *x.tape;
    MatT<S> y(1, 1);
    y(0, 0) = x.val().sum();
    const int ix = x.id;
    const Eigen::Index r = x.rows(), c = x.cols();
    return t.make(std::move(y), t.needs_grad(x), [ix, r, c](Tape<S>& tp, const MatT<S>& g) {
        tp.accumulate(ix, MatT<S>(MatT<S>::Constant(r, c, g(0, 0))));
    });
}

// ---- losses ----

enum class LossKind { L1, L2 };

// Mean absolute (or squared) difference over the masked rows of a column
// range. Rows with mask 0 contribute nothing, including to gradients.
template <typename S>
Var<S> masked_loss(const Var<S>& pred, const MatT<S>& target, const std::vector<uint8_t>& frame_mask,
                   Eigen::Index c0, Eigen::Index ncols, LossKind kind) {
    Tape<S>& t = *pred.tape;
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        throw ValidationError("masked_loss: prediction/target shape mismatch");
    if (Eigen::Index(frame_mask.size()) != pred.rows())
        throw ValidationError("masked_loss: mask length mismatch");
    if (c0 < 0 || c0 + ncols > pred.cols()) throw ValidationError("masked_loss: column range out of bounds");
    Eigen::Index masked = 0;
    for (uint8_t m : frame_mask) masked += (m != 0);
    if (masked == 0) throw ValidationError("masked_loss: mask selects no frames");

    const double denom = double(masked) * double(ncols);
    double acc = 0.0;
    for (Eigen::Index r = 0; r < pred.rows(); ++r) {
        if (!frame_mask[size_t(r)]) continue;
        for (Eigen::Index c = c0; c < c0 + ncols; ++c) {
            double diff = double(pred.val()(r, c)) - double(target(r, c));
            acc += (kind == LossKind::L1) ? std::abs(diff) : diff * diff;
        }
    }
    MatT<S> y(1, 1);
    y(0, 0) = S(acc / denom);

    const int ip = pred.id;
    return t.make(std::move(y), t.needs_grad(pred),
                  [ip, target, frame_mask, c0, ncols, denom, kind](Tape<S>& tp, const MatT<S>& g) {
                      const MatT<S>& pv = tp.value(ip);
                      MatT<S> gp = MatT<S>::Zero(pv.rows(), pv.cols());
                      const S w = g(0, 0) / S(denom);
                      for (Eigen::Index r = 0; r < pv.rows(); ++r) {
                          if (!frame_mask[size_t(r)]) continue;
                          for (Eigen::Index c = c0; c < c0 + ncols; ++c) {
                              S diff = pv(r, c) - target(r, c);
                              if (kind == LossKind::L1)
                                  gp(r, c) = w * S(diff > S(0) ? 1 : (diff < S(0) ? -1 : 0));
                              else
                                  gp(r, c) = w * S(2) * diff;
                          }
                      }
                      tp.accumulate(ip, gp);
                  });
}

}  // namespace flowtalk::ad
