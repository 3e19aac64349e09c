#include "codistill/autodiff.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <utility>

#include "codistill/error.hpp"

namespace codistill {

Var Graph::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{nodes_.size() - 1};
}

Var Graph::constant(Matrix value) {
    Node n;
    n.owned = std::move(value);
    return push(std::move(n));
}

Var Graph::constant_ref(const Matrix& value) {
    Node n;
    n.ref = &value;
    return push(std::move(n));
}

Var Graph::parameter(const Matrix& value) {
    Node n;
    n.ref = &value;
    n.requires_grad = true;
    return push(std::move(n));
}

const Matrix& Graph::value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.ref ? *n.ref : n.owned;
}

Matrix& Graph::grad_slot(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.empty()) {
        const Matrix& val = value(v);
        n.grad = Matrix(val.rows(), val.cols());
    }
    return n.grad;
}

void Graph::accumulate(Var v, const Matrix& g) {
    if (!nodes_[v.id].requires_grad) return;
    kernels::add_inplace(grad_slot(v), g);
}

Var Graph::custom(Matrix value, std::span<const Var> inputs, Backward fn) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                  [this](Var in) { return nodes_[in.id].requires_grad; });
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
}

void Graph::backward(Var scalar_out) {
    if (value(scalar_out).size() != 1) throw Error("backward requires a scalar output");
    if (!requires_grad(scalar_out)) return;
    grad_slot(scalar_out)[0] = 1.0;
    for (std::size_t i = scalar_out.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.backward || n.grad.empty()) continue;
        n.backward(*this, n.grad);
    }
}

Var Graph::matmul(Var a, Var b) {
    Matrix out = kernels::matmul(value(a), value(b));
    const Var in[] = {a, b};
    return custom(std::move(out), in, [a, b](Graph& g, const Matrix& go) {
        if (g.requires_grad(a)) kernels::matmul_nt_acc(go, g.value(b), g.grad_slot(a));
        if (g.requires_grad(b)) kernels::matmul_tn_acc(g.value(a), go, g.grad_slot(b));
    });
}

Var Graph::add(Var a, Var b) {
    Matrix out = value(a);
    kernels::add_inplace(out, value(b));
    const Var in[] = {a, b};
    return custom(std::move(out), in, [a, b](Graph& g, const Matrix& go) {
        g.accumulate(a, go);
        g.accumulate(b, go);
    });
}

Var Graph::add_bias(Var x, Var bias) {
    Matrix out = value(x);
    kernels::add_row_bias(out, value(bias));
    const Var in[] = {x, bias};
    return custom(std::move(out), in, [x, bias](Graph& g, const Matrix& go) {
        g.accumulate(x, go);
        if (g.requires_grad(bias)) {
            Matrix& gb = g.grad_slot(bias);
            for (std::size_t r = 0; r < go.rows(); ++r)
                for (std::size_t c = 0; c < go.cols(); ++c) gb[c] += go(r, c);
        }
    });
}

Var Graph::layer_norm(Var x, Var gain, Var bias) {
    Matrix xhat;
    std::vector<double> rstd;
    Matrix out = kernels::layer_norm(value(x), value(gain), value(bias), &xhat, &rstd);
    const Var in[] = {x, gain, bias};
    return custom(std::move(out), in,
                  [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd)](Graph& g, const Matrix& go) {
                      const std::size_t n = go.rows(), d = go.cols();
                      const Matrix& gv = g.value(gain);
                      if (g.requires_grad(gain) || g.requires_grad(bias)) {
                          Matrix dg(1, d), db(1, d);
                          for (std::size_t r = 0; r < n; ++r)
                              for (std::size_t c = 0; c < d; ++c) {
                                  dg[c] += go(r, c) * xhat(r, c);
                                  db[c] += go(r, c);
                              }
                          g.accumulate(gain, dg);
                          g.accumulate(bias, db);
                      }
                      if (!g.requires_grad(x)) return;
                      Matrix& gx = g.grad_slot(x);
                      const double inv_d = 1.0 / static_cast<double>(d);
                      for (std::size_t r = 0; r < n; ++r) {
                          double sum_dh = 0.0, sum_dh_h = 0.0;
                          for (std::size_t c = 0; c < d; ++c) {
                              const double dh = go(r, c) * gv[c];
                              sum_dh += dh;
                              sum_dh_h += dh * xhat(r, c);
                          }
                          for (std::size_t c = 0; c < d; ++c) {
                              const double dh = go(r, c) * gv[c];
                              gx(r, c) += rstd[r] * (dh - inv_d * sum_dh - xhat(r, c) * inv_d * sum_dh_h);
                          }
                      }
                  });
}

Var Graph::gelu(Var x) {
    const Matrix& xv = value(x);
    Matrix out(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = kernels::gelu(xv[i]);
    const Var in[] = {x};
    return custom(std::move(out), in, [x](Graph& g, const Matrix& go) {
        const Matrix& xv = g.value(x);
        Matrix& gx = g.grad_slot(x);
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += go[i] * kernels::gelu_grad(xv[i]);
    });
}

Var Graph::attention(Var q, Var k, Var v, std::size_t heads, bool causal) {
    std::vector<Matrix> probs;
    Matrix out = kernels::attention(value(q), value(k), value(v), heads, causal, &probs);
    const Var in[] = {q, k, v};
    return custom(std::move(out), in, [q, k, v, heads, probs = std::move(probs)](Graph& g, const Matrix& go) {
        const Matrix& qv = g.value(q);
        const Matrix& kv = g.value(k);
        const Matrix& vv = g.value(v);
        const std::size_t tq = qv.rows(), tk = kv.rows(), d = qv.cols(), dh = d / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        Matrix gq(tq, d), gk(tk, d), gv(tk, d);
        std::vector<double> da(tk);
        for (std::size_t h = 0; h < heads; ++h) {
            const Matrix& a = probs[h];
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < tq; ++i) {
                const double* goi = go.data() + i * d + c0;
                double dot = 0.0;
                for (std::size_t j = 0; j < tk; ++j) {
                    const double aij = a(i, j);
                    if (aij == 0.0) {
                        da[j] = 0.0;
                        continue;
                    }
                    const double* vj = vv.data() + j * d + c0;
                    double s = 0.0;
                    for (std::size_t c = 0; c < dh; ++c) s += goi[c] * vj[c];
                    da[j] = s;
                    dot += s * aij;
                    double* gvj = gv.data() + j * d + c0;
                    for (std::size_t c = 0; c < dh; ++c) gvj[c] += aij * goi[c];
                }
                const double* qi = qv.data() + i * d + c0;
                double* gqi = gq.data() + i * d + c0;
                for (std::size_t j = 0; j < tk; ++j) {
                    const double aij = a(i, j);
                    if (aij == 0.0) continue;
                    const double ds = aij * (da[j] - dot) * scale;
                    const double* kj = kv.data() + j * d + c0;
                    double* gkj = gk.data() + j * d + c0;
                    for (std::size_t c = 0; c < dh; ++c) {
                        gqi[c] += ds * kj[c];
                        gkj[c] += ds * qi[c];
                    }
                }
            }
        }
        g.accumulate(q, gq);
        g.accumulate(k, gk);
        g.accumulate(v, gv);
    });
}

Var Graph::gather_rows(Var table, std::span<const int> ids) {
    const Matrix& t = value(table);
    Matrix out(ids.size(), t.cols());
    for (std::size_t r = 0; r < ids.size(); ++r) {
        assert(ids[r] >= 0 && static_cast<std::size_t>(ids[r]) < t.rows());
        std::copy_n(t.row(static_cast<std::size_t>(ids[r])).begin(), t.cols(), out.row(r).begin());
    }
    const Var in[] = {table};
    std::vector<int> idx(ids.begin(), ids.end());
    return custom(std::move(out), in, [table, idx = std::move(idx)](Graph& g, const Matrix& go) {
        Matrix& gt = g.grad_slot(table);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            auto dst = gt.row(static_cast<std::size_t>(idx[r]));
            auto src = go.row(r);
            for (std::size_t c = 0; c < go.cols(); ++c) dst[c] += src[c];
        }
    });
}

Var Graph::slice_rows(Var x, std::size_t begin, std::size_t count) {
    const Matrix& xv = value(x);
    assert(begin + count <= xv.rows());
    Matrix out(count, xv.cols());
    std::copy_n(xv.data() + begin * xv.cols(), count * xv.cols(), out.data());
    const Var in[] = {x};
    return custom(std::move(out), in, [x, begin](Graph& g, const Matrix& go) {
        Matrix& gx = g.grad_slot(x);
        double* dst = gx.data() + begin * gx.cols();
        for (std::size_t i = 0; i < go.size(); ++i) dst[i] += go[i];
    });
}

Var Graph::weighted_sum(Var a, double wa, Var b, double wb) {
    Matrix out(1, 1);
    out[0] = wa * value(a)[0] + wb * value(b)[0];
    const Var in[] = {a, b};
    return custom(std::move(out), in, [a, wa, b, wb](Graph& g, const Matrix& go) {
        if (wa != 0.0 && g.requires_grad(a)) g.grad_slot(a)[0] += wa * go[0];
        if (wb != 0.0 && g.requires_grad(b)) g.grad_slot(b)[0] += wb * go[0];
    });
}

}  // namespace codistill
