#include "codistill/tensor.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numbers>

namespace codistill {

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Matrix::append_row(std::span<const double> values) {
    if (rows_ == 0) cols_ = values.size();
    assert(values.size() == cols_);
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
}

namespace kernels {

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    matmul_acc(a, b, c);
    return c;
}

void matmul_acc(const Matrix& a, const Matrix& b, Matrix& c) {
    assert(a.cols() == b.rows() && c.rows() == a.rows() && c.cols() == b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (std::size_t i = 0; i < n; ++i) {
        double* crow = pc + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
    assert(a.rows() == b.rows() && c.rows() == a.cols() && c.cols() == b.cols());
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (std::size_t r = 0; r < n; ++r) {
        const double* brow = pb + r * m;
        for (std::size_t i = 0; i < k; ++i) {
            const double av = pa[r * k + i];
            if (av == 0.0) continue;
            double* crow = pc + i * m;
            for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& c) {
    assert(a.cols() == b.cols() && c.rows() == a.rows() && c.cols() == b.rows());
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = c.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = pa + i * k;
        for (std::size_t j = 0; j < m; ++j) {
            const double* brow = pb + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            pc[i * m + j] += s;
        }
    }
}

void add_inplace(Matrix& a, const Matrix& b) {
    assert(a.same_shape(b));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

void add_row_bias(Matrix& a, const Matrix& bias) {
    assert(bias.size() == a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        auto row = a.row(r);
        for (std::size_t c = 0; c < a.cols(); ++c) row[c] += bias[c];
    }
}

void scale_inplace(Matrix& a, double s) {
    for (auto& v : a.values()) v *= s;
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix* xhat,
                  std::vector<double>* rstd) {
    const std::size_t n = x.rows(), d = x.cols();
    Matrix y(n, d);
    if (xhat) *xhat = Matrix(n, d);
    if (rstd) rstd->assign(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        auto in = x.row(r);
        double mean = 0.0;
        for (double v : in) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : in) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
        auto out = y.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            const double h = (in[c] - mean) * rs;
            if (xhat) (*xhat)(r, c) = h;
            out[c] = h * gain[c] + bias[c];
        }
        if (rstd) (*rstd)[r] = rs;
    }
    return y;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

Matrix softmax_rows(const Matrix& logits, double temperature) {
    Matrix p(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto in = logits.row(r);
        auto out = p.row(r);
        double mx = in[0] / temperature;
        for (double v : in) mx = std::max(mx, v / temperature);
        double sum = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            out[c] = std::exp(in[c] / temperature - mx);
            sum += out[c];
        }
        for (double& v : out) v /= sum;
    }
    return p;
}

bool all_finite(const Matrix& m) {
    return std::all_of(m.values().begin(), m.values().end(), [](double v) { return std::isfinite(v); });
}


Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, bool causal,
                 std::vector<Matrix>* probs) {
    const std::size_t tq = q.rows(), tk = k.rows(), d = q.cols();
    const std::size_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const std::size_t offset = tk - std::min(tk, tq);
    Matrix out(tq, d);
    if (probs) probs->assign(heads, Matrix(tq, tk));
    std::vector<double> a(tk);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < tq; ++i) {
            const std::size_t limit = causal ? std::min(tk, i + offset + 1) : tk;
            const double* qi = q.data() + i * d + c0;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < limit; ++j) {
                const double* kj = k.data() + j * d + c0;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
                a[j] = s * scale;
                mx = std::max(mx, a[j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j < limit; ++j) {
                a[j] = std::exp(a[j] - mx);
                sum += a[j];
            }
            double* oi = out.data() + i * d + c0;
            for (std::size_t j = 0; j < limit; ++j) {
                a[j] /= sum;
                const double* vj = v.data() + j * d + c0;
                for (std::size_t c = 0; c < dh; ++c) oi[c] += a[j] * vj[c];
            }
            if (probs) {
                for (std::size_t j = 0; j < limit; ++j) (*probs)[h](i, j) = a[j];
            }
        }
    }
    return out;
}

}  // namespace kernels
}  // namespace codistill
