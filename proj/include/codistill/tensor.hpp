#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace codistill {

// Dense row-major matrix of doubles. Vectors are 1xN matrices.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    void fill(double v);
    /// Appends one row; `values.size()` must equal cols() (or set it when empty).
    void append_row(std::span<const double> values);
    bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Kernels shared by the autodiff tape and the cached inference path. Every
// kernel processes rows independently with a fixed accumulation order, so a
// single-row call reproduces the corresponding row of a batched call bit for bit.
namespace kernels {

/// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
/// C += A * B
void matmul_acc(const Matrix& a, const Matrix& b, Matrix& c);
/// C += A^T * B
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c);
/// C += A * B^T
void matmul_nt_acc(const Matrix& a, const Matrix& b, Matrix& c);

void add_inplace(Matrix& a, const Matrix& b);
void add_row_bias(Matrix& a, const Matrix& bias);
void scale_inplace(Matrix& a, double s);

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer norm. `xhat` and `rstd` receive the normalized input and
/// reciprocal std per row when non-null (needed for the backward pass).
Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, Matrix* xhat = nullptr,
                  std::vector<double>* rstd = nullptr);

double gelu(double x);
double gelu_grad(double x);

/// Row-wise softmax of `logits / temperature`.
Matrix softmax_rows(const Matrix& logits, double temperature = 1.0);

bool all_finite(const Matrix& m);

/// Multi-head scaled dot-product attention over column blocks of q/k/v.
/// With `causal`, query row i sees keys j <= i + (k.rows() - q.rows()), so a
/// single trailing query row over a key cache behaves like the last row of the
/// full masked computation. `probs`, when non-null, receives one
/// [q.rows() x k.rows()] attention matrix per head (masked entries zero).
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads, bool causal,
                 std::vector<Matrix>* probs = nullptr);

}  // namespace kernels
}  // namespace codistill
