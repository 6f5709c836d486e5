// Reverse-mode automatic differentiation over dense f64 tensors.
//
// A Tape records primitive operations in topological order (parents always
// precede children); backward() does one sweep over the recorded nodes and
// returns d(output)/d(leaf) for every differentiable leaf. Accumulation
// order over fan-out is fixed by node id, so gradients are bit-reproducible
// from run to run.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace smp {

struct TapeError : std::runtime_error {
    explicit TapeError(const std::string& what) : std::runtime_error(what) {}
};

// Dense row-major 2-d tensor. Scalars are 1x1, row vectors 1xF. Batched
// higher-rank data (per-sample matrices) is stored flattened per row.
struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Tensor() = default;
    Tensor(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
    Tensor(int r, int c, std::vector<double> data) : rows(r), cols(c), v(std::move(data)) {
        if (v.size() != static_cast<std::size_t>(r) * c)
            throw TapeError("Tensor: data length does not match shape");
    }

    static Tensor scalar(double x) { return Tensor(1, 1, {x}); }
    static Tensor full(int r, int c, double x) {
        Tensor t(r, c);
        std::fill(t.v.begin(), t.v.end(), x);
        return t;
    }
    static Tensor row(std::vector<double> data) {
        const int c = static_cast<int>(data.size());
        return Tensor(1, c, std::move(data));
    }

    std::size_t numel() const { return v.size(); }
    double& at(int i, int j) { return v[static_cast<std::size_t>(i) * cols + j]; }
    double at(int i, int j) const { return v[static_cast<std::size_t>(i) * cols + j]; }
    double item() const {
        if (numel() != 1) throw TapeError("Tensor::item on non-scalar");
        return v[0];
    }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
};

using NodeId = std::int32_t;

enum class OpKind : std::uint8_t {
    kLeaf,
    kAdd,
    kSub,
    kMul,
    kScale,        // c0 * a
    kAddScalar,    // a + c0
    kMatmul,       // (m x k) . (k x n)
    kRelu,
    kPow,          // a^c0 elementwise
    kLog,
    kExp,
    kSin,
    kCos,
    kSum,          // all elements -> 1x1
    kMean,         // all elements -> 1x1
    kSumCols,      // BxF -> Bx1
    kMeanRows,     // BxF -> 1xF
    kAddRow,       // BxF + 1xF
    kMulRow,       // BxF * 1xF
    kBroadcastRows,  // 1xF -> BxF
    kBroadcastCols,  // Bx1 -> BxF
    kConcatCols,
    kSelectRow,    // row c0 -> 1xF
    kGatherCols,
    kScatterDiag,  // Bxn -> Bx(n*n), values on the diagonal
    kContractDw,   // Bx(R*d) with Bxd -> BxR, contraction over d
    kSelectSign,   // a >= 0 ? c0 : c1; derivative 0 (locally constant)
    kPerSampleLMul,    // rows of b are (n x m) samples; out_s = A . X_s
    kPerSampleRMul,    // out_s = X_s . A
    kPerSampleTranspose,
    kSymExpand,    // packed upper triangle 1xK -> 1x(n*n) symmetric
};

class Tape {
  public:
    explicit Tape(bool check_finite = true) : check_finite_(check_finite) {
        nodes_.reserve(256);
    }

    // --- leafs -----------------------------------------------------------
    NodeId leaf(Tensor value, bool differentiable) {
        Node n;
        n.op = OpKind::kLeaf;
        n.value = std::move(value);
        n.needs_grad = differentiable;
        return push(std::move(n), "leaf");
    }
    NodeId constant(Tensor value) { return leaf(std::move(value), false); }
    NodeId constant_scalar(double x) { return constant(Tensor::scalar(x)); }

    // --- elementwise -----------------------------------------------------
    NodeId add(NodeId a, NodeId b) { return binary_same(OpKind::kAdd, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary_same(OpKind::kSub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary_same(OpKind::kMul, a, b); }

    NodeId scale(NodeId a, double c) {
        Node n = unary(OpKind::kScale, a);
        n.c0 = c;
        for (double& x : n.value.v) x *= c;
        return push(std::move(n), "scale");
    }
    NodeId add_scalar(NodeId a, double c) {
        Node n = unary(OpKind::kAddScalar, a);
        n.c0 = c;
        for (double& x : n.value.v) x += c;
        return push(std::move(n), "add_scalar");
    }
    NodeId neg(NodeId a) { return scale(a, -1.0); }

    NodeId relu(NodeId a) {
        Node n = unary(OpKind::kRelu, a);
        for (double& x : n.value.v) x = x > 0.0 ? x : 0.0;
        return push(std::move(n), "relu");
    }
    NodeId pow(NodeId a, double e) {
        Node n = unary(OpKind::kPow, a);
        n.c0 = e;
        for (double& x : n.value.v) x = std::pow(x, e);
        return push(std::move(n), "pow");
    }
    NodeId square(NodeId a) { return pow(a, 2.0); }
    NodeId log(NodeId a) {
        Node n = unary(OpKind::kLog, a);
        for (double& x : n.value.v) x = std::log(x);
        return push(std::move(n), "log");
    }
    NodeId exp(NodeId a) {
        Node n = unary(OpKind::kExp, a);
        for (double& x : n.value.v) x = std::exp(x);
        return push(std::move(n), "exp");
    }
    NodeId sin(NodeId a) {
        Node n = unary(OpKind::kSin, a);
        for (double& x : n.value.v) x = std::sin(x);
        return push(std::move(n), "sin");
    }
    NodeId cos(NodeId a) {
        Node n = unary(OpKind::kCos, a);
        for (double& x : n.value.v) x = std::cos(x);
        return push(std::move(n), "cos");
    }

    // --- linear algebra ----------------------------------------------------
    NodeId matmul(NodeId a, NodeId b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.cols != B.rows) throw TapeError("matmul: inner dimensions differ");
        Node n;
        n.op = OpKind::kMatmul;
        n.a = a;
        n.b = b;
        n.value = Tensor(A.rows, B.cols);
        matmul_accum(A, B, n.value, false, false);
        n.needs_grad = needs(a) || needs(b);
        return push(std::move(n), "matmul");
    }

    // --- reductions --------------------------------------------------------
    NodeId sum(NodeId a) {
        Node n;
        n.op = OpKind::kSum;
        n.a = a;
        double s = 0.0;
        for (double x : val(a).v) s += x;
        n.value = Tensor::scalar(s);
        n.needs_grad = needs(a);
        return push(std::move(n), "sum");
    }
    NodeId mean(NodeId a) {
        Node n;
        n.op = OpKind::kMean;
        n.a = a;
        double s = 0.0;
        for (double x : val(a).v) s += x;
        n.value = Tensor::scalar(s / static_cast<double>(val(a).numel()));
        n.needs_grad = needs(a);
        return push(std::move(n), "mean");
    }
    NodeId sum_cols(NodeId a) {
        const Tensor& A = val(a);
        Node n;
        n.op = OpKind::kSumCols;
        n.a = a;
        n.value = Tensor(A.rows, 1);
        for (int i = 0; i < A.rows; ++i) {
            double s = 0.0;
            for (int j = 0; j < A.cols; ++j) s += A.at(i, j);
            n.value.at(i, 0) = s;
        }
        n.needs_grad = needs(a);
        return push(std::move(n), "sum_cols");
    }
    NodeId mean_rows(NodeId a) {
        const Tensor& A = val(a);
        Node n;
        n.op = OpKind::kMeanRows;
        n.a = a;
        n.value = Tensor(1, A.cols);
        for (int j = 0; j < A.cols; ++j) {
            double s = 0.0;
            for (int i = 0; i < A.rows; ++i) s += A.at(i, j);
            n.value.at(0, j) = s / A.rows;
        }
        n.needs_grad = needs(a);
        return push(std::move(n), "mean_rows");
    }

    // --- broadcasting -------------------------------------------------------
    NodeId add_row(NodeId a, NodeId r) { return rowwise(OpKind::kAddRow, a, r); }
    NodeId mul_row(NodeId a, NodeId r) { return rowwise(OpKind::kMulRow, a, r); }
    NodeId sub_row(NodeId a, NodeId r) { return add_row(a, scale(r, -1.0)); }

    NodeId broadcast_rows(NodeId a, int rows) {
        const Tensor& A = val(a);
        if (A.rows != 1) throw TapeError("broadcast_rows: input must be 1xF");
        Node n;
        n.op = OpKind::kBroadcastRows;
        n.a = a;
        n.value = Tensor(rows, A.cols);
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < A.cols; ++j) n.value.at(i, j) = A.at(0, j);
        n.needs_grad = needs(a);
        return push(std::move(n), "broadcast_rows");
    }
    NodeId broadcast_cols(NodeId a, int cols) {
        const Tensor& A = val(a);
        if (A.cols != 1) throw TapeError("broadcast_cols: input must be Bx1");
        Node n;
        n.op = OpKind::kBroadcastCols;
        n.a = a;
        n.value = Tensor(A.rows, cols);
        for (int i = 0; i < A.rows; ++i)
            for (int j = 0; j < cols; ++j) n.value.at(i, j) = A.at(i, 0);
        n.needs_grad = needs(a);
        return push(std::move(n), "broadcast_cols");
    }

    // --- structure ----------------------------------------------------------
    NodeId concat_cols(NodeId a, NodeId b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (A.rows != B.rows) throw TapeError("concat_cols: row counts differ");
        Node n;
        n.op = OpKind::kConcatCols;
        n.a = a;
        n.b = b;
        n.value = Tensor(A.rows, A.cols + B.cols);
        for (int i = 0; i < A.rows; ++i) {
            for (int j = 0; j < A.cols; ++j) n.value.at(i, j) = A.at(i, j);
            for (int j = 0; j < B.cols; ++j) n.value.at(i, A.cols + j) = B.at(i, j);
        }
        n.needs_grad = needs(a) || needs(b);
        return push(std::move(n), "concat_cols");
    }
    NodeId select_row(NodeId a, int r) {
        const Tensor& A = val(a);
        if (r < 0 || r >= A.rows) throw TapeError("select_row: index out of range");
        Node n;
        n.op = OpKind::kSelectRow;
        n.a = a;
        n.c0 = r;
        n.value = Tensor(1, A.cols);
        for (int j = 0; j < A.cols; ++j) n.value.at(0, j) = A.at(r, j);
        n.needs_grad = needs(a);
        return push(std::move(n), "select_row");
    }
    NodeId gather_cols(NodeId a, std::vector<int> idx) {
        const Tensor& A = val(a);
        for (int j : idx)
            if (j < 0 || j >= A.cols) throw TapeError("gather_cols: index out of range");
        Node n;
        n.op = OpKind::kGatherCols;
        n.a = a;
        n.value = Tensor(A.rows, static_cast<int>(idx.size()));
        for (int i = 0; i < A.rows; ++i)
            for (std::size_t j = 0; j < idx.size(); ++j)
                n.value.at(i, static_cast<int>(j)) = A.at(i, idx[j]);
        n.idx = std::move(idx);
        n.needs_grad = needs(a);
        return push(std::move(n), "gather_cols");
    }
    NodeId scatter_diag(NodeId a, int dim) {
        const Tensor& A = val(a);
        if (A.cols != dim) throw TapeError("scatter_diag: input must be Bxn");
        Node n;
        n.op = OpKind::kScatterDiag;
        n.a = a;
        n.idx = {dim};
        n.value = Tensor(A.rows, dim * dim);
        for (int i = 0; i < A.rows; ++i)
            for (int j = 0; j < dim; ++j) n.value.at(i, j * dim + j) = A.at(i, j);
        n.needs_grad = needs(a);
        return push(std::move(n), "scatter_diag");
    }

    // out[s, r] = sum_j a[s, r*d + j] * w[s, j]; the per-sample contraction
    // used for sigma.dW, q.dW and Q.dW terms.
    NodeId contract_dw(NodeId a, NodeId w, int r, int d) {
        const Tensor& A = val(a);
        const Tensor& W = val(w);
        if (A.cols != r * d || W.cols != d || A.rows != W.rows)
            throw TapeError("contract_dw: shape mismatch");
        Node n;
        n.op = OpKind::kContractDw;
        n.a = a;
        n.b = w;
        n.idx = {r, d};
        n.value = Tensor(A.rows, r);
        for (int s = 0; s < A.rows; ++s)
            for (int i = 0; i < r; ++i) {
                double acc = 0.0;
                for (int j = 0; j < d; ++j) acc += A.at(s, i * d + j) * W.at(s, j);
                n.value.at(s, i) = acc;
            }
        n.needs_grad = needs(a) || needs(w);
        return push(std::move(n), "contract_dw");
    }

    // Piecewise-constant branch select: a >= 0 picks hi, otherwise lo.
    // Carries no derivative (subgradient selection through indicators).
    NodeId select_sign(NodeId a, double hi, double lo) {
        Node n;
        n.op = OpKind::kSelectSign;
        n.a = a;
        n.c0 = hi;
        n.c1 = lo;
        n.value = val(a);
        for (double& x : n.value.v) x = x >= 0.0 ? hi : lo;
        n.needs_grad = false;
        return push(std::move(n), "select_sign");
    }

    // Rows of x hold flattened (n x m) samples.
    NodeId per_sample_lmul(NodeId mat, NodeId x, int n_, int m_) {
        const Tensor& A = val(mat);
        const Tensor& X = val(x);
        if (X.cols != A.cols * m_ || A.rows != n_)
            throw TapeError("per_sample_lmul: shape mismatch");
        Node n;
        n.op = OpKind::kPerSampleLMul;
        n.a = mat;
        n.b = x;
        n.idx = {n_, m_};
        const int k = A.cols;
        n.value = Tensor(X.rows, n_ * m_);
        for (int s = 0; s < X.rows; ++s)
            for (int i = 0; i < n_; ++i)
                for (int j = 0; j < m_; ++j) {
                    double acc = 0.0;
                    for (int l = 0; l < k; ++l) acc += A.at(i, l) * X.at(s, l * m_ + j);
                    n.value.at(s, i * m_ + j) = acc;
                }
        n.needs_grad = needs(mat) || needs(x);
        return push(std::move(n), "per_sample_lmul");
    }
    NodeId per_sample_rmul(NodeId x, NodeId mat, int n_, int m_) {
        const Tensor& X = val(x);
        const Tensor& A = val(mat);
        if (X.cols != n_ * A.rows || A.cols != m_)
            throw TapeError("per_sample_rmul: shape mismatch");
        Node n;
        n.op = OpKind::kPerSampleRMul;
        n.a = x;
        n.b = mat;
        n.idx = {n_, m_};
        const int k = A.rows;
        n.value = Tensor(X.rows, n_ * m_);
        for (int s = 0; s < X.rows; ++s)
            for (int i = 0; i < n_; ++i)
                for (int j = 0; j < m_; ++j) {
                    double acc = 0.0;
                    for (int l = 0; l < k; ++l) acc += X.at(s, i * k + l) * A.at(l, j);
                    n.value.at(s, i * m_ + j) = acc;
                }
        n.needs_grad = needs(x) || needs(mat);
        return push(std::move(n), "per_sample_rmul");
    }
    NodeId per_sample_transpose(NodeId x, int n_, int m_) {
        const Tensor& X = val(x);
        if (X.cols != n_ * m_) throw TapeError("per_sample_transpose: shape mismatch");
        Node n;
        n.op = OpKind::kPerSampleTranspose;
        n.a = x;
        n.idx = {n_, m_};
        n.value = Tensor(X.rows, n_ * m_);
        for (int s = 0; s < X.rows; ++s)
            for (int i = 0; i < n_; ++i)
                for (int j = 0; j < m_; ++j) n.value.at(s, j * n_ + i) = X.at(s, i * m_ + j);
        n.needs_grad = needs(x);
        return push(std::move(n), "per_sample_transpose");
    }
    // (X + X^T)/2 on each flattened (n x n) sample.
    NodeId per_sample_symmetrize(NodeId x, int n_) {
        return scale(add(x, per_sample_transpose(x, n_, n_)), 0.5);
    }

    // Packed upper triangle (row-major, length n(n+1)/2) -> full symmetric 1x(n*n).
    NodeId sym_expand(NodeId packed, int n_) {
        const Tensor& P = val(packed);
        if (P.rows != 1 || P.cols != n_ * (n_ + 1) / 2)
            throw TapeError("sym_expand: packed length mismatch");
        Node n;
        n.op = OpKind::kSymExpand;
        n.a = packed;
        n.idx = {n_};
        n.value = Tensor(1, n_ * n_);
        int k = 0;
        for (int i = 0; i < n_; ++i)
            for (int j = i; j < n_; ++j, ++k) {
                n.value.at(0, i * n_ + j) = P.at(0, k);
                n.value.at(0, j * n_ + i) = P.at(0, k);
            }
        n.needs_grad = needs(packed);
        return push(std::move(n), "sym_expand");
    }

    // --- access ---------------------------------------------------------------
    const Tensor& val(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    std::size_t size() const { return nodes_.size(); }
    bool needs(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    // --- backward ---------------------------------------------------------------
    // Returns gradients indexed by node id; untouched differentiable leafs
    // get zeros of their own shape.
    class Gradients {
      public:
        explicit Gradients(const Tape* tape) : tape_(tape), g_(tape->size()) {}
        const Tensor& at(NodeId id) {
            Tensor& t = g_[static_cast<std::size_t>(id)];
            if (t.numel() == 0) {
                const Tensor& v = tape_->val(id);
                t = Tensor(v.rows, v.cols);
            }
            return t;
        }
        Tensor& slot(NodeId id) { return g_[static_cast<std::size_t>(id)]; }
        bool touched(NodeId id) const { return g_[static_cast<std::size_t>(id)].numel() != 0; }

      private:
        const Tape* tape_;
        std::vector<Tensor> g_;
    };

    Gradients backward(NodeId output) const {
        if (val(output).numel() != 1) throw TapeError("backward: output must be scalar");
        Gradients grads(this);
        grads.slot(output) = Tensor::scalar(1.0);
        for (NodeId id = output; id >= 0; --id) {
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.needs_grad || !grads.touched(id)) continue;
            if (n.op == OpKind::kLeaf) continue;
            propagate(n, grads.slot(id), grads);
        }
        return grads;
    }

  private:
    struct Node {
        OpKind op = OpKind::kLeaf;
        NodeId a = -1, b = -1;
        double c0 = 0.0, c1 = 0.0;
        std::vector<int> idx;
        Tensor value;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;
    bool check_finite_;

    NodeId push(Node n, const char* opname) {
        if (check_finite_ && !n.value.all_finite())
            throw TapeError(std::string("non-finite result in op '") + opname + "'");
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    Node unary(OpKind op, NodeId a) {
        Node n;
        n.op = op;
        n.a = a;
        n.value = val(a);
        n.needs_grad = needs(a);
        return n;
    }

    NodeId binary_same(OpKind op, NodeId a, NodeId b) {
        const Tensor& A = val(a);
        const Tensor& B = val(b);
        if (!A.same_shape(B)) throw TapeError("elementwise op: shape mismatch");
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.value = A;
        switch (op) {
            case OpKind::kAdd:
                for (std::size_t i = 0; i < B.numel(); ++i) n.value.v[i] += B.v[i];
                break;
            case OpKind::kSub:
                for (std::size_t i = 0; i < B.numel(); ++i) n.value.v[i] -= B.v[i];
                break;
            case OpKind::kMul:
                for (std::size_t i = 0; i < B.numel(); ++i) n.value.v[i] *= B.v[i];
                break;
            default:
                throw TapeError("binary_same: bad op");
        }
        n.needs_grad = needs(a) || needs(b);
        return push(std::move(n), "elementwise");
    }

    NodeId rowwise(OpKind op, NodeId a, NodeId r) {
        const Tensor& A = val(a);
        const Tensor& R = val(r);
        if (R.rows != 1 || R.cols != A.cols) throw TapeError("rowwise op: shape mismatch");
        Node n;
        n.op = op;
        n.a = a;
        n.b = r;
        n.value = A;
        for (int i = 0; i < A.rows; ++i)
            for (int j = 0; j < A.cols; ++j) {
                if (op == OpKind::kAddRow)
                    n.value.at(i, j) += R.at(0, j);
                else
                    n.value.at(i, j) *= R.at(0, j);
            }
        n.needs_grad = needs(a) || needs(r);
        return push(std::move(n), "rowwise");
    }

    static void matmul_accum(const Tensor& A, const Tensor& B, Tensor& C, bool ta, bool tb) {
        // C += op(A) . op(B) with optional transposes, row-major friendly.
        const int m = ta ? A.cols : A.rows;
        const int k = ta ? A.rows : A.cols;
        const int n2 = tb ? B.rows : B.cols;
        for (int i = 0; i < m; ++i) {
            double* crow = &C.v[static_cast<std::size_t>(i) * n2];
            for (int l = 0; l < k; ++l) {
                const double aval = ta ? A.at(l, i) : A.at(i, l);
                if (aval == 0.0) continue;
                if (!tb) {
                    const double* brow = &B.v[static_cast<std::size_t>(l) * n2];
                    for (int j = 0; j < n2; ++j) crow[j] += aval * brow[j];
                } else {
                    for (int j = 0; j < n2; ++j) crow[j] += aval * B.at(j, l);
                }
            }
        }
    }

    void accum_into(Gradients& grads, NodeId id, const std::function<void(Tensor&)>& fn) const {
        if (id < 0 || !needs(id)) return;
        Tensor& g = grads.slot(id);
        if (g.numel() == 0) {
            const Tensor& v = val(id);
            g = Tensor(v.rows, v.cols);
        }
        fn(g);
    }

    void propagate(const Node& n, const Tensor& g, Gradients& grads) const {
        switch (n.op) {
            case OpKind::kLeaf:
                break;
            case OpKind::kAdd:
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] += g.v[i];
                });
                accum_into(grads, n.b, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] += g.v[i];
                });
                break;
            case OpKind::kSub:
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] += g.v[i];
                });
                accum_into(grads, n.b, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] -= g.v[i];
                });
                break;
            case OpKind::kMul: {
                const Tensor& A = val(n.a);
                const Tensor& B = val(n.b);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] += g.v[i] * B.v[i];
                });
                accum_into(grads, n.b, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] += g.v[i] * A.v[i];
                });
                break;
            }
            case OpKind::kScale:
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] += n.c0 * g.v[i];
                });
                break;
            case OpKind::kAddScalar:
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] += g.v[i];
                });
                break;
            case OpKind::kMatmul: {
                const Tensor& A = val(n.a);
                const Tensor& B = val(n.b);
                accum_into(grads, n.a, [&](Tensor& t) { matmul_accum(g, B, t, false, true); });
                accum_into(grads, n.b, [&](Tensor& t) { matmul_accum(A, g, t, true, false); });
                break;
            }
            case OpKind::kRelu: {
                const Tensor& A = val(n.a);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        if (A.v[i] > 0.0) t.v[i] += g.v[i];
                });
                break;
            }
            case OpKind::kPow: {
                const Tensor& A = val(n.a);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        t.v[i] += g.v[i] * n.c0 * std::pow(A.v[i], n.c0 - 1.0);
                });
                break;
            }
            case OpKind::kLog: {
                const Tensor& A = val(n.a);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] += g.v[i] / A.v[i];
                });
                break;
            }
            case OpKind::kExp:
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] += g.v[i] * n.value.v[i];
                });
                break;
            case OpKind::kSin: {
                const Tensor& A = val(n.a);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        t.v[i] += g.v[i] * std::cos(A.v[i]);
                });
                break;
            }
            case OpKind::kCos: {
                const Tensor& A = val(n.a);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        t.v[i] -= g.v[i] * std::sin(A.v[i]);
                });
                break;
            }
            case OpKind::kSum:
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (double& x : t.v) x += g.v[0];
                });
                break;
            case OpKind::kMean: {
                const double w = 1.0 / static_cast<double>(val(n.a).numel());
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (double& x : t.v) x += g.v[0] * w;
                });
                break;
            }
            case OpKind::kSumCols: {
                const Tensor& A = val(n.a);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int i = 0; i < A.rows; ++i)
                        for (int j = 0; j < A.cols; ++j) t.at(i, j) += g.at(i, 0);
                });
                break;
            }
            case OpKind::kMeanRows: {
                const Tensor& A = val(n.a);
                const double w = 1.0 / A.rows;
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int i = 0; i < A.rows; ++i)
                        for (int j = 0; j < A.cols; ++j) t.at(i, j) += g.at(0, j) * w;
                });
                break;
            }
            case OpKind::kAddRow: {
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (std::size_t i = 0; i < g.numel(); ++i) t.v[i] += g.v[i];
                });
                accum_into(grads, n.b, [&](Tensor& t) {
                    for (int i = 0; i < g.rows; ++i)
                        for (int j = 0; j < g.cols; ++j) t.at(0, j) += g.at(i, j);
                });
                break;
            }
            case OpKind::kMulRow: {
                const Tensor& A = val(n.a);
                const Tensor& R = val(n.b);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int i = 0; i < g.rows; ++i)
                        for (int j = 0; j < g.cols; ++j) t.at(i, j) += g.at(i, j) * R.at(0, j);
                });
                accum_into(grads, n.b, [&](Tensor& t) {
                    for (int i = 0; i < g.rows; ++i)
                        for (int j = 0; j < g.cols; ++j) t.at(0, j) += g.at(i, j) * A.at(i, j);
                });
                break;
            }
            case OpKind::kBroadcastRows:
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int i = 0; i < g.rows; ++i)
                        for (int j = 0; j < g.cols; ++j) t.at(0, j) += g.at(i, j);
                });
                break;
            case OpKind::kBroadcastCols:
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int i = 0; i < g.rows; ++i)
                        for (int j = 0; j < g.cols; ++j) t.at(i, 0) += g.at(i, j);
                });
                break;
            case OpKind::kConcatCols: {
                const Tensor& A = val(n.a);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int i = 0; i < g.rows; ++i)
                        for (int j = 0; j < A.cols; ++j) t.at(i, j) += g.at(i, j);
                });
                accum_into(grads, n.b, [&](Tensor& t) {
                    for (int i = 0; i < g.rows; ++i)
                        for (int j = 0; j < t.cols; ++j) t.at(i, j) += g.at(i, A.cols + j);
                });
                break;
            }
            case OpKind::kSelectRow: {
                const int r = static_cast<int>(n.c0);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int j = 0; j < g.cols; ++j) t.at(r, j) += g.at(0, j);
                });
                break;
            }
            case OpKind::kGatherCols:
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int i = 0; i < g.rows; ++i)
                        for (std::size_t j = 0; j < n.idx.size(); ++j)
                            t.at(i, n.idx[j]) += g.at(i, static_cast<int>(j));
                });
                break;
            case OpKind::kScatterDiag: {
                const int dim = n.idx[0];
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int i = 0; i < g.rows; ++i)
                        for (int j = 0; j < dim; ++j) t.at(i, j) += g.at(i, j * dim + j);
                });
                break;
            }
            case OpKind::kContractDw: {
                const int r = n.idx[0], d = n.idx[1];
                const Tensor& A = val(n.a);
                const Tensor& W = val(n.b);
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int s = 0; s < g.rows; ++s)
                        for (int i = 0; i < r; ++i)
                            for (int j = 0; j < d; ++j)
                                t.at(s, i * d + j) += g.at(s, i) * W.at(s, j);
                });
                accum_into(grads, n.b, [&](Tensor& t) {
                    for (int s = 0; s < g.rows; ++s)
                        for (int j = 0; j < d; ++j) {
                            double acc = 0.0;
                            for (int i = 0; i < r; ++i) acc += g.at(s, i) * A.at(s, i * d + j);
                            t.at(s, j) += acc;
                        }
                });
                break;
            }
            case OpKind::kSelectSign:
                break;
            case OpKind::kPerSampleLMul: {
                const int nn = n.idx[0], mm = n.idx[1];
                const Tensor& A = val(n.a);
                const Tensor& X = val(n.b);
                const int k = A.cols;
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int s = 0; s < g.rows; ++s)
                        for (int i = 0; i < nn; ++i)
                            for (int l = 0; l < k; ++l) {
                                double acc = 0.0;
                                for (int j = 0; j < mm; ++j)
                                    acc += g.at(s, i * mm + j) * X.at(s, l * mm + j);
                                t.at(i, l) += acc;
                            }
                });
                accum_into(grads, n.b, [&](Tensor& t) {
                    for (int s = 0; s < g.rows; ++s)
                        for (int l = 0; l < k; ++l)
                            for (int j = 0; j < mm; ++j) {
                                double acc = 0.0;
                                for (int i = 0; i < nn; ++i)
                                    acc += A.at(i, l) * g.at(s, i * mm + j);
                                t.at(s, l * mm + j) += acc;
                            }
                });
                break;
            }
            case OpKind::kPerSampleRMul: {
                const int nn = n.idx[0], mm = n.idx[1];
                const Tensor& X = val(n.a);
                const Tensor& A = val(n.b);
                const int k = A.rows;
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int s = 0; s < g.rows; ++s)
                        for (int i = 0; i < nn; ++i)
                            for (int l = 0; l < k; ++l) {
                                double acc = 0.0;
                                for (int j = 0; j < mm; ++j)
                                    acc += g.at(s, i * mm + j) * A.at(l, j);
                                t.at(s, i * k + l) += acc;
                            }
                });
                accum_into(grads, n.b, [&](Tensor& t) {
                    for (int s = 0; s < g.rows; ++s)
                        for (int l = 0; l < k; ++l)
                            for (int j = 0; j < mm; ++j) {
                                double acc = 0.0;
                                for (int i = 0; i < nn; ++i)
                                    acc += X.at(s, i * k + l) * g.at(s, i * mm + j);
                                t.at(l, j) += acc;
                            }
                });
                break;
            }
            case OpKind::kPerSampleTranspose: {
                const int nn = n.idx[0], mm = n.idx[1];
                accum_into(grads, n.a, [&](Tensor& t) {
                    for (int s = 0; s < g.rows; ++s)
                        for (int i = 0; i < nn; ++i)
                            for (int j = 0; j < mm; ++j)
                                t.at(s, i * mm + j) += g.at(s, j * nn + i);
                });
                break;
            }
            case OpKind::kSymExpand: {
                const int nn = n.idx[0];
                accum_into(grads, n.a, [&](Tensor& t) {
                    int k = 0;
                    for (int i = 0; i < nn; ++i)
                        for (int j = i; j < nn; ++j, ++k) {
                            t.at(0, k) += g.at(0, i * nn + j);
                            if (j != i) t.at(0, k) += g.at(0, j * nn + i);
                        }
                });
                break;
            }
        }
    }
};

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
inline double finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                                const std::vector<double>& x,
                                const std::vector<double>& analytic_grad, double step) {
    if (x.size() != analytic_grad.size())
        throw TapeError("finite_diff_check: gradient length mismatch");
    double worst = 0.0;
    std::vector<double> xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        xp[i] = x[i] + step;
        const double fp = f(xp);
        xp[i] = x[i] - step;
        const double fm = f(xp);
        xp[i] = x[i];
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw TapeError("finite_diff_check: non-finite evaluation");
        const double fd = (fp - fm) / (2.0 * step);
        const double denom = std::max(1.0, std::abs(analytic_grad[i]));
        worst = std::max(worst, std::abs(analytic_grad[i] - fd) / denom);
    }
    return worst;
}

}  // namespace smp
