#include "ddl/tape.hpp"

#include <cmath>
#include <cstring>

namespace ddl {

const char* op_name(Op op) {
    switch (op) {
        case Op::leaf: return "leaf";
        case Op::constant: return "constant";
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::divide: return "div";
        case Op::neg: return "neg";
        case Op::exp_op: return "exp";
        case Op::log_op: return "log";
        case Op::sqrt_op: return "sqrt";
        case Op::sin_op: return "sin";
        case Op::cos_op: return "cos";
        case Op::sigmoid: return "sigmoid";
        case Op::silu: return "silu";
        case Op::softplus: return "softplus";
        case Op::pow_op: return "pow";
        case Op::add_const: return "add_const";
        case Op::mul_const: return "mul_const";
        case Op::pow_const: return "pow_const";
        case Op::matmul: return "matmul";
        case Op::transpose: return "transpose";
        case Op::bmm: return "bmm";
        case Op::btranspose: return "btranspose";
        case Op::conv1d: return "conv1d";
        case Op::conv1d_dx: return "conv1d_dx";
        case Op::conv1d_dw: return "conv1d_dw";
        case Op::expand_cols: return "expand_cols";
        case Op::row_sum: return "row_sum";
        case Op::expand_rows: return "expand_rows";
        case Op::col_sum: return "col_sum";
        case Op::chan_broadcast: return "chan_broadcast";
        case Op::chan_sum: return "chan_sum";
        case Op::sum_all: return "sum_all";
        case Op::broadcast_all: return "broadcast_all";
        case Op::row_max: return "row_max";
        case Op::reshape: return "reshape";
        case Op::detach: return "detach";
        case Op::gather_rows: return "gather_rows";
        case Op::scatter_rows: return "scatter_rows";
        case Op::upsample2: return "upsample2";
        case Op::pair_sum2: return "pair_sum2";
    }
    return "?";
}

namespace {

[[noreturn]] void fail(Op op, const std::string& what) {
    throw std::runtime_error(std::string(op_name(op)) + ": " + what);
}

template <class F> void with_dtype(DType dt, F&& f) {
    if (dt == DType::f32)
        f(float{});
    else
        f(double{});
}

template <class T, class F>
void map_unary(const Tensor& a, Tensor& out, F f) {
    auto in = a.data<T>();
    auto o = out.data<T>();
    for (size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
}

template <class T> T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T> T softplus_scalar(T x) {
    if (x > T(30)) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

}  // namespace

void Tape::check_same_tape(Value v) const {
    if (!v.ok() || v.tape != this || v.id >= static_cast<int>(nodes_.size()))
        throw std::runtime_error("tape: value does not belong to this tape");
}

int Tape::push(Node n) {
    if (n.op != Op::leaf && n.op != Op::constant) n.val = eval_op(n);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
}

Value Tape::leaf(Tensor v, bool requires_grad, std::string name) {
    if (!v.defined()) throw std::runtime_error("leaf: undefined tensor");
    Node n;
    n.op = Op::leaf;
    n.requires_grad = requires_grad;
    n.val = std::move(v);
    n.name = std::move(name);
    return {this, push(std::move(n))};
}

Value Tape::constant(Tensor v) {
    if (!v.defined()) throw std::runtime_error("constant: undefined tensor");
    Node n;
    n.op = Op::constant;
    n.requires_grad = false;
    n.val = std::move(v);
    return {this, push(std::move(n))};
}

Value Tape::const_scalar(double v, DType dt) { return constant(Tensor::scalar(v, dt)); }

Value Tape::binary_ew(Op op, Value a, Value b) {
    check_same_tape(a);
    check_same_tape(b);
    if (a.dtype() != b.dtype()) fail(op, "dtype mismatch (" + std::string(dtype_name(a.dtype())) + " vs " + dtype_name(b.dtype()) + ")");
    bool a1 = a.numel() == 1, b1 = b.numel() == 1;
    if (!a1 && !b1 && a.dims() != b.dims())
        fail(op, "shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    Node n;
    n.op = op;
    n.in0 = a.id;
    n.in1 = b.id;
    n.requires_grad = a.requires_grad() || b.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::unary(Op op, Value a, double c) {
    check_same_tape(a);
    Node n;
    n.op = op;
    n.in0 = a.id;
    n.c0 = c;
    n.requires_grad = a.requires_grad();
    if (op == Op::row_max || op == Op::detach) n.requires_grad = false;
    return {this, push(std::move(n))};
}

Value Tape::add(Value a, Value b) { return binary_ew(Op::add, a, b); }
Value Tape::sub(Value a, Value b) { return binary_ew(Op::sub, a, b); }
Value Tape::mul(Value a, Value b) { return binary_ew(Op::mul, a, b); }
Value Tape::div(Value a, Value b) { return binary_ew(Op::divide, a, b); }
Value Tape::pow(Value a, Value b) { return binary_ew(Op::pow_op, a, b); }
Value Tape::neg(Value a) { return unary(Op::neg, a); }
Value Tape::exp(Value a) { return unary(Op::exp_op, a); }
Value Tape::log(Value a) { return unary(Op::log_op, a); }
Value Tape::sqrt(Value a) { return unary(Op::sqrt_op, a); }
Value Tape::sin(Value a) { return unary(Op::sin_op, a); }
Value Tape::cos(Value a) { return unary(Op::cos_op, a); }
Value Tape::sigmoid(Value a) { return unary(Op::sigmoid, a); }
Value Tape::silu(Value a) { return unary(Op::silu, a); }
Value Tape::softplus(Value a) { return unary(Op::softplus, a); }
Value Tape::add_c(Value a, double c) { return unary(Op::add_const, a, c); }
Value Tape::mul_c(Value a, double c) { return unary(Op::mul_const, a, c); }
Value Tape::pow_c(Value a, double c) { return unary(Op::pow_const, a, c); }
Value Tape::detach(Value a) { return unary(Op::detach, a); }

Value Tape::matmul(Value a, Value b) {
    check_same_tape(a);
    check_same_tape(b);
    if (a.dtype() != b.dtype()) fail(Op::matmul, "dtype mismatch");
    if (a.dims().size() != 2 || b.dims().size() != 2) fail(Op::matmul, "expects rank-2 inputs");
    if (a.dims()[1] != b.dims()[0])
        fail(Op::matmul, "inner dims differ " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    Node n;
    n.op = Op::matmul;
    n.in0 = a.id;
    n.in1 = b.id;
    n.requires_grad = a.requires_grad() || b.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::transpose(Value a) {
    check_same_tape(a);
    if (a.dims().size() != 2) fail(Op::transpose, "expects rank-2 input");
    return unary(Op::transpose, a);
}

Value Tape::bmm(Value a, Value b) {
    check_same_tape(a);
    check_same_tape(b);
    if (a.dtype() != b.dtype()) fail(Op::bmm, "dtype mismatch");
    if (a.dims().size() != 3 || b.dims().size() != 3) fail(Op::bmm, "expects rank-3 inputs");
    if (a.dims()[0] != b.dims()[0] || a.dims()[2] != b.dims()[1])
        fail(Op::bmm, "shape mismatch " + shape_str(a.dims()) + " vs " + shape_str(b.dims()));
    Node n;
    n.op = Op::bmm;
    n.in0 = a.id;
    n.in1 = b.id;
    n.requires_grad = a.requires_grad() || b.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::btranspose(Value a) {
    check_same_tape(a);
    if (a.dims().size() != 3) fail(Op::btranspose, "expects rank-3 input");
    return unary(Op::btranspose, a);
}

Value Tape::conv1d(Value x, Value w, int64_t stride, int64_t pad) {
    check_same_tape(x);
    check_same_tape(w);
    if (x.dtype() != w.dtype()) fail(Op::conv1d, "dtype mismatch");
    if (x.dims().size() == 2) {
        Value x3 = reshape(x, {1, x.dims()[0], x.dims()[1]});
        Value y = conv1d(x3, w, stride, pad);
        return reshape(y, {y.dims()[1], y.dims()[2]});
    }
    if (x.dims().size() != 3 || w.dims().size() != 3) fail(Op::conv1d, "expects x [B×C×L], w [Cout×Cin×K]");
    if (x.dims()[1] != w.dims()[1]) fail(Op::conv1d, "channel mismatch");
    if (stride < 1 || pad < 0) fail(Op::conv1d, "bad stride/pad");
    int64_t l = x.dims()[2], k = w.dims()[2];
    if (l + 2 * pad < k) fail(Op::conv1d, "kernel larger than padded input");
    Node n;
    n.op = Op::conv1d;
    n.in0 = x.id;
    n.in1 = w.id;
    n.a0 = stride;
    n.a1 = pad;
    n.requires_grad = x.requires_grad() || w.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::conv1d_dx(Value dy, Value w, int64_t stride, int64_t pad, int64_t l_in) {
    check_same_tape(dy);
    check_same_tape(w);
    if (dy.dtype() != w.dtype()) fail(Op::conv1d_dx, "dtype mismatch");
    if (dy.dims().size() != 3 || w.dims().size() != 3) fail(Op::conv1d_dx, "expects rank-3 inputs");
    if (dy.dims()[1] != w.dims()[0]) fail(Op::conv1d_dx, "channel mismatch");
    Node n;
    n.op = Op::conv1d_dx;
    n.in0 = dy.id;
    n.in1 = w.id;
    n.a0 = stride;
    n.a1 = pad;
    n.a2 = l_in;
    n.requires_grad = dy.requires_grad() || w.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::conv1d_dw(Value x, Value dy, int64_t stride, int64_t pad, int64_t k) {
    check_same_tape(x);
    check_same_tape(dy);
    if (x.dtype() != dy.dtype()) fail(Op::conv1d_dw, "dtype mismatch");
    if (x.dims().size() != 3 || dy.dims().size() != 3) fail(Op::conv1d_dw, "expects rank-3 inputs");
    if (x.dims()[0] != dy.dims()[0]) fail(Op::conv1d_dw, "batch mismatch");
    Node n;
    n.op = Op::conv1d_dw;
    n.in0 = x.id;
    n.in1 = dy.id;
    n.a0 = stride;
    n.a1 = pad;
    n.a2 = k;
    n.requires_grad = x.requires_grad() || dy.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::expand_cols(Value v, int64_t n_) {
    check_same_tape(v);
    if (v.dims().size() != 1) fail(Op::expand_cols, "expects rank-1 input");
    if (n_ < 1) fail(Op::expand_cols, "bad column count");
    Node n;
    n.op = Op::expand_cols;
    n.in0 = v.id;
    n.a0 = n_;
    n.requires_grad = v.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::row_sum(Value a) {
    check_same_tape(a);
    if (a.dims().size() != 2) fail(Op::row_sum, "expects rank-2 input");
    return unary(Op::row_sum, a);
}

Value Tape::row_mean(Value a) {
    Value s = row_sum(a);
    return mul_c(s, 1.0 / static_cast<double>(a.dims()[1]));
}

Value Tape::expand_rows(Value v, int64_t n_) {
    check_same_tape(v);
    if (v.dims().size() != 1) fail(Op::expand_rows, "expects rank-1 input");
    if (n_ < 1) fail(Op::expand_rows, "bad row count");
    Node n;
    n.op = Op::expand_rows;
    n.in0 = v.id;
    n.a0 = n_;
    n.requires_grad = v.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::col_sum(Value a) {
    check_same_tape(a);
    if (a.dims().size() != 2) fail(Op::col_sum, "expects rank-2 input");
    return unary(Op::col_sum, a);
}

Value Tape::chan_broadcast(Value v, int64_t batch, int64_t len) {
    check_same_tape(v);
    if (v.dims().size() != 1) fail(Op::chan_broadcast, "expects rank-1 input");
    if (batch < 1 || len < 1) fail(Op::chan_broadcast, "bad dims");
    Node n;
    n.op = Op::chan_broadcast;
    n.in0 = v.id;
    n.a0 = batch;
    n.a1 = len;
    n.requires_grad = v.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::chan_sum(Value a) {
    check_same_tape(a);
    if (a.dims().size() != 3) fail(Op::chan_sum, "expects rank-3 input");
    return unary(Op::chan_sum, a);
}

Value Tape::sum_all(Value a) {
    check_same_tape(a);
    return unary(Op::sum_all, a);
}

Value Tape::mean_all(Value a) { return mul_c(sum_all(a), 1.0 / static_cast<double>(a.numel())); }

Value Tape::broadcast_all(Value s, std::vector<int64_t> dims) {
    check_same_tape(s);
    if (s.numel() != 1) fail(Op::broadcast_all, "expects a single-element input");
    Node n;
    n.op = Op::broadcast_all;
    n.in0 = s.id;
    n.requires_grad = s.requires_grad();
    n.val = Tensor::zeros(std::move(dims), s.dtype());  // carries target dims for eval
    return {this, push(std::move(n))};
}

Value Tape::row_max(Value a) {
    check_same_tape(a);
    if (a.dims().size() != 2) fail(Op::row_max, "expects rank-2 input");
    return unary(Op::row_max, a);
}

Value Tape::reshape(Value a, std::vector<int64_t> dims) {
    check_same_tape(a);
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    if (n != a.numel()) fail(Op::reshape, "element count mismatch");
    Node nd;
    nd.op = Op::reshape;
    nd.in0 = a.id;
    nd.requires_grad = a.requires_grad();
    nd.val = a.val().reshaped(std::move(dims));
    nodes_.push_back(std::move(nd));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::gather_rows(Value table, std::vector<int32_t> idx) {
    check_same_tape(table);
    if (table.dims().size() != 2) fail(Op::gather_rows, "expects rank-2 table");
    for (int32_t i : idx)
        if (i < 0 || i >= table.dims()[0]) fail(Op::gather_rows, "row index out of range");
    Node n;
    n.op = Op::gather_rows;
    n.in0 = table.id;
    n.idx = std::move(idx);
    n.requires_grad = table.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::scatter_rows(Value src, std::vector<int32_t> idx, int64_t rows) {
    check_same_tape(src);
    if (src.dims().size() != 2) fail(Op::scatter_rows, "expects rank-2 input");
    if (static_cast<int64_t>(idx.size()) != src.dims()[0]) fail(Op::scatter_rows, "index count mismatch");
    for (int32_t i : idx)
        if (i < 0 || i >= rows) fail(Op::scatter_rows, "row index out of range");
    Node n;
    n.op = Op::scatter_rows;
    n.in0 = src.id;
    n.idx = std::move(idx);
    n.a0 = rows;
    n.requires_grad = src.requires_grad();
    return {this, push(std::move(n))};
}

Value Tape::upsample2(Value a) {
    check_same_tape(a);
    if (a.dims().size() != 3) fail(Op::upsample2, "expects rank-3 input");
    return unary(Op::upsample2, a);
}

Value Tape::pair_sum2(Value a) {
    check_same_tape(a);
    if (a.dims().size() != 3) fail(Op::pair_sum2, "expects rank-3 input");
    if (a.dims()[2] % 2 != 0) fail(Op::pair_sum2, "length must be even");
    return unary(Op::pair_sum2, a);
}

Value Tape::zeros_like(Value a) {
    check_same_tape(a);
    return constant(Tensor::zeros(a.dims(), a.dtype()));
}

Tensor Tape::eval_op(const Node& n) const {
    const Tensor* pa = n.in0 >= 0 ? &nodes_[static_cast<size_t>(n.in0)].val : nullptr;
    const Tensor* pb = n.in1 >= 0 ? &nodes_[static_cast<size_t>(n.in1)].val : nullptr;
    Tensor out;

    auto binary = [&](auto f) {
        const Tensor& A = *pa;
        const Tensor& B = *pb;
        const std::vector<int64_t>& od = A.numel() == 1 && B.numel() != 1 ? B.dims() : A.dims();
        out = Tensor::zeros(od, A.dtype());
        with_dtype(A.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto a = A.data<T>();
            auto b = B.data<T>();
            auto o = out.data<T>();
            if (A.numel() == 1 && B.numel() != 1) {
                T av = a[0];
                for (size_t i = 0; i < b.size(); ++i) o[i] = f(av, b[i]);
            } else if (B.numel() == 1 && A.numel() != 1) {
                T bv = b[0];
                for (size_t i = 0; i < a.size(); ++i) o[i] = f(a[i], bv);
            } else {
                for (size_t i = 0; i < a.size(); ++i) o[i] = f(a[i], b[i]);
            }
        });
    };

    auto unary_ew = [&](auto f) {
        const Tensor& A = *pa;
        out = Tensor::zeros(A.dims(), A.dtype());
        with_dtype(A.dtype(), [&](auto tag) {
            using T = decltype(tag);
            map_unary<T>(A, out, f);
        });
    };

    switch (n.op) {
        case Op::leaf:
        case Op::constant:
            return n.val;
        case Op::add:
            binary([](auto a, auto b) { return a + b; });
            break;
        case Op::sub:
            binary([](auto a, auto b) { return a - b; });
            break;
        case Op::mul:
            binary([](auto a, auto b) { return a * b; });
            break;
        case Op::divide:
            binary([](auto a, auto b) { return a / b; });
            break;
        case Op::pow_op: {
            for (int64_t i = 0; i < pa->numel(); ++i)
                if (pa->at(i) <= 0.0) fail(Op::pow_op, "base must be positive");
            binary([](auto a, auto b) { return std::pow(a, b); });
            break;
        }
        case Op::neg:
            unary_ew([](auto x) { return -x; });
            break;
        case Op::exp_op:
            unary_ew([](auto x) { return std::exp(x); });
            break;
        case Op::log_op: {
            for (int64_t i = 0; i < pa->numel(); ++i)
                if (pa->at(i) <= 0.0) fail(Op::log_op, "non-positive input");
            unary_ew([](auto x) { return std::log(x); });
            break;
        }
        case Op::sqrt_op: {
            for (int64_t i = 0; i < pa->numel(); ++i)
                if (pa->at(i) < 0.0) fail(Op::sqrt_op, "negative input");
            unary_ew([](auto x) { return std::sqrt(x); });
            break;
        }
        case Op::sin_op:
            unary_ew([](auto x) { return std::sin(x); });
            break;
        case Op::cos_op:
            unary_ew([](auto x) { return std::cos(x); });
            break;
        case Op::sigmoid:
            unary_ew([](auto x) { return sigmoid_scalar(x); });
            break;
        case Op::silu:
            unary_ew([](auto x) { return x * sigmoid_scalar(x); });
            break;
        case Op::softplus:
            unary_ew([](auto x) { return softplus_scalar(x); });
            break;
        case Op::add_const: {
            double c = n.c0;
            unary_ew([c](auto x) { return x + decltype(x)(c); });
            break;
        }
        case Op::mul_const: {
            double c = n.c0;
            unary_ew([c](auto x) { return x * decltype(x)(c); });
            break;
        }
        case Op::pow_const: {
            for (int64_t i = 0; i < pa->numel(); ++i)
                if (pa->at(i) <= 0.0) fail(Op::pow_const, "base must be positive");
            double c = n.c0;
            unary_ew([c](auto x) { return std::pow(x, decltype(x)(c)); });
            break;
        }
        case Op::matmul: {
            int64_t m = pa->dims()[0], k = pa->dims()[1], nn = pb->dims()[1];
            out = Tensor::zeros({m, nn}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                const T* b = pb->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t i = 0; i < m; ++i) {
                    T* orow = o + i * nn;
                    for (int64_t l = 0; l < k; ++l) {
                        T av = a[i * k + l];
                        const T* brow = b + l * nn;
                        for (int64_t j = 0; j < nn; ++j) orow[j] += av * brow[j];
                    }
                }
            });
            break;
        }
        case Op::transpose: {
            int64_t m = pa->dims()[0], nn = pa->dims()[1];
            out = Tensor::zeros({nn, m}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < nn; ++j) o[j * m + i] = a[i * nn + j];
            });
            break;
        }
        case Op::bmm: {
            int64_t bsz = pa->dims()[0], m = pa->dims()[1], k = pa->dims()[2], nn = pb->dims()[2];
            out = Tensor::zeros({bsz, m, nn}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                const T* b = pb->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t bb = 0; bb < bsz; ++bb) {
                    const T* ab = a + bb * m * k;
                    const T* bbp = b + bb * k * nn;
                    T* ob = o + bb * m * nn;
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t l = 0; l < k; ++l) {
                            T av = ab[i * k + l];
                            for (int64_t j = 0; j < nn; ++j) ob[i * nn + j] += av * bbp[l * nn + j];
                        }
                }
            });
            break;
        }
        case Op::btranspose: {
            int64_t bsz = pa->dims()[0], m = pa->dims()[1], nn = pa->dims()[2];
            out = Tensor::zeros({bsz, nn, m}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t bb = 0; bb < bsz; ++bb)
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < nn; ++j) o[(bb * nn + j) * m + i] = a[(bb * m + i) * nn + j];
            });
            break;
        }
        case Op::conv1d: {
            int64_t bsz = pa->dims()[0], ci = pa->dims()[1], l = pa->dims()[2];
            int64_t co = pb->dims()[0], k = pb->dims()[2];
            int64_t s = n.a0, p = n.a1;
            int64_t lo = (l + 2 * p - k) / s + 1;
            out = Tensor::zeros({bsz, co, lo}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* x = pa->data<T>().data();
                const T* w = pb->data<T>().data();
                T* y = out.data<T>().data();
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t oc = 0; oc < co; ++oc) {
                        T* yrow = y + (b * co + oc) * lo;
                        for (int64_t c = 0; c < ci; ++c) {
                            const T* xrow = x + (b * ci + c) * l;
                            const T* wrow = w + (oc * ci + c) * k;
                            for (int64_t kk = 0; kk < k; ++kk) {
                                T wv = wrow[kk];
                                for (int64_t j = 0; j < lo; ++j) {
                                    int64_t i = j * s + kk - p;
                                    if (i >= 0 && i < l) yrow[j] += wv * xrow[i];
                                }
                            }
                        }
                    }
            });
            break;
        }
        case Op::conv1d_dx: {
            // adjoint of conv1d wrt x; in0 = dy [B×Co×Lo], in1 = w [Co×Ci×K]
            int64_t bsz = pa->dims()[0], co = pa->dims()[1], lo = pa->dims()[2];
            int64_t ci = pb->dims()[1], k = pb->dims()[2];
            int64_t s = n.a0, p = n.a1, l = n.a2;
            out = Tensor::zeros({bsz, ci, l}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* dy = pa->data<T>().data();
                const T* w = pb->data<T>().data();
                T* dx = out.data<T>().data();
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t oc = 0; oc < co; ++oc) {
                        const T* dyrow = dy + (b * co + oc) * lo;
                        for (int64_t c = 0; c < ci; ++c) {
                            T* dxrow = dx + (b * ci + c) * l;
                            const T* wrow = w + (oc * ci + c) * k;
                            for (int64_t kk = 0; kk < k; ++kk) {
                                T wv = wrow[kk];
                                for (int64_t j = 0; j < lo; ++j) {
                                    int64_t i = j * s + kk - p;
                                    if (i >= 0 && i < l) dxrow[i] += wv * dyrow[j];
                                }
                            }
                        }
                    }
            });
            break;
        }
        case Op::conv1d_dw: {
            // adjoint of conv1d wrt w; in0 = x [B×Ci×L], in1 = dy [B×Co×Lo]
            int64_t bsz = pa->dims()[0], ci = pa->dims()[1], l = pa->dims()[2];
            int64_t co = pb->dims()[1], lo = pb->dims()[2];
            int64_t s = n.a0, p = n.a1, k = n.a2;
            out = Tensor::zeros({co, ci, k}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* x = pa->data<T>().data();
                const T* dy = pb->data<T>().data();
                T* dw = out.data<T>().data();
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t oc = 0; oc < co; ++oc) {
                        const T* dyrow = dy + (b * co + oc) * lo;
                        for (int64_t c = 0; c < ci; ++c) {
                            const T* xrow = x + (b * ci + c) * l;
                            T* dwrow = dw + (oc * ci + c) * k;
                            for (int64_t kk = 0; kk < k; ++kk) {
                                T acc = T(0);
                                for (int64_t j = 0; j < lo; ++j) {
                                    int64_t i = j * s + kk - p;
                                    if (i >= 0 && i < l) acc += xrow[i] * dyrow[j];
                                }
                                dwrow[kk] += acc;
                            }
                        }
                    }
            });
            break;
        }
        case Op::expand_cols: {
            int64_t r = pa->dims()[0], c = n.a0;
            out = Tensor::zeros({r, c}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* v = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < c; ++j) o[i * c + j] = v[i];
            });
            break;
        }
        case Op::row_sum: {
            int64_t r = pa->dims()[0], c = pa->dims()[1];
            out = Tensor::zeros({r}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t i = 0; i < r; ++i) {
                    T acc = T(0);
                    for (int64_t j = 0; j < c; ++j) acc += a[i * c + j];
                    o[i] = acc;
                }
            });
            break;
        }
        case Op::expand_rows: {
            int64_t c = pa->dims()[0], r = n.a0;
            out = Tensor::zeros({r, c}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* v = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < c; ++j) o[i * c + j] = v[j];
            });
            break;
        }
        case Op::col_sum: {
            int64_t r = pa->dims()[0], c = pa->dims()[1];
            out = Tensor::zeros({c}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < c; ++j) o[j] += a[i * c + j];
            });
            break;
        }
        case Op::chan_broadcast: {
            int64_t c = pa->dims()[0], bsz = n.a0, l = n.a1;
            out = Tensor::zeros({bsz, c, l}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* v = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t cc = 0; cc < c; ++cc) {
                        T vv = v[cc];
                        T* row = o + (b * c + cc) * l;
                        for (int64_t j = 0; j < l; ++j) row[j] = vv;
                    }
            });
            break;
        }
        case Op::chan_sum: {
            int64_t bsz = pa->dims()[0], c = pa->dims()[1], l = pa->dims()[2];
            out = Tensor::zeros({c}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t b = 0; b < bsz; ++b)
                    for (int64_t cc = 0; cc < c; ++cc) {
                        const T* row = a + (b * c + cc) * l;
                        T acc = T(0);
                        for (int64_t j = 0; j < l; ++j) acc += row[j];
                        o[cc] += acc;
                    }
            });
            break;
        }
        case Op::sum_all: {
            out = Tensor::zeros({}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                T acc = T(0);
                for (int64_t i = 0; i < pa->numel(); ++i) acc += a[i];
                out.data<T>()[0] = acc;
            });
            break;
        }
        case Op::broadcast_all: {
            // handled inline in the builder (needs target dims)
            out = n.val;
            if (!out.defined()) fail(Op::broadcast_all, "missing dims");
            double v = pa->at(0);
            Tensor t = Tensor::zeros(out.dims(), pa->dtype());
            for (int64_t i = 0; i < t.numel(); ++i) t.set(i, v);
            out = std::move(t);
            break;
        }
        case Op::row_max: {
            int64_t r = pa->dims()[0], c = pa->dims()[1];
            out = Tensor::zeros({r}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t i = 0; i < r; ++i) {
                    T m = a[i * c];
                    for (int64_t j = 1; j < c; ++j) m = a[i * c + j] > m ? a[i * c + j] : m;
                    o[i] = m;
                }
            });
            break;
        }
        case Op::reshape:
            out = n.val.defined() ? pa->reshaped(n.val.dims()) : *pa;
            break;
        case Op::detach:
            out = *pa;
            break;
        case Op::gather_rows: {
            int64_t c = pa->dims()[1];
            int64_t b = static_cast<int64_t>(n.idx.size());
            out = Tensor::zeros({b, c}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* t = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t i = 0; i < b; ++i)
                    std::memcpy(o + i * c, t + static_cast<int64_t>(n.idx[static_cast<size_t>(i)]) * c,
                                sizeof(T) * static_cast<size_t>(c));
            });
            break;
        }
        case Op::scatter_rows: {
            int64_t c = pa->dims()[1];
            out = Tensor::zeros({n.a0, c}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* s = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (size_t i = 0; i < n.idx.size(); ++i) {
                    T* row = o + static_cast<int64_t>(n.idx[i]) * c;
                    const T* srow = s + static_cast<int64_t>(i) * c;
                    for (int64_t j = 0; j < c; ++j) row[j] += srow[j];
                }
            });
            break;
        }
        case Op::upsample2: {
            int64_t bsz = pa->dims()[0], c = pa->dims()[1], l = pa->dims()[2];
            out = Tensor::zeros({bsz, c, 2 * l}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t i = 0; i < bsz * c; ++i)
                    for (int64_t j = 0; j < l; ++j) {
                        o[i * 2 * l + 2 * j] = a[i * l + j];
                        o[i * 2 * l + 2 * j + 1] = a[i * l + j];
                    }
            });
            break;
        }
        case Op::pair_sum2: {
            int64_t bsz = pa->dims()[0], c = pa->dims()[1], l2 = pa->dims()[2];
            int64_t l = l2 / 2;
            out = Tensor::zeros({bsz, c, l}, pa->dtype());
            with_dtype(pa->dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* a = pa->data<T>().data();
                T* o = out.data<T>().data();
                for (int64_t i = 0; i < bsz * c; ++i)
                    for (int64_t j = 0; j < l; ++j) o[i * l + j] = a[i * l2 + 2 * j] + a[i * l2 + 2 * j + 1];
            });
            break;
        }
    }
    return out;
}

Value Tape::reduce_to(Value g, const std::vector<int64_t>& dims) {
    if (g.dims() == dims) return g;
    int64_t n = 1;
    for (int64_t d : dims) n *= d;
    if (n != 1) throw std::runtime_error("backward: cannot reduce gradient to target shape");
    return reshape(sum_all(g), dims);
}

void Tape::accum(Grads& g, int target, Value contrib) {
    if (target < 0) return;
    if (!nodes_[static_cast<size_t>(target)].requires_grad) return;
    int cur = g.node_of[static_cast<size_t>(target)];
    g.node_of[static_cast<size_t>(target)] = cur < 0 ? contrib.id : add(Value{this, cur}, contrib).id;
}

void Tape::emit_vjp(int id, Grads& g) {
    // copy metadata; pushes below may reallocate the node vector
    const Node& nref = nodes_[static_cast<size_t>(id)];
    Op op = nref.op;
    int in0 = nref.in0, in1 = nref.in1;
    int64_t a0 = nref.a0, a1 = nref.a1;
    double c0 = nref.c0;
    std::vector<int32_t> idx = nref.idx;
    std::vector<int64_t> d0 = in0 >= 0 ? nodes_[static_cast<size_t>(in0)].val.dims() : std::vector<int64_t>{};
    std::vector<int64_t> d1 = in1 >= 0 ? nodes_[static_cast<size_t>(in1)].val.dims() : std::vector<int64_t>{};

    Value self{this, id};
    Value gv{this, g.node_of[static_cast<size_t>(id)]};
    Value a{this, in0}, b{this, in1};
    auto need0 = [&] { return in0 >= 0 && nodes_[static_cast<size_t>(in0)].requires_grad; };
    auto need1 = [&] { return in1 >= 0 && nodes_[static_cast<size_t>(in1)].requires_grad; };

    switch (op) {
        case Op::add:
            if (need0()) accum(g, in0, reduce_to(gv, d0));
            if (need1()) accum(g, in1, reduce_to(gv, d1));
            break;
        case Op::sub:
            if (need0()) accum(g, in0, reduce_to(gv, d0));
            if (need1()) accum(g, in1, reduce_to(neg(gv), d1));
            break;
        case Op::mul:
            if (need0()) accum(g, in0, reduce_to(mul(gv, b), d0));
            if (need1()) accum(g, in1, reduce_to(mul(gv, a), d1));
            break;
        case Op::divide:
            if (need0()) accum(g, in0, reduce_to(div(gv, b), d0));
            if (need1()) accum(g, in1, reduce_to(neg(div(mul(gv, self), b)), d1));
            break;
        case Op::pow_op:
            if (need0()) accum(g, in0, reduce_to(mul(gv, mul(b, pow(a, sub(b, const_scalar(1.0, a.dtype()))))), d0));
            if (need1()) accum(g, in1, reduce_to(mul(gv, mul(self, log(a))), d1));
            break;
        case Op::neg:
            if (need0()) accum(g, in0, neg(gv));
            break;
        case Op::exp_op:
            if (need0()) accum(g, in0, mul(gv, self));
            break;
        case Op::log_op:
            if (need0()) accum(g, in0, div(gv, a));
            break;
        case Op::sqrt_op:
            if (need0()) accum(g, in0, div(gv, mul_c(self, 2.0)));
            break;
        case Op::sin_op:
            if (need0()) accum(g, in0, mul(gv, cos(a)));
            break;
        case Op::cos_op:
            if (need0()) accum(g, in0, neg(mul(gv, sin(a))));
            break;
        case Op::sigmoid:
            if (need0()) accum(g, in0, mul(gv, mul(self, add_c(neg(self), 1.0))));
            break;
        case Op::silu: {
            if (need0()) {
                Value s = sigmoid(a);
                Value one_m = add_c(neg(s), 1.0);
                accum(g, in0, mul(gv, add(s, mul(a, mul(s, one_m)))));
            }
            break;
        }
        case Op::softplus:
            if (need0()) accum(g, in0, mul(gv, sigmoid(a)));
            break;
        case Op::add_const:
            if (need0()) accum(g, in0, gv);
            break;
        case Op::mul_const:
            if (need0()) accum(g, in0, mul_c(gv, c0));
            break;
        case Op::pow_const:
            if (need0()) accum(g, in0, mul_c(mul(gv, pow_c(a, c0 - 1.0)), c0));
            break;
        case Op::matmul:
            if (need0()) accum(g, in0, matmul(gv, transpose(b)));
            if (need1()) accum(g, in1, matmul(transpose(a), gv));
            break;
        case Op::transpose:
            if (need0()) accum(g, in0, transpose(gv));
            break;
        case Op::bmm:
            if (need0()) accum(g, in0, bmm(gv, btranspose(b)));
            if (need1()) accum(g, in1, bmm(btranspose(a), gv));
            break;
        case Op::btranspose:
            if (need0()) accum(g, in0, btranspose(gv));
            break;
        case Op::conv1d:
            if (need0()) accum(g, in0, conv1d_dx(gv, b, a0, a1, d0[2]));
            if (need1()) accum(g, in1, conv1d_dw(a, gv, a0, a1, d1[2]));
            break;
        case Op::conv1d_dx:
            if (need0()) accum(g, in0, conv1d(gv, b, a0, a1));
            if (need1()) accum(g, in1, conv1d_dw(gv, a, a0, a1, d1[2]));
            break;
        case Op::conv1d_dw:
            if (need0()) accum(g, in0, conv1d_dx(b, gv, a0, a1, d0[2]));
            if (need1()) accum(g, in1, conv1d(a, gv, a0, a1));
            break;
        case Op::expand_cols:
            if (need0()) accum(g, in0, row_sum(gv));
            break;
        case Op::row_sum:
            if (need0()) accum(g, in0, expand_cols(gv, d0[1]));
            break;
        case Op::expand_rows:
            if (need0()) accum(g, in0, col_sum(gv));
            break;
        case Op::col_sum:
            if (need0()) accum(g, in0, expand_rows(gv, d0[0]));
            break;
        case Op::chan_broadcast:
            if (need0()) accum(g, in0, chan_sum(gv));
            break;
        case Op::chan_sum:
            if (need0()) accum(g, in0, chan_broadcast(gv, d0[0], d0[2]));
            break;
        case Op::sum_all:
            if (need0()) accum(g, in0, broadcast_all(gv, d0));
            break;
        case Op::broadcast_all:
            if (need0()) accum(g, in0, reduce_to(sum_all(gv), d0));
            break;
        case Op::reshape:
            if (need0()) accum(g, in0, reshape(gv, d0));
            break;
        case Op::gather_rows:
            if (need0()) accum(g, in0, scatter_rows(gv, idx, d0[0]));
            break;
        case Op::scatter_rows:
            if (need0()) accum(g, in0, gather_rows(gv, idx));
            break;
        case Op::upsample2:
            if (need0()) accum(g, in0, pair_sum2(gv));
            break;
        case Op::pair_sum2:
            if (need0()) accum(g, in0, upsample2(gv));
            break;
        default:
            throw std::runtime_error(std::string("backward: op does not support differentiation: ") + op_name(op));
    }
}

Grads Tape::backward(Value loss) {
    check_same_tape(loss);
    if (loss.numel() != 1) throw std::runtime_error("backward: loss must be a scalar");
    Grads g;
    g.loss = loss.id;
    g.node_of.assign(static_cast<size_t>(loss.id) + 1, -1);
    if (!nodes_[static_cast<size_t>(loss.id)].requires_grad) return g;
    g.node_of[static_cast<size_t>(loss.id)] = const_scalar(1.0, loss.dtype()).id;
    for (int id = loss.id; id >= 0; --id) {
        if (g.node_of[static_cast<size_t>(id)] < 0) continue;
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) continue;
        if (n.op == Op::leaf || n.op == Op::constant) continue;
        emit_vjp(id, g);
    }
    return g;
}

Value Tape::backward_as_graph(Value loss, Value wrt) {
    check_same_tape(wrt);
    Grads g = backward(loss);
    int gid = g.at(wrt.id);
    if (gid < 0) return constant(Tensor::zeros(wrt.dims(), wrt.dtype()));
    return {this, gid};
}

Tensor Tape::grad_value(const Grads& g, Value leaf) const {
    check_same_tape(leaf);
    int gid = g.at(leaf.id);
    if (gid < 0) return Tensor::zeros(leaf.dims(), leaf.dtype());
    return nodes_[static_cast<size_t>(gid)].val;
}

std::map<std::string, Tensor> Tape::named_grads(const Grads& g) const {
    std::map<std::string, Tensor> out;
    for (int id = 0; id <= g.loss && id < static_cast<int>(nodes_.size()); ++id) {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (n.op != Op::leaf || !n.requires_grad || n.name.empty()) continue;
        int gid = g.at(id);
        out[n.name] = gid < 0 ? Tensor::zeros(n.val.dims(), n.val.dtype()) : nodes_[static_cast<size_t>(gid)].val;
    }
    return out;
}

void Tape::replay_check() const {
    for (size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (n.op == Op::leaf || n.op == Op::constant) continue;
        Tensor v = eval_op(n);
        if (!v.bitwise_equal(n.val))
            throw std::runtime_error(std::string("replay: value mismatch at node ") + std::to_string(i) + " (" +
                                     op_name(n.op) + ")");
    }
}

Value softmax_rows(Value x) {
    Tape& t = *x.tape;
    if (x.dims().size() != 2) throw std::runtime_error("softmax_rows: expects rank-2 input");
    int64_t c = x.dims()[1];
    Value m = t.row_max(x);                       // max-subtraction; exact by shift invariance
    Value e = t.exp(t.sub(x, t.expand_cols(m, c)));
    Value s = t.row_sum(e);
    return t.div(e, t.expand_cols(s, c));
}

Value group_norm_modulated(Value x, int64_t groups, Value scale, Value shift, double eps) {
    Tape& t = *x.tape;
    bool rank2 = x.dims().size() == 2;
    Value x3 = rank2 ? t.reshape(x, {1, x.dims()[0], x.dims()[1]}) : x;
    if (x3.dims().size() != 3) throw std::runtime_error("group_norm_modulated: expects [C×L] or [B×C×L] input");
    int64_t bsz = x3.dims()[0], c = x3.dims()[1], l = x3.dims()[2];
    if (groups < 1 || c % groups != 0) throw std::runtime_error("group_norm_modulated: channels not divisible by groups");
    int64_t gs = (c / groups) * l;

    Value xg = t.reshape(x3, {bsz * groups, gs});
    Value mu = t.row_mean(xg);
    Value cent = t.sub(xg, t.expand_cols(mu, gs));
    Value var = t.row_mean(t.mul(cent, cent));
    Value denom = t.sqrt(t.add_c(var, eps));
    Value xhat = t.reshape(t.div(cent, t.expand_cols(denom, gs)), {bsz, c, l});

    Value sc, sh;
    if (scale.dims().size() == 1) {
        if (scale.dims()[0] != c || shift.dims()[0] != c)
            throw std::runtime_error("group_norm_modulated: scale/shift must have one entry per channel");
        sc = t.chan_broadcast(t.add_c(scale, 1.0), bsz, l);
        sh = t.chan_broadcast(shift, bsz, l);
    } else if (scale.dims().size() == 2) {
        if (scale.dims()[0] != bsz || scale.dims()[1] != c || shift.dims() != scale.dims())
            throw std::runtime_error("group_norm_modulated: per-sample scale/shift must be [B×C]");
        sc = t.reshape(t.expand_cols(t.reshape(t.add_c(scale, 1.0), {bsz * c}), l), {bsz, c, l});
        sh = t.reshape(t.expand_cols(t.reshape(shift, {bsz * c}), l), {bsz, c, l});
    } else {
        throw std::runtime_error("group_norm_modulated: scale/shift must be rank 1 or 2");
    }
    Value y = t.add(t.mul(xhat, sc), sh);
    return rank2 ? t.reshape(y, {c, l}) : y;
}

Value attention(Value q, Value k, Value v) {
    Tape& t = *q.tape;
    bool rank2 = q.dims().size() == 2;
    Value q3 = rank2 ? t.reshape(q, {1, q.dims()[0], q.dims()[1]}) : q;
    Value k3 = rank2 ? t.reshape(k, {1, k.dims()[0], k.dims()[1]}) : k;
    Value v3 = rank2 ? t.reshape(v, {1, v.dims()[0], v.dims()[1]}) : v;
    if (q3.dims().size() != 3) throw std::runtime_error("attention: expects [L×d] or [B×L×d] inputs");
    int64_t bsz = q3.dims()[0], lq = q3.dims()[1], d = q3.dims()[2], lk = k3.dims()[1];
    if (k3.dims()[2] != d || v3.dims()[1] != lk)
        throw std::runtime_error("attention: shape mismatch between q, k, v");
    Value scores = t.mul_c(t.bmm(q3, t.btranspose(k3)), 1.0 / std::sqrt(static_cast<double>(d)));
    Value attnw = t.reshape(softmax_rows(t.reshape(scores, {bsz * lq, lk})), {bsz, lq, lk});
    Value out = t.bmm(attnw, v3);
    return rank2 ? t.reshape(out, {lq, v.dims()[1]}) : out;
}

}  // namespace ddl
