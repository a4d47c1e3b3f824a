#pragma once

#include <map>
#include <string>
#include <vector>

#include "ddl/tensor.hpp"

namespace ddl {

enum class Op : uint8_t {
    leaf,
    constant,
    add,
    sub,
    mul,
    divide,
    neg,
    exp_op,
    log_op,
    sqrt_op,
    sin_op,
    cos_op,
    sigmoid,
    silu,
    softplus,
    pow_op,
    add_const,
    mul_const,
    pow_const,
    matmul,
    transpose,
    bmm,
    btranspose,
    conv1d,
    conv1d_dx,
    conv1d_dw,
    expand_cols,
    row_sum,
    expand_rows,
    col_sum,
    chan_broadcast,
    chan_sum,
    sum_all,
    broadcast_all,
    row_max,
    reshape,
    detach,
    gather_rows,
    scatter_rows,
    upsample2,
    pair_sum2,
};

const char* op_name(Op op);

struct Node {
    Op op = Op::leaf;
    bool requires_grad = false;
    int in0 = -1;
    int in1 = -1;
    int64_t a0 = 0, a1 = 0, a2 = 0;  // op specific ints (stride, pad, sizes)
    double c0 = 0.0;                 // op specific scalar
    Tensor val;
    std::vector<int32_t> idx;  // gather/scatter row indices
    std::string name;          // set for named leaves only
};

class Tape;

// Lightweight handle to a node. Values are cheap to copy; they stay valid for
// the lifetime of the tape that produced them.
struct Value {
    Tape* tape = nullptr;
    int id = -1;
    bool ok() const { return tape != nullptr && id >= 0; }
    const std::vector<int64_t>& dims() const;
    DType dtype() const;
    int64_t numel() const;
    const Tensor& val() const;
    bool requires_grad() const;
};

struct Grads {
    int loss = -1;
    std::vector<int> node_of;  // node id -> grad node id, -1 when absent
    int at(int id) const {
        return (id >= 0 && id < static_cast<int>(node_of.size())) ? node_of[static_cast<size_t>(id)] : -1;
    }
};

// Define-by-run tape. Every op evaluates eagerly when recorded, and backward
// emits the gradient computation as ordinary nodes on the same tape, so a
// gradient can itself be differentiated (needed for the gradient penalty).
class Tape {
public:
    explicit Tape(size_t reserve = 256) { nodes_.reserve(reserve); }

    Value leaf(Tensor v, bool requires_grad, std::string name = "");
    Value constant(Tensor v);
    Value const_scalar(double v, DType dt);

    // elementwise; binary ops require equal shapes or one single-element side
    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value div(Value a, Value b);
    Value neg(Value a);
    Value exp(Value a);
    Value log(Value a);
    Value sqrt(Value a);
    Value sin(Value a);
    Value cos(Value a);
    Value sigmoid(Value a);
    Value silu(Value a);
    Value softplus(Value a);
    Value pow(Value a, Value b);
    Value add_c(Value a, double c);
    Value mul_c(Value a, double c);
    Value pow_c(Value a, double c);

    Value matmul(Value a, Value b);     // [m×k]·[k×n]
    Value transpose(Value a);           // [m×n] -> [n×m]
    Value bmm(Value a, Value b);        // [B×m×k]·[B×k×n]
    Value btranspose(Value a);          // [B×m×n] -> [B×n×m]

    // x: [B×Cin×L] (rank 2 treated as B=1), w: [Cout×Cin×K]
    Value conv1d(Value x, Value w, int64_t stride = 1, int64_t pad = 0);
    Value conv1d_dx(Value dy, Value w, int64_t stride, int64_t pad, int64_t l_in);
    Value conv1d_dw(Value x, Value dy, int64_t stride, int64_t pad, int64_t k);

    Value expand_cols(Value v, int64_t n);  // [R] -> [R×n]
    Value row_sum(Value a);                 // [R×C] -> [R]
    Value row_mean(Value a);
    Value expand_rows(Value v, int64_t n);  // [C] -> [n×C]
    Value col_sum(Value a);                 // [R×C] -> [C]
    Value chan_broadcast(Value v, int64_t batch, int64_t len);  // [C] -> [B×C×L]
    Value chan_sum(Value a);                                    // [B×C×L] -> [C]
    Value sum_all(Value a);
    Value mean_all(Value a);
    Value broadcast_all(Value s, std::vector<int64_t> dims);
    Value row_max(Value a);  // [R×C] -> [R]; gradient never flows through
    Value reshape(Value a, std::vector<int64_t> dims);
    Value detach(Value a);
    Value gather_rows(Value table, std::vector<int32_t> idx);
    Value scatter_rows(Value src, std::vector<int32_t> idx, int64_t rows);
    Value upsample2(Value a);   // [B×C×L] -> [B×C×2L], nearest neighbour
    Value pair_sum2(Value a);   // [B×C×2L] -> [B×C×L], adjoint of upsample2

    Value zeros_like(Value a);

    // Accumulates gradients of `loss` (scalar) for every node requiring grad.
    // The gradient computations are appended to this tape as first-class nodes.
    Grads backward(Value loss);

    // Gradient of loss wrt a single node, returned as a tape node so further
    // ops (and another backward pass) can be built on top of it.
    Value backward_as_graph(Value loss, Value wrt);

    Tensor grad_value(const Grads& g, Value leaf) const;
    std::map<std::string, Tensor> named_grads(const Grads& g) const;

    // Re-executes every recorded op and verifies the stored values bit-exactly.
    void replay_check() const;

    size_t size() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

private:
    friend struct Value;
    int push(Node n);
    Tensor eval_op(const Node& n) const;
    void emit_vjp(int id, Grads& g);
    void accum(Grads& g, int target, Value contrib);
    Value reduce_to(Value g, const std::vector<int64_t>& dims);
    void check_same_tape(Value v) const;
    Value binary_ew(Op op, Value a, Value b);
    Value unary(Op op, Value a, double c = 0.0);

    std::vector<Node> nodes_;
};

inline const std::vector<int64_t>& Value::dims() const { return tape->node(id).val.dims(); }
inline DType Value::dtype() const { return tape->node(id).val.dtype(); }
inline int64_t Value::numel() const { return tape->node(id).val.numel(); }
inline const Tensor& Value::val() const { return tape->node(id).val; }
inline bool Value::requires_grad() const { return tape->node(id).requires_grad; }

inline Value operator+(Value a, Value b) { return a.tape->add(a, b); }
inline Value operator-(Value a, Value b) { return a.tape->sub(a, b); }
inline Value operator*(Value a, Value b) { return a.tape->mul(a, b); }
inline Value operator/(Value a, Value b) { return a.tape->div(a, b); }
inline Value operator*(Value a, double c) { return a.tape->mul_c(a, c); }
inline Value operator*(double c, Value a) { return a.tape->mul_c(a, c); }
inline Value operator+(Value a, double c) { return a.tape->add_c(a, c); }
inline Value operator-(Value a, double c) { return a.tape->add_c(a, -c); }
inline Value operator-(Value a) { return a.tape->neg(a); }

// Composites built from primitives; they differentiate (twice) for free.
Value softmax_rows(Value x);  // [R×C], softmax along each row
Value group_norm_modulated(Value x, int64_t groups, Value scale, Value shift, double eps);
Value attention(Value q, Value k, Value v);  // [L×d] or [B×L×d]

}  // namespace ddl
