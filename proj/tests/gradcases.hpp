#pragma once

// Randomized per-op gradient sweeps shared by the autograd unit tests and the
// acceptance run. Every differentiable primitive and composite gets `cases`
// random instances; each case probes the scalar loss sum(out ⊙ w) with a fixed
// random weight tensor so element-permutation bugs cannot cancel out.

#include <string>
#include <utility>
#include <vector>

#include "ddl/nn.hpp"
#include "ddl/rng.hpp"
#include "oracles.hpp"

namespace gradcases {

using ddl::DType;
using ddl::Rng;
using ddl::Tape;
using ddl::Tensor;
using ddl::Value;

struct SweepReport {
    double first_order = 0.0;
    double second_order = 0.0;
    int64_t probes = 0;
    std::vector<std::pair<std::string, double>> per_op;  // label -> worst rel err
};

namespace detail {

// Scalar probe: weighted sum of the op output against a fixed random tensor.
inline Value probe_loss(Tape& t, Value out, const Tensor& w) {
    return t.sum_all(t.mul(out, t.constant(w)));
}

inline Tensor wlike(const std::vector<int64_t>& dims, Rng& rng) {
    return rng.normal_tensor(dims, DType::f64);
}

struct Sweep {
    SweepReport rep;
    Rng rng;
    int cases;

    Sweep(uint64_t seed, int n) : rng(seed), cases(n) {}

    void record(const std::string& label, const oracle::GradCheckReport& r, bool second) {
        double& worst = second ? rep.second_order : rep.first_order;
        if (r.max_rel > worst) worst = r.max_rel;
        rep.probes += r.probes;
        for (auto& e : rep.per_op)
            if (e.first == label) {
                if (r.max_rel > e.second) e.second = r.max_rel;
                return;
            }
        rep.per_op.emplace_back(label, r.max_rel);
    }

    void run(const std::string& label, const oracle::LossFn& f, std::vector<Tensor> inputs,
             bool second = false) {
        record(label, oracle::gradcheck(f, std::move(inputs)), second);
    }
};

}  // namespace detail

inline SweepReport run(int cases_per_op, uint64_t seed) {
    using detail::probe_loss;
    detail::Sweep s(seed, cases_per_op);
    Rng& rng = s.rng;
    const DType dt = DType::f64;

    for (int c = 0; c < cases_per_op; ++c) {
        // binary elementwise, equal shapes and single-element broadcast
        {
            std::vector<int64_t> dims{2, 3};
            Tensor a = rng.normal_tensor(dims, dt);
            Tensor b = rng.normal_tensor(dims, dt);
            Tensor w = detail::wlike(dims, rng);
            s.run("add", [w](Tape& t, const std::vector<Value>& in) {
                return probe_loss(t, t.add(in[0], in[1]), w);
            }, {a, b});
            s.run("sub", [w](Tape& t, const std::vector<Value>& in) {
                return probe_loss(t, t.sub(in[0], in[1]), w);
            }, {a, b});
            s.run("mul", [w](Tape& t, const std::vector<Value>& in) {
                return probe_loss(t, t.mul(in[0], in[1]), w);
            }, {a, b});
            Tensor bb = rng.uniform_tensor(dims, 0.6, 1.8, dt);
            s.run("div", [w](Tape& t, const std::vector<Value>& in) {
                return probe_loss(t, t.div(in[0], in[1]), w);
            }, {a, bb});
            Tensor sc = rng.uniform_tensor({1}, 0.5, 1.5, dt);
            s.run("mul_bcast", [w](Tape& t, const std::vector<Value>& in) {
                return probe_loss(t, t.mul(in[0], in[1]), w);
            }, {a, sc});
            s.run("div_bcast", [w](Tape& t, const std::vector<Value>& in) {
                return probe_loss(t, t.div(in[0], in[1]), w);
            }, {a, sc});
        }
        // unary elementwise
        {
            std::vector<int64_t> dims{4};
            Tensor x = rng.normal_tensor(dims, dt);
            Tensor xp = rng.uniform_tensor(dims, 0.2, 3.0, dt);
            Tensor w = detail::wlike(dims, rng);
            auto u1 = [&](const char* label, auto op, const Tensor& in) {
                s.run(label, [w, op](Tape& t, const std::vector<Value>& v) {
                    return probe_loss(t, op(t, v[0]), w);
                }, {in});
            };
            u1("neg", [](Tape& t, Value v) { return t.neg(v); }, x);
            u1("exp", [](Tape& t, Value v) { return t.exp(v); }, x);
            u1("log", [](Tape& t, Value v) { return t.log(v); }, xp);
            u1("sqrt", [](Tape& t, Value v) { return t.sqrt(v); }, xp);
            u1("sin", [](Tape& t, Value v) { return t.sin(v); }, x);
            u1("cos", [](Tape& t, Value v) { return t.cos(v); }, x);
            u1("sigmoid", [](Tape& t, Value v) { return t.sigmoid(v); }, x);
            u1("silu", [](Tape& t, Value v) { return t.silu(v); }, x);
            u1("softplus", [](Tape& t, Value v) { return t.softplus(v); }, x);
            double cc = rng.uniform() * 2.0 - 1.0;
            s.run("add_c", [w, cc](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.add_c(v[0], cc), w);
            }, {x});
            s.run("mul_c", [w, cc](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.mul_c(v[0], cc), w);
            }, {x});
            double pe = rng.uniform() * 2.5 - 1.0;
            s.run("pow_c", [w, pe](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.pow_c(v[0], pe), w);
            }, {xp});
            Tensor base = rng.uniform_tensor(dims, 0.4, 2.2, dt);
            Tensor expo = rng.uniform_tensor(dims, -1.5, 1.5, dt);
            s.run("pow", [w](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.pow(v[0], v[1]), w);
            }, {base, expo});
        }
        // matrix products
        {
            int64_t m = 1 + rng.range(3), k = 1 + rng.range(3), n = 1 + rng.range(3);
            Tensor a = rng.normal_tensor({m, k}, dt);
            Tensor b = rng.normal_tensor({k, n}, dt);
            Tensor w = detail::wlike({m, n}, rng);
            s.run("matmul", [w](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.matmul(v[0], v[1]), w);
            }, {a, b});
            Tensor wt = detail::wlike({k, m}, rng);
            s.run("transpose", [wt](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.transpose(v[0]), wt);
            }, {a});
            Tensor ba = rng.normal_tensor({2, m, k}, dt);
            Tensor bb = rng.normal_tensor({2, k, n}, dt);
            Tensor bw = detail::wlike({2, m, n}, rng);
            s.run("bmm", [bw](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.bmm(v[0], v[1]), bw);
            }, {ba, bb});
            Tensor btw = detail::wlike({2, k, m}, rng);
            s.run("btranspose", [btw](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.btranspose(v[0]), btw);
            }, {ba});
        }
        // conv1d family, stride and padding variants
        {
            int64_t stride = 1 + rng.range(2), pad = rng.range(2);
            int64_t ci = 2, co = 2, L = 6, K = 3;
            int64_t lo = (L + 2 * pad - K) / stride + 1;
            Tensor x = rng.normal_tensor({2, ci, L}, dt);
            Tensor wgt = rng.normal_tensor({co, ci, K}, dt);
            Tensor w = detail::wlike({2, co, lo}, rng);
            s.run("conv1d", [w, stride, pad](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.conv1d(v[0], v[1], stride, pad), w);
            }, {x, wgt});
            Tensor x2 = rng.normal_tensor({ci, L}, dt);
            Tensor w2 = detail::wlike({co, lo}, rng);
            s.run("conv1d_rank2", [w2, stride, pad](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.conv1d(v[0], v[1], stride, pad), w2);
            }, {x2, wgt});
            Tensor dy = rng.normal_tensor({2, co, lo}, dt);
            Tensor wdx = detail::wlike({2, ci, L}, rng);
            s.run("conv1d_dx", [wdx, stride, pad, L](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.conv1d_dx(v[0], v[1], stride, pad, L), wdx);
            }, {dy, wgt});
            Tensor wdw = detail::wlike({co, ci, K}, rng);
            s.run("conv1d_dw", [wdw, stride, pad, K](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.conv1d_dw(v[0], v[1], stride, pad, K), wdw);
            }, {x, dy});
        }
        // shape movers and reductions
        {
            Tensor v3 = rng.normal_tensor({3}, dt);
            Tensor m34 = rng.normal_tensor({3, 4}, dt);
            Tensor w34 = detail::wlike({3, 4}, rng);
            Tensor w3 = detail::wlike({3}, rng);
            Tensor w4 = detail::wlike({4}, rng);
            s.run("expand_cols", [w34](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.expand_cols(v[0], 4), w34);
            }, {v3});
            s.run("row_sum", [w3](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.row_sum(v[0]), w3);
            }, {m34});
            Tensor v4 = rng.normal_tensor({4}, dt);
            s.run("expand_rows", [w34](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.expand_rows(v[0], 3), w34);
            }, {v4});
            s.run("col_sum", [w4](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.col_sum(v[0]), w4);
            }, {m34});
            Tensor c2 = rng.normal_tensor({2}, dt);
            Tensor w223 = detail::wlike({2, 2, 3}, rng);
            s.run("chan_broadcast", [w223](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.chan_broadcast(v[0], 2, 3), w223);
            }, {c2});
            Tensor x223 = rng.normal_tensor({2, 2, 3}, dt);
            Tensor w2c = detail::wlike({2}, rng);
            s.run("chan_sum", [w2c](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.chan_sum(v[0]), w2c);
            }, {x223});
            Tensor wss = detail::wlike({}, rng);
            s.run("sum_all", [wss](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.sum_all(v[0]), wss);
            }, {m34});
            s.run("mean_all", [wss](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.mean_all(v[0]), wss);
            }, {m34});
            Tensor s1 = rng.normal_tensor({}, dt);
            s.run("broadcast_all", [w34](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.broadcast_all(v[0], {3, 4}), w34);
            }, {s1});
            Tensor w43 = detail::wlike({4, 3}, rng);
            s.run("reshape", [w43](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.reshape(v[0], {4, 3}), w43);
            }, {m34});
            std::vector<int32_t> idx{0, 2, 2, 1};
            Tensor w44 = detail::wlike({4, 4}, rng);
            s.run("gather_rows", [w44, idx](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.gather_rows(v[0], idx), w44);
            }, {m34});
            Tensor src = rng.normal_tensor({4, 2}, dt);
            Tensor w52 = detail::wlike({5, 2}, rng);
            s.run("scatter_rows", [w52, idx](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.scatter_rows(v[0], idx, 5), w52);
            }, {src});
            Tensor w226 = detail::wlike({2, 2, 6}, rng);
            s.run("upsample2", [w226](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.upsample2(v[0]), w226);
            }, {x223});
            Tensor x226 = rng.normal_tensor({2, 2, 6}, dt);
            Tensor w223b = detail::wlike({2, 2, 3}, rng);
            s.run("pair_sum2", [w223b](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, t.pair_sum2(v[0]), w223b);
            }, {x226});
        }
        // composites
        {
            Tensor x = rng.normal_tensor({3, 4}, dt);
            Tensor w = detail::wlike({3, 4}, rng);
            s.run("softmax_rows", [w](Tape&, const std::vector<Value>& v) {
                Value sm = ddl::softmax_rows(v[0]);
                return probe_loss(*v[0].tape, sm, w);
            }, {x});

            Tensor gx = rng.normal_tensor({2, 4, 3}, dt);
            Tensor gs = rng.normal_tensor({4}, dt);
            Tensor gb = rng.normal_tensor({4}, dt);
            Tensor gw = detail::wlike({2, 4, 3}, rng);
            s.run("group_norm_mod", [gw](Tape&, const std::vector<Value>& v) {
                Value out = ddl::group_norm_modulated(v[0], 2, v[1], v[2], 1e-5);
                return probe_loss(*v[0].tape, out, gw);
            }, {gx, gs, gb});
            Tensor gs2 = rng.normal_tensor({2, 4}, dt);
            Tensor gb2 = rng.normal_tensor({2, 4}, dt);
            s.run("group_norm_mod_batched", [gw](Tape&, const std::vector<Value>& v) {
                Value out = ddl::group_norm_modulated(v[0], 2, v[1], v[2], 1e-5);
                return probe_loss(*v[0].tape, out, gw);
            }, {gx, gs2, gb2});

            Tensor q = rng.normal_tensor({3, 4}, dt);
            Tensor k = rng.normal_tensor({3, 4}, dt);
            Tensor vv = rng.normal_tensor({3, 4}, dt);
            Tensor aw = detail::wlike({3, 4}, rng);
            s.run("attention", [aw](Tape&, const std::vector<Value>& v) {
                Value out = ddl::attention(v[0], v[1], v[2]);
                return probe_loss(*v[0].tape, out, aw);
            }, {q, k, vv});
            Tensor bq = rng.normal_tensor({2, 3, 4}, dt);
            Tensor bk = rng.normal_tensor({2, 3, 4}, dt);
            Tensor bv = rng.normal_tensor({2, 3, 4}, dt);
            Tensor baw = detail::wlike({2, 3, 4}, rng);
            s.run("attention_batched", [baw](Tape&, const std::vector<Value>& v) {
                Value out = ddl::attention(v[0], v[1], v[2]);
                return probe_loss(*v[0].tape, out, baw);
            }, {bq, bk, bv});

            Tensor lx = rng.normal_tensor({3, 2}, dt);
            Tensor lw = rng.normal_tensor({4, 2}, dt);
            Tensor lb = rng.normal_tensor({4}, dt);
            Tensor lww = detail::wlike({3, 4}, rng);
            s.run("linear", [lww](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, ddl::linear(t, v[0], v[1], v[2]), lww);
            }, {lx, lw, lb});

            Tensor cx = rng.normal_tensor({2, 2, 4}, dt);
            Tensor cw = rng.normal_tensor({3, 2, 3}, dt);
            Tensor cb = rng.normal_tensor({3}, dt);
            Tensor cww = detail::wlike({2, 3, 4}, rng);
            s.run("conv_bias", [cww](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, ddl::conv_bias(t, v[0], v[1], v[2], 1, 1), cww);
            }, {cx, cw, cb});

            Tensor mx = rng.normal_tensor({2, 3, 4}, dt);
            Tensor msc = rng.normal_tensor({2, 3}, dt);
            Tensor msh = rng.normal_tensor({2, 3}, dt);
            Tensor mw = detail::wlike({2, 3, 4}, rng);
            s.run("affine_mod", [mw](Tape& t, const std::vector<Value>& v) {
                return probe_loss(t, ddl::affine_mod(t, v[0], v[1], v[2]), mw);
            }, {mx, msc, msh});
        }
    }

    // Second-order sweep: losses built on a gradient that is itself a tape
    // node, exactly the shape of the gradient penalty. Fewer cases, as each
    // probe differentiates twice.
    int second_cases = cases_per_op / 5 + 2;
    for (int c = 0; c < second_cases; ++c) {
        // two-layer MLP discriminator, penalty = mean_b ||d logit / d x||^2
        {
            Tensor x = rng.normal_tensor({3, 2}, dt);
            Tensor w1 = rng.normal_tensor({4, 2}, dt);
            Tensor b1 = rng.normal_tensor({4}, dt);
            Tensor w2 = rng.normal_tensor({1, 4}, dt);
            Tensor b2 = rng.normal_tensor({1}, dt);
            auto builder = [](Tape& t, const std::vector<Value>& v) {
                Value h = t.silu(ddl::linear(t, v[0], v[1], v[2]));
                Value logit = ddl::linear(t, h, v[3], v[4]);
                Value total = t.sum_all(logit);
                Value gx = t.backward_as_graph(total, v[0]);
                return t.mul_c(t.sum_all(t.mul(gx, gx)), 1.0 / 3.0);
            };
            s.run("r1_mlp", builder, {x, w1, b1, w2, b2}, true);
        }
        // conv discriminator branch
        {
            Tensor x = rng.normal_tensor({2, 2, 4}, dt);
            Tensor w1 = rng.normal_tensor({2, 2, 3}, dt);
            Tensor b1 = rng.normal_tensor({2}, dt);
            auto builder = [](Tape& t, const std::vector<Value>& v) {
                Value h = t.silu(ddl::conv_bias(t, v[0], v[1], v[2], 1, 1));
                Value total = t.sum_all(h);
                Value gx = t.backward_as_graph(total, v[0]);
                return t.mul_c(t.sum_all(t.mul(gx, gx)), 0.5);
            };
            s.run("r1_conv", builder, {x, w1, b1}, true);
        }
        // random-feature discriminator branch (sin feature map)
        {
            Tensor x = rng.normal_tensor({3, 2}, dt);
            Tensor fw = rng.normal_tensor({5, 2}, dt);
            Tensor hw = rng.normal_tensor({1, 5}, dt);
            auto builder = [](Tape& t, const std::vector<Value>& v) {
                Value z = t.matmul(v[0], t.transpose(v[1]));
                Value logit = t.matmul(t.sin(z), t.transpose(v[2]));
                Value total = t.sum_all(logit);
                Value gx = t.backward_as_graph(total, v[0]);
                return t.sum_all(t.mul(gx, gx));
            };
            s.run("r1_feature", builder, {x, fw, hw}, true);
        }
        // normalization on the penalty path
        {
            Tensor x = rng.normal_tensor({2, 4, 3}, dt);
            Tensor gs = rng.normal_tensor({4}, dt);
            Tensor gb = rng.normal_tensor({4}, dt);
            auto builder = [](Tape& t, const std::vector<Value>& v) {
                Value n = ddl::group_norm_modulated(v[0], 2, v[1], v[2], 1e-5);
                Value total = t.sum_all(t.mul(t.sigmoid(n), n));
                Value gx = t.backward_as_graph(total, v[0]);
                return t.sum_all(t.mul(gx, gx));
            };
            s.run("r1_groupnorm", builder, {x, gs, gb}, true);
        }
        // plain scalar chain, analytic shape: f=sum(sin(x)·x²)
        {
            Tensor x = rng.normal_tensor({4}, dt);
            auto builder = [](Tape& t, const std::vector<Value>& v) {
                Value f = t.sum_all(t.mul(t.sin(v[0]), t.mul(v[0], v[0])));
                Value gx = t.backward_as_graph(f, v[0]);
                return t.sum_all(t.mul(gx, gx));
            };
            s.run("r1_scalar_chain", builder, {x}, true);
        }
    }

    return s.rep;
}

}  // namespace gradcases
