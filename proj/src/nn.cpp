#include "ddl/nn.hpp"

#include <cmath>

namespace ddl {

const char* category_name(Category c) {
    switch (c) {
        case Category::norm: return "norm";
        case Category::conv: return "conv";
        case Category::qkv: return "qkv";
        case Category::skip: return "skip";
        case Category::io: return "io";
    }
    return "?";
}

Category category_from_name(const std::string& s) {
    if (s == "norm") return Category::norm;
    if (s == "conv") return Category::conv;
    if (s == "qkv") return Category::qkv;
    if (s == "skip") return Category::skip;
    if (s == "io") return Category::io;
    throw std::runtime_error("unknown parameter category: " + s);
}

int ParamStore::add(std::string name, Tensor value, Category cat, bool frozen) {
    if (find(name) >= 0) throw std::runtime_error("parameter already exists: " + name);
    params_.push_back(Parameter{std::move(name), std::move(value), cat, frozen});
    return static_cast<int>(params_.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
    for (size_t i = 0; i < params_.size(); ++i)
        if (params_[i].name == name) return static_cast<int>(i);
    return -1;
}

std::map<std::string, Tensor> ParamStore::state() const {
    std::map<std::string, Tensor> st;
    for (const auto& p : params_) st[p.name] = p.value;
    return st;
}

void ParamStore::load_state(const std::map<std::string, Tensor>& st) {
    if (st.size() != params_.size()) throw std::runtime_error("load_state: parameter count mismatch");
    for (auto& p : params_) {
        auto it = st.find(p.name);
        if (it == st.end()) throw std::runtime_error("load_state: missing parameter " + p.name);
        if (it->second.dims() != p.value.dims())
            throw std::runtime_error("load_state: shape mismatch for " + p.name);
        p.value = it->second.astype(p.value.dtype());
    }
}

Bound bind(Tape& t, const ParamStore& ps, bool with_grad) {
    Bound b;
    b.v.reserve(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
        const Parameter& p = ps.at(i);
        b.v.push_back(t.leaf(p.value, with_grad && !p.frozen, p.name));
    }
    return b;
}

std::vector<Tensor> aligned_grads(Tape& t, const Grads& g, const Bound& b) {
    std::vector<Tensor> out;
    out.reserve(b.v.size());
    for (Value v : b.v) out.push_back(t.grad_value(g, v));
    return out;
}

Adam::Adam(AdamConfig cfg, const ParamStore& ps) : cfg_(cfg) {
    m_.reserve(ps.size());
    v_.reserve(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) {
        m_.push_back(Tensor::zeros(ps.at(i).value.dims(), DType::f64));
        v_.push_back(Tensor::zeros(ps.at(i).value.dims(), DType::f64));
    }
}

void Adam::step(ParamStore& ps, const std::vector<Tensor>& grads) {
    if (grads.size() != ps.size()) throw std::runtime_error("adam: gradient count mismatch");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < ps.size(); ++i) {
        Parameter& p = ps.at(i);
        if (p.frozen) continue;
        const Tensor& g = grads[i];
        if (g.dims() != p.value.dims()) throw std::runtime_error("adam: gradient shape mismatch for " + p.name);
        auto m = m_[i].data<double>();
        auto v = v_[i].data<double>();
        for (int64_t j = 0; j < p.value.numel(); ++j) {
            double gj = g.at(j);
            m[static_cast<size_t>(j)] = cfg_.beta1 * m[static_cast<size_t>(j)] + (1.0 - cfg_.beta1) * gj;
            v[static_cast<size_t>(j)] = cfg_.beta2 * v[static_cast<size_t>(j)] + (1.0 - cfg_.beta2) * gj * gj;
            double mhat = m[static_cast<size_t>(j)] / bc1;
            double vhat = v[static_cast<size_t>(j)] / bc2;
            p.value.set(j, p.value.at(j) - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
}

Value linear(Tape& t, Value x, Value w, Value b) {
    Value y = t.matmul(x, t.transpose(w));
    return t.add(y, t.expand_rows(b, x.dims()[0]));
}

Value conv_bias(Tape& t, Value x, Value w, Value b, int64_t stride, int64_t pad) {
    Value y = t.conv1d(x, w, stride, pad);
    return t.add(y, t.chan_broadcast(b, y.dims()[0], y.dims()[2]));
}

Value affine_mod(Tape& t, Value x, Value scale, Value shift) {
    if (x.dims().size() != 3 || scale.dims().size() != 2)
        throw std::runtime_error("affine_mod: expects x [B×C×L] with scale/shift [B×C]");
    int64_t bsz = x.dims()[0], c = x.dims()[1], l = x.dims()[2];
    if (scale.dims()[0] != bsz || scale.dims()[1] != c || shift.dims() != scale.dims())
        throw std::runtime_error("affine_mod: shape mismatch");
    Value sc = t.reshape(t.expand_cols(t.reshape(t.add_c(scale, 1.0), {bsz * c}), l), {bsz, c, l});
    Value sh = t.reshape(t.expand_cols(t.reshape(shift, {bsz * c}), l), {bsz, c, l});
    return t.add(t.mul(x, sc), sh);
}

Tensor sinusoidal_embedding(const std::vector<double>& sigmas, int dim, DType dt) {
    if (dim < 2 || dim % 2 != 0) throw std::runtime_error("sinusoidal_embedding: dim must be even and >= 2");
    int half = dim / 2;
    int64_t b = static_cast<int64_t>(sigmas.size());
    Tensor out = Tensor::zeros({b, dim}, dt);
    for (int64_t i = 0; i < b; ++i) {
        if (sigmas[static_cast<size_t>(i)] <= 0.0)
            throw std::runtime_error("sinusoidal_embedding: sigma must be positive");
        double u = std::log(sigmas[static_cast<size_t>(i)]);
        for (int j = 0; j < half; ++j) {
            // frequencies log-spaced over [0.2, 4]; log-sigma spans about [-6.2, 4.4],
            // and keeping the band low stops the net from oscillating when a sampler
            // trajectory crosses sigmas the training distribution rarely visits
            double w = 0.2 * std::pow(20.0, half > 1 ? static_cast<double>(j) / (half - 1) : 0.0);
            out.set(i * dim + j, std::sin(u * w));
            out.set(i * dim + half + j, std::cos(u * w));
        }
    }
    return out;
}

Tensor init_normal(std::vector<int64_t> dims, int64_t fan_in, Rng& rng, DType dt, double gain) {
    Tensor t = Tensor::zeros(std::move(dims), dt);
    double s = gain / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, s * rng.normal());
    return t;
}

}  // namespace ddl
