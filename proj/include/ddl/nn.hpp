#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ddl/rng.hpp"
#include "ddl/tape.hpp"
#include "ddl/tensor.hpp"

namespace ddl {

enum class Category : uint8_t { norm, conv, qkv, skip, io };

const char* category_name(Category c);
Category category_from_name(const std::string& s);

struct Parameter {
    std::string name;
    Tensor value;
    Category cat = Category::conv;
    bool frozen = false;
};

class ParamStore {
public:
    int add(std::string name, Tensor value, Category cat, bool frozen = false);
    int find(const std::string& name) const;  // -1 when absent
    size_t size() const { return params_.size(); }
    Parameter& at(size_t i) { return params_[i]; }
    const Parameter& at(size_t i) const { return params_[i]; }

    std::map<std::string, Tensor> state() const;
    void load_state(const std::map<std::string, Tensor>& st);

private:
    std::vector<Parameter> params_;
};

// Per-tape leaf bindings for a parameter store, aligned by parameter index.
struct Bound {
    std::vector<Value> v;
    Value operator[](size_t i) const { return v[i]; }
};

Bound bind(Tape& t, const ParamStore& ps, bool with_grad);

// Gradients aligned with the store's parameter order; zeros where no path.
std::vector<Tensor> aligned_grads(Tape& t, const Grads& g, const Bound& b);

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.0;
    double beta2 = 0.99;
    double eps = 1e-8;
};

// Adam without weight decay. Frozen parameters are skipped entirely so their
// values stay bitwise unchanged no matter how long the optimizer runs.
class Adam {
public:
    Adam(AdamConfig cfg, const ParamStore& ps);
    void step(ParamStore& ps, const std::vector<Tensor>& grads);
    int64_t steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    int64_t t_ = 0;
};

// y = x·Wᵀ + b for x [B×in], w [out×in], b [out]
Value linear(Tape& t, Value x, Value w, Value b);

// y = conv1d(x, w) + bias per output channel
Value conv_bias(Tape& t, Value x, Value w, Value b, int64_t stride = 1, int64_t pad = 0);

// y = x·(1+scale) + shift with per-sample per-channel modulation [B×C] over [B×C×L]
Value affine_mod(Tape& t, Value x, Value scale, Value shift);

// Sinusoidal features of log(sigma), one row per sample. dim must be even.
Tensor sinusoidal_embedding(const std::vector<double>& sigmas, int dim, DType dt);

// He-style init: N(0, 1/fan_in) entries drawn from the given stream.
Tensor init_normal(std::vector<int64_t> dims, int64_t fan_in, Rng& rng, DType dt, double gain = 1.0);

}  // namespace ddl
