#include "ddl/diffusion.hpp"

#include <cmath>
#include <stdexcept>

namespace ddl {

double schedule_time(int i, int n, const ScheduleSpec& spec) {
    if (n < 1) throw std::runtime_error("schedule_time: n must be positive");
    if (i < 0 || i > n) throw std::runtime_error("schedule_time: index out of range");
    double a = std::pow(spec.sigma_max, 1.0 / spec.rho);
    double b = std::pow(spec.sigma_min, 1.0 / spec.rho);
    double u = a + (1.0 - static_cast<double>(i) / n) * (b - a);
    return std::pow(u, spec.rho);
}

double c_skip(double t, const PreconditioningSpec& pc) {
    double sd2 = pc.sigma_data * pc.sigma_data;
    double d = t - pc.epsilon;
    return sd2 / (d * d + sd2);
}

double c_out(double t, const PreconditioningSpec& pc) {
    double sd2 = pc.sigma_data * pc.sigma_data;
    return pc.sigma_data * (t - pc.epsilon) / std::sqrt(sd2 + t * t);
}

namespace {

// Per-sample scalar weights expanded to the sample shape, as a constant.
Tensor rowwise(const std::vector<double>& w, const std::vector<int64_t>& dims, DType dt) {
    Tensor out = Tensor::zeros(dims, dt);
    int64_t per = out.numel() / static_cast<int64_t>(w.size());
    for (size_t i = 0; i < w.size(); ++i)
        for (int64_t j = 0; j < per; ++j) out.set(static_cast<int64_t>(i) * per + j, w[i]);
    return out;
}

}  // namespace

Tensor perturb(const Tensor& x0, double t, const Tensor& noise) {
    if (t < 0.0) throw std::runtime_error("perturb: t must be non-negative");
    if (!x0.same_shape(noise)) throw std::runtime_error("perturb: shape mismatch");
    Tape tp(8);
    Value xv = tp.constant(x0);
    return tp.add(xv, tp.mul_c(tp.constant(noise), t)).val();
}

Value precondition(Tape& t, const ScoreNet& net, const Bound& b, Value x,
                   const std::vector<double>& sigmas, const PreconditioningSpec& pc,
                   const std::vector<int>* classes, ActivationRecorder* rec) {
    for (double s : sigmas)
        if (s < pc.epsilon) throw std::runtime_error("precondition: sigma below epsilon");
    std::vector<double> cs(sigmas.size()), co(sigmas.size());
    for (size_t i = 0; i < sigmas.size(); ++i) {
        cs[i] = c_skip(sigmas[i], pc);
        co[i] = c_out(sigmas[i], pc);
    }
    Value f = net.forward(t, b, x, sigmas, classes, rec);
    Value skip = t.mul(x, t.constant(rowwise(cs, x.dims(), x.dtype())));
    Value out = t.mul(f, t.constant(rowwise(co, x.dims(), x.dtype())));
    return t.add(skip, out);
}

Tensor denoise_eval(const ScoreNet& net, const Tensor& x, const std::vector<double>& sigmas,
                    const PreconditioningSpec& pc, const std::vector<int>* classes,
                    ActivationRecorder* rec) {
    Tape t(512);
    Bound b = bind(t, net.params(), false);
    return precondition(t, net, b, t.constant(x), sigmas, pc, classes, rec).val();
}

Value euler_combine(Tape& t, Value x, Value g, double tt, double t_next) {
    if (tt <= 0.0) throw std::runtime_error("euler step: t must be positive");
    if (t_next < 0.0 || t_next > tt) throw std::runtime_error("euler step: need 0 <= t_next <= t");
    if (t_next == 0.0) return g;
    return t.add(t.mul_c(t.sub(g, x), (tt - t_next) / tt), x);
}

Tensor euler_combine(const Tensor& x, const Tensor& g, double tt, double t_next) {
    Tape t(8);
    return euler_combine(t, t.constant(x), t.constant(g), tt, t_next).val();
}

Tensor euler_step(const DenoiserFn& g, const Tensor& x, double t, double t_next) {
    if (t <= 0.0) throw std::runtime_error("euler step: t must be positive");
    return euler_combine(x, g(x, t), t, t_next);
}

Tensor heun_step(const DenoiserFn& g, const Tensor& x, double t, double t_next) {
    if (t <= 0.0) throw std::runtime_error("heun step: t must be positive");
    if (t_next < 0.0 || t_next > t) throw std::runtime_error("heun step: need 0 <= t_next <= t");
    if (t_next == 0.0) return euler_step(g, x, t, t_next);
    Tape tp(16);
    Value xv = tp.constant(x);
    Value d1 = tp.mul_c(tp.sub(xv, tp.constant(g(x, t))), 1.0 / t);
    Value xe = tp.add(xv, tp.mul_c(d1, t_next - t));
    Value d2 = tp.mul_c(tp.sub(xe, tp.constant(g(xe.val(), t_next))), 1.0 / t_next);
    Value half = tp.mul_c(tp.add(d1, d2), 0.5);
    return tp.add(xv, tp.mul_c(half, t_next - t)).val();
}

Solver solver_from_name(const std::string& s) {
    if (s == "euler") return Solver::euler;
    if (s == "heun") return Solver::heun;
    throw std::runtime_error("unknown solver: " + s);
}

Tensor trajectory_noise(const std::vector<int64_t>& sample_dims, int batch, uint64_t seed, DType dt) {
    std::vector<int64_t> dims{batch};
    dims.insert(dims.end(), sample_dims.begin(), sample_dims.end());
    Tensor out = Tensor::zeros(dims, dt);
    int64_t per = out.numel() / batch;
    for (int i = 0; i < batch; ++i) {
        Rng r(splitmix64(seed + static_cast<uint64_t>(i)));
        for (int64_t j = 0; j < per; ++j) out.set(i * per + j, r.normal());
    }
    return out;
}

SampleSet sample(const ScoreNet& net, const SamplerSpec& sp, const ScheduleSpec& sch,
                 const PreconditioningSpec& pc, int batch, const std::vector<int>* classes,
                 ActivationRecorder* rec) {
    if (sp.steps < 1) throw std::runtime_error("sample: steps must be >= 1");
    if (batch < 1) throw std::runtime_error("sample: batch must be >= 1");

    SampleSet set;
    set.seed_lo = sp.seed;
    set.seed_hi = sp.seed + static_cast<uint64_t>(batch);

    Tensor z = trajectory_noise(net.input_dims(), batch, sp.seed, net.dtype());
    Tensor x;
    {
        Tape t(8);
        x = t.mul_c(t.constant(z), sch.sigma_max).val();
    }

    int64_t nfe = 0;
    auto g = [&](const Tensor& xt, double sigma) {
        ++nfe;
        return denoise_eval(net, xt, std::vector<double>(static_cast<size_t>(batch), sigma), pc,
                            classes, rec);
    };
    for (int i = sp.steps; i >= 1; --i) {
        double t = schedule_time(i, sp.steps, sch);
        double t_next = i > 1 ? schedule_time(i - 1, sp.steps, sch) : 0.0;
        x = sp.solver == Solver::heun ? heun_step(g, x, t, t_next) : euler_step(g, x, t, t_next);
    }
    set.samples = std::move(x);
    set.nfe = nfe;
    return set;
}

Tensor analytic_denoiser(const Tensor& x, double t, double s2) {
    if (s2 <= 0.0) throw std::runtime_error("analytic denoiser: variance must be positive");
    Tape tp(4);
    return tp.mul_c(tp.constant(x), s2 / (s2 + t * t)).val();
}

Value dsm_loss(Tape& t, const ScoreNet& net, const Bound& b, const Tensor& x0,
               const std::vector<int>* classes, Rng& rng, const ScheduleSpec& sch,
               const PreconditioningSpec& pc) {
    int64_t bsz = x0.dims()[0];
    std::vector<double> sigmas(static_cast<size_t>(bsz));
    for (auto& s : sigmas) {
        s = std::exp(-1.2 + 1.2 * rng.normal());
        s = std::min(std::max(s, pc.epsilon), sch.sigma_max);
    }
    Tensor noise = rng.normal_tensor(x0.dims(), x0.dtype());
    Tensor sig_full = rowwise(sigmas, x0.dims(), x0.dtype());

    Value x0v = t.constant(x0);
    Value xt = t.add(x0v, t.mul(t.constant(noise), t.constant(sig_full)));
    Value g = precondition(t, net, b, xt, sigmas, pc, classes);
    Value diff = t.sub(g, x0v);

    double sd = pc.sigma_data;
    std::vector<double> w(static_cast<size_t>(bsz));
    for (size_t i = 0; i < w.size(); ++i) {
        double s = sigmas[i];
        w[i] = (s * s + sd * sd) / ((s * sd) * (s * sd)) / static_cast<double>(bsz);
    }
    Value weights = t.constant(rowwise(w, x0.dims(), x0.dtype()));
    return t.sum_all(t.mul(t.mul(diff, diff), weights));
}

std::vector<double> train_score(ScoreNet& net, const Tensor& data, const std::vector<int>* labels,
                                const ScoreTrainConfig& cfg, const ScheduleSpec& sch,
                                const PreconditioningSpec& pc) {
    int64_t n = data.dims()[0];
    if (n < 1) throw std::runtime_error("train_score: empty dataset");
    int64_t per = data.numel() / n;
    std::vector<int64_t> row_dims(data.dims().begin() + 1, data.dims().end());

    Adam opt({.lr = cfg.lr, .beta1 = cfg.beta1, .beta2 = cfg.beta2, .eps = 1e-8}, net.params());
    Rng rng(seed_stream(cfg.seed, "score-train"));
    std::vector<double> trace;
    trace.reserve(static_cast<size_t>(cfg.iters));

    for (int it = 0; it < cfg.iters; ++it) {
        std::vector<int64_t> dims{cfg.batch};
        dims.insert(dims.end(), row_dims.begin(), row_dims.end());
        Tensor xb = Tensor::zeros(dims, data.dtype());
        std::vector<int> cb(static_cast<size_t>(cfg.batch));
        for (int i = 0; i < cfg.batch; ++i) {
            int64_t row = static_cast<int64_t>(rng.range(static_cast<uint64_t>(n)));
            for (int64_t j = 0; j < per; ++j) xb.set(i * per + j, data.at(row * per + j));
            if (labels) cb[static_cast<size_t>(i)] = (*labels)[static_cast<size_t>(row)];
        }
        Tape t(4096);
        Bound b = bind(t, net.params(), true);
        Value loss = dsm_loss(t, net, b, xb, labels ? &cb : nullptr, rng, sch, pc);
        Grads g = t.backward(loss);
        opt.step(net.params(), aligned_grads(t, g, b));
        trace.push_back(loss.val().at(0));
    }
    return trace;
}

}  // namespace ddl
