#include "ddl/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>

namespace ddl {

namespace {

Tensor gather_batch(const Tensor& data, int batch, Rng& rng) {
    int64_t n = data.dims()[0];
    int64_t per = data.numel() / n;
    std::vector<int64_t> dims{batch};
    dims.insert(dims.end(), data.dims().begin() + 1, data.dims().end());
    Tensor xb = Tensor::zeros(dims, data.dtype());
    for (int i = 0; i < batch; ++i) {
        int64_t row = rng.range(n);
        for (int64_t j = 0; j < per; ++j) xb.set(i * per + j, data.at(row * per + j));
    }
    return xb;
}

// Evaluation time of step m (counted down from k) of the k-step map; a
// two-step map may have its middle time overridden.
double eval_time(int m, int k, const std::optional<double>& mid, const ScheduleSpec& sch) {
    if (mid && k == 2 && m == 1) return *mid;
    return schedule_time(m, k, sch);
}

// z -> sample in k denoiser calls: Euler steps down the k-step grid, with the
// last step landing on the denoised estimate itself. k = 1 is the one-step
// generator g(sigma_max·z, sigma_max).
Value kstep_forward(Tape& t, const ScoreNet& net, const Bound& b, Value z, int k,
                    const std::optional<double>& mid, const ScheduleSpec& sch,
                    const PreconditioningSpec& pc) {
    size_t bsz = static_cast<size_t>(z.dims()[0]);
    Value x = t.mul_c(z, sch.sigma_max);
    for (int m = k; m >= 1; --m) {
        double tm = eval_time(m, k, mid, sch);
        Value g = precondition(t, net, b, x, std::vector<double>(bsz, tm), pc);
        if (m == 1) return g;
        x = euler_combine(t, x, g, tm, eval_time(m - 1, k, mid, sch));
    }
    return x;  // not reached, k >= 1
}

Tensor kstep_eval(const ScoreNet& net, const Tensor& z, int k, const std::optional<double>& mid,
                  const ScheduleSpec& sch, const PreconditioningSpec& pc) {
    Tape t(4096);
    Bound b = bind(t, net.params(), false);
    return kstep_forward(t, net, b, t.constant(z), k, mid, sch, pc).val();
}

void check_times(DistillMethod method, const InstanceTimes& tm, const ScheduleSpec& sch) {
    if (!(tm.t > 0.0)) throw std::runtime_error("instance loss: t must be positive");
    if (tm.s < 0.0) throw std::runtime_error("instance loss: s must be non-negative");
    switch (method) {
        case DistillMethod::pd:
            if (!(tm.t > tm.u && tm.u > tm.s))
                throw std::runtime_error("instance loss: the two step split needs t > u > s");
            break;
        case DistillMethod::cd:
            if (!(tm.t > tm.u && tm.u >= tm.s))
                throw std::runtime_error("instance loss: one step consistency needs t > u >= s");
            break;
        case DistillMethod::ctm:
            if (!(tm.t >= tm.u && tm.u >= tm.s))
                throw std::runtime_error("instance loss: the trajectory map needs t >= u >= s");
            if (tm.is < 0 || tm.iu < tm.is || tm.it < tm.iu || tm.it > sch.steps)
                throw std::runtime_error("instance loss: trajectory indices out of range");
            break;
        default:
            throw std::runtime_error("instance loss: the k-step GAN objective has no trajectory times");
    }
}

const std::set<Category> kAllCategories{Category::norm, Category::conv, Category::qkv,
                                        Category::skip, Category::io};

struct EngineSteps {
    int k = 1;
    std::optional<double> mid;
};

// Shared adversarial loop. One discriminator update then one generator update
// per step; the three public entry points only differ in how many solver
// steps the generator takes and whether a consistency term joins its loss.
DistillResult run_engine(const ScoreNet& score_init, const DiscriminatorSpec& disc_spec,
                         const Tensor& data, const DistillSpec& spec, const EngineSteps& eng,
                         const ScheduleSpec& sch, const PreconditioningSpec& pc) {
    const GANConfig& gc = spec.gan;
    if (gc.batch < 1) throw std::runtime_error("distill: batch must be >= 1");
    if (gc.total_images < gc.batch)
        throw std::runtime_error("distill: total_images must cover at least one batch");
    if (gc.lr_g <= 0.0 || gc.lr_d <= 0.0)
        throw std::runtime_error("distill: learning rates must be positive");
    if (gc.gamma_r1 < 0.0) throw std::runtime_error("distill: gamma must be non-negative");
    if (gc.ema_halflife_images < 1)
        throw std::runtime_error("distill: ema halflife must cover at least one image");
    if (gc.ema_warmup_ratio <= 0.0 || gc.ema_warmup_ratio > 1.0)
        throw std::runtime_error("distill: ema warmup ratio must lie in (0, 1]");
    if (spec.cd_weight < 0.0) throw std::runtime_error("distill: cd weight must be non-negative");
    if (spec.cd_weight > 0.0 && spec.cd_schedule_n < 1)
        throw std::runtime_error("distill: the consistency grid needs at least one step");
    if (data.dims().empty() || data.dims()[0] < 1) throw std::runtime_error("distill: empty dataset");

    ScoreNet gen = score_init;
    int64_t per = gen.data_dim();
    if (data.numel() / data.dims()[0] != per)
        throw std::runtime_error("distill: dataset row size does not match the generator");
    if (data.dtype() != gen.dtype())
        throw std::runtime_error("distill: dataset dtype must match the generator");
    if (disc_spec.in_dim != per)
        throw std::runtime_error("distill: discriminator input width does not match the data");

    if (!spec.freeze.empty()) {
        std::set<Category> trainable = kAllCategories;
        for (Category c : spec.freeze) trainable.erase(c);
        apply_freeze_mask(gen.params(), trainable);
    }

    Discriminator disc = build_discriminator(disc_spec, gen.dtype());
    Adam opt_g({.lr = gc.lr_g, .beta1 = gc.adam_beta1, .beta2 = gc.adam_beta2, .eps = 1e-8},
               gen.params());
    Adam opt_d({.lr = gc.lr_d, .beta1 = gc.adam_beta1, .beta2 = gc.adam_beta2, .eps = 1e-8},
               disc.params());
    EMAState ema = ema_init(gen.params());

    // Separate streams per concern: a run that never draws from one of them
    // (gamma 0, cd weight 0) stays bitwise identical on the others.
    Rng rng_z(seed_stream(spec.seed, "gan.noise"));
    Rng rng_data(seed_stream(spec.seed, "gan.data"));
    Rng rng_cd(seed_stream(spec.seed, "gan.cd"));

    ScheduleSpec cd_sch = sch;
    cd_sch.steps = spec.cd_schedule_n;

    std::vector<int64_t> zdims{gc.batch};
    std::vector<int64_t> in_dims = gen.input_dims();
    zdims.insert(zdims.end(), in_dims.begin(), in_dims.end());

    bool want_r1 = gc.gamma_r1 > 0.0;
    int64_t steps = gc.total_images / gc.batch;
    std::vector<TrainLogRow> log;
    log.reserve(static_cast<size_t>(steps));

    for (int64_t step = 0; step < steps; ++step) {
        // discriminator update on a fresh fake batch, no generator gradients
        Tensor z = rng_z.normal_tensor(zdims, gen.dtype());
        Tensor fake = kstep_eval(gen, z, eng.k, eng.mid, sch, pc);
        Tensor realb = gather_batch(data, gc.batch, rng_data);
        double d_loss_v = 0.0, r1_v = 0.0;
        {
            Tape t(4096);
            Bound db = bind(t, disc.params(), true);
            Value real = t.leaf(realb.reshaped({gc.batch, per}), want_r1, "real");
            Value fk = t.constant(fake.reshaped({gc.batch, per}));
            Value d_loss = gan_d_loss(t, disc, db, real, fk);
            d_loss_v = d_loss.val().at(0);
            Value objective = d_loss;
            if (want_r1) {
                Value pen = r1_penalty(t, disc, db, real, gc.gamma_r1);
                r1_v = pen.val().at(0);
                objective = t.add(d_loss, pen);
            }
            Grads g = t.backward(objective);
            opt_d.step(disc.params(), aligned_grads(t, g, db));
        }

        // generator update against the fixed discriminator
        auto t0 = std::chrono::steady_clock::now();
        Tensor z2 = rng_z.normal_tensor(zdims, gen.dtype());
        double g_loss_v = 0.0;
        {
            Tape t(8192);
            Bound gb = bind(t, gen.params(), true);
            Value fake_v = kstep_forward(t, gen, gb, t.constant(z2), eng.k, eng.mid, sch, pc);
            Bound df = bind(t, disc.params(), false);
            Value g_loss = gan_g_loss(t, disc, df, t.reshape(fake_v, {gc.batch, per}));
            if (spec.cd_weight > 0.0) {
                Tensor x0 = gather_batch(data, gc.batch, rng_cd);
                Value cd = instance_loss(t, DistillMethod::cd, gen, gb, score_init, spec.cd_solver,
                                         x0, rng_cd, cd_sch, pc);
                g_loss = t.add(g_loss, t.mul_c(cd, spec.cd_weight));
            }
            g_loss_v = g_loss.val().at(0);
            if (!std::isfinite(g_loss_v))
                throw std::runtime_error("distill: generator loss is not finite at step " +
                                         std::to_string(step));
            Grads g = t.backward(g_loss);
            opt_g.step(gen.params(), aligned_grads(t, g, gb));
        }
        ema_update(ema, gen.params(), gc.batch, gc.ema_halflife_images, gc.ema_warmup_ratio);
        auto t1 = std::chrono::steady_clock::now();
        double ms = spec.deterministic
                        ? 0.0
                        : std::chrono::duration<double, std::milli>(t1 - t0).count();
        log.push_back({step, ema.images_seen, d_loss_v, g_loss_v, r1_v, ms});
    }

    ema_apply(ema, gen.params());
    return {std::move(gen), std::move(log)};
}

}  // namespace

DistillMethod distill_method_from_name(const std::string& s) {
    if (s == "pd") return DistillMethod::pd;
    if (s == "cd") return DistillMethod::cd;
    if (s == "ctm") return DistillMethod::ctm;
    if (s == "kstep" || s == "kstep-gan") return DistillMethod::kstep_gan;
    throw std::runtime_error("unknown distillation method: " + s);
}

const char* distill_method_name(DistillMethod m) {
    switch (m) {
        case DistillMethod::pd: return "pd";
        case DistillMethod::cd: return "cd";
        case DistillMethod::ctm: return "ctm";
        case DistillMethod::kstep_gan: return "kstep-gan";
    }
    return "?";
}

EMAState ema_init(const ParamStore& ps) {
    EMAState e;
    e.shadow.reserve(ps.size());
    for (size_t i = 0; i < ps.size(); ++i) e.shadow.push_back(ps.at(i).value);
    return e;
}

void ema_update(EMAState& ema, const ParamStore& ps, int64_t batch_images,
                int64_t halflife_images, double warmup_ratio) {
    if (ema.shadow.size() != ps.size())
        throw std::runtime_error("ema: store size changed since init");
    if (batch_images < 1) throw std::runtime_error("ema: batch must be >= 1");
    if (halflife_images < 1) throw std::runtime_error("ema: halflife must cover at least one image");
    if (warmup_ratio <= 0.0 || warmup_ratio > 1.0)
        throw std::runtime_error("ema: warmup ratio must lie in (0, 1]");

    // The effective halflife ramps up with images seen so early updates track
    // the model closely; the very first one copies it outright.
    double beta = 0.0;
    if (ema.images_seen > 0) {
        double h_eff = std::min(static_cast<double>(halflife_images),
                                warmup_ratio * static_cast<double>(ema.images_seen));
        beta = std::pow(0.5, static_cast<double>(batch_images) / h_eff);
    }
    for (size_t i = 0; i < ps.size(); ++i) {
        const Parameter& p = ps.at(i);
        if (p.frozen) continue;  // frozen weights never move, keep the init copy bit for bit
        Tensor& s = ema.shadow[i];
        for (int64_t j = 0; j < s.numel(); ++j)
            s.set(j, beta * s.at(j) + (1.0 - beta) * p.value.at(j));
    }
    ema.images_seen += batch_images;
}

void ema_apply(const EMAState& ema, ParamStore& ps) {
    if (ema.shadow.size() != ps.size())
        throw std::runtime_error("ema: store size changed since init");
    for (size_t i = 0; i < ps.size(); ++i) {
        if (ps.at(i).value.dims() != ema.shadow[i].dims())
            throw std::runtime_error("ema: parameter shape changed since init");
        ps.at(i).value = ema.shadow[i];
    }
}

InstanceTimes draw_instance_times(DistillMethod method, const ScheduleSpec& sch, Rng& rng) {
    int n = sch.steps;
    InstanceTimes tm;
    switch (method) {
        case DistillMethod::pd: {
            if (n < 2)
                throw std::runtime_error("instance times: the two step split needs a grid of >= 2");
            tm.it = 2 + static_cast<int>(rng.range(n - 1));
            // s sits an even number of cells below t so the midpoint u stays
            // on the grid
            int count = (tm.it - 2) / 2 + 1;
            tm.is = tm.it - 2 - 2 * static_cast<int>(rng.range(count));
            tm.iu = (tm.it + tm.is) / 2;
            break;
        }
        case DistillMethod::cd: {
            if (n < 1)
                throw std::runtime_error("instance times: the consistency grid needs >= 1 step");
            tm.it = 1 + static_cast<int>(rng.range(n));
            tm.iu = tm.it - 1;
            tm.is = 0;
            break;
        }
        case DistillMethod::ctm: {
            if (n < 2)
                throw std::runtime_error("instance times: the trajectory grid needs >= 2 steps");
            tm.it = 2 + static_cast<int>(rng.range(n - 1));
            tm.iu = 1 + static_cast<int>(rng.range(tm.it));
            tm.is = static_cast<int>(rng.range(tm.iu + 1));
            break;
        }
        default:
            throw std::runtime_error("instance times: the k-step GAN objective draws no times");
    }
    tm.t = schedule_time(tm.it, n, sch);
    tm.u = schedule_time(tm.iu, n, sch);
    tm.s = schedule_time(tm.is, n, sch);
    return tm;
}

Value instance_loss_at(Tape& t, DistillMethod method, const InstanceBranches& br,
                       const InstanceTimes& tm, const Tensor& x0, const Tensor& noise,
                       Solver solver, const ScheduleSpec& sch) {
    check_times(method, tm, sch);
    if (x0.dims() != noise.dims())
        throw std::runtime_error("instance loss: noise shape must match the batch");
    double bsz = static_cast<double>(x0.dims()[0]);
    Tensor xt = perturb(x0, tm.t, noise);

    auto solver_step = [&](const Tensor& x, double a, double b) {
        return solver == Solver::heun ? heun_step(br.score_eval, x, a, b)
                                      : euler_step(br.score_eval, x, a, b);
    };
    auto msq = [&](Value a, Value b) {
        Value d = t.sub(a, b);
        return t.mul_c(t.sum_all(t.mul(d, d)), 1.0 / bsz);
    };

    Value xtv = t.constant(xt);
    switch (method) {
        case DistillMethod::pd: {
            // two solver steps t -> u -> s, then the endpoint pulled back to
            // the denoiser scale: g(x_t, t) should hit (t/(t-s))·(H - x_t) + x_t
            Tensor h = solver_step(solver_step(xt, tm.t, tm.u), tm.u, tm.s);
            Tensor target;
            {
                Tape tt(8);
                target = tt.add(tt.mul_c(tt.sub(tt.constant(h), tt.constant(xt)), tm.t / (tm.t - tm.s)),
                                tt.constant(xt))
                             .val();
            }
            return msq(br.student(t, xtv, tm.t), t.constant(target));
        }
        case DistillMethod::cd: {
            // one solver step to u, then the student's own jump to s serves
            // as the target for its direct jump from t
            Tensor xu = solver_step(xt, tm.t, tm.u);
            Tensor h = euler_combine(xu, br.student_eval(xu, tm.u), tm.u, tm.s);
            Value f = euler_combine(t, xtv, br.student(t, xtv, tm.t), tm.t, tm.s);
            return msq(f, t.constant(h));
        }
        case DistillMethod::ctm: {
            // teacher: walk the grid from t to u with the frozen score model
            // (an empty gap is the identity), jump to s with the detached
            // student, then both sides project to the schedule floor
            Tensor xu = xt;
            for (int i = tm.it; i > tm.iu; --i)
                xu = euler_step(br.score_eval, xu, schedule_time(i, sch.steps, sch),
                                schedule_time(i - 1, sch.steps, sch));
            Tensor h = euler_combine(xu, br.student_eval(xu, tm.u), tm.u, tm.s);
            Tensor ht = euler_combine(h, br.student_eval(h, tm.s), tm.s, sch.sigma_min);
            Value v = euler_combine(t, xtv, br.student(t, xtv, tm.t), tm.t, tm.s);
            Value vs = euler_combine(t, v, br.student_sg(t, v, tm.s), tm.s, sch.sigma_min);
            return msq(vs, t.constant(ht));
        }
        default:
            throw std::runtime_error("instance loss: unsupported method");
    }
}

Value instance_loss(Tape& t, DistillMethod method, const ScoreNet& student, const Bound& student_b,
                    const ScoreNet& score_model, Solver solver, const Tensor& x0, Rng& rng,
                    const ScheduleSpec& sch, const PreconditioningSpec& pc) {
    InstanceTimes tm = draw_instance_times(method, sch, rng);
    Tensor noise = rng.normal_tensor(x0.dims(), x0.dtype());

    InstanceBranches br;
    br.student = [&student, &student_b, &pc](Tape& tp, Value x, double sg) {
        return precondition(tp, student, student_b, x,
                            std::vector<double>(static_cast<size_t>(x.dims()[0]), sg), pc);
    };
    // the outer projection uses the student's current weights but must not
    // push gradients into them, so it gets its own no-grad binding
    Bound frozen;
    if (method == DistillMethod::ctm) frozen = bind(t, student.params(), false);
    br.student_sg = [&student, frozen, &pc](Tape& tp, Value x, double sg) {
        return precondition(tp, student, frozen, x,
                            std::vector<double>(static_cast<size_t>(x.dims()[0]), sg), pc);
    };
    br.student_eval = [&student, &pc](const Tensor& x, double sg) {
        return denoise_eval(student, x, std::vector<double>(static_cast<size_t>(x.dims()[0]), sg), pc);
    };
    br.score_eval = [&score_model, &pc](const Tensor& x, double sg) {
        return denoise_eval(score_model, x, std::vector<double>(static_cast<size_t>(x.dims()[0]), sg),
                            pc);
    };
    return instance_loss_at(t, method, br, tm, x0, noise, solver, sch);
}

Value gan_d_loss(Tape& t, const Discriminator& disc, const Bound& disc_b, Value real, Value fake) {
    if (real.dims() != fake.dims())
        throw std::runtime_error("gan loss: real and fake batches must match");
    std::vector<Value> lr = disc.logits(t, disc_b, real);
    std::vector<Value> lf = disc.logits(t, disc_b, fake);
    Value acc;
    for (size_t l = 0; l < lr.size(); ++l) {
        Value term = t.add(t.sum_all(t.softplus(t.neg(lr[l]))), t.sum_all(t.softplus(lf[l])));
        acc = l == 0 ? term : t.add(acc, term);
    }
    return t.mul_c(acc, 1.0 / static_cast<double>(real.dims()[0]));
}

Value gan_g_loss(Tape& t, const Discriminator& disc, const Bound& disc_b, Value fake) {
    std::vector<Value> lf = disc.logits(t, disc_b, fake);
    Value acc;
    for (size_t l = 0; l < lf.size(); ++l) {
        Value term = t.sum_all(t.softplus(t.neg(lf[l])));
        acc = l == 0 ? term : t.add(acc, term);
    }
    return t.mul_c(acc, 1.0 / static_cast<double>(fake.dims()[0]));
}

Value r1_penalty(Tape& t, const Discriminator& disc, const Bound& disc_b, Value real, double gamma) {
    if (gamma < 0.0) throw std::runtime_error("r1 penalty: gamma must be non-negative");
    if (!real.requires_grad())
        throw std::runtime_error("r1 penalty: the real batch needs gradients enabled");
    std::vector<Value> ls = disc.logits(t, disc_b, real);
    Value s;
    for (size_t l = 0; l < ls.size(); ++l) {
        Value sl = t.sum_all(ls[l]);
        s = l == 0 ? sl : t.add(s, sl);
    }
    // the gradient is a tape node itself, so the penalty backpropagates into
    // the discriminator weights like any other loss term
    Value gx = t.backward_as_graph(s, real);
    return t.mul_c(t.sum_all(t.mul(gx, gx)),
                   0.5 * gamma / static_cast<double>(real.dims()[0]));
}

DistillResult distill_gdd(const ScoreNet& score_init, const DiscriminatorSpec& disc_spec,
                          const Tensor& data, DistillSpec spec, const ScheduleSpec& sch,
                          const PreconditioningSpec& pc) {
    spec.cd_weight = 0.0;  // one-step map, discriminator signal only
    return run_engine(score_init, disc_spec, data, spec, {1, std::nullopt}, sch, pc);
}

DistillResult distill_combined(const ScoreNet& score_init, const DiscriminatorSpec& disc_spec,
                               const Tensor& data, DistillSpec spec, const ScheduleSpec& sch,
                               const PreconditioningSpec& pc) {
    return run_engine(score_init, disc_spec, data, spec, {1, std::nullopt}, sch, pc);
}

DistillResult train_kstep_teacher(const ScoreNet& score_init, const DiscriminatorSpec& disc_spec,
                                  const Tensor& data, DistillSpec spec, const TeacherSpec& teacher,
                                  const ScheduleSpec& sch, const PreconditioningSpec& pc) {
    if (teacher.k != 1 && teacher.k != 2 && teacher.k != 4 && teacher.k != 8 && teacher.k != 10)
        throw std::runtime_error("teacher: step count must be one of 1, 2, 4, 8, 10");
    if (teacher.intermediate_sigma_override) {
        if (teacher.k != 2)
            throw std::runtime_error("teacher: the intermediate sigma override needs exactly two steps");
        double v = *teacher.intermediate_sigma_override;
        if (!(v > sch.sigma_min && v < sch.sigma_max))
            throw std::runtime_error("teacher: the intermediate sigma must lie strictly inside the schedule");
    }
    spec.cd_weight = 0.0;
    return run_engine(score_init, disc_spec, data, spec,
                      {teacher.k, teacher.intermediate_sigma_override}, sch, pc);
}

SampleSet sample_kstep(const ScoreNet& net, int k, std::optional<double> mid_override,
                       int64_t batch, uint64_t seed, const ScheduleSpec& sch,
                       const PreconditioningSpec& pc) {
    if (k < 1) throw std::runtime_error("sample: steps must be >= 1");
    if (batch < 1) throw std::runtime_error("sample: batch must be >= 1");
    if (mid_override && k != 2)
        throw std::runtime_error("sample: the intermediate sigma override needs exactly two steps");
    Tensor z = trajectory_noise(net.input_dims(), static_cast<int>(batch), seed, net.dtype());
    SampleSet set;
    set.seed_lo = seed;
    set.seed_hi = seed + static_cast<uint64_t>(batch);
    set.samples = kstep_eval(net, z, k, mid_override, sch, pc);
    set.nfe = k;
    return set;
}

}  // namespace ddl
