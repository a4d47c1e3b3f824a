// End-to-end acceptance runner. Each numbered check prints one PASS/FAIL line
// and the binary exits nonzero if any of them failed. Checks 5-10 train small
// adversarial models from a shared pre-trained ring8 score net, so the whole
// run takes tens of minutes on one core; everything is seeded and bit-exact
// across repeat runs on the same build.
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ddl/distill.hpp"
#include "ddl/harness.hpp"
#include "ddl/metrics.hpp"
#include "ddl/profiler.hpp"
#include "gradcases.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace ddl;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int idx, const std::string& name, bool pass, const std::string& detail,
            double seconds) {
    std::printf("%s  %2d. %-34s %s  (%.1fs)\n", pass ? "PASS" : "FAIL", idx, name.c_str(),
                detail.c_str(), seconds);
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double rel_l2(const Tensor& got, const Tensor& want) {
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < got.numel(); ++i) {
        double d = got.at(i) - want.at(i);
        num += d * d;
        den += want.at(i) * want.at(i);
    }
    return std::sqrt(num / den);
}

std::string fmt(const char* f, ...) {
    char buf[256];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

// ---------------------------------------------------------------------------
// shared fixture: a ring8 score net pre-trained well enough that its 32-step
// Heun samples sit at the finite-sample floor of the Frechet metric

struct Fixture {
    ScoreNet net;
    Dataset train;          // 8192 ring8 points the models see
    Dataset held;           // 2048 held-out points, never trained on
    SampleSet teacher;      // 32-step Heun samples from the score net
    double teacher_frechet; // raw-coordinate distance teacher -> held
};

const Fixture& fixture() {
    static Fixture fx = [] {
        const uint64_t root = 11;
        Dataset train = gen_dataset(DatasetKind::ring8, 8192, seed_stream(root, "data"));
        ScoreNet net({ModelKind::mlp2d, 64, 2, 64, 0, seed_stream(root, "model")});
        ScheduleSpec sch;
        PreconditioningSpec pc;
        ScoreTrainConfig phase1{3000, 128, 2e-3, 0.9, 0.999, seed_stream(root, "p1")};
        train_score(net, train.x, nullptr, phase1, sch, pc);
        ScoreTrainConfig phase2{1500, 128, 5e-4, 0.9, 0.999, seed_stream(root, "p2")};
        train_score(net, train.x, nullptr, phase2, sch, pc);

        Dataset held = gen_dataset(DatasetKind::ring8, 2048, 4242);
        SampleSet teacher = sample(net, {Solver::heun, 32, 777}, sch, pc, 2048);
        FeatureMap raw(FeatureMapSpec{FeatureKind::raw, 0, 16}, 2);
        double tf = frechet_distance(teacher.samples, held.x, raw);
        return Fixture{std::move(net), std::move(train), std::move(held), std::move(teacher), tf};
    }();
    return fx;
}

// one-step distillation recipe shared by checks 5-8; the plain two-layer
// discriminator turned out far more reliable than the projected one at this
// scale, and gamma 1e-2 keeps the 5e-4 learning rate stable
DistillSpec student_spec(uint64_t seed) {
    DistillSpec ds;
    ds.gan.batch = 256;
    ds.gan.total_images = 393216;
    ds.gan.lr_g = 5e-4;
    ds.gan.lr_d = 5e-4;
    ds.gan.gamma_r1 = 1e-2;
    ds.seed = seed;
    ds.deterministic = true;
    return ds;
}

DiscriminatorSpec plain_disc() { return {DiscKind::plain, 2, 4, 32, 64, 7, 11}; }

struct GenEval {
    double frechet = 0.0;
    double cov_min = 0.0;
};

GenEval eval_generator(const ScoreNet& gen) {
    const Fixture& fx = fixture();
    ScheduleSpec sch;
    PreconditioningSpec pc;
    FeatureMap raw(FeatureMapSpec{FeatureKind::raw, 0, 16}, 2);
    SampleSet set = sample_kstep(gen, 1, std::nullopt, 2048, 777, sch, pc);
    GenEval ev;
    ev.frechet = frechet_distance(set.samples, fx.held.x, raw);
    ModeCoverage mc = mode_coverage(set.samples, ring8_centers(), 0.15);
    ev.cov_min = 1.0;
    for (double c : mc.fraction) ev.cov_min = std::min(ev.cov_min, c);
    return ev;
}

// students for the teacher-step and sigma sweeps, cached per seed
const ScoreNet& sweep_student(uint64_t seed) {
    static std::map<uint64_t, ScoreNet> cache;
    auto it = cache.find(seed);
    if (it == cache.end()) {
        const Fixture& fx = fixture();
        DistillSpec ds = student_spec(seed_stream(seed, "distill"));
        DistillResult res =
            distill_gdd(fx.net, plain_disc(), fx.train.x, ds, ScheduleSpec{}, PreconditioningSpec{});
        it = cache.emplace(seed, std::move(res.generator)).first;
    }
    return it->second;
}

// ---------------------------------------------------------------------------

bool check1_autodiff() {
    gradcases::SweepReport rep = gradcases::run(50, 2024);
    bool pass = rep.first_order < 1e-4 && rep.second_order < 1e-3 && rep.probes >= 50;
    std::printf("      first-order worst %.2e, second-order worst %.2e, %lld probes\n",
                rep.first_order, rep.second_order, static_cast<long long>(rep.probes));
    return pass;
}

bool check2_schedule(std::string& detail) {
    ScheduleSpec sch;
    double lo = schedule_time(0, 18, sch);
    double hi = schedule_time(18, 18, sch);

    // high-precision reference evaluated in long double arithmetic
    auto ref = [](int i, int n) {
        long double inv = 1.0L / 7.0L;
        long double a = powl(0.002L, inv), b = powl(80.0L, inv);
        long double u = a + (static_cast<long double>(i) / n) * (b - a);
        return static_cast<double>(powl(u, 7.0L));
    };
    double mid = schedule_time(9, 18, sch);
    double mid_ref = ref(9, 18);
    detail = fmt("T(9,18)=%.6f ref=%.6f", mid, mid_ref);
    return std::abs(lo - 0.002) < 1e-9 && std::abs(hi - 80.0) < 1e-9 &&
           std::abs(mid - mid_ref) < 1e-9 && std::abs(mid - 2.5158) <= 1e-3;
}

bool check3_solver_order(std::string& detail) {
    const double s2 = 1.0, hi = 8.0, lo = 0.5;
    Rng rng(55);
    Tensor x0 = rng.normal_tensor({16}, DType::f64);
    DenoiserFn denoi = [&](const Tensor& xv, double t) { return analytic_denoiser(xv, t, s2); };
    auto run = [&](bool heun, int n) {
        Tensor x = x0;
        for (int i = n; i >= 1; --i) {
            double t = hi * std::pow(lo / hi, static_cast<double>(n - i) / n);
            double tn = hi * std::pow(lo / hi, static_cast<double>(n - i + 1) / n);
            x = heun ? heun_step(denoi, x, t, tn) : euler_step(denoi, x, t, tn);
        }
        double err = 0.0;
        for (int64_t i = 0; i < x.numel(); ++i)
            err = std::max(err, std::abs(x.at(i) - oracle::gaussian_flow_ref(x0.at(i), hi, lo, s2)));
        return err;
    };
    double re = run(false, 24) / run(false, 48);
    double rh = run(true, 24) / run(true, 48);
    detail = fmt("euler ratio %.2f, heun ratio %.2f", re, rh);
    return re > 1.6 && re < 2.4 && rh > 3.2 && rh < 4.8;
}

bool check4_pretraining(std::string& detail) {
    const double std_dev = 0.8, s2 = std_dev * std_dev;
    Rng rd(21);
    Tensor data = rd.normal_tensor({65536, 2}, DType::f32);
    {
        Tape t(8);
        data = t.mul_c(t.constant(data), std_dev).val();
    }
    ScoreNet net({ModelKind::mlp2d, 64, 2, 64, 0, 22});
    ScheduleSpec sch;
    PreconditioningSpec pc;
    train_score(net, data, nullptr, {3000, 128, 2e-3, 0.9, 0.999, 23}, sch, pc);
    train_score(net, data, nullptr, {1500, 128, 5e-4, 0.9, 0.999, 24}, sch, pc);
    train_score(net, data, nullptr, {1500, 128, 1e-4, 0.9, 0.999, 25}, sch, pc);

    Rng rp(26);
    Tensor probe = rp.normal_tensor({256, 2}, DType::f32);
    {
        Tape t(8);
        probe = t.mul_c(t.constant(probe), std_dev).val();
    }
    double worst = 0.0;
    for (double sigma : {0.05, 0.1, 0.3, 0.5, 1.0}) {
        Tensor noise = rp.normal_tensor({256, 2}, DType::f32);
        Tensor xt = perturb(probe, sigma, noise);
        Tensor got = denoise_eval(net, xt, std::vector<double>(256, sigma), pc);
        Tensor want = analytic_denoiser(xt, sigma, s2);
        worst = std::max(worst, rel_l2(got, want));
    }
    detail = fmt("worst rel L2 %.1f%% over 5 sigmas", worst * 100.0);
    return worst < 0.05;
}

bool check5_distillation(std::string& detail) {
    const Fixture& fx = fixture();
    int good = 0;
    std::string parts;
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        DistillResult res = distill_gdd(fx.net, plain_disc(), fx.train.x, student_spec(seed),
                                        ScheduleSpec{}, PreconditioningSpec{});
        GenEval ev = eval_generator(res.generator);
        bool ok = ev.frechet <= 1.5 * fx.teacher_frechet && ev.cov_min >= 0.02;
        good += ok ? 1 : 0;
        parts += fmt("%s%.2fx/%.3f", parts.empty() ? "" : " ", ev.frechet / fx.teacher_frechet,
                     ev.cov_min);
    }
    detail = fmt("ratio/cov per seed: %s (teacher %.5f)", parts.c_str(), fx.teacher_frechet);
    return good >= 2;
}

bool check6_frozen_conv(std::string& detail) {
    const Fixture& fx = fixture();
    int good = 0;
    bool frozen_ok = true;
    std::string parts;
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        DistillSpec ds = student_spec(seed);
        ds.freeze.insert(Category::conv);
        DistillResult res = distill_gdd(fx.net, plain_disc(), fx.train.x, ds, ScheduleSpec{},
                                        PreconditioningSpec{});
        for (size_t i = 0; i < fx.net.params().size(); ++i) {
            const Parameter& before = fx.net.params().at(i);
            const Parameter& after = res.generator.params().at(i);
            if (before.cat == Category::conv && !after.value.bitwise_equal(before.value))
                frozen_ok = false;
        }
        GenEval ev = eval_generator(res.generator);
        bool ok = ev.frechet <= 1.5 * fx.teacher_frechet && ev.cov_min >= 0.02;
        good += ok ? 1 : 0;
        parts += fmt("%s%.2fx/%.3f", parts.empty() ? "" : " ", ev.frechet / fx.teacher_frechet,
                     ev.cov_min);
    }
    detail = fmt("ratio/cov per seed: %s, frozen %s", parts.c_str(),
                 frozen_ok ? "untouched" : "MOVED");
    return good >= 2 && frozen_ok;
}

bool check7_step_trend(std::string& detail) {
    const Fixture& fx = fixture();
    ScheduleSpec sch;
    PreconditioningSpec pc;
    FeatureMap fm(FeatureMapSpec{FeatureKind::frozen_random, 5050, 16}, 2);
    int good = 0;
    std::string parts;
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        SampleSet stu = sample_kstep(sweep_student(seed), 1, std::nullopt, 2048, 777, sch, pc);
        std::vector<std::pair<int, SampleSet>> teachers;
        for (int k : {2, 4, 8}) {
            DistillSpec ts = student_spec(seed_stream(seed, "teacher.k" + std::to_string(k)));
            ts.gan.total_images = 262144;
            DistillResult tr =
                train_kstep_teacher(fx.net, plain_disc(), fx.train.x, ts, {k, std::nullopt}, sch, pc);
            teachers.emplace_back(k, sample_kstep(tr.generator, k, std::nullopt, 2048, 777, sch, pc));
        }
        std::vector<RelAbsRow> rows = rel_abs_sweep(stu, teachers, fx.held.x, fm);
        bool rel_up = rows[0].rel_metric < rows[1].rel_metric && rows[1].rel_metric < rows[2].rel_metric;
        double amax = 0.0, amin = 1e30;
        for (const RelAbsRow& r : rows) {
            amax = std::max(amax, r.abs_metric);
            amin = std::min(amin, r.abs_metric);
        }
        bool abs_band = amax <= 1.25 * amin;
        good += (rel_up && abs_band) ? 1 : 0;
        parts += fmt("%srel %.4f/%.4f/%.4f abs x%.2f", parts.empty() ? "" : " | ",
                     rows[0].rel_metric, rows[1].rel_metric, rows[2].rel_metric, amax / amin);
    }
    detail = parts;
    return good >= 2;
}

bool check8_sigma_trend(std::string& detail) {
    const Fixture& fx = fixture();
    ScheduleSpec sch;
    PreconditioningSpec pc;
    FeatureMap fm(FeatureMapSpec{FeatureKind::frozen_random, 5050, 16}, 2);
    const std::vector<double> sigmas{0.5, 2.0, 8.0, 32.0};
    int good = 0;
    std::string parts;
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        SampleSet stu = sample_kstep(sweep_student(seed), 1, std::nullopt, 2048, 777, sch, pc);
        std::vector<double> rels;
        for (double sg : sigmas) {
            std::ostringstream tag;
            tag << "teacher.sigma" << sg;
            DistillSpec ts = student_spec(seed_stream(seed, tag.str()));
            ts.gan.total_images = 131072;
            DistillResult tr =
                train_kstep_teacher(fx.net, plain_disc(), fx.train.x, ts, {2, sg}, sch, pc);
            SampleSet smp = sample_kstep(tr.generator, 2, sg, 2048, 777, sch, pc);
            std::vector<std::pair<int, SampleSet>> one;
            one.emplace_back(2, std::move(smp));
            rels.push_back(rel_abs_sweep(stu, one, fx.held.x, fm)[0].rel_metric);
        }
        bool non_inc = true;
        for (size_t i = 1; i < rels.size(); ++i) non_inc = non_inc && rels[i] <= rels[i - 1];
        good += non_inc ? 1 : 0;
        parts += fmt("%s%.4f/%.4f/%.4f/%.4f", parts.empty() ? "" : " | ", rels[0], rels[1], rels[2],
                     rels[3]);
    }
    detail = parts;
    return good >= 2;
}

bool check9_combined_cost(std::string& detail) {
    const Fixture& fx = fixture();
    ScheduleSpec sch;
    PreconditioningSpec pc;
    DistillSpec base = student_spec(1);
    base.gan.batch = 64;
    base.gan.total_images = 8192;

    // wall-clock comparison wants real timings, so the deterministic flag
    // (which zeroes the logged cost) is dropped just for these two runs
    DistillSpec timed = base;
    timed.deterministic = false;
    auto mean_ms = [](const std::vector<TrainLogRow>& log) {
        double s = 0.0;
        for (const TrainLogRow& r : log) s += r.wall_ms;
        return s / static_cast<double>(log.size());
    };
    double ms_gdd = mean_ms(
        distill_gdd(fx.net, plain_disc(), fx.train.x, timed, sch, pc).log);
    DistillSpec comb = timed;
    comb.cd_weight = 1.0;
    double ms_comb = mean_ms(
        distill_combined(fx.net, plain_disc(), fx.train.x, comb, sch, pc).log);

    DistillResult a = distill_gdd(fx.net, plain_disc(), fx.train.x, base, sch, pc);
    DistillSpec zero = base;
    zero.cd_weight = 0.0;
    DistillResult b = distill_combined(fx.net, plain_disc(), fx.train.x, zero, sch, pc);
    bool bitwise = true;
    for (size_t i = 0; i < a.generator.params().size(); ++i)
        bitwise = bitwise &&
                  a.generator.params().at(i).value.bitwise_equal(b.generator.params().at(i).value);

    detail = fmt("g-update %.2fms vs %.2fms (x%.2f), cd=0 bitwise %s", ms_gdd, ms_comb,
                 ms_comb / ms_gdd, bitwise ? "yes" : "NO");
    return ms_comb >= 1.5 * ms_gdd && bitwise;
}

bool check10_r1_direction(std::string& detail) {
    const Fixture& fx = fixture();
    ScheduleSpec sch;
    PreconditioningSpec pc;
    FeatureMap raw(FeatureMapSpec{FeatureKind::raw, 0, 16}, 2);
    DiscriminatorSpec proj{DiscKind::projected, 2, 4, 32, 64, 7, 11};
    int good = 0;
    std::string parts;
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        double fr[2];
        for (int gi = 0; gi < 2; ++gi) {
            DistillSpec ds = student_spec(seed_stream(seed, "distill"));
            ds.gan.total_images = 131072;
            ds.gan.gamma_r1 = gi == 0 ? 1e-4 : 0.0;
            DistillResult res = distill_gdd(fx.net, proj, fx.train.x, ds, sch, pc);
            SampleSet set = sample_kstep(res.generator, 1, std::nullopt, 2048, 777, sch, pc);
            fr[gi] = frechet_distance(set.samples, fx.held.x, raw);
        }
        good += fr[0] <= fr[1] ? 1 : 0;
        parts += fmt("%s%.4f<=%.4f:%s", parts.empty() ? "" : " ", fr[0], fr[1],
                     fr[0] <= fr[1] ? "y" : "n");
    }
    detail = parts;
    return good >= 2;
}

bool check11_metric_oracles(std::string& detail) {
    Rng rng(4100);
    auto rows_of = [](const Tensor& t) {
        std::vector<std::vector<double>> rows(static_cast<size_t>(t.dims()[0]));
        int64_t d = t.dims()[1];
        for (int64_t i = 0; i < t.dims()[0]; ++i) {
            rows[static_cast<size_t>(i)].resize(static_cast<size_t>(d));
            for (int64_t j = 0; j < d; ++j) rows[static_cast<size_t>(i)][static_cast<size_t>(j)] = t.at(i * d + j);
        }
        return rows;
    };

    Tensor a = rng.normal_tensor({600, 6}, DType::f64);
    Tensor b = rng.normal_tensor({500, 6}, DType::f64);
    {
        Tape t(8);
        b = t.add_c(t.mul_c(t.constant(b), 1.3), 0.4).val();
    }
    FeatureMap raw(FeatureMapSpec{FeatureKind::raw, 0, 6}, 6);
    double got_f = frechet_distance(a, b, raw);
    double want_f = oracle::frechet_ref(rows_of(a), rows_of(b));
    double err_f = std::abs(got_f - want_f);

    Tensor xa = rng.normal_tensor({400, 3}, DType::f64);
    Tensor xb = rng.normal_tensor({300, 3}, DType::f64);
    double bw = median_bandwidth(xa, xb);
    double err_m = std::abs(mmd2_unbiased(xa, xb, std::nullopt) - oracle::mmd2_ref(rows_of(xa), rows_of(xb), bw));

    double self_f = frechet_distance(a, a, raw);

    detail = fmt("frechet err %.1e, mmd2 err %.1e, self %.1e", err_f, err_m, self_f);
    return err_f < 1e-6 && err_m < 1e-12 && std::abs(self_f) < 1e-9;
}

bool check12_profiler(std::string& detail) {
    const Fixture& fx = fixture();
    ScheduleSpec sch;
    PreconditioningSpec pc;
    ActivationMatrix m = record_activations(fx.net, 16, 8, 909, sch, pc);
    ActivationMatrix nm = minmax_normalize(m);
    bool range_ok = true;
    size_t layers = nm.layers.size(), steps = nm.values.size();
    for (size_t l = 0; l < layers; ++l) {
        double mn = 1e30, mx = -1e30;
        for (size_t r = 0; r < steps; ++r) {
            double v = nm.values[r][l];
            range_ok = range_ok && v >= 0.0 && v <= 1.0;
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        if (!nm.constant[l]) range_ok = range_ok && mn == 0.0 && mx == 1.0;
    }

    SamplerSpec sp{Solver::euler, 16, 909};
    struct Counter : ActivationRecorder {
        size_t calls = 0;
        void on_layer(size_t, const Tensor&) override { ++calls; }
    } rec;
    SampleSet hooked = sample(fx.net, sp, sch, pc, 8, nullptr, &rec);
    SampleSet plain = sample(fx.net, sp, sch, pc, 8);
    bool identical = hooked.samples.bitwise_equal(plain.samples) && rec.calls > 0;

    detail = fmt("%zu layers x %zu rows in [0,1], hooked run %s", layers, steps,
                 identical ? "bit-identical" : "DIVERGED");
    return range_ok && identical;
}

bool check13_persistence(std::string& detail) {
    fs::path dir = fs::temp_directory_path() / "ddl_acceptance13";
    fs::remove_all(dir);
    fs::create_directories(dir);

    ExperimentConfig cfg;
    cfg.set("model.width", "16");
    cfg.set("model.time_embed_dim", "16");
    cfg.set("model.depth", "1");
    cfg.set("run.data_n", "256");
    cfg.set("run.pretrain_iters", "40");
    cfg.set("run.pretrain_batch", "32");
    cfg.set("run.sample_steps", "4");
    cfg.set("run.sample_batch", "24");
    cfg.set("gan.batch", "8");
    cfg.set("gan.total_images", "64");
    cfg.set("gan.disc_scales", "2");
    cfg.set("gan.disc_feature_dim", "8");
    cfg.set("gan.disc_head_width", "16");
    cfg.set("metrics.eval_n", "48");

    auto run_once = [&](const fs::path& out) {
        ExperimentConfig c = cfg;
        c.set("run.out", out.string());
        run_pipeline("train-score", c);
        run_pipeline("distill", c);
        run_pipeline("sample", c);
    };
    run_once(dir / "a");
    run_once(dir / "b");

    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    };
    bool identical = true;
    for (const char* f : {"score.ddl1", "score_loss.csv", "generator.ddl1", "distill_log.csv",
                          "samples.ddl1", "samples.csv"}) {
        std::string wa = slurp(dir / "a" / f), wb = slurp(dir / "b" / f);
        identical = identical && !wa.empty() && wa == wb;
    }

    ScoreNet net = load_score_checkpoint((dir / "a" / "score.ddl1").string());
    save_checkpoint(net, (dir / "a" / "score2.ddl1").string());
    bool roundtrip = slurp(dir / "a" / "score.ddl1") == slurp(dir / "a" / "score2.ddl1");

    // flip one payload byte; the checksum must catch it
    std::string bytes = slurp(dir / "a" / "score.ddl1");
    bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x40);
    {
        std::ofstream out(dir / "a" / "bad.ddl1", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    bool refused = false;
    try {
        load_score_checkpoint((dir / "a" / "bad.ddl1").string());
    } catch (const std::exception& e) {
        refused = std::string(e.what()).find("crc") != std::string::npos;
    }

    fs::remove_all(dir);
    detail = fmt("reruns identical %s, roundtrip %s, corrupt refused %s", identical ? "yes" : "NO",
                 roundtrip ? "yes" : "NO", refused ? "yes" : "NO");
    return identical && roundtrip && refused;
}

template <typename Fn>
void run_check(int idx, const std::string& name, Fn fn) {
    auto t0 = Clock::now();
    std::string detail;
    bool pass = false;
    try {
        pass = fn(detail);
    } catch (const std::exception& e) {
        detail = std::string("exception: ") + e.what();
    }
    double sec = std::chrono::duration<double>(Clock::now() - t0).count();
    report(idx, name, pass, detail, sec);
}

}  // namespace

int main() {
    auto t0 = Clock::now();

    {
        auto t = Clock::now();
        bool pass = check1_autodiff();
        report(1, "autodiff vs finite differences", pass, "",
               std::chrono::duration<double>(Clock::now() - t).count());
    }
    run_check(2, "noise schedule endpoints", [](std::string& d) { return check2_schedule(d); });
    run_check(3, "solver convergence order", [](std::string& d) { return check3_solver_order(d); });
    run_check(4, "denoiser matches gaussian posterior",
              [](std::string& d) { return check4_pretraining(d); });
    run_check(5, "one-step distillation quality",
              [](std::string& d) { return check5_distillation(d); });
    run_check(6, "distillation with conv frozen",
              [](std::string& d) { return check6_frozen_conv(d); });
    run_check(7, "teacher-step divergence trend",
              [](std::string& d) { return check7_step_trend(d); });
    run_check(8, "intermediate-sigma trend", [](std::string& d) { return check8_sigma_trend(d); });
    run_check(9, "combined loss cost and fallback",
              [](std::string& d) { return check9_combined_cost(d); });
    run_check(10, "r1 penalty direction", [](std::string& d) { return check10_r1_direction(d); });
    run_check(11, "metric oracles", [](std::string& d) { return check11_metric_oracles(d); });
    run_check(12, "profiler bounds and transparency",
              [](std::string& d) { return check12_profiler(d); });
    run_check(13, "determinism and persistence",
              [](std::string& d) { return check13_persistence(d); });

    double total = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("%d of 13 passed in %.0fs\n", 13 - g_failures, total);
    return g_failures == 0 ? 0 : 1;
}
