#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "ddl/models.hpp"

namespace ddl {

struct ScheduleSpec {
    double sigma_min = 0.002;
    double sigma_max = 80.0;
    double rho = 7.0;
    int steps = 18;
};

// Noise level at index i of an n-step grid: strictly increasing in i, exactly
// sigma_min at 0 and sigma_max at n.
double schedule_time(int i, int n, const ScheduleSpec& spec);

struct PreconditioningSpec {
    double sigma_data = 0.5;
    double epsilon = 0.002;  // kept at the schedule floor so the maps meet there
};

double c_skip(double t, const PreconditioningSpec& pc);
double c_out(double t, const PreconditioningSpec& pc);

// Variance-exploding perturbation x_t = x0 + t·noise.
Tensor perturb(const Tensor& x0, double t, const Tensor& noise);

// Denoised estimate g(x,t) = c_skip(t)·x + c_out(t)·f(x,t) as a tape value;
// gradients flow into x and whatever parameters are bound with gradients.
Value precondition(Tape& t, const ScoreNet& net, const Bound& b, Value x,
                   const std::vector<double>& sigmas, const PreconditioningSpec& pc,
                   const std::vector<int>* classes = nullptr, ActivationRecorder* rec = nullptr);

// Same map without a caller-visible tape, for samplers and frozen teachers.
Tensor denoise_eval(const ScoreNet& net, const Tensor& x, const std::vector<double>& sigmas,
                    const PreconditioningSpec& pc, const std::vector<int>* classes = nullptr,
                    ActivationRecorder* rec = nullptr);

using DenoiserFn = std::function<Tensor(const Tensor& x, double t)>;

// One Euler step of the flow from t down to t_next:
//   x' = ((t - t_next)/t)·(g(x,t) - x) + x.
// t_next = 0 is the full jump and returns g(x,t) itself.
Value euler_combine(Tape& t, Value x, Value g, double tt, double t_next);
Tensor euler_combine(const Tensor& x, const Tensor& g, double tt, double t_next);
Tensor euler_step(const DenoiserFn& g, const Tensor& x, double t, double t_next);

// Heun step on the same field with trapezoidal correction; falls back to the
// Euler step when t_next = 0 (the correction would divide by zero there).
Tensor heun_step(const DenoiserFn& g, const Tensor& x, double t, double t_next);

enum class Solver { euler, heun };

Solver solver_from_name(const std::string& s);

struct SamplerSpec {
    Solver solver = Solver::euler;
    int steps = 1;
    uint64_t seed = 0;
};

struct SampleSet {
    Tensor samples;
    uint64_t seed_lo = 0, seed_hi = 0;  // per-sample trajectory seeds [lo, hi)
    int64_t nfe = 0;                    // denoiser evaluations per sample
};

// Standard-normal start of shape [batch × per-sample dims], sample i drawn
// from its own stream so sharded and serial generation agree bitwise.
Tensor trajectory_noise(const std::vector<int64_t>& sample_dims, int batch, uint64_t seed, DType dt);

// Draws x = sigma_max·z and integrates the flow down the schedule; the last
// step is the full jump to the denoised estimate. steps=1 is the one-step
// generator g(sigma_max·z, sigma_max).
SampleSet sample(const ScoreNet& net, const SamplerSpec& sp, const ScheduleSpec& sch,
                 const PreconditioningSpec& pc, int batch, const std::vector<int>* classes = nullptr,
                 ActivationRecorder* rec = nullptr);

// Posterior mean for zero-mean Gaussian data with per-coordinate variance s2.
Tensor analytic_denoiser(const Tensor& x, double t, double s2);

// Denoising score-matching loss: mean over the batch of λ(t)·||g(x0+t·n, t) - x0||²
// with log-normal t draws clamped to [epsilon, sigma_max].
Value dsm_loss(Tape& t, const ScoreNet& net, const Bound& b, const Tensor& x0,
               const std::vector<int>* classes, Rng& rng, const ScheduleSpec& sch,
               const PreconditioningSpec& pc);

struct ScoreTrainConfig {
    int iters = 2000;
    int batch = 128;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    uint64_t seed = 0;
};

// In-place pre-training on a dataset tensor ([N×2] or [N×1×32]); returns the
// per-iteration loss trace.
std::vector<double> train_score(ScoreNet& net, const Tensor& data, const std::vector<int>* labels,
                                const ScoreTrainConfig& cfg, const ScheduleSpec& sch,
                                const PreconditioningSpec& pc);

}  // namespace ddl
