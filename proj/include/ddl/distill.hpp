#pragma once

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ddl/diffusion.hpp"
#include "ddl/models.hpp"

namespace ddl {

// Hyperparameters shared by every adversarial training run in this module.
struct GANConfig {
    double gamma_r1 = 1e-4;
    double lr_g = 1e-4;
    double lr_d = 1e-4;
    double adam_beta1 = 0.0;
    double adam_beta2 = 0.99;
    int batch = 64;
    int64_t total_images = 0;
    int64_t ema_halflife_images = 5000;
    double ema_warmup_ratio = 0.05;
};

enum class DistillMethod { pd, cd, ctm, kstep_gan };

DistillMethod distill_method_from_name(const std::string& s);
const char* distill_method_name(DistillMethod m);

struct TeacherSpec {
    int k = 1;
    // replaces the middle time of a two-step teacher; only valid when k = 2
    std::optional<double> intermediate_sigma_override;
};

// Exponential moving average of a parameter store. Frozen parameters are
// copied once at init and never averaged, so they stay bitwise intact.
struct EMAState {
    std::vector<Tensor> shadow;
    int64_t images_seen = 0;
};

EMAState ema_init(const ParamStore& ps);

// decay = 0.5^(batch/h_eff) with h_eff = min(halflife, warmup_ratio *
// images_seen); the first call copies the model outright.
void ema_update(EMAState& ema, const ParamStore& ps, int64_t batch_images,
                int64_t halflife_images, double warmup_ratio);

// Writes the shadow values into the store.
void ema_apply(const EMAState& ema, ParamStore& ps);

// One draw of the (t, u, s) trajectory times for an instance-level loss,
// uniform over the admissible index sets of the method on the sch.steps grid.
// Indices are kept next to their sigmas because the iterative teacher walks
// the grid by index.
struct InstanceTimes {
    int it = 0, iu = 0, is = 0;
    double t = 0.0, u = 0.0, s = 0.0;
};

InstanceTimes draw_instance_times(DistillMethod method, const ScheduleSpec& sch, Rng& rng);

// The four denoiser roles an instance loss composes. Keeping them as
// callables lets tests drive the same trajectory math with analytic stand-ins.
struct InstanceBranches {
    // student denoiser on the caller's tape, gradients attached
    std::function<Value(Tape&, Value, double)> student;
    // student denoiser on the caller's tape through a no-grad binding
    std::function<Value(Tape&, Value, double)> student_sg;
    // student denoiser, tensor path (teacher-side stop gradient)
    DenoiserFn student_eval;
    // frozen pre-trained score model driving the solver
    DenoiserFn score_eval;
};

// Squared-L2 instance distillation loss (mean over the batch) at fixed times.
// noise must match x0's shape; the perturbed input is x0 + t * noise.
Value instance_loss_at(Tape& t, DistillMethod method, const InstanceBranches& br,
                       const InstanceTimes& tm, const Tensor& x0, const Tensor& noise,
                       Solver solver, const ScheduleSpec& sch);

// Draws times (then noise) from rng and evaluates the loss with the student
// network bound on the tape and the frozen score model on the eval path.
Value instance_loss(Tape& t, DistillMethod method, const ScoreNet& student, const Bound& student_b,
                    const ScoreNet& score_model, Solver solver, const Tensor& x0, Rng& rng,
                    const ScheduleSpec& sch, const PreconditioningSpec& pc);

// Non-saturating GAN losses, summed over discriminator scales and averaged
// over the batch, in softplus form so saturated logits stay finite.
Value gan_d_loss(Tape& t, const Discriminator& disc, const Bound& disc_b, Value real, Value fake);
Value gan_g_loss(Tape& t, const Discriminator& disc, const Bound& disc_b, Value fake);

// (gamma/2) * mean over batch of |d/dx sum of logits|^2; real must be a leaf
// with gradients enabled. Applied to real data only.
Value r1_penalty(Tape& t, const Discriminator& disc, const Bound& disc_b, Value real, double gamma);

struct TrainLogRow {
    int64_t step = 0;
    int64_t images_seen = 0;
    double d_loss = 0.0;
    double g_loss = 0.0;
    double r1 = 0.0;
    double wall_ms = 0.0;
};

struct DistillSpec {
    GANConfig gan;
    double cd_weight = 0.0;
    Solver cd_solver = Solver::heun;
    int cd_schedule_n = 18;            // grid for instance-loss time draws
    std::set<Category> freeze;         // generator categories kept at their init values
    uint64_t seed = 0;
    bool deterministic = false;        // report wall_ms as 0 for bitwise logs
};

struct DistillResult {
    ScoreNet generator;  // EMA weights
    std::vector<TrainLogRow> log;
};

// One-step distribution-level distillation: the generator z -> g(sigma_max z,
// sigma_max) starts from the score model and trains against the discriminator
// alone. Frozen categories never move. Aborts if the generator loss goes
// non-finite.
DistillResult distill_gdd(const ScoreNet& score_init, const DiscriminatorSpec& disc_spec,
                          const Tensor& data, DistillSpec spec, const ScheduleSpec& sch,
                          const PreconditioningSpec& pc);

// Same run with cd_weight * instance_loss(cd) added to the generator loss;
// cd_weight 0 reproduces distill_gdd bit for bit.
DistillResult distill_combined(const ScoreNet& score_init, const DiscriminatorSpec& disc_spec,
                               const Tensor& data, DistillSpec spec, const ScheduleSpec& sch,
                               const PreconditioningSpec& pc);

// Trains the k-step composed generator end to end with the GAN loss. k = 1 is
// exactly distill_gdd. A two-step teacher may override its intermediate sigma.
DistillResult train_kstep_teacher(const ScoreNet& score_init, const DiscriminatorSpec& disc_spec,
                                  const Tensor& data, DistillSpec spec, const TeacherSpec& teacher,
                                  const ScheduleSpec& sch, const PreconditioningSpec& pc);

// Samples the k-step map the teacher was trained with (final step lands on
// the denoised estimate). Without an override this matches the euler sampler
// at the same step count bitwise.
SampleSet sample_kstep(const ScoreNet& net, int k, std::optional<double> mid_override,
                       int64_t batch, uint64_t seed, const ScheduleSpec& sch,
                       const PreconditioningSpec& pc);

}  // namespace ddl
