#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ddl/nn.hpp"

namespace ddl {

enum class ModelKind { mlp2d, unet1d };

ModelKind model_kind_from_name(const std::string& s);
const char* model_kind_name(ModelKind k);

struct ScoreNetSpec {
    ModelKind kind = ModelKind::mlp2d;
    int width = 64;           // mlp2d hidden width / unet1d base channel count
    int depth = 2;            // mlp2d residual blocks / unet1d res blocks per level
    int time_embed_dim = 64;  // even
    int num_classes = 0;      // 0 = unconditional
    uint64_t seed = 1;
};

struct LayerTag {
    std::string name;
    int depth = 0;
    std::string side;  // enc / mid / dec / body
};

// Observes tagged layer outputs during a forward pass. Hooks only read values
// that were computed anyway, so recording can never perturb the math.
struct ActivationRecorder {
    virtual ~ActivationRecorder() = default;
    virtual void on_layer(size_t layer_index, const Tensor& value) = 0;
};

// Raw score network f(x, t). Output matches the input shape; preconditioning
// into a denoiser lives in the diffusion module.
class ScoreNet {
public:
    ScoreNet(ScoreNetSpec spec, DType dt = DType::f32);

    const ScoreNetSpec& spec() const { return spec_; }
    DType dtype() const { return dtype_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    int data_dim() const;                    // flattened sample size
    std::vector<int64_t> input_dims() const; // per-sample dims, e.g. {2} or {1,32}
    const std::vector<LayerTag>& tagged_layers() const { return tags_; }

    // x: [B×2] (mlp2d) or [B×1×L] (unet1d); t: one sigma per sample.
    Value forward(Tape& t, const Bound& b, Value x, const std::vector<double>& sigmas,
                  const std::vector<int>* classes = nullptr, ActivationRecorder* rec = nullptr) const;

    Tensor forward_eval(const Tensor& x, const std::vector<double>& sigmas,
                        const std::vector<int>* classes = nullptr, ActivationRecorder* rec = nullptr) const;

private:
    struct Block {  // parameter indices for one residual block
        int gn1_g = -1, gn1_b = -1;
        int c1_w = -1, c1_b = -1;
        int gn2_g = -1, gn2_b = -1;
        int msc_w = -1, msc_b = -1;
        int msh_w = -1, msh_b = -1;
        int c2_w = -1, c2_b = -1;
        int sk_w = -1, sk_b = -1;
        size_t tag = 0;
    };
    struct Attn {
        int gn_g = -1, gn_b = -1;
        int q_w = -1, q_b = -1, k_w = -1, k_b = -1, v_w = -1, v_b = -1;
        int o_w = -1, o_b = -1;
    };

    Value time_embedding(Tape& t, const Bound& b, const std::vector<double>& sigmas,
                         const std::vector<int>* classes) const;
    Value res_block_mlp(Tape& t, const Bound& b, const Block& blk, Value h, Value e,
                        ActivationRecorder* rec) const;
    Value res_block_conv(Tape& t, const Bound& b, const Block& blk, Value h, Value e,
                         ActivationRecorder* rec) const;
    Value attn_block(Tape& t, const Bound& b, const Attn& at, Value h) const;
    Block make_block(const std::string& prefix, int channels, bool conv, Rng& seeder);
    Attn make_attn(const std::string& prefix, int channels, Rng& seeder);
    int add_param(const std::string& name, std::vector<int64_t> dims, int64_t fan_in, Category cat,
                  bool zero = false);

    ScoreNetSpec spec_;
    DType dtype_;
    ParamStore params_;
    std::vector<LayerTag> tags_;

    // mlp2d layout
    int in_w_ = -1, in_b_ = -1, out_w_ = -1, out_b_ = -1;
    std::vector<Block> blocks_;
    // unet1d layout
    int down0_w_ = -1, down0_b_ = -1, down1_w_ = -1, down1_b_ = -1;
    int up1_w_ = -1, up1_b_ = -1, up0_w_ = -1, up0_b_ = -1;
    int skp1_w_ = -1, skp1_b_ = -1, skp0_w_ = -1, skp0_b_ = -1;
    int ogn_g_ = -1, ogn_b_ = -1;
    std::vector<Block> enc0_, enc1_, mid_, dec1_, dec0_;
    Attn attn_;
    // time trunk
    int t1_w_ = -1, t1_b_ = -1, t2_w_ = -1, t2_b_ = -1, cls_emb_ = -1;
};

ScoreNet build_score_net(const ScoreNetSpec& spec, DType dt = DType::f32);

struct CensusRow {
    Category cat;
    int64_t count = 0;
    double fraction = 0.0;
};

// Scalar parameter counts per category; fractions sum to 1.
std::vector<CensusRow> param_census(const ParamStore& ps);

// Marks every parameter outside `trainable` as frozen. The input/output
// category can never be frozen: those layers always stay trainable.
void apply_freeze_mask(ParamStore& ps, const std::set<Category>& trainable);

enum class DiscKind { plain, projected };

DiscKind disc_kind_from_name(const std::string& s);

struct DiscriminatorSpec {
    DiscKind kind = DiscKind::projected;
    int in_dim = 2;
    int num_scales = 3;    // projected only
    int feature_dim = 16;  // projected only
    int head_width = 32;
    uint64_t feature_seed = 7;
    uint64_t seed = 11;
};

// Plain: a small trainable net on raw samples, one logit.
// Projected: fixed random feature maps at several bandwidths, one trainable
// head per scale, one logit per scale.
class Discriminator {
public:
    Discriminator(DiscriminatorSpec spec, DType dt = DType::f32);

    const DiscriminatorSpec& spec() const { return spec_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // x: [B×in_dim]; returns one [B] logit vector per scale.
    std::vector<Value> logits(Tape& t, const Bound& b, Value x) const;

private:
    DiscriminatorSpec spec_;
    DType dtype_;
    ParamStore params_;
    struct Scale {
        int fw = -1, fb = -1, fp = -1;  // frozen feature map
        int h1_w = -1, h1_b = -1, h2_w = -1, h2_b = -1;
    };
    std::vector<Scale> scales_;
    int p1_w_ = -1, p1_b_ = -1, p2_w_ = -1, p2_b_ = -1, p3_w_ = -1, p3_b_ = -1;
};

Discriminator build_discriminator(const DiscriminatorSpec& spec, DType dt = DType::f32);

}  // namespace ddl
