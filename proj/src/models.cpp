#include "ddl/models.hpp"

#include <cmath>

namespace ddl {

ModelKind model_kind_from_name(const std::string& s) {
    if (s == "mlp2d") return ModelKind::mlp2d;
    if (s == "unet1d") return ModelKind::unet1d;
    throw std::runtime_error("unknown model kind: " + s);
}

const char* model_kind_name(ModelKind k) { return k == ModelKind::mlp2d ? "mlp2d" : "unet1d"; }

int ScoreNet::add_param(const std::string& name, std::vector<int64_t> dims, int64_t fan_in, Category cat,
                        bool zero) {
    Tensor t;
    if (zero) {
        t = Tensor::zeros(std::move(dims), dtype_);
    } else {
        Rng rng(splitmix64(spec_.seed ^ fnv1a64(name)));
        t = init_normal(std::move(dims), fan_in, rng, dtype_);
    }
    return params_.add(name, std::move(t), cat);
}

ScoreNet::Block ScoreNet::make_block(const std::string& prefix, int channels, bool conv, Rng&) {
    Block b;
    int c = channels;
    int te = spec_.time_embed_dim;
    b.gn1_g = add_param(prefix + ".gn1.scale", {c}, 1, Category::norm, true);
    b.gn1_b = add_param(prefix + ".gn1.shift", {c}, 1, Category::norm, true);
    if (conv) {
        b.c1_w = add_param(prefix + ".conv1.w", {c, c, 3}, 3LL * c, Category::conv);
        b.c1_b = add_param(prefix + ".conv1.b", {c}, 1, Category::conv, true);
        // second norm sits between the convolutions; the mlp block modulates
        // its single norm directly and has no use for another
        b.gn2_g = add_param(prefix + ".gn2.scale", {c}, 1, Category::norm, true);
        b.gn2_b = add_param(prefix + ".gn2.shift", {c}, 1, Category::norm, true);
    } else {
        b.c1_w = add_param(prefix + ".lin1.w", {c, c}, c, Category::conv);
        b.c1_b = add_param(prefix + ".lin1.b", {c}, 1, Category::conv, true);
    }
    b.msc_w = add_param(prefix + ".mod_scale.w", {c, te}, te, Category::norm);
    b.msc_b = add_param(prefix + ".mod_scale.b", {c}, 1, Category::norm, true);
    b.msh_w = add_param(prefix + ".mod_shift.w", {c, te}, te, Category::norm);
    b.msh_b = add_param(prefix + ".mod_shift.b", {c}, 1, Category::norm, true);
    if (conv) {
        b.c2_w = add_param(prefix + ".conv2.w", {c, c, 3}, 3LL * c, Category::conv);
        b.c2_b = add_param(prefix + ".conv2.b", {c}, 1, Category::conv, true);
        b.sk_w = add_param(prefix + ".skip.w", {c, c, 1}, c, Category::skip);
        b.sk_b = add_param(prefix + ".skip.b", {c}, 1, Category::skip, true);
    } else {
        b.c2_w = add_param(prefix + ".lin2.w", {c, c}, c, Category::conv);
        b.c2_b = add_param(prefix + ".lin2.b", {c}, 1, Category::conv, true);
        b.sk_w = add_param(prefix + ".skip.w", {c, c}, c, Category::skip);
        b.sk_b = add_param(prefix + ".skip.b", {c}, 1, Category::skip, true);
    }
    return b;
}

ScoreNet::Attn ScoreNet::make_attn(const std::string& prefix, int channels, Rng&) {
    Attn a;
    int c = channels;
    a.gn_g = add_param(prefix + ".gn.scale", {c}, 1, Category::norm, true);
    a.gn_b = add_param(prefix + ".gn.shift", {c}, 1, Category::norm, true);
    a.q_w = add_param(prefix + ".q.w", {c, c, 1}, c, Category::qkv);
    a.q_b = add_param(prefix + ".q.b", {c}, 1, Category::qkv, true);
    a.k_w = add_param(prefix + ".k.w", {c, c, 1}, c, Category::qkv);
    a.k_b = add_param(prefix + ".k.b", {c}, 1, Category::qkv, true);
    a.v_w = add_param(prefix + ".v.w", {c, c, 1}, c, Category::qkv);
    a.v_b = add_param(prefix + ".v.b", {c}, 1, Category::qkv, true);
    a.o_w = add_param(prefix + ".out.w", {c, c, 1}, c, Category::qkv);
    a.o_b = add_param(prefix + ".out.b", {c}, 1, Category::qkv, true);
    return a;
}

ScoreNet::ScoreNet(ScoreNetSpec spec, DType dt) : spec_(spec), dtype_(dt) {
    if (spec_.width < 1) throw std::runtime_error("score net: width must be positive");
    if (spec_.depth < 0) throw std::runtime_error("score net: depth must be non-negative");
    if (spec_.time_embed_dim < 2 || spec_.time_embed_dim % 2 != 0)
        throw std::runtime_error("score net: time_embed_dim must be even and >= 2");
    Rng seeder(spec_.seed);
    int te = spec_.time_embed_dim;

    t1_w_ = add_param("temb.lin1.w", {te, te}, te, Category::norm);
    t1_b_ = add_param("temb.lin1.b", {te}, 1, Category::norm, true);
    t2_w_ = add_param("temb.lin2.w", {te, te}, te, Category::norm);
    t2_b_ = add_param("temb.lin2.b", {te}, 1, Category::norm, true);
    if (spec_.num_classes > 0)
        cls_emb_ = add_param("temb.class_emb", {spec_.num_classes, te}, te, Category::norm);

    if (spec_.kind == ModelKind::mlp2d) {
        int w = spec_.width;
        in_w_ = add_param("in.w", {w, 2}, 2, Category::io);
        in_b_ = add_param("in.b", {w}, 1, Category::io, true);
        for (int d = 0; d < spec_.depth; ++d) {
            std::string prefix = "block" + std::to_string(d);
            blocks_.push_back(make_block(prefix, w, false, seeder));
            blocks_.back().tag = tags_.size();
            tags_.push_back({prefix + ".lin2", d, "body"});
        }
        out_w_ = add_param("out.w", {2, w}, w, Category::io, true);
        out_b_ = add_param("out.b", {2}, 1, Category::io, true);
    } else {
        int c0 = spec_.width, c1 = 2 * c0, c2 = 4 * c0;
        int nb = spec_.depth < 1 ? 1 : spec_.depth;
        in_w_ = add_param("in.w", {c0, 1, 3}, 3, Category::io);
        in_b_ = add_param("in.b", {c0}, 1, Category::io, true);
        for (int d = 0; d < nb; ++d) {
            std::string p = "enc0.block" + std::to_string(d);
            enc0_.push_back(make_block(p, c0, true, seeder));
            enc0_.back().tag = tags_.size();
            tags_.push_back({p + ".conv2", 0, "enc"});
        }
        down0_w_ = add_param("down0.w", {c1, c0, 3}, 3LL * c0, Category::conv);
        down0_b_ = add_param("down0.b", {c1}, 1, Category::conv, true);
        for (int d = 0; d < nb; ++d) {
            std::string p = "enc1.block" + std::to_string(d);
            enc1_.push_back(make_block(p, c1, true, seeder));
            enc1_.back().tag = tags_.size();
            tags_.push_back({p + ".conv2", 1, "enc"});
        }
        down1_w_ = add_param("down1.w", {c2, c1, 3}, 3LL * c1, Category::conv);
        down1_b_ = add_param("down1.b", {c2}, 1, Category::conv, true);
        for (int d = 0; d < 2; ++d) {
            std::string p = "mid.block" + std::to_string(d);
            mid_.push_back(make_block(p, c2, true, seeder));
            mid_.back().tag = tags_.size();
            tags_.push_back({p + ".conv2", 2, "mid"});
        }
        attn_ = make_attn("mid.attn", c2, seeder);
        up1_w_ = add_param("up1.w", {c1, c2, 3}, 3LL * c2, Category::conv);
        up1_b_ = add_param("up1.b", {c1}, 1, Category::conv, true);
        skp1_w_ = add_param("skip1.w", {c1, c1, 1}, c1, Category::skip);
        skp1_b_ = add_param("skip1.b", {c1}, 1, Category::skip, true);
        for (int d = 0; d < nb; ++d) {
            std::string p = "dec1.block" + std::to_string(d);
            dec1_.push_back(make_block(p, c1, true, seeder));
            dec1_.back().tag = tags_.size();
            tags_.push_back({p + ".conv2", 1, "dec"});
        }
        up0_w_ = add_param("up0.w", {c0, c1, 3}, 3LL * c1, Category::conv);
        up0_b_ = add_param("up0.b", {c0}, 1, Category::conv, true);
        skp0_w_ = add_param("skip0.w", {c0, c0, 1}, c0, Category::skip);
        skp0_b_ = add_param("skip0.b", {c0}, 1, Category::skip, true);
        for (int d = 0; d < nb; ++d) {
            std::string p = "dec0.block" + std::to_string(d);
            dec0_.push_back(make_block(p, c0, true, seeder));
            dec0_.back().tag = tags_.size();
            tags_.push_back({p + ".conv2", 0, "dec"});
        }
        ogn_g_ = add_param("out.gn.scale", {c0}, 1, Category::norm, true);
        ogn_b_ = add_param("out.gn.shift", {c0}, 1, Category::norm, true);
        out_w_ = add_param("out.w", {1, c0, 3}, 3LL * c0, Category::io, true);
        out_b_ = add_param("out.b", {1}, 1, Category::io, true);
    }
}

int ScoreNet::data_dim() const { return spec_.kind == ModelKind::mlp2d ? 2 : 32; }

std::vector<int64_t> ScoreNet::input_dims() const {
    return spec_.kind == ModelKind::mlp2d ? std::vector<int64_t>{2} : std::vector<int64_t>{1, 32};
}

Value ScoreNet::time_embedding(Tape& t, const Bound& b, const std::vector<double>& sigmas,
                               const std::vector<int>* classes) const {
    Value e = t.constant(sinusoidal_embedding(sigmas, spec_.time_embed_dim, dtype_));
    if (classes != nullptr) {
        if (spec_.num_classes <= 0)
            throw std::runtime_error("score net: class ids given to an unconditional model");
        if (classes->size() != sigmas.size())
            throw std::runtime_error("score net: one class id per sample required");
        std::vector<int32_t> idx;
        idx.reserve(classes->size());
        for (int c : *classes) {
            if (c < 0 || c >= spec_.num_classes) throw std::runtime_error("score net: class id out of range");
            idx.push_back(static_cast<int32_t>(c));
        }
        e = t.add(e, t.gather_rows(b[static_cast<size_t>(cls_emb_)], idx));
    }
    e = t.silu(linear(t, e, b[static_cast<size_t>(t1_w_)], b[static_cast<size_t>(t1_b_)]));
    e = t.silu(linear(t, e, b[static_cast<size_t>(t2_w_)], b[static_cast<size_t>(t2_b_)]));
    return e;
}

Value ScoreNet::res_block_mlp(Tape& t, const Bound& b, const Block& blk, Value h, Value e,
                              ActivationRecorder* rec) const {
    int64_t bsz = h.dims()[0], w = h.dims()[1];
    Value h3 = t.reshape(h, {bsz, w, 1});
    Value n1 = group_norm_modulated(h3, 1, b[static_cast<size_t>(blk.gn1_g)], b[static_cast<size_t>(blk.gn1_b)], 1e-5);
    Value sc = linear(t, e, b[static_cast<size_t>(blk.msc_w)], b[static_cast<size_t>(blk.msc_b)]);
    Value sh = linear(t, e, b[static_cast<size_t>(blk.msh_w)], b[static_cast<size_t>(blk.msh_b)]);
    Value hm = t.reshape(affine_mod(t, n1, sc, sh), {bsz, w});
    Value a = linear(t, hm, b[static_cast<size_t>(blk.c1_w)], b[static_cast<size_t>(blk.c1_b)]);
    a = t.silu(a);
    a = linear(t, a, b[static_cast<size_t>(blk.c2_w)], b[static_cast<size_t>(blk.c2_b)]);
    if (rec) rec->on_layer(blk.tag, a.val());
    Value skip = linear(t, h, b[static_cast<size_t>(blk.sk_w)], b[static_cast<size_t>(blk.sk_b)]);
    return t.add(a, skip);
}

Value ScoreNet::res_block_conv(Tape& t, const Bound& b, const Block& blk, Value h, Value e,
                               ActivationRecorder* rec) const {
    int64_t c = h.dims()[1];
    int64_t groups = std::min<int64_t>(8, c);
    Value n1 = group_norm_modulated(h, groups, b[static_cast<size_t>(blk.gn1_g)], b[static_cast<size_t>(blk.gn1_b)], 1e-5);
    Value a = conv_bias(t, t.silu(n1), b[static_cast<size_t>(blk.c1_w)], b[static_cast<size_t>(blk.c1_b)], 1, 1);
    Value n2 = group_norm_modulated(a, groups, b[static_cast<size_t>(blk.gn2_g)], b[static_cast<size_t>(blk.gn2_b)], 1e-5);
    Value sc = linear(t, e, b[static_cast<size_t>(blk.msc_w)], b[static_cast<size_t>(blk.msc_b)]);
    Value sh = linear(t, e, b[static_cast<size_t>(blk.msh_w)], b[static_cast<size_t>(blk.msh_b)]);
    Value hm = affine_mod(t, n2, sc, sh);
    Value a2 = conv_bias(t, t.silu(hm), b[static_cast<size_t>(blk.c2_w)], b[static_cast<size_t>(blk.c2_b)], 1, 1);
    if (rec) rec->on_layer(blk.tag, a2.val());
    Value skip = conv_bias(t, h, b[static_cast<size_t>(blk.sk_w)], b[static_cast<size_t>(blk.sk_b)], 1, 0);
    return t.add(a2, skip);
}

Value ScoreNet::attn_block(Tape& t, const Bound& b, const Attn& at, Value h) const {
    int64_t groups = std::min<int64_t>(8, h.dims()[1]);
    Value n = group_norm_modulated(h, groups, b[static_cast<size_t>(at.gn_g)], b[static_cast<size_t>(at.gn_b)], 1e-5);
    Value q = conv_bias(t, n, b[static_cast<size_t>(at.q_w)], b[static_cast<size_t>(at.q_b)]);
    Value k = conv_bias(t, n, b[static_cast<size_t>(at.k_w)], b[static_cast<size_t>(at.k_b)]);
    Value v = conv_bias(t, n, b[static_cast<size_t>(at.v_w)], b[static_cast<size_t>(at.v_b)]);
    Value o = attention(t.btranspose(q), t.btranspose(k), t.btranspose(v));  // [B×L×C]
    o = conv_bias(t, t.btranspose(o), b[static_cast<size_t>(at.o_w)], b[static_cast<size_t>(at.o_b)]);
    return t.add(h, o);
}

Value ScoreNet::forward(Tape& t, const Bound& b, Value x, const std::vector<double>& sigmas,
                        const std::vector<int>* classes, ActivationRecorder* rec) const {
    if (x.dtype() != dtype_) throw std::runtime_error("score net: input dtype mismatch");
    if (static_cast<int64_t>(sigmas.size()) != x.dims()[0])
        throw std::runtime_error("score net: one sigma per sample required");
    Value e = time_embedding(t, b, sigmas, classes);

    if (spec_.kind == ModelKind::mlp2d) {
        if (x.dims().size() != 2 || x.dims()[1] != 2) throw std::runtime_error("score net: mlp2d expects [B×2] input");
        Value h = linear(t, x, b[static_cast<size_t>(in_w_)], b[static_cast<size_t>(in_b_)]);
        for (const Block& blk : blocks_) h = res_block_mlp(t, b, blk, h, e, rec);
        return linear(t, h, b[static_cast<size_t>(out_w_)], b[static_cast<size_t>(out_b_)]);
    }

    if (x.dims().size() != 3 || x.dims()[1] != 1 || x.dims()[2] != 32)
        throw std::runtime_error("score net: unet1d expects [B×1×32] input");
    Value h = conv_bias(t, x, b[static_cast<size_t>(in_w_)], b[static_cast<size_t>(in_b_)], 1, 1);
    for (const Block& blk : enc0_) h = res_block_conv(t, b, blk, h, e, rec);
    Value s0 = h;
    h = conv_bias(t, h, b[static_cast<size_t>(down0_w_)], b[static_cast<size_t>(down0_b_)], 2, 1);
    for (const Block& blk : enc1_) h = res_block_conv(t, b, blk, h, e, rec);
    Value s1 = h;
    h = conv_bias(t, h, b[static_cast<size_t>(down1_w_)], b[static_cast<size_t>(down1_b_)], 2, 1);
    h = res_block_conv(t, b, mid_[0], h, e, rec);
    h = attn_block(t, b, attn_, h);
    h = res_block_conv(t, b, mid_[1], h, e, rec);
    h = conv_bias(t, t.upsample2(h), b[static_cast<size_t>(up1_w_)], b[static_cast<size_t>(up1_b_)], 1, 1);
    h = t.add(h, conv_bias(t, s1, b[static_cast<size_t>(skp1_w_)], b[static_cast<size_t>(skp1_b_)]));
    for (const Block& blk : dec1_) h = res_block_conv(t, b, blk, h, e, rec);
    h = conv_bias(t, t.upsample2(h), b[static_cast<size_t>(up0_w_)], b[static_cast<size_t>(up0_b_)], 1, 1);
    h = t.add(h, conv_bias(t, s0, b[static_cast<size_t>(skp0_w_)], b[static_cast<size_t>(skp0_b_)]));
    for (const Block& blk : dec0_) h = res_block_conv(t, b, blk, h, e, rec);
    int64_t groups = std::min<int64_t>(8, h.dims()[1]);
    h = group_norm_modulated(h, groups, b[static_cast<size_t>(ogn_g_)], b[static_cast<size_t>(ogn_b_)], 1e-5);
    return conv_bias(t, t.silu(h), b[static_cast<size_t>(out_w_)], b[static_cast<size_t>(out_b_)], 1, 1);
}

Tensor ScoreNet::forward_eval(const Tensor& x, const std::vector<double>& sigmas,
                              const std::vector<int>* classes, ActivationRecorder* rec) const {
    Tape t(512);
    Bound b = bind(t, params_, false);
    Value xin = t.constant(x);
    return forward(t, b, xin, sigmas, classes, rec).val();
}

ScoreNet build_score_net(const ScoreNetSpec& spec, DType dt) { return ScoreNet(spec, dt); }

std::vector<CensusRow> param_census(const ParamStore& ps) {
    std::vector<CensusRow> rows;
    for (Category c : {Category::norm, Category::conv, Category::qkv, Category::skip, Category::io})
        rows.push_back({c, 0, 0.0});
    int64_t total = 0;
    for (size_t i = 0; i < ps.size(); ++i) {
        const Parameter& p = ps.at(i);
        rows[static_cast<size_t>(p.cat)].count += p.value.numel();
        total += p.value.numel();
    }
    if (total > 0)
        for (auto& r : rows) r.fraction = static_cast<double>(r.count) / static_cast<double>(total);
    return rows;
}

void apply_freeze_mask(ParamStore& ps, const std::set<Category>& trainable) {
    if (!trainable.contains(Category::io))
        throw std::runtime_error("freeze mask: input/output layers are always trainable");
    for (size_t i = 0; i < ps.size(); ++i) {
        Parameter& p = ps.at(i);
        p.frozen = !trainable.contains(p.cat);
    }
}

DiscKind disc_kind_from_name(const std::string& s) {
    if (s == "plain") return DiscKind::plain;
    if (s == "projected") return DiscKind::projected;
    throw std::runtime_error("unknown discriminator kind: " + s);
}

Discriminator::Discriminator(DiscriminatorSpec spec, DType dt) : spec_(spec), dtype_(dt) {
    if (spec_.in_dim < 1 || spec_.head_width < 1) throw std::runtime_error("discriminator: bad spec");
    auto add = [&](const std::string& name, std::vector<int64_t> dims, int64_t fan_in, bool frozen,
                   bool zero = false) {
        Tensor t;
        if (zero) {
            t = Tensor::zeros(std::move(dims), dtype_);
        } else {
            Rng rng(splitmix64((frozen ? spec_.feature_seed : spec_.seed) ^ fnv1a64(name)));
            t = init_normal(std::move(dims), fan_in, rng, dtype_);
        }
        return params_.add(name, std::move(t), frozen ? Category::io : Category::conv, frozen);
    };

    if (spec_.kind == DiscKind::plain) {
        int hw = spec_.head_width;
        p1_w_ = add("p.lin1.w", {hw, spec_.in_dim}, spec_.in_dim, false);
        p1_b_ = add("p.lin1.b", {hw}, 1, false, true);
        p2_w_ = add("p.lin2.w", {hw, hw}, hw, false);
        p2_b_ = add("p.lin2.b", {hw}, 1, false, true);
        p3_w_ = add("p.lin3.w", {1, hw}, hw, false);
        p3_b_ = add("p.lin3.b", {1}, 1, false, true);
        return;
    }
    if (spec_.num_scales < 1 || spec_.feature_dim < 1) throw std::runtime_error("discriminator: bad spec");
    const int rff = 64;
    for (int l = 0; l < spec_.num_scales; ++l) {
        std::string p = "scale" + std::to_string(l);
        Scale s;
        // random Fourier features; bandwidth triples per scale (coarse to fine)
        double bw = std::pow(3.0, l);
        {
            Rng rng(splitmix64(spec_.feature_seed ^ fnv1a64(p + ".fw")));
            Tensor w = Tensor::zeros({rff, spec_.in_dim}, dtype_);
            for (int64_t i = 0; i < w.numel(); ++i) w.set(i, bw * rng.normal());
            s.fw = params_.add(p + ".feat.w", std::move(w), Category::io, true);
            Tensor b = rng.uniform_tensor({rff}, 0.0, 6.283185307179586, dtype_);
            s.fb = params_.add(p + ".feat.b", std::move(b), Category::io, true);
            Tensor proj = init_normal({spec_.feature_dim, rff}, rff, rng, dtype_);
            s.fp = params_.add(p + ".feat.proj", std::move(proj), Category::io, true);
        }
        s.h1_w = add(p + ".head1.w", {spec_.head_width, spec_.feature_dim}, spec_.feature_dim, false);
        s.h1_b = add(p + ".head1.b", {spec_.head_width}, 1, false, true);
        s.h2_w = add(p + ".head2.w", {1, spec_.head_width}, spec_.head_width, false);
        s.h2_b = add(p + ".head2.b", {1}, 1, false, true);
        scales_.push_back(s);
    }
}

std::vector<Value> Discriminator::logits(Tape& t, const Bound& b, Value x) const {
    if (x.dims().size() != 2 || x.dims()[1] != spec_.in_dim)
        throw std::runtime_error("discriminator: expects [B×" + std::to_string(spec_.in_dim) + "] input");
    int64_t bsz = x.dims()[0];
    std::vector<Value> out;

    if (spec_.kind == DiscKind::plain) {
        Value h = t.silu(linear(t, x, b[static_cast<size_t>(p1_w_)], b[static_cast<size_t>(p1_b_)]));
        h = t.silu(linear(t, h, b[static_cast<size_t>(p2_w_)], b[static_cast<size_t>(p2_b_)]));
        Value lg = linear(t, h, b[static_cast<size_t>(p3_w_)], b[static_cast<size_t>(p3_b_)]);
        out.push_back(t.reshape(lg, {bsz}));
        return out;
    }

    const double scale = std::sqrt(2.0 / 64.0);
    for (const Scale& s : scales_) {
        Value z = t.matmul(x, t.transpose(b[static_cast<size_t>(s.fw)]));
        z = t.add(z, t.expand_rows(b[static_cast<size_t>(s.fb)], bsz));
        Value phi = t.mul_c(t.sin(z), scale);
        Value feat = t.matmul(phi, t.transpose(b[static_cast<size_t>(s.fp)]));
        Value h = t.silu(linear(t, feat, b[static_cast<size_t>(s.h1_w)], b[static_cast<size_t>(s.h1_b)]));
        Value lg = linear(t, h, b[static_cast<size_t>(s.h2_w)], b[static_cast<size_t>(s.h2_b)]);
        out.push_back(t.reshape(lg, {bsz}));
    }
    return out;
}

Discriminator build_discriminator(const DiscriminatorSpec& spec, DType dt) { return Discriminator(spec, dt); }

}  // namespace ddl
