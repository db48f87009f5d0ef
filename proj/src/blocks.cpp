#include "mossfuse/blocks.hpp"

#include <cmath>

namespace moss {

using ad::Shape;
using ad::Var;

// ------------------------------------------------------------ ParamStore ---

Var ParamStore::add(const std::string& name, const Shape& shape, ad::Buf data) {
    for (const Param& p : params_)
        if (p.name == name) throw ConfigError("ParamStore: duplicate parameter " + name);
    Var v = Var::leaf(shape, std::move(data), /*requires_grad=*/true);
    params_.push_back({name, v});
    return v;
}

void ParamStore::add_bn(const std::string& name, ad::BnState* state) {
    bn_buffers_.push_back({name, state});
}

Var ParamStore::find(const std::string& name) const {
    for (const Param& p : params_)
        if (p.name == name) return p.var;
    throw ArgumentError("ParamStore: unknown parameter " + name);
}

long ParamStore::total_params() const {
    long n = 0;
    for (const Param& p : params_) n += p.var.numel();
    return n;
}

void ParamStore::zero_grads() {
    for (const Param& p : params_) p.var.zero_grad();
}

ad::Buf xavier_uniform(Rng& rng, int fan_in, int fan_out, long count, double scale) {
    const double limit = scale * std::sqrt(6.0 / (fan_in + fan_out));
    ad::Buf b(static_cast<size_t>(count));
    for (Real& v : b) v = rng.uniform(-limit, limit);
    return b;
}

// ------------------------------------------------------------ primitives ---

PointwiseConv::PointwiseConv(ParamStore& ps, const std::string& name, int cin, int cout,
                             Rng& rng, bool bias, double init_scale, double bias_init) {
    w = ps.add(name + ".w", Shape{cout, cin},
               xavier_uniform(rng, cin, cout, static_cast<long>(cout) * cin, init_scale));
    if (bias) b = ps.add(name + ".b", Shape{cout}, ad::Buf(cout, bias_init));
}

DwConv::DwConv(ParamStore& ps, const std::string& name, int channels, int kernel,
               int dilation_, Rng& rng, bool bias)
    : dilation(dilation_) {
    const int fan = kernel * kernel;
    w = ps.add(name + ".w", Shape{channels, kernel, kernel},
               xavier_uniform(rng, fan, fan, static_cast<long>(channels) * fan));
    if (bias) b = ps.add(name + ".b", Shape{channels}, ad::Buf(channels, 0.0));
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, int channels) {
    gamma = ps.add(name + ".gamma", Shape{channels}, ad::Buf(channels, 1.0));
    beta = ps.add(name + ".beta", Shape{channels}, ad::Buf(channels, 0.0));
}

BatchNorm::BatchNorm(ParamStore& ps, const std::string& name, int channels) {
    gamma = ps.add(name + ".gamma", Shape{channels}, ad::Buf(channels, 1.0));
    beta = ps.add(name + ".beta", Shape{channels}, ad::Buf(channels, 0.0));
    state = std::make_shared<ad::BnState>();
    state->running_mean.assign(channels, 0.0);
    state->running_var.assign(channels, 1.0);
    ps.add_bn(name + ".bn_stats", state.get());
}

// The output projection starts small so a fresh block is near-identity on
// its residual stream; gradients through it stay nonzero.
GatedFfn::GatedFfn(ParamStore& ps, const std::string& name, int channels, int ratio, Rng& rng)
    : in_a(ps, name + ".in_a", channels, channels * ratio, rng),
      in_b(ps, name + ".in_b", channels, channels * ratio, rng),
      out(ps, name + ".out", channels * ratio, channels, rng, true, 0.1) {}

Var GatedFfn::apply(const Var& x) const {
    Var h = in_a.apply(x);
    Var g = in_b.apply(x);
    return out.apply(ad::mul(h, ad::gelu(g)));
}

// ---------------------------------------------------------------- attention ---

Var spectral_attention(const Var& q, const Var& k, const Var& v,
                       const std::vector<Var>& temps, int heads,
                       std::vector<Var>* att_out) {
    const int C = q.shape()[0], H = q.shape()[1], W = q.shape()[2];
    if (C % heads != 0)
        throw ConfigError("spectral_attention: channels " + std::to_string(C) +
                          " not divisible by heads " + std::to_string(heads));
    if (static_cast<int>(temps.size()) != heads)
        throw ConfigError("spectral_attention: one temperature per head required");
    const int cj = C / heads;
    const long hw = static_cast<long>(H) * W;
    std::vector<Var> outs;
    outs.reserve(heads);
    for (int j = 0; j < heads; ++j) {
        Var qj = ad::reshape(ad::slice_ch(q, j * cj, (j + 1) * cj), Shape{cj, static_cast<int>(hw)});
        Var kj = ad::reshape(ad::slice_ch(k, j * cj, (j + 1) * cj), Shape{cj, static_cast<int>(hw)});
        Var vj = ad::reshape(ad::slice_ch(v, j * cj, (j + 1) * cj), Shape{cj, static_cast<int>(hw)});
        Var logits = ad::div(ad::matmul(qj, kj, false, true), temps[j]);
        Var att = ad::softmax_rows(logits);
        if (att_out) att_out->push_back(att);
        outs.push_back(ad::reshape(ad::matmul(att, vj), Shape{cj, H, W}));
    }
    return ad::concat_ch(outs);
}

Swsa::Swsa(ParamStore& ps, const std::string& name, int channels_, int heads_, Rng& rng,
           double temp_init)
    : q(ps, name + ".q", channels_, channels_, rng),
      k(ps, name + ".k", channels_, channels_, rng),
      v(ps, name + ".v", channels_, channels_, rng),
      proj(ps, name + ".proj", channels_, channels_, rng, true, 0.1),
      heads(heads_),
      channels(channels_) {
    if (channels_ % heads_ != 0)
        throw ConfigError("Swsa: channels must be divisible by heads");
    for (int j = 0; j < heads_; ++j)
        temps.push_back(ps.add(name + ".temp" + std::to_string(j), Shape{1},
                               ad::Buf{temp_init}));
}

Swsa::Detail Swsa::apply_detailed(const Var& x) const {
    Detail d;
    Var qv = q.apply(x), kv = k.apply(x), vv = v.apply(x);
    d.pre_proj = spectral_attention(qv, kv, vv, temps, heads, &d.attention);
    d.out = proj.apply(d.pre_proj);
    return d;
}

SwtBlock::SwtBlock(ParamStore& ps, const std::string& name, int channels, int heads, Rng& rng,
                   double temp_init, int ffn_ratio)
    : ln1(ps, name + ".ln1", channels),
      ln2(ps, name + ".ln2", channels),
      attn(ps, name + ".swsa", channels, heads, rng, temp_init),
      ffn(ps, name + ".ffn", channels, ffn_ratio, rng) {}

Var SwtBlock::apply(const Var& x) const {
    Var z = ad::add(attn.apply(ln1.apply(x)), x);
    return ad::add(ffn.apply(ln2.apply(z)), z);
}

// ------------------------------------------------------------------ LK-CNN ---

DilatedReparam::DilatedReparam(ParamStore& ps, const std::string& name, int channels_,
                               int large_kernel_, const std::vector<DilatedBranchSpec>& small,
                               Rng& rng)
    : channels(channels_), large_kernel(large_kernel_) {
    if (large_kernel_ % 2 == 0 || large_kernel_ < 3)
        throw ConfigError("DilatedReparam: large kernel must be odd and >= 3");
    branches.push_back({DwConv(ps, name + ".large", channels_, large_kernel_, 1, rng,
                               /*bias=*/false),
                        BatchNorm(ps, name + ".large_bn", channels_), large_kernel_, 1});
    int idx = 0;
    for (const DilatedBranchSpec& s : small) {
        const int eq = (s.kernel - 1) * s.dilation + 1;
        if (eq > large_kernel_)
            throw ConfigError("DilatedReparam: branch " + std::to_string(s.kernel) + "x dil " +
                              std::to_string(s.dilation) + " exceeds large kernel " +
                              std::to_string(large_kernel_));
        const std::string bn = name + ".small" + std::to_string(idx);
        branches.push_back({DwConv(ps, bn, channels_, s.kernel, s.dilation, rng, false),
                            BatchNorm(ps, bn + "_bn", channels_), s.kernel, s.dilation});
        ++idx;
    }
}

Var DilatedReparam::apply(const Var& x, const BlockCtx& ctx) const {
    if (deployed) return ad::depthwise_conv(x, merged_w, merged_b, 1);
    Var acc;
    for (const Branch& br : branches) {
        Var y = br.bn.apply(br.conv.apply(x), ctx);
        acc = acc.defined() ? ad::add(acc, y) : y;
    }
    return acc;
}

MergedConv merge_dilated_branches(const DilatedReparam& block) {
    MergedConv m;
    m.channels = block.channels;
    m.kernel = block.large_kernel;
    if (block.deployed) {
        m.weight = block.merged_w.value();
        m.bias = block.merged_b.value();
        return m;
    }
    for (const auto& br : block.branches)
        if (br.bn.state->batches_seen == 0)
            throw StateError("merge_dilated_branches: BN statistics not finalized");

    const int K = block.large_kernel;
    const int rc = K / 2;
    m.weight.assign(static_cast<size_t>(m.channels) * K * K, 0.0);
    m.bias.assign(m.channels, 0.0);
    for (const auto& br : block.branches) {
        const ad::Buf& w = br.conv.w.value();
        const ad::Buf& gamma = br.bn.gamma.value();
        const ad::Buf& beta = br.bn.beta.value();
        const ad::BnState& st = *br.bn.state;
        const int k = br.kernel, d = br.dilation, rb = k / 2;
        for (int c = 0; c < m.channels; ++c) {
            const Real rstd = 1.0 / std::sqrt(st.running_var[c] + 1e-5);
            const Real scale = gamma[c] * rstd;
            m.bias[c] += beta[c] - st.running_mean[c] * scale;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const int gy = rc + (ky - rb) * d;
                    const int gx = rc + (kx - rb) * d;
                    m.weight[(static_cast<long>(c) * K + gy) * K + gx] +=
                        scale * w[(static_cast<long>(c) * k + ky) * k + kx];
                }
        }
    }
    return m;
}

void deploy_dilated_reparam(DilatedReparam& block) {
    if (block.deployed) return;
    MergedConv m = merge_dilated_branches(block);
    block.merged_w = Var::leaf(Shape{m.channels, m.kernel, m.kernel}, m.weight, false);
    block.merged_b = Var::leaf(Shape{m.channels}, m.bias, false);
    block.deployed = true;
}

SeBlock::SeBlock(ParamStore& ps, const std::string& name, int channels, Rng& rng, int reduction)
    : down(ps, name + ".down", channels, std::max(1, channels / reduction), rng),
      up(ps, name + ".up", std::max(1, channels / reduction), channels, rng) {}

Var SeBlock::apply(const Var& x) const {
    Var g = ad::sigmoid(up.apply(ad::gelu(down.apply(ad::global_avg_pool(x)))));
    return ad::mul(x, g);  // (C,H,W) * (C,1,1)
}

LkCnnBlock::LkCnnBlock(ParamStore& ps, const std::string& name, int channels, int large_kernel,
                       const std::vector<DilatedBranchSpec>& small, Rng& rng, int ffn_ratio)
    : reparam(ps, name + ".reparam", channels, large_kernel, small, rng),
      se(ps, name + ".se", channels, rng),
      ln(ps, name + ".ln", channels),
      ffn(ps, name + ".ffn", channels, ffn_ratio, rng) {}

Var LkCnnBlock::apply(const Var& x, const BlockCtx& ctx) const {
    Var z = ad::add(se.apply(reparam.apply(x, ctx)), x);
    return ad::add(ffn.apply(ln.apply(z)), z);
}

// --------------------------------------------------------- attention gates ---

SpatialAttention::SpatialAttention(ParamStore& ps, const std::string& name, int channels,
                                   Rng& rng)
    : c1(ps, name + ".c1", channels, std::max(1, channels / 4), rng),
      c2(ps, name + ".c2", std::max(1, channels / 4), std::max(1, channels / 8), rng),
      c3(ps, name + ".c3", std::max(1, channels / 8), 1, rng) {}

Var SpatialAttention::apply(const Var& x) const {
    return ad::sigmoid(c3.apply(ad::gelu(c2.apply(ad::gelu(c1.apply(x))))));
}

ChannelAttention::ChannelAttention(ParamStore& ps, const std::string& name, int channels,
                                   Rng& rng)
    : c1(ps, name + ".c1", channels, std::max(1, channels / 4), rng),
      c2(ps, name + ".c2", std::max(1, channels / 4), std::max(1, channels / 4), rng),
      c3(ps, name + ".c3", std::max(1, channels / 4), channels, rng) {}

Var ChannelAttention::apply(const Var& x) const {
    Var p = ad::global_avg_pool(x);
    return ad::sigmoid(c3.apply(ad::gelu(c2.apply(ad::gelu(c1.apply(p))))));
}

// ------------------------------------------------------ aggregation blocks ---

namespace {

std::vector<Var> make_temps(ParamStore& ps, const std::string& name, int heads,
                            double temp_init) {
    std::vector<Var> t;
    for (int j = 0; j < heads; ++j)
        t.push_back(ps.add(name + ".temp" + std::to_string(j), Shape{1}, ad::Buf{temp_init}));
    return t;
}

}  // namespace

SpatialAwareAggregation::SpatialAwareAggregation(ParamStore& ps, const std::string& name,
                                                 int channels_, int heads_, Rng& rng,
                                                 double temp_init)
    : ln(ps, name + ".ln", channels_),
      q(ps, name + ".q", channels_, channels_, rng),
      k(ps, name + ".k", channels_, channels_, rng),
      v(ps, name + ".v", channels_, channels_, rng),
      linear(ps, name + ".linear", channels_, channels_, rng),
      dw(ps, name + ".dw", channels_, 3, 1, rng),
      sa(ps, name + ".sa", channels_, rng),
      ca(ps, name + ".ca", channels_, rng),
      temps(make_temps(ps, name, heads_, temp_init)),
      heads(heads_),
      channels(channels_) {}

Var SpatialAwareAggregation::apply(const Var& shared, const Var& comp) const {
    if (shared.shape() != comp.shape())
        throw ArgumentError("SpatialAwareAggregation: operand shapes differ");
    Var sn = ln.apply(shared);
    Var qs = q.apply(sn), ks = k.apply(sn), vs = v.apply(sn);
    Var fb = dw.apply(comp);
    Var qg = ad::mul(qs, sa.apply(fb));  // (C,H,W) * (1,H,W)
    Var s_prime = spectral_attention(qg, ks, vs, temps, heads);
    Var c_prime = ad::mul(fb, ca.apply(s_prime));  // (C,H,W) * (C,1,1)
    return linear.apply(ad::add(s_prime, c_prime));
}

SpectralAwareAggregation::SpectralAwareAggregation(ParamStore& ps, const std::string& name,
                                                   int channels_, int heads_, Rng& rng,
                                                   double temp_init)
    : ln(ps, name + ".ln", channels_),
      q(ps, name + ".q", channels_, channels_, rng),
      k(ps, name + ".k", channels_, channels_, rng),
      v(ps, name + ".v", channels_, channels_, rng),
      linear(ps, name + ".linear", channels_, channels_, rng),
      dw(ps, name + ".dw", channels_, 3, 1, rng),
      sa(ps, name + ".sa", channels_, rng),
      ca(ps, name + ".ca", channels_, rng),
      temps(make_temps(ps, name, heads_, temp_init)),
      heads(heads_),
      channels(channels_) {}

Var SpectralAwareAggregation::apply(const Var& shared, const Var& comp) const {
    if (shared.shape() != comp.shape())
        throw ArgumentError("SpectralAwareAggregation: operand shapes differ");
    Var sn = ln.apply(shared);
    Var qs = q.apply(sn), ks = k.apply(sn), vs = v.apply(sn);
    Var fb = dw.apply(comp);
    Var qg = ad::mul(qs, ca.apply(fb));  // channel-refined query
    Var s_prime = spectral_attention(qg, ks, vs, temps, heads);
    Var c_prime = ad::mul(fb, sa.apply(s_prime));  // spatially gated conv branch
    return linear.apply(ad::add(s_prime, c_prime));
}

ConcatConvFusion::ConcatConvFusion(ParamStore& ps, const std::string& name, int channels,
                                   Rng& rng)
    : mix(ps, name + ".mix", channels * 2, channels, rng) {}

Var ConcatConvFusion::apply(const Var& shared, const Var& comp) const {
    return mix.apply(ad::concat_ch({shared, comp}));
}

CrossAttentionFusion::CrossAttentionFusion(ParamStore& ps, const std::string& name,
                                           int channels_, int heads_, Rng& rng,
                                           double temp_init)
    : ln_s(ps, name + ".ln_s", channels_),
      ln_c(ps, name + ".ln_c", channels_),
      q(ps, name + ".q", channels_, channels_, rng),
      k(ps, name + ".k", channels_, channels_, rng),
      v(ps, name + ".v", channels_, channels_, rng),
      proj(ps, name + ".proj", channels_, channels_, rng),
      temps(make_temps(ps, name, heads_, temp_init)),
      heads(heads_),
      channels(channels_) {}

Var CrossAttentionFusion::apply(const Var& shared, const Var& comp) const {
    Var sn = ln_s.apply(shared);
    Var cn = ln_c.apply(comp);
    Var out = spectral_attention(q.apply(sn), k.apply(cn), v.apply(cn), temps, heads);
    return proj.apply(out);
}

}  // namespace moss
