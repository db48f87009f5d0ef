#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "mossfuse/autodiff.hpp"

namespace moss {

class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}
    double uniform(double a, double b) {
        return std::uniform_real_distribution<double>(a, b)(eng_);
    }
    double normal(double mu = 0.0, double sd = 1.0) {
        return std::normal_distribution<double>(mu, sd)(eng_);
    }
    std::uint64_t next_u64() { return eng_(); }
    int uniform_int(int lo, int hi) {  // inclusive
        return std::uniform_int_distribution<int>(lo, hi)(eng_);
    }

private:
    std::mt19937_64 eng_;
};

// Registry of every trainable tensor and BN statistics buffer, keyed by a
// module path. The optimizer and the checkpoint format both walk it.
class ParamStore {
public:
    struct Param {
        std::string name;
        ad::Var var;
    };
    struct BnBuffer {
        std::string name;
        ad::BnState* state;
    };

    ad::Var add(const std::string& name, const ad::Shape& shape, ad::Buf data);
    void add_bn(const std::string& name, ad::BnState* state);

    const std::vector<Param>& params() const { return params_; }
    const std::vector<BnBuffer>& bn_buffers() const { return bn_buffers_; }
    ad::Var find(const std::string& name) const;
    long total_params() const;
    void zero_grads();

private:
    std::vector<Param> params_;
    std::vector<BnBuffer> bn_buffers_;
};

// Initializers
ad::Buf xavier_uniform(Rng& rng, int fan_in, int fan_out, long count, double scale = 1.0);

struct BlockCtx {
    bool training = false;
};

// ------------------------------------------------------------ primitives ---

struct PointwiseConv {
    ad::Var w;  // (Cout, Cin)
    ad::Var b;  // (Cout)

    PointwiseConv() = default;
    PointwiseConv(ParamStore& ps, const std::string& name, int cin, int cout, Rng& rng,
                  bool bias = true, double init_scale = 1.0, double bias_init = 0.0);
    ad::Var apply(const ad::Var& x) const { return ad::pointwise_conv(x, w, b); }
};

struct DwConv {
    ad::Var w;  // (C, k, k)
    ad::Var b;  // (C)
    int dilation = 1;

    DwConv() = default;
    DwConv(ParamStore& ps, const std::string& name, int channels, int kernel, int dilation,
           Rng& rng, bool bias = true);
    ad::Var apply(const ad::Var& x) const { return ad::depthwise_conv(x, w, b, dilation); }
};

struct LayerNorm {
    ad::Var gamma, beta;

    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, int channels);
    ad::Var apply(const ad::Var& x) const { return ad::layer_norm_ch(x, gamma, beta); }
};

struct BatchNorm {
    ad::Var gamma, beta;
    std::shared_ptr<ad::BnState> state;

    BatchNorm() = default;
    BatchNorm(ParamStore& ps, const std::string& name, int channels);
    ad::Var apply(const ad::Var& x, const BlockCtx& ctx) const {
        return ad::batch_norm(x, gamma, beta, state.get(), ctx.training);
    }
};

// Gated feed-forward: two expansion projections, one of them GELU-gated.
struct GatedFfn {
    PointwiseConv in_a, in_b, out;

    GatedFfn() = default;
    GatedFfn(ParamStore& ps, const std::string& name, int channels, int ratio, Rng& rng);
    ad::Var apply(const ad::Var& x) const;
};

// -------------------------------------------------- spectral-wise attention ---

// Spectral-wise self-attention: channels are the tokens, the per-head
// attention matrix is (C/J) x (C/J), divided by a learnable temperature.
struct Swsa {
    PointwiseConv q, k, v, proj;
    std::vector<ad::Var> temps;  // one scalar per head
    int heads = 1;
    int channels = 0;

    struct Detail {
        ad::Var out;
        ad::Var pre_proj;
        std::vector<ad::Var> attention;  // per head, (Cj, Cj)
    };

    Swsa() = default;
    Swsa(ParamStore& ps, const std::string& name, int channels, int heads, Rng& rng,
         double temp_init);
    Detail apply_detailed(const ad::Var& x) const;
    ad::Var apply(const ad::Var& x) const { return apply_detailed(x).out; }
};

struct SwtBlock {
    LayerNorm ln1, ln2;
    Swsa attn;
    GatedFfn ffn;

    SwtBlock() = default;
    SwtBlock(ParamStore& ps, const std::string& name, int channels, int heads, Rng& rng,
             double temp_init, int ffn_ratio = 2);
    ad::Var apply(const ad::Var& x) const;
};

// ------------------------------------------------------------- LK-CNN ---

struct DilatedBranchSpec {
    int kernel;
    int dilation;
};

// Parallel depth-wise branches (one large non-dilated + N small dilated),
// each followed by its own batch norm, summed. Foldable into one large
// kernel once the BN statistics are finalized.
struct DilatedReparam {
    struct Branch {
        DwConv conv;
        BatchNorm bn;
        int kernel;
        int dilation;
    };

    int channels = 0;
    int large_kernel = 0;
    std::vector<Branch> branches;  // branches[0] is the large non-dilated one
    bool deployed = false;
    ad::Var merged_w, merged_b;

    DilatedReparam() = default;
    DilatedReparam(ParamStore& ps, const std::string& name, int channels, int large_kernel,
                   const std::vector<DilatedBranchSpec>& small, Rng& rng);
    ad::Var apply(const ad::Var& x, const BlockCtx& ctx) const;
};

struct MergedConv {
    int channels = 0;
    int kernel = 0;
    ad::Buf weight;  // (C, k, k)
    ad::Buf bias;    // (C)
};

// Folds BN into each branch, expands dilated kernels to their sparse
// equivalents and sums everything into a single large kernel. Requires
// finalized BN statistics.
MergedConv merge_dilated_branches(const DilatedReparam& block);

// Replaces the branches with the merged conv in place (idempotent).
void deploy_dilated_reparam(DilatedReparam& block);

struct SeBlock {
    PointwiseConv down, up;

    SeBlock() = default;
    SeBlock(ParamStore& ps, const std::string& name, int channels, Rng& rng, int reduction = 4);
    ad::Var apply(const ad::Var& x) const;
};

struct LkCnnBlock {
    DilatedReparam reparam;
    SeBlock se;
    LayerNorm ln;
    GatedFfn ffn;

    LkCnnBlock() = default;
    LkCnnBlock(ParamStore& ps, const std::string& name, int channels, int large_kernel,
               const std::vector<DilatedBranchSpec>& small, Rng& rng, int ffn_ratio = 2);
    ad::Var apply(const ad::Var& x, const BlockCtx& ctx) const;
};

// ------------------------------------------------------- attention gates ---

// Three 1x1 convolutions squeezing channels to 1, sigmoid-normalized (H,W) gate.
struct SpatialAttention {
    PointwiseConv c1, c2, c3;

    SpatialAttention() = default;
    SpatialAttention(ParamStore& ps, const std::string& name, int channels, Rng& rng);
    ad::Var apply(const ad::Var& x) const;  // -> (1,H,W), values in (0,1)
};

// GAP then a three-layer 1x1 bottleneck, sigmoid-normalized (C,1,1) gate.
struct ChannelAttention {
    PointwiseConv c1, c2, c3;

    ChannelAttention() = default;
    ChannelAttention(ParamStore& ps, const std::string& name, int channels, Rng& rng);
    ad::Var apply(const ad::Var& x) const;  // -> (C,1,1), values in (0,1)
};

// ------------------------------------------------------ aggregation blocks ---

// Common interface so ablations can swap in simpler fusion operators.
struct FusionBlock {
    virtual ~FusionBlock() = default;
    virtual ad::Var apply(const ad::Var& shared, const ad::Var& comp) const = 0;
};

// Dual-branch block: SWSA on the shared feature with its query gated by
// SA(dwconv(comp)); channel attention from the attention output gates the
// conv branch; branches summed and linearly mixed.
struct SpatialAwareAggregation : FusionBlock {
    LayerNorm ln;
    PointwiseConv q, k, v, linear;
    DwConv dw;
    SpatialAttention sa;
    ChannelAttention ca;
    std::vector<ad::Var> temps;
    int heads = 1;
    int channels = 0;

    SpatialAwareAggregation() = default;
    SpatialAwareAggregation(ParamStore& ps, const std::string& name, int channels, int heads,
                            Rng& rng, double temp_init);
    ad::Var apply(const ad::Var& shared, const ad::Var& comp) const override;
};

// Mirror of the spatial block: CA gates the query, SA gates the conv branch.
struct SpectralAwareAggregation : FusionBlock {
    LayerNorm ln;
    PointwiseConv q, k, v, linear;
    DwConv dw;
    SpatialAttention sa;
    ChannelAttention ca;
    std::vector<ad::Var> temps;
    int heads = 1;
    int channels = 0;

    SpectralAwareAggregation() = default;
    SpectralAwareAggregation(ParamStore& ps, const std::string& name, int channels, int heads,
                             Rng& rng, double temp_init);
    ad::Var apply(const ad::Var& shared, const ad::Var& comp) const override;
};

// Ablation: concatenation + 1x1 convolution.
struct ConcatConvFusion : FusionBlock {
    PointwiseConv mix;

    ConcatConvFusion() = default;
    ConcatConvFusion(ParamStore& ps, const std::string& name, int channels, Rng& rng);
    ad::Var apply(const ad::Var& shared, const ad::Var& comp) const override;
};

// Ablation: plain cross-attention, shared as query, complementary as key/value.
struct CrossAttentionFusion : FusionBlock {
    LayerNorm ln_s, ln_c;
    PointwiseConv q, k, v, proj;
    std::vector<ad::Var> temps;
    int heads = 1;
    int channels = 0;

    CrossAttentionFusion() = default;
    CrossAttentionFusion(ParamStore& ps, const std::string& name, int channels, int heads,
                         Rng& rng, double temp_init);
    ad::Var apply(const ad::Var& shared, const ad::Var& comp) const override;
};

// Multi-head spectral attention core shared by SWSA and the aggregation
// blocks: per head j, softmax(Q_j K_j^T / d_j) V_j, heads concatenated.
ad::Var spectral_attention(const ad::Var& q, const ad::Var& k, const ad::Var& v,
                           const std::vector<ad::Var>& temps, int heads,
                           std::vector<ad::Var>* att_out = nullptr);

}  // namespace moss
