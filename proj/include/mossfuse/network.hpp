#pragma once

#include <memory>
#include <optional>
#include <string>

#include "mossfuse/blocks.hpp"
#include "mossfuse/degradation.hpp"
#include "mossfuse/imagery.hpp"

namespace moss {

enum class AblationMode {
    Full,
    NoLsc,         // drop L_SC from the objective
    NoAggregate,   // L'_SC: repulsion terms only
    NoRepel,       // L''_SC: alignment term only
    ConcatConv,    // aggregation blocks -> concat + 1x1 conv
    CrossAttention,// aggregation blocks -> plain cross-attention
    NoLsct,        // drop L_SCT
    NoLsct2,       // keep only L_SCT1
    ConvDe,        // unconstrained learned degradation operators
};

AblationMode parse_ablation(const std::string& name);
std::string ablation_name(AblationMode mode);

struct ModelConfig {
    int hsi_bands = 31;  // B
    int msi_bands = 3;   // b
    int scale = 4;       // s
    int width = 32;      // latent channels C
    int heads = 4;       // attention heads J
    int base_depth = 4;  // SWT blocks per base encoder
    int dec_depth = 2;   // depth of D_Y, D_x, D_y
    int fused_dec_depth = 4;  // depth of D_X
    int lk_kernel = 13;
    std::vector<DilatedBranchSpec> lk_branches{{5, 1}, {3, 2}, {3, 3}};
    int ffn_ratio = 2;
    double attn_temp_init = 64.0;
    int psf_kernel_size = 0;  // 0 = derive from the neutral-prior lambdas
    AblationMode ablation = AblationMode::Full;

    void validate() const;
    int resolved_psf_kernel_size() const;
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

struct DecoupledFeatures {
    ad::Var shared_y;  // F^S_Y
    ad::Var comp_y;    // F^C_Y
    ad::Var shared_x;  // F^S_x
    ad::Var comp_x;    // F^C_x
};

struct ForwardBundle {
    ad::Var fused;        // X^ (B,H,W)
    ad::Var recon_hrmsi;  // Y^ (b,H,W)
    ad::Var recon_lrhsi;  // x^ (B,h,w)
    ad::Var recon_lrmsi;  // y^ (b,h,w)
    DecoupledFeatures features;
    ad::Var est_kernel;   // (k,k), on the tape
    ad::Var est_srf;      // (B,b), on the tape
    PsfParams est_psf;    // constrained snapshot (unset under conv_de)
    SrfMatrix est_srf_mat;
};

// Differentiable anisotropic Gaussian kernel from scalar Vars; matches
// build_agk_kernel for identical parameters.
ad::Var agk_kernel_var(const ad::Var& lambda1, const ad::Var& lambda2, const ad::Var& theta,
                       int kernel_size);

// Differentiable SRF constraint projection: clamp below at zero, then
// normalize every column to unit sum.
ad::Var project_srf_var(const ad::Var& raw);

ad::Var image_to_var(const SpectralImage& img);
SpectralImage var_to_image(const ad::Var& v);

class MossFuseModel {
public:
    MossFuseModel(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    long param_count() const { return store_.total_params(); }

    void set_training(bool on) { training_ = on; }
    bool training() const { return training_; }

    // Multi-modality decoupling; lrhsi_up must match hrmsi spatially.
    DecoupledFeatures decouple(const SpectralImage& hrmsi, const SpectralImage& lrhsi_up);
    DecoupledFeatures decouple_vars(const ad::Var& hrmsi, const ad::Var& lrhsi_up);

    // Self-supervised reconstruction branch: (Y^, x^, y^).
    struct Reconstructions {
        ad::Var recon_hrmsi;
        ad::Var recon_lrhsi;
        ad::Var recon_lrmsi;
    };
    Reconstructions reconstruct_inputs(const DecoupledFeatures& f);

    // Modality aggregation to the fused latent and decoded X^.
    ad::Var aggregate(const DecoupledFeatures& f);

    ForwardBundle forward(const SpectralImage& hrmsi, const SpectralImage& lrhsi);

    // Current estimated degradation (constrained); ConvDe ablation has no
    // physically meaningful parameters and raises NotAvailableError.
    std::pair<PsfParams, SrfMatrix> estimate_degradation() const;

    // Tape-connected operators used by the losses.
    ad::Var estimated_kernel_var() const;
    ad::Var estimated_srf_var() const;

private:
    ModelConfig cfg_;
    std::uint64_t seed_;
    ParamStore store_;
    bool training_ = false;

    PointwiseConv embed_y_, embed_x_;
    std::vector<SwtBlock> base_y_, base_x_;
    std::unique_ptr<LkCnnBlock> comp_spatial_enc_;
    std::unique_ptr<SwtBlock> comp_spectral_enc_;
    std::unique_ptr<LkCnnBlock> shared_y_lk_, shared_x_lk_;
    std::unique_ptr<SwtBlock> shared_y_swt_, shared_x_swt_;
    PointwiseConv shared_fuse_;
    std::unique_ptr<FusionBlock> agg_y_, agg_x_, agg_fused_spa_, agg_fused_spe_;
    std::vector<SwtBlock> dec_y_, dec_x_, dec_lrmsi_, dec_fused_;
    LayerNorm norm_y_, norm_x_, norm_lrmsi_, norm_fused_;
    PointwiseConv head_y_, head_x_, head_lrmsi_, head_fused_;

    // degradation estimation parameters
    ad::Var raw_lambda1_, raw_lambda2_, raw_theta_, raw_srf_;
    ad::Var conv_de_kernel_, conv_de_srf_;  // ConvDe ablation only

    std::unique_ptr<FusionBlock> make_fusion(const std::string& name, bool spatial, Rng& rng);
    ad::Var run_decoder(const std::vector<SwtBlock>& blocks, const LayerNorm& norm,
                        const PointwiseConv& head, const ad::Var& x) const;
};

// Builds the requested ablation variant of `model` (same config otherwise),
// copying every parameter whose name and shape still match.
std::unique_ptr<MossFuseModel> apply_ablation(const MossFuseModel& model, AblationMode mode);

// Versioned checkpoint: magic string, JSON directory, float64 payload.
inline constexpr const char* kCheckpointMagic = "MOSSFUSE-CKPT-1\n";
void save_checkpoint(const MossFuseModel& model, const std::string& path);
std::unique_ptr<MossFuseModel> load_checkpoint(const std::string& path);

}  // namespace moss
