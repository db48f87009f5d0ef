#include "mossfuse/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "json.hpp"

namespace moss {

using ad::Shape;
using ad::Var;

AblationMode parse_ablation(const std::string& name) {
    if (name == "full") return AblationMode::Full;
    if (name == "no_lsc") return AblationMode::NoLsc;
    if (name == "no_aggregate") return AblationMode::NoAggregate;
    if (name == "no_repel") return AblationMode::NoRepel;
    if (name == "concat_conv") return AblationMode::ConcatConv;
    if (name == "cross_attention") return AblationMode::CrossAttention;
    if (name == "no_lsct") return AblationMode::NoLsct;
    if (name == "no_lsct2") return AblationMode::NoLsct2;
    if (name == "conv_de") return AblationMode::ConvDe;
    throw ArgumentError("unknown ablation mode: " + name);
}

std::string ablation_name(AblationMode mode) {
    switch (mode) {
        case AblationMode::Full: return "full";
        case AblationMode::NoLsc: return "no_lsc";
        case AblationMode::NoAggregate: return "no_aggregate";
        case AblationMode::NoRepel: return "no_repel";
        case AblationMode::ConcatConv: return "concat_conv";
        case AblationMode::CrossAttention: return "cross_attention";
        case AblationMode::NoLsct: return "no_lsct";
        case AblationMode::NoLsct2: return "no_lsct2";
        case AblationMode::ConvDe: return "conv_de";
    }
    throw ArgumentError("unknown ablation mode");
}

void ModelConfig::validate() const {
    if (hsi_bands < 1 || msi_bands < 1 || msi_bands > hsi_bands)
        throw ConfigError("ModelConfig: need 1 <= msi_bands <= hsi_bands");
    if (scale < 1) throw ConfigError("ModelConfig: scale must be >= 1");
    if (width < 1 || heads < 1 || width % heads != 0)
        throw ConfigError("ModelConfig: width must be a positive multiple of heads");
    if (base_depth < 1 || dec_depth < 1 || fused_dec_depth < 1)
        throw ConfigError("ModelConfig: depths must be >= 1");
    if (lk_kernel < 3 || lk_kernel % 2 == 0)
        throw ConfigError("ModelConfig: lk_kernel must be odd and >= 3");
    if (psf_kernel_size != 0 && (psf_kernel_size < 3 || psf_kernel_size % 2 == 0))
        throw ConfigError("ModelConfig: psf_kernel_size must be odd and >= 3");
    if (attn_temp_init == 0.0) throw ConfigError("ModelConfig: attn_temp_init must be nonzero");
}

int ModelConfig::resolved_psf_kernel_size() const {
    if (psf_kernel_size != 0) return psf_kernel_size;
    const double l0 = 0.25 * scale * scale;  // neutral prior (0.5*s)^2
    return PsfParams::default_kernel_size(l0, l0);
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["hsi_bands"] = hsi_bands;
    j["msi_bands"] = msi_bands;
    j["scale"] = scale;
    j["width"] = width;
    j["heads"] = heads;
    j["base_depth"] = base_depth;
    j["dec_depth"] = dec_depth;
    j["fused_dec_depth"] = fused_dec_depth;
    j["lk_kernel"] = lk_kernel;
    nlohmann::json br = nlohmann::json::array();
    for (const auto& b : lk_branches) br.push_back({{"kernel", b.kernel}, {"dilation", b.dilation}});
    j["lk_branches"] = br;
    j["ffn_ratio"] = ffn_ratio;
    j["attn_temp_init"] = attn_temp_init;
    j["psf_kernel_size"] = psf_kernel_size;
    j["ablation"] = ablation_name(ablation);
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("ModelConfig: bad json: ") + e.what());
    }
    ModelConfig c;
    c.hsi_bands = j.value("hsi_bands", c.hsi_bands);
    c.msi_bands = j.value("msi_bands", c.msi_bands);
    c.scale = j.value("scale", c.scale);
    c.width = j.value("width", c.width);
    c.heads = j.value("heads", c.heads);
    c.base_depth = j.value("base_depth", c.base_depth);
    c.dec_depth = j.value("dec_depth", c.dec_depth);
    c.fused_dec_depth = j.value("fused_dec_depth", c.fused_dec_depth);
    c.lk_kernel = j.value("lk_kernel", c.lk_kernel);
    if (j.contains("lk_branches")) {
        c.lk_branches.clear();
        for (const auto& b : j["lk_branches"])
            c.lk_branches.push_back({b.at("kernel").get<int>(), b.at("dilation").get<int>()});
    }
    c.ffn_ratio = j.value("ffn_ratio", c.ffn_ratio);
    c.attn_temp_init = j.value("attn_temp_init", c.attn_temp_init);
    c.psf_kernel_size = j.value("psf_kernel_size", c.psf_kernel_size);
    c.ablation = parse_ablation(j.value("ablation", std::string("full")));
    c.validate();
    return c;
}

// ------------------------------------------------------- AD degradation ---

Var agk_kernel_var(const Var& lambda1, const Var& lambda2, const Var& theta, int kernel_size) {
    if (kernel_size < 3 || kernel_size % 2 == 0)
        throw ArgumentError("agk_kernel_var: kernel size must be odd and >= 3");
    const int r = kernel_size / 2;
    const long kk = static_cast<long>(kernel_size) * kernel_size;
    ad::Buf u2(kk), uv(kk), v2(kk);
    long i = 0;
    for (int y = -r; y <= r; ++y)
        for (int x = -r; x <= r; ++x, ++i) {
            u2[i] = static_cast<Real>(x) * x;
            uv[i] = static_cast<Real>(x) * y;
            v2[i] = static_cast<Real>(y) * y;
        }
    const Shape grid{kernel_size, kernel_size};
    Var gu2 = Var::leaf(grid, std::move(u2), false);
    Var guv = Var::leaf(grid, std::move(uv), false);
    Var gv2 = Var::leaf(grid, std::move(v2), false);
    Var one = Var::scalar(1.0);
    Var half = Var::scalar(0.5);

    Var c = ad::cos(theta), s = ad::sin(theta);
    Var il1 = ad::div(one, lambda1), il2 = ad::div(one, lambda2);
    Var qa = ad::add(ad::mul(ad::mul(c, c), il1), ad::mul(ad::mul(s, s), il2));
    Var qc = ad::add(ad::mul(ad::mul(s, s), il1), ad::mul(ad::mul(c, c), il2));
    Var qb = ad::mul(ad::mul(c, s), ad::sub(il1, il2));
    Var qfield = ad::add(ad::add(ad::mul(ad::mul(half, qa), gu2), ad::mul(qb, guv)),
                         ad::mul(ad::mul(half, qc), gv2));
    Var kraw = ad::exp(ad::neg(qfield));
    Var ksum = ad::sum(kraw);
    if (!(ksum.item() > 0.0) || !std::isfinite(ksum.item()))
        throw NumericError("agk_kernel_var: kernel mass underflow");
    return ad::div(kraw, ksum);
}

Var project_srf_var(const Var& raw) {
    if (raw.shape().rank() != 2) throw ArgumentError("project_srf_var: rank-2 input required");
    Var clamped = ad::relu(raw);
    Var sums = ad::colsum(clamped);  // (1,b)
    for (Real s : sums.value())
        if (!(s > 0.0))
            throw DegenerateError("project_srf_var: column is non-positive everywhere");
    return ad::div(clamped, sums);
}

Var image_to_var(const SpectralImage& img) {
    ad::Buf buf(static_cast<size_t>(img.size()));
    for (long i = 0; i < img.size(); ++i) buf[i] = img.data[i];
    return Var::leaf(Shape{img.bands, img.height, img.width}, std::move(buf), false);
}

SpectralImage var_to_image(const Var& v) {
    if (v.shape().rank() != 3) throw ArgumentError("var_to_image: rank-3 var required");
    SpectralImage img(v.shape()[1], v.shape()[2], v.shape()[0]);
    const ad::Buf& buf = v.value();
    for (size_t i = 0; i < buf.size(); ++i) img.data[i] = static_cast<float>(buf[i]);
    return img;
}

// ------------------------------------------------------------- the model ---

namespace {

Real inverse_softplus(Real y) {  // raw such that softplus(raw) = y
    return y > 30.0 ? y : std::log(std::expm1(y));
}

std::vector<SwtBlock> make_swt_stack(ParamStore& ps, const std::string& name, int count,
                                     int channels, int heads, Rng& rng, double temp_init,
                                     int ffn_ratio) {
    std::vector<SwtBlock> v;
    v.reserve(count);
    for (int i = 0; i < count; ++i)
        v.emplace_back(ps, name + ".swt" + std::to_string(i), channels, heads, rng, temp_init,
                       ffn_ratio);
    return v;
}

}  // namespace

std::unique_ptr<FusionBlock> MossFuseModel::make_fusion(const std::string& name, bool spatial,
                                                        Rng& rng) {
    switch (cfg_.ablation) {
        case AblationMode::ConcatConv:
            return std::make_unique<ConcatConvFusion>(store_, name, cfg_.width, rng);
        case AblationMode::CrossAttention:
            return std::make_unique<CrossAttentionFusion>(store_, name, cfg_.width, cfg_.heads,
                                                          rng, cfg_.attn_temp_init);
        default:
            if (spatial)
                return std::make_unique<SpatialAwareAggregation>(store_, name, cfg_.width,
                                                                 cfg_.heads, rng,
                                                                 cfg_.attn_temp_init);
            return std::make_unique<SpectralAwareAggregation>(store_, name, cfg_.width,
                                                              cfg_.heads, rng,
                                                              cfg_.attn_temp_init);
    }
}

MossFuseModel::MossFuseModel(const ModelConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), seed_(seed) {
    cfg_.validate();
    Rng rng(seed);
    const int C = cfg_.width, J = cfg_.heads;
    const double t0 = cfg_.attn_temp_init;

    embed_y_ = PointwiseConv(store_, "embed_y", cfg_.msi_bands, C, rng);
    embed_x_ = PointwiseConv(store_, "embed_x", cfg_.hsi_bands, C, rng);
    base_y_ = make_swt_stack(store_, "base_y", cfg_.base_depth, C, J, rng, t0, cfg_.ffn_ratio);
    base_x_ = make_swt_stack(store_, "base_x", cfg_.base_depth, C, J, rng, t0, cfg_.ffn_ratio);

    comp_spatial_enc_ = std::make_unique<LkCnnBlock>(store_, "comp_spatial", C, cfg_.lk_kernel,
                                                     cfg_.lk_branches, rng, cfg_.ffn_ratio);
    comp_spectral_enc_ =
        std::make_unique<SwtBlock>(store_, "comp_spectral", C, J, rng, t0, cfg_.ffn_ratio);
    shared_y_lk_ = std::make_unique<LkCnnBlock>(store_, "shared_y.lk", C, cfg_.lk_kernel,
                                                cfg_.lk_branches, rng, cfg_.ffn_ratio);
    shared_y_swt_ =
        std::make_unique<SwtBlock>(store_, "shared_y.swt", C, J, rng, t0, cfg_.ffn_ratio);
    shared_x_lk_ = std::make_unique<LkCnnBlock>(store_, "shared_x.lk", C, cfg_.lk_kernel,
                                                cfg_.lk_branches, rng, cfg_.ffn_ratio);
    shared_x_swt_ =
        std::make_unique<SwtBlock>(store_, "shared_x.swt", C, J, rng, t0, cfg_.ffn_ratio);
    shared_fuse_ = PointwiseConv(store_, "shared_fuse", 2 * C, C, rng);

    agg_y_ = make_fusion("agg_y", /*spatial=*/true, rng);
    agg_x_ = make_fusion("agg_x", /*spatial=*/false, rng);
    agg_fused_spa_ = make_fusion("agg_fused_spa", true, rng);
    agg_fused_spe_ = make_fusion("agg_fused_spe", false, rng);

    dec_y_ = make_swt_stack(store_, "dec_y", cfg_.dec_depth, C, J, rng, t0, cfg_.ffn_ratio);
    dec_x_ = make_swt_stack(store_, "dec_x", cfg_.dec_depth, C, J, rng, t0, cfg_.ffn_ratio);
    dec_lrmsi_ =
        make_swt_stack(store_, "dec_lrmsi", cfg_.dec_depth, C, J, rng, t0, cfg_.ffn_ratio);
    dec_fused_ =
        make_swt_stack(store_, "dec_fused", cfg_.fused_dec_depth, C, J, rng, t0, cfg_.ffn_ratio);
    norm_y_ = LayerNorm(store_, "norm_y", C);
    norm_x_ = LayerNorm(store_, "norm_x", C);
    norm_lrmsi_ = LayerNorm(store_, "norm_lrmsi", C);
    norm_fused_ = LayerNorm(store_, "norm_fused", C);
    // Output heads start at mid-gray: normalized cubes live in [0,1], and a
    // zero bias cannot travel to the data mean within a small step budget.
    head_y_ = PointwiseConv(store_, "head_y", C, cfg_.msi_bands, rng, true, 1.0, 0.5);
    head_x_ = PointwiseConv(store_, "head_x", C, cfg_.hsi_bands, rng, true, 1.0, 0.5);
    head_lrmsi_ = PointwiseConv(store_, "head_lrmsi", C, cfg_.msi_bands, rng, true, 1.0, 0.5);
    head_fused_ = PointwiseConv(store_, "head_fused", C, cfg_.hsi_bands, rng, true, 1.0, 0.5);

    if (cfg_.ablation == AblationMode::ConvDe) {
        // Unconstrained learned degradation: free conv kernel + free mixing matrix.
        const int k = cfg_.resolved_psf_kernel_size();
        PsfParams init{0.25 * cfg_.scale * cfg_.scale, 0.25 * cfg_.scale * cfg_.scale, 0.0, k,
                       cfg_.scale};
        Kernel k0 = build_agk_kernel(init);
        conv_de_kernel_ = store_.add("degradation.conv_kernel", Shape{k, k}, k0.w);
        conv_de_srf_ = store_.add(
            "degradation.conv_srf", Shape{cfg_.hsi_bands, cfg_.msi_bands},
            ad::Buf(static_cast<size_t>(cfg_.hsi_bands) * cfg_.msi_bands,
                    1.0 / cfg_.hsi_bands));
    } else {
        const Real l0 = 0.25 * cfg_.scale * cfg_.scale;
        raw_lambda1_ = store_.add("degradation.raw_lambda1", Shape{1},
                                  ad::Buf{inverse_softplus(l0)});
        raw_lambda2_ = store_.add("degradation.raw_lambda2", Shape{1},
                                  ad::Buf{inverse_softplus(l0)});
        raw_theta_ = store_.add("degradation.raw_theta", Shape{1}, ad::Buf{0.0});
        raw_srf_ = store_.add("degradation.raw_srf", Shape{cfg_.hsi_bands, cfg_.msi_bands},
                              ad::Buf(static_cast<size_t>(cfg_.hsi_bands) * cfg_.msi_bands,
                                      1.0 / cfg_.hsi_bands));
    }
}

DecoupledFeatures MossFuseModel::decouple(const SpectralImage& hrmsi,
                                          const SpectralImage& lrhsi_up) {
    if (hrmsi.height != lrhsi_up.height || hrmsi.width != lrhsi_up.width)
        throw ArgumentError("decouple: inputs must share spatial dims");
    if (hrmsi.bands != cfg_.msi_bands || lrhsi_up.bands != cfg_.hsi_bands)
        throw ArgumentError("decouple: band counts do not match model config");
    return decouple_vars(image_to_var(hrmsi), image_to_var(lrhsi_up));
}

DecoupledFeatures MossFuseModel::decouple_vars(const Var& hrmsi, const Var& lrhsi_up) {
    BlockCtx ctx{training_};
    Var fy = embed_y_.apply(hrmsi);
    for (const SwtBlock& b : base_y_) fy = b.apply(fy);
    Var fx = embed_x_.apply(lrhsi_up);
    for (const SwtBlock& b : base_x_) fx = b.apply(fx);

    DecoupledFeatures f;
    f.comp_y = comp_spatial_enc_->apply(fy, ctx);
    f.comp_x = comp_spectral_enc_->apply(fx);
    f.shared_y = shared_y_swt_->apply(shared_y_lk_->apply(fy, ctx));
    f.shared_x = shared_x_swt_->apply(shared_x_lk_->apply(fx, ctx));
    return f;
}

Var MossFuseModel::run_decoder(const std::vector<SwtBlock>& blocks, const LayerNorm& norm,
                               const PointwiseConv& head, const Var& x) const {
    Var z = x;
    for (const SwtBlock& b : blocks) z = b.apply(z);
    return head.apply(norm.apply(z));
}

MossFuseModel::Reconstructions MossFuseModel::reconstruct_inputs(const DecoupledFeatures& f) {
    Reconstructions r;
    Var f_y = agg_y_->apply(f.shared_y, f.comp_y);
    Var f_x = agg_x_->apply(f.shared_x, f.comp_x);
    Var f_lrmsi = shared_fuse_.apply(ad::concat_ch({f.shared_y, f.shared_x}));
    r.recon_hrmsi = run_decoder(dec_y_, norm_y_, head_y_, f_y);
    r.recon_lrhsi = ad::avg_pool(run_decoder(dec_x_, norm_x_, head_x_, f_x), cfg_.scale);
    r.recon_lrmsi =
        ad::avg_pool(run_decoder(dec_lrmsi_, norm_lrmsi_, head_lrmsi_, f_lrmsi), cfg_.scale);
    return r;
}

Var MossFuseModel::aggregate(const DecoupledFeatures& f) {
    Var shared = ad::add(f.shared_y, f.shared_x);
    Var fx = agg_fused_spe_->apply(agg_fused_spa_->apply(shared, f.comp_y), f.comp_x);
    return run_decoder(dec_fused_, norm_fused_, head_fused_, fx);
}

ForwardBundle MossFuseModel::forward(const SpectralImage& hrmsi, const SpectralImage& lrhsi) {
    hrmsi.validate();
    lrhsi.validate();
    if (hrmsi.height != lrhsi.height * cfg_.scale || hrmsi.width != lrhsi.width * cfg_.scale)
        throw ArgumentError("forward: HR-MSI dims must be LR-HSI dims x scale");
    SpectralImage lr_up = upsample(lrhsi, cfg_.scale);

    ForwardBundle out;
    out.features = decouple(hrmsi, lr_up);
    Reconstructions r = reconstruct_inputs(out.features);
    out.recon_hrmsi = r.recon_hrmsi;
    out.recon_lrhsi = r.recon_lrhsi;
    out.recon_lrmsi = r.recon_lrmsi;
    out.fused = aggregate(out.features);
    out.est_kernel = estimated_kernel_var();
    out.est_srf = estimated_srf_var();
    if (cfg_.ablation != AblationMode::ConvDe) {
        auto [psf, srf] = estimate_degradation();
        out.est_psf = psf;
        out.est_srf_mat = srf;
    }
    return out;
}

Var MossFuseModel::estimated_kernel_var() const {
    if (cfg_.ablation == AblationMode::ConvDe) return conv_de_kernel_;
    return agk_kernel_var(ad::softplus(raw_lambda1_), ad::softplus(raw_lambda2_), raw_theta_,
                          cfg_.resolved_psf_kernel_size());
}

Var MossFuseModel::estimated_srf_var() const {
    if (cfg_.ablation == AblationMode::ConvDe) return conv_de_srf_;
    return project_srf_var(raw_srf_);
}

std::pair<PsfParams, SrfMatrix> MossFuseModel::estimate_degradation() const {
    if (cfg_.ablation == AblationMode::ConvDe)
        throw NotAvailableError(
            "estimate_degradation: conv_de ablation has no constrained parameters");
    ad::NoGradGuard ng;
    PsfParams p;
    p.lambda1 = ad::softplus(raw_lambda1_).item();
    p.lambda2 = ad::softplus(raw_lambda2_).item();
    p.theta_k = raw_theta_.item();
    p.kernel_size = cfg_.resolved_psf_kernel_size();
    p.scale = cfg_.scale;

    Var srf = project_srf_var(raw_srf_);
    SrfMatrix r(cfg_.hsi_bands, cfg_.msi_bands);
    r.weights = srf.value();
    r.validate();
    return {p, r};
}

std::unique_ptr<MossFuseModel> apply_ablation(const MossFuseModel& model, AblationMode mode) {
    ModelConfig cfg = model.config();
    cfg.ablation = mode;
    auto variant = std::make_unique<MossFuseModel>(cfg, model.seed());
    // Carry over every tensor that still exists under the same name.
    for (const auto& p : variant->params().params()) {
        for (const auto& src : model.params().params()) {
            if (src.name == p.name && src.var.shape() == p.var.shape()) {
                p.var.node()->val = std::make_shared<ad::Buf>(src.var.value());
                break;
            }
        }
    }
    return variant;
}

// ------------------------------------------------------------- checkpoint ---

void save_checkpoint(const MossFuseModel& model, const std::string& path) {
    nlohmann::json j;
    j["config"] = nlohmann::json::parse(model.config().to_json());
    j["seed"] = model.seed();
    nlohmann::json params = nlohmann::json::array();
    for (const auto& p : model.params().params()) {
        nlohmann::json e;
        e["name"] = p.name;
        nlohmann::json shp = nlohmann::json::array();
        for (int i = 0; i < p.var.shape().rank(); ++i) shp.push_back(p.var.shape()[i]);
        e["shape"] = shp;
        params.push_back(e);
    }
    j["params"] = params;
    nlohmann::json bns = nlohmann::json::array();
    for (const auto& b : model.params().bn_buffers()) {
        nlohmann::json e;
        e["name"] = b.name;
        e["channels"] = b.state->running_mean.size();
        e["batches_seen"] = b.state->batches_seen;
        bns.push_back(e);
    }
    j["bn"] = bns;
    const std::string header = j.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_checkpoint: cannot write " + path);
    f.write(kCheckpointMagic, static_cast<long>(std::strlen(kCheckpointMagic)));
    const std::uint64_t hlen = header.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(header.data(), static_cast<long>(header.size()));
    for (const auto& p : model.params().params()) {
        const ad::Buf& v = p.var.value();
        f.write(reinterpret_cast<const char*>(v.data()),
                static_cast<long>(v.size() * sizeof(Real)));
    }
    for (const auto& b : model.params().bn_buffers()) {
        f.write(reinterpret_cast<const char*>(b.state->running_mean.data()),
                static_cast<long>(b.state->running_mean.size() * sizeof(Real)));
        f.write(reinterpret_cast<const char*>(b.state->running_var.data()),
                static_cast<long>(b.state->running_var.size() * sizeof(Real)));
    }
    if (!f) throw IoError("save_checkpoint: write failed on " + path);
}

std::unique_ptr<MossFuseModel> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    std::string magic(std::strlen(kCheckpointMagic), '\0');
    f.read(magic.data(), static_cast<long>(magic.size()));
    if (!f || magic != kCheckpointMagic)
        throw FormatError("load_checkpoint: bad magic in " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!f || hlen == 0 || hlen > (1u << 26))
        throw FormatError("load_checkpoint: bad header length");
    std::string header(hlen, '\0');
    f.read(header.data(), static_cast<long>(hlen));
    if (!f) throw FormatError("load_checkpoint: truncated header");

    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("load_checkpoint: corrupt header: ") + e.what());
    }
    ModelConfig cfg = ModelConfig::from_json(j.at("config").dump());
    const std::uint64_t seed = j.value("seed", 0ull);
    auto model = std::make_unique<MossFuseModel>(cfg, seed);

    const auto& plist = j.at("params");
    const auto& stored = model->params().params();
    if (plist.size() != stored.size())
        throw IntegrityError("load_checkpoint: parameter count mismatch");
    for (size_t i = 0; i < stored.size(); ++i) {
        const auto& e = plist[i];
        if (e.at("name").get<std::string>() != stored[i].name)
            throw IntegrityError("load_checkpoint: parameter order mismatch at " +
                                 stored[i].name);
        ad::Buf& dst = stored[i].var.node()->val ? *stored[i].var.node()->val
                                                 : *(stored[i].var.node()->val =
                                                         std::make_shared<ad::Buf>());
        dst.resize(static_cast<size_t>(stored[i].var.shape().numel()));
        f.read(reinterpret_cast<char*>(dst.data()),
               static_cast<long>(dst.size() * sizeof(Real)));
        if (!f) throw IntegrityError("load_checkpoint: truncated payload at " + stored[i].name);
    }
    const auto& blist = j.at("bn");
    const auto& bstored = model->params().bn_buffers();
    if (blist.size() != bstored.size())
        throw IntegrityError("load_checkpoint: BN buffer count mismatch");
    for (size_t i = 0; i < bstored.size(); ++i) {
        if (blist[i].at("name").get<std::string>() != bstored[i].name)
            throw IntegrityError("load_checkpoint: BN buffer order mismatch");
        bstored[i].state->batches_seen = blist[i].value("batches_seen", 0l);
        f.read(reinterpret_cast<char*>(bstored[i].state->running_mean.data()),
               static_cast<long>(bstored[i].state->running_mean.size() * sizeof(Real)));
        f.read(reinterpret_cast<char*>(bstored[i].state->running_var.data()),
               static_cast<long>(bstored[i].state->running_var.size() * sizeof(Real)));
        if (!f) throw IntegrityError("load_checkpoint: truncated BN payload");
    }
    return model;
}

}  // namespace moss
