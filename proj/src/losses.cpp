#include "mossfuse/losses.hpp"

#include <cmath>

namespace moss {

using ad::Var;

void LossWeights::validate() const {
    if (!(alpha1 >= 0.0) || !(alpha2 >= 0.0) || !(alpha3 >= 0.0) ||
        !std::isfinite(alpha1) || !std::isfinite(alpha2) || !std::isfinite(alpha3))
        throw ArgumentError("LossWeights: weights must be finite and non-negative");
}

Var cosine_flat(const Var& a, const Var& b) {
    if (a.shape() != b.shape())
        throw ArgumentError("cosine_flat: shape mismatch " + a.shape().str() + " vs " +
                            b.shape().str());
    Var dot = ad::sum(ad::mul(a, b));
    Var na = ad::sum(ad::mul(a, a));
    Var nb = ad::sum(ad::mul(b, b));
    if (!(na.item() > 0.0) || !(nb.item() > 0.0))
        throw DegenerateError("cosine_flat: zero-norm feature vector");
    return ad::div(dot, ad::mul(ad::sqrt(na), ad::sqrt(nb)));
}

namespace {

Var similarity(const Var& a, const Var& b) { return ad::exp(cosine_flat(a, b)); }

}  // namespace

Var subspace_clustering_loss(const DecoupledFeatures& f) {
    Var aligned = similarity(f.shared_y, f.shared_x);
    Var den = ad::add(ad::add(similarity(f.shared_y, f.comp_y), similarity(f.shared_x, f.comp_x)),
                      ad::add(aligned, similarity(f.comp_y, f.comp_x)));
    return ad::neg(ad::log(ad::div(aligned, den)));
}

Var subspace_clustering_loss_variant(const DecoupledFeatures& f, ScVariant which) {
    switch (which) {
        case ScVariant::NoAggregate:
            return ad::log(ad::add(similarity(f.comp_y, f.comp_x),
                                   ad::add(similarity(f.shared_y, f.comp_y),
                                           similarity(f.shared_x, f.comp_x))));
        case ScVariant::NoRepel:
            return ad::neg(ad::log(similarity(f.shared_y, f.shared_x)));
    }
    throw ArgumentError("subspace_clustering_loss_variant: unknown variant");
}

Var sct_loss(const Var& hrmsi, const Var& lrhsi, const Var& recon_hrmsi,
             const Var& recon_lrhsi, const Var& recon_lrmsi, const DegOperators& ops,
             bool include_sct2) {
    Var sct1 = ad::add(ad::l1_diff(hrmsi, recon_hrmsi), ad::l1_diff(lrhsi, recon_lrhsi));
    if (!include_sct2) return sct1;
    Var cy = ad::psf_conv(hrmsi, ops.kernel, ops.scale);
    Var xr = ad::srf_apply(lrhsi, ops.srf);
    Var sct2 = ad::add(ad::l1_diff(cy, recon_lrmsi), ad::l1_diff(xr, recon_lrmsi));
    return ad::add(sct1, sct2);
}

Var degradation_loss(const Var& hrmsi, const Var& lrhsi, const DegOperators& ops) {
    Var cy = ad::psf_conv(hrmsi, ops.kernel, ops.scale);
    Var xr = ad::srf_apply(lrhsi, ops.srf);
    return ad::l1_diff(cy, xr);
}

Var aggregation_loss(const Var& fused, const Var& hrmsi, const Var& lrhsi,
                     const DegOperators& ops) {
    Var xr = ad::srf_apply(fused, ops.srf);
    Var cx = ad::psf_conv(fused, ops.kernel, ops.scale);
    return ad::add(ad::l1_diff(hrmsi, xr), ad::l1_diff(lrhsi, cx));
}

LossReport combine_loss(double l_ma, double l_sc, double l_sct, double l_de,
                        const LossWeights& weights) {
    weights.validate();
    LossReport r;
    r.l_ma = l_ma;
    r.l_sc = l_sc;
    r.l_sct = l_sct;
    r.l_de = l_de;
    r.total = l_ma + weights.alpha1 * l_sc + weights.alpha2 * l_sct + weights.alpha3 * l_de;
    return r;
}

TotalLoss total_loss(const ForwardBundle& bundle, const Var& hrmsi, const Var& lrhsi,
                     const LossWeights& weights, AblationMode mode) {
    weights.validate();
    DegOperators ops{bundle.est_kernel, 0, bundle.est_srf};
    const int hr = hrmsi.shape()[1];
    const int lr = lrhsi.shape()[1];
    if (lr < 1 || hr % lr != 0)
        throw ArgumentError("total_loss: HR/LR dims do not give an integer scale");
    ops.scale = hr / lr;

    // Effective weights under the loss-level ablations; the report invariant
    // total = l_ma + a1*l_sc + a2*l_sct + a3*l_de holds for these.
    LossWeights eff = weights;
    if (mode == AblationMode::NoLsc) eff.alpha1 = 0.0;
    if (mode == AblationMode::NoLsct) eff.alpha2 = 0.0;

    Var sc;
    switch (mode) {
        case AblationMode::NoAggregate:
            sc = subspace_clustering_loss_variant(bundle.features, ScVariant::NoAggregate);
            break;
        case AblationMode::NoRepel:
            sc = subspace_clustering_loss_variant(bundle.features, ScVariant::NoRepel);
            break;
        default:
            sc = subspace_clustering_loss(bundle.features);
            break;
    }
    Var sct = sct_loss(hrmsi, lrhsi, bundle.recon_hrmsi, bundle.recon_lrhsi,
                       bundle.recon_lrmsi, ops, /*include_sct2=*/mode != AblationMode::NoLsct2);
    Var de = degradation_loss(hrmsi, lrhsi, ops);
    Var ma = aggregation_loss(bundle.fused, hrmsi, lrhsi, ops);

    Var total = ma;
    if (eff.alpha1 > 0.0) total = ad::add(total, ad::mul(Var::scalar(eff.alpha1), sc));
    if (eff.alpha2 > 0.0) total = ad::add(total, ad::mul(Var::scalar(eff.alpha2), sct));
    if (eff.alpha3 > 0.0) total = ad::add(total, ad::mul(Var::scalar(eff.alpha3), de));

    TotalLoss out;
    out.total = total;
    out.report.l_ma = ma.item();
    out.report.l_sc = sc.item();
    out.report.l_sct = sct.item();
    out.report.l_de = de.item();
    out.report.total = total.item();
    return out;
}

}  // namespace moss
