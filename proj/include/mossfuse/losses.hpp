#pragma once

#include "mossfuse/network.hpp"

namespace moss {

struct LossWeights {
    double alpha1 = 0.1;  // L_SC
    double alpha2 = 1.0;  // L_SCT
    double alpha3 = 1.0;  // L_DE

    void validate() const;
};

struct LossReport {
    double l_ma = 0.0;
    double l_sc = 0.0;
    double l_sct = 0.0;
    double l_de = 0.0;
    double total = 0.0;
};

// Estimated (or true) degradation operators as tape variables.
struct DegOperators {
    ad::Var kernel;  // (k,k), sums to ~1 when constrained
    int scale = 1;
    ad::Var srf;     // (B,b)
};

// cos(a,b) over the flattened maps; zero-norm features are degenerate.
ad::Var cosine_flat(const ad::Var& a, const ad::Var& b);

enum class ScVariant {
    NoAggregate,  // L'_SC  = log(sum of repulsion terms)
    NoRepel,      // L''_SC = -log f(F^S_Y, F^S_x)
};

ad::Var subspace_clustering_loss(const DecoupledFeatures& f);
ad::Var subspace_clustering_loss_variant(const DecoupledFeatures& f, ScVariant which);

// L_SCT1 + L_SCT2: input reconstruction plus LR-MSI consistency.
ad::Var sct_loss(const ad::Var& hrmsi, const ad::Var& lrhsi, const ad::Var& recon_hrmsi,
                 const ad::Var& recon_lrhsi, const ad::Var& recon_lrmsi,
                 const DegOperators& ops, bool include_sct2 = true);

// L_DE = mean |C Y - x R|.
ad::Var degradation_loss(const ad::Var& hrmsi, const ad::Var& lrhsi, const DegOperators& ops);

// L_MA = mean |Y - X^ R| + mean |x - C X^|.
ad::Var aggregation_loss(const ad::Var& fused, const ad::Var& hrmsi, const ad::Var& lrhsi,
                         const DegOperators& ops);

// Plain-number combination per the weighted objective; negative weights are
// rejected. The report satisfies total = l_ma + a1*l_sc + a2*l_sct + a3*l_de.
LossReport combine_loss(double l_ma, double l_sc, double l_sct, double l_de,
                        const LossWeights& weights);

struct TotalLoss {
    ad::Var total;
    LossReport report;
};

// Combines the four terms with the (possibly ablated) weights. hrmsi/lrhsi
// are the observed inputs as constants on the tape.
TotalLoss total_loss(const ForwardBundle& bundle, const ad::Var& hrmsi, const ad::Var& lrhsi,
                     const LossWeights& weights, AblationMode mode = AblationMode::Full);

}  // namespace moss
