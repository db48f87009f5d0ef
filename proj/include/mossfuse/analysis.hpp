#pragma once

#include <array>
#include <string>
#include <vector>

#include "mossfuse/degradation.hpp"
#include "mossfuse/network.hpp"

namespace moss {

struct ClusterStats {
    double mean_shared_similarity = 0.0;  // cos(F^S_Y, F^S_x)
    double mean_cross_similarity = 0.0;   // mean over the three cross pairings
};

struct PcaResult {
    ClusterStats stats;
    // Population order: shared_y, shared_x, comp_y, comp_x.
    std::array<std::string, 4> labels{"shared_y", "shared_x", "comp_y", "comp_x"};
    std::array<std::vector<std::array<double, 2>>, 4> coords;
    std::array<double, 2> component_variance{0.0, 0.0};
    double total_variance = 0.0;
};

// Joint PCA over the pooled per-pixel channel vectors of the four decoupled
// feature maps (deterministic stride subsampling to <= max_samples each).
PcaResult pca_features(const DecoupledFeatures& f, int max_samples = 4096);

struct ErrorMapResult {
    SpectralImage map;  // single band, |ref - est|
    double min = 0.0, max = 0.0, mean = 0.0;
};

ErrorMapResult error_map(const SpectralImage& ref, const SpectralImage& est, int band);

struct DegradationComparison {
    double kernel_ncc = 0.0;               // normalized cross-correlation, [-1,1]
    std::vector<double> srf_column_l1;     // per MSI band
    double srf_l1_total = 0.0;
};

DegradationComparison compare_degradation(const Kernel& est_kernel, const SrfMatrix& est_srf,
                                          const Kernel& true_kernel,
                                          const SrfMatrix& true_srf);

// Plain zero-lag NCC of two equally sized kernels (no mean removal, so 1
// exactly when one is a positive multiple of the other).
double kernel_ncc(const Kernel& a, const Kernel& b);

// Portable renderings for visual inspection.
void save_pgm(const std::string& path, int rows, int cols, const std::vector<double>& values);
void render_kernel_pair(const Kernel& est, const Kernel& truth, const std::string& path,
                        int upscale = 16);
void render_srf_pair(const SrfMatrix& est, const SrfMatrix& truth, const std::string& path);
void write_pca_csv(const PcaResult& r, const std::string& path);

}  // namespace moss
