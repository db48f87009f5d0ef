#pragma once

#include <string>
#include <vector>

#include "mossfuse/imagery.hpp"

namespace moss {

// Anisotropic Gaussian PSF: covariance built from eigenvalues (lambda1,
// lambda2) and rotation theta_k, plus the downsampling factor it is paired
// with. Coordinates: first principal axis at theta = 0 is horizontal,
// positive theta rotates toward positive row direction.
struct PsfParams {
    double lambda1 = 1.0;   // variance along first principal axis (px^2)
    double lambda2 = 1.0;   // variance along second axis (px^2)
    double theta_k = 0.0;   // rotation (radians)
    int kernel_size = 0;    // odd, >= 3; 0 = derive from lambdas
    int scale = 1;

    void validate() const;
    // 2*ceil(3*sqrt(max(l1,l2)))+1, capped at 15: covers the >= 3-sigma mass.
    static int default_kernel_size(double l1, double l2);
    int resolved_kernel_size() const;
};

struct Kernel {
    int rows = 0, cols = 0;
    std::vector<double> w;

    double at(int y, int x) const { return w[static_cast<size_t>(y) * cols + x]; }
    double& at(int y, int x) { return w[static_cast<size_t>(y) * cols + x]; }
    double sum() const;
};

// B x b spectral response matrix; columns are the MSI band responses.
struct SrfMatrix {
    int hsi_bands = 0;  // B (rows)
    int msi_bands = 0;  // b (cols)
    std::vector<double> weights;  // row-major

    SrfMatrix() = default;
    SrfMatrix(int B, int b) : hsi_bands(B), msi_bands(b),
                              weights(static_cast<size_t>(B) * b, 0.0) {}
    static SrfMatrix identity(int B);

    double at(int i, int j) const { return weights[static_cast<size_t>(i) * msi_bands + j]; }
    double& at(int i, int j) { return weights[static_cast<size_t>(i) * msi_bands + j]; }

    // Enforces non-negativity and per-column sum-to-one (within 1e-6).
    void validate() const;
};

// Normalized anisotropic Gaussian kernel on the integer grid centered at the
// middle cell.
Kernel build_agk_kernel(const PsfParams& params);

// Per-band correlation with `kernel` under reflect padding, then subsampling
// every scale-th pixel anchored at offset 0.
SpectralImage spatial_degrade(const SpectralImage& img, const Kernel& kernel, int scale);

// Per-pixel spectral mixing by the SRF matrix.
SpectralImage spectral_degrade(const SpectralImage& img, const SrfMatrix& srf);

// Clamp negatives to zero, then rescale each column to sum to one.
SrfMatrix project_srf(const SrfMatrix& raw);

// Wald-protocol synthesis: degrade a ground-truth cube into the two inputs.
SceneTriplet synthesize_triplet(const SpectralImage& truth, const PsfParams& psf,
                                const SrfMatrix& srf);

// Synthetic SRF whose b columns are Gaussian band responses over the band
// axis (centers evenly spaced, width in band units; 0 = B/(2b)).
SrfMatrix make_gaussian_srf(int hsi_bands, int msi_bands, double width_bands = 0.0);

// CSV: one row per HSI band, one column per MSI band, optional header row.
SrfMatrix load_srf_csv(const std::string& path);
void save_srf_csv(const SrfMatrix& srf, const std::string& path);

}  // namespace moss
