#pragma once

#include <string>
#include <vector>

#include "mossfuse/imagery.hpp"

namespace moss {

struct MetricReport {
    double psnr = 0.0;        // mean of per-band PSNR, dB (+inf when identical)
    double psnr_pooled = 0.0; // PSNR of pooled MSE, dB
    double ssim = 0.0;
    double sam_deg = 0.0;     // mean spectral angle, degrees
    double ergas = 0.0;
    std::vector<double> per_band_psnr;
    int sam_skipped = 0;      // zero-norm pixels excluded from SAM
};

// Mean over bands of 10 log10(peak^2 / MSE_band); identical images give +inf.
double psnr(const SpectralImage& ref, const SpectralImage& est, double peak = 1.0);
double psnr_pooled(const SpectralImage& ref, const SpectralImage& est, double peak = 1.0);
std::vector<double> per_band_psnr(const SpectralImage& ref, const SpectralImage& est,
                                  double peak = 1.0);

// Mean per-band SSIM, 11x11 Gaussian window sigma=1.5, K1=0.01, K2=0.03,
// valid-mode windows (no padding).
double ssim(const SpectralImage& ref, const SpectralImage& est, double peak = 1.0);

// Mean per-pixel spectral angle in degrees; zero-norm pixels are skipped and
// counted. All pixels zero-norm is degenerate.
double sam_degrees(const SpectralImage& ref, const SpectralImage& est,
                   int* skipped = nullptr);

// (100/scale) * sqrt( (1/B) sum_k (RMSE_k / mu_k)^2 ), mu_k = ref band mean.
double ergas(const SpectralImage& ref, const SpectralImage& est, int scale);

MetricReport evaluate(const SpectralImage& ref, const SpectralImage& est, int scale,
                      double peak = 1.0);

// JSON encoding; infinities are emitted as the string "inf".
std::string metric_report_json(const MetricReport& r);

}  // namespace moss
