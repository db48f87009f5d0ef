#include "mossfuse/degradation.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "mossfuse/gridmath.hpp"

namespace moss {

void PsfParams::validate() const {
    if (!(lambda1 > 0.0) || !(lambda2 > 0.0))
        throw ArgumentError("PsfParams: lambdas must be positive");
    if (!std::isfinite(lambda1) || !std::isfinite(lambda2) || !std::isfinite(theta_k))
        throw ArgumentError("PsfParams: non-finite parameter");
    if (kernel_size != 0 && (kernel_size < 3 || kernel_size % 2 == 0))
        throw ArgumentError("PsfParams: kernel_size must be odd and >= 3");
    if (scale < 1) throw ArgumentError("PsfParams: scale must be >= 1");
}

int PsfParams::default_kernel_size(double l1, double l2) {
    const int k = 2 * static_cast<int>(std::ceil(3.0 * std::sqrt(std::max(l1, l2)))) + 1;
    return std::min(std::max(k, 3), 15);
}

int PsfParams::resolved_kernel_size() const {
    return kernel_size != 0 ? kernel_size : default_kernel_size(lambda1, lambda2);
}

double Kernel::sum() const {
    double s = 0.0;
    for (double v : w) s += v;
    return s;
}

SrfMatrix SrfMatrix::identity(int B) {
    SrfMatrix r(B, B);
    for (int i = 0; i < B; ++i) r.at(i, i) = 1.0;
    return r;
}

void SrfMatrix::validate() const {
    if (hsi_bands <= 0 || msi_bands <= 0)
        throw ArgumentError("SrfMatrix: non-positive dims");
    if (static_cast<long>(weights.size()) != static_cast<long>(hsi_bands) * msi_bands)
        throw ArgumentError("SrfMatrix: weight count mismatch");
    for (double v : weights) {
        if (!std::isfinite(v)) throw ArgumentError("SrfMatrix: non-finite weight");
        if (v < 0.0) throw ArgumentError("SrfMatrix: negative weight");
    }
    for (int j = 0; j < msi_bands; ++j) {
        double s = 0.0;
        for (int i = 0; i < hsi_bands; ++i) s += at(i, j);
        if (std::fabs(s - 1.0) > 1e-6)
            throw ArgumentError("SrfMatrix: column " + std::to_string(j) +
                                " sums to " + std::to_string(s) + ", expected 1");
    }
}

Kernel build_agk_kernel(const PsfParams& params) {
    params.validate();
    const int k = params.resolved_kernel_size();
    const int r = k / 2;
    const double c = std::cos(params.theta_k), s = std::sin(params.theta_k);
    const double il1 = 1.0 / params.lambda1, il2 = 1.0 / params.lambda2;
    // Sigma^-1 = R(theta) diag(1/l1, 1/l2) R(theta)^T
    const double qa = c * c * il1 + s * s * il2;
    const double qc = s * s * il1 + c * c * il2;
    const double qb = c * s * (il1 - il2);
    if (!std::isfinite(qa) || !std::isfinite(qb) || !std::isfinite(qc))
        throw NumericError("build_agk_kernel: singular covariance");

    Kernel kern;
    kern.rows = kern.cols = k;
    kern.w.assign(static_cast<size_t>(k) * k, 0.0);
    double total = 0.0;
    for (int y = -r; y <= r; ++y)
        for (int x = -r; x <= r; ++x) {
            const double q = 0.5 * (qa * x * x + 2.0 * qb * x * y + qc * y * y);
            const double v = std::exp(-q);
            kern.at(y + r, x + r) = v;
            total += v;
        }
    if (!(total > 0.0) || !std::isfinite(total))
        throw NumericError("build_agk_kernel: kernel mass underflow");
    for (double& v : kern.w) v /= total;
    return kern;
}

SpectralImage spatial_degrade(const SpectralImage& img, const Kernel& kernel, int scale) {
    img.validate();
    if (kernel.rows < 1 || kernel.cols < 1 || kernel.rows % 2 == 0 || kernel.cols % 2 == 0)
        throw ArgumentError("spatial_degrade: kernel dims must be odd");
    if (scale < 1) throw ArgumentError("spatial_degrade: scale must be >= 1");
    if (img.height % scale != 0 || img.width % scale != 0)
        throw ArgumentError("spatial_degrade: dims not divisible by scale");

    const int H = img.height, W = img.width;
    const int ho = H / scale, wo = W / scale;
    const int ry = kernel.rows / 2, rx = kernel.cols / 2;
    SpectralImage out(ho, wo, img.bands);
    out.wavelengths_nm = img.wavelengths_nm;

    for (int b = 0; b < img.bands; ++b) {
        const float* src = img.band_ptr(b);
        float* dst = out.band_ptr(b);
        for (int yo = 0; yo < ho; ++yo)
            for (int xo = 0; xo < wo; ++xo) {
                double acc = 0.0;
                for (int ky = 0; ky < kernel.rows; ++ky) {
                    const int sy = reflect_index(yo * scale + ky - ry, H);
                    for (int kx = 0; kx < kernel.cols; ++kx) {
                        const int sx = reflect_index(xo * scale + kx - rx, W);
                        acc += kernel.at(ky, kx) * src[static_cast<long>(sy) * W + sx];
                    }
                }
                dst[static_cast<long>(yo) * wo + xo] = static_cast<float>(acc);
            }
    }
    return out;
}

SpectralImage spectral_degrade(const SpectralImage& img, const SrfMatrix& srf) {
    img.validate();
    if (img.bands != srf.hsi_bands)
        throw ArgumentError("spectral_degrade: image bands " + std::to_string(img.bands) +
                            " != SRF rows " + std::to_string(srf.hsi_bands));
    SpectralImage out(img.height, img.width, srf.msi_bands);
    const long plane = img.plane();
    for (int j = 0; j < srf.msi_bands; ++j) {
        float* dst = out.band_ptr(j);
        for (int i = 0; i < img.bands; ++i) {
            const double w = srf.at(i, j);
            if (w == 0.0) continue;
            const float* src = img.band_ptr(i);
            for (long p = 0; p < plane; ++p) dst[p] += static_cast<float>(w * src[p]);
        }
    }
    return out;
}

SrfMatrix project_srf(const SrfMatrix& raw) {
    if (raw.hsi_bands <= 0 || raw.msi_bands <= 0)
        throw ArgumentError("project_srf: empty matrix");
    SrfMatrix out = raw;
    for (double& v : out.weights)
        if (v < 0.0) v = 0.0;
    for (int j = 0; j < out.msi_bands; ++j) {
        double s = 0.0;
        for (int i = 0; i < out.hsi_bands; ++i) s += out.at(i, j);
        if (!(s > 0.0))
            throw DegenerateError("project_srf: column " + std::to_string(j) +
                                  " is non-positive everywhere");
        for (int i = 0; i < out.hsi_bands; ++i) out.at(i, j) /= s;
    }
    return out;
}

SceneTriplet synthesize_triplet(const SpectralImage& truth, const PsfParams& psf,
                                const SrfMatrix& srf) {
    truth.validate();
    psf.validate();
    SceneTriplet t;
    t.scale = psf.scale;
    t.hrmsi = spectral_degrade(truth, srf);
    t.lrhsi = spatial_degrade(truth, build_agk_kernel(psf), psf.scale);
    t.truth = truth;
    t.validate();
    return t;
}

SrfMatrix make_gaussian_srf(int hsi_bands, int msi_bands, double width_bands) {
    if (hsi_bands < 1 || msi_bands < 1 || msi_bands > hsi_bands)
        throw ArgumentError("make_gaussian_srf: need 1 <= b <= B");
    const double w = width_bands > 0.0 ? width_bands
                                       : static_cast<double>(hsi_bands) / (2.0 * msi_bands);
    SrfMatrix srf(hsi_bands, msi_bands);
    for (int j = 0; j < msi_bands; ++j) {
        const double center = (j + 0.5) * static_cast<double>(hsi_bands) / msi_bands - 0.5;
        for (int i = 0; i < hsi_bands; ++i) {
            const double d = (i - center) / w;
            srf.at(i, j) = std::exp(-0.5 * d * d);
        }
    }
    return project_srf(srf);
}

SrfMatrix load_srf_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_srf_csv: cannot open " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    bool first = true;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string tok;
        bool numeric = true;
        while (std::getline(ss, tok, ',')) {
            try {
                size_t pos = 0;
                double v = std::stod(tok, &pos);
                row.push_back(v);
            } catch (const std::exception&) {
                numeric = false;
                break;
            }
        }
        if (!numeric) {
            if (first) {  // optional header row
                first = false;
                continue;
            }
            throw FormatError("load_srf_csv: non-numeric row in " + path);
        }
        first = false;
        if (!rows.empty() && row.size() != rows.front().size())
            throw FormatError("load_srf_csv: ragged rows in " + path);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw FormatError("load_srf_csv: no data rows in " + path);
    SrfMatrix srf(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
    for (int i = 0; i < srf.hsi_bands; ++i)
        for (int j = 0; j < srf.msi_bands; ++j) srf.at(i, j) = rows[i][j];
    return srf;
}

void save_srf_csv(const SrfMatrix& srf, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("save_srf_csv: cannot write " + path);
    f.precision(17);
    for (int i = 0; i < srf.hsi_bands; ++i) {
        for (int j = 0; j < srf.msi_bands; ++j) {
            if (j) f << ",";
            f << srf.at(i, j);
        }
        f << "\n";
    }
}

}  // namespace moss
