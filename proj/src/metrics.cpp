#include "mossfuse/metrics.hpp"

#include <cmath>
#include <limits>

#include "json.hpp"

namespace moss {

namespace {

void check_same_dims(const SpectralImage& ref, const SpectralImage& est, const char* op) {
    if (ref.height != est.height || ref.width != est.width || ref.bands != est.bands)
        throw ArgumentError(std::string(op) + ": dimension mismatch");
}

double band_mse(const SpectralImage& ref, const SpectralImage& est, int band) {
    const float* r = ref.band_ptr(band);
    const float* e = est.band_ptr(band);
    const long n = ref.plane();
    double s = 0.0;
    for (long i = 0; i < n; ++i) {
        const double d = static_cast<double>(r[i]) - e[i];
        s += d * d;
    }
    return s / static_cast<double>(n);
}

}  // namespace

std::vector<double> per_band_psnr(const SpectralImage& ref, const SpectralImage& est,
                                  double peak) {
    check_same_dims(ref, est, "psnr");
    std::vector<double> out(ref.bands);
    for (int b = 0; b < ref.bands; ++b) {
        const double mse = band_mse(ref, est, b);
        out[b] = mse == 0.0 ? std::numeric_limits<double>::infinity()
                            : 10.0 * std::log10(peak * peak / mse);
    }
    return out;
}

double psnr(const SpectralImage& ref, const SpectralImage& est, double peak) {
    const std::vector<double> pb = per_band_psnr(ref, est, peak);
    double s = 0.0;
    for (double v : pb) {
        if (std::isinf(v)) return std::numeric_limits<double>::infinity();
        s += v;
    }
    return s / static_cast<double>(pb.size());
}

double psnr_pooled(const SpectralImage& ref, const SpectralImage& est, double peak) {
    check_same_dims(ref, est, "psnr");
    double mse = 0.0;
    for (int b = 0; b < ref.bands; ++b) mse += band_mse(ref, est, b);
    mse /= static_cast<double>(ref.bands);
    return mse == 0.0 ? std::numeric_limits<double>::infinity()
                      : 10.0 * std::log10(peak * peak / mse);
}

namespace {

// 11x11 Gaussian window, sigma 1.5, normalized to unit sum.
constexpr int kSsimWindow = 11;

std::vector<double> ssim_window() {
    std::vector<double> w(kSsimWindow * kSsimWindow);
    const int r = kSsimWindow / 2;
    double total = 0.0;
    for (int y = -r; y <= r; ++y)
        for (int x = -r; x <= r; ++x) {
            const double v = std::exp(-(x * x + y * y) / (2.0 * 1.5 * 1.5));
            w[(y + r) * kSsimWindow + (x + r)] = v;
            total += v;
        }
    for (double& v : w) v /= total;
    return w;
}

}  // namespace

double ssim(const SpectralImage& ref, const SpectralImage& est, double peak) {
    check_same_dims(ref, est, "ssim");
    if (ref.height < kSsimWindow || ref.width < kSsimWindow)
        throw ArgumentError("ssim: spatial dims smaller than the 11x11 window");
    static const std::vector<double> win = ssim_window();
    const double c1 = (0.01 * peak) * (0.01 * peak);
    const double c2 = (0.03 * peak) * (0.03 * peak);
    const int H = ref.height, W = ref.width, r = kSsimWindow / 2;

    double band_acc = 0.0;
    for (int b = 0; b < ref.bands; ++b) {
        const float* rp = ref.band_ptr(b);
        const float* ep = est.band_ptr(b);
        double acc = 0.0;
        long cnt = 0;
        for (int y = r; y < H - r; ++y)
            for (int x = r; x < W - r; ++x) {
                double mx = 0.0, my = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
                for (int dy = -r; dy <= r; ++dy)
                    for (int dx = -r; dx <= r; ++dx) {
                        const double w = win[(dy + r) * kSsimWindow + (dx + r)];
                        const double a = rp[static_cast<long>(y + dy) * W + x + dx];
                        const double bb = ep[static_cast<long>(y + dy) * W + x + dx];
                        mx += w * a;
                        my += w * bb;
                        sxx += w * a * a;
                        syy += w * bb * bb;
                        sxy += w * a * bb;
                    }
                const double vx = sxx - mx * mx;
                const double vy = syy - my * my;
                const double cxy = sxy - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
                       ((mx * mx + my * my + c1) * (vx + vy + c2));
                ++cnt;
            }
        band_acc += acc / static_cast<double>(cnt);
    }
    return band_acc / static_cast<double>(ref.bands);
}

double sam_degrees(const SpectralImage& ref, const SpectralImage& est, int* skipped) {
    check_same_dims(ref, est, "sam");
    const long plane = ref.plane();
    const int B = ref.bands;
    double acc = 0.0;
    long used = 0, skip = 0;
    for (long p = 0; p < plane; ++p) {
        double dot = 0.0, nr = 0.0, ne = 0.0;
        for (int b = 0; b < B; ++b) {
            const double rv = ref.data[static_cast<size_t>(b) * plane + p];
            const double ev = est.data[static_cast<size_t>(b) * plane + p];
            dot += rv * ev;
            nr += rv * rv;
            ne += ev * ev;
        }
        if (nr == 0.0 || ne == 0.0) {
            ++skip;
            continue;
        }
        double c = dot / (std::sqrt(nr) * std::sqrt(ne));
        c = std::min(1.0, std::max(-1.0, c));
        acc += std::acos(c);
        ++used;
    }
    if (skipped) *skipped = static_cast<int>(skip);
    if (used == 0) throw DegenerateError("sam: every pixel has a zero-norm spectrum");
    return acc / static_cast<double>(used) * (180.0 / M_PI);
}

double ergas(const SpectralImage& ref, const SpectralImage& est, int scale) {
    check_same_dims(ref, est, "ergas");
    if (scale < 1) throw ArgumentError("ergas: scale must be >= 1");
    const long plane = ref.plane();
    double acc = 0.0;
    for (int b = 0; b < ref.bands; ++b) {
        const float* rp = ref.band_ptr(b);
        double mu = 0.0;
        for (long i = 0; i < plane; ++i) mu += rp[i];
        mu /= static_cast<double>(plane);
        if (mu == 0.0)
            throw DegenerateError("ergas: reference band " + std::to_string(b) +
                                  " has zero mean");
        const double rmse = std::sqrt(band_mse(ref, est, b));
        acc += (rmse / mu) * (rmse / mu);
    }
    return (100.0 / scale) * std::sqrt(acc / static_cast<double>(ref.bands));
}

MetricReport evaluate(const SpectralImage& ref, const SpectralImage& est, int scale,
                      double peak) {
    MetricReport r;
    r.per_band_psnr = per_band_psnr(ref, est, peak);
    r.psnr = psnr(ref, est, peak);
    r.psnr_pooled = psnr_pooled(ref, est, peak);
    r.ssim = ssim(ref, est, peak);
    r.sam_deg = sam_degrees(ref, est, &r.sam_skipped);
    r.ergas = ergas(ref, est, scale);
    return r;
}

namespace {

nlohmann::json num_or_inf(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

}  // namespace

std::string metric_report_json(const MetricReport& r) {
    nlohmann::json j;
    j["psnr"] = num_or_inf(r.psnr);
    j["psnr_pooled"] = num_or_inf(r.psnr_pooled);
    j["ssim"] = r.ssim;
    j["sam_deg"] = r.sam_deg;
    j["ergas"] = r.ergas;
    nlohmann::json pb = nlohmann::json::array();
    for (double v : r.per_band_psnr) pb.push_back(num_or_inf(v));
    j["per_band_psnr"] = pb;
    j["sam_skipped"] = r.sam_skipped;
    return j.dump(2);
}

}  // namespace moss
