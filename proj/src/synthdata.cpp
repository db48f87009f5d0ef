#include "mossfuse/synthdata.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace moss {

SpectralImage make_phantom(int height, int width, int bands, std::uint64_t seed,
                           int endmembers) {
    if (height < 4 || width < 4 || bands < 2 || endmembers < 2)
        throw ArgumentError("make_phantom: degenerate dimensions");
    std::mt19937_64 eng(seed);
    auto uni = [&](double a, double b) {
        return std::uniform_real_distribution<double>(a, b)(eng);
    };

    // Smooth endmember spectra: Gaussian bumps over the band axis plus a
    // gentle slope, all strictly positive.
    std::vector<std::vector<double>> spectra(endmembers, std::vector<double>(bands));
    for (int m = 0; m < endmembers; ++m) {
        const double center = (m + 0.5) * bands / static_cast<double>(endmembers) +
                              uni(-bands * 0.05, bands * 0.05);
        const double sigma = uni(bands / 10.0, bands / 5.0);
        const double slope = uni(-0.1, 0.1);
        for (int i = 0; i < bands; ++i) {
            const double d = (i - center) / sigma;
            spectra[m][i] = 0.2 + 0.75 * std::exp(-0.5 * d * d) +
                            slope * (i / static_cast<double>(bands) - 0.5);
        }
    }

    // Spatially structured abundance fields: blobs + mid-frequency sinusoid +
    // gradient, sharpened into a soft partition by a softmax.
    std::vector<std::vector<double>> fields(endmembers,
                                            std::vector<double>(static_cast<size_t>(height) *
                                                                width, 0.0));
    for (int m = 0; m < endmembers; ++m) {
        std::vector<double>& g = fields[m];
        const int blobs = 6;
        for (int j = 0; j < blobs; ++j) {
            const double cx = uni(0, width - 1), cy = uni(0, height - 1);
            const double sg = uni(2.5, 6.0);
            const double amp = uni(0.6, 1.5);
            for (int y = 0; y < height; ++y)
                for (int x = 0; x < width; ++x) {
                    const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    g[static_cast<size_t>(y) * width + x] += amp * std::exp(-d2 / (2 * sg * sg));
                }
        }
        const double wavelength = uni(6.0, 14.0);
        const double dir = uni(0.0, 2.0 * M_PI), phase = uni(0.0, 2.0 * M_PI);
        const double fx = std::cos(dir) * 2.0 * M_PI / wavelength;
        const double fy = std::sin(dir) * 2.0 * M_PI / wavelength;
        const double gx = uni(-0.3, 0.3) / width, gy = uni(-0.3, 0.3) / height;
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x)
                g[static_cast<size_t>(y) * width + x] +=
                    0.4 * std::sin(fx * x + fy * y + phase) + gx * x + gy * y;
    }

    SpectralImage img(height, width, bands);
    std::vector<double> a(endmembers);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            const size_t p = static_cast<size_t>(y) * width + x;
            double mx = fields[0][p];
            for (int m = 1; m < endmembers; ++m) mx = std::max(mx, fields[m][p]);
            double z = 0.0;
            for (int m = 0; m < endmembers; ++m) {
                a[m] = std::exp(2.0 * (fields[m][p] - mx));
                z += a[m];
            }
            for (int m = 0; m < endmembers; ++m) a[m] /= z;
            for (int i = 0; i < bands; ++i) {
                double v = 0.0;
                for (int m = 0; m < endmembers; ++m) v += a[m] * spectra[m][i];
                img.at(i, y, x) = static_cast<float>(v);
            }
        }
    return normalize_minmax(img);
}

}  // namespace moss
