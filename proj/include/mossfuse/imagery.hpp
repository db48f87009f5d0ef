#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mossfuse/errors.hpp"

namespace moss {

// H x W x B image cube, stored band-sequential (all of band 0 row-major,
// then band 1, ...) to match the on-disk .bsq layout byte for byte.
struct SpectralImage {
    int height = 0;
    int width = 0;
    int bands = 0;
    std::vector<float> data;
    std::optional<std::vector<double>> wavelengths_nm;

    SpectralImage() = default;
    SpectralImage(int h, int w, int b, float fill = 0.0f)
        : height(h), width(w), bands(b),
          data(static_cast<size_t>(h) * w * b, fill) {}

    long plane() const { return static_cast<long>(height) * width; }
    long size() const { return plane() * bands; }

    float& at(int band, int y, int x) {
        return data[static_cast<size_t>(band) * plane() + static_cast<long>(y) * width + x];
    }
    float at(int band, int y, int x) const {
        return data[static_cast<size_t>(band) * plane() + static_cast<long>(y) * width + x];
    }
    const float* band_ptr(int band) const { return data.data() + static_cast<size_t>(band) * plane(); }
    float* band_ptr(int band) { return data.data() + static_cast<size_t>(band) * plane(); }

    // Throws ArgumentError when the container invariants are violated.
    void validate() const;
};

struct SceneTriplet {
    std::optional<SpectralImage> truth;  // X, HR-HSI
    SpectralImage hrmsi;                 // Y
    SpectralImage lrhsi;                 // x
    int scale = 1;                       // s

    void validate() const;
};

// Raw float32 band-sequential payload (<name>.bsq) + JSON sidecar (<name>.json).
// `path` may be given with or without the .bsq extension.
SpectralImage load_image(const std::string& path);
void save_image(const SpectralImage& img, const std::string& path);

// Global min-max rescale of the whole cube to [0,1].
SpectralImage normalize_minmax(const SpectralImage& img);

// All fully-contained size x size patches at offsets {0, stride, 2*stride, ...}.
std::vector<SpectralImage> crop_patches(const SpectralImage& img, int size, int stride);

// Per-band bicubic (cubic convolution, a = -0.5, reflect boundary).
SpectralImage upsample(const SpectralImage& img, int factor);

}  // namespace moss
