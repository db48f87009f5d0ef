#include "mossfuse/imagery.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mossfuse/gridmath.hpp"
#include "json.hpp"

namespace moss {

namespace {

static_assert(std::endian::native == std::endian::little,
              "bsq I/O assumes a little-endian host");

std::string strip_bsq(const std::string& path) {
    if (path.size() > 4 && path.substr(path.size() - 4) == ".bsq")
        return path.substr(0, path.size() - 4);
    return path;
}

}  // namespace

void SpectralImage::validate() const {
    if (height <= 0 || width <= 0 || bands <= 0)
        throw ArgumentError("SpectralImage: non-positive dimensions");
    if (static_cast<long>(data.size()) != size())
        throw ArgumentError("SpectralImage: data length " + std::to_string(data.size()) +
                            " != H*W*B = " + std::to_string(size()));
    for (float v : data)
        if (!std::isfinite(v)) throw ArgumentError("SpectralImage: non-finite value");
    if (wavelengths_nm) {
        if (static_cast<int>(wavelengths_nm->size()) != bands)
            throw ArgumentError("SpectralImage: wavelengths length != bands");
        for (size_t i = 1; i < wavelengths_nm->size(); ++i)
            if (!((*wavelengths_nm)[i] > (*wavelengths_nm)[i - 1]))
                throw ArgumentError("SpectralImage: wavelengths not strictly increasing");
    }
}

void SceneTriplet::validate() const {
    if (scale < 1) throw ArgumentError("SceneTriplet: scale must be >= 1");
    if (hrmsi.height != lrhsi.height * scale || hrmsi.width != lrhsi.width * scale)
        throw ArgumentError("SceneTriplet: HR-MSI dims must be LR-HSI dims x scale");
    if (truth) {
        if (truth->height != hrmsi.height || truth->width != hrmsi.width)
            throw ArgumentError("SceneTriplet: truth spatial dims must match HR-MSI");
        if (truth->bands != lrhsi.bands)
            throw ArgumentError("SceneTriplet: truth bands must match LR-HSI");
    }
}

SpectralImage load_image(const std::string& path) {
    const std::string base = strip_bsq(path);
    const std::string header_path = base + ".json";
    const std::string payload_path = base + ".bsq";

    std::ifstream hf(header_path);
    if (!hf) throw FormatError("load_image: missing header " + header_path);
    nlohmann::json j;
    try {
        hf >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_image: corrupt header " + header_path + ": " + e.what());
    }

    SpectralImage img;
    try {
        img.height = j.at("height").get<int>();
        img.width = j.at("width").get<int>();
        img.bands = j.at("bands").get<int>();
        if (j.contains("wavelengths_nm"))
            img.wavelengths_nm = j.at("wavelengths_nm").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("load_image: bad header fields in " + header_path + ": " + e.what());
    }
    if (img.height <= 0 || img.width <= 0 || img.bands <= 0)
        throw FormatError("load_image: non-positive dims in " + header_path);

    std::ifstream pf(payload_path, std::ios::binary);
    if (!pf) throw IoError("load_image: cannot open " + payload_path);
    pf.seekg(0, std::ios::end);
    const long bytes = static_cast<long>(pf.tellg());
    pf.seekg(0, std::ios::beg);
    const long expected = img.size() * static_cast<long>(sizeof(float));
    if (bytes != expected)
        throw IntegrityError("load_image: payload " + payload_path + " holds " +
                             std::to_string(bytes) + " bytes, header implies " +
                             std::to_string(expected));
    img.data.resize(static_cast<size_t>(img.size()));
    pf.read(reinterpret_cast<char*>(img.data.data()), expected);
    if (!pf) throw IoError("load_image: short read on " + payload_path);
    img.validate();
    return img;
}

void save_image(const SpectralImage& img, const std::string& path) {
    img.validate();
    const std::string base = strip_bsq(path);

    nlohmann::json j;
    j["height"] = img.height;
    j["width"] = img.width;
    j["bands"] = img.bands;
    if (img.wavelengths_nm) j["wavelengths_nm"] = *img.wavelengths_nm;

    std::ofstream hf(base + ".json", std::ios::trunc);
    if (!hf) throw IoError("save_image: cannot write " + base + ".json");
    hf << j.dump(2) << "\n";
    if (!hf) throw IoError("save_image: write failed on " + base + ".json");

    std::ofstream pf(base + ".bsq", std::ios::binary | std::ios::trunc);
    if (!pf) throw IoError("save_image: cannot write " + base + ".bsq");
    pf.write(reinterpret_cast<const char*>(img.data.data()),
             img.size() * static_cast<long>(sizeof(float)));
    if (!pf) throw IoError("save_image: write failed on " + base + ".bsq");
}

SpectralImage normalize_minmax(const SpectralImage& img) {
    img.validate();
    float lo = std::numeric_limits<float>::max();
    float hi = std::numeric_limits<float>::lowest();
    for (float v : img.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi > lo)) throw DegenerateError("normalize_minmax: constant image (max == min)");
    SpectralImage out = img;
    // True division: endpoints land exactly on 0 and 1, which also makes the
    // operation idempotent.
    const float range = hi - lo;
    for (float& v : out.data) v = (v - lo) / range;
    return out;
}

std::vector<SpectralImage> crop_patches(const SpectralImage& img, int size, int stride) {
    img.validate();
    if (size < 1 || size > std::min(img.height, img.width))
        throw ArgumentError("crop_patches: size must be in [1, min(H,W)]");
    if (stride < 1) throw ArgumentError("crop_patches: stride must be >= 1");

    std::vector<SpectralImage> out;
    for (int oy = 0; oy + size <= img.height; oy += stride)
        for (int ox = 0; ox + size <= img.width; ox += stride) {
            SpectralImage p(size, size, img.bands);
            p.wavelengths_nm = img.wavelengths_nm;
            for (int b = 0; b < img.bands; ++b)
                for (int y = 0; y < size; ++y)
                    std::memcpy(&p.at(b, y, 0),
                                img.band_ptr(b) + static_cast<long>(oy + y) * img.width + ox,
                                sizeof(float) * static_cast<size_t>(size));
            out.push_back(std::move(p));
        }
    return out;
}

namespace {

// Separable pass along one axis: for each output coordinate gather 4 taps.
void bicubic_axis(const std::vector<double>& src, std::vector<double>& dst, int n_in,
                  int n_out, int lines, int stride_in, int line_stride_in, int stride_out,
                  int line_stride_out) {
    const double inv_f = static_cast<double>(n_in) / n_out;
    for (int o = 0; o < n_out; ++o) {
        const double s = (o + 0.5) * inv_f - 0.5;
        const int i0 = static_cast<int>(std::floor(s));
        const double fr = s - i0;
        double wts[4];
        int idx[4];
        for (int t = 0; t < 4; ++t) {
            wts[t] = cubic_weight(fr - (t - 1));
            idx[t] = reflect_index(i0 - 1 + t, n_in);
        }
        for (int ln = 0; ln < lines; ++ln) {
            const double* in = src.data() + static_cast<long>(ln) * line_stride_in;
            double acc = 0.0;
            for (int t = 0; t < 4; ++t) acc += wts[t] * in[idx[t] * stride_in];
            dst[static_cast<long>(ln) * line_stride_out + static_cast<long>(o) * stride_out] = acc;
        }
    }
}

}  // namespace

SpectralImage upsample(const SpectralImage& img, int factor) {
    img.validate();
    if (factor < 1) throw ArgumentError("upsample: factor must be >= 1");
    if (factor == 1) return img;

    const int H = img.height, W = img.width;
    const int Ho = H * factor, Wo = W * factor;
    SpectralImage out(Ho, Wo, img.bands);
    out.wavelengths_nm = img.wavelengths_nm;

    std::vector<double> plane(static_cast<size_t>(H) * W);
    std::vector<double> rows(static_cast<size_t>(H) * Wo);
    std::vector<double> full(static_cast<size_t>(Ho) * Wo);
    for (int b = 0; b < img.bands; ++b) {
        const float* src = img.band_ptr(b);
        for (long i = 0; i < static_cast<long>(plane.size()); ++i) plane[i] = src[i];
        // horizontal, then vertical
        bicubic_axis(plane, rows, W, Wo, H, 1, W, 1, Wo);
        bicubic_axis(rows, full, H, Ho, Wo, Wo, 1, Wo, 1);
        float* dst = out.band_ptr(b);
        for (long i = 0; i < static_cast<long>(full.size()); ++i)
            dst[i] = static_cast<float>(full[i]);
    }
    return out;
}

}  // namespace moss
