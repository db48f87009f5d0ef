#include "mossfuse/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "mossfuse/losses.hpp"

namespace moss {

namespace {

// Cyclic Jacobi eigensolver for small symmetric matrices (row-major n x n).
// Returns eigenvalues and column eigenvectors, both unsorted.
void jacobi_eigh(std::vector<double> a, int n, std::vector<double>& evals,
                 std::vector<double>& evecs) {
    evecs.assign(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) evecs[static_cast<size_t>(i) * n + i] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a[static_cast<size_t>(p) * n + q] *
                                                    a[static_cast<size_t>(p) * n + q];
        if (off < 1e-24) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a[static_cast<size_t>(p) * n + q];
                if (std::fabs(apq) < 1e-300) continue;
                const double app = a[static_cast<size_t>(p) * n + p];
                const double aqq = a[static_cast<size_t>(q) * n + q];
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int i = 0; i < n; ++i) {
                    const double aip = a[static_cast<size_t>(i) * n + p];
                    const double aiq = a[static_cast<size_t>(i) * n + q];
                    a[static_cast<size_t>(i) * n + p] = c * aip - s * aiq;
                    a[static_cast<size_t>(i) * n + q] = s * aip + c * aiq;
                }
                for (int i = 0; i < n; ++i) {
                    const double api = a[static_cast<size_t>(p) * n + i];
                    const double aqi = a[static_cast<size_t>(q) * n + i];
                    a[static_cast<size_t>(p) * n + i] = c * api - s * aqi;
                    a[static_cast<size_t>(q) * n + i] = s * api + c * aqi;
                }
                for (int i = 0; i < n; ++i) {
                    const double vip = evecs[static_cast<size_t>(i) * n + p];
                    const double viq = evecs[static_cast<size_t>(i) * n + q];
                    evecs[static_cast<size_t>(i) * n + p] = c * vip - s * viq;
                    evecs[static_cast<size_t>(i) * n + q] = s * vip + c * viq;
                }
            }
    }
    evals.assign(n, 0.0);
    for (int i = 0; i < n; ++i) evals[i] = a[static_cast<size_t>(i) * n + i];
}

double cosine_of_buffers(const ad::Buf& a, const ad::Buf& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (!(na > 0.0) || !(nb > 0.0))
        throw DegenerateError("pca_features: zero-norm feature map");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

PcaResult pca_features(const DecoupledFeatures& f, int max_samples) {
    const std::array<const ad::Var*, 4> maps{&f.shared_y, &f.shared_x, &f.comp_y, &f.comp_x};
    for (const ad::Var* m : maps) {
        if (!m->defined() || m->shape().rank() != 3)
            throw ArgumentError("pca_features: four rank-3 feature maps required");
        if (m->shape() != maps[0]->shape())
            throw ArgumentError("pca_features: feature map shapes differ");
    }
    const int C = maps[0]->shape()[0];
    const long hw = static_cast<long>(maps[0]->shape()[1]) * maps[0]->shape()[2];
    if (hw < 2) throw ArgumentError("pca_features: need at least 2 samples");
    const long stride = std::max(1l, (hw + max_samples - 1) / max_samples);

    // Pool subsampled per-pixel channel vectors from the four populations.
    std::vector<std::vector<double>> samples;  // flattened rows of length C
    std::array<std::pair<size_t, size_t>, 4> ranges;
    for (int m = 0; m < 4; ++m) {
        const ad::Buf& buf = maps[m]->value();
        const size_t begin = samples.size();
        for (long p = 0; p < hw; p += stride) {
            std::vector<double> row(C);
            for (int c = 0; c < C; ++c) row[c] = buf[c * hw + p];
            samples.push_back(std::move(row));
        }
        ranges[m] = {begin, samples.size()};
    }

    const size_t n = samples.size();
    std::vector<double> mean(C, 0.0);
    for (const auto& row : samples)
        for (int c = 0; c < C; ++c) mean[c] += row[c];
    for (double& v : mean) v /= static_cast<double>(n);

    std::vector<double> cov(static_cast<size_t>(C) * C, 0.0);
    for (const auto& row : samples)
        for (int i = 0; i < C; ++i) {
            const double di = row[i] - mean[i];
            for (int j = i; j < C; ++j)
                cov[static_cast<size_t>(i) * C + j] += di * (row[j] - mean[j]);
        }
    for (int i = 0; i < C; ++i)
        for (int j = i; j < C; ++j) {
            cov[static_cast<size_t>(i) * C + j] /= static_cast<double>(n - 1);
            cov[static_cast<size_t>(j) * C + i] = cov[static_cast<size_t>(i) * C + j];
        }

    std::vector<double> evals, evecs;
    jacobi_eigh(cov, C, evals, evecs);
    int top[2] = {0, 1};
    for (int i = 0; i < C; ++i) {
        if (evals[i] > evals[top[0]]) {
            top[1] = top[0];
            top[0] = i;
        } else if (i != top[0] && evals[i] > evals[top[1]]) {
            top[1] = i;
        }
    }
    // Deterministic sign: make the largest-magnitude loading positive.
    std::array<std::vector<double>, 2> axes;
    for (int k = 0; k < 2; ++k) {
        axes[k].resize(C);
        int imax = 0;
        for (int i = 0; i < C; ++i) {
            axes[k][i] = evecs[static_cast<size_t>(i) * C + top[k]];
            if (std::fabs(axes[k][i]) > std::fabs(axes[k][imax])) imax = i;
        }
        if (axes[k][imax] < 0.0)
            for (double& v : axes[k]) v = -v;
    }

    PcaResult out;
    out.component_variance = {std::max(0.0, evals[top[0]]), std::max(0.0, evals[top[1]])};
    for (int i = 0; i < C; ++i) out.total_variance += cov[static_cast<size_t>(i) * C + i];
    for (int m = 0; m < 4; ++m) {
        auto [b, e] = ranges[m];
        out.coords[m].reserve(e - b);
        for (size_t i = b; i < e; ++i) {
            std::array<double, 2> pt{0.0, 0.0};
            for (int c = 0; c < C; ++c) {
                const double d = samples[i][c] - mean[c];
                pt[0] += d * axes[0][c];
                pt[1] += d * axes[1][c];
            }
            out.coords[m].push_back(pt);
        }
    }

    out.stats.mean_shared_similarity = cosine_of_buffers(f.shared_y.value(), f.shared_x.value());
    out.stats.mean_cross_similarity =
        (cosine_of_buffers(f.shared_y.value(), f.comp_y.value()) +
         cosine_of_buffers(f.shared_x.value(), f.comp_x.value()) +
         cosine_of_buffers(f.comp_y.value(), f.comp_x.value())) /
        3.0;
    return out;
}

ErrorMapResult error_map(const SpectralImage& ref, const SpectralImage& est, int band) {
    if (ref.height != est.height || ref.width != est.width || ref.bands != est.bands)
        throw ArgumentError("error_map: dimension mismatch");
    if (band < 0 || band >= ref.bands) throw ArgumentError("error_map: band out of range");
    ErrorMapResult r;
    r.map = SpectralImage(ref.height, ref.width, 1);
    const float* rp = ref.band_ptr(band);
    const float* ep = est.band_ptr(band);
    const long n = ref.plane();
    double mn = std::numeric_limits<double>::max(), mx = 0.0, acc = 0.0;
    for (long i = 0; i < n; ++i) {
        const double d = std::fabs(static_cast<double>(rp[i]) - ep[i]);
        r.map.data[i] = static_cast<float>(d);
        mn = std::min(mn, d);
        mx = std::max(mx, d);
        acc += d;
    }
    r.min = mn;
    r.max = mx;
    r.mean = acc / static_cast<double>(n);
    return r;
}

double kernel_ncc(const Kernel& a, const Kernel& b) {
    if (a.rows != b.rows || a.cols != b.cols)
        throw ArgumentError("kernel_ncc: kernel dims differ");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.w.size(); ++i) {
        dot += a.w[i] * b.w[i];
        na += a.w[i] * a.w[i];
        nb += b.w[i] * b.w[i];
    }
    if (!(na > 0.0) || !(nb > 0.0)) throw DegenerateError("kernel_ncc: zero kernel");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

DegradationComparison compare_degradation(const Kernel& est_kernel, const SrfMatrix& est_srf,
                                          const Kernel& true_kernel,
                                          const SrfMatrix& true_srf) {
    if (est_srf.hsi_bands != true_srf.hsi_bands || est_srf.msi_bands != true_srf.msi_bands)
        throw ArgumentError("compare_degradation: SRF dims differ");
    DegradationComparison c;
    c.kernel_ncc = kernel_ncc(est_kernel, true_kernel);
    for (int j = 0; j < est_srf.msi_bands; ++j) {
        double l1 = 0.0;
        for (int i = 0; i < est_srf.hsi_bands; ++i)
            l1 += std::fabs(est_srf.at(i, j) - true_srf.at(i, j));
        c.srf_column_l1.push_back(l1);
        c.srf_l1_total += l1;
    }
    return c;
}

void save_pgm(const std::string& path, int rows, int cols, const std::vector<double>& values) {
    if (static_cast<long>(values.size()) != static_cast<long>(rows) * cols)
        throw ArgumentError("save_pgm: size mismatch");
    double mx = 0.0;
    for (double v : values) mx = std::max(mx, v);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_pgm: cannot write " + path);
    f << "P5\n" << cols << " " << rows << "\n255\n";
    for (double v : values) {
        const int g = mx > 0.0 ? static_cast<int>(std::round(255.0 * std::max(0.0, v) / mx)) : 0;
        f.put(static_cast<char>(std::min(255, g)));
    }
}

void render_kernel_pair(const Kernel& est, const Kernel& truth, const std::string& path,
                        int upscale) {
    if (est.rows != truth.rows || est.cols != truth.cols)
        throw ArgumentError("render_kernel_pair: kernel dims differ");
    const int gap = upscale;  // one cell of separation
    const int rows = est.rows * upscale;
    const int cols = est.cols * upscale * 2 + gap;
    std::vector<double> canvas(static_cast<size_t>(rows) * cols, 0.0);
    auto blit = [&](const Kernel& k, int x0) {
        for (int y = 0; y < rows; ++y)
            for (int x = 0; x < est.cols * upscale; ++x)
                canvas[static_cast<size_t>(y) * cols + x0 + x] =
                    k.at(y / upscale, x / upscale);
    };
    blit(est, 0);
    blit(truth, est.cols * upscale + gap);
    save_pgm(path, rows, cols, canvas);
}

void render_srf_pair(const SrfMatrix& est, const SrfMatrix& truth, const std::string& path) {
    if (est.hsi_bands != truth.hsi_bands || est.msi_bands != truth.msi_bands)
        throw ArgumentError("render_srf_pair: SRF dims differ");
    // Two heatmaps (B rows x b cols) side by side with a separator column.
    const int rows = est.hsi_bands;
    const int cols = est.msi_bands * 2 + 1;
    std::vector<double> canvas(static_cast<size_t>(rows) * cols, 0.0);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < est.msi_bands; ++j) {
            canvas[static_cast<size_t>(i) * cols + j] = est.at(i, j);
            canvas[static_cast<size_t>(i) * cols + est.msi_bands + 1 + j] = truth.at(i, j);
        }
    }
    save_pgm(path, rows, cols, canvas);
}

void write_pca_csv(const PcaResult& r, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("write_pca_csv: cannot write " + path);
    f << "population,pc1,pc2\n";
    char line[128];
    for (int m = 0; m < 4; ++m)
        for (const auto& pt : r.coords[m]) {
            std::snprintf(line, sizeof(line), "%s,%.9g,%.9g\n", r.labels[m].c_str(), pt[0],
                          pt[1]);
            f << line;
        }
}

}  // namespace moss
