#include "mossfuse/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "mossfuse/metrics.hpp"

namespace moss {

void TrainConfig::validate() const {
    if (epochs < 1) throw ArgumentError("TrainConfig: epochs must be >= 1");
    if (!(lr_start >= lr_end) || !(lr_end > 0.0))
        throw ArgumentError("TrainConfig: need lr_start >= lr_end > 0");
    if (patch_size < 1) throw ArgumentError("TrainConfig: patch_size must be >= 1");
    if (checkpoint_every < 0) throw ArgumentError("TrainConfig: checkpoint_every must be >= 0");
    weights.validate();
}

std::string TrainConfig::to_json() const {
    nlohmann::json j;
    j["epochs"] = epochs;
    j["lr_start"] = lr_start;
    j["lr_end"] = lr_end;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    j["patch_size"] = patch_size;
    j["random_crop"] = random_crop;
    j["alpha1"] = weights.alpha1;
    j["alpha2"] = weights.alpha2;
    j["alpha3"] = weights.alpha3;
    j["seed"] = seed;
    j["ablation"] = ablation_name(ablation);
    j["checkpoint_every"] = checkpoint_every;
    j["deg_lr_mult"] = deg_lr_mult;
    return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("TrainConfig: bad json: ") + e.what());
    }
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.lr_start = j.value("lr_start", c.lr_start);
    c.lr_end = j.value("lr_end", c.lr_end);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.patch_size = j.value("patch_size", c.patch_size);
    c.random_crop = j.value("random_crop", c.random_crop);
    c.weights.alpha1 = j.value("alpha1", c.weights.alpha1);
    c.weights.alpha2 = j.value("alpha2", c.weights.alpha2);
    c.weights.alpha3 = j.value("alpha3", c.weights.alpha3);
    c.seed = j.value("seed", c.seed);
    c.ablation = parse_ablation(j.value("ablation", std::string("full")));
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.deg_lr_mult = j.value("deg_lr_mult", c.deg_lr_mult);
    c.validate();
    return c;
}

double cosine_lr(int epoch, const TrainConfig& cfg) {
    cfg.validate();
    if (epoch < 0 || epoch >= cfg.epochs)
        throw ArgumentError("cosine_lr: epoch out of [0, epochs-1]");
    if (cfg.epochs == 1) return cfg.lr_start;
    const double t = static_cast<double>(epoch) / (cfg.epochs - 1);
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + std::cos(M_PI * t));
}

AdamOptimizer::AdamOptimizer(ParamStore& store, double beta1, double beta2, double eps,
                             double deg_lr_mult)
    : store_(store), beta1_(beta1), beta2_(beta2), eps_(eps), deg_lr_mult_(deg_lr_mult) {
    for (const auto& p : store_.params()) {
        m_.emplace_back(p.var.numel(), 0.0);
        v_.emplace_back(p.var.numel(), 0.0);
        lr_scale_.push_back(p.name.rfind("degradation.", 0) == 0 ? deg_lr_mult_ : 1.0);
    }
}

void AdamOptimizer::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const auto& params = store_.params();
    for (size_t i = 0; i < params.size(); ++i) {
        if (!params[i].var.has_grad()) continue;  // parameter unused this step
        const double plr = lr * lr_scale_[i];
        const ad::Buf& g = params[i].var.grad();
        ad::Buf& val = *params[i].var.node()->val;
        ad::Buf& m = m_[i];
        ad::Buf& v = v_[i];
        for (size_t k = 0; k < g.size(); ++k) {
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * g[k];
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * g[k] * g[k];
            const double mh = m[k] / bc1;
            const double vh = v[k] / bc2;
            val[k] -= plr * mh / (std::sqrt(vh) + eps_);
        }
    }
}

namespace {

SpectralImage crop_region(const SpectralImage& img, int oy, int ox, int size) {
    SpectralImage out(size, size, img.bands);
    out.wavelengths_nm = img.wavelengths_nm;
    for (int b = 0; b < img.bands; ++b)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) out.at(b, y, x) = img.at(b, oy + y, ox + x);
    return out;
}

struct PatchPair {
    SpectralImage hrmsi;
    SpectralImage lrhsi;
};

}  // namespace

TrainResult train(MossFuseModel& model, const std::vector<SceneTriplet>& scenes,
                  const TrainConfig& cfg) {
    cfg.validate();
    if (scenes.empty()) throw ArgumentError("train: no scenes given");
    for (const SceneTriplet& s : scenes) {
        s.validate();
        if (s.scale != model.config().scale)
            throw ArgumentError("train: scene scale differs from model scale");
        if (s.hrmsi.bands != model.config().msi_bands ||
            s.lrhsi.bands != model.config().hsi_bands)
            throw ArgumentError("train: scene band counts differ from model config");
    }

    const int s = model.config().scale;
    Rng crop_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    AdamOptimizer adam(model.params(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.deg_lr_mult);
    TrainResult result;
    long step = 0;

    if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, cfg);
        for (const SceneTriplet& scene : scenes) {
            const int H = scene.hrmsi.height, W = scene.hrmsi.width;
            int ps = std::min({cfg.patch_size, H, W});
            ps -= ps % s;
            if (ps < s) throw ArgumentError("train: patch size below one LR pixel");

            std::vector<std::pair<int, int>> offsets;
            if (cfg.random_crop) {
                const int my = (H - ps) / s, mx = (W - ps) / s;
                offsets.push_back({s * crop_rng.uniform_int(0, my),
                                   s * crop_rng.uniform_int(0, mx)});
            } else {
                for (int oy = 0; oy + ps <= H; oy += ps)
                    for (int ox = 0; ox + ps <= W; ox += ps) offsets.push_back({oy, ox});
            }

            for (const auto& [oy, ox] : offsets) {
                PatchPair patch;
                if (ps == H && ps == W) {
                    patch.hrmsi = scene.hrmsi;
                    patch.lrhsi = scene.lrhsi;
                } else {
                    patch.hrmsi = crop_region(scene.hrmsi, oy, ox, ps);
                    patch.lrhsi = crop_region(scene.lrhsi, oy / s, ox / s, ps / s);
                }

                model.set_training(true);
                ForwardBundle bundle = model.forward(patch.hrmsi, patch.lrhsi);
                ad::Var yv = image_to_var(patch.hrmsi);
                ad::Var xv = image_to_var(patch.lrhsi);
                TotalLoss loss = total_loss(bundle, yv, xv, cfg.weights, cfg.ablation);

                if (!std::isfinite(loss.report.total)) {
                    if (!cfg.out_dir.empty()) {
                        nlohmann::json dump;
                        dump["step"] = step;
                        dump["epoch"] = epoch;
                        dump["lr"] = lr;
                        dump["l_ma"] = loss.report.l_ma;
                        dump["l_sc"] = loss.report.l_sc;
                        dump["l_sct"] = loss.report.l_sct;
                        dump["l_de"] = loss.report.l_de;
                        std::ofstream d(cfg.out_dir + "/nan_dump.json", std::ios::trunc);
                        d << dump.dump(2) << "\n";
                    }
                    throw NumericError("train: non-finite loss at step " + std::to_string(step));
                }

                model.params().zero_grads();
                ad::backward(loss.total);
                adam.step(lr);

                result.log.push_back({step, epoch, loss.report, lr});
                ++step;
            }
        }
        if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
            (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
            save_checkpoint(model, cfg.out_dir + "/ckpt_epoch" + std::to_string(epoch + 1) +
                                       ".ckpt");
        }
    }

    model.set_training(false);
    result.final_psnr = std::numeric_limits<double>::quiet_NaN();
    if (scenes.front().truth) {
        ad::NoGradGuard ng;
        ForwardBundle b = model.forward(scenes.front().hrmsi, scenes.front().lrhsi);
        result.final_psnr = psnr(*scenes.front().truth, var_to_image(b.fused));
    }

    if (!cfg.out_dir.empty()) {
        result.checkpoint_path = cfg.out_dir + "/model.ckpt";
        save_checkpoint(model, result.checkpoint_path);
        write_loss_csv(result.log, cfg.out_dir + "/loss_log.csv");
        nlohmann::json sum;
        sum["steps"] = step;
        sum["param_count"] = model.param_count();
        sum["final_psnr"] = std::isfinite(result.final_psnr)
                                ? nlohmann::json(result.final_psnr)
                                : nlohmann::json(nullptr);
        sum["ablation"] = ablation_name(cfg.ablation);
        std::ofstream sf(cfg.out_dir + "/train_summary.json", std::ios::trunc);
        sf << sum.dump(2) << "\n";
    }
    return result;
}

void write_loss_csv(const std::vector<StepLog>& log, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("write_loss_csv: cannot write " + path);
    f << "step,l_ma,l_sc,l_sct,l_de,total,lr\n";
    char line[256];
    for (const StepLog& e : log) {
        std::snprintf(line, sizeof(line), "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", e.step,
                      e.report.l_ma, e.report.l_sc, e.report.l_sct, e.report.l_de,
                      e.report.total, e.lr);
        f << line;
    }
}

}  // namespace moss
