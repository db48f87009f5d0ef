#pragma once

#include <string>
#include <vector>

#include "mossfuse/losses.hpp"

namespace moss {

struct TrainConfig {
    int epochs = 300;
    double lr_start = 1e-3;
    double lr_end = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int patch_size = 128;    // clipped to the scene and rounded to a multiple of scale
    bool random_crop = false;
    LossWeights weights;
    std::uint64_t seed = 0;
    AblationMode ablation = AblationMode::Full;
    int checkpoint_every = 0;      // epochs; 0 = only at the end
    std::string out_dir;           // loss CSV / checkpoints / summary; empty = in-memory only
    // Learning-rate multiplier for the degradation-estimation parameters.
    // The PSF/SRF raws must travel much further than the network weights at
    // desk-scale step budgets; Adam caps per-step movement near lr.
    double deg_lr_mult = 25.0;

    void validate() const;
    std::string to_json() const;
    static TrainConfig from_json(const std::string& text);
};

// lr(e) = lr_end + 0.5 (lr_start - lr_end) (1 + cos(pi e / (epochs-1))).
double cosine_lr(int epoch, const TrainConfig& cfg);

class AdamOptimizer {
public:
    AdamOptimizer(ParamStore& store, double beta1, double beta2, double eps,
                  double deg_lr_mult = 1.0);
    void step(double lr);
    long steps_taken() const { return t_; }

private:
    ParamStore& store_;
    double beta1_, beta2_, eps_;
    double deg_lr_mult_;
    long t_ = 0;
    std::vector<ad::Buf> m_, v_;
    std::vector<double> lr_scale_;
};

struct StepLog {
    long step = 0;
    int epoch = 0;
    LossReport report;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<StepLog> log;
    double final_psnr = 0.0;   // fused vs truth on the first scene, NaN if no truth
    std::string checkpoint_path;  // final checkpoint (when out_dir set)
};

// Unsupervised optimization of the model on the given scenes. Patches are
// cropped at scale-aligned offsets so LR patches are exact integer crops.
TrainResult train(MossFuseModel& model, const std::vector<SceneTriplet>& scenes,
                  const TrainConfig& cfg);

// Writes the per-step loss log: step,l_ma,l_sc,l_sct,l_de,total,lr
void write_loss_csv(const std::vector<StepLog>& log, const std::string& path);

}  // namespace moss
