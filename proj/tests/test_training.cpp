#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "testutil.hpp"
#include "mossfuse/synthdata.hpp"
#include "mossfuse/training.hpp"

using namespace moss;

namespace {

ModelConfig tiny_model(int B, int b, int s) {
    ModelConfig cfg;
    cfg.hsi_bands = B;
    cfg.msi_bands = b;
    cfg.scale = s;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.base_depth = 1;
    cfg.dec_depth = 1;
    cfg.fused_dec_depth = 1;
    cfg.lk_kernel = 5;
    cfg.lk_branches = {{3, 1}, {3, 2}};
    cfg.attn_temp_init = 8.0;
    return cfg;
}

SceneTriplet tiny_scene(std::uint64_t seed) {
    SpectralImage truth = make_phantom(16, 16, 6, seed);
    return synthesize_triplet(truth, {1.0, 0.5, 0.3, 5, 2}, make_gaussian_srf(6, 2));
}

TrainConfig tiny_train(int epochs, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.patch_size = 16;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("cosine schedule hits the pinned endpoints and midpoint") {
    TrainConfig cfg;
    cfg.epochs = 301;  // odd count gives an exact midpoint epoch
    CHECK(cosine_lr(0, cfg) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(cosine_lr(300, cfg) == doctest::Approx(1e-6).epsilon(1e-9));
    CHECK(cosine_lr(150, cfg) == doctest::Approx(5.005e-4).epsilon(1e-9));
    CHECK_THROWS_AS(cosine_lr(-1, cfg), ArgumentError);
    CHECK_THROWS_AS(cosine_lr(301, cfg), ArgumentError);
}

TEST_CASE("five fixed-seed steps are reproducible") {
    SceneTriplet scene = tiny_scene(100);
    std::vector<double> totals[2];
    for (int run = 0; run < 2; ++run) {
        MossFuseModel model(tiny_model(6, 2, 2), 7);
        TrainConfig cfg = tiny_train(5, 11);
        TrainResult r = train(model, {scene}, cfg);
        for (const StepLog& s : r.log) totals[run].push_back(s.report.total);
    }
    REQUIRE(totals[0].size() == 5);
    CHECK(totals[0] == totals[1]);
}

TEST_CASE("loss at step 50 is below the starting loss on the toy scene") {
    SceneTriplet scene = tiny_scene(200);
    MossFuseModel model(tiny_model(6, 2, 2), 13);
    TrainConfig cfg = tiny_train(51, 17);
    TrainResult r = train(model, {scene}, cfg);
    REQUIRE(r.log.size() == 51);
    CHECK(r.log[50].report.total < r.log[0].report.total);
}

TEST_CASE("checkpoints written during training round-trip") {
    auto dir = std::filesystem::temp_directory_path() / "mossfuse_train_tests" / "run1";
    std::filesystem::remove_all(dir);
    SceneTriplet scene = tiny_scene(300);
    MossFuseModel model(tiny_model(6, 2, 2), 19);
    TrainConfig cfg = tiny_train(4, 23);
    cfg.out_dir = dir.string();
    cfg.checkpoint_every = 2;
    TrainResult r = train(model, {scene}, cfg);
    CHECK(std::filesystem::exists(dir / "model.ckpt"));
    CHECK(std::filesystem::exists(dir / "ckpt_epoch2.ckpt"));
    CHECK(std::filesystem::exists(dir / "loss_log.csv"));
    CHECK(std::filesystem::exists(dir / "train_summary.json"));

    auto loaded = load_checkpoint((dir / "model.ckpt").string());
    ad::NoGradGuard ng;
    ForwardBundle a = model.forward(scene.hrmsi, scene.lrhsi);
    ForwardBundle b = loaded->forward(scene.hrmsi, scene.lrhsi);
    CHECK(a.fused.value() == b.fused.value());
    CHECK(std::isfinite(r.final_psnr));
}

TEST_CASE("HR/LR patch alignment under scale-aligned crops") {
    // LR patches cut from the synthesized LR-HSI must match degrading the
    // cropped truth patch away from the patch border.
    SpectralImage truth = make_phantom(32, 32, 4, 400);
    PsfParams psf{1.0, 0.6, 0.2, 5, 2};
    SrfMatrix srf = make_gaussian_srf(4, 2);
    SceneTriplet scene = synthesize_triplet(truth, psf, srf);

    const int ps = 16, oy = 8, ox = 8, s = 2;
    SpectralImage truth_patch(ps, ps, 4);
    for (int b = 0; b < 4; ++b)
        for (int y = 0; y < ps; ++y)
            for (int x = 0; x < ps; ++x) truth_patch.at(b, y, x) = truth.at(b, oy + y, ox + x);
    SpectralImage lr_direct = spatial_degrade(truth_patch, build_agk_kernel(psf), s);

    const int margin = (5 / 2 + s - 1) / s + 1;  // kernel radius in LR pixels
    for (int b = 0; b < 4; ++b)
        for (int y = margin; y < ps / s - margin; ++y)
            for (int x = margin; x < ps / s - margin; ++x) {
                const float from_scene = scene.lrhsi.at(b, oy / s + y, ox / s + x);
                CHECK(std::fabs(from_scene - lr_direct.at(b, y, x)) < 1e-6f);
            }
}

TEST_CASE("gridded patches cover the scene and respect alignment") {
    SpectralImage truth = make_phantom(32, 32, 4, 500);
    SceneTriplet scene = synthesize_triplet(truth, {1.0, 0.5, 0.0, 5, 2},
                                            make_gaussian_srf(4, 2));
    MossFuseModel model(tiny_model(4, 2, 2), 29);
    TrainConfig cfg = tiny_train(1, 31);
    cfg.patch_size = 16;  // 2x2 grid per epoch
    TrainResult r = train(model, {scene}, cfg);
    CHECK(r.log.size() == 4);

    // random-crop mode takes one aligned patch per scene per epoch
    MossFuseModel model2(tiny_model(4, 2, 2), 29);
    cfg.random_crop = true;
    cfg.epochs = 3;
    TrainResult r2 = train(model2, {scene}, cfg);
    CHECK(r2.log.size() == 3);
}

TEST_CASE("ablation switches train and keep their loss semantics") {
    SceneTriplet scene = tiny_scene(600);
    for (AblationMode mode : {AblationMode::NoLsc, AblationMode::NoAggregate,
                              AblationMode::NoRepel, AblationMode::NoLsct2}) {
        ModelConfig mc = tiny_model(6, 2, 2);
        mc.ablation = mode;
        MossFuseModel model(mc, 37);
        TrainConfig cfg = tiny_train(2, 41);
        cfg.ablation = mode;
        TrainResult r = train(model, {scene}, cfg);
        CHECK(r.log.size() == 2);
        for (const StepLog& s : r.log) CHECK(std::isfinite(s.report.total));
    }
    // architectural ablations
    for (AblationMode mode :
         {AblationMode::ConcatConv, AblationMode::CrossAttention, AblationMode::ConvDe}) {
        ModelConfig mc = tiny_model(6, 2, 2);
        mc.ablation = mode;
        MossFuseModel model(mc, 43);
        TrainConfig cfg = tiny_train(2, 47);
        cfg.ablation = mode;
        TrainResult r = train(model, {scene}, cfg);
        CHECK(r.log.size() == 2);
    }
}

TEST_CASE("no_lsc excludes the clustering term from the total") {
    SceneTriplet scene = tiny_scene(700);
    MossFuseModel model(tiny_model(6, 2, 2), 53);
    model.set_training(true);
    ForwardBundle bundle = model.forward(scene.hrmsi, scene.lrhsi);
    ad::Var yv = image_to_var(scene.hrmsi);
    ad::Var xv = image_to_var(scene.lrhsi);
    TotalLoss full = total_loss(bundle, yv, xv, LossWeights{}, AblationMode::Full);
    ForwardBundle bundle2 = model.forward(scene.hrmsi, scene.lrhsi);
    TotalLoss ablated = total_loss(bundle2, yv, xv, LossWeights{}, AblationMode::NoLsc);
    CHECK(ablated.report.l_sc == doctest::Approx(full.report.l_sc));  // still evaluated
    CHECK(ablated.report.total ==
          doctest::Approx(full.report.total - 0.1 * full.report.l_sc).epsilon(1e-9));
}

TEST_CASE("train config json round trip and validation") {
    TrainConfig cfg;
    cfg.epochs = 123;
    cfg.weights.alpha1 = 0.25;
    cfg.ablation = AblationMode::NoRepel;
    TrainConfig back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.epochs == 123);
    CHECK(back.weights.alpha1 == doctest::Approx(0.25));
    CHECK(back.ablation == AblationMode::NoRepel);

    TrainConfig bad;
    bad.lr_end = 0.0;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    TrainConfig bad2;
    bad2.epochs = 0;
    CHECK_THROWS_AS(bad2.validate(), ArgumentError);
}

TEST_CASE("loss csv has the pinned column layout") {
    std::vector<StepLog> log;
    StepLog s;
    s.step = 0;
    s.report = {1.0, 2.0, 3.0, 4.0, 8.2};
    s.lr = 1e-3;
    log.push_back(s);
    auto dir = std::filesystem::temp_directory_path() / "mossfuse_train_tests";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "loss.csv").string();
    write_loss_csv(log, path);
    std::ifstream f(path);
    std::string header, row;
    std::getline(f, header);
    std::getline(f, row);
    CHECK(header == "step,l_ma,l_sc,l_sct,l_de,total,lr");
    CHECK(row.substr(0, 4) == "0,1,");
}

TEST_CASE("non-finite loss aborts with a diagnostic dump") {
    SceneTriplet scene = tiny_scene(900);
    MossFuseModel model(tiny_model(6, 2, 2), 91);
    // poison the fused head so only the loss value goes NaN (the decoupled
    // features stay finite and the cosine guard is not tripped first)
    for (const auto& p : model.params().params())
        if (p.name == "head_fused.b") {
            ad::Var v = p.var;
            v.value_mut()[0] = std::numeric_limits<double>::quiet_NaN();
        }
    auto dir = std::filesystem::temp_directory_path() / "mossfuse_train_tests" / "nan";
    std::filesystem::remove_all(dir);
    TrainConfig cfg = tiny_train(2, 93);
    cfg.out_dir = dir.string();
    CHECK_THROWS_AS(train(model, {scene}, cfg), NumericError);
    CHECK(std::filesystem::exists(dir / "nan_dump.json"));
}
