#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "smeood/trainer.hpp"

using namespace smeood;

namespace {

SynthSpec small_spec() {
    SynthSpec s;
    s.n_id_classes = 4;
    s.n_ood_dev = 3;
    s.n_ood_eval = 3;
    s.n_ood_aux = 3;
    s.dim = 8;
    s.samples_per_class = {{"train", 30}, {"dev", 10}, {"eval", 10},
                           {"ood_dev", 10}, {"ood_eval", 10}, {"aux", 10}};
    return s;
}

TrainConfig short_config() {
    TrainConfig c;
    c.epochs = 6;
    c.batch_size = 16;
    c.lr = 1e-2;
    return c;
}

/// Default-spec dataset and default LMCL run, shared across tests.
class Fixture : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        data_ = new SynthDataset(generate(SynthSpec{}));
        lmcl_ = new TrainResult(train(*data_, TrainConfig{}));
    }
    static void TearDownTestSuite() {
        delete lmcl_;
        delete data_;
    }
    static SynthDataset* data_;
    static TrainResult* lmcl_;
};

SynthDataset* Fixture::data_ = nullptr;
TrainResult* Fixture::lmcl_ = nullptr;

}  // namespace

TEST(Train, DeterministicUnderSeed) {
    const auto d = generate(small_spec());
    auto cfg = short_config();
    cfg.sme_loss = SmeLossConfig{0.5, -1.1, -1.0, 1.0};
    cfg.feature_noise = 0.1;
    const auto a = train(d, cfg);
    const auto b = train(d, cfg);
    EXPECT_EQ(a.log, b.log);
    EXPECT_TRUE(a.model.params == b.model.params);
    EXPECT_TRUE(a.final_model.params == b.final_model.params);

    cfg.seed = 2;
    EXPECT_FALSE(train(d, cfg).final_model.params == a.final_model.params);
}

TEST(Train, LambdaZeroEqualsNoHingeTerm) {
    const auto d = generate(small_spec());
    auto cfg = short_config();
    const auto plain = train(d, cfg);
    cfg.sme_loss = SmeLossConfig{0.0, -1.1, -1.0, 1.0};
    const auto zero = train(d, cfg);
    EXPECT_EQ(plain.log, zero.log);
    EXPECT_TRUE(plain.model.params == zero.model.params);
    std::ostringstream a, b;
    write_train_log(a, plain.log);
    write_train_log(b, zero.log);
    EXPECT_EQ(a.str(), b.str());
}

TEST(Train, CheckpointIsBestDevEpoch) {
    const auto d = generate(small_spec());
    for (auto metric : {CheckpointMetric::eerc_sme, CheckpointMetric::eerc_energy,
                        CheckpointMetric::eerc_msp}) {
        auto cfg = short_config();
        cfg.checkpoint_metric = metric;
        const auto r = train(d, cfg);
        ASSERT_EQ(r.log.epochs.size(), 6u);
        double best = INFINITY;
        for (const auto& e : r.log.epochs) best = std::min(best, e.dev_eerc);
        const auto dev = report_for(infer_logits(r.model, d, Split::dev), cfg.checkpoint_method());
        EXPECT_EQ(dev.eerc, best) << to_string(metric);
        EXPECT_EQ(r.log.epochs.at(static_cast<std::size_t>(r.log.selected_epoch)).dev_eerc, best);
    }
}

TEST(Train, LearningRateSchedule) {
    TrainConfig c;
    EXPECT_EQ(c.lr_at(0), 1e-3);
    EXPECT_NEAR(c.lr_at(c.epochs - 1), 0.0, 1e-18);
    for (int e = 1; e < c.epochs; ++e) EXPECT_LE(c.lr_at(e), c.lr_at(e - 1));
    c.lr_floor = 1e-5;
    EXPECT_NEAR(c.lr_at(c.epochs - 1), 1e-5, 1e-18);

    const auto d = generate(small_spec());
    const auto r = train(d, short_config());
    for (const auto& e : r.log.epochs) EXPECT_EQ(e.lr, short_config().lr_at(e.epoch));
}

TEST(Train, MarginFollowsScheduleInLog) {
    const auto d = generate(small_spec());
    auto cfg = short_config();
    cfg.margin.ramp_epochs = 4;
    const auto r = train(d, cfg);
    for (const auto& e : r.log.epochs) EXPECT_EQ(e.margin, cfg.margin.at(e.epoch));
    cfg.head = HeadKind::plain;
    for (const auto& e : train(d, cfg).log.epochs) EXPECT_EQ(e.margin, 0.0);
}

TEST(Train, SeparableTwoClassLimit) {
    SynthSpec s;
    s.n_id_classes = 2;
    s.ood_anchor_classes = 2;
    s.cluster_spread = 1e-3;
    const auto d = generate(s);
    const auto r = train(d, TrainConfig{});
    EXPECT_EQ(r.log.epochs.back().dev_eerc, 0.0);
    EXPECT_EQ(r.log.epochs.at(static_cast<std::size_t>(r.log.selected_epoch)).dev_eerc, 0.0);
}

TEST(Train, Errors) {
    auto d = generate(small_spec());
    auto cfg = short_config();
    cfg.sme_loss = SmeLossConfig{};
    EXPECT_THROW(train(d, nullptr, cfg), InvalidArgument);

    cfg = short_config();
    cfg.head = HeadKind::plain;
    cfg.lr = 1e6;
    try {
        train(d, cfg);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_GE(e.epoch(), 0);
        EXPECT_LT(e.epoch(), cfg.epochs);
    }

    cfg = short_config();
    cfg.epochs = 0;
    EXPECT_THROW(train(d, cfg), InvalidArgument);
    cfg = short_config();
    cfg.lr = -1.0;
    EXPECT_THROW(train(d, cfg), InvalidArgument);

    auto no_dev = d;
    std::erase_if(no_dev.meta.records, [](const LogitRecord& r) { return r.split == Split::dev; });
    no_dev.features = no_dev.features.topRows(static_cast<Eigen::Index>(no_dev.meta.records.size()));
    EXPECT_THROW(train(no_dev, short_config()), InvalidArgument);
}

TEST(Train, LogHasOneLinePerEpochAndOneSelected) {
    const auto r = train(generate(small_spec()), short_config());
    std::ostringstream out;
    write_train_log(out, r.log);
    std::istringstream in(out.str());
    std::string line;
    int lines = 0, selected = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j["epoch"], lines);
        selected += j["selected"].get<bool>();
        ++lines;
    }
    EXPECT_EQ(lines, 6);
    EXPECT_EQ(selected, 1);
}

TEST(TrainConfigJson, RoundTrip) {
    TrainConfig c;
    c.head = HeadKind::plain;
    c.sme_loss = SmeLossConfig{2.5, -3.2, -3.1, 0.5};
    c.checkpoint_metric = CheckpointMetric::eerc_energy;
    c.margin.ramp_epochs = 7;
    const nlohmann::json j = c;
    const auto back = j.get<TrainConfig>();
    EXPECT_EQ(nlohmann::json(back).dump(), j.dump());
    EXPECT_FALSE(nlohmann::json::parse(R"({"sme_loss": null})").get<TrainConfig>().sme_loss);
    EXPECT_THROW(nlohmann::json::parse(R"({"head": "resnet"})").get<TrainConfig>(), InvalidArgument);
}

TEST(Model, SaveLoadRoundTrip) {
    const auto dir = std::filesystem::path(::testing::TempDir()) /
                     ("smeood_model_" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
    for (HeadKind h : {HeadKind::plain, HeadKind::lmcl}) {
        const auto m = init_model(h, 8, 5, 3, 42, 12.0);
        save_model(dir / "m.bin", m);
        const auto l = load_model(dir / "m.bin");
        EXPECT_EQ(l.head, h);
        EXPECT_EQ(l.lmcl_scale, 12.0);
        EXPECT_TRUE(l.params == m.params);
    }
    {
        std::ofstream bad(dir / "bad.bin", std::ios::binary);
        bad << "NOTAMODEL";
    }
    EXPECT_THROW(load_model(dir / "bad.bin"), Error);
    std::filesystem::remove_all(dir);
}

TEST_F(Fixture, WeightDecayShrinksFinalParameters) {
    TrainConfig no_decay;
    no_decay.weight_decay = 0.0;
    const auto r0 = train(*data_, no_decay);
    EXPECT_LE(lmcl_->final_model.params.squared_norm(), r0.final_model.params.squared_norm());
}

TEST_F(Fixture, DevSmeBeatsUntemperedEnergyForLmcl) {
    const std::vector<ScoreMethod> m = {{ScoreKind::sme, 1.0}, {ScoreKind::energy, 1.0}};
    const auto r = evaluate(lmcl_->model, *data_, m, Split::dev);
    EXPECT_LT(r[0].fpr95, r[1].fpr95);
}

TEST_F(Fixture, LmclInferenceLogitsAreCosines) {
    const auto logits = infer_logits(lmcl_->model, *data_, Split::eval);
    for (const auto& r : logits.records)
        for (double v : r.logits) {
            EXPECT_LE(v, 1.0 + 1e-12);
            EXPECT_GE(v, -1.0 - 1e-12);
        }
}

TEST_F(Fixture, EvaluateOneReportPerMethod) {
    const std::vector<ScoreMethod> m = {{ScoreKind::msp, 1.0}, {ScoreKind::energy, 0.0625}};
    const auto r = evaluate(lmcl_->model, *data_, m);
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].method, m[0]);
    EXPECT_EQ(r[1].method, m[1]);
    EXPECT_EQ(r[0].n_id, 24u * 30u);
    EXPECT_EQ(r[0].n_ood, 43u * 30u);
    EXPECT_EQ(r[0].n_id, r[1].n_id);
    EXPECT_EQ(r[0].id_acc, r[1].id_acc);
}

TEST_F(Fixture, EnergyTemperatureDuality) {
    auto logits = infer_logits(lmcl_->model, *data_, Split::eval);
    for (double t : {0.0625, 0.5, 4.0}) {
        auto scaled = logits;
        for (auto& r : scaled.records)
            for (double& v : r.logits) v /= t;
        const auto a = report_for(logits, {ScoreKind::energy, t});
        const auto b = report_for(scaled, {ScoreKind::energy, 1.0});
        EXPECT_NEAR(a.fpr95, b.fpr95, 1e-9);
        EXPECT_NEAR(a.eer, b.eer, 1e-9);
        EXPECT_NEAR(a.eerc, b.eerc, 1e-9);
        EXPECT_NEAR(a.id_acc, b.id_acc, 1e-9);
    }
}

TEST_F(Fixture, TemperatureSweep) {
    const std::vector<double> grid = {1.0 / 64, 1.0 / 16, 0.25, 1.0, 4.0};
    const auto s = sweep_temperature(lmcl_->model, *data_, ScoreKind::energy, grid);
    ASSERT_EQ(s.table.size(), grid.size());
    double at_one = NAN, at_best = NAN, min_eerc = INFINITY;
    for (const auto& row : s.table) {
        if (row.temperature == 1.0) at_one = row.dev_eerc;
        if (row.temperature == s.best_temperature) at_best = row.dev_eerc;
        min_eerc = std::min(min_eerc, row.dev_eerc);
    }
    EXPECT_EQ(at_best, min_eerc);
    EXPECT_LE(at_best, at_one);
    // Lowest temperature wins ties.
    for (const auto& row : s.table)
        if (row.dev_eerc == min_eerc) {
            EXPECT_EQ(row.temperature, s.best_temperature);
            break;
        }

    const std::vector<double> one = {1.0};
    EXPECT_EQ(sweep_temperature(lmcl_->model, *data_, ScoreKind::sme, one).best_temperature, 1.0);
    EXPECT_THROW(sweep_temperature(lmcl_->model, *data_, ScoreKind::sme, std::vector<double>{}),
                 InvalidArgument);
}

TEST_F(Fixture, SelectedHingeHyperparameters) {
    const auto sme = select_sme_hyperparameters(lmcl_->model, *data_, TrainConfig{});
    EXPECT_NEAR(sme.m_out - sme.m_in, 4e-5, 1e-12);
    EXPECT_GT(sme.lambda, 0.0);
    EXPECT_EQ(sme.temperature, 1.0);
    EXPECT_LT(sme.m_out, 0.0);
}

TEST_F(Fixture, PlainHeadMspAndSmeAgreeWhenSaturated) {
    TrainConfig cfg;
    cfg.head = HeadKind::plain;
    cfg.lr = 1e-2;
    cfg.epochs = 100;
    const auto r = train(*data_, cfg);
    const std::vector<ScoreMethod> m = {{ScoreKind::msp, 1.0}, {ScoreKind::sme, 1.0}};
    const auto rep = evaluate(r.model, *data_, m);
    EXPECT_LT(std::abs(rep[0].fpr95 - rep[1].fpr95), 0.05);
}
