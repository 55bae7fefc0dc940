#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "smeood/gradcheck.hpp"
#include "smeood/losses.hpp"
#include "smeood/objective.hpp"
#include "smeood/rng.hpp"
#include "smeood/scoring.hpp"

using namespace smeood;

namespace {

Vec random_vec(Rng& rng, Eigen::Index n, double scale = 1.0) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
    return v;
}

Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) m.row(i) = random_vec(rng, c).transpose();
    return m;
}

double sme_of(const Vec& u, double t = 1.0) { return sme(as_span(u), t); }

}  // namespace

TEST(CeLoss, UniformLogits) {
    const Vec u = Vec::Constant(4, 0.7);
    const auto r = ce_loss(u, 2);
    EXPECT_NEAR(r.loss, std::log(4.0), 1e-15);
    for (Eigen::Index i = 0; i < 4; ++i) EXPECT_NEAR(r.grad[i], i == 2 ? -0.75 : 0.25, 1e-15);
}

TEST(CeLoss, MatchesLongDoubleReference) {
    Rng rng(3);
    for (int t = 0; t < 200; ++t) {
        const Vec u = random_vec(rng, 2 + static_cast<Eigen::Index>(rng.below(10)), 5.0);
        const auto target = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(u.size())));
        long double m = u.maxCoeff(), s = 0;
        for (Eigen::Index i = 0; i < u.size(); ++i) s += std::exp(static_cast<long double>(u[i]) - m);
        const long double ref = m + std::log(s) - u[static_cast<Eigen::Index>(target)];
        EXPECT_NEAR(ce_loss(u, target).loss, static_cast<double>(ref), 1e-12);
    }
}

TEST(CeLoss, TargetOutOfRange) {
    EXPECT_THROW(ce_loss(Vec::Zero(3), 3), InvalidArgument);
}

TEST(Lmcl, AlignedEmbeddingExample) {
    Mat w(3, 2);
    w << 1, 0, 0, 1, -1, 0;
    const Vec z = Vec::Unit(2, 0) * 2.5;
    LmclHead head{w, 16.0, 0.5};
    const Vec train = lmcl_logits(z, head, 0);
    EXPECT_NEAR(train[0], 8.0, 1e-12);
    EXPECT_NEAR(train[1], 0.0, 1e-12);
    EXPECT_NEAR(train[2], -16.0, 1e-12);
    const Vec infer = lmcl_logits(z, head);
    EXPECT_NEAR(infer[0], 1.0, 1e-15);
    EXPECT_NEAR(infer[2], -1.0, 1e-15);
}

TEST(Lmcl, InferenceLogitsAreCosines) {
    Rng rng(4);
    for (int t = 0; t < 500; ++t) {
        const Eigen::Index d = 2 + static_cast<Eigen::Index>(rng.below(8));
        LmclHead head{random_mat(rng, 5, d), 16.0, 0.35};
        const Vec c = lmcl_logits(random_vec(rng, d, 10.0), head);
        EXPECT_LE(c.maxCoeff(), 1.0 + 1e-12);
        EXPECT_GE(c.minCoeff(), -1.0 - 1e-12);
    }
}

TEST(Lmcl, MarginSchedule) {
    const MarginSchedule s;
    EXPECT_EQ(s.at(0), 0.0);
    EXPECT_EQ(s.at(20), 0.25);
    EXPECT_EQ(s.at(40), 0.5);
    EXPECT_EQ(s.at(41), 0.5);
    EXPECT_EQ(s.at(1000), 0.5);
    Mat w = Mat::Identity(2, 2);
    const Vec z = Vec::Unit(2, 0);
    LmclHead head{w, 16.0, 0.0};
    EXPECT_NEAR(lmcl_loss(z, head, 0, 40, s).loss, lmcl_loss(z, LmclHead{w, 16.0, 0.5}, 0).loss,
                1e-15);
}

TEST(Lmcl, InvariantToEmbeddingRescaling) {
    Rng rng(5);
    for (int t = 0; t < 200; ++t) {
        LmclHead head{random_mat(rng, 4, 6), 16.0, 0.3};
        const Vec z = random_vec(rng, 6);
        const double c = std::exp(rng.uniform(-5.0, 5.0));
        EXPECT_NEAR(lmcl_loss(c * z, head, 1).loss, lmcl_loss(z, head, 1).loss, 1e-9);
    }
}

TEST(Lmcl, Errors) {
    LmclHead head{Mat::Identity(2, 2), 16.0, 0.0};
    EXPECT_THROW(lmcl_logits(Vec::Zero(2), head), InvalidArgument);
    EXPECT_THROW(lmcl_logits(Vec::Ones(2), head, 2), InvalidArgument);
    LmclHead zero_row{Mat::Zero(2, 2), 16.0, 0.0};
    EXPECT_THROW(lmcl_logits(Vec::Ones(2), zero_row), InvalidArgument);
}

TEST(SmeHinge, InactiveIsZero) {
    Rng rng(6);
    const Vec a = random_vec(rng, 5), b = random_vec(rng, 5);
    SmeLossConfig cfg;
    cfg.m_in = sme_of(a) + 0.1;
    cfg.m_out = sme_of(b) - 0.1;
    std::vector<Vec> in = {a}, out = {b};
    const auto r = sme_hinge_loss(in, out, cfg);
    EXPECT_EQ(r.loss, 0.0);
    EXPECT_TRUE(r.grads_in[0].isZero(0.0));
    EXPECT_TRUE(r.grads_out[0].isZero(0.0));
}

TEST(SmeHinge, ActiveIsSquaredSlack) {
    Rng rng(7);
    const Vec a = random_vec(rng, 4);
    const double delta = 0.03;
    SmeLossConfig cfg;
    cfg.m_in = sme_of(a) - delta;
    cfg.m_out = sme_of(a) + delta;
    std::vector<Vec> one = {a}, none;
    EXPECT_NEAR(sme_hinge_loss(one, none, cfg).loss, delta * delta, 1e-15);
    EXPECT_NEAR(sme_hinge_loss(none, one, cfg).loss, delta * delta, 1e-15);
    // Per-list means: two copies of the same ID sample still give delta^2.
    std::vector<Vec> two = {a, a};
    EXPECT_NEAR(sme_hinge_loss(two, one, cfg).loss, 2 * delta * delta, 1e-15);
}

TEST(SmeHinge, ShiftInvariance) {
    Rng rng(8);
    for (int t = 0; t < 200; ++t) {
        SmeLossConfig cfg;
        cfg.temperature = t % 2 ? 1.0 : 0.5;
        std::vector<Vec> in, out, in_s, out_s;
        for (int i = 0; i < 3; ++i) {
            in.push_back(random_vec(rng, 6, 2.0));
            out.push_back(random_vec(rng, 6, 2.0));
            in_s.push_back(in.back().array() + rng.uniform(-50.0, 50.0));
            out_s.push_back(out.back().array() + rng.uniform(-50.0, 50.0));
        }
        cfg.m_in = sme_of(in[0], cfg.temperature) - 0.01;
        cfg.m_out = sme_of(out[0], cfg.temperature) + 0.01;
        EXPECT_NEAR(sme_hinge_loss(in_s, out_s, cfg).loss, sme_hinge_loss(in, out, cfg).loss, 1e-9);
    }
}

TEST(SmeHinge, PerturbationInsideInactiveRegionKeepsLossZero) {
    Rng rng(9);
    for (int t = 0; t < 200; ++t) {
        const Vec a = random_vec(rng, 5);
        SmeLossConfig cfg;
        cfg.m_in = sme_of(a) + 0.05;
        cfg.m_out = -100.0;
        // |d sme / du_i| <= 1, so a perturbation of L1 norm below the slack stays inactive.
        const Vec p = a + random_vec(rng, 5).normalized() * 0.01;
        std::vector<Vec> in = {p}, none;
        EXPECT_EQ(sme_hinge_loss(in, none, cfg).loss, 0.0);
    }
}

TEST(SmeHinge, Errors) {
    std::vector<Vec> none;
    EXPECT_THROW(sme_hinge_loss(none, none, {}), InvalidArgument);
    SmeLossConfig c;
    c.lambda = -1e-3;
    EXPECT_THROW(c.validate(), InvalidArgument);
    c.lambda = 0.0;
    EXPECT_NO_THROW(c.validate());
    c.lambda = NAN;
    EXPECT_THROW(c.validate(), InvalidArgument);
    c.lambda = 1.0;
    c.temperature = 0.0;
    EXPECT_THROW(c.validate(), InvalidArgument);
}

namespace {

struct ObjectiveFixture {
    ToyModel model;
    LabeledBatch batch;
    std::vector<Vec> ood;
};

ObjectiveFixture make_objective_fixture(HeadKind head, std::uint64_t seed) {
    ObjectiveFixture f;
    f.model = init_model(head, 6, 5, 3, seed);
    Rng rng(seed);
    for (int i = 0; i < 4; ++i) {
        f.batch.inputs.push_back(random_vec(rng, 6));
        f.batch.labels.push_back(rng.below(3));
        f.ood.push_back(random_vec(rng, 6));
    }
    return f;
}

}  // namespace

TEST(CombinedObjective, LambdaZeroIsBitEqualToClassification) {
    for (HeadKind h : {HeadKind::plain, HeadKind::lmcl}) {
        auto f = make_objective_fixture(h, 11);
        const auto base = classification_objective(f.model, f.batch, 0.2);
        SmeLossConfig sme;
        sme.lambda = 0.0;
        for (const auto& cfg : {ObjectiveConfig{0.2, std::nullopt}, ObjectiveConfig{0.2, sme}}) {
            const auto r = combined_objective(f.model, f.batch, f.ood, cfg);
            EXPECT_EQ(r.loss, base.loss);
            EXPECT_EQ(r.cls_loss, base.cls_loss);
            EXPECT_EQ(r.sme_loss, 0.0);
            EXPECT_TRUE(r.grad == base.grad);
        }
    }
}

TEST(CombinedObjective, InactiveHingesWithoutOodEqualMeanClassification) {
    auto f = make_objective_fixture(HeadKind::lmcl, 12);
    SmeLossConfig sme;
    sme.lambda = 3.0;
    sme.m_in = 1.0;  // SME is always negative, so every ID hinge is inactive.
    const auto r = combined_objective(f.model, f.batch, {}, {0.1, sme});
    const auto base = classification_objective(f.model, f.batch, 0.1);
    EXPECT_EQ(r.sme_loss, 0.0);
    EXPECT_EQ(r.loss, base.loss);
}

TEST(CombinedObjective, TotalIsSumOfSeparateParts) {
    for (HeadKind h : {HeadKind::plain, HeadKind::lmcl}) {
        auto f = make_objective_fixture(h, 13);
        std::vector<Vec> u_in, u_out;
        for (const auto& x : f.batch.inputs) u_in.push_back(f.model.inference_logits(x));
        for (const auto& x : f.ood) u_out.push_back(f.model.inference_logits(x));
        SmeLossConfig sme;
        sme.lambda = 2.5;
        sme.m_in = sme_of(u_in[0]) - 0.02;   // at least one active ID hinge
        sme.m_out = sme_of(u_out[0]) + 0.02; // and one active OOD hinge
        const auto total = combined_objective(f.model, f.batch, f.ood, {0.3, sme});
        const auto cls = classification_objective(f.model, f.batch, 0.3);
        const auto hinge = sme_hinge_loss(u_in, u_out, sme);
        ASSERT_GT(hinge.loss, 0.0);

        Params hinge_grad = f.model.params.zeros_like();
        for (std::size_t i = 0; i < u_in.size(); ++i)
            detail::backprop_scoring_logits(f.model, f.batch.inputs[i],
                                            f.model.embed(f.batch.inputs[i]), hinge.grads_in[i],
                                            hinge_grad);
        for (std::size_t i = 0; i < u_out.size(); ++i)
            detail::backprop_scoring_logits(f.model, f.ood[i], f.model.embed(f.ood[i]),
                                            hinge.grads_out[i], hinge_grad);
        Params expect = cls.grad;
        expect.axpy(sme.lambda, hinge_grad);

        EXPECT_NEAR(total.loss, cls.loss + sme.lambda * hinge.loss, 1e-9);
        EXPECT_NEAR(total.sme_loss, hinge.loss, 1e-12);
        Params diff = total.grad;
        diff.axpy(-1.0, expect);
        EXPECT_LT(std::sqrt(diff.squared_norm()), 1e-9);
    }
}

TEST(Calibration, SymmetricFixture) {
    const std::vector<double> in = {-3, -2, -1, 1};
    const std::vector<double> out = {-1, 1, 2, 3};
    const auto m = calibrate_hinge_margins(in, out);
    EXPECT_NEAR(m.m_in, -2e-5, 1e-12);
    EXPECT_NEAR(m.m_out, 2e-5, 1e-12);
    EXPECT_NEAR(m.m_out - m.m_in, 4e-5, 1e-15);
}

TEST(Calibration, SeparatedDistributionsLandInTheGap) {
    const std::vector<double> in = {-5.0, -4.8, -4.6};
    const std::vector<double> out = {-3.0, -2.9};
    const auto m = calibrate_hinge_margins(in, out);
    EXPECT_GT(m.m_in, -4.6);
    EXPECT_LT(m.m_out, -3.0);
}

TEST(Calibration, EmptyInputThrows) {
    const std::vector<double> none, some = {1.0};
    EXPECT_THROW(calibrate_hinge_margins(none, some), InvalidArgument);
    EXPECT_THROW(calibrate_hinge_margins(some, none), InvalidArgument);
}

TEST(GradientSuite, AllLossesPass) {
    const auto r = run_gradient_suite(100, 1);
    ASSERT_TRUE(r.passed());
    ASSERT_GE(r.entries.size(), 3u);
    for (const auto& e : r.entries) {
        EXPECT_EQ(e.trials, 100);
        EXPECT_LE(e.max_rel_error, 1e-4) << e.loss;
    }
}

TEST(GradientSuite, DetectsInjectedFaults) {
    const std::vector<std::pair<GradFault, std::string>> faults = {
        {GradFault::ce_loss, "ce_loss"},
        {GradFault::lmcl_loss, "lmcl_loss"},
        {GradFault::sme_hinge_loss, "sme_hinge_loss"},
        {GradFault::combined_objective, "combined_objective"}};
    for (const auto& [fault, name] : faults) {
        const auto r = run_gradient_suite(20, 1, fault);
        EXPECT_FALSE(r.passed()) << name;
        for (const auto& e : r.entries) EXPECT_EQ(e.failed_trial.has_value(), e.loss == name) << name;
    }
}
