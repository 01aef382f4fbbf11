#include "doctest.h"

#include "oracles.hpp"
#include "tinyvlm/train.hpp"

#include <algorithm>
#include <cmath>

using namespace tinyvlm;

namespace {

StageConfig stage_for_tests(size_t steps) {
    StageConfig cfg = StageConfig::pretrain_defaults();
    cfg.total_steps = steps;
    cfg.batch = 4;
    return cfg;
}

std::vector<Tensor> snapshot(const std::vector<Param>& params) {
    std::vector<Tensor> out;
    for (const Param& p : params) out.push_back(p.value);
    return out;
}

}  // namespace

TEST_CASE("lr schedule: warmup end hits the peak, the run ends at zero") {
    StageConfig cfg = stage_for_tests(200);
    CHECK(cfg.warmup_steps() == 6);  // ceil(0.03 * 200)

    CHECK(lr_at(0, cfg, 1e-3) == 0.0);
    CHECK(lr_at(cfg.warmup_steps(), cfg, 1e-3) == 1e-3);
    CHECK(std::fabs(lr_at(cfg.total_steps, cfg, 1e-3)) <= 1e-12 * 1e-3);

    // midpoint of the decay phase: 6 + (200-6)/2 = 103
    const size_t mid = cfg.warmup_steps() + (cfg.total_steps - cfg.warmup_steps()) / 2;
    CHECK(std::fabs(lr_at(mid, cfg, 1e-3) - 0.5e-3) <= 1e-12);

    CHECK_THROWS_AS(lr_at(cfg.total_steps + 1, cfg, 1e-3), std::invalid_argument);
}

TEST_CASE("lr schedule shape: nondecreasing warmup, nonincreasing decay, max is peak") {
    StageConfig cfg = stage_for_tests(137);
    const double peak = 7e-4;
    double max_seen = 0;
    double prev = -1;
    for (size_t s = 0; s <= cfg.warmup_steps(); ++s) {
        const double lr = lr_at(s, cfg, peak);
        CHECK(lr >= prev);
        prev = lr;
        max_seen = std::max(max_seen, lr);
    }
    prev = lr_at(cfg.warmup_steps(), cfg, peak);
    for (size_t s = cfg.warmup_steps(); s <= cfg.total_steps; ++s) {
        const double lr = lr_at(s, cfg, peak);
        CHECK(lr <= prev + 1e-18);
        prev = lr;
        max_seen = std::max(max_seen, lr);
    }
    CHECK(max_seen == peak);
}

TEST_CASE("stage config validation and json round-trip") {
    StageConfig pre = StageConfig::pretrain_defaults();
    CHECK(pre.peak_lr_projector == 1e-3);
    CHECK(pre.peak_lr_base == 2e-5);
    CHECK(pre.warmup_ratio == 0.03);
    CHECK(pre.weight_decay == 0.0);
    CHECK_FALSE(pre.train_vision);
    CHECK(pre.train_projector);
    CHECK(pre.train_lm);
    StageConfig multi = StageConfig::multitask_defaults();
    CHECK(multi.peak_lr_projector == 4e-5);
    CHECK(multi.peak_lr_base == 4e-5);

    StageConfig back = StageConfig::from_json(pre.to_json());
    CHECK(back.name == "pretrain");
    CHECK(back.peak_lr_projector == pre.peak_lr_projector);

    StageConfig bad = pre;
    bad.warmup_ratio = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = pre;
    bad.total_steps = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = pre;
    bad.peak_lr_base = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = pre;
    bad.name = "warmup";
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("adamw: zero gradient leaves parameters bitwise unchanged") {
    Param p{"w", Tensor({3}, {0.5, -0.25, 1.75}), true};
    Tensor before = p.value;
    std::vector<Param*> group{&p};
    OptimizerState state;
    GradMap grads;
    grads.emplace("w", Tensor({3}));
    optimizer_step(group, grads, state, 1e-3, 0.0);
    CHECK(oracle::bitwise_equal(p.value, before));
    CHECK(state.moments.count("w") == 1);
    CHECK(state.step == 1);
}

TEST_CASE("adamw: constant gradient drives updates to -lr * sign(g)") {
    Param p{"w", Tensor({2}, {0.0, 0.0}), true};
    std::vector<Param*> group{&p};
    OptimizerState state;
    GradMap grads;
    grads.emplace("w", Tensor({2}, {0.37, -2.2}));
    const double lr = 1e-2;
    double prev0 = p.value[0], prev1 = p.value[1];
    for (int i = 0; i < 50; ++i) {
        optimizer_step(group, grads, state, lr, 0.0);
        const double step0 = p.value[0] - prev0;
        const double step1 = p.value[1] - prev1;
        CHECK(std::fabs(step0 + lr) <= lr * 1e-5);  // -lr * sign(+)
        CHECK(std::fabs(step1 - lr) <= lr * 1e-5);  // -lr * sign(-)
        prev0 = p.value[0];
        prev1 = p.value[1];
    }
}

TEST_CASE("adamw single step matches a hand-rolled scalar oracle") {
    const double theta0 = 0.8, g = -0.3, lr = 5e-3, wd = 0.01;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    // one step, bias-corrected
    const double m = (1 - b1) * g;
    const double v = (1 - b2) * g * g;
    const double mhat = m / (1 - b1);
    const double vhat = v / (1 - b2);
    const double want = theta0 - lr * (mhat / (std::sqrt(vhat) + eps) + wd * theta0);

    Param p{"w", Tensor({1}, {theta0}), true};
    std::vector<Param*> group{&p};
    OptimizerState state;
    GradMap grads;
    grads.emplace("w", Tensor({1}, {g}));
    optimizer_step(group, grads, state, lr, wd);
    CHECK(std::fabs(p.value[0] - want) <= 1e-15);
}

TEST_CASE("adamw: decoupled weight decay shrinks parameters without gradients") {
    Param p{"w", Tensor({1}, {2.0}), true};
    std::vector<Param*> group{&p};
    OptimizerState state;
    GradMap grads;
    grads.emplace("w", Tensor({1}));
    optimizer_step(group, grads, state, 0.1, 0.5);
    CHECK(std::fabs(p.value[0] - (2.0 - 0.1 * 0.5 * 2.0)) <= 1e-15);
}

TEST_CASE("adamw rejects mismatched gradient shapes and only tracks stepped params") {
    Param p{"w", Tensor({2}), true};
    std::vector<Param*> group{&p};
    OptimizerState state;
    GradMap grads;
    grads.emplace("w", Tensor({3}));
    CHECK_THROWS_AS(optimizer_step(group, grads, state, 1e-3, 0.0), std::invalid_argument);

    OptimizerState fresh;
    GradMap ok;
    ok.emplace("w", Tensor({2}));
    optimizer_step(group, ok, fresh, 1e-3, 0.0);
    CHECK(fresh.moments.size() == 1);  // nothing beyond the passed params
}

TEST_CASE("run_stage honors the freeze matrix") {
    PipelineConfig cfg = toy_pipeline_config(3);
    VlmPipeline model(cfg);
    SyntheticTask task = SyntheticTask::memorization(cfg, 8, 3, 5);

    std::vector<Tensor> vision_before = snapshot(model.vision().params());
    StageConfig stage = stage_for_tests(5);
    std::vector<StepRecord> curve = run_stage(model, stage, task);
    REQUIRE(curve.size() == 5);
    for (size_t i = 0; i < vision_before.size(); ++i) {
        CHECK(oracle::bitwise_equal(model.vision().params()[i].value, vision_before[i]));
    }

    // freeze everything else too: now nothing is trainable
    StageConfig frozen = stage_for_tests(5);
    frozen.train_projector = false;
    frozen.train_lm = false;
    CHECK_THROWS_WITH_AS(run_stage(model, frozen, task),
                         "nothing trainable: all components are frozen", std::invalid_argument);

    // vision flagged trainable but the stub itself is frozen: still nothing
    StageConfig vision_only = frozen;
    vision_only.train_vision = true;
    CHECK_THROWS_AS(run_stage(model, vision_only, task), std::invalid_argument);

    // LM-only training leaves the projector untouched
    VlmPipeline model2(cfg);
    std::vector<Tensor> proj_before = snapshot(model2.projector().params());
    StageConfig lm_only = stage_for_tests(5);
    lm_only.train_projector = false;
    run_stage(model2, lm_only, task);
    for (size_t i = 0; i < proj_before.size(); ++i) {
        CHECK(oracle::bitwise_equal(model2.projector().params()[i].value, proj_before[i]));
    }
    bool lm_moved = false;
    VlmPipeline reference(cfg);
    for (size_t i = 0; i < reference.lm().params().size(); ++i) {
        if (!oracle::bitwise_equal(model2.lm().params()[i].value,
                                   reference.lm().params()[i].value)) {
            lm_moved = true;
        }
    }
    CHECK(lm_moved);
}

TEST_CASE("the two parameter groups see their own scheduled learning rates") {
    PipelineConfig cfg = toy_pipeline_config(11);
    VlmPipeline model(cfg);
    SyntheticTask task = SyntheticTask::memorization(cfg, 4, 2, 5);
    StageConfig stage = StageConfig::pretrain_defaults();
    stage.total_steps = 50;
    stage.batch = 4;
    std::vector<StepRecord> curve = run_stage(model, stage, task);

    CHECK(stage.warmup_steps() == 2);
    CHECK(curve[2].lr_projector == 1e-3);
    CHECK(curve[2].lr_base == 2e-5);
    double max_p = 0, max_b = 0;
    for (const StepRecord& r : curve) {
        CHECK(r.lr_projector == lr_at(r.step, stage, stage.peak_lr_projector));
        CHECK(r.lr_base == lr_at(r.step, stage, stage.peak_lr_base));
        max_p = std::max(max_p, r.lr_projector);
        max_b = std::max(max_b, r.lr_base);
    }
    CHECK(max_p == 1e-3);
    CHECK(max_b == 2e-5);
}

TEST_CASE("200 steps memorize the 32-sample task") {
    PipelineConfig cfg = toy_pipeline_config(7);
    VlmPipeline model(cfg);
    SyntheticTask task = SyntheticTask::memorization(cfg, 32, 4, 99);
    StageConfig stage = StageConfig::multitask_defaults();
    stage.total_steps = 200;
    stage.batch = 32;
    stage.peak_lr_projector = 2e-2;  // toy-scale rate; the full-scale default
    stage.peak_lr_base = 2e-2;       // cannot move a model 90% in 200 steps
    std::vector<StepRecord> curve = run_stage(model, stage, task);

    const double initial = curve.front().loss;
    const double final_loss = curve.back().loss;
    CHECK(initial > 1.0);
    CHECK(final_loss < 0.1 * initial);

    // minimum over consecutive 20-step windows keeps decreasing
    double prev_min = HUGE_VAL;
    for (size_t b = 0; b + 20 <= curve.size(); b += 20) {
        double mn = HUGE_VAL;
        for (size_t i = b; i < b + 20; ++i) mn = std::min(mn, curve[i].loss);
        CHECK(mn < prev_min);
        prev_min = mn;
    }
}

TEST_CASE("stage two warm-starts from stage one") {
    PipelineConfig cfg = toy_pipeline_config(7);
    VlmPipeline model(cfg);
    SyntheticTask task = SyntheticTask::memorization(cfg, 32, 4, 99);

    StageConfig stage1 = StageConfig::pretrain_defaults();
    stage1.total_steps = 50;
    stage1.batch = 32;
    std::vector<StepRecord> c1 = run_stage(model, stage1, task);

    StageConfig stage2 = StageConfig::multitask_defaults();
    stage2.total_steps = 50;
    stage2.batch = 32;
    std::vector<StepRecord> c2 = run_stage(model, stage2, task);
    CHECK(c2.front().loss <= c1.front().loss);
}

TEST_CASE("loss curves serialize as csv") {
    std::vector<StepRecord> curve{{0, 0.0, 0.0, 3.5}, {1, 5e-4, 1e-5, 3.25}};
    const std::string csv = curve_to_csv(curve);
    CHECK(csv.find("step,lr_projector,lr_base,loss\n") == 0);
    CHECK(csv.find("0,0,0,3.5\n") != std::string::npos);
    CHECK(csv.find("1,5e-04,1e-05,3.25\n") != std::string::npos);
}
