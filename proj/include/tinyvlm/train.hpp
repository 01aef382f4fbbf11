#pragma once

#include "tinyvlm/vlm.hpp"

namespace tinyvlm {

/// One training stage: which components update, the two peak learning rates
/// (projector group vs everything else), and the warmup + cosine schedule.
struct StageConfig {
    std::string name = "pretrain";  // "pretrain" or "multitask"
    bool train_vision = false;
    bool train_projector = true;
    bool train_lm = true;
    double peak_lr_projector = 1e-3;
    double peak_lr_base = 2e-5;
    double warmup_ratio = 0.03;
    size_t total_steps = 100;
    size_t batch = 8;
    double weight_decay = 0.0;

    void validate() const;
    size_t warmup_steps() const;  // ceil(warmup_ratio * total_steps)

    nlohmann::json to_json() const;
    static StageConfig from_json(const nlohmann::json& j);
    static StageConfig load(const std::string& path);
    static StageConfig pretrain_defaults();
    static StageConfig multitask_defaults();
};

// linear warmup to `peak` over warmup_steps, then cosine decay to 0 at
// total_steps; defined on steps 0..total_steps inclusive
double lr_at(size_t step, const StageConfig& cfg, double peak);

struct AdamMoments {
    Tensor m, v;
};

struct OptimizerState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step = 0;
    std::map<std::string, AdamMoments> moments;  // trainable params only
};

// decoupled weight decay: theta -= lr * (mhat/(sqrt(vhat)+eps) + wd*theta)
void optimizer_step(const std::vector<Param*>& params, const GradMap& grads,
                    OptimizerState& state, double lr, double weight_decay);

struct TrainSample {
    Tensor image;
    std::vector<int64_t> response;
};

struct SyntheticTask {
    std::vector<TrainSample> samples;
    int64_t bos_id = 1;
    // fixed random images paired with fixed short id sequences
    static SyntheticTask memorization(const PipelineConfig& cfg, size_t n_samples,
                                      size_t response_len, uint64_t seed);
};

struct PipelineGrads {
    GradMap projector;
    GradMap base;  // lm (+ vision when trained); names never collide
};

// mean cross-entropy over the text response positions of one sample;
// accumulates grads when given
double sample_loss_and_grads(const VlmPipeline& model, const TrainSample& sample,
                             int64_t bos_id, PipelineGrads* grads, bool vision_grads);
double eval_loss(const VlmPipeline& model, const SyntheticTask& task);

struct StepRecord {
    size_t step;
    double lr_projector;
    double lr_base;
    double loss;  // batch loss before this step's update
};

std::vector<StepRecord> run_stage(VlmPipeline& model, const StageConfig& cfg,
                                  const SyntheticTask& task);

std::string curve_to_csv(const std::vector<StepRecord>& curve);

// small configuration used by the train-toy CLI and the training tests
PipelineConfig toy_pipeline_config(uint64_t seed = 0);

}  // namespace tinyvlm
