#include "tinyvlm/train.hpp"

#include <charconv>
#include <cmath>
#include <fstream>

namespace tinyvlm {

using nlohmann::json;

void StageConfig::validate() const {
    if (name != "pretrain" && name != "multitask") {
        throw std::invalid_argument("stage name must be \"pretrain\" or \"multitask\", got \"" +
                                    name + "\"");
    }
    if (!(warmup_ratio >= 0.0) || warmup_ratio >= 1.0) {
        throw std::invalid_argument("warmup_ratio must be in [0, 1)");
    }
    if (total_steps < 1) throw std::invalid_argument("total_steps must be >= 1");
    if (!(peak_lr_projector > 0.0) || !(peak_lr_base > 0.0)) {
        throw std::invalid_argument("peak learning rates must be positive");
    }
    if (batch < 1) throw std::invalid_argument("batch must be >= 1");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
    if (warmup_steps() >= total_steps) {
        throw std::invalid_argument("warmup (" + std::to_string(warmup_steps()) +
                                    " steps) consumes the whole run of " +
                                    std::to_string(total_steps) + " steps");
    }
}

size_t StageConfig::warmup_steps() const {
    return static_cast<size_t>(
        std::ceil(warmup_ratio * static_cast<double>(total_steps)));
}

json StageConfig::to_json() const {
    return json{{"name", name},
                {"trainable",
                 {{"vision", train_vision}, {"projector", train_projector}, {"lm", train_lm}}},
                {"peak_lr_projector", peak_lr_projector},
                {"peak_lr_base", peak_lr_base},
                {"warmup_ratio", warmup_ratio},
                {"total_steps", total_steps},
                {"batch", batch},
                {"weight_decay", weight_decay}};
}

StageConfig StageConfig::from_json(const json& j) {
    StageConfig c;
    c.name = j.at("name").get<std::string>();
    const auto& t = j.at("trainable");
    c.train_vision = t.at("vision").get<bool>();
    c.train_projector = t.at("projector").get<bool>();
    c.train_lm = t.at("lm").get<bool>();
    c.peak_lr_projector = j.at("peak_lr_projector").get<double>();
    c.peak_lr_base = j.at("peak_lr_base").get<double>();
    c.warmup_ratio = j.value("warmup_ratio", 0.03);
    c.total_steps = j.at("total_steps").get<size_t>();
    c.batch = j.value("batch", size_t{8});
    c.weight_decay = j.value("weight_decay", 0.0);
    c.validate();
    return c;
}

StageConfig StageConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    return from_json(json::parse(f));
}

StageConfig StageConfig::pretrain_defaults() {
    StageConfig c;
    c.name = "pretrain";
    c.peak_lr_projector = 1e-3;
    c.peak_lr_base = 2e-5;
    return c;
}

StageConfig StageConfig::multitask_defaults() {
    StageConfig c;
    c.name = "multitask";
    c.peak_lr_projector = 4e-5;
    c.peak_lr_base = 4e-5;
    return c;
}

double lr_at(size_t step, const StageConfig& cfg, double peak) {
    if (step > cfg.total_steps) {
        throw std::invalid_argument("step " + std::to_string(step) + " out of range [0, " +
                                    std::to_string(cfg.total_steps) + "]");
    }
    const size_t warmup = cfg.warmup_steps();
    if (step <= warmup && warmup > 0) {
        return peak * static_cast<double>(step) / static_cast<double>(warmup);
    }
    const double t = static_cast<double>(step - warmup) /
                     static_cast<double>(cfg.total_steps - warmup);
    return peak * 0.5 * (1.0 + std::cos(M_PI * t));
}

void optimizer_step(const std::vector<Param*>& params, const GradMap& grads,
                    OptimizerState& state, double lr, double weight_decay) {
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (Param* p : params) {
        const auto git = grads.find(p->name);
        if (git != grads.end() && !git->second.same_shape(p->value)) {
            throw std::invalid_argument("grad shape " + shape_str(git->second.shape()) +
                                        " does not match param " + p->name + " shape " +
                                        shape_str(p->value.shape()));
        }
        auto mit = state.moments.find(p->name);
        if (mit == state.moments.end()) {
            mit = state.moments
                      .emplace(p->name, AdamMoments{Tensor(p->value.shape()),
                                                    Tensor(p->value.shape())})
                      .first;
        }
        AdamMoments& mom = mit->second;
        Tensor& theta = p->value;
        for (size_t i = 0; i < theta.numel(); ++i) {
            const double g = git != grads.end() ? git->second[i] : 0.0;
            mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g;
            mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g * g;
            const double mhat = mom.m[i] / bc1;
            const double vhat = mom.v[i] / bc2;
            theta[i] -= lr * (mhat / (std::sqrt(vhat) + state.eps) + weight_decay * theta[i]);
        }
    }
}

SyntheticTask SyntheticTask::memorization(const PipelineConfig& cfg, size_t n_samples,
                                          size_t response_len, uint64_t seed) {
    if (n_samples < 1 || response_len < 1) {
        throw std::invalid_argument("memorization task needs samples and a response length");
    }
    if (cfg.lm.vocab < 3) throw std::invalid_argument("memorization task needs vocab >= 3");
    SyntheticTask task;
    task.bos_id = 1;
    Rng rng(seed);
    const size_t side = cfg.vision.image_side;
    for (size_t i = 0; i < n_samples; ++i) {
        TrainSample s;
        s.image = Tensor({side, side, 3});
        for (size_t j = 0; j < s.image.numel(); ++j) s.image[j] = rng.uniform(-1.0, 1.0);
        for (size_t j = 0; j < response_len; ++j) {
            s.response.push_back(2 + static_cast<int64_t>(rng.next_below(cfg.lm.vocab - 2)));
        }
        task.samples.push_back(std::move(s));
    }
    return task;
}

double sample_loss_and_grads(const VlmPipeline& model, const TrainSample& sample,
                             int64_t bos_id, PipelineGrads* grads, bool vision_grads) {
    EncoderTape vtape;
    Tensor f_v = (grads && vision_grads) ? model.vision().encode(sample.image, vtape)
                                         : model.vision().encode(sample.image);
    ProjectorTape ptape;
    Tensor h_v = model.projector().forward(f_v, ptape);

    std::vector<int64_t> text_in{bos_id};
    for (size_t i = 0; i + 1 < sample.response.size(); ++i) text_in.push_back(sample.response[i]);
    Tensor h_q = model.lm().embed_text(text_in);
    TokenSequence seq = concat_multimodal(h_v, h_q, text_in);

    LmTape ltape;
    Tensor all_logits = model.lm().logits(seq, ltape);
    const size_t nv = h_v.extent(0);
    const size_t k = sample.response.size();
    const size_t vocab = model.lm().config().vocab;
    Tensor resp_logits({k, vocab});
    for (size_t i = 0; i < k * vocab; ++i) resp_logits[i] = all_logits[nv * vocab + i];
    const double loss = ops::cross_entropy(resp_logits, sample.response);
    if (!grads) return loss;

    Tensor dresp = ops::cross_entropy_vjp(resp_logits, sample.response, 1.0);
    Tensor dlogits(all_logits.shape());
    for (size_t i = 0; i < k * vocab; ++i) dlogits[nv * vocab + i] = dresp[i];
    Tensor dembeddings = model.lm().backward(ltape, dlogits, grads->base);

    Tensor dvisual({nv, model.lm().config().d_t});
    for (size_t i = 0; i < dvisual.numel(); ++i) dvisual[i] = dembeddings[i];
    Tensor df_v = model.projector().backward(ptape, dvisual, grads->projector);
    if (vision_grads) model.vision().backward(vtape, df_v, grads->base);
    return loss;
}

double eval_loss(const VlmPipeline& model, const SyntheticTask& task) {
    if (task.samples.empty()) throw std::invalid_argument("task has no samples");
    double total = 0;
    for (const TrainSample& s : task.samples) {
        total += sample_loss_and_grads(model, s, task.bos_id, nullptr, false);
    }
    return total / static_cast<double>(task.samples.size());
}

std::vector<StepRecord> run_stage(VlmPipeline& model, const StageConfig& cfg,
                                  const SyntheticTask& task) {
    cfg.validate();
    if (task.samples.empty()) throw std::invalid_argument("task has no samples");

    std::vector<Param*> projector_group;
    if (cfg.train_projector) {
        for (Param& p : model.projector().params()) {
            if (p.trainable) projector_group.push_back(&p);
        }
    }
    std::vector<Param*> base_group;
    if (cfg.train_lm) {
        for (Param& p : model.lm().params()) {
            if (p.trainable) base_group.push_back(&p);
        }
    }
    bool vision_grads = false;
    if (cfg.train_vision) {
        for (Param& p : model.vision().params()) {
            if (p.trainable) {
                base_group.push_back(&p);
                vision_grads = true;
            }
        }
    }
    if (projector_group.empty() && base_group.empty()) {
        throw std::invalid_argument("nothing trainable: all components are frozen");
    }

    OptimizerState projector_state, base_state;
    std::vector<StepRecord> curve;
    curve.reserve(cfg.total_steps);
    for (size_t step = 0; step < cfg.total_steps; ++step) {
        const double lr_p = lr_at(step, cfg, cfg.peak_lr_projector);
        const double lr_b = lr_at(step, cfg, cfg.peak_lr_base);
        PipelineGrads grads;
        double loss_sum = 0;
        for (size_t b = 0; b < cfg.batch; ++b) {
            const TrainSample& s =
                task.samples[(step * cfg.batch + b) % task.samples.size()];
            loss_sum += sample_loss_and_grads(model, s, task.bos_id, &grads, vision_grads);
        }
        const double inv_batch = 1.0 / static_cast<double>(cfg.batch);
        for (auto& [name, g] : grads.projector) {
            for (size_t i = 0; i < g.numel(); ++i) g[i] *= inv_batch;
        }
        for (auto& [name, g] : grads.base) {
            for (size_t i = 0; i < g.numel(); ++i) g[i] *= inv_batch;
        }
        if (!projector_group.empty()) {
            optimizer_step(projector_group, grads.projector, projector_state, lr_p,
                           cfg.weight_decay);
        }
        if (!base_group.empty()) {
            optimizer_step(base_group, grads.base, base_state, lr_b, cfg.weight_decay);
        }
        curve.push_back({step, lr_p, lr_b, loss_sum * inv_batch});
    }
    return curve;
}

static std::string fmt_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string curve_to_csv(const std::vector<StepRecord>& curve) {
    std::string out = "step,lr_projector,lr_base,loss\n";
    for (const StepRecord& r : curve) {
        out += std::to_string(r.step);
        out += ',';
        out += fmt_double(r.lr_projector);
        out += ',';
        out += fmt_double(r.lr_base);
        out += ',';
        out += fmt_double(r.loss);
        out += '\n';
    }
    return out;
}

PipelineConfig toy_pipeline_config(uint64_t seed) {
    PipelineConfig cfg;
    cfg.vision = VisionStubConfig{16, 4, 12, 1, seed, true};
    cfg.projector = ProjectorSpec{ProjectorVariant::Ldpv2, 12, 32, 4, 2, seed + 1};
    cfg.lm = ToyLMConfig{32, 32, 2, 4, 24, seed + 2};
    return cfg;
}

}  // namespace tinyvlm
