#include "tinyvlm/bench.hpp"
#include "tinyvlm/ops.hpp"
#include "tinyvlm/projector.hpp"
#include "tinyvlm/train.hpp"
#include "tinyvlm/vlm.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

using namespace tinyvlm;
using nlohmann::json;

namespace {

json load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    return json::parse(f);
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << text;
    if (!f) throw IoError("short write to " + path);
}

// ---- params ---------------------------------------------------------------

int cmd_params(const std::string& spec_path) {
    Projector p = build_projector(ProjectorSpec::load(spec_path));
    std::printf("%-16s %-14s %12s\n", "name", "shape", "params");
    for (const Param& prm : p.params()) {
        std::printf("%-16s %-14s %12zu\n", prm.name.c_str(),
                    shape_str(prm.value.shape()).c_str(), prm.value.numel());
    }
    std::printf("total: %zu (%s)\n", p.param_count(), format_millions(p.param_count()).c_str());
    return 0;
}

// ---- forward --------------------------------------------------------------

int cmd_forward(const std::string& spec_path, const std::string& input_path,
                const std::string& out_path) {
    Projector p = build_projector(ProjectorSpec::load(spec_path));
    Tensor tokens = read_tnsr(input_path);
    Tensor out = p.forward(tokens);
    write_tnsr(out_path, out);
    std::printf("%s -> %s tokens %s\n", shape_str(tokens.shape()).c_str(),
                shape_str(out.shape()).c_str(), out_path.c_str());
    return 0;
}

// ---- gradcheck ------------------------------------------------------------

Tensor random_tensor(Rng& rng, std::vector<size_t> shape, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

double weighted_sum(const Tensor& t, const Tensor& r) {
    double acc = 0;
    for (size_t i = 0; i < t.numel(); ++i) acc += t[i] * r[i];
    return acc;
}

double max_rel_err(const Tensor& a, const Tensor& b) {
    double m = 0;
    for (size_t i = 0; i < a.numel(); ++i) {
        const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), 1e-2});
        m = std::max(m, std::fabs(a[i] - b[i]) / denom);
    }
    return m;
}

constexpr double kGradTol = 1e-6;
constexpr double kGradEps = 1e-5;

double gradcheck_op(const std::string& name, uint64_t seed) {
    Rng rng(seed);
    if (name == "pointwise") {
        Tensor x = random_tensor(rng, {3, 4, 3}), w = random_tensor(rng, {5, 3});
        Tensor b = random_tensor(rng, {5}), r = random_tensor(rng, {3, 4, 5}, 0.5, 1.5);
        ops::ConvGrads g = ops::conv2d_pointwise_vjp(x, w, r);
        double err = max_rel_err(g.dx, ops::finite_diff_grad([&](const Tensor& t) {
            return weighted_sum(ops::conv2d_pointwise(t, w, b), r); }, x, kGradEps));
        err = std::max(err, max_rel_err(g.dw, ops::finite_diff_grad([&](const Tensor& t) {
            return weighted_sum(ops::conv2d_pointwise(x, t, b), r); }, w, kGradEps)));
        err = std::max(err, max_rel_err(g.db, ops::finite_diff_grad([&](const Tensor& t) {
            return weighted_sum(ops::conv2d_pointwise(x, w, t), r); }, b, kGradEps)));
        return err;
    }
    if (name == "depthwise") {
        Tensor x = random_tensor(rng, {5, 5, 2}), w = random_tensor(rng, {2, 3, 3});
        Tensor b = random_tensor(rng, {2});
        double err = 0;
        for (auto [stride, pad] : std::vector<std::pair<size_t, size_t>>{{1, 1}, {2, 1}}) {
            Tensor out = ops::conv2d_depthwise(x, w, b, stride, pad);
            Tensor r = random_tensor(rng, out.shape(), 0.5, 1.5);
            ops::ConvGrads g = ops::conv2d_depthwise_vjp(x, w, r, stride, pad);
            err = std::max(err, max_rel_err(g.dx, ops::finite_diff_grad([&](const Tensor& t) {
                return weighted_sum(ops::conv2d_depthwise(t, w, b, stride, pad), r); }, x, kGradEps)));
            err = std::max(err, max_rel_err(g.dw, ops::finite_diff_grad([&](const Tensor& t) {
                return weighted_sum(ops::conv2d_depthwise(x, t, b, stride, pad), r); }, w, kGradEps)));
            err = std::max(err, max_rel_err(g.db, ops::finite_diff_grad([&](const Tensor& t) {
                return weighted_sum(ops::conv2d_depthwise(x, w, t, stride, pad), r); }, b, kGradEps)));
        }
        return err;
    }
    if (name == "gelu") {
        Tensor x = random_tensor(rng, {4, 6}, -3.0, 3.0);
        Tensor r = random_tensor(rng, {4, 6}, 0.5, 1.5);
        return max_rel_err(ops::gelu_vjp(x, r), ops::finite_diff_grad([&](const Tensor& t) {
            return weighted_sum(ops::gelu(t), r); }, x, kGradEps));
    }
    if (name == "avgpool") {
        Tensor x = random_tensor(rng, {4, 6, 3});
        Tensor r = random_tensor(rng, {2, 3, 3}, 0.5, 1.5);
        return max_rel_err(ops::avgpool2d_vjp(x.shape(), 2, r),
                           ops::finite_diff_grad([&](const Tensor& t) {
                               return weighted_sum(ops::avgpool2d(t, 2), r); }, x, kGradEps));
    }
    if (name == "linear") {
        Tensor x = random_tensor(rng, {3, 4}), w = random_tensor(rng, {5, 4});
        Tensor b = random_tensor(rng, {5}), r = random_tensor(rng, {3, 5}, 0.5, 1.5);
        ops::LinearGrads g = ops::linear_vjp(x, w, r);
        double err = max_rel_err(g.dx, ops::finite_diff_grad([&](const Tensor& t) {
            return weighted_sum(ops::linear(t, w, b), r); }, x, kGradEps));
        err = std::max(err, max_rel_err(g.dw, ops::finite_diff_grad([&](const Tensor& t) {
            return weighted_sum(ops::linear(x, t, b), r); }, w, kGradEps)));
        err = std::max(err, max_rel_err(g.db, ops::finite_diff_grad([&](const Tensor& t) {
            return weighted_sum(ops::linear(x, w, t), r); }, b, kGradEps)));
        return err;
    }
    if (name == "softmax_xent") {
        Tensor logits = random_tensor(rng, {4, 7}, -2.0, 2.0);
        std::vector<int64_t> targets;
        for (int i = 0; i < 4; ++i) targets.push_back(static_cast<int64_t>(rng.next_below(7)));
        Tensor d = ops::cross_entropy_vjp(logits, targets, 1.0);
        return max_rel_err(d, ops::finite_diff_grad([&](const Tensor& t) {
            return ops::cross_entropy(t, targets); }, logits, kGradEps));
    }
    throw std::invalid_argument("unknown op \"" + name +
                                "\" (pointwise, depthwise, gelu, avgpool, linear, softmax_xent)");
}

double gradcheck_variant(const std::string& name, uint64_t seed) {
    ProjectorSpec spec{projector_variant_from_string(name), 6, 10, 4, 2, seed};
    Projector p = build_projector(spec);
    Rng rng(seed ^ 0x9e3779b9);
    Tensor tokens = random_tensor(rng, {16, 6});
    Tensor r = random_tensor(rng, {spec.tokens_out(), 10}, 0.5, 1.5);
    ProjectorTape tape;
    p.forward(tokens, tape);
    GradMap grads;
    Tensor d_tokens = p.backward(tape, r, grads);

    double err = 0;
    for (const Param& prm : p.params()) {
        Tensor fd = ops::finite_diff_grad(
            [&](const Tensor& t) {
                Projector q = build_projector(spec);
                for (size_t i = 0; i < p.params().size(); ++i) {
                    q.params()[i].value = p.params()[i].value;
                }
                q.param(prm.name) = t;
                return weighted_sum(q.forward(tokens), r);
            },
            prm.value, kGradEps);
        err = std::max(err, max_rel_err(grads.at(prm.name), fd));
    }
    err = std::max(err, max_rel_err(d_tokens, ops::finite_diff_grad([&](const Tensor& t) {
        return weighted_sum(p.forward(t), r); }, tokens, kGradEps)));
    return err;
}

int cmd_gradcheck(const std::string& op, const std::string& variant, uint64_t seed) {
    std::vector<std::pair<std::string, double>> results;
    if (!op.empty()) {
        results.emplace_back("op " + op, gradcheck_op(op, seed));
    } else if (!variant.empty()) {
        results.emplace_back("variant " + variant, gradcheck_variant(variant, seed));
    } else {
        for (const char* o :
             {"pointwise", "depthwise", "gelu", "avgpool", "linear", "softmax_xent"}) {
            results.emplace_back(std::string("op ") + o, gradcheck_op(o, seed));
        }
        for (const char* v : {"MLP2", "LDPv1", "AvgPoolOnly", "LearnablePE", "LDPv2"}) {
            results.emplace_back(std::string("variant ") + v, gradcheck_variant(v, seed));
        }
    }
    bool all_ok = true;
    for (const auto& [label, err] : results) {
        const bool ok = err <= kGradTol;
        all_ok = all_ok && ok;
        std::printf("%-22s max rel err %.3e (tol %.0e) %s\n", label.c_str(), err, kGradTol,
                    ok ? "ok" : "FAILED");
    }
    std::printf("gradcheck: %zu check%s %s\n", results.size(), results.size() == 1 ? "" : "s",
                all_ok ? "passed" : "FAILED");
    return all_ok ? 0 : 1;
}

// ---- generate / bench -----------------------------------------------------

TokenSequence prompt_from_json(const VlmPipeline& pipeline, const json& j, size_t& max_new) {
    Tensor image;
    if (j.contains("image") && !j.at("image").is_null()) {
        image = read_tnsr(j.at("image").get<std::string>());
    }
    std::vector<int64_t> text_ids;
    if (j.contains("text_ids")) text_ids = j.at("text_ids").get<std::vector<int64_t>>();
    max_new = j.value("max_new", size_t{16});
    return pipeline.build_prompt(image, text_ids);
}

int cmd_generate(const std::string& config_path, const std::string& prompt_path) {
    VlmPipeline pipeline(PipelineConfig::load(config_path));
    size_t max_new = 0;
    TokenSequence prompt = prompt_from_json(pipeline, load_json(prompt_path), max_new);
    if (max_new < 1) throw std::invalid_argument("max_new must be >= 1");

    PipelineGenerator gen(pipeline, prompt);
    if (gen.max_new_tokens() < max_new) {
        throw std::invalid_argument("prompt of " + std::to_string(prompt.length()) +
                                    " tokens plus " + std::to_string(max_new) +
                                    " new tokens overflows max_seq " +
                                    std::to_string(pipeline.lm().config().max_seq));
    }
    using clock = std::chrono::steady_clock;
    gen.start();
    const auto t0 = clock::now();
    for (size_t i = 0; i < max_new; ++i) gen.step();
    const auto t1 = clock::now();
    const double total_s = std::chrono::duration<double>(t1 - t0).count();

    json out{{"ids", gen.ids()},
             {"eval_avg_tokens_per_s", static_cast<double>(max_new) / total_s},
             {"total_s", total_s}};
    std::cout << out.dump(2) << '\n';
    return 0;
}

TokenSequence default_bench_prompt(const VlmPipeline& pipeline) {
    const VisionStubConfig& v = pipeline.vision().config();
    Rng rng(0);
    Tensor image({v.image_side, v.image_side, 3});
    for (size_t i = 0; i < image.numel(); ++i) image[i] = rng.uniform(-1.0, 1.0);
    return pipeline.build_prompt(image, {1});
}

int cmd_bench(const std::string& config_path, const std::string& prompt_path, size_t n_out,
              size_t repeats, const std::string& label) {
    VlmPipeline pipeline(PipelineConfig::load(config_path));
    TokenSequence prompt;
    if (prompt_path.empty()) {
        prompt = default_bench_prompt(pipeline);
    } else {
        size_t ignored = 0;
        prompt = prompt_from_json(pipeline, load_json(prompt_path), ignored);
    }
    PipelineGenerator gen(pipeline, prompt);
    BenchReport report = measure_generation(gen, n_out, repeats, label);
    std::cout << report.to_json().dump(2) << '\n';
    return 0;
}

// ---- score ----------------------------------------------------------------

int cmd_score(const std::string& rows_path) {
    std::ifstream f(rows_path);
    if (!f) throw IoError("cannot open " + rows_path);
    std::string line;
    if (!std::getline(f, line)) throw std::invalid_argument(rows_path + " is empty");
    if (line.rfind("label,", 0) != 0) {
        throw std::invalid_argument("first line must be a header starting with \"label,\"");
    }
    std::vector<ReportRow> rows;
    size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() < 7) {
            throw std::invalid_argument("line " + std::to_string(lineno) +
                                        ": expected label plus six scores");
        }
        ReportRow row;
        row.label = fields[0];
        double* dst[6] = {&row.scores.gqa,  &row.scores.sqa_i, &row.scores.vqa_t,
                          &row.scores.pope, &row.scores.mme_p, &row.scores.mmb_dev};
        for (int i = 0; i < 6; ++i) {
            try {
                *dst[i] = std::stod(fields[i + 1]);
            } catch (const std::exception&) {
                throw std::invalid_argument("line " + std::to_string(lineno) +
                                            ": bad number \"" + fields[i + 1] + "\"");
            }
        }
        rows.push_back(std::move(row));  // any further columns (e.g. a stale avg) are ignored
    }
    std::cout << report_table(rows);
    return 0;
}

// ---- train-toy ------------------------------------------------------------

int cmd_train_toy(const std::string& stage_name, const std::string& stage_config_path,
                  const std::string& out_path, size_t steps, double lr_projector,
                  double lr_base, uint64_t seed) {
    PipelineConfig cfg = toy_pipeline_config(seed);
    VlmPipeline model(cfg);
    SyntheticTask task = SyntheticTask::memorization(cfg, 32, 4, seed + 17);

    auto configure = [&](StageConfig stage) {
        if (steps) stage.total_steps = steps;
        stage.batch = 32;
        if (lr_projector > 0) stage.peak_lr_projector = lr_projector;
        if (lr_base > 0) stage.peak_lr_base = lr_base;
        return stage;
    };

    std::vector<StepRecord> curve;
    auto run_one = [&](const StageConfig& stage) {
        std::vector<StepRecord> c = run_stage(model, stage, task);
        std::printf("stage %-9s steps %-5zu loss %.4f -> %.4f\n", stage.name.c_str(),
                    stage.total_steps, c.front().loss, c.back().loss);
        const size_t offset = curve.size();
        for (StepRecord r : c) {
            r.step += offset;
            curve.push_back(r);
        }
    };

    if (!stage_config_path.empty()) {
        run_one(configure(StageConfig::load(stage_config_path)));
    } else {
        if (stage_name == "pretrain" || stage_name == "both") {
            run_one(configure(StageConfig::pretrain_defaults()));
        }
        if (stage_name == "multitask" || stage_name == "both") {
            run_one(configure(StageConfig::multitask_defaults()));
        }
        if (curve.empty()) {
            throw std::invalid_argument("stage must be pretrain, multitask or both, got \"" +
                                        stage_name + "\"");
        }
    }
    write_text(out_path, curve_to_csv(curve));
    std::printf("curve written to %s\n", out_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy vision-language pipeline built around lightweight downsample projectors"};
    app.require_subcommand(1);
    std::function<int()> run;

    auto* params = app.add_subcommand("params", "per-tensor parameter report for a projector spec");
    std::string spec_path;
    params->add_option("--spec", spec_path, "projector spec json")->required();
    params->callback([&] { run = [&] { return cmd_params(spec_path); }; });

    auto* forward = app.add_subcommand("forward", "run a projector over a TNSR token matrix");
    std::string fwd_spec, fwd_input, fwd_out;
    forward->add_option("--spec", fwd_spec, "projector spec json")->required();
    forward->add_option("--input", fwd_input, "input TNSR, [tokens, d_v]")->required();
    forward->add_option("--out", fwd_out, "output TNSR path")->required();
    forward->callback([&] { run = [&] { return cmd_forward(fwd_spec, fwd_input, fwd_out); }; });

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    std::string gc_op, gc_variant;
    uint64_t gc_seed = 0;
    auto* op_opt = gradcheck->add_option("--op", gc_op, "single op to check");
    gradcheck->add_option("--variant", gc_variant, "single projector variant to check")
        ->excludes(op_opt);
    gradcheck->add_option("--seed", gc_seed, "rng seed");
    gradcheck->callback([&] { run = [&] { return cmd_gradcheck(gc_op, gc_variant, gc_seed); }; });

    auto* generate = app.add_subcommand("generate", "greedy decoding over a prompt");
    std::string gen_config, gen_prompt;
    generate->add_option("--config", gen_config, "pipeline config json")->required();
    generate->add_option("--prompt", gen_prompt, "prompt json")->required();
    generate->callback([&] { run = [&] { return cmd_generate(gen_config, gen_prompt); }; });

    auto* bench = app.add_subcommand("bench", "timed generation, tokens per second");
    std::string bench_config, bench_prompt, bench_label = "toy";
    size_t bench_n_out = kDefaultBenchTokens, bench_repeats = 3;
    bench->add_option("--config", bench_config, "pipeline config json")->required();
    bench->add_option("--prompt", bench_prompt, "prompt json (default: built-in image prompt)");
    bench->add_option("--n-out", bench_n_out, "output tokens per repeat");
    bench->add_option("--repeats", bench_repeats, "timed repeats");
    bench->add_option("--label", bench_label, "report label");
    bench->callback([&] {
        run = [&] { return cmd_bench(bench_config, bench_prompt, bench_n_out, bench_repeats,
                                     bench_label); };
    });

    auto* score = app.add_subcommand("score", "recompute benchmark averages from a csv");
    std::string rows_path;
    score->add_option("--rows", rows_path, "csv: label,gqa,sqa_i,vqa_t,pope,mme_p,mmb_dev")
        ->required();
    score->callback([&] { run = [&] { return cmd_score(rows_path); }; });

    auto* train = app.add_subcommand("train-toy", "two-stage training on the synthetic task");
    std::string stage = "both", stage_config, train_out = "curve.csv";
    size_t train_steps = 0;
    double train_lr_p = 0, train_lr_b = 0;
    uint64_t train_seed = 7;
    auto* stage_opt = train->add_option("--stage", stage, "pretrain, multitask or both");
    train->add_option("--stage-config", stage_config, "StageConfig json (overrides --stage)")
        ->excludes(stage_opt);
    train->add_option("--out", train_out, "csv output path")->required();
    train->add_option("--steps", train_steps, "steps per stage (0 = stage default)");
    train->add_option("--lr-projector", train_lr_p, "override peak projector lr");
    train->add_option("--lr-base", train_lr_b, "override peak base lr");
    train->add_option("--seed", train_seed, "rng seed");
    train->callback([&] {
        run = [&] {
            return cmd_train_toy(stage, stage_config, train_out, train_steps, train_lr_p,
                                 train_lr_b, train_seed);
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        return run();
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
