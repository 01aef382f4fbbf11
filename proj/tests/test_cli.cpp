// End-to-end checks of the command-line surface: exit codes, output formats
// and rerun determinism. Runs the installed binary via popen.

#include "tinyvlm/tensor.hpp"

#include "json.hpp"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int checks_failed = 0;

#define EXPECT(cond)                                                              \
    do {                                                                          \
        if (!(cond)) {                                                            \
            ++checks_failed;                                                      \
            std::cerr << "FAILED: " << #cond << " at " << __FILE__ << ":"         \
                      << __LINE__ << "\n";                                        \
        }                                                                         \
    } while (0)

struct CmdResult {
    int code = -1;
    std::string out;
};

CmdResult run_cli(const std::string& args) {
    const std::string cmd = std::string(TINYVLM_CLI_PATH) + " " + args + " 2>/dev/null";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return {};
    CmdResult r;
    char buf[4096];
    size_t n;
    while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string config(const std::string& name) {
    return (fs::path(TINYVLM_CONFIG_DIR) / name).string();
}

std::string tmp(const std::string& name) {
    return (fs::temp_directory_path() / name).string();
}

}  // namespace

int main() {
    // params: table-scale counts and two-decimal formatting
    CmdResult params = run_cli("params --spec " + config("ldpv2.json"));
    EXPECT(params.code == 0);
    EXPECT(params.out.find("6316032") != std::string::npos);
    EXPECT(params.out.find("6.32M") != std::string::npos);
    EXPECT(params.out.find("peg.weight") != std::string::npos);
    CmdResult params2 = run_cli("params --spec " + config("ldpv2.json"));
    EXPECT(params2.out == params.out);  // byte-identical rerun

    EXPECT(run_cli("params --spec " + tmp("missing_spec.json")).code == 2);
    {
        std::ofstream bad(tmp("bad_spec.json"));
        bad << "{ not json";
    }
    EXPECT(run_cli("params --spec " + tmp("bad_spec.json")).code == 1);

    // score: recomputed averages over the bundled table
    CmdResult score = run_cli("score --rows " + config("scores_table4.csv"));
    EXPECT(score.code == 0);
    EXPECT(score.out.find("MobileVLM-V2-1.7B,59.3,66.7,52.1,84.3,1302.8,57.7,64.2\n") !=
           std::string::npos);
    EXPECT(score.out.find("LLaVA-1.5-7B,62.0,66.8,58.2,85.9,1510.7,64.3,68.8\n") !=
           std::string::npos);
    EXPECT(score.out == run_cli("score --rows " + config("scores_table4.csv")).out);

    // forward: tiny spec, TNSR in, TNSR out, deterministic
    {
        std::ofstream spec(tmp("tiny_spec.json"));
        spec << R"({"variant":"LDPv2","d_v":6,"d_t":10,"grid_side":4,"rho":2,"seed":9})";
    }
    tinyvlm::Rng rng(77);
    tinyvlm::Tensor tokens({16, 6});
    for (size_t i = 0; i < tokens.numel(); ++i) tokens[i] = rng.uniform(-1, 1);
    tinyvlm::write_tnsr(tmp("tokens.tnsr"), tokens);
    const std::string fwd_args = "forward --spec " + tmp("tiny_spec.json") + " --input " +
                                 tmp("tokens.tnsr") + " --out " + tmp("projected.tnsr");
    EXPECT(run_cli(fwd_args).code == 0);
    tinyvlm::Tensor projected = tinyvlm::read_tnsr(tmp("projected.tnsr"));
    EXPECT(projected.shape() == (std::vector<size_t>{4, 10}));
    const std::vector<double> first = projected.values();
    EXPECT(run_cli(fwd_args).code == 0);
    EXPECT(tinyvlm::read_tnsr(tmp("projected.tnsr")).values() == first);

    // wrong-shaped input is a validation error
    tinyvlm::write_tnsr(tmp("tokens_bad.tnsr"), tinyvlm::Tensor({15, 6}));
    EXPECT(run_cli("forward --spec " + tmp("tiny_spec.json") + " --input " +
                   tmp("tokens_bad.tnsr") + " --out " + tmp("nope.tnsr"))
               .code == 1);

    // gradcheck
    EXPECT(run_cli("gradcheck --op gelu --seed 5").code == 0);
    CmdResult gc = run_cli("gradcheck --variant LDPv2 --seed 3");
    EXPECT(gc.code == 0);
    EXPECT(gc.out.find("ok") != std::string::npos);
    EXPECT(run_cli("gradcheck --op warp --seed 1").code == 1);

    // generate: valid json, deterministic ids
    CmdResult gen = run_cli("generate --config " + config("pipeline_toy.json") + " --prompt " +
                            config("prompt_demo.json"));
    EXPECT(gen.code == 0);
    json gj = json::parse(gen.out);
    EXPECT(gj.at("ids").size() == 12);
    EXPECT(gj.at("total_s").get<double>() > 0.0);
    EXPECT(gj.at("eval_avg_tokens_per_s").get<double>() > 0.0);
    CmdResult gen2 = run_cli("generate --config " + config("pipeline_toy.json") + " --prompt " +
                             config("prompt_demo.json"));
    EXPECT(json::parse(gen2.out).at("ids") == gj.at("ids"));

    // bench: small run, report fields present
    CmdResult bench = run_cli("bench --config " + config("pipeline_toy.json") +
                              " --n-out 16 --repeats 2 --label smoke");
    EXPECT(bench.code == 0);
    json bj = json::parse(bench.out);
    EXPECT(bj.at("label") == "smoke");
    EXPECT(bj.at("n_generated") == 16);
    EXPECT(bj.at("repeats") == 2);
    EXPECT(bj.at("eval_avg_tokens_per_s").get<double>() > 0.0);
    EXPECT(bj.at("per_repeat_s").size() == 2);

    // train-toy: writes the csv curve
    CmdResult train =
        run_cli("train-toy --stage pretrain --steps 8 --out " + tmp("curve_test.csv"));
    EXPECT(train.code == 0);
    {
        std::ifstream csv(tmp("curve_test.csv"));
        std::string header;
        std::getline(csv, header);
        EXPECT(header == "step,lr_projector,lr_base,loss");
        size_t rows = 0;
        std::string line;
        while (std::getline(csv, line)) {
            if (!line.empty()) ++rows;
        }
        EXPECT(rows == 8);
    }
    EXPECT(run_cli("train-toy --stage sideways --out " + tmp("curve_test.csv")).code == 1);

    // a stage described by a json file
    CmdResult staged = run_cli("train-toy --stage-config " + config("stage_pretrain.json") +
                               " --steps 5 --out " + tmp("curve_test.csv"));
    EXPECT(staged.code == 0);
    EXPECT(staged.out.find("stage pretrain") != std::string::npos);

    // bad invocations are parse errors
    EXPECT(run_cli("").code == 1);
    EXPECT(run_cli("params").code == 1);

    for (const char* f : {"missing_spec.json", "bad_spec.json", "tiny_spec.json", "tokens.tnsr",
                          "projected.tnsr", "tokens_bad.tnsr", "curve_test.csv"}) {
        std::error_code ec;
        fs::remove(tmp(f), ec);
    }

    if (checks_failed) {
        std::cerr << checks_failed << " cli check(s) failed\n";
        return 1;
    }
    std::puts("all cli checks passed");
    return 0;
}
