#pragma once

#include "tinyvlm/ops.hpp"
#include "tinyvlm/tensor.hpp"

#include "json.hpp"

#include <map>
#include <string>
#include <vector>

namespace tinyvlm {

// The five connector architectures. All of them start with the same
// two-pointwise-conv MLP; they differ in how (and whether) they cut the
// token count and re-inject position information afterwards.
enum class ProjectorVariant {
    Mlp2,         // PW -> GELU -> PW, no token reduction
    Ldpv1,        // MLP + residual [DW PW GELU PW] block + stride-2 [DW PW] block
    AvgPoolOnly,  // MLP + 2x2 average pooling
    LearnablePe,  // MLP + pooling + trainable positional table
    Ldpv2,        // MLP + pooling + residual depthwise PEG
};

const char* to_string(ProjectorVariant v);
ProjectorVariant projector_variant_from_string(const std::string& s);

struct ProjectorSpec {
    ProjectorVariant variant = ProjectorVariant::Ldpv2;
    size_t d_v = 1024;      // vision feature width
    size_t d_t = 2048;      // language embedding width
    size_t grid_side = 24;  // sqrt of the incoming token count
    size_t rho = 2;         // pooling kernel
    uint64_t seed = 0;

    void validate() const;
    size_t tokens_in() const { return grid_side * grid_side; }
    size_t tokens_out() const;
    bool reduces_tokens() const { return variant != ProjectorVariant::Mlp2; }

    nlohmann::json to_json() const;
    static ProjectorSpec from_json(const nlohmann::json& j);
    static ProjectorSpec load(const std::string& path);
};

struct Param {
    std::string name;
    Tensor value;
    bool trainable = true;
};

using GradMap = std::map<std::string, Tensor>;
void accumulate_grad(GradMap& grads, const std::string& name, const Tensor& g);

struct ProjectorTape {
    Tensor grid_in, pw1_out, act, mlp_out;              // shared MLP front
    Tensor pooled;                                      // pooled variants
    Tensor res_dw, res_pw1, res_act, res_sum, down_dw;  // Ldpv1 trailing path
};

class Projector {
public:
    const ProjectorSpec& spec() const { return spec_; }
    const std::vector<Param>& params() const { return params_; }
    std::vector<Param>& params() { return params_; }
    size_t param_count() const;
    const Tensor& param(const std::string& name) const;
    Tensor& param(const std::string& name);

    // tokens: [grid_side^2, d_v] -> [tokens_out, d_t]
    Tensor forward(const Tensor& tokens) const;
    Tensor forward(const Tensor& tokens, ProjectorTape& tape) const;
    // upstream: [tokens_out, d_t]; accumulates parameter grads by name and
    // returns the gradient w.r.t. the input tokens.
    Tensor backward(const ProjectorTape& tape, const Tensor& upstream, GradMap& grads) const;

    // directory of TNSR files plus a JSON manifest
    void save_params(const std::string& dir) const;
    void load_params(const std::string& dir);

private:
    friend Projector build_projector(const ProjectorSpec& spec);
    ProjectorSpec spec_;
    std::vector<Param> params_;
};

Projector build_projector(const ProjectorSpec& spec);

// raster-order sequence<->grid adapters; token i maps to
// (i div side, i mod side)
Tensor tokens_to_grid(const Tensor& tokens);
Tensor grid_to_tokens(const Tensor& grid);

}  // namespace tinyvlm
