#include "tinyvlm/projector.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

namespace tinyvlm {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(ProjectorVariant v) {
    switch (v) {
        case ProjectorVariant::Mlp2: return "MLP2";
        case ProjectorVariant::Ldpv1: return "LDPv1";
        case ProjectorVariant::AvgPoolOnly: return "AvgPoolOnly";
        case ProjectorVariant::LearnablePe: return "LearnablePE";
        case ProjectorVariant::Ldpv2: return "LDPv2";
    }
    return "?";
}

ProjectorVariant projector_variant_from_string(const std::string& s) {
    if (s == "MLP2") return ProjectorVariant::Mlp2;
    if (s == "LDPv1") return ProjectorVariant::Ldpv1;
    if (s == "AvgPoolOnly") return ProjectorVariant::AvgPoolOnly;
    if (s == "LearnablePE") return ProjectorVariant::LearnablePe;
    if (s == "LDPv2") return ProjectorVariant::Ldpv2;
    throw std::invalid_argument("unknown projector variant \"" + s + "\"");
}

void ProjectorSpec::validate() const {
    if (d_v < 1 || d_t < 1) throw std::invalid_argument("projector widths must be >= 1");
    if (grid_side < 1) throw std::invalid_argument("grid_side must be >= 1");
    if (rho < 1) throw std::invalid_argument("rho must be >= 1");
    const bool pooled = variant == ProjectorVariant::AvgPoolOnly ||
                        variant == ProjectorVariant::LearnablePe ||
                        variant == ProjectorVariant::Ldpv2;
    if (pooled && grid_side % rho != 0) {
        throw std::invalid_argument("grid_side " + std::to_string(grid_side) +
                                    " not divisible by rho " + std::to_string(rho));
    }
    if (variant == ProjectorVariant::Ldpv1 && grid_side % 2 != 0) {
        throw std::invalid_argument("LDPv1 needs an even grid_side for its stride-2 stage, got " +
                                    std::to_string(grid_side));
    }
}

size_t ProjectorSpec::tokens_out() const {
    switch (variant) {
        case ProjectorVariant::Mlp2:
            return tokens_in();
        case ProjectorVariant::Ldpv1:
            return tokens_in() / 4;
        case ProjectorVariant::AvgPoolOnly:
        case ProjectorVariant::LearnablePe:
        case ProjectorVariant::Ldpv2:
            return tokens_in() / (rho * rho);
    }
    return 0;
}

json ProjectorSpec::to_json() const {
    return json{{"variant", to_string(variant)}, {"d_v", d_v},   {"d_t", d_t},
                {"grid_side", grid_side},        {"rho", rho},   {"seed", seed}};
}

ProjectorSpec ProjectorSpec::from_json(const json& j) {
    ProjectorSpec s;
    s.variant = projector_variant_from_string(j.at("variant").get<std::string>());
    s.d_v = j.at("d_v").get<size_t>();
    s.d_t = j.at("d_t").get<size_t>();
    s.grid_side = j.at("grid_side").get<size_t>();
    s.rho = j.value("rho", size_t{2});
    s.seed = j.value("seed", uint64_t{0});
    s.validate();
    return s;
}

ProjectorSpec ProjectorSpec::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    json j = json::parse(f);
    return from_json(j);
}

void accumulate_grad(GradMap& grads, const std::string& name, const Tensor& g) {
    auto it = grads.find(name);
    if (it == grads.end()) {
        grads.emplace(name, g);
        return;
    }
    if (!it->second.same_shape(g)) {
        throw std::invalid_argument("grad shape " + shape_str(g.shape()) + " for " + name +
                                    " does not match accumulated shape " +
                                    shape_str(it->second.shape()));
    }
    for (size_t i = 0; i < g.numel(); ++i) it->second[i] += g[i];
}

Tensor tokens_to_grid(const Tensor& tokens) {
    if (tokens.rank() != 2) {
        throw std::invalid_argument("token matrix must be rank-2, got shape " +
                                    shape_str(tokens.shape()));
    }
    const size_t n = tokens.extent(0);
    const size_t side = static_cast<size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n) {
        throw std::invalid_argument("token count " + std::to_string(n) +
                                    " is not a perfect square");
    }
    return tokens.reshaped({side, side, tokens.extent(1)});
}

Tensor grid_to_tokens(const Tensor& grid) {
    if (grid.rank() != 3) {
        throw std::invalid_argument("grid must be rank-3, got shape " + shape_str(grid.shape()));
    }
    return grid.reshaped({grid.extent(0) * grid.extent(1), grid.extent(2)});
}

namespace {

Tensor uniform_init(Rng& rng, std::vector<size_t> shape, size_t fan_in) {
    const double limit = std::sqrt(1.0 / static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
    return t;
}

}  // namespace

Projector build_projector(const ProjectorSpec& spec) {
    spec.validate();
    Projector p;
    p.spec_ = spec;
    Rng rng(spec.seed);
    const size_t dv = spec.d_v, dt = spec.d_t;

    // Weight draws happen in declaration order, so variants sharing a prefix
    // of the architecture get identical tensors for the shared part.
    auto push_conv = [&](const std::string& name, size_t cout, size_t cin) {
        p.params_.push_back({name + ".weight", uniform_init(rng, {cout, cin}, cin), true});
        p.params_.push_back({name + ".bias", Tensor({cout}), true});
    };
    auto push_dw = [&](const std::string& name, size_t c) {
        p.params_.push_back({name + ".weight", uniform_init(rng, {c, 3, 3}, 9), true});
        p.params_.push_back({name + ".bias", Tensor({c}), true});
    };

    push_conv("pw1", dt, dv);
    push_conv("pw2", dt, dt);
    switch (spec.variant) {
        case ProjectorVariant::Mlp2:
        case ProjectorVariant::AvgPoolOnly:
            break;
        case ProjectorVariant::LearnablePe: {
            const size_t pooled_side = spec.grid_side / spec.rho;
            p.params_.push_back({"pos_embed", Tensor({pooled_side * pooled_side, dt}), true});
            break;
        }
        case ProjectorVariant::Ldpv2:
            push_dw("peg", dt);
            break;
        case ProjectorVariant::Ldpv1:
            push_dw("res.dw", dt);
            push_conv("res.pw1", dt, dt);
            push_conv("res.pw2", dt, dt);
            push_dw("down.dw", dt);
            push_conv("down.pw", dt, dt);
            break;
    }
    return p;
}

size_t Projector::param_count() const {
    size_t n = 0;
    for (const Param& p : params_) n += p.value.numel();
    return n;
}

const Tensor& Projector::param(const std::string& name) const {
    for (const Param& p : params_) {
        if (p.name == name) return p.value;
    }
    throw std::invalid_argument("no projector parameter named \"" + name + "\"");
}

Tensor& Projector::param(const std::string& name) {
    for (Param& p : params_) {
        if (p.name == name) return p.value;
    }
    throw std::invalid_argument("no projector parameter named \"" + name + "\"");
}

Tensor Projector::forward(const Tensor& tokens) const {
    ProjectorTape tape;
    return forward(tokens, tape);
}

Tensor Projector::forward(const Tensor& tokens, ProjectorTape& tape) const {
    if (tokens.rank() != 2 || tokens.extent(1) != spec_.d_v) {
        throw std::invalid_argument("projector input shape " + shape_str(tokens.shape()) +
                                    " does not match expected [" +
                                    std::to_string(spec_.tokens_in()) + ", " +
                                    std::to_string(spec_.d_v) + "]");
    }
    if (tokens.extent(0) != spec_.tokens_in()) {
        throw std::invalid_argument("projector expects " + std::to_string(spec_.tokens_in()) +
                                    " tokens (grid_side " + std::to_string(spec_.grid_side) +
                                    "), got shape " + shape_str(tokens.shape()));
    }
    tape.grid_in = tokens.reshaped({spec_.grid_side, spec_.grid_side, spec_.d_v});
    tape.pw1_out = ops::conv2d_pointwise(tape.grid_in, param("pw1.weight"), param("pw1.bias"));
    tape.act = ops::gelu(tape.pw1_out);
    tape.mlp_out = ops::conv2d_pointwise(tape.act, param("pw2.weight"), param("pw2.bias"));

    Tensor out;
    switch (spec_.variant) {
        case ProjectorVariant::Mlp2:
            out = tape.mlp_out;
            break;
        case ProjectorVariant::AvgPoolOnly:
            tape.pooled = ops::avgpool2d(tape.mlp_out, spec_.rho);
            out = tape.pooled;
            break;
        case ProjectorVariant::LearnablePe: {
            tape.pooled = ops::avgpool2d(tape.mlp_out, spec_.rho);
            const size_t side = spec_.grid_side / spec_.rho;
            out = ops::add(tape.pooled, param("pos_embed").reshaped({side, side, spec_.d_t}));
            break;
        }
        case ProjectorVariant::Ldpv2: {
            tape.pooled = ops::avgpool2d(tape.mlp_out, spec_.rho);
            Tensor peg = ops::conv2d_depthwise(tape.pooled, param("peg.weight"),
                                               param("peg.bias"), 1, 1);
            out = ops::add(peg, tape.pooled);
            break;
        }
        case ProjectorVariant::Ldpv1: {
            tape.res_dw = ops::conv2d_depthwise(tape.mlp_out, param("res.dw.weight"),
                                                param("res.dw.bias"), 1, 1);
            tape.res_pw1 =
                ops::conv2d_pointwise(tape.res_dw, param("res.pw1.weight"), param("res.pw1.bias"));
            tape.res_act = ops::gelu(tape.res_pw1);
            Tensor res =
                ops::conv2d_pointwise(tape.res_act, param("res.pw2.weight"), param("res.pw2.bias"));
            tape.res_sum = ops::add(tape.mlp_out, res);
            tape.down_dw = ops::conv2d_depthwise(tape.res_sum, param("down.dw.weight"),
                                                 param("down.dw.bias"), 2, 1);
            out = ops::conv2d_pointwise(tape.down_dw, param("down.pw.weight"),
                                        param("down.pw.bias"));
            break;
        }
    }
    return grid_to_tokens(out);
}

Tensor Projector::backward(const ProjectorTape& tape, const Tensor& upstream,
                           GradMap& grads) const {
    const size_t out_side = static_cast<size_t>(
        std::llround(std::sqrt(static_cast<double>(spec_.tokens_out()))));
    if (upstream.rank() != 2 || upstream.extent(0) != spec_.tokens_out() ||
        upstream.extent(1) != spec_.d_t) {
        throw std::invalid_argument("projector upstream shape " + shape_str(upstream.shape()) +
                                    " does not match output shape [" +
                                    std::to_string(spec_.tokens_out()) + ", " +
                                    std::to_string(spec_.d_t) + "]");
    }
    Tensor d_out = upstream.reshaped({out_side, out_side, spec_.d_t});

    Tensor d_mlp;
    switch (spec_.variant) {
        case ProjectorVariant::Mlp2:
            d_mlp = d_out;
            break;
        case ProjectorVariant::AvgPoolOnly:
            d_mlp = ops::avgpool2d_vjp(tape.mlp_out.shape(), spec_.rho, d_out);
            break;
        case ProjectorVariant::LearnablePe: {
            accumulate_grad(grads, "pos_embed",
                            d_out.reshaped({spec_.tokens_out(), spec_.d_t}));
            d_mlp = ops::avgpool2d_vjp(tape.mlp_out.shape(), spec_.rho, d_out);
            break;
        }
        case ProjectorVariant::Ldpv2: {
            ops::ConvGrads g =
                ops::conv2d_depthwise_vjp(tape.pooled, param("peg.weight"), d_out, 1, 1);
            accumulate_grad(grads, "peg.weight", g.dw);
            accumulate_grad(grads, "peg.bias", g.db);
            Tensor d_pooled = ops::add(d_out, g.dx);  // skip connection
            d_mlp = ops::avgpool2d_vjp(tape.mlp_out.shape(), spec_.rho, d_pooled);
            break;
        }
        case ProjectorVariant::Ldpv1: {
            ops::ConvGrads g_pw =
                ops::conv2d_pointwise_vjp(tape.down_dw, param("down.pw.weight"), d_out);
            accumulate_grad(grads, "down.pw.weight", g_pw.dw);
            accumulate_grad(grads, "down.pw.bias", g_pw.db);
            ops::ConvGrads g_dw =
                ops::conv2d_depthwise_vjp(tape.res_sum, param("down.dw.weight"), g_pw.dx, 2, 1);
            accumulate_grad(grads, "down.dw.weight", g_dw.dw);
            accumulate_grad(grads, "down.dw.bias", g_dw.db);
            // residual split: d_res_sum feeds both the skip and the block
            ops::ConvGrads g_rpw2 =
                ops::conv2d_pointwise_vjp(tape.res_act, param("res.pw2.weight"), g_dw.dx);
            accumulate_grad(grads, "res.pw2.weight", g_rpw2.dw);
            accumulate_grad(grads, "res.pw2.bias", g_rpw2.db);
            Tensor d_res_pw1 = ops::gelu_vjp(tape.res_pw1, g_rpw2.dx);
            ops::ConvGrads g_rpw1 =
                ops::conv2d_pointwise_vjp(tape.res_dw, param("res.pw1.weight"), d_res_pw1);
            accumulate_grad(grads, "res.pw1.weight", g_rpw1.dw);
            accumulate_grad(grads, "res.pw1.bias", g_rpw1.db);
            ops::ConvGrads g_rdw =
                ops::conv2d_depthwise_vjp(tape.mlp_out, param("res.dw.weight"), g_rpw1.dx, 1, 1);
            accumulate_grad(grads, "res.dw.weight", g_rdw.dw);
            accumulate_grad(grads, "res.dw.bias", g_rdw.db);
            d_mlp = ops::add(g_dw.dx, g_rdw.dx);
            break;
        }
    }

    ops::ConvGrads g2 = ops::conv2d_pointwise_vjp(tape.act, param("pw2.weight"), d_mlp);
    accumulate_grad(grads, "pw2.weight", g2.dw);
    accumulate_grad(grads, "pw2.bias", g2.db);
    Tensor d_pw1 = ops::gelu_vjp(tape.pw1_out, g2.dx);
    ops::ConvGrads g1 = ops::conv2d_pointwise_vjp(tape.grid_in, param("pw1.weight"), d_pw1);
    accumulate_grad(grads, "pw1.weight", g1.dw);
    accumulate_grad(grads, "pw1.bias", g1.db);
    return g1.dx.reshaped({spec_.tokens_in(), spec_.d_v});
}

void Projector::save_params(const std::string& dir) const {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
    json manifest;
    manifest["spec"] = spec_.to_json();
    manifest["tensors"] = json::array();
    for (const Param& p : params_) {
        const std::string file = p.name + ".tnsr";
        write_tnsr((fs::path(dir) / file).string(), p.value);
        manifest["tensors"].push_back({{"name", p.name}, {"file", file}, {"trainable", p.trainable}});
    }
    std::ofstream f(fs::path(dir) / "manifest.json");
    if (!f) throw IoError("cannot write manifest in " + dir);
    f << manifest.dump(2) << '\n';
}

void Projector::load_params(const std::string& dir) {
    std::ifstream f(fs::path(dir) / "manifest.json");
    if (!f) throw IoError("cannot open manifest in " + dir);
    json manifest = json::parse(f);
    for (const auto& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        Tensor t = read_tnsr((fs::path(dir) / entry.at("file").get<std::string>()).string());
        Tensor& dst = param(name);
        if (!dst.same_shape(t)) {
            throw std::invalid_argument("loaded tensor " + name + " has shape " +
                                        shape_str(t.shape()) + ", expected " +
                                        shape_str(dst.shape()));
        }
        dst = std::move(t);
    }
}

}  // namespace tinyvlm
