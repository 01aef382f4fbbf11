#include "tinyvlm/vlm.hpp"

#include <cmath>
#include <fstream>

namespace tinyvlm {

using nlohmann::json;

namespace {

constexpr double kRmsEps = 1e-6;

const Tensor& find_param(const std::vector<Param>& params, const std::string& name) {
    for (const Param& p : params) {
        if (p.name == name) return p.value;
    }
    throw std::invalid_argument("no parameter named \"" + name + "\"");
}

Tensor& find_param(std::vector<Param>& params, const std::string& name) {
    for (Param& p : params) {
        if (p.name == name) return p.value;
    }
    throw std::invalid_argument("no parameter named \"" + name + "\"");
}

Tensor uniform_init(Rng& rng, std::vector<size_t> shape, size_t fan_in) {
    const double limit = std::sqrt(1.0 / static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(-limit, limit);
    return t;
}

// one pre-norm block = attention sub-layer + MLP sub-layer, both residual
void push_block_params(std::vector<Param>& params, Rng& rng, const std::string& prefix,
                       size_t d, size_t hidden, bool trainable) {
    auto push = [&](const std::string& name, Tensor t) {
        params.push_back({prefix + name, std::move(t), trainable});
    };
    push("attn.norm", Tensor::full({d}, 1.0));
    push("attn.wq.weight", uniform_init(rng, {d, d}, d));
    push("attn.wq.bias", Tensor({d}));
    push("attn.wk.weight", uniform_init(rng, {d, d}, d));
    push("attn.wk.bias", Tensor({d}));
    push("attn.wv.weight", uniform_init(rng, {d, d}, d));
    push("attn.wv.bias", Tensor({d}));
    push("attn.wo.weight", uniform_init(rng, {d, d}, d));
    push("attn.wo.bias", Tensor({d}));
    push("mlp.norm", Tensor::full({d}, 1.0));
    push("mlp.fc1.weight", uniform_init(rng, {hidden, d}, d));
    push("mlp.fc1.bias", Tensor({hidden}));
    push("mlp.fc2.weight", uniform_init(rng, {d, hidden}, hidden));
    push("mlp.fc2.bias", Tensor({d}));
}

struct BlockRef {
    const Tensor *norm_attn, *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    const Tensor *norm_mlp, *w1, *b1, *w2, *b2;
    std::string prefix;
};

BlockRef make_block_ref(const std::vector<Param>& params, const std::string& p) {
    return BlockRef{
        &find_param(params, p + "attn.norm"),
        &find_param(params, p + "attn.wq.weight"), &find_param(params, p + "attn.wq.bias"),
        &find_param(params, p + "attn.wk.weight"), &find_param(params, p + "attn.wk.bias"),
        &find_param(params, p + "attn.wv.weight"), &find_param(params, p + "attn.wv.bias"),
        &find_param(params, p + "attn.wo.weight"), &find_param(params, p + "attn.wo.bias"),
        &find_param(params, p + "mlp.norm"),
        &find_param(params, p + "mlp.fc1.weight"), &find_param(params, p + "mlp.fc1.bias"),
        &find_param(params, p + "mlp.fc2.weight"), &find_param(params, p + "mlp.fc2.bias"),
        p};
}

void rmsnorm_row(const double* x, const double* gamma, size_t d, double* out) {
    double ms = 0;
    for (size_t i = 0; i < d; ++i) ms += x[i] * x[i];
    ms /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(ms + kRmsEps);
    for (size_t i = 0; i < d; ++i) out[i] = x[i] * gamma[i] * r;
}

// y = W x + b for a single row
void affine_row(const double* x, const Tensor& w, const Tensor& b, double* out) {
    const size_t dout = w.extent(0), din = w.extent(1);
    const double* wp = w.data();
    for (size_t o = 0; o < dout; ++o) {
        const double* wr = wp + o * din;
        double acc = 0;
        for (size_t i = 0; i < din; ++i) acc += wr[i] * x[i];
        out[o] = acc + b[o];
    }
}

double dot(const double* a, const double* b, size_t n) {
    double acc = 0;
    for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

Tensor& grad_slot(GradMap& grads, const std::string& name, const std::vector<size_t>& shape) {
    auto it = grads.find(name);
    if (it == grads.end()) it = grads.emplace(name, Tensor(shape)).first;
    return it->second;
}

// dW[o][i] += sum_r up[r][o] * act[r][i]
void add_outer(Tensor& dw, const Tensor& up, const Tensor& act) {
    const size_t n = up.extent(0), dout = up.extent(1), din = act.extent(1);
    for (size_t r = 0; r < n; ++r) {
        const double* urow = up.data() + r * dout;
        const double* arow = act.data() + r * din;
        for (size_t o = 0; o < dout; ++o) {
            double* dwr = dw.data() + o * din;
            const double u = urow[o];
            for (size_t i = 0; i < din; ++i) dwr[i] += u * arow[i];
        }
    }
}

void add_colsum(Tensor& db, const Tensor& up) {
    const size_t n = up.extent(0), dout = up.extent(1);
    for (size_t r = 0; r < n; ++r) {
        const double* urow = up.data() + r * dout;
        for (size_t o = 0; o < dout; ++o) db[o] += urow[o];
    }
}

// [N,O] x [O,I] -> [N,I]
Tensor matmul_right(const Tensor& up, const Tensor& w) {
    const size_t n = up.extent(0), dout = up.extent(1), din = w.extent(1);
    Tensor out({n, din});
    for (size_t r = 0; r < n; ++r) {
        const double* urow = up.data() + r * dout;
        double* orow = out.data() + r * din;
        for (size_t o = 0; o < dout; ++o) {
            const double u = urow[o];
            const double* wr = w.data() + o * din;
            for (size_t i = 0; i < din; ++i) orow[i] += u * wr[i];
        }
    }
    return out;
}

// returns dx; accumulates dgamma
Tensor rmsnorm_rows_vjp(const Tensor& x, const Tensor& gamma, const Tensor& up, Tensor& dgamma) {
    const size_t n = x.extent(0), d = x.extent(1);
    Tensor dx({n, d});
    for (size_t r = 0; r < n; ++r) {
        const double* xr = x.data() + r * d;
        const double* ur = up.data() + r * d;
        double* dr = dx.data() + r * d;
        double ms = 0;
        for (size_t i = 0; i < d; ++i) ms += xr[i] * xr[i];
        ms /= static_cast<double>(d);
        const double rinv = 1.0 / std::sqrt(ms + kRmsEps);
        double proj = 0;
        for (size_t i = 0; i < d; ++i) proj += ur[i] * gamma[i] * xr[i];
        const double scale = rinv * rinv * rinv * proj / static_cast<double>(d);
        for (size_t i = 0; i < d; ++i) {
            dr[i] = rinv * gamma[i] * ur[i] - scale * xr[i];
            dgamma[i] += ur[i] * xr[i] * rinv;
        }
    }
    return dx;
}

Tensor rmsnorm_rows(const Tensor& x, const Tensor& gamma) {
    const size_t n = x.extent(0), d = x.extent(1);
    Tensor out({n, d});
    for (size_t r = 0; r < n; ++r) {
        rmsnorm_row(x.data() + r * d, gamma.data(), d, out.data() + r * d);
    }
    return out;
}

// shared by the LM (causal) and the vision stub (full attention); the tape
// must hold the layout produced by the corresponding forward
Tensor block_backward(const BlockRef& ref, const BlockTape& t, size_t heads, bool causal,
                      const Tensor& d_out, GradMap& grads) {
    const size_t n = t.x_in.extent(0), d = t.x_in.extent(1);
    const size_t hidden = t.mlp_pre.extent(1);
    const size_t dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // MLP sub-layer
    add_outer(grad_slot(grads, ref.prefix + "mlp.fc2.weight", {d, hidden}), d_out, t.mlp_act);
    add_colsum(grad_slot(grads, ref.prefix + "mlp.fc2.bias", {d}), d_out);
    Tensor dact = matmul_right(d_out, *ref.w2);
    Tensor dpre({n, hidden});
    for (size_t i = 0; i < dpre.numel(); ++i) {
        dpre[i] = dact[i] * ops::gelu_grad_scalar(t.mlp_pre[i]);
    }
    add_outer(grad_slot(grads, ref.prefix + "mlp.fc1.weight", {hidden, d}), dpre, t.xh_mlp);
    add_colsum(grad_slot(grads, ref.prefix + "mlp.fc1.bias", {hidden}), dpre);
    Tensor dxh_mlp = matmul_right(dpre, *ref.w1);
    Tensor dx_mid = rmsnorm_rows_vjp(t.x_mid, *ref.norm_mlp, dxh_mlp,
                                     grad_slot(grads, ref.prefix + "mlp.norm", {d}));
    for (size_t i = 0; i < dx_mid.numel(); ++i) dx_mid[i] += d_out[i];  // residual

    // attention sub-layer
    add_outer(grad_slot(grads, ref.prefix + "attn.wo.weight", {d, d}), dx_mid, t.ctx);
    add_colsum(grad_slot(grads, ref.prefix + "attn.wo.bias", {d}), dx_mid);
    Tensor dctx = matmul_right(dx_mid, *ref.wo);

    Tensor dq({n, d}), dk({n, d}), dv({n, d});
    std::vector<double> dalpha(n);
    for (size_t h = 0; h < heads; ++h) {
        const size_t base = h * dh;
        const Tensor& alpha = t.attn[h];
        for (size_t i = 0; i < n; ++i) {
            const size_t jmax = causal ? i : n - 1;
            const double* dctx_i = dctx.data() + i * d + base;
            double proj = 0;
            for (size_t j = 0; j <= jmax; ++j) {
                dalpha[j] = dot(dctx_i, t.v.data() + j * d + base, dh);
                proj += alpha.at(i, j) * dalpha[j];
            }
            for (size_t j = 0; j <= jmax; ++j) {
                const double a = alpha.at(i, j);
                const double ds = a * (dalpha[j] - proj) * inv_sqrt_dh;
                const double* krow = t.k.data() + j * d + base;
                const double* qrow = t.q.data() + i * d + base;
                double* dq_i = dq.data() + i * d + base;
                double* dk_j = dk.data() + j * d + base;
                double* dv_j = dv.data() + j * d + base;
                for (size_t c = 0; c < dh; ++c) {
                    dq_i[c] += ds * krow[c];
                    dk_j[c] += ds * qrow[c];
                    dv_j[c] += a * dctx_i[c];
                }
            }
        }
    }

    add_outer(grad_slot(grads, ref.prefix + "attn.wq.weight", {d, d}), dq, t.xh_attn);
    add_colsum(grad_slot(grads, ref.prefix + "attn.wq.bias", {d}), dq);
    add_outer(grad_slot(grads, ref.prefix + "attn.wk.weight", {d, d}), dk, t.xh_attn);
    add_colsum(grad_slot(grads, ref.prefix + "attn.wk.bias", {d}), dk);
    add_outer(grad_slot(grads, ref.prefix + "attn.wv.weight", {d, d}), dv, t.xh_attn);
    add_colsum(grad_slot(grads, ref.prefix + "attn.wv.bias", {d}), dv);

    Tensor dxh = matmul_right(dq, *ref.wq);
    Tensor dxh_k = matmul_right(dk, *ref.wk);
    Tensor dxh_v = matmul_right(dv, *ref.wv);
    for (size_t i = 0; i < dxh.numel(); ++i) dxh[i] += dxh_k[i] + dxh_v[i];

    Tensor dx_in = rmsnorm_rows_vjp(t.x_in, *ref.norm_attn, dxh,
                                    grad_slot(grads, ref.prefix + "attn.norm", {d}));
    for (size_t i = 0; i < dx_in.numel(); ++i) dx_in[i] += dx_mid[i];  // residual
    return dx_in;
}

// full-attention block used by the vision stub
Tensor encoder_block_forward(const Tensor& x, const BlockRef& ref, size_t heads, BlockTape& t) {
    const size_t n = x.extent(0), d = x.extent(1);
    const size_t dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    t.x_in = x;
    t.xh_attn = rmsnorm_rows(x, *ref.norm_attn);
    t.q = ops::linear(t.xh_attn, *ref.wq, *ref.bq);
    t.k = ops::linear(t.xh_attn, *ref.wk, *ref.bk);
    t.v = ops::linear(t.xh_attn, *ref.wv, *ref.bv);
    t.attn.assign(heads, Tensor({n, n}));
    t.ctx = Tensor({n, d});
    std::vector<double> scores(n);
    for (size_t h = 0; h < heads; ++h) {
        const size_t base = h * dh;
        for (size_t i = 0; i < n; ++i) {
            const double* qrow = t.q.data() + i * d + base;
            double m = -HUGE_VAL;
            for (size_t j = 0; j < n; ++j) {
                scores[j] = dot(qrow, t.k.data() + j * d + base, dh) * inv_sqrt_dh;
                m = std::max(m, scores[j]);
            }
            double sum = 0;
            for (size_t j = 0; j < n; ++j) {
                scores[j] = std::exp(scores[j] - m);
                sum += scores[j];
            }
            const double inv = 1.0 / sum;
            double* ctx_i = t.ctx.data() + i * d + base;
            for (size_t j = 0; j < n; ++j) {
                const double a = scores[j] * inv;
                t.attn[h].at(i, j) = a;
                const double* vrow = t.v.data() + j * d + base;
                for (size_t c = 0; c < dh; ++c) ctx_i[c] += a * vrow[c];
            }
        }
    }
    Tensor attn_out = ops::linear(t.ctx, *ref.wo, *ref.bo);
    t.x_mid = ops::add(x, attn_out);
    t.xh_mlp = rmsnorm_rows(t.x_mid, *ref.norm_mlp);
    t.mlp_pre = ops::linear(t.xh_mlp, *ref.w1, *ref.b1);
    t.mlp_act = ops::gelu(t.mlp_pre);
    Tensor m = ops::linear(t.mlp_act, *ref.w2, *ref.b2);
    return ops::add(t.x_mid, m);
}

}  // namespace

void VisionStubConfig::validate() const {
    if (image_side < 1 || patch < 1 || d_v < 1) {
        throw std::invalid_argument("vision stub dimensions must be >= 1");
    }
    if (image_side % patch != 0) {
        throw std::invalid_argument("patch " + std::to_string(patch) +
                                    " does not divide image_side " + std::to_string(image_side));
    }
}

json VisionStubConfig::to_json() const {
    return json{{"image_side", image_side}, {"patch", patch}, {"d_v", d_v},
                {"depth", depth},           {"seed", seed},   {"frozen", frozen}};
}

VisionStubConfig VisionStubConfig::from_json(const json& j) {
    VisionStubConfig c;
    c.image_side = j.at("image_side").get<size_t>();
    c.patch = j.at("patch").get<size_t>();
    c.d_v = j.at("d_v").get<size_t>();
    c.depth = j.value("depth", size_t{0});
    c.seed = j.value("seed", uint64_t{0});
    c.frozen = j.value("frozen", true);
    c.validate();
    return c;
}

VisionStub::VisionStub(const VisionStubConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    const bool trainable = !cfg_.frozen;
    const size_t pvec = cfg_.patch * cfg_.patch * 3;
    params_.push_back({"patch.weight", uniform_init(rng, {cfg_.d_v, pvec}, pvec), trainable});
    params_.push_back({"patch.bias", Tensor({cfg_.d_v}), trainable});
    for (size_t l = 0; l < cfg_.depth; ++l) {
        push_block_params(params_, rng, "enc." + std::to_string(l) + ".", cfg_.d_v,
                          4 * cfg_.d_v, trainable);
    }
}

const Tensor& VisionStub::param(const std::string& name) const { return find_param(params_, name); }
Tensor& VisionStub::param(const std::string& name) { return find_param(params_, name); }

Tensor VisionStub::encode(const Tensor& image) const {
    EncoderTape tape;
    return encode(image, tape);
}

Tensor VisionStub::encode(const Tensor& image, EncoderTape& tape) const {
    const std::vector<size_t> want{cfg_.image_side, cfg_.image_side, 3};
    if (image.shape() != want) {
        throw std::invalid_argument("image shape " + shape_str(image.shape()) +
                                    " does not match configured " + shape_str(want));
    }
    const size_t gs = cfg_.grid_side(), n = cfg_.tokens(), patch = cfg_.patch;
    const size_t pvec = patch * patch * 3;
    tape.patches = Tensor({n, pvec});
    for (size_t t = 0; t < n; ++t) {
        const size_t pr = t / gs, pc = t % gs;
        double* row = tape.patches.data() + t * pvec;
        for (size_t ph = 0; ph < patch; ++ph) {
            for (size_t pw = 0; pw < patch; ++pw) {
                for (size_t c = 0; c < 3; ++c) {
                    row[(ph * patch + pw) * 3 + c] = image.at(pr * patch + ph, pc * patch + pw, c);
                }
            }
        }
    }
    Tensor x = ops::linear(tape.patches, param("patch.weight"), param("patch.bias"));
    tape.layers.resize(cfg_.depth);
    for (size_t l = 0; l < cfg_.depth; ++l) {
        x = encoder_block_forward(x, make_block_ref(params_, "enc." + std::to_string(l) + "."), 1,
                                  tape.layers[l]);
    }
    return x;
}

void VisionStub::backward(const EncoderTape& tape, const Tensor& upstream, GradMap& grads) const {
    Tensor dx = upstream;
    for (size_t l = cfg_.depth; l-- > 0;) {
        dx = block_backward(make_block_ref(params_, "enc." + std::to_string(l) + "."),
                            tape.layers[l], 1, false, dx, grads);
    }
    ops::LinearGrads g = ops::linear_vjp(tape.patches, param("patch.weight"), dx);
    accumulate_grad(grads, "patch.weight", g.dw);
    accumulate_grad(grads, "patch.bias", g.db);
}

void TokenSequence::validate() const {
    if (modality.size() != ids.size()) {
        throw std::invalid_argument("token sequence has " + std::to_string(modality.size()) +
                                    " modality tags but " + std::to_string(ids.size()) + " ids");
    }
    if (modality.empty()) {
        if (embeddings.numel() != 0) {
            throw std::invalid_argument("empty token sequence carries embeddings");
        }
        return;
    }
    if (embeddings.rank() != 2 || embeddings.extent(0) != modality.size()) {
        throw std::invalid_argument("embeddings shape " + shape_str(embeddings.shape()) +
                                    " does not match " + std::to_string(modality.size()) +
                                    " tokens");
    }
    for (size_t i = 0; i < modality.size(); ++i) {
        if (modality[i] == Modality::Visual && ids[i] != -1) {
            throw std::invalid_argument("visual token " + std::to_string(i) + " carries id " +
                                        std::to_string(ids[i]));
        }
        if (modality[i] == Modality::Text && ids[i] < -1) {
            throw std::invalid_argument("text token " + std::to_string(i) + " has invalid id");
        }
    }
}

json TokenSequence::to_json() const {
    json tags = json::array();
    for (Modality m : modality) tags.push_back(m == Modality::Visual ? "visual" : "text");
    return json{{"modality", tags},
                {"ids", ids},
                {"embeddings", {{"shape", embeddings.shape()}, {"data", embeddings.values()}}}};
}

TokenSequence TokenSequence::from_json(const json& j) {
    TokenSequence s;
    for (const auto& tag : j.at("modality")) {
        const std::string t = tag.get<std::string>();
        if (t == "visual") {
            s.modality.push_back(Modality::Visual);
        } else if (t == "text") {
            s.modality.push_back(Modality::Text);
        } else {
            throw std::invalid_argument("unknown modality tag \"" + t + "\"");
        }
    }
    s.ids = j.at("ids").get<std::vector<int64_t>>();
    const auto& emb = j.at("embeddings");
    auto shape = emb.at("shape").get<std::vector<size_t>>();
    auto data = emb.at("data").get<std::vector<double>>();
    if (!shape.empty()) s.embeddings = Tensor(shape, data);
    s.validate();
    return s;
}

TokenSequence concat_multimodal(const Tensor& visual, const Tensor& text) {
    return concat_multimodal(visual, text, {});
}

TokenSequence concat_multimodal(const Tensor& visual, const Tensor& text,
                                const std::vector<int64_t>& text_ids) {
    const size_t nv = visual.numel() ? visual.extent(0) : 0;
    const size_t nt = text.numel() ? text.extent(0) : 0;
    if (nv + nt == 0) throw std::invalid_argument("cannot concatenate two empty sequences");
    if (nv && nt && visual.extent(1) != text.extent(1)) {
        throw std::invalid_argument("visual width " + shape_str(visual.shape()) +
                                    " does not match text width " + shape_str(text.shape()));
    }
    if (!text_ids.empty() && text_ids.size() != nt) {
        throw std::invalid_argument("got " + std::to_string(text_ids.size()) + " ids for " +
                                    std::to_string(nt) + " text tokens");
    }
    const size_t d = nv ? visual.extent(1) : text.extent(1);
    TokenSequence seq;
    seq.embeddings = Tensor({nv + nt, d});
    for (size_t i = 0; i < nv * d; ++i) seq.embeddings[i] = visual[i];
    for (size_t i = 0; i < nt * d; ++i) seq.embeddings[nv * d + i] = text[i];
    seq.modality.assign(nv, Modality::Visual);
    seq.modality.insert(seq.modality.end(), nt, Modality::Text);
    seq.ids.assign(nv, -1);
    if (text_ids.empty()) {
        seq.ids.insert(seq.ids.end(), nt, -1);
    } else {
        seq.ids.insert(seq.ids.end(), text_ids.begin(), text_ids.end());
    }
    return seq;
}

void ToyLMConfig::validate() const {
    if (vocab < 2) throw std::invalid_argument("vocab must be >= 2");
    if (d_t < 1 || heads < 1 || max_seq < 1) {
        throw std::invalid_argument("lm dimensions must be >= 1");
    }
    if (d_t % heads != 0) {
        throw std::invalid_argument("d_t " + std::to_string(d_t) + " not divisible by heads " +
                                    std::to_string(heads));
    }
}

json ToyLMConfig::to_json() const {
    return json{{"vocab", vocab}, {"d_t", d_t},         {"depth", depth},
                {"heads", heads}, {"max_seq", max_seq}, {"seed", seed}};
}

ToyLMConfig ToyLMConfig::from_json(const json& j) {
    ToyLMConfig c;
    c.vocab = j.at("vocab").get<size_t>();
    c.d_t = j.at("d_t").get<size_t>();
    c.depth = j.at("depth").get<size_t>();
    c.heads = j.at("heads").get<size_t>();
    c.max_seq = j.at("max_seq").get<size_t>();
    c.seed = j.value("seed", uint64_t{0});
    c.validate();
    return c;
}

ToyLM::ToyLM(const ToyLMConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    params_.push_back({"embed.weight", uniform_init(rng, {cfg_.vocab, cfg_.d_t}, cfg_.d_t), true});
    params_.push_back({"pos.weight", uniform_init(rng, {cfg_.max_seq, cfg_.d_t}, cfg_.d_t), true});
    for (size_t l = 0; l < cfg_.depth; ++l) {
        push_block_params(params_, rng, "blocks." + std::to_string(l) + ".", cfg_.d_t,
                          4 * cfg_.d_t, true);
    }
    params_.push_back({"unembed.weight", uniform_init(rng, {cfg_.vocab, cfg_.d_t}, cfg_.d_t), true});
    params_.push_back({"unembed.bias", Tensor({cfg_.vocab}), true});
}

const Tensor& ToyLM::param(const std::string& name) const { return find_param(params_, name); }
Tensor& ToyLM::param(const std::string& name) { return find_param(params_, name); }

Tensor ToyLM::embed_text(const std::vector<int64_t>& ids) const {
    if (ids.empty()) throw std::invalid_argument("embed_text: empty id list");
    const Tensor& table = param("embed.weight");
    Tensor out({ids.size(), cfg_.d_t});
    for (size_t r = 0; r < ids.size(); ++r) {
        const int64_t id = ids[r];
        if (id < 0 || static_cast<size_t>(id) >= cfg_.vocab) {
            throw std::invalid_argument("token id " + std::to_string(id) +
                                        " out of range for vocab " + std::to_string(cfg_.vocab));
        }
        for (size_t c = 0; c < cfg_.d_t; ++c) {
            out[r * cfg_.d_t + c] = table[static_cast<size_t>(id) * cfg_.d_t + c];
        }
    }
    return out;
}

// One row at a time through every layer, appending to the KV cache. Full
// logits and incremental decoding share this routine, which is what makes
// cached generation bitwise equal to re-forwarding.
Tensor ToyLM::forward_rows(const Tensor& rows, size_t start, KvCache& cache, LmTape* tape) const {
    const size_t m = rows.extent(0), d = cfg_.d_t, heads = cfg_.heads;
    const size_t dh = d / heads, hidden = 4 * d;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    if (rows.extent(1) != d) {
        throw std::invalid_argument("row width " + shape_str(rows.shape()) +
                                    " does not match d_t " + std::to_string(d));
    }
    if (start + m > cfg_.max_seq) {
        throw std::invalid_argument("positions " + std::to_string(start + m) +
                                    " exceed max_seq " + std::to_string(cfg_.max_seq));
    }
    if (cache.k.empty()) {
        cache.k.assign(cfg_.depth, {});
        cache.v.assign(cfg_.depth, {});
    }
    if (cache.len != start) {
        throw std::invalid_argument("cache holds " + std::to_string(cache.len) +
                                    " rows but forward starts at position " +
                                    std::to_string(start));
    }

    std::vector<BlockRef> refs;
    refs.reserve(cfg_.depth);
    for (size_t l = 0; l < cfg_.depth; ++l) {
        refs.push_back(make_block_ref(params_, "blocks." + std::to_string(l) + "."));
    }
    const Tensor& pos = param("pos.weight");
    const Tensor& wu = param("unembed.weight");
    const Tensor& bu = param("unembed.bias");

    if (tape) {
        if (start != 0) throw std::invalid_argument("taped forward must start at position 0");
        tape->x0 = Tensor({m, d});
        tape->x_out = Tensor({m, d});
        tape->layers.assign(cfg_.depth, {});
        for (auto& lt : tape->layers) {
            lt.x_in = Tensor({m, d});
            lt.xh_attn = Tensor({m, d});
            lt.q = Tensor({m, d});
            lt.k = Tensor({m, d});
            lt.v = Tensor({m, d});
            lt.attn.assign(heads, Tensor({m, m}));
            lt.ctx = Tensor({m, d});
            lt.x_mid = Tensor({m, d});
            lt.xh_mlp = Tensor({m, d});
            lt.mlp_pre = Tensor({m, hidden});
            lt.mlp_act = Tensor({m, hidden});
        }
    }

    Tensor logits({m, cfg_.vocab});
    std::vector<double> x(d), xh(d), q(d), k(d), v(d), ctx(d), attn_out(d);
    std::vector<double> pre(hidden), act(hidden), mlp_out(d), scores(cfg_.max_seq);

    auto copy_row = [](Tensor& dst, size_t r, const std::vector<double>& src) {
        std::copy(src.begin(), src.end(), dst.data() + r * src.size());
    };

    for (size_t r = 0; r < m; ++r) {
        const size_t p = start + r;
        for (size_t c = 0; c < d; ++c) x[c] = rows[r * d + c] + pos[p * d + c];
        if (tape) copy_row(tape->x0, r, x);
        for (size_t l = 0; l < cfg_.depth; ++l) {
            const BlockRef& ref = refs[l];
            BlockTape* lt = tape ? &tape->layers[l] : nullptr;
            if (lt) copy_row(lt->x_in, r, x);
            rmsnorm_row(x.data(), ref.norm_attn->data(), d, xh.data());
            affine_row(xh.data(), *ref.wq, *ref.bq, q.data());
            affine_row(xh.data(), *ref.wk, *ref.bk, k.data());
            affine_row(xh.data(), *ref.wv, *ref.bv, v.data());
            if (lt) {
                copy_row(lt->xh_attn, r, xh);
                copy_row(lt->q, r, q);
                copy_row(lt->k, r, k);
                copy_row(lt->v, r, v);
            }
            cache.k[l].insert(cache.k[l].end(), k.begin(), k.end());
            cache.v[l].insert(cache.v[l].end(), v.begin(), v.end());
            const size_t ctx_len = p + 1;  // rows 0..p are cached for this layer
            for (size_t h = 0; h < heads; ++h) {
                const size_t base = h * dh;
                double mx = -HUGE_VAL;
                for (size_t j = 0; j < ctx_len; ++j) {
                    scores[j] = dot(q.data() + base, cache.k[l].data() + j * d + base, dh) *
                                inv_sqrt_dh;
                    mx = std::max(mx, scores[j]);
                }
                double sum = 0;
                for (size_t j = 0; j < ctx_len; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    sum += scores[j];
                }
                const double inv = 1.0 / sum;
                for (size_t c = 0; c < dh; ++c) ctx[base + c] = 0;
                for (size_t j = 0; j < ctx_len; ++j) {
                    const double a = scores[j] * inv;
                    if (lt) lt->attn[h].at(r, j) = a;
                    const double* vrow = cache.v[l].data() + j * d + base;
                    for (size_t c = 0; c < dh; ++c) ctx[base + c] += a * vrow[c];
                }
            }
            if (lt) copy_row(lt->ctx, r, ctx);
            affine_row(ctx.data(), *ref.wo, *ref.bo, attn_out.data());
            for (size_t c = 0; c < d; ++c) x[c] += attn_out[c];
            if (lt) copy_row(lt->x_mid, r, x);
            rmsnorm_row(x.data(), ref.norm_mlp->data(), d, xh.data());
            affine_row(xh.data(), *ref.w1, *ref.b1, pre.data());
            for (size_t c = 0; c < hidden; ++c) act[c] = ops::gelu_scalar(pre[c]);
            if (lt) {
                copy_row(lt->xh_mlp, r, xh);
                copy_row(lt->mlp_pre, r, pre);
                copy_row(lt->mlp_act, r, act);
            }
            affine_row(act.data(), *ref.w2, *ref.b2, mlp_out.data());
            for (size_t c = 0; c < d; ++c) x[c] += mlp_out[c];
        }
        if (tape) copy_row(tape->x_out, r, x);
        affine_row(x.data(), wu, bu, logits.data() + r * cfg_.vocab);
    }
    cache.len += m;
    return logits;
}

static void check_sequence(const TokenSequence& seq, size_t max_seq) {
    seq.validate();
    if (seq.length() == 0) throw std::invalid_argument("empty token sequence");
    if (seq.length() > max_seq) {
        throw std::invalid_argument("sequence of " + std::to_string(seq.length()) +
                                    " tokens exceeds max_seq " + std::to_string(max_seq));
    }
}

Tensor ToyLM::logits(const TokenSequence& seq) const {
    check_sequence(seq, cfg_.max_seq);
    KvCache cache;
    return forward_rows(seq.embeddings, 0, cache, nullptr);
}

Tensor ToyLM::logits(const TokenSequence& seq, LmTape& tape) const {
    check_sequence(seq, cfg_.max_seq);
    tape.text_ids = seq.ids;
    for (size_t i = 0; i < seq.modality.size(); ++i) {
        if (seq.modality[i] == Modality::Visual) tape.text_ids[i] = -1;
    }
    KvCache cache;
    return forward_rows(seq.embeddings, 0, cache, &tape);
}

Tensor ToyLM::backward(const LmTape& tape, const Tensor& dlogits, GradMap& grads) const {
    const size_t n = tape.x0.extent(0), d = cfg_.d_t;
    if (dlogits.rank() != 2 || dlogits.extent(0) != n || dlogits.extent(1) != cfg_.vocab) {
        throw std::invalid_argument("dlogits shape " + shape_str(dlogits.shape()) +
                                    " does not match logits shape [" + std::to_string(n) + ", " +
                                    std::to_string(cfg_.vocab) + "]");
    }
    add_outer(grad_slot(grads, "unembed.weight", {cfg_.vocab, d}), dlogits, tape.x_out);
    add_colsum(grad_slot(grads, "unembed.bias", {cfg_.vocab}), dlogits);
    Tensor dx = matmul_right(dlogits, param("unembed.weight"));
    for (size_t l = cfg_.depth; l-- > 0;) {
        dx = block_backward(make_block_ref(params_, "blocks." + std::to_string(l) + "."),
                            tape.layers[l], cfg_.heads, true, dx, grads);
    }
    Tensor& dpos = grad_slot(grads, "pos.weight", {cfg_.max_seq, d});
    Tensor& demb = grad_slot(grads, "embed.weight", {cfg_.vocab, d});
    for (size_t r = 0; r < n; ++r) {
        for (size_t c = 0; c < d; ++c) dpos[r * d + c] += dx[r * d + c];
        const int64_t id = tape.text_ids[r];
        if (id >= 0) {
            for (size_t c = 0; c < d; ++c) {
                demb[static_cast<size_t>(id) * d + c] += dx[r * d + c];
            }
        }
    }
    return dx;
}

std::vector<int64_t> ToyLM::generate(const TokenSequence& prompt, size_t max_new) const {
    if (max_new < 1) throw std::invalid_argument("max_new must be >= 1");
    if (prompt.length() + max_new > cfg_.max_seq) {
        const size_t step =
            cfg_.max_seq >= prompt.length() ? cfg_.max_seq - prompt.length() + 1 : 1;
        throw std::invalid_argument(
            "generate: prompt of " + std::to_string(prompt.length()) + " tokens plus " +
            std::to_string(max_new) + " new tokens overflows max_seq " +
            std::to_string(cfg_.max_seq) + "; generation would fail at step " +
            std::to_string(step));
    }
    GreedyDecoder dec(*this, prompt);
    std::vector<int64_t> out;
    out.reserve(max_new);
    for (size_t i = 0; i < max_new; ++i) out.push_back(dec.next());
    return out;
}

GreedyDecoder::GreedyDecoder(const ToyLM& lm, const TokenSequence& prompt) : lm_(&lm) {
    prompt.validate();
    prompt_len_ = prompt.length();
    if (prompt_len_ == 0) throw std::invalid_argument("empty prompt");
    if (prompt_len_ > lm.config().max_seq) {
        throw std::invalid_argument("prompt of " + std::to_string(prompt_len_) +
                                    " tokens exceeds max_seq " +
                                    std::to_string(lm.config().max_seq));
    }
    Tensor lg = lm_->forward_rows(prompt.embeddings, 0, cache_, nullptr);
    const size_t v = lm.config().vocab;
    last_logits_ = Tensor({1, v});
    for (size_t i = 0; i < v; ++i) last_logits_[i] = lg[(prompt_len_ - 1) * v + i];
    fed_ = prompt_len_;
}

int64_t GreedyDecoder::next() {
    if (pending_ >= 0) {
        if (fed_ == lm_->config().max_seq) {
            throw std::invalid_argument("generation overflows context window " +
                                        std::to_string(lm_->config().max_seq) + " at step " +
                                        std::to_string(fed_ - prompt_len_ + 1));
        }
        Tensor row = lm_->embed_text({pending_});
        last_logits_ = lm_->forward_rows(row, fed_, cache_, nullptr);
        ++fed_;
    }
    const size_t v = lm_->config().vocab;
    size_t best = 0;
    for (size_t i = 1; i < v; ++i) {
        if (last_logits_[i] > last_logits_[best]) best = i;
    }
    pending_ = static_cast<int64_t>(best);
    return pending_;
}

size_t GreedyDecoder::max_new_tokens() const {
    return lm_->config().max_seq - prompt_len_;
}

void PipelineConfig::validate() const {
    vision.validate();
    projector.validate();
    lm.validate();
    if (vision.d_v != projector.d_v) {
        throw std::invalid_argument("vision d_v " + std::to_string(vision.d_v) +
                                    " does not match projector d_v " +
                                    std::to_string(projector.d_v));
    }
    if (vision.grid_side() != projector.grid_side) {
        throw std::invalid_argument("vision grid " + std::to_string(vision.grid_side()) +
                                    " does not match projector grid_side " +
                                    std::to_string(projector.grid_side));
    }
    if (lm.d_t != projector.d_t) {
        throw std::invalid_argument("lm d_t " + std::to_string(lm.d_t) +
                                    " does not match projector d_t " +
                                    std::to_string(projector.d_t));
    }
}

json PipelineConfig::to_json() const {
    return json{{"vision", vision.to_json()},
                {"projector", projector.to_json()},
                {"lm", lm.to_json()}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
    PipelineConfig c;
    c.vision = VisionStubConfig::from_json(j.at("vision"));
    c.projector = ProjectorSpec::from_json(j.at("projector"));
    c.lm = ToyLMConfig::from_json(j.at("lm"));
    c.validate();
    return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open " + path);
    return from_json(json::parse(f));
}

VlmPipeline::VlmPipeline(const PipelineConfig& cfg)
    : cfg_(cfg), vision_(cfg.vision), projector_(build_projector(cfg.projector)), lm_(cfg.lm) {
    cfg_.validate();
}

Tensor VlmPipeline::project_image(const Tensor& image) const {
    return projector_.forward(vision_.encode(image));
}

TokenSequence VlmPipeline::build_prompt(const Tensor& image,
                                        const std::vector<int64_t>& text_ids) const {
    Tensor visual;
    if (image.numel() > 0) visual = project_image(image);
    Tensor text;
    if (!text_ids.empty()) text = lm_.embed_text(text_ids);
    return concat_multimodal(visual, text, text_ids);
}

std::vector<int64_t> VlmPipeline::generate(const TokenSequence& prompt, size_t max_new) const {
    return lm_.generate(prompt, max_new);
}

}  // namespace tinyvlm
