#pragma once

#include "tinyvlm/projector.hpp"

#include <optional>

namespace tinyvlm {

struct VisionStubConfig {
    size_t image_side = 48;
    size_t patch = 4;      // patch stride; tokens = (image_side/patch)^2
    size_t d_v = 32;
    size_t depth = 0;      // self-attention blocks after the patch embedding
    uint64_t seed = 0;
    bool frozen = true;

    void validate() const;
    size_t grid_side() const { return image_side / patch; }
    size_t tokens() const { return grid_side() * grid_side(); }

    nlohmann::json to_json() const;
    static VisionStubConfig from_json(const nlohmann::json& j);
};

// One transformer block's worth of saved activations.
struct BlockTape {
    Tensor x_in, xh_attn, q, k, v;   // [N, d]
    std::vector<Tensor> attn;        // per head [N, N]; zero where masked
    Tensor ctx, x_mid, xh_mlp;       // [N, d]
    Tensor mlp_pre, mlp_act;         // [N, hidden]
};

struct EncoderTape {
    Tensor patches;                  // [N, patch*patch*3]
    std::vector<BlockTape> layers;
};

/// Deterministic seeded stand-in for a pre-trained vision tower: a patch
/// embedding followed by `depth` pre-norm bidirectional attention blocks.
class VisionStub {
public:
    explicit VisionStub(const VisionStubConfig& cfg);
    const VisionStubConfig& config() const { return cfg_; }
    const std::vector<Param>& params() const { return params_; }
    std::vector<Param>& params() { return params_; }
    const Tensor& param(const std::string& name) const;
    Tensor& param(const std::string& name);

    // image: [image_side, image_side, 3] -> [tokens, d_v]
    Tensor encode(const Tensor& image) const;
    Tensor encode(const Tensor& image, EncoderTape& tape) const;
    void backward(const EncoderTape& tape, const Tensor& upstream, GradMap& grads) const;

private:
    VisionStubConfig cfg_;
    std::vector<Param> params_;
};

enum class Modality { Visual, Text };

struct TokenSequence {
    Tensor embeddings;               // [N, d_t]
    std::vector<Modality> modality;  // per token
    std::vector<int64_t> ids;        // token id at text positions, -1 at visual ones

    size_t length() const { return modality.size(); }
    void validate() const;
    nlohmann::json to_json() const;
    static TokenSequence from_json(const nlohmann::json& j);
};

// visual tokens first, then text
TokenSequence concat_multimodal(const Tensor& visual, const Tensor& text);
TokenSequence concat_multimodal(const Tensor& visual, const Tensor& text,
                                const std::vector<int64_t>& text_ids);

struct ToyLMConfig {
    size_t vocab = 32;
    size_t d_t = 32;
    size_t depth = 2;
    size_t heads = 4;
    size_t max_seq = 64;
    uint64_t seed = 0;

    void validate() const;
    nlohmann::json to_json() const;
    static ToyLMConfig from_json(const nlohmann::json& j);
};

struct KvCache {
    std::vector<std::vector<double>> k, v;  // per layer, flat [len, d_t]
    size_t len = 0;
};

struct LmTape {
    std::vector<int64_t> text_ids;   // -1 at visual positions
    Tensor x0;                       // embeddings + positions
    std::vector<BlockTape> layers;
    Tensor x_out;                    // final hidden states
};

/// Decoder-only causal LM over multimodal token sequences. Rows are processed
/// strictly one at a time in position order, so full-sequence logits and
/// incremental KV-cache decoding run the exact same arithmetic.
class ToyLM {
public:
    explicit ToyLM(const ToyLMConfig& cfg);
    const ToyLMConfig& config() const { return cfg_; }
    const std::vector<Param>& params() const { return params_; }
    std::vector<Param>& params() { return params_; }
    const Tensor& param(const std::string& name) const;
    Tensor& param(const std::string& name);

    Tensor embed_text(const std::vector<int64_t>& ids) const;  // [n, d_t], no positions

    Tensor logits(const TokenSequence& seq) const;             // [N, vocab]
    Tensor logits(const TokenSequence& seq, LmTape& tape) const;
    // dlogits: [N, vocab]. Accumulates LM parameter grads (including embedding
    // rows for text positions) and returns the gradient w.r.t. the sequence
    // embeddings; visual rows belong to the projector.
    Tensor backward(const LmTape& tape, const Tensor& dlogits, GradMap& grads) const;

    // greedy decoding; ties break toward the lowest id
    std::vector<int64_t> generate(const TokenSequence& prompt, size_t max_new) const;

private:
    friend class GreedyDecoder;
    Tensor forward_rows(const Tensor& rows, size_t start, KvCache& cache, LmTape* tape) const;
    ToyLMConfig cfg_;
    std::vector<Param> params_;
};

/// Incremental greedy decoding state. The token fed to the model is deferred
/// until the following next() call, so generating L tokens touches exactly
/// prompt+L-1 positions.
class GreedyDecoder {
public:
    GreedyDecoder(const ToyLM& lm, const TokenSequence& prompt);
    int64_t next();
    size_t prompt_tokens() const { return prompt_len_; }
    size_t max_new_tokens() const;   // conservative: max_seq - prompt length

private:
    const ToyLM* lm_;
    KvCache cache_;
    Tensor last_logits_;             // [1, vocab]
    int64_t pending_ = -1;
    size_t fed_ = 0;
    size_t prompt_len_ = 0;
};

struct PipelineConfig {
    VisionStubConfig vision;
    ProjectorSpec projector;
    ToyLMConfig lm;

    void validate() const;
    nlohmann::json to_json() const;
    static PipelineConfig from_json(const nlohmann::json& j);
    static PipelineConfig load(const std::string& path);
};

class VlmPipeline {
public:
    explicit VlmPipeline(const PipelineConfig& cfg);
    const PipelineConfig& config() const { return cfg_; }
    const VisionStub& vision() const { return vision_; }
    VisionStub& vision() { return vision_; }
    const Projector& projector() const { return projector_; }
    Projector& projector() { return projector_; }
    const ToyLM& lm() const { return lm_; }
    ToyLM& lm() { return lm_; }

    Tensor project_image(const Tensor& image) const;
    // image may be an empty tensor (text-only prompt); text_ids may be empty
    TokenSequence build_prompt(const Tensor& image, const std::vector<int64_t>& text_ids) const;
    std::vector<int64_t> generate(const TokenSequence& prompt, size_t max_new) const;

private:
    PipelineConfig cfg_;
    VisionStub vision_;
    Projector projector_;
    ToyLM lm_;
};

}  // namespace tinyvlm
