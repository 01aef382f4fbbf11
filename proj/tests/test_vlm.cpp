#include "doctest.h"

#include "oracles.hpp"
#include "tinyvlm/train.hpp"
#include "tinyvlm/vlm.hpp"

#include <cmath>

using namespace tinyvlm;
namespace op = tinyvlm::ops;

namespace {

PipelineConfig tiny_config(uint64_t seed = 0) {
    PipelineConfig cfg;
    cfg.vision = VisionStubConfig{16, 4, 8, 1, seed, true};
    cfg.projector = ProjectorSpec{ProjectorVariant::Ldpv2, 8, 16, 4, 2, seed + 1};
    cfg.lm = ToyLMConfig{11, 16, 2, 2, 32, seed + 2};
    return cfg;
}

TokenSequence text_prompt(const ToyLM& lm, const std::vector<int64_t>& ids) {
    return concat_multimodal(Tensor(), lm.embed_text(ids), ids);
}

}  // namespace

TEST_CASE("vision stub: paper-scale geometry yields 576 tokens") {
    VisionStubConfig cfg{336, 14, 24, 0, 5, true};
    VisionStub vision(cfg);
    CHECK(cfg.tokens() == 576);
    Rng rng(41);
    Tensor image = oracle::random_tensor(rng, {336, 336, 3});
    Tensor f_v = vision.encode(image);
    CHECK(f_v.shape() == std::vector<size_t>{576, 24});
    CHECK(f_v.all_finite());
}

TEST_CASE("vision stub at depth 0 is the patch embedding, per the loop oracle") {
    VisionStubConfig cfg{48, 4, 10, 0, 6, true};
    VisionStub vision(cfg);
    Rng rng(42);
    Tensor image = oracle::random_tensor(rng, {48, 48, 3});
    Tensor got = vision.encode(image);

    const Tensor& w = vision.param("patch.weight");
    const Tensor& b = vision.param("patch.bias");
    const size_t gs = 12, patch = 4;
    for (size_t t = 0; t < gs * gs; ++t) {
        const size_t pr = t / gs, pc = t % gs;
        for (size_t o = 0; o < 10; ++o) {
            double acc = b[o];
            for (size_t ph = 0; ph < patch; ++ph) {
                for (size_t pw = 0; pw < patch; ++pw) {
                    for (size_t c = 0; c < 3; ++c) {
                        acc += w.at(o, (ph * patch + pw) * 3 + c) *
                               image.at(pr * patch + ph, pc * patch + pw, c);
                    }
                }
            }
            CHECK(std::fabs(got.at(t, o) - acc) <= 1e-12);
        }
    }
}

TEST_CASE("vision stub is frozen and deterministic") {
    VisionStubConfig cfg{16, 4, 8, 2, 7, true};
    VisionStub vision(cfg);
    for (const Param& p : vision.params()) CHECK_FALSE(p.trainable);
    Rng rng(43);
    Tensor image = oracle::random_tensor(rng, {16, 16, 3});
    CHECK(oracle::bitwise_equal(vision.encode(image), vision.encode(image)));

    Tensor wrong = oracle::random_tensor(rng, {12, 12, 3});
    CHECK_THROWS_AS(vision.encode(wrong), std::invalid_argument);
    CHECK_THROWS_AS(VisionStubConfig({15, 4, 8, 0, 0, true}).validate(), std::invalid_argument);
}

TEST_CASE("concat_multimodal: visual prefix then text") {
    Rng rng(44);
    Tensor visual = oracle::random_tensor(rng, {144, 12});
    Tensor text = oracle::random_tensor(rng, {16, 12});
    std::vector<int64_t> ids(16, 3);
    TokenSequence seq = concat_multimodal(visual, text, ids);
    CHECK(seq.length() == 160);
    for (size_t i = 0; i < 144; ++i) {
        CHECK(seq.modality[i] == Modality::Visual);
        CHECK(seq.ids[i] == -1);
    }
    for (size_t i = 144; i < 160; ++i) {
        CHECK(seq.modality[i] == Modality::Text);
        CHECK(seq.ids[i] == 3);
    }
    CHECK(seq.embeddings.at(0, 0) == visual.at(0, 0));
    CHECK(seq.embeddings.at(144, 0) == text.at(0, 0));

    TokenSequence pure = concat_multimodal(visual, Tensor());
    CHECK(pure.length() == 144);

    Tensor narrow = oracle::random_tensor(rng, {4, 7});
    CHECK_THROWS_AS(concat_multimodal(visual, narrow), std::invalid_argument);
    CHECK_THROWS_AS(concat_multimodal(Tensor(), Tensor()), std::invalid_argument);
}

TEST_CASE("token sequence invariants: visual positions never carry ids") {
    Rng rng(99);
    TokenSequence seq = concat_multimodal(oracle::random_tensor(rng, {2, 4}),
                                          oracle::random_tensor(rng, {1, 4}), {5});
    CHECK_NOTHROW(seq.validate());
    seq.ids[0] = 3;  // a visual slot
    CHECK_THROWS_AS(seq.validate(), std::invalid_argument);
    seq.ids[0] = -1;
    seq.modality.pop_back();  // tag/id lengths now disagree
    CHECK_THROWS_AS(seq.validate(), std::invalid_argument);
}

TEST_CASE("token sequences round-trip through json with their tags") {
    Rng rng(45);
    Tensor visual = oracle::random_tensor(rng, {4, 6});
    Tensor text = oracle::random_tensor(rng, {3, 6});
    TokenSequence seq = concat_multimodal(visual, text, {5, 8, 2});
    TokenSequence back = TokenSequence::from_json(seq.to_json());
    CHECK(back.modality == seq.modality);
    CHECK(back.ids == seq.ids);
    CHECK(oracle::bitwise_equal(back.embeddings, seq.embeddings));
}

TEST_CASE("causality: perturbing a later token never moves earlier logits") {
    PipelineConfig cfg = tiny_config(11);
    ToyLM lm(cfg.lm);
    Rng rng(46);
    std::vector<int64_t> ids{1, 4, 7, 2, 9, 3};
    TokenSequence seq = text_prompt(lm, ids);
    Tensor base = lm.logits(seq);

    for (size_t j = 2; j < ids.size(); ++j) {
        TokenSequence mutated = seq;
        for (size_t c = 0; c < cfg.lm.d_t; ++c) {
            mutated.embeddings.at(j, c) += rng.uniform(-2.0, 2.0);
        }
        Tensor out = lm.logits(mutated);
        for (size_t i = 0; i < j; ++i) {
            for (size_t v = 0; v < cfg.lm.vocab; ++v) {
                REQUIRE(out.at(i, v) == base.at(i, v));  // bitwise
            }
        }
    }
}

TEST_CASE("depth 0 reduces the LM to unembedding of embeddings") {
    ToyLMConfig cfg{13, 12, 0, 2, 16, 3};
    ToyLM lm(cfg);
    std::vector<int64_t> ids{0, 5, 12, 7};
    TokenSequence seq = text_prompt(lm, ids);
    Tensor got = lm.logits(seq);

    Tensor x = lm.embed_text(ids);
    const Tensor& pos = lm.param("pos.weight");
    for (size_t r = 0; r < ids.size(); ++r) {
        for (size_t c = 0; c < cfg.d_t; ++c) x.at(r, c) += pos.at(r, c);
    }
    Tensor want = oracle::linear(x, lm.param("unembed.weight"), lm.param("unembed.bias"));
    CHECK(oracle::max_abs_err(got, want) <= 1e-12);
    CHECK(got.all_finite());
}

TEST_CASE("rigged unembedding always emits token 7") {
    ToyLMConfig cfg{11, 16, 1, 2, 40, 9};
    ToyLM lm(cfg);
    Tensor& wu = lm.param("unembed.weight");
    for (size_t i = 0; i < wu.numel(); ++i) wu[i] = 0.0;
    Tensor& bu = lm.param("unembed.bias");
    for (size_t i = 0; i < bu.numel(); ++i) bu[i] = 0.0;
    bu[7] = 10.0;
    TokenSequence prompt = text_prompt(lm, {1, 2, 3});
    std::vector<int64_t> out = lm.generate(prompt, 12);
    for (int64_t id : out) CHECK(id == 7);
}

TEST_CASE("greedy ties break toward the lowest id") {
    ToyLMConfig cfg{6, 8, 0, 1, 8, 2};
    ToyLM lm(cfg);
    Tensor& wu = lm.param("unembed.weight");
    for (size_t i = 0; i < wu.numel(); ++i) wu[i] = 0.0;
    Tensor& bu = lm.param("unembed.bias");
    for (size_t i = 0; i < bu.numel(); ++i) bu[i] = 0.0;  // all logits equal
    TokenSequence prompt = text_prompt(lm, {1});
    CHECK(lm.generate(prompt, 3) == std::vector<int64_t>{0, 0, 0});
}

TEST_CASE("cached decoding equals re-forward decoding token for token") {
    PipelineConfig cfg = tiny_config(21);
    VlmPipeline pipeline(cfg);
    Rng rng(47);

    for (int trial = 0; trial < 20; ++trial) {
        // random prompt: sometimes text-only, sometimes image + text
        TokenSequence prompt;
        if (trial % 3 == 0) {
            std::vector<int64_t> ids;
            const size_t n = 1 + rng.next_below(5);
            for (size_t i = 0; i < n; ++i) {
                ids.push_back(static_cast<int64_t>(rng.next_below(cfg.lm.vocab)));
            }
            prompt = pipeline.build_prompt(Tensor(), ids);
        } else {
            Tensor image = oracle::random_tensor(rng, {16, 16, 3});
            std::vector<int64_t> ids{static_cast<int64_t>(rng.next_below(cfg.lm.vocab))};
            prompt = pipeline.build_prompt(image, ids);
        }
        const size_t max_new = 1 + rng.next_below(8);

        std::vector<int64_t> cached = pipeline.generate(prompt, max_new);

        // independent oracle: re-run the full forward for every new token
        std::vector<int64_t> uncached;
        TokenSequence seq = prompt;
        for (size_t stepi = 0; stepi < max_new; ++stepi) {
            Tensor lg = pipeline.lm().logits(seq);
            const size_t last = seq.length() - 1;
            size_t best = 0;
            for (size_t v = 1; v < cfg.lm.vocab; ++v) {
                if (lg.at(last, v) > lg.at(last, best)) best = v;
            }
            uncached.push_back(static_cast<int64_t>(best));
            TokenSequence next = concat_multimodal(
                seq.embeddings, pipeline.lm().embed_text({static_cast<int64_t>(best)}),
                {static_cast<int64_t>(best)});
            // keep the original modality tags for the prefix
            for (size_t i = 0; i < seq.length(); ++i) {
                next.modality[i] = seq.modality[i];
                next.ids[i] = seq.ids[i];
            }
            seq = next;
        }
        REQUIRE(cached == uncached);
    }
}

TEST_CASE("generation is deterministic and respects the context window") {
    PipelineConfig cfg = tiny_config(31);
    VlmPipeline pipeline(cfg);
    Rng rng(48);
    Tensor image = oracle::random_tensor(rng, {16, 16, 3});
    TokenSequence prompt = pipeline.build_prompt(image, {1, 2});

    CHECK(pipeline.generate(prompt, 6) == pipeline.generate(prompt, 6));

    // prompt is 4 visual + 2 text = 6 tokens; max_seq 32
    CHECK_NOTHROW(pipeline.generate(prompt, 26));
    try {
        pipeline.generate(prompt, 27);
        FAIL("expected overflow");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("step 27") != std::string::npos);
    }

    TokenSequence too_long = text_prompt(pipeline.lm(), std::vector<int64_t>(33, 1));
    CHECK_THROWS_AS(pipeline.lm().logits(too_long), std::invalid_argument);
}

TEST_CASE("end-to-end gradients reach the projector through the LM") {
    // d_v=8, d_t=16, grid 4x4, vocab 11
    PipelineConfig cfg = tiny_config(51);
    VlmPipeline pipeline(cfg);
    Rng rng(49);
    TrainSample sample{oracle::random_tensor(rng, {16, 16, 3}), {4, 9, 2, 7}};

    PipelineGrads grads;
    const double loss = sample_loss_and_grads(pipeline, sample, 1, &grads, false);
    CHECK(loss > 0.0);

    // projector parameters, checked against central differences at 1e-5
    for (const Param& prm : pipeline.projector().params()) {
        REQUIRE(grads.projector.count(prm.name) == 1);
        Tensor fd = op::finite_diff_grad(
            [&](const Tensor& t) {
                VlmPipeline probe(cfg);
                probe.projector().param(prm.name) = t;
                return sample_loss_and_grads(probe, sample, 1, nullptr, false);
            },
            prm.value, 1e-5);
        CHECK_MESSAGE(oracle::max_rel_err(grads.projector.at(prm.name), fd) <= 1e-5, prm.name);
    }

    // a representative LM matrix, same tolerance
    for (const std::string name : {"blocks.0.attn.wq.weight", "unembed.weight", "embed.weight"}) {
        REQUIRE(grads.base.count(name) == 1);
        Tensor fd = op::finite_diff_grad(
            [&](const Tensor& t) {
                VlmPipeline probe(cfg);
                probe.lm().param(name) = t;
                return sample_loss_and_grads(probe, sample, 1, nullptr, false);
            },
            pipeline.lm().param(name), 1e-5);
        CHECK_MESSAGE(oracle::max_rel_err(grads.base.at(name), fd) <= 1e-5, name);
    }

    // frozen vision: no gradient entries at all
    for (const Param& prm : pipeline.vision().params()) {
        CHECK(grads.base.count(prm.name) == 0);
        CHECK(grads.projector.count(prm.name) == 0);
    }
}

TEST_CASE("trainable vision gradients also check out against finite differences") {
    PipelineConfig cfg = tiny_config(61);
    cfg.vision.frozen = false;
    cfg.vision.depth = 1;
    VlmPipeline pipeline(cfg);
    Rng rng(50);
    TrainSample sample{oracle::random_tensor(rng, {16, 16, 3}), {4, 9}};

    PipelineGrads grads;
    sample_loss_and_grads(pipeline, sample, 1, &grads, true);
    for (const std::string name : {"patch.weight", "enc.0.attn.wv.weight", "enc.0.mlp.fc1.weight"}) {
        REQUIRE(grads.base.count(name) == 1);
        Tensor fd = op::finite_diff_grad(
            [&](const Tensor& t) {
                VlmPipeline probe(cfg);
                probe.vision().param(name) = t;
                return sample_loss_and_grads(probe, sample, 1, nullptr, false);
            },
            pipeline.vision().param(name), 1e-5);
        CHECK_MESSAGE(oracle::max_rel_err(grads.base.at(name), fd) <= 1e-5, name);
    }
}

TEST_CASE("pipeline config json round-trips and cross-checks widths") {
    PipelineConfig cfg = tiny_config(71);
    PipelineConfig back = PipelineConfig::from_json(cfg.to_json());
    CHECK(back.vision.image_side == cfg.vision.image_side);
    CHECK(back.projector.d_t == cfg.projector.d_t);
    CHECK(back.lm.vocab == cfg.lm.vocab);

    PipelineConfig bad = cfg;
    bad.lm.d_t = cfg.lm.d_t * 2;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    PipelineConfig bad2 = cfg;
    bad2.vision.d_v = cfg.vision.d_v + 1;
    CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
}
