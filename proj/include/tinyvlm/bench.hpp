#pragma once

#include "tinyvlm/vlm.hpp"

#include <optional>

namespace tinyvlm {

/// Timing surface: prefill a fixed prompt, then emit tokens one at a time.
class TokenGenerator {
public:
    virtual ~TokenGenerator() = default;
    virtual void start() = 0;    // (re)ingest the prompt; one call per repeat
    virtual int64_t step() = 0;  // produce the next token
    virtual size_t prefill_tokens() const = 0;
    virtual size_t max_new_tokens() const = 0;
};

class PipelineGenerator : public TokenGenerator {
public:
    PipelineGenerator(const VlmPipeline& pipeline, TokenSequence prompt);
    void start() override;
    int64_t step() override;
    size_t prefill_tokens() const override { return prompt_.length(); }
    size_t max_new_tokens() const override;
    const std::vector<int64_t>& ids() const { return ids_; }  // current run

private:
    const VlmPipeline* pipeline_;
    TokenSequence prompt_;
    std::optional<GreedyDecoder> decoder_;
    std::vector<int64_t> ids_;
};

struct BenchReport {
    std::string label;
    size_t n_generated = 0;
    size_t prefill_tokens = 0;
    size_t repeats = 0;
    double total_s = 0;    // median decode wall time across repeats
    double eval_avg = 0;   // n_generated / total_s, tokens per second
    double prefill_s = 0;  // median prompt-ingestion wall time
    std::vector<double> per_repeat_s;
    std::vector<double> per_repeat_prefill_s;

    nlohmann::json to_json() const;
};

constexpr size_t kDefaultBenchTokens = 256;

// One untimed warmup run, then `repeats` timed generations of exactly n_out
// tokens. Prefill and decode are timed separately; eval_avg comes from the
// decode time only. Construction and warmup never count.
BenchReport measure_generation(TokenGenerator& gen, size_t n_out = kDefaultBenchTokens,
                               size_t repeats = 3, const std::string& label = "");

struct ScoreRow {
    double gqa = 0, sqa_i = 0, vqa_t = 0, pope = 0, mme_p = 0, mmb_dev = 0;
    void validate() const;  // percentages in [0,100], mme_p in [0,2000]
};

// six-way average with the raw MME perception score renormalized to a
// percentage (score/2000*100); result rounded half-up to one decimal
double aggregate_scores(const ScoreRow& row);

struct ReportRow {
    std::string label;
    ScoreRow scores;
    std::optional<BenchReport> bench;
};

// CSV with the average recomputed per row; duplicate labels are rejected
std::string report_table(const std::vector<ReportRow>& rows);

double round_half_up(double v, int decimals);
std::string format_one_decimal(double v);
std::string format_fixed(double v, int decimals);  // locale-independent
std::string format_millions(size_t count);         // "6.32M", round half-up

}  // namespace tinyvlm
