#include "tinyvlm/bench.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <set>

namespace tinyvlm {

using nlohmann::json;

PipelineGenerator::PipelineGenerator(const VlmPipeline& pipeline, TokenSequence prompt)
    : pipeline_(&pipeline), prompt_(std::move(prompt)) {
    prompt_.validate();
    if (prompt_.length() == 0) throw std::invalid_argument("empty prompt");
}

void PipelineGenerator::start() {
    decoder_.emplace(pipeline_->lm(), prompt_);
    ids_.clear();
}

int64_t PipelineGenerator::step() {
    if (!decoder_) throw std::invalid_argument("step() before start()");
    const int64_t id = decoder_->next();
    ids_.push_back(id);
    return id;
}

size_t PipelineGenerator::max_new_tokens() const {
    return pipeline_->lm().config().max_seq - prompt_.length();
}

json BenchReport::to_json() const {
    return json{{"label", label},
                {"n_generated", n_generated},
                {"prefill_tokens", prefill_tokens},
                {"repeats", repeats},
                {"total_s", total_s},
                {"eval_avg_tokens_per_s", eval_avg},
                {"prefill_s", prefill_s},
                {"per_repeat_s", per_repeat_s},
                {"per_repeat_prefill_s", per_repeat_prefill_s}};
}

static double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

BenchReport measure_generation(TokenGenerator& gen, size_t n_out, size_t repeats,
                               const std::string& label) {
    if (n_out < 1) throw std::invalid_argument("n_out must be >= 1");
    if (repeats < 1) throw std::invalid_argument("repeats must be >= 1");
    if (gen.max_new_tokens() < n_out) {
        throw std::invalid_argument("requested " + std::to_string(n_out) +
                                    " output tokens but the context window allows only " +
                                    std::to_string(gen.max_new_tokens()));
    }

    // warmup, untimed
    gen.start();
    for (size_t i = 0; i < n_out; ++i) gen.step();

    BenchReport report;
    report.label = label;
    report.n_generated = n_out;
    report.prefill_tokens = gen.prefill_tokens();
    report.repeats = repeats;
    using clock = std::chrono::steady_clock;
    for (size_t r = 0; r < repeats; ++r) {
        const auto t0 = clock::now();
        gen.start();
        const auto t1 = clock::now();
        for (size_t i = 0; i < n_out; ++i) gen.step();
        const auto t2 = clock::now();
        report.per_repeat_prefill_s.push_back(std::chrono::duration<double>(t1 - t0).count());
        report.per_repeat_s.push_back(std::chrono::duration<double>(t2 - t1).count());
    }
    report.prefill_s = median(report.per_repeat_prefill_s);
    report.total_s = median(report.per_repeat_s);
    report.eval_avg = static_cast<double>(n_out) / report.total_s;
    return report;
}

void ScoreRow::validate() const {
    auto pct = [](double v, const char* name) {
        if (!(v >= 0.0 && v <= 100.0)) {
            throw std::invalid_argument(std::string(name) + " = " + std::to_string(v) +
                                        " outside [0, 100]");
        }
    };
    pct(gqa, "gqa");
    pct(sqa_i, "sqa_i");
    pct(vqa_t, "vqa_t");
    pct(pope, "pope");
    pct(mmb_dev, "mmb_dev");
    if (!(mme_p >= 0.0 && mme_p <= 2000.0)) {
        throw std::invalid_argument("mme_p = " + std::to_string(mme_p) + " outside [0, 2000]");
    }
}

double round_half_up(double v, int decimals) {
    const double scale = std::pow(10.0, decimals);
    return std::floor(v * scale + 0.5) / scale;
}

double aggregate_scores(const ScoreRow& row) {
    row.validate();
    const double mme_pct = 100.0 * (row.mme_p / 2000.0);
    const double avg = (row.gqa + row.sqa_i + row.vqa_t + row.pope + mme_pct + row.mmb_dev) / 6.0;
    return round_half_up(avg, 1);
}

std::string format_fixed(double v, int decimals) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, decimals);
    return std::string(buf, res.ptr);
}

std::string format_one_decimal(double v) {
    const long long scaled = static_cast<long long>(std::floor(v * 10.0 + 0.5));
    return std::to_string(scaled / 10) + "." + std::to_string(std::llabs(scaled % 10));
}

std::string format_millions(size_t count) {
    const unsigned long long hundredths = (static_cast<unsigned long long>(count) * 100 + 500000) / 1000000;
    return std::to_string(hundredths / 100) + "." +
           (hundredths % 100 < 10 ? "0" : "") + std::to_string(hundredths % 100) + "M";
}

std::string report_table(const std::vector<ReportRow>& rows) {
    std::set<std::string> seen;
    bool any_bench = false;
    for (const ReportRow& r : rows) {
        if (!seen.insert(r.label).second) {
            throw std::invalid_argument("duplicate label \"" + r.label + "\"");
        }
        if (r.bench) any_bench = true;
    }
    std::string out = "label,gqa,sqa_i,vqa_t,pope,mme_p,mmb_dev,avg";
    if (any_bench) out += ",eval_avg_tokens_per_s,total_s";
    out += '\n';
    for (const ReportRow& r : rows) {
        out += r.label;
        out += ',' + format_one_decimal(r.scores.gqa);
        out += ',' + format_one_decimal(r.scores.sqa_i);
        out += ',' + format_one_decimal(r.scores.vqa_t);
        out += ',' + format_one_decimal(r.scores.pope);
        out += ',' + format_one_decimal(r.scores.mme_p);
        out += ',' + format_one_decimal(r.scores.mmb_dev);
        out += ',' + format_one_decimal(aggregate_scores(r.scores));
        if (any_bench) {
            if (r.bench) {
                out += ',' + format_fixed(r.bench->eval_avg, 2);
                out += ',' + format_fixed(r.bench->total_s, 2);
            } else {
                out += ",,";
            }
        }
        out += '\n';
    }
    return out;
}

}  // namespace tinyvlm
