#include "organrag/trainprep.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "organrag/parallel.hpp"
#include "organrag/rng.hpp"

namespace organrag {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(PercentileScope s) { return s == PercentileScope::Report ? "report" : "corpus"; }

PercentileScope parse_percentile_scope(std::string_view name) {
    if (name == "report") return PercentileScope::Report;
    if (name == "corpus") return PercentileScope::Corpus;
    throw DomainError("unknown percentile scope '" + std::string(name) + "' (expected report | corpus)");
}

void validate(const TrainPrepConfig& cfg) {
    if (!(cfg.percentile > 0.0 && cfg.percentile < 100.0)) throw DomainError("trainprep: percentile must be in (0,100)");
    if (!(cfg.p_oracle >= 0.0 && cfg.p_oracle <= 1.0)) throw DomainError("trainprep: p_oracle must be in [0,1]");
    if (cfg.k_rag_max < 0) throw DomainError("trainprep: k_rag_max must be >= 0");
    if (cfg.oracle_count_min < 1 || cfg.oracle_count_max > 2 || cfg.oracle_count_min > cfg.oracle_count_max)
        throw DomainError("trainprep: oracle context count range must lie within [1,2]");
}

double percentile(std::span<const double> values, double p) {
    if (values.empty()) throw DomainError("percentile: no values");
    if (!(p >= 0.0 && p <= 100.0)) throw DomainError("percentile: p must be in [0,100]");
    std::vector<double> v(values.begin(), values.end());
    std::sort(v.begin(), v.end());
    const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

std::vector<std::size_t> mark_above(std::span<const double> perplexities, double threshold) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < perplexities.size(); ++i)
        if (perplexities[i] > threshold) out.push_back(i);
    return out;
}

std::vector<std::size_t> mark_rag_targets(std::span<const double> perplexities, double p) {
    if (perplexities.empty()) throw DomainError("mark_rag_targets: at least one sentence required");
    return mark_above(perplexities, percentile(perplexities, p));
}

std::vector<std::size_t> cap_targets(std::span<const std::size_t> targets, std::span<const double> perplexities,
                                     std::size_t k) {
    std::vector<std::size_t> t(targets.begin(), targets.end());
    for (auto i : t)
        if (i >= perplexities.size()) throw DomainError("cap_targets: target index out of range");
    std::sort(t.begin(), t.end());
    t.erase(std::unique(t.begin(), t.end()), t.end());
    if (t.size() > k) {
        std::stable_sort(t.begin(), t.end(),
                         [&](std::size_t a, std::size_t b) { return perplexities[a] > perplexities[b]; });
        t.resize(k);
        std::sort(t.begin(), t.end());
    }
    return t;
}

std::uint64_t report_seed(std::uint64_t seed, std::string_view study_id) { return derive_seed(seed, study_id); }

TrainingSample assemble_oracle_mixed(const ReportRecord& report, std::span<const std::size_t> targets,
                                     std::span<const double> perplexities, ContextRetriever* retriever,
                                     const TrainPrepConfig& cfg) {
    validate(cfg);
    const std::size_t n = report.sentences.size();
    if (perplexities.size() != n)
        throw DomainError("assemble_oracle_mixed: " + report.study_id + " has " + std::to_string(n) +
                          " sentences but " + std::to_string(perplexities.size()) + " perplexities");
    const auto kept = cap_targets(targets, perplexities, static_cast<std::size_t>(cfg.k_rag_max));

    std::mt19937_64 rng(report_seed(cfg.seed, report.study_id));
    TrainingSample s;
    s.study_id = report.study_id;

    std::size_t offset = 0;
    auto push = [&](std::string entry) {
        if (!s.sentence_sequence.empty()) ++offset;  // joining space
        const Span span{offset, offset + entry.size()};
        offset = span.end;
        s.sentence_sequence.push_back(std::move(entry));
        return span;
    };

    std::size_t next_target = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (next_target < kept.size() && kept[next_target] == i) {
            ++next_target;
            bool oracle = unit_uniform(rng) < cfg.p_oracle;
            bool fallback = false;
            std::vector<std::size_t> sources;
            std::vector<std::string> context;
            if (oracle) {
                std::vector<std::size_t> later(n - i - 1);
                std::iota(later.begin(), later.end(), i + 1);
                if (later.empty()) {
                    oracle = false;
                    fallback = true;
                } else {
                    const auto span = static_cast<std::size_t>(cfg.oracle_count_max - cfg.oracle_count_min + 1);
                    const std::size_t want = std::min<std::size_t>(
                        static_cast<std::size_t>(cfg.oracle_count_min) + uniform_index(rng, span), later.size());
                    for (std::size_t j = 0; j < want; ++j)  // partial Fisher-Yates
                        std::swap(later[j], later[j + uniform_index(rng, later.size() - j)]);
                    sources.assign(later.begin(), later.begin() + static_cast<std::ptrdiff_t>(want));
                    std::sort(sources.begin(), sources.end());
                    for (auto src : sources) context.push_back(report.sentences[src]);
                }
            }
            if (!oracle && retriever) {
                const Organ organ = i < report.organs.size() ? report.organs[i] : Organ::Other;
                try {
                    context = retriever->retrieve(organ, report.sentences[i]).selected_texts();
                } catch (const std::exception&) {
                    context.clear();
                }
            }
            if (!context.empty()) {
                s.rag_positions.push_back(s.sentence_sequence.size());
                push(std::string(kRagToken));
                s.context_spans.push_back(push(wrap_context(context)));
                s.oracle_flags.push_back(oracle);
                s.target_indices.push_back(i);
                s.oracle_sources.push_back(std::move(sources));
                s.fallback_flags.push_back(fallback);
            }
        }
        push(report.sentences[i]);
    }
    return s;
}

TrainingSample mask_context_spans(TrainingSample sample) {
    auto spans = sample.context_spans;
    std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
    for (std::size_t i = 1; i < spans.size(); ++i)
        if (spans[i].start < spans[i - 1].end)
            throw DomainError("mask_context_spans: overlapping context spans in " + sample.study_id);
    sample.mask_spans = sample.context_spans;
    return sample;
}

std::string joined_text(const TrainingSample& sample) {
    std::string out;
    for (std::size_t i = 0; i < sample.sentence_sequence.size(); ++i) {
        if (i) out += ' ';
        out += sample.sentence_sequence[i];
    }
    return out;
}

void validate_sample(const TrainingSample& s, std::optional<int> k_rag_max) {
    auto fail = [&](const std::string& why) { throw DomainError("sample " + s.study_id + ": " + why); };
    const std::size_t m = s.rag_positions.size();
    if (s.context_spans.size() != m || s.oracle_flags.size() != m || s.target_indices.size() != m ||
        s.oracle_sources.size() != m || s.fallback_flags.size() != m)
        fail("per-injection fields disagree in length");
    if (k_rag_max && m > static_cast<std::size_t>(*k_rag_max)) fail("more [RAG] positions than k_rag_max");
    if (s.mask_spans != s.context_spans) fail("mask_spans differ from context_spans");

    const std::string text = joined_text(s);
    for (std::size_t j = 0; j < m; ++j) {
        const std::size_t p = s.rag_positions[j];
        if (p + 2 >= s.sentence_sequence.size()) fail("[RAG] marker without context and sentence");
        if (s.sentence_sequence[p] != kRagToken) fail("rag position " + std::to_string(p) + " is not a [RAG] marker");
        const Span& sp = s.context_spans[j];
        if (j > 0 && sp.start < s.context_spans[j - 1].end) fail("context spans overlap or are unsorted");
        if (sp.end > text.size() || sp.start >= sp.end) fail("context span out of range");
        const std::string_view payload = std::string_view(text).substr(sp.start, sp.end - sp.start);
        if (payload != s.sentence_sequence[p + 1]) fail("context span does not cover its block");
        if (!matches_context_grammar(payload)) fail("context block violates delimiter grammar");
        if (s.oracle_flags[j]) {
            if (s.oracle_sources[j].empty()) fail("oracle context without sources");
            for (auto src : s.oracle_sources[j])
                if (src <= s.target_indices[j]) fail("oracle context not drawn from a later sentence");
        } else if (!s.oracle_sources[j].empty()) {
            fail("retrieved context lists oracle sources");
        }
    }
}

json to_json(const TrainingSample& s) {
    auto spans = [](const std::vector<Span>& v) {
        json a = json::array();
        for (const auto& sp : v) a.push_back({sp.start, sp.end});
        return a;
    };
    return {{"study_id", s.study_id},
            {"sentence_sequence", s.sentence_sequence},
            {"rag_positions", s.rag_positions},
            {"context_spans", spans(s.context_spans)},
            {"mask_spans", spans(s.mask_spans)},
            {"oracle_flags", s.oracle_flags},
            {"target_indices", s.target_indices},
            {"oracle_sources", s.oracle_sources},
            {"fallback_flags", s.fallback_flags}};
}

TrainingSample sample_from_json(const json& j) {
    auto spans = [](const json& a) {
        std::vector<Span> v;
        for (const auto& p : a) v.push_back({p.at(0).get<std::size_t>(), p.at(1).get<std::size_t>()});
        return v;
    };
    TrainingSample s;
    s.study_id = j.at("study_id").get<std::string>();
    s.sentence_sequence = j.at("sentence_sequence").get<std::vector<std::string>>();
    s.rag_positions = j.at("rag_positions").get<std::vector<std::size_t>>();
    s.context_spans = spans(j.at("context_spans"));
    s.mask_spans = spans(j.at("mask_spans"));
    s.oracle_flags = j.at("oracle_flags").get<std::vector<bool>>();
    s.target_indices = j.at("target_indices").get<std::vector<std::size_t>>();
    s.oracle_sources = j.at("oracle_sources").get<std::vector<std::vector<std::size_t>>>();
    s.fallback_flags = j.at("fallback_flags").get<std::vector<bool>>();
    return s;
}

namespace {

std::ofstream open_out(const fs::path& path) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw LoadError(LoadErrorKind::Io, "cannot write " + path.string());
    return out;
}

template <typename Fn>
void for_each_json_line(const fs::path& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw LoadError(LoadErrorKind::Io, "cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            fn(json::parse(line));
        } catch (const json::exception& e) {
            throw LoadError(LoadErrorKind::Malformed, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const DomainError& e) {
            throw LoadError(LoadErrorKind::Malformed, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

}  // namespace

std::size_t serialize_samples(std::span<const TrainingSample> samples, const fs::path& path) {
    auto out = open_out(path);
    for (const auto& s : samples) out << to_json(s).dump() << '\n';
    out.flush();
    if (!out) throw LoadError(LoadErrorKind::Io, "write failed for " + path.string());
    return samples.size();
}

std::vector<TrainingSample> load_samples(const fs::path& path) {
    std::vector<TrainingSample> out;
    for_each_json_line(path, [&](const json& j) {
        out.push_back(sample_from_json(j));
        validate_sample(out.back());
    });
    return out;
}

std::vector<ReportRecord> load_reports(const fs::path& path) {
    std::vector<ReportRecord> out;
    for_each_json_line(path, [&](const json& j) {
        ReportRecord r;
        r.study_id = j.at("study_id").get<std::string>();
        r.sentences = j.at("sentences").get<std::vector<std::string>>();
        if (j.contains("organs"))
            for (const auto& o : j.at("organs")) r.organs.push_back(parse_organ(o.get<std::string>()));
        if (!r.organs.empty() && r.organs.size() != r.sentences.size())
            throw DomainError("organs and sentences differ in length for " + r.study_id);
        out.push_back(std::move(r));
    });
    return out;
}

void save_reports(std::span<const ReportRecord> reports, const fs::path& path) {
    auto out = open_out(path);
    for (const auto& r : reports) {
        json organs = json::array();
        for (Organ o : r.organs) organs.push_back(std::string(to_string(o)));
        out << json{{"study_id", r.study_id}, {"sentences", r.sentences}, {"organs", organs}}.dump() << '\n';
    }
}

std::map<std::string, std::vector<double>> load_perplexities(const fs::path& path) {
    std::map<std::string, std::vector<double>> out;
    for_each_json_line(path, [&](const json& j) {
        const auto id = j.at("study_id").get<std::string>();
        auto values = j.at("perplexities").get<std::vector<double>>();
        for (double v : values)
            if (!(std::isfinite(v) && v > 0.0)) throw DomainError("perplexities must be positive and finite");
        if (!out.emplace(id, std::move(values)).second) throw DomainError("duplicate study id " + id);
    });
    return out;
}

void save_perplexities(const std::map<std::string, std::vector<double>>& values, const fs::path& path) {
    auto out = open_out(path);
    for (const auto& [id, v] : values) out << json{{"study_id", id}, {"perplexities", v}}.dump() << '\n';
}

std::vector<TrainingSample> prepare_training_samples(std::span<const ReportRecord> reports,
                                                     const std::map<std::string, std::vector<double>>& perplexities,
                                                     const SentenceDB* db, const RetrievalConfig& retrieval_cfg,
                                                     const TrainPrepConfig& cfg, unsigned threads) {
    validate(cfg);
    validate(retrieval_cfg);
    std::vector<const std::vector<double>*> ppl(reports.size());
    std::vector<double> all;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        auto it = perplexities.find(reports[i].study_id);
        if (it == perplexities.end()) throw DomainError("no perplexities for study " + reports[i].study_id);
        ppl[i] = &it->second;
        all.insert(all.end(), it->second.begin(), it->second.end());
    }
    std::optional<double> corpus_threshold;
    if (cfg.scope == PercentileScope::Corpus && !all.empty()) corpus_threshold = percentile(all, cfg.percentile);

    std::optional<DatabaseLookupEncoder> encoder;
    if (db) encoder.emplace(*db);

    std::vector<TrainingSample> out(reports.size());
    parallel_for(reports.size(), threads, [&](std::size_t i) {
        const auto& r = reports[i];
        const auto& p = *ppl[i];
        std::vector<std::size_t> targets;
        if (!p.empty()) targets = corpus_threshold ? mark_above(p, *corpus_threshold) : mark_rag_targets(p, cfg.percentile);
        std::optional<DatabaseRetriever> retriever;
        if (db) {
            std::map<Organ, Eigen::VectorXd> queries;
            for (Organ o : kIndexedOrgans)
                if (auto q = db->image_embedding(o, r.study_id)) queries.emplace(o, std::move(*q));
            retriever.emplace(*db, *encoder, retrieval_cfg, std::move(queries), r.study_id);
        }
        out[i] = mask_context_spans(
            assemble_oracle_mixed(r, targets, p, retriever ? &*retriever : nullptr, cfg));
    });
    return out;
}

}  // namespace organrag
