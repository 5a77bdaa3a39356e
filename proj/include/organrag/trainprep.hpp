#pragma once

// Oracle-mixed supervision samples: perplexity-percentile target marking,
// context assembly (ground-truth or retrieved), and loss-mask spans.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "organrag/orchestrator.hpp"

namespace organrag {

enum class PercentileScope { Report, Corpus };

std::string_view to_string(PercentileScope s);
PercentileScope parse_percentile_scope(std::string_view name);

struct TrainPrepConfig {
    double percentile = 80.0;
    double p_oracle = 0.7;
    int k_rag_max = 4;
    int oracle_count_min = 1;
    int oracle_count_max = 2;
    std::uint64_t seed = 0;
    PercentileScope scope = PercentileScope::Report;
};

void validate(const TrainPrepConfig& cfg);

/// Half-open character range [start, end) in the space-joined sequence.
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;
    bool operator==(const Span&) const = default;
};

struct TrainingSample {
    std::string study_id;
    std::vector<std::string> sentence_sequence;
    std::vector<std::size_t> rag_positions;  // indices of "[RAG]" entries
    std::vector<Span> context_spans;
    std::vector<Span> mask_spans;
    std::vector<bool> oracle_flags;
    // Per injection: the report sentence it precedes, the report positions
    // the oracle context came from (empty when retrieved), and whether an
    // oracle draw had to fall back to retrieval.
    std::vector<std::size_t> target_indices;
    std::vector<std::vector<std::size_t>> oracle_sources;
    std::vector<bool> fallback_flags;

    bool operator==(const TrainingSample&) const = default;
};

/// Linear-interpolation percentile (the numpy default), p in [0, 100].
double percentile(std::span<const double> values, double p);

/// Indices whose value is strictly above `threshold`.
std::vector<std::size_t> mark_above(std::span<const double> perplexities, double threshold);

/// Indices strictly above the report's own `p`-th percentile.
std::vector<std::size_t> mark_rag_targets(std::span<const double> perplexities, double p);

/// Keeps the `k` highest-perplexity targets (ties by lower index), sorted by position.
std::vector<std::size_t> cap_targets(std::span<const std::size_t> targets, std::span<const double> perplexities,
                                     std::size_t k);

struct ReportRecord {
    std::string study_id;
    std::vector<std::string> sentences;
    std::vector<Organ> organs;  // per sentence; Other when unknown
    bool operator==(const ReportRecord&) const = default;
};

/// RNG seed for one report, derived from the run seed and the study id.
std::uint64_t report_seed(std::uint64_t seed, std::string_view study_id);

/// Builds one sample. `targets` must index `report.sentences` and are capped
/// at k_rag_max. A retrieved context that comes back empty or fails drops
/// the target from the sample.
TrainingSample assemble_oracle_mixed(const ReportRecord& report, std::span<const std::size_t> targets,
                                     std::span<const double> perplexities, ContextRetriever* retriever,
                                     const TrainPrepConfig& cfg);

/// Sets mask_spans = context_spans. Throws DomainError on overlapping spans.
TrainingSample mask_context_spans(TrainingSample sample);

/// Throws DomainError describing the first broken invariant.
void validate_sample(const TrainingSample& sample, std::optional<int> k_rag_max = std::nullopt);

/// The sequence as one string (entries joined by single spaces); spans index into it.
std::string joined_text(const TrainingSample& sample);

nlohmann::json to_json(const TrainingSample& s);
TrainingSample sample_from_json(const nlohmann::json& j);

std::size_t serialize_samples(std::span<const TrainingSample> samples, const std::filesystem::path& path);
std::vector<TrainingSample> load_samples(const std::filesystem::path& path);

/// reports.jsonl: {"study_id", "sentences": [...], "organs": [...]}.
std::vector<ReportRecord> load_reports(const std::filesystem::path& path);
void save_reports(std::span<const ReportRecord> reports, const std::filesystem::path& path);

/// perplexities.jsonl: {"study_id", "perplexities": [...]}.
std::map<std::string, std::vector<double>> load_perplexities(const std::filesystem::path& path);
void save_perplexities(const std::map<std::string, std::vector<double>>& values, const std::filesystem::path& path);

/// Whole-corpus preparation. With a database, retrieved contexts come from a
/// leave-one-out DatabaseRetriever per report; without one every oracle
/// fallback and non-oracle draw drops its target. Output order follows
/// `reports` and does not depend on `threads`.
std::vector<TrainingSample> prepare_training_samples(std::span<const ReportRecord> reports,
                                                     const std::map<std::string, std::vector<double>>& perplexities,
                                                     const SentenceDB* db, const RetrievalConfig& retrieval_cfg,
                                                     const TrainPrepConfig& cfg, unsigned threads = 1);

}  // namespace organrag
