#pragma once

// Adaptive retrieval decoding over an abstract sentence generator.
//
// The generator is asked for one sentence at a time. A returned empty text
// closes the current organ section; the loop then moves to the next organ of
// the plan. Under the adaptive policy a sentence flagged `emits_rag` is
// treated as a draft: it becomes the retrieval query, is rolled back, the
// retrieved sentences are injected into the context, and the generator is
// asked once more for the same position.

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include <json.hpp>

#include "organrag/retrieval.hpp"
#include "organrag/sentencedb.hpp"

namespace organrag {

inline constexpr std::string_view kRetStart = "<|ret_start|>";
inline constexpr std::string_view kRetEnd = "<|ret_end|>";
inline constexpr std::string_view kRagToken = "[RAG]";

enum class ContextKind { VisualStub, GeneratedSentence, InjectedContext };

struct ContextItem {
    ContextKind kind = ContextKind::GeneratedSentence;
    std::string payload;
    bool operator==(const ContextItem&) const = default;
};

/// "<|ret_start|> s1 s2 ... <|ret_end|>"
std::string wrap_context(std::span<const std::string> sentences);

/// True when `payload` is exactly one delimited block with nonempty content.
bool matches_context_grammar(std::string_view payload);

/// Appends one InjectedContext item; an empty retrieval leaves the context as is.
std::vector<ContextItem> inject_context(std::vector<ContextItem> context, std::span<const std::string> sentences);

struct GeneratedSentence {
    std::string text;  // empty = end of the current section
    bool emits_rag = false;
    double perplexity = 1.0;
};

class GeneratorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Generator {
public:
    virtual ~Generator() = default;
    virtual GeneratedSentence next_sentence(std::span<const ContextItem> context) = 0;
};

struct ScriptLine {
    std::string text;
    bool emits_rag = false;
    double perplexity = 1.0;
};

/// Replays a fixed script. The script position is derived from the context
/// (sentences so far plus section breaks consumed), so the mock is
/// stateless. When the last context item is injected context, the override
/// for the current sentence index is returned if one exists.
class ScriptedGenerator final : public Generator {
public:
    ScriptedGenerator(std::vector<ScriptLine> script, std::map<std::size_t, std::string> post_injection_overrides = {});

    GeneratedSentence next_sentence(std::span<const ContextItem> context) override;

    const std::vector<ScriptLine>& script() const { return script_; }
    const std::map<std::size_t, std::string>& overrides() const { return overrides_; }

private:
    std::vector<ScriptLine> script_;
    std::map<std::size_t, std::string> overrides_;
};

struct Script {
    std::vector<ScriptLine> lines;
    std::map<std::size_t, std::string> overrides;
    std::optional<std::string> study_id;
};

/// JSONL: one {"text","rag","perplexity"} per line, an {"override_index",
/// "text"} line per override, and optionally one {"study_id"} line.
Script load_script(const std::filesystem::path& path);
void save_script(const Script& script, const std::filesystem::path& path);

// ---------------------------------------------------------------------------

struct NoRag {};
struct FixedInterval {
    int n = 5;
};
struct Adaptive {
    int k_rag_max = 4;
};
using DecodePolicy = std::variant<NoRag, FixedInterval, Adaptive>;

/// "norag", "fixed:N", "adaptive:K" (also "adaptive" = K 4).
DecodePolicy parse_policy(std::string_view text);
std::string to_string(const DecodePolicy& p);

class RetrievalFailure : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Supplies retrieved sentences for an organ given a query sentence.
class ContextRetriever {
public:
    virtual ~ContextRetriever() = default;
    virtual RetrievalResult retrieve(Organ organ, std::string_view query) = 0;
};

/// Maps sentence text to an embedding in the database's text space.
class TextEncoder {
public:
    virtual ~TextEncoder() = default;
    virtual std::optional<Eigen::VectorXd> encode(std::string_view text) const = 0;
};

/// Looks the text up among database sentences (exact match after trimming
/// and lowercasing) and returns the mean of their stored embeddings.
class DatabaseLookupEncoder final : public TextEncoder {
public:
    explicit DatabaseLookupEncoder(const SentenceDB& db);
    std::optional<Eigen::VectorXd> encode(std::string_view text) const override;

private:
    const SentenceDB& db_;
    std::unordered_map<std::string, std::vector<std::string>> by_text_;
};

/// Two-Stage or Text2Text retrieval against a SentenceDB. Two-Stage needs
/// the study's organ image embeddings as coarse queries.
class DatabaseRetriever final : public ContextRetriever {
public:
    DatabaseRetriever(const SentenceDB& db, const TextEncoder& encoder, RetrievalConfig cfg,
                      std::map<Organ, Eigen::VectorXd> image_queries = {},
                      std::optional<std::string> exclude_study = std::nullopt);

    RetrievalResult retrieve(Organ organ, std::string_view query) override;

    const RetrievalConfig& config() const { return cfg_; }

private:
    const SentenceDB& db_;
    const TextEncoder& encoder_;
    RetrievalConfig cfg_;
    std::map<Organ, Eigen::VectorXd> image_queries_;
    std::optional<std::string> exclude_study_;
};

// ---------------------------------------------------------------------------
// Trace

namespace events {
struct OrganStarted {
    Organ organ;
};
struct SentenceEmitted {
    std::size_t index;
    std::string text;
    double perplexity;
};
struct TriggerFired {
    std::size_t sentence_index;
};
struct QueryDrafted {
    std::string text;
};
struct Retrieved {
    std::vector<std::string> sentence_ids;
    Strategy strategy;
};
struct RetrievalFailed {
    std::string reason;
};
struct RolledBack {
    std::size_t sentence_index;
};
struct ContextInjected {
    std::string delimited_text;
};
struct Regenerated {
    std::size_t index;
    std::string text;
    double perplexity;
};
}  // namespace events

using TraceEvent = std::variant<events::OrganStarted, events::SentenceEmitted, events::TriggerFired,
                                events::QueryDrafted, events::Retrieved, events::RetrievalFailed, events::RolledBack,
                                events::ContextInjected, events::Regenerated>;

std::string_view event_kind(const TraceEvent& e);

struct DecodeTrace {
    std::vector<TraceEvent> events;
    std::string final_report;
    int trigger_count = 0;
    bool aborted = false;
    std::string error;
};

/// Rebuilds the report from the event log alone.
std::string replay_report(const DecodeTrace& trace);

/// Checks the ordering contract of trigger blocks and delimiter grammar;
/// returns a description of the first violation.
std::optional<std::string> check_trace(const DecodeTrace& trace, const DecodePolicy& policy);

nlohmann::json to_json(const TraceEvent& e);
void save_trace(const DecodeTrace& trace, const std::filesystem::path& path);
DecodeTrace load_trace(const std::filesystem::path& path);

// ---------------------------------------------------------------------------

/// 1-indexed positions n, 2n, ... not exceeding `total_sentences`.
std::vector<std::size_t> fixed_interval_positions(std::size_t total_sentences, int n);

struct DecodeResult {
    std::string report;
    DecodeTrace trace;
};

/// Runs the decoding protocol. A generator exception ends decoding with a
/// partial trace (trace.aborted); retrieval failures are logged and decoding
/// continues without injection.
DecodeResult decode_report(Generator& gen, const DecodePolicy& policy, ContextRetriever* retriever,
                           std::span<const Organ> organ_plan, std::size_t max_sentences = 256);

struct TriggerStats {
    double mean = 0.0;
    double median = 0.0;
    std::map<int, std::size_t> histogram;
    double zero_fraction = 0.0;
    double one_to_two_fraction = 0.0;
    double three_plus_fraction = 0.0;
};

TriggerStats trigger_stats(std::span<const DecodeTrace> traces);

}  // namespace organrag
