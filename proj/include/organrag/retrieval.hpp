#pragma once

// Sentence re-ranking and retrieval strategies over a frozen SentenceDB,
// plus label-overlap evaluation of retrieval quality.

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "organrag/sentencedb.hpp"

namespace organrag {

/// Lowercased whitespace tokens.
std::vector<std::string> bleu_tokens(std::string_view text);

/// Sentence BLEU with 1- and 2-gram clipped precisions, uniform weights and
/// brevity penalty, no smoothing: a zero precision gives 0. When the
/// candidate is a single token it has no bigrams and only the unigram term
/// is used.
double bleu2(std::string_view candidate, std::string_view reference);

struct MmrSelection {
    std::vector<std::size_t> indices;  // into the candidate list, in pick order
    std::vector<double> scores;        // MMR value at the time of each pick
};

/// Greedy maximal marginal relevance:
///   score(i) = lambda * sim(i) - (1 - lambda) * max_{j in S} BLEU-2(i, j).
/// The first pick is the sim argmax; ties go to the lower index.
MmrSelection mmr_select(std::span<const std::string> candidates, std::span<const double> sim_scores, double lambda,
                        std::size_t k);

enum class Strategy { TwoStage, Text2Text };

std::string_view to_string(Strategy s);
Strategy parse_strategy(std::string_view name);

struct RetrievalConfig {
    std::size_t k_coarse = 20;
    std::size_t k_fine = 3;
    double lambda = 0.7;
    Strategy strategy = Strategy::TwoStage;
    std::size_t text_pool_depth = 50;  // Text2Text pool = max(k_coarse, text_pool_depth)
};

void validate(const RetrievalConfig& cfg);

struct StageTimings {
    std::chrono::nanoseconds coarse{0};
    std::chrono::nanoseconds rerank{0};
    std::chrono::nanoseconds select{0};
};

struct RetrievalResult {
    Strategy strategy = Strategy::TwoStage;
    std::string query_text;
    std::vector<SentenceRecord> selected;
    std::vector<double> mmr_scores;
    std::size_t candidate_pool_size = 0;
    std::vector<std::string> coarse_studies;  // TwoStage only
    StageTimings stage_timings;

    std::vector<std::string> selected_ids() const;
    std::vector<std::string> selected_texts() const;
};

/// Candidate pool = every indexed organ sentence of the k_coarse studies
/// nearest to `image_query`; sim = cosine against `text_query_emb`.
RetrievalResult two_stage_retrieve(const SentenceDB& db, Organ organ, const Eigen::VectorXd& image_query,
                                   std::string_view text_query, const Eigen::VectorXd& text_query_emb,
                                   const RetrievalConfig& cfg,
                                   const std::optional<std::string>& exclude_study = std::nullopt);

/// Candidate pool = top max(k_coarse, text_pool_depth) organ sentences by text cosine.
RetrievalResult text2text_retrieve(const SentenceDB& db, Organ organ, const Eigen::VectorXd& text_query_emb,
                                   const RetrievalConfig& cfg,
                                   const std::optional<std::string>& exclude_study = std::nullopt);

nlohmann::json to_json(const RetrievalResult& r);

// ---------------------------------------------------------------------------
// Label-overlap evaluation

/// |a ∩ b| / |a ∪ b|, with two empty sets scoring 1.
template <typename Set>
double jaccard(const Set& a, const Set& b) {
    std::size_t inter = 0;
    for (const auto& x : a)
        if (std::find(std::begin(b), std::end(b), x) != std::end(b)) ++inter;
    const std::size_t uni = a.size() + b.size() - inter;
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

enum class Modality { Img2Img, Img2Txt, Txt2Txt, Upper };

std::string_view to_string(Modality m);
Modality parse_modality(std::string_view name);

/// A study's positive findings restricted to an organ, sorted.
std::vector<std::string> organ_label_set(const LabelTable& labels, const std::string& study_id, Organ organ);

/// Mean of the study's indexed organ sentence embeddings (the study-level
/// text query), or nullopt when the study has none.
std::optional<Eigen::VectorXd> study_text_query(const SentenceDB& db, const std::string& study_id, Organ organ);

/// Studies ranked for a query under one modality, best first, at most k.
/// Text-side rankings collapse sentence hits to distinct studies (a study
/// scores by its best sentence). nullopt when the query lacks an embedding
/// for the modality.
std::optional<std::vector<std::string>> ranked_neighbor_studies(const SentenceDB& db, const std::string& query_study,
                                                                Organ organ, Modality modality, std::size_t k,
                                                                bool exclude_self = true);

/// Mean Jaccard between the query's organ labels and each of its top-k
/// neighbours' labels. nullopt (skip) when the query has no labels or no
/// embedding in the modality.
std::optional<double> jaccard_at_k(const SentenceDB& db, const LabelTable& labels, const std::string& query_study,
                                   Organ organ, Modality modality, std::size_t k = 10, bool exclude_self = true);

/// Studies the organ's evaluation may draw neighbours from: anything with
/// an organ image embedding or an indexed organ sentence.
std::vector<std::string> organ_candidate_studies(const SentenceDB& db, Organ organ);

/// Mean Jaccard over the k candidates with the highest label overlap
/// (ties by id).
std::optional<double> upper_bound_at_k(const LabelTable& labels, const std::string& query_study, Organ organ,
                                       std::size_t k, std::span<const std::string> candidate_studies,
                                       bool exclude_self = true);

std::optional<double> upper_bound_at_k(const SentenceDB& db, const LabelTable& labels, const std::string& query_study,
                                       Organ organ, std::size_t k, bool exclude_self = true);

struct RetrievalEvalRow {
    Organ organ = Organ::Lung;
    Modality modality = Modality::Img2Img;
    std::size_t k = 10;
    double mean_jaccard = 0.0;
    std::size_t queries = 0;
    std::size_t skipped = 0;
    std::vector<std::pair<std::string, double>> per_query;
};

/// Evaluates every candidate study of the organ as a query. `threads` = 0
/// picks hardware concurrency; the result does not depend on it.
RetrievalEvalRow evaluate_retrieval(const SentenceDB& db, const LabelTable& labels, Organ organ, Modality modality,
                                    std::size_t k = 10, bool exclude_self = true, unsigned threads = 1);

}  // namespace organrag
