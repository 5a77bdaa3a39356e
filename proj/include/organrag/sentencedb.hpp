#pragma once

// Organ-indexed sentence database: paragraph splitting, organ/finding
// labelling, exact flat cosine indices per organ, and per-organ statistics.

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "organrag/embedcore.hpp"

namespace organrag {

enum class Organ { Lung, Heart, Esophagus, Aorta, Other };

inline constexpr std::array<Organ, 4> kIndexedOrgans{Organ::Lung, Organ::Heart, Organ::Esophagus, Organ::Aorta};
inline constexpr std::array<Organ, 5> kAllOrgans{Organ::Lung, Organ::Heart, Organ::Esophagus, Organ::Aorta,
                                                 Organ::Other};

std::string_view to_string(Organ organ);

/// Parses "lung", "heart", "esophagus", "aorta" or "other"; throws otherwise.
Organ parse_organ(std::string_view name);

/// Findings attached to each organ (11 lung, 2 heart, 1 esophagus, 2 aorta, 2 other).
const std::vector<std::string>& organ_findings(Organ organ);

/// The full 18-finding list in organ order.
const std::vector<std::string>& all_findings();

/// Splits at '.' or ';' followed by whitespace. Fragments made only of
/// punctuation, or bare organ-name headers, are dropped.
std::vector<std::string> split_sentences(std::string_view paragraph);

/// Deterministic id for the `index`-th sentence of a study's organ paragraph.
std::string make_sentence_id(std::string_view study_id, Organ organ, std::size_t index);

struct SentenceRecord {
    std::string sentence_id;
    std::string study_id;
    Organ organ = Organ::Other;
    std::string text;
    std::vector<std::string> findings;  // sorted
    bool has_embedding = false;

    bool operator==(const SentenceRecord&) const = default;
};

struct OrganParagraph {
    std::string study_id;
    Organ organ = Organ::Other;
    std::string text;
};

class BuildError : public std::runtime_error {
public:
    BuildError(const std::string& what, std::vector<std::string> offenders)
        : std::runtime_error(what), offenders_(std::move(offenders)) {}
    const std::vector<std::string>& offenders() const noexcept { return offenders_; }

private:
    std::vector<std::string> offenders_;
};

struct Neighbor {
    std::string id;
    double score = 0.0;
    bool operator==(const Neighbor&) const = default;
};

/// Exact cosine index over pre-normalised rows. Zero rows stay zero and
/// score 0 against every query.
class FlatIndex {
public:
    FlatIndex() = default;
    FlatIndex(std::vector<std::string> ids, Eigen::MatrixXd vectors);

    std::size_t size() const { return ids_.size(); }
    Eigen::Index dim() const { return vectors_.cols(); }
    const std::vector<std::string>& ids() const { return ids_; }
    const Eigen::MatrixXd& vectors() const { return vectors_; }
    Eigen::Index position(const std::string& id) const;

    /// Top-k by cosine, ties by ascending id. `skip(i)` drops row i before ranking.
    template <typename Skip>
    std::vector<Neighbor> search(const Eigen::VectorXd& query, std::size_t k, Skip&& skip) const;

    std::vector<Neighbor> search(const Eigen::VectorXd& query, std::size_t k) const {
        return search(query, k, [](Eigen::Index) { return false; });
    }

    /// Cosine scores of every row against `query`.
    Eigen::VectorXd scores(const Eigen::VectorXd& query) const;

private:
    std::vector<std::string> ids_;
    Eigen::MatrixXd vectors_;
    std::unordered_map<std::string, Eigen::Index> positions_;
};

enum class Space { Text, Image };

struct OrganStats {
    std::size_t sentences = 0;
    std::size_t unique_studies = 0;
    double avg_sentences_per_study = 0.0;
    double avg_words_per_sentence = 0.0;
    std::size_t total_words = 0;
    bool operator==(const OrganStats&) const = default;
};

struct DatabaseStats {
    std::map<Organ, OrganStats> per_organ;  // all five organs, "other" included
    std::size_t indexed_sentences = 0;      // lung + heart + esophagus + aorta
    std::size_t excluded_other = 0;
    std::size_t total_sentences = 0;        // indexed_sentences + excluded_other
    bool operator==(const DatabaseStats&) const = default;
};

class SentenceDB {
public:
    const std::vector<SentenceRecord>& records() const { return records_; }
    const SentenceRecord& record(const std::string& sentence_id) const;
    const SentenceRecord* find_record(const std::string& sentence_id) const;

    const FlatIndex& text_index(Organ organ) const;
    const FlatIndex& image_index(Organ organ) const;

    /// Owning study of each text index row.
    const std::vector<std::string>& text_row_studies(Organ organ) const;

    /// Sentence ids of a study's organ section, in paragraph order.
    const std::vector<std::string>& study_sentences(const std::string& study_id, Organ organ) const;

    /// Studies with at least one record, sorted.
    std::vector<std::string> studies() const;

    /// Exact top-k neighbours in one organ's text or image index. Rows that
    /// belong to `exclude_study` are removed before ranking.
    std::vector<Neighbor> knn(Organ organ, Space space, const Eigen::VectorXd& query, std::size_t k,
                              const std::optional<std::string>& exclude_study = std::nullopt) const;

    /// Study owning an index row id (sentence id for text, study id for image).
    const std::string& study_of(Space space, const std::string& id) const;

    /// Stored (normalised) embedding of an indexed sentence.
    std::optional<Eigen::VectorXd> sentence_embedding(const std::string& sentence_id) const;
    std::optional<Eigen::VectorXd> image_embedding(Organ organ, const std::string& study_id) const;

    /// Writes sentences.jsonl, sentence_emb.aemb and image_<organ>.aemb (raw vectors).
    void save(const std::filesystem::path& dir) const;
    static SentenceDB load(const std::filesystem::path& dir);

private:
    friend SentenceDB build_database(std::span<const OrganParagraph>, const EmbeddingMatrix&,
                                     const std::map<Organ, EmbeddingMatrix>&, const LabelTable&);
    friend SentenceDB assemble_database(std::vector<SentenceRecord>, const EmbeddingMatrix&,
                                        const std::map<Organ, EmbeddingMatrix>&);

    std::vector<SentenceRecord> records_;
    EmbeddingMatrix sentence_raw_;
    std::map<Organ, EmbeddingMatrix> image_raw_;
    std::unordered_map<std::string, std::size_t> record_pos_;
    std::map<Organ, FlatIndex> text_index_;
    std::map<Organ, FlatIndex> image_index_;
    std::map<Organ, std::vector<std::string>> text_row_study_;
    std::map<std::pair<std::string, Organ>, std::vector<std::string>> study_to_sentences_;
};

/// Splits every paragraph, labels sentences with their study's findings
/// restricted to the organ, and freezes the per-organ indices. Throws
/// BuildError listing embedding ids that resolve to no sentence/study.
SentenceDB build_database(std::span<const OrganParagraph> paragraphs, const EmbeddingMatrix& sentence_embeddings,
                          const std::map<Organ, EmbeddingMatrix>& image_embeddings, const LabelTable& labels);

/// Builds indices from already-labelled records (used when reloading).
SentenceDB assemble_database(std::vector<SentenceRecord> records, const EmbeddingMatrix& sentence_embeddings,
                             const std::map<Organ, EmbeddingMatrix>& image_embeddings);

DatabaseStats db_stats(const SentenceDB& db);

std::size_t count_words(std::string_view text);

// JSONL I/O for paragraphs and sentence records.
std::vector<OrganParagraph> load_paragraphs(const std::filesystem::path& path_or_dir);
void save_paragraphs(std::span<const OrganParagraph> paragraphs, const std::filesystem::path& path);
std::vector<SentenceRecord> load_sentence_records(const std::filesystem::path& path);
void save_sentence_records(std::span<const SentenceRecord> records, const std::filesystem::path& path);

/// Per-organ image embeddings from `<dir>/<organ>.aemb` (missing files skipped).
std::map<Organ, EmbeddingMatrix> load_image_embeddings(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------

template <typename Skip>
std::vector<Neighbor> FlatIndex::search(const Eigen::VectorXd& query, std::size_t k, Skip&& skip) const {
    if (k == 0) throw DomainError("knn: k must be >= 1");
    if (ids_.empty()) return {};
    if (query.size() != vectors_.cols()) throw DomainError("knn: query dimension mismatch");
    const double qn = query.norm();
    if (qn == 0.0) throw DomainError("knn: zero-norm query");
    const Eigen::VectorXd s = vectors_ * (query / qn);

    std::vector<Eigen::Index> rows;
    rows.reserve(ids_.size());
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(ids_.size()); ++i)
        if (!skip(i)) rows.push_back(i);
    auto better = [&](Eigen::Index a, Eigen::Index b) {
        if (s[a] != s[b]) return s[a] > s[b];
        return ids_[static_cast<std::size_t>(a)] < ids_[static_cast<std::size_t>(b)];
    };
    const std::size_t take = std::min(k, rows.size());
    std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(take), rows.end(), better);
    std::vector<Neighbor> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
        out.push_back({ids_[static_cast<std::size_t>(rows[i])], s[rows[i]]});
    return out;
}

}  // namespace organrag
