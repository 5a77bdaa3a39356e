#pragma once

// Seeded synthetic corpora with known ground truth. Studies draw random
// finding sets; every present finding yields a templated sentence, and all
// embeddings are finding centroids plus Gaussian noise, so label overlap
// tracks embedding similarity. A separate "global" embedding per study
// carries a probe label with a configurable planted signal.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "organrag/orchestrator.hpp"
#include "organrag/trainprep.hpp"

namespace organrag {

enum class PlantedSignal { None, TailDim, Isotropic };

std::string_view to_string(PlantedSignal m);
PlantedSignal parse_planted_signal(std::string_view name);

struct SynthConfig {
    std::uint64_t seed = 0;
    std::size_t n_studies = 100;
    std::vector<Organ> organs{kIndexedOrgans.begin(), kIndexedOrgans.end()};
    Eigen::Index embed_dim_image = 32;
    Eigen::Index embed_dim_text = 32;
    Eigen::Index global_dim = 64;
    // Noise norm relative to unit centroids. Below 1 the same-finding pairs
    // are reliably closer than disjoint ones.
    double cluster_spread = 0.3;
    double prevalence = 0.2;
    // When set, each study gets exactly this many findings, drawn uniformly
    // from all findings of the configured organs (plus Other).
    std::optional<std::size_t> findings_per_study;
    PlantedSignal planted_signal_mode = PlantedSignal::None;
    std::string probe_finding = "Emphysema";
};

void validate(const SynthConfig& cfg);

struct SyntheticCorpus {
    std::vector<OrganParagraph> paragraphs;
    EmbeddingMatrix sentence_embeddings;
    std::map<Organ, EmbeddingMatrix> image_embeddings;
    EmbeddingMatrix global_embeddings;
    LabelTable labels;
    std::vector<ReportRecord> reports;
    std::map<std::string, std::vector<double>> perplexities;
    Script script;
    nlohmann::json manifest;
};

/// Per-axis standard deviations of the global embedding: geometric from 10 down to 0.5.
Eigen::VectorXd global_axis_stddev(Eigen::Index dim);

SyntheticCorpus gen_synthetic_corpus(const SynthConfig& cfg);

/// Writes paragraphs/paragraphs.jsonl, sentence_emb.aemb (+ .ids),
/// image_emb/<organ>.aemb, global.aemb, labels.csv, reports.jsonl,
/// perplexities.jsonl, script.jsonl and manifest.json under `dir`.
void write_synthetic_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

}  // namespace organrag
