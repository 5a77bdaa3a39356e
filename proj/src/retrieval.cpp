#include "organrag/retrieval.hpp"

#include <bit>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>

#include "organrag/parallel.hpp"

namespace organrag {

using Clock = std::chrono::steady_clock;
using nlohmann::json;

// ---------------------------------------------------------------------------
// BLEU-2

std::vector<std::string> bleu_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

namespace {

struct NgramProfile {
    std::size_t length = 0;
    std::map<std::string, int> unigrams;
    std::map<std::string, int> bigrams;
};

NgramProfile profile(std::string_view text) {
    NgramProfile p;
    const auto toks = bleu_tokens(text);
    p.length = toks.size();
    for (std::size_t i = 0; i < toks.size(); ++i) {
        ++p.unigrams[toks[i]];
        // tokens carry no whitespace, so a space cannot collide
        if (i + 1 < toks.size()) ++p.bigrams[toks[i] + ' ' + toks[i + 1]];
    }
    return p;
}

double clipped_precision(const std::map<std::string, int>& cand, const std::map<std::string, int>& ref,
                         std::size_t total) {
    long matched = 0;
    for (const auto& [g, c] : cand) {
        auto it = ref.find(g);
        if (it != ref.end()) matched += std::min(c, it->second);
    }
    return static_cast<double>(matched) / static_cast<double>(total);
}

double bleu2_profiles(const NgramProfile& c, const NgramProfile& r) {
    if (c.length == 0) return 0.0;
    const double bp = c.length > r.length
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(r.length) / static_cast<double>(c.length));
    const double p1 = clipped_precision(c.unigrams, r.unigrams, c.length);
    if (p1 == 0.0) return 0.0;
    if (c.length == 1) return bp * p1;
    const double p2 = clipped_precision(c.bigrams, r.bigrams, c.length - 1);
    if (p2 == 0.0) return 0.0;
    return bp * std::sqrt(p1 * p2);
}

}  // namespace

double bleu2(std::string_view candidate, std::string_view reference) {
    return bleu2_profiles(profile(candidate), profile(reference));
}

// ---------------------------------------------------------------------------
// MMR

MmrSelection mmr_select(std::span<const std::string> candidates, std::span<const double> sim_scores, double lambda,
                        std::size_t k) {
    if (candidates.size() != sim_scores.size()) throw DomainError("mmr_select: sim_scores not aligned to candidates");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw DomainError("mmr_select: lambda must be in [0,1]");
    if (k == 0) throw DomainError("mmr_select: k must be >= 1");
    MmrSelection sel;
    const std::size_t n = candidates.size();
    if (n == 0) return sel;

    std::vector<NgramProfile> profiles;
    profiles.reserve(n);
    for (const auto& c : candidates) profiles.push_back(profile(c));

    std::vector<bool> taken(n, false);
    std::vector<double> redundancy(n, 0.0);  // max BLEU-2 against the selected set

    std::size_t first = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (sim_scores[i] > sim_scores[first]) first = i;
    const std::size_t limit = std::min(k, n);
    std::size_t pick = first;
    double pick_score = lambda * sim_scores[first];
    while (true) {
        taken[pick] = true;
        sel.indices.push_back(pick);
        sel.scores.push_back(pick_score);
        if (sel.indices.size() == limit) break;
        for (std::size_t i = 0; i < n; ++i)
            if (!taken[i]) redundancy[i] = std::max(redundancy[i], bleu2_profiles(profiles[i], profiles[pick]));
        bool found = false;
        for (std::size_t i = 0; i < n; ++i) {
            if (taken[i]) continue;
            const double s = lambda * sim_scores[i] - (1.0 - lambda) * redundancy[i];
            if (!found || s > pick_score) {
                pick = i;
                pick_score = s;
                found = true;
            }
        }
    }
    return sel;
}

// ---------------------------------------------------------------------------
// Strategies

std::string_view to_string(Strategy s) { return s == Strategy::TwoStage ? "twostage" : "text2text"; }

Strategy parse_strategy(std::string_view name) {
    if (name == "twostage" || name == "two-stage") return Strategy::TwoStage;
    if (name == "text2text") return Strategy::Text2Text;
    throw DomainError("unknown retrieval strategy '" + std::string(name) + "'");
}

void validate(const RetrievalConfig& cfg) {
    if (cfg.k_fine < 1) throw DomainError("retrieval: k_fine must be >= 1");
    if (cfg.strategy == Strategy::TwoStage && cfg.k_fine > cfg.k_coarse)
        throw DomainError("retrieval: k_fine must not exceed k_coarse");
    if (cfg.k_coarse < 1) throw DomainError("retrieval: k_coarse must be >= 1");
    if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw DomainError("retrieval: lambda must be in [0,1]");
}

std::vector<std::string> RetrievalResult::selected_ids() const {
    std::vector<std::string> out;
    for (const auto& r : selected) out.push_back(r.sentence_id);
    return out;
}

std::vector<std::string> RetrievalResult::selected_texts() const {
    std::vector<std::string> out;
    for (const auto& r : selected) out.push_back(r.text);
    return out;
}

namespace {

void select_from_pool(const SentenceDB& db, const std::vector<std::string>& pool_ids, const std::vector<double>& sims,
                      const RetrievalConfig& cfg, RetrievalResult& out) {
    const auto t0 = Clock::now();
    std::vector<std::string> texts;
    texts.reserve(pool_ids.size());
    for (const auto& id : pool_ids) texts.push_back(db.record(id).text);
    const MmrSelection sel = mmr_select(texts, sims, cfg.lambda, cfg.k_fine);
    for (std::size_t i = 0; i < sel.indices.size(); ++i) {
        out.selected.push_back(db.record(pool_ids[sel.indices[i]]));
        out.mmr_scores.push_back(sel.scores[i]);
    }
    out.candidate_pool_size = pool_ids.size();
    out.stage_timings.select = Clock::now() - t0;
}

}  // namespace

RetrievalResult two_stage_retrieve(const SentenceDB& db, Organ organ, const Eigen::VectorXd& image_query,
                                   std::string_view text_query, const Eigen::VectorXd& text_query_emb,
                                   const RetrievalConfig& cfg, const std::optional<std::string>& exclude_study) {
    validate(cfg);
    RetrievalResult out;
    out.strategy = Strategy::TwoStage;
    out.query_text = std::string(text_query);

    auto t0 = Clock::now();
    const auto studies = db.knn(organ, Space::Image, image_query, cfg.k_coarse, exclude_study);
    out.stage_timings.coarse = Clock::now() - t0;

    t0 = Clock::now();
    const FlatIndex& text = db.text_index(organ);
    std::vector<std::string> pool;
    for (const auto& s : studies) {
        out.coarse_studies.push_back(s.id);
        for (const auto& sid : db.study_sentences(s.id, organ))
            if (text.position(sid) >= 0) pool.push_back(sid);
    }
    std::vector<double> sims;
    if (!pool.empty()) {
        const Eigen::VectorXd all = text.scores(text_query_emb);
        for (const auto& sid : pool) sims.push_back(all[text.position(sid)]);
    }
    out.stage_timings.rerank = Clock::now() - t0;

    select_from_pool(db, pool, sims, cfg, out);
    return out;
}

RetrievalResult text2text_retrieve(const SentenceDB& db, Organ organ, const Eigen::VectorXd& text_query_emb,
                                   const RetrievalConfig& cfg, const std::optional<std::string>& exclude_study) {
    validate(cfg);
    RetrievalResult out;
    out.strategy = Strategy::Text2Text;
    const auto t0 = Clock::now();
    const auto hits =
        db.knn(organ, Space::Text, text_query_emb, std::max(cfg.k_coarse, cfg.text_pool_depth), exclude_study);
    out.stage_timings.coarse = Clock::now() - t0;
    std::vector<std::string> pool;
    std::vector<double> sims;
    for (const auto& h : hits) {
        pool.push_back(h.id);
        sims.push_back(h.score);
    }
    select_from_pool(db, pool, sims, cfg, out);
    return out;
}

json to_json(const RetrievalResult& r) {
    json sel = json::array();
    for (std::size_t i = 0; i < r.selected.size(); ++i)
        sel.push_back({{"sentence_id", r.selected[i].sentence_id},
                       {"study_id", r.selected[i].study_id},
                       {"text", r.selected[i].text},
                       {"mmr_score", r.mmr_scores[i]}});
    return {{"strategy", std::string(to_string(r.strategy))},
            {"query_text", r.query_text},
            {"selected", sel},
            {"candidate_pool_size", r.candidate_pool_size},
            {"coarse_studies", r.coarse_studies}};
}

// ---------------------------------------------------------------------------
// Evaluation

std::string_view to_string(Modality m) {
    switch (m) {
        case Modality::Img2Img: return "img2img";
        case Modality::Img2Txt: return "img2txt";
        case Modality::Txt2Txt: return "txt2txt";
        case Modality::Upper: return "upper";
    }
    return "upper";
}

Modality parse_modality(std::string_view name) {
    for (Modality m : {Modality::Img2Img, Modality::Img2Txt, Modality::Txt2Txt, Modality::Upper})
        if (to_string(m) == name) return m;
    throw DomainError("unknown modality '" + std::string(name) + "'");
}

std::vector<std::string> organ_label_set(const LabelTable& labels, const std::string& study_id, Organ organ) {
    std::vector<std::string> out;
    const Eigen::Index row = labels.row_of(study_id);
    if (row < 0) return out;
    for (const auto& f : organ_findings(organ)) {
        const Eigen::Index col = labels.column_of(f);
        if (col >= 0 && labels.matrix(row, col)) out.push_back(f);
    }
    std::sort(out.begin(), out.end());
    return out;
}

namespace {

/// Organ labels packed as bits (organ finding order).
class OrganMasks {
public:
    OrganMasks(const LabelTable& labels, Organ organ) : rows_(labels.row_index()) {
        const auto& fs = organ_findings(organ);
        masks_.assign(labels.ids.size(), 0u);
        for (std::size_t b = 0; b < fs.size(); ++b) {
            const Eigen::Index col = labels.column_of(fs[b]);
            if (col < 0) continue;
            for (Eigen::Index i = 0; i < labels.matrix.rows(); ++i)
                if (labels.matrix(i, col)) masks_[static_cast<std::size_t>(i)] |= (1u << b);
        }
    }

    bool has(const std::string& id) const { return rows_.count(id) > 0; }

    /// Missing studies have the empty label set.
    std::uint32_t mask(const std::string& id) const {
        auto it = rows_.find(id);
        return it == rows_.end() ? 0u : masks_[static_cast<std::size_t>(it->second)];
    }

    static double jaccard(std::uint32_t a, std::uint32_t b) {
        const int uni = std::popcount(a | b);
        if (uni == 0) return 1.0;
        return static_cast<double>(std::popcount(a & b)) / static_cast<double>(uni);
    }

private:
    std::unordered_map<std::string, Eigen::Index> rows_;
    std::vector<std::uint32_t> masks_;
};

std::vector<std::string> top_studies_by_score(const std::vector<std::string>& ids, const Eigen::VectorXd& scores,
                                              std::size_t k) {
    std::vector<std::size_t> order(ids.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t take = std::min(k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          const double sa = scores[static_cast<Eigen::Index>(a)];
                          const double sb = scores[static_cast<Eigen::Index>(b)];
                          if (sa != sb) return sa > sb;
                          return ids[a] < ids[b];
                      });
    std::vector<std::string> out;
    for (std::size_t i = 0; i < take; ++i) out.push_back(ids[order[i]]);
    return out;
}

std::optional<double> mean_jaccard(const OrganMasks& masks, const std::string& query,
                                   const std::vector<std::string>& neighbors) {
    if (neighbors.empty()) return std::nullopt;
    const std::uint32_t q = masks.mask(query);
    double sum = 0.0;
    for (const auto& n : neighbors) sum += OrganMasks::jaccard(q, masks.mask(n));
    return sum / static_cast<double>(neighbors.size());
}

}  // namespace

std::optional<Eigen::VectorXd> study_text_query(const SentenceDB& db, const std::string& study_id, Organ organ) {
    const FlatIndex& text = db.text_index(organ);
    Eigen::VectorXd sum;
    std::size_t count = 0;
    for (const auto& sid : db.study_sentences(study_id, organ)) {
        const Eigen::Index pos = text.position(sid);
        if (pos < 0) continue;
        if (count == 0) sum = Eigen::VectorXd::Zero(text.dim());
        sum += text.vectors().row(pos).transpose();
        ++count;
    }
    if (count == 0 || sum.norm() == 0.0) return std::nullopt;
    return Eigen::VectorXd(sum / static_cast<double>(count));
}

std::optional<std::vector<std::string>> ranked_neighbor_studies(const SentenceDB& db, const std::string& query_study,
                                                                Organ organ, Modality modality, std::size_t k,
                                                                bool exclude_self) {
    if (k == 0) throw DomainError("ranked_neighbor_studies: k must be >= 1");
    if (modality == Modality::Upper) throw DomainError("ranked_neighbor_studies: upper bound has no embedding space");

    std::optional<Eigen::VectorXd> query;
    if (modality == Modality::Txt2Txt)
        query = study_text_query(db, query_study, organ);
    else
        query = db.image_embedding(organ, query_study);
    if (!query || query->norm() == 0.0) return std::nullopt;

    if (modality == Modality::Img2Img) {
        std::vector<std::string> out;
        for (auto& n : db.knn(organ, Space::Image, *query, k,
                              exclude_self ? std::optional<std::string>(query_study) : std::nullopt))
            out.push_back(std::move(n.id));
        return out;
    }

    // Text side: best sentence score per study.
    const FlatIndex& text = db.text_index(organ);
    if (text.size() == 0) return std::vector<std::string>{};
    const Eigen::VectorXd scores = text.scores(*query);
    const auto& owners = db.text_row_studies(organ);
    std::map<std::string, double> best;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const std::string& study = owners[i];
        if (exclude_self && study == query_study) continue;
        const double s = scores[static_cast<Eigen::Index>(i)];
        auto [it, inserted] = best.emplace(study, s);
        if (!inserted && s > it->second) it->second = s;
    }
    std::vector<std::string> ids;
    Eigen::VectorXd study_scores(static_cast<Eigen::Index>(best.size()));
    for (const auto& [id, s] : best) {
        study_scores[static_cast<Eigen::Index>(ids.size())] = s;
        ids.push_back(id);
    }
    return top_studies_by_score(ids, study_scores, k);
}

std::optional<double> jaccard_at_k(const SentenceDB& db, const LabelTable& labels, const std::string& query_study,
                                   Organ organ, Modality modality, std::size_t k, bool exclude_self) {
    if (modality == Modality::Upper) return upper_bound_at_k(db, labels, query_study, organ, k, exclude_self);
    const OrganMasks masks(labels, organ);
    if (!masks.has(query_study)) return std::nullopt;
    auto neighbors = ranked_neighbor_studies(db, query_study, organ, modality, k, exclude_self);
    if (!neighbors) return std::nullopt;
    return mean_jaccard(masks, query_study, *neighbors);
}

std::vector<std::string> organ_candidate_studies(const SentenceDB& db, Organ organ) {
    std::set<std::string> s(db.image_index(organ).ids().begin(), db.image_index(organ).ids().end());
    for (const auto& id : db.text_row_studies(organ)) s.insert(id);
    return {s.begin(), s.end()};
}

namespace {

/// Upper bound from a histogram of candidate label masks.
std::optional<double> upper_bound_from_histogram(std::map<std::uint32_t, std::size_t> histogram, std::uint32_t query,
                                                 std::size_t k) {
    std::vector<std::pair<double, std::size_t>> levels;
    for (const auto& [mask, count] : histogram)
        if (count) levels.emplace_back(OrganMasks::jaccard(query, mask), count);
    std::sort(levels.begin(), levels.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::size_t remaining = k, used = 0;
    double sum = 0.0;
    for (const auto& [j, count] : levels) {
        const std::size_t take = std::min(remaining, count);
        for (std::size_t t = 0; t < take; ++t) sum += j;  // per-neighbour adds, same rounding as a plain mean
        used += take;
        remaining -= take;
        if (remaining == 0) break;
    }
    if (used == 0) return std::nullopt;
    return sum / static_cast<double>(used);
}

}  // namespace

std::optional<double> upper_bound_at_k(const LabelTable& labels, const std::string& query_study, Organ organ,
                                       std::size_t k, std::span<const std::string> candidate_studies,
                                       bool exclude_self) {
    if (k == 0) throw DomainError("upper_bound_at_k: k must be >= 1");
    const OrganMasks masks(labels, organ);
    if (!masks.has(query_study)) return std::nullopt;
    std::map<std::uint32_t, std::size_t> histogram;
    for (const auto& c : candidate_studies)
        if (!(exclude_self && c == query_study)) ++histogram[masks.mask(c)];
    return upper_bound_from_histogram(std::move(histogram), masks.mask(query_study), k);
}

std::optional<double> upper_bound_at_k(const SentenceDB& db, const LabelTable& labels, const std::string& query_study,
                                       Organ organ, std::size_t k, bool exclude_self) {
    const auto pool = organ_candidate_studies(db, organ);
    return upper_bound_at_k(labels, query_study, organ, k, pool, exclude_self);
}

RetrievalEvalRow evaluate_retrieval(const SentenceDB& db, const LabelTable& labels, Organ organ, Modality modality,
                                    std::size_t k, bool exclude_self, unsigned threads) {
    if (k == 0) throw DomainError("evaluate_retrieval: k must be >= 1");
    RetrievalEvalRow row;
    row.organ = organ;
    row.modality = modality;
    row.k = k;

    const auto queries = organ_candidate_studies(db, organ);
    const OrganMasks masks(labels, organ);
    std::vector<std::optional<double>> results(queries.size());

    if (modality == Modality::Upper) {
        std::map<std::uint32_t, std::size_t> histogram;
        for (const auto& c : queries) ++histogram[masks.mask(c)];
        parallel_for(queries.size(), threads, [&](std::size_t i) {
            if (!masks.has(queries[i])) return;
            auto h = histogram;
            const std::uint32_t q = masks.mask(queries[i]);
            if (exclude_self) --h[q];
            results[i] = upper_bound_from_histogram(std::move(h), q, k);
        });
    } else {
        parallel_for(queries.size(), threads, [&](std::size_t i) {
            if (!masks.has(queries[i])) return;
            auto neighbors = ranked_neighbor_studies(db, queries[i], organ, modality, k, exclude_self);
            if (neighbors) results[i] = mean_jaccard(masks, queries[i], *neighbors);
        });
    }

    double sum = 0.0;
    for (std::size_t i = 0; i < queries.size(); ++i) {
        if (!results[i]) {
            ++row.skipped;
            continue;
        }
        ++row.queries;
        sum += *results[i];
        row.per_query.emplace_back(queries[i], *results[i]);
    }
    if (row.queries) row.mean_jaccard = sum / static_cast<double>(row.queries);
    return row;
}

}  // namespace organrag
