#include <doctest.h>

#include <numeric>
#include <random>
#include <set>

#include "oracles.hpp"
#include "organrag/retrieval.hpp"
#include "organrag/synthgen.hpp"
#include "retrieval_oracle.hpp"

using namespace organrag;

namespace {

const std::vector<std::string> kVocab{"mild", "nodule", "right", "left", "lobe", "no", "effusion", "stable", "the", "a"};

std::string random_sentence(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> len(1, 6), word(0, static_cast<int>(kVocab.size()) - 1);
    std::string s;
    for (int i = len(rng); i > 0; --i) s += (s.empty() ? "" : " ") + kVocab[static_cast<std::size_t>(word(rng))];
    return s;
}

struct Fixture {
    SyntheticCorpus corpus;
    SentenceDB db;
};

const Fixture& fixture() {
    static const Fixture f = [] {
        SynthConfig cfg;
        cfg.seed = 21;
        cfg.n_studies = 100;
        Fixture out;
        out.corpus = gen_synthetic_corpus(cfg);
        out.db = build_database(out.corpus.paragraphs, out.corpus.sentence_embeddings, out.corpus.image_embeddings,
                                out.corpus.labels);
        return out;
    }();
    return f;
}

}  // namespace

TEST_CASE("bleu2 fixtures") {
    CHECK(bleu2("a b c", "a b c") == 1.0);
    CHECK(bleu2("a b c", "x y z") == 0.0);
    CHECK(std::abs(bleu2("a b c", "a b d") - 0.5774) <= 1e-4);
    CHECK(bleu2("", "a") == 0.0);
    CHECK(bleu2("A B", "a b") == 1.0);  // case-folded
    CHECK(bleu2("a", "a") == 1.0);      // unigram-only for single tokens
    CHECK(bleu2("a", "a b") == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("bleu2 agrees with direct n-gram counting") {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 500; ++t) {
        const auto a = random_sentence(rng), b = random_sentence(rng);
        CHECK(std::abs(bleu2(a, b) - oracle::bleu2(a, b)) <= 1e-12);
    }
}

TEST_CASE("mmr with lambda = 1 is plain top-k") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 1 + static_cast<std::size_t>(rng() % 15), k = 1 + static_cast<std::size_t>(rng() % 6);
        std::vector<std::string> c;
        std::vector<double> sim;
        for (std::size_t i = 0; i < n; ++i) {
            c.push_back(random_sentence(rng));
            sim.push_back(std::round(u(rng) * 4) / 4);  // coarse, so ties happen
        }
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return sim[a] > sim[b]; });
        order.resize(std::min(k, n));
        CHECK(mmr_select(c, sim, 1.0, k).indices == order);
    }
}

TEST_CASE("mmr matches the literal greedy oracle") {
    std::mt19937_64 rng(14);
    std::uniform_real_distribution<double> u(0, 1);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 1 + static_cast<std::size_t>(rng() % 12);
        std::vector<std::string> c;
        std::vector<double> sim;
        for (std::size_t i = 0; i < n; ++i) {
            c.push_back(random_sentence(rng));
            sim.push_back(u(rng));
        }
        for (double lambda : {0.0, 0.3, 0.7, 1.0})
            for (std::size_t k : {1u, 3u, 5u}) CHECK(mmr_select(c, sim, lambda, k).indices == oracle::greedy_mmr(c, sim, lambda, k));
    }
}

TEST_CASE("mmr edge cases") {
    const std::vector<std::string> c{"a b", "a b", "c d"};
    const std::vector<double> sim{0.9, 0.9, 0.5};
    CHECK(mmr_select(c, sim, 0.5, 2).indices == std::vector<std::size_t>{0, 2});  // duplicate is penalised
    CHECK(mmr_select(c, sim, 0.5, 10).indices.size() == 3);
    CHECK(mmr_select(std::vector<std::string>{}, std::vector<double>{}, 0.5, 3).indices.empty());
    CHECK_THROWS_AS(mmr_select(c, sim, 1.5, 2), DomainError);
    CHECK_THROWS_AS(mmr_select(c, sim, 0.5, 0), DomainError);
    CHECK_THROWS_AS(mmr_select(c, std::vector<double>{1.0}, 0.5, 1), DomainError);
}

TEST_CASE("jaccard") {
    CHECK(jaccard(std::vector<int>{}, std::vector<int>{}) == 1.0);
    CHECK(jaccard(std::vector<int>{1, 2}, std::vector<int>{2, 3}) == doctest::Approx(1.0 / 3.0));
    CHECK(jaccard(std::vector<int>{1}, std::vector<int>{}) == 0.0);
}

TEST_CASE("study-level evaluation matches the exhaustive oracle") {
    const auto& f = fixture();
    for (Organ organ : kIndexedOrgans) {
        const auto view = oracle::organ_view(f.corpus, organ);
        for (const auto& study : organ_candidate_studies(f.db, organ)) {
            for (auto [m, name] : {std::pair{Modality::Img2Img, "img2img"}, std::pair{Modality::Img2Txt, "img2txt"},
                                   std::pair{Modality::Txt2Txt, "txt2txt"}}) {
                const auto got = ranked_neighbor_studies(f.db, study, organ, m, 10);
                const auto want = oracle::neighbours(view, study, name, 10);
                REQUIRE(got.has_value() == want.has_value());
                if (got) CHECK(*got == *want);
                const auto j = jaccard_at_k(f.db, f.corpus.labels, study, organ, m, 10);
                const auto jw = oracle::jaccard_at_k(view, study, name, 10);
                REQUIRE(j.has_value() == jw.has_value());
                if (j) CHECK(*j == *jw);
            }
            const auto ub = upper_bound_at_k(f.db, f.corpus.labels, study, organ, 10);
            const auto ubw = oracle::upper_bound_at_k(view, study, 10);
            REQUIRE(ub.has_value() == ubw.has_value());
            if (!ub) continue;
            CHECK(*ub == *ubw);
            for (Modality m : {Modality::Img2Img, Modality::Img2Txt, Modality::Txt2Txt})
                if (auto j = jaccard_at_k(f.db, f.corpus.labels, study, organ, m, 10)) CHECK(*ub >= *j);
        }
    }
}

TEST_CASE("evaluate_retrieval aggregates per-query values and is thread invariant") {
    const auto& f = fixture();
    for (Modality m : {Modality::Img2Img, Modality::Img2Txt, Modality::Txt2Txt, Modality::Upper}) {
        const auto one = evaluate_retrieval(f.db, f.corpus.labels, Organ::Lung, m, 10, true, 1);
        const auto four = evaluate_retrieval(f.db, f.corpus.labels, Organ::Lung, m, 10, true, 4);
        CHECK(one.per_query == four.per_query);
        CHECK(one.mean_jaccard == four.mean_jaccard);
        double sum = 0.0;
        for (const auto& [study, v] : one.per_query) {
            sum += v;
            CHECK(v == *jaccard_at_k(f.db, f.corpus.labels, study, Organ::Lung, m, 10));
        }
        CHECK(one.mean_jaccard == doctest::Approx(sum / static_cast<double>(one.queries)).epsilon(1e-12));
        CHECK(one.queries + one.skipped == organ_candidate_studies(f.db, Organ::Lung).size());
    }
}

TEST_CASE("upper bound on a hand-built pool") {
    LabelTable t;
    t.ids = {"q", "a", "b", "c"};
    t.findings = all_findings();
    t.matrix.setZero(4, static_cast<Eigen::Index>(t.findings.size()));
    const auto col = [&](const char* f) { return t.column_of(f); };
    t.matrix(0, col("Emphysema")) = 1;
    t.matrix(0, col("Atelectasis")) = 1;
    t.matrix(1, col("Emphysema")) = 1;  // 1/2
    t.matrix(2, col("Emphysema")) = 1;  // 1
    t.matrix(2, col("Atelectasis")) = 1;
    t.matrix(3, col("Cardiomegaly")) = 1;  // no lung overlap: 0
    const std::vector<std::string> pool{"q", "a", "b", "c"};
    CHECK(*upper_bound_at_k(t, "q", Organ::Lung, 1, pool) == 1.0);
    CHECK(*upper_bound_at_k(t, "q", Organ::Lung, 2, pool) == 0.75);
    CHECK(*upper_bound_at_k(t, "q", Organ::Lung, 3, pool) == 0.5);
    CHECK(*upper_bound_at_k(t, "q", Organ::Lung, 10, pool) == 0.5);   // fewer candidates than k
    CHECK(*upper_bound_at_k(t, "q", Organ::Lung, 1, pool, false) == 1.0);
    CHECK_FALSE(upper_bound_at_k(t, "missing", Organ::Lung, 1, pool).has_value());
}

TEST_CASE("two-stage retrieval draws only from the coarse studies") {
    const auto& f = fixture();
    const std::string study = "synth_00010";
    const auto img = *f.db.image_embedding(Organ::Lung, study);
    const auto sid = f.db.study_sentences(study, Organ::Lung).front();
    const auto txt = *f.db.sentence_embedding(sid);
    RetrievalConfig cfg;
    const auto r = two_stage_retrieve(f.db, Organ::Lung, img, f.db.record(sid).text, txt, cfg, study);
    CHECK(r.coarse_studies.size() == cfg.k_coarse);
    CHECK(std::find(r.coarse_studies.begin(), r.coarse_studies.end(), study) == r.coarse_studies.end());
    CHECK(r.selected.size() == cfg.k_fine);
    std::size_t pool = 0;
    for (const auto& s : r.coarse_studies) pool += f.db.study_sentences(s, Organ::Lung).size();
    CHECK(r.candidate_pool_size == pool);
    for (const auto& rec : r.selected) {
        CHECK(rec.organ == Organ::Lung);
        CHECK(std::find(r.coarse_studies.begin(), r.coarse_studies.end(), rec.study_id) != r.coarse_studies.end());
    }
    CHECK(r.selected_texts().size() == r.selected.size());

    const auto j = to_json(r);
    CHECK(j["selected"].size() == cfg.k_fine);
    CHECK_FALSE(j.contains("stage_timings"));
}

TEST_CASE("text2text retrieval pool depth and exclusion") {
    const auto& f = fixture();
    const std::string study = "synth_00004";
    const auto sid = f.db.study_sentences(study, Organ::Lung).front();
    RetrievalConfig cfg;
    cfg.strategy = Strategy::Text2Text;
    const auto r = text2text_retrieve(f.db, Organ::Lung, *f.db.sentence_embedding(sid), cfg, study);
    CHECK(r.candidate_pool_size == std::min<std::size_t>(std::max(cfg.k_coarse, cfg.text_pool_depth),
                                                        f.db.text_index(Organ::Lung).size() -
                                                            f.db.study_sentences(study, Organ::Lung).size()));
    for (const auto& rec : r.selected) CHECK(rec.study_id != study);
    // without exclusion the query sentence itself is the first pick
    const auto self = text2text_retrieve(f.db, Organ::Lung, *f.db.sentence_embedding(sid), cfg);
    CHECK(self.selected.front().sentence_id == sid);
}

TEST_CASE("retrieval config validation") {
    RetrievalConfig c;
    c.k_fine = 30;
    CHECK_THROWS_AS(validate(c), DomainError);
    c = RetrievalConfig{};
    c.lambda = -0.1;
    CHECK_THROWS_AS(validate(c), DomainError);
    c = RetrievalConfig{};
    c.k_fine = 0;
    CHECK_THROWS_AS(validate(c), DomainError);
    CHECK(parse_strategy("twostage") == Strategy::TwoStage);
    CHECK(parse_modality(to_string(Modality::Txt2Txt)) == Modality::Txt2Txt);
    CHECK_THROWS(parse_modality("img2audio"));
}
