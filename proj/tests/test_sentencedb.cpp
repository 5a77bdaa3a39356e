#include <doctest.h>

#include <random>
#include <set>

#include "oracles.hpp"
#include "organrag/sentencedb.hpp"
#include "organrag/synthgen.hpp"
#include "support.hpp"

using namespace organrag;

namespace {

LabelTable empty_labels(std::vector<std::string> ids) {
    LabelTable t;
    t.ids = std::move(ids);
    t.findings = all_findings();
    t.matrix.setZero(static_cast<Eigen::Index>(t.ids.size()), static_cast<Eigen::Index>(t.findings.size()));
    return t;
}

EmbeddingMatrix embeddings(std::vector<std::string> ids, Eigen::MatrixXd data) {
    EmbeddingMatrix m;
    m.ids = std::move(ids);
    m.data = std::move(data);
    return m;
}

SentenceDB db_from(const SyntheticCorpus& c) {
    return build_database(c.paragraphs, c.sentence_embeddings, c.image_embeddings, c.labels);
}

}  // namespace

TEST_CASE("split_sentences") {
    CHECK(split_sentences("No effusion. Heart normal; aorta calcified.") ==
          std::vector<std::string>{"No effusion.", "Heart normal;", "aorta calcified."});
    CHECK(split_sentences("").empty());
    CHECK(split_sentences("...").empty());
    CHECK(split_sentences("Lungs: . Clear lungs.") == std::vector<std::string>{"Clear lungs."});
    CHECK(split_sentences("  padded.   next  ") == std::vector<std::string>{"padded.", "next"});
    CHECK(split_sentences("3.5 cm nodule. Stable.") == std::vector<std::string>{"3.5 cm nodule.", "Stable."});
}

TEST_CASE("organ names and finding groupings") {
    for (Organ o : kAllOrgans) CHECK(parse_organ(to_string(o)) == o);
    CHECK_THROWS_AS(parse_organ("liver"), DomainError);
    CHECK(organ_findings(Organ::Lung).size() == 11);
    CHECK(organ_findings(Organ::Heart).size() == 2);
    CHECK(organ_findings(Organ::Aorta).size() == 2);
    CHECK(organ_findings(Organ::Esophagus).size() == 1);
    CHECK(organ_findings(Organ::Other).size() == 2);
    CHECK(all_findings().size() == 18);
}

TEST_CASE("minimal database: one study, one lung sentence") {
    const std::vector<OrganParagraph> paras{{"s1", Organ::Lung, "Small nodule."}};
    const auto db = build_database(paras, embeddings({"s1/lung/0"}, Eigen::MatrixXd::Ones(1, 3)), {},
                                   empty_labels({"s1"}));
    CHECK(db.text_index(Organ::Lung).size() == 1);
    CHECK(db.text_index(Organ::Heart).size() == 0);
    CHECK(db.text_index(Organ::Aorta).size() == 0);
    CHECK(db.text_index(Organ::Esophagus).size() == 0);
    CHECK(db.image_index(Organ::Lung).size() == 0);
    CHECK_THROWS_AS(db.text_index(Organ::Other), DomainError);
    CHECK(db.record("s1/lung/0").has_embedding);
}

TEST_CASE("sentences inherit organ-restricted study findings") {
    LabelTable labels = empty_labels({"s1"});
    labels.matrix(0, labels.column_of("Emphysema")) = 1;
    labels.matrix(0, labels.column_of("Cardiomegaly")) = 1;
    const std::vector<OrganParagraph> paras{{"s1", Organ::Lung, "Emphysema. Also nodule."},
                                            {"s1", Organ::Heart, "Enlarged heart."},
                                            {"s1", Organ::Lung, "Third lung sentence."},
                                            {"s1", Organ::Other, "No adenopathy."}};
    const auto db = build_database(paras, embeddings({"s1/lung/0"}, Eigen::MatrixXd::Ones(1, 2)), {}, labels);
    CHECK(db.record("s1/lung/1").findings == std::vector<std::string>{"Emphysema"});
    CHECK(db.record("s1/heart/0").findings == std::vector<std::string>{"Cardiomegaly"});
    CHECK(db.record("s1/lung/2").text == "Third lung sentence.");  // numbering continues across paragraphs
    CHECK(db.record("s1/other/0").findings.empty());
    CHECK_FALSE(db.record("s1/heart/0").has_embedding);
    CHECK(db.study_sentences("s1", Organ::Lung) == std::vector<std::string>{"s1/lung/0", "s1/lung/1", "s1/lung/2"});
    // only embedded records are indexed
    CHECK(db.text_index(Organ::Lung).size() == 1);
    CHECK(db.text_index(Organ::Heart).size() == 0);
}

TEST_CASE("dangling embedding ids are reported") {
    const std::vector<OrganParagraph> paras{{"s1", Organ::Lung, "One."}};
    try {
        build_database(paras, embeddings({"s1/lung/0", "ghost/lung/0", "s1/lung/9"}, Eigen::MatrixXd::Ones(3, 2)),
                       {{Organ::Heart, embeddings({"nobody"}, Eigen::MatrixXd::Ones(1, 2))}}, empty_labels({"s1"}));
        FAIL("expected BuildError");
    } catch (const BuildError& e) {
        const std::set<std::string> got(e.offenders().begin(), e.offenders().end());
        CHECK(got == std::set<std::string>{"ghost/lung/0", "s1/lung/9", "heart:nobody"});
    }
}

TEST_CASE("db_stats") {
    SUBCASE("empty database") {
        const auto s = db_stats(SentenceDB{});
        CHECK(s.total_sentences == 0);
        CHECK(s.indexed_sentences == 0);
        CHECK(s.excluded_other == 0);
        for (const auto& [organ, os] : s.per_organ) {
            CHECK(os.sentences == 0);
            CHECK(os.avg_sentences_per_study == 0.0);
        }
    }
    SUBCASE("two studies with three lung sentences each") {
        const std::vector<OrganParagraph> paras{{"a", Organ::Lung, "One two. Three. Four five six."},
                                                {"b", Organ::Lung, "x. y. z."},
                                                {"b", Organ::Other, "Misc."}};
        const auto s = db_stats(build_database(paras, EmbeddingMatrix{}, {}, empty_labels({"a", "b"})));
        CHECK(s.per_organ.at(Organ::Lung).sentences == 6);
        CHECK(s.per_organ.at(Organ::Lung).unique_studies == 2);
        CHECK(s.per_organ.at(Organ::Lung).avg_sentences_per_study == 3.0);
        CHECK(s.per_organ.at(Organ::Lung).total_words == 9);
        CHECK(s.per_organ.at(Organ::Lung).avg_words_per_sentence == 1.5);
        CHECK(s.indexed_sentences == 6);
        CHECK(s.excluded_other == 1);
        CHECK(s.total_sentences == 7);
    }
}

TEST_CASE("stats and index sizes equal the generator manifest") {
    SynthConfig cfg;
    cfg.seed = 4;
    cfg.n_studies = 20;
    const auto c = gen_synthetic_corpus(cfg);
    const auto db = db_from(c);
    const auto s = db_stats(db);
    const auto& m = c.manifest;
    CHECK(s.indexed_sentences == m["indexed_sentences"].get<std::size_t>());
    CHECK(s.excluded_other == m["excluded_other"].get<std::size_t>());
    CHECK(s.total_sentences == m["total_sentences"].get<std::size_t>());
    for (Organ o : kAllOrgans) {
        const auto& mo = m["organs"][std::string(to_string(o))];
        CHECK(s.per_organ.at(o).sentences == mo["sentences"].get<std::size_t>());
        CHECK(s.per_organ.at(o).unique_studies == mo["unique_studies"].get<std::size_t>());
        CHECK(s.per_organ.at(o).total_words == mo["total_words"].get<std::size_t>());
        if (o == Organ::Other) continue;
        CHECK(db.text_index(o).size() == mo["text_index_size"].get<std::size_t>());
        CHECK(db.image_index(o).size() == mo["image_index_size"].get<std::size_t>());
    }
}

TEST_CASE("knn") {
    SynthConfig cfg;
    cfg.seed = 8;
    cfg.n_studies = 100;
    const auto c = gen_synthetic_corpus(cfg);
    const auto db = db_from(c);
    const auto& img = c.image_embeddings.at(Organ::Lung);

    SUBCASE("query equal to a stored vector ranks it first") {
        const Eigen::VectorXd q = img.data.row(17).transpose();
        const auto hits = db.knn(Organ::Lung, Space::Image, q, 5);
        CHECK(hits.front().id == img.ids[17]);
        CHECK(hits.front().score == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("k beyond the index returns every entry, ordered") {
        const Eigen::VectorXd q = img.data.row(0).transpose();
        const auto hits = db.knn(Organ::Lung, Space::Image, q, 1000);
        CHECK(hits.size() == img.ids.size());
        std::set<std::string> ids;
        for (std::size_t i = 0; i < hits.size(); ++i) {
            ids.insert(hits[i].id);
            if (i) CHECK((hits[i - 1].score > hits[i].score ||
                          (hits[i - 1].score == hits[i].score && hits[i - 1].id < hits[i].id)));
        }
        CHECK(ids.size() == img.ids.size());
    }
    SUBCASE("matches an exhaustive scan, with and without self-exclusion") {
        std::mt19937_64 rng(2);
        for (int t = 0; t < 20; ++t) {
            const Eigen::VectorXd q = oracle::gaussian_matrix(img.dim(), 1, rng).col(0);
            const std::string self = img.ids[static_cast<std::size_t>(t)];
            const auto scores = oracle::cosines(img.data, q);
            std::vector<std::pair<std::string, double>> all, rest;
            for (std::size_t i = 0; i < img.ids.size(); ++i) {
                all.emplace_back(img.ids[i], scores[i]);
                if (img.ids[i] != self) rest.emplace_back(img.ids[i], scores[i]);
            }
            oracle::rank(all);
            oracle::rank(rest);
            const auto got = db.knn(Organ::Lung, Space::Image, q, 10);
            const auto got_ex = db.knn(Organ::Lung, Space::Image, q, 10, self);
            for (std::size_t i = 0; i < 10; ++i) {
                CHECK(got[i].id == all[i].first);
                CHECK(got[i].score == doctest::Approx(all[i].second).epsilon(1e-12));
                CHECK(got_ex[i].id == rest[i].first);
            }
        }
    }
    SUBCASE("text knn excludes all sentences of the excluded study") {
        const auto& sid = db.study_sentences("synth_00003", Organ::Lung).front();
        const Eigen::VectorXd q = *db.sentence_embedding(sid);
        const auto hits = db.knn(Organ::Lung, Space::Text, q, 50, std::string("synth_00003"));
        for (const auto& h : hits) CHECK(db.study_of(Space::Text, h.id) != "synth_00003");
        CHECK(db.knn(Organ::Lung, Space::Text, q, 1).front().id == sid);
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(db.knn(Organ::Lung, Space::Image, Eigen::VectorXd::Ones(3), 1), DomainError);
        CHECK_THROWS_AS(db.knn(Organ::Lung, Space::Image, Eigen::VectorXd::Ones(img.dim()), 0), DomainError);
        CHECK_THROWS_AS(db.knn(Organ::Other, Space::Text, Eigen::VectorXd::Ones(img.dim()), 1), DomainError);
    }
}

TEST_CASE("no index ever holds an 'other' sentence") {
    SynthConfig cfg;
    cfg.n_studies = 30;
    const auto db = db_from(gen_synthetic_corpus(cfg));
    for (Organ o : kIndexedOrgans)
        for (const auto& id : db.text_index(o).ids()) CHECK(db.record(id).organ == o);
}

TEST_CASE("database persistence round-trips") {
    testing_support::TempDir tmp;
    SynthConfig cfg;
    cfg.seed = 12;
    cfg.n_studies = 25;
    const auto c = gen_synthetic_corpus(cfg);
    const auto db = db_from(c);
    db.save(tmp.path());
    const auto back = SentenceDB::load(tmp.path());
    CHECK(back.records() == db.records());
    CHECK(db_stats(back) == db_stats(db));
    for (Organ o : kIndexedOrgans) {
        CHECK(back.text_index(o).ids() == db.text_index(o).ids());
        CHECK(back.text_index(o).vectors() == db.text_index(o).vectors());
        CHECK(back.image_index(o).vectors() == db.image_index(o).vectors());
    }
    // rebuilding from the same inputs is bit-identical
    const auto again = db_from(c);
    CHECK(again.records() == db.records());
    CHECK(again.text_index(Organ::Lung).vectors() == db.text_index(Organ::Lung).vectors());
}

TEST_CASE("paragraph and sentence record files round-trip") {
    testing_support::TempDir tmp;
    const std::vector<OrganParagraph> paras{{"s1", Organ::Lung, "A. B."}, {"s2", Organ::Other, "C \"quoted\"."}};
    save_paragraphs(paras, tmp / "p.jsonl");
    const auto back = load_paragraphs(tmp / "p.jsonl");
    REQUIRE(back.size() == 2);
    CHECK(back[1].text == paras[1].text);
    CHECK(back[1].organ == Organ::Other);
    CHECK(load_paragraphs(tmp.path()).size() == 2);  // directory of *.jsonl

    const auto db = build_database(paras, EmbeddingMatrix{}, {}, empty_labels({"s1", "s2"}));
    save_sentence_records(db.records(), tmp / "r.jsonl");
    auto recs = load_sentence_records(tmp / "r.jsonl");
    CHECK(recs == db.records());
}
