#pragma once

#include <random>
#include <string>
#include <vector>

#include "organrag/orchestrator.hpp"

namespace testing_support {

/// Returns `k` canned sentences tagged with the query; fails on demand.
class MockRetriever final : public organrag::ContextRetriever {
public:
    explicit MockRetriever(std::size_t k = 2, bool fail = false) : k_(k), fail_(fail) {}

    organrag::RetrievalResult retrieve(organrag::Organ organ, std::string_view query) override {
        ++calls;
        queries.emplace_back(query);
        if (fail_) throw organrag::RetrievalFailure("mock outage");
        organrag::RetrievalResult r;
        r.query_text = std::string(query);
        for (std::size_t i = 0; i < k_; ++i) {
            organrag::SentenceRecord rec;
            rec.sentence_id = "db/" + std::string(organrag::to_string(organ)) + "/" + std::to_string(calls) + "_" +
                              std::to_string(i);
            rec.organ = organ;
            rec.text = "retrieved " + std::to_string(calls) + "." + std::to_string(i) + ".";
            r.selected.push_back(rec);
        }
        return r;
    }

    int calls = 0;
    std::vector<std::string> queries;

private:
    std::size_t k_;
    bool fail_;
};

/// Random script over the four indexed organs: each organ gets 0-5
/// sentences followed by a section break, some flagged for retrieval, with
/// random post-injection overrides.
inline organrag::Script random_script(std::mt19937_64& rng) {
    organrag::Script s;
    std::uniform_int_distribution<int> count(0, 5);
    std::bernoulli_distribution rag(0.35), override_text(0.5);
    std::uniform_real_distribution<double> ppl(1.0, 20.0);
    std::size_t sentence = 0;
    for (int organ = 0; organ < 4; ++organ) {
        for (int i = count(rng); i > 0; --i) {
            s.lines.push_back({"organ " + std::to_string(organ) + " line " + std::to_string(sentence) + ".", rag(rng),
                               ppl(rng)});
            if (override_text(rng)) s.overrides[sentence] = "revised " + std::to_string(sentence) + ".";
            ++sentence;
        }
        s.lines.push_back({"", false, 1.0});
    }
    return s;
}

}  // namespace testing_support
