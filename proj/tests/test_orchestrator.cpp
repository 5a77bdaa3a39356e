#include <doctest.h>

#include <random>

#include "decode_support.hpp"
#include "organrag/orchestrator.hpp"
#include "support.hpp"

using namespace organrag;
using testing_support::MockRetriever;

namespace {

const std::vector<Organ> kPlan(kIndexedOrgans.begin(), kIndexedOrgans.end());

std::vector<std::string> kinds(const DecodeTrace& t) {
    std::vector<std::string> out;
    for (const auto& e : t.events) out.emplace_back(event_kind(e));
    return out;
}

DecodeResult run(const Script& s, const DecodePolicy& p, ContextRetriever* r, std::span<const Organ> plan = kPlan) {
    ScriptedGenerator gen(s.lines, s.overrides);
    return decode_report(gen, p, r, plan);
}

/// Expected report computed from the script alone, assuming retrieval always succeeds.
std::string expected_report(const Script& s, const DecodePolicy& policy) {
    std::vector<std::string> out;
    std::size_t section = 0, prev_section = 0;
    int triggers = 0;
    for (const auto& line : s.lines) {
        if (line.text.empty()) {
            ++section;
            continue;
        }
        const std::size_t i = out.size();
        bool injected = false;
        if (auto a = std::get_if<Adaptive>(&policy); a && line.emits_rag && triggers < a->k_rag_max) {
            ++triggers;
            injected = true;
        }
        if (auto f = std::get_if<FixedInterval>(&policy))
            injected = i >= 1 && (i + 1) % static_cast<std::size_t>(f->n) == 0 && prev_section == section;
        auto it = s.overrides.find(i);
        out.push_back(injected && it != s.overrides.end() ? it->second : line.text);
        prev_section = section;
    }
    std::string joined;
    for (const auto& t : out) joined += (joined.empty() ? "" : " ") + t;
    return joined;
}

}  // namespace

TEST_CASE("context delimiter grammar") {
    const std::vector<std::string> one{"s1"};
    CHECK(wrap_context(one) == "<|ret_start|> s1 <|ret_end|>");
    const std::vector<std::string> two{"a b.", "c."};
    CHECK(wrap_context(two) == "<|ret_start|> a b. c. <|ret_end|>");
    CHECK(matches_context_grammar(wrap_context(two)));
    CHECK_FALSE(matches_context_grammar("<|ret_start|>  <|ret_end|>"));
    CHECK_FALSE(matches_context_grammar("<|ret_start|> x <|ret_end|> "));
    CHECK_FALSE(matches_context_grammar("<|ret_start|> x <|ret_start|> y <|ret_end|>"));
    CHECK_FALSE(matches_context_grammar("x"));

    std::vector<ContextItem> ctx{{ContextKind::VisualStub, "lung"}};
    CHECK(inject_context(ctx, std::vector<std::string>{}) == ctx);
    const auto grown = inject_context(ctx, one);
    REQUIRE(grown.size() == 2);
    CHECK(grown.back() == ContextItem{ContextKind::InjectedContext, "<|ret_start|> s1 <|ret_end|>"});
}

TEST_CASE("policy parsing") {
    CHECK(std::holds_alternative<NoRag>(parse_policy("norag")));
    CHECK(std::get<Adaptive>(parse_policy("adaptive")).k_rag_max == 4);
    CHECK(std::get<Adaptive>(parse_policy("adaptive:2")).k_rag_max == 2);
    CHECK(std::get<FixedInterval>(parse_policy("fixed:3")).n == 3);
    CHECK(to_string(parse_policy("fixed:3")) == "fixed:3");
    CHECK_THROWS(parse_policy("fixed:0"));
    CHECK_THROWS(parse_policy("sometimes"));
}

TEST_CASE("norag passes the script through byte for byte") {
    Script s;
    s.lines = {{"Lungs clear.", true, 2.0}, {"No nodules.", false, 1.0}, {"", false, 1.0}, {"Heart normal.", true, 3.0}};
    s.overrides = {{0, "never used."}};
    MockRetriever retriever;
    const auto r = run(s, NoRag{}, &retriever);
    CHECK(r.report == "Lungs clear. No nodules. Heart normal.");
    CHECK(retriever.calls == 0);
    CHECK(r.trace.trigger_count == 0);
    CHECK_FALSE(check_trace(r.trace, NoRag{}).has_value());
    CHECK(kinds(r.trace) == std::vector<std::string>{"organ_started", "sentence_emitted", "sentence_emitted",
                                                     "organ_started", "sentence_emitted", "organ_started",
                                                     "organ_started"});
}

TEST_CASE("adaptive trigger block has the exact event order") {
    Script s;
    s.lines = {{"First.", false, 1.0}, {"Draft sentence.", true, 9.0}, {"", false, 1.0}};
    s.overrides = {{1, "Grounded sentence."}};
    MockRetriever retriever(2);
    const auto r = run(s, Adaptive{4}, &retriever, std::vector<Organ>{Organ::Lung});
    CHECK(kinds(r.trace) == std::vector<std::string>{"organ_started", "sentence_emitted", "trigger_fired",
                                                     "query_drafted", "retrieved", "rolled_back", "context_injected",
                                                     "regenerated"});
    CHECK(retriever.queries == std::vector<std::string>{"Draft sentence."});
    CHECK(std::get<events::TriggerFired>(r.trace.events[2]).sentence_index == 1);
    CHECK(std::get<events::Retrieved>(r.trace.events[4]).sentence_ids ==
          std::vector<std::string>{"db/lung/1_0", "db/lung/1_1"});
    CHECK(std::get<events::ContextInjected>(r.trace.events[6]).delimited_text ==
          "<|ret_start|> retrieved 1.0. retrieved 1.1. <|ret_end|>");
    CHECK(r.report == "First. Grounded sentence.");  // the draft is rolled back
    CHECK(r.trace.trigger_count == 1);
    CHECK_FALSE(check_trace(r.trace, Adaptive{4}).has_value());
}

TEST_CASE("adaptive trigger cap") {
    Script s;
    for (int i = 0; i < 6; ++i) s.lines.push_back({"rag " + std::to_string(i) + ".", true, 5.0});
    MockRetriever retriever;
    const auto r = run(s, Adaptive{4}, &retriever, std::vector<Organ>{Organ::Lung});
    CHECK(r.trace.trigger_count == 4);
    CHECK(retriever.calls == 4);
    CHECK(r.report == "rag 0. rag 1. rag 2. rag 3. rag 4. rag 5.");
    CHECK_FALSE(check_trace(r.trace, Adaptive{4}).has_value());
    const auto none = run(s, Adaptive{0}, &retriever, std::vector<Organ>{Organ::Lung});
    CHECK(none.trace.trigger_count == 0);
}

TEST_CASE("failed retrieval keeps the draft") {
    Script s;
    s.lines = {{"Draft.", true, 1.0}};
    s.overrides = {{0, "unused."}};
    MockRetriever retriever(2, true);
    const auto r = run(s, Adaptive{4}, &retriever, std::vector<Organ>{Organ::Lung});
    CHECK(kinds(r.trace) == std::vector<std::string>{"organ_started", "trigger_fired", "query_drafted",
                                                     "retrieval_failed", "sentence_emitted"});
    CHECK(r.report == "Draft.");
    CHECK_FALSE(r.trace.aborted);
    CHECK_FALSE(check_trace(r.trace, Adaptive{4}).has_value());

    const auto no_retriever = run(s, Adaptive{4}, nullptr, std::vector<Organ>{Organ::Lung});
    CHECK(no_retriever.report == "Draft.");
    MockRetriever empty(0);
    CHECK(run(s, Adaptive{4}, &empty, std::vector<Organ>{Organ::Lung}).report == "Draft.");
}

TEST_CASE("fixed interval injects before every n-th sentence") {
    CHECK(fixed_interval_positions(10, 3) == std::vector<std::size_t>{3, 6, 9});
    CHECK(fixed_interval_positions(2, 3).empty());
    CHECK_THROWS(fixed_interval_positions(5, 0));

    Script s;
    for (int i = 0; i < 5; ++i) s.lines.push_back({"s" + std::to_string(i) + ".", false, 1.0});
    s.overrides = {{1, "after first."}, {3, "after third."}};
    MockRetriever retriever;
    const auto r = run(s, FixedInterval{2}, &retriever, std::vector<Organ>{Organ::Lung});
    // position 6 is due before the generator reveals the script is over, so
    // that injection happens but feeds no sentence
    CHECK(retriever.queries == std::vector<std::string>{"s0.", "s2.", "s4."});
    CHECK(r.report == "s0. after first. s2. after third. s4.");
    CHECK(r.trace.trigger_count == 0);
    CHECK_FALSE(check_trace(r.trace, FixedInterval{2}).has_value());
    CHECK_THROWS_AS(run(s, FixedInterval{0}, &retriever), DomainError);
}

TEST_CASE("generator failures abort with a partial trace") {
    class Flaky final : public Generator {
    public:
        GeneratedSentence next_sentence(std::span<const ContextItem>) override {
            if (++calls > 2) throw GeneratorError("model crashed");
            return {"ok.", false, 1.0};
        }
        int calls = 0;
    } flaky;
    const auto r = decode_report(flaky, NoRag{}, nullptr, kPlan);
    CHECK(r.trace.aborted);
    CHECK(r.trace.error == "model crashed");
    CHECK(r.report == "ok. ok.");

    Script s;  // an empty regeneration counts as a generator failure
    s.lines = {{"Draft.", true, 1.0}};
    s.overrides = {{0, ""}};
    MockRetriever retriever;
    const auto e = run(s, Adaptive{4}, &retriever, std::vector<Organ>{Organ::Lung});
    CHECK(e.trace.aborted);
}

TEST_CASE("randomized scripts: replay and the reference report agree") {
    std::mt19937_64 rng(99);
    for (int t = 0; t < 100; ++t) {
        const Script s = testing_support::random_script(rng);
        for (const DecodePolicy& policy : {DecodePolicy{NoRag{}}, DecodePolicy{FixedInterval{3}}, DecodePolicy{Adaptive{4}}}) {
            MockRetriever retriever;
            const auto r = run(s, policy, &retriever);
            CHECK(replay_report(r.trace) == r.report);
            CHECK(r.report == expected_report(s, policy));
            const auto problem = check_trace(r.trace, policy);
            CHECK_MESSAGE(!problem, (problem ? *problem : ""));
            for (const auto& e : r.trace.events)
                if (auto c = std::get_if<events::ContextInjected>(&e)) CHECK(matches_context_grammar(c->delimited_text));
        }
    }
}

TEST_CASE("check_trace flags tampered traces") {
    Script s;
    s.lines = {{"A.", false, 1.0}, {"B.", true, 1.0}};
    MockRetriever retriever;
    const auto good = run(s, Adaptive{4}, &retriever, std::vector<Organ>{Organ::Lung});
    REQUIRE_FALSE(check_trace(good.trace, Adaptive{4}).has_value());

    auto swapped = good.trace;
    std::swap(swapped.events[4], swapped.events[5]);  // retrieved <-> rolled_back
    CHECK(check_trace(swapped, Adaptive{4}).has_value());

    auto edited = good.trace;
    edited.final_report += " extra.";
    CHECK(check_trace(edited, Adaptive{4}).has_value());

    auto bad_block = good.trace;
    std::get<events::ContextInjected>(bad_block.events[6]).delimited_text = "retrieved text";
    CHECK(check_trace(bad_block, Adaptive{4}).has_value());

    CHECK(check_trace(good.trace, NoRag{}).has_value());
    CHECK(check_trace(good.trace, Adaptive{0}).has_value());
}

TEST_CASE("trace files round-trip") {
    testing_support::TempDir tmp;
    Script s;
    s.lines = {{"A.", false, 1.5}, {"B.", true, 2.5}, {"", false, 1.0}, {"C.", true, 3.0}};
    s.overrides = {{1, "B2."}};
    MockRetriever retriever;
    const auto r = run(s, Adaptive{1}, &retriever);
    save_trace(r.trace, tmp / "t.jsonl");
    const auto back = load_trace(tmp / "t.jsonl");
    REQUIRE(back.events.size() == r.trace.events.size());
    for (std::size_t i = 0; i < back.events.size(); ++i) CHECK(to_json(back.events[i]) == to_json(r.trace.events[i]));
    CHECK(back.final_report == r.report);
    CHECK(back.trigger_count == 1);
    CHECK_FALSE(check_trace(back, Adaptive{1}).has_value());

    testing_support::write_file(tmp / "cut.jsonl", R"({"kind":"organ_started","organ":"lung"})" "\n");
    CHECK_THROWS_AS(load_trace(tmp / "cut.jsonl"), LoadError);
}

TEST_CASE("script files round-trip") {
    testing_support::TempDir tmp;
    Script s;
    s.lines = {{"A.", true, 4.25}, {"", false, 1.0}};
    s.overrides = {{0, "A2."}};
    s.study_id = "synth_00000";
    save_script(s, tmp / "s.jsonl");
    const auto back = load_script(tmp / "s.jsonl");
    REQUIRE(back.lines.size() == 2);
    CHECK(back.lines[0].text == "A.");
    CHECK(back.lines[0].emits_rag);
    CHECK(back.lines[0].perplexity == 4.25);
    CHECK(back.overrides == s.overrides);
    CHECK(back.study_id == s.study_id);
}

TEST_CASE("trigger_stats") {
    std::vector<DecodeTrace> traces(5);
    const int counts[] = {0, 1, 2, 3, 5};
    for (int i = 0; i < 5; ++i) traces[static_cast<std::size_t>(i)].trigger_count = counts[i];
    const auto s = trigger_stats(traces);
    CHECK(s.mean == doctest::Approx(2.2));
    CHECK(s.median == 2.0);
    CHECK(s.zero_fraction == doctest::Approx(0.2));
    CHECK(s.one_to_two_fraction == doctest::Approx(0.4));
    CHECK(s.three_plus_fraction == doctest::Approx(0.4));
    CHECK(s.histogram.at(5) == 1);
    traces.pop_back();
    CHECK(trigger_stats(traces).median == 1.5);
}
