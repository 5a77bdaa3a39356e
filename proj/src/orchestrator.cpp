#include "organrag/orchestrator.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

namespace organrag {

namespace fs = std::filesystem;
using nlohmann::json;

std::string wrap_context(std::span<const std::string> sentences) {
    std::string out(kRetStart);
    for (const auto& s : sentences) {
        out += ' ';
        out += s;
    }
    out += ' ';
    out += kRetEnd;
    return out;
}

bool matches_context_grammar(std::string_view payload) {
    const std::string open = std::string(kRetStart) + " ";
    const std::string close = " " + std::string(kRetEnd);
    if (payload.size() <= open.size() + close.size()) return false;
    if (payload.substr(0, open.size()) != open) return false;
    if (payload.substr(payload.size() - close.size()) != close) return false;
    const std::string_view inner = payload.substr(open.size(), payload.size() - open.size() - close.size());
    if (inner.find(kRetStart) != std::string_view::npos || inner.find(kRetEnd) != std::string_view::npos) return false;
    return std::any_of(inner.begin(), inner.end(), [](char c) { return !std::isspace(static_cast<unsigned char>(c)); });
}

std::vector<ContextItem> inject_context(std::vector<ContextItem> context, std::span<const std::string> sentences) {
    if (sentences.empty()) return context;
    context.push_back({ContextKind::InjectedContext, wrap_context(sentences)});
    return context;
}

// ---------------------------------------------------------------------------
// Scripted mock

ScriptedGenerator::ScriptedGenerator(std::vector<ScriptLine> script, std::map<std::size_t, std::string> overrides)
    : script_(std::move(script)), overrides_(std::move(overrides)) {
    if (script_.empty()) throw DomainError("ScriptedGenerator: script must not be empty");
}

GeneratedSentence ScriptedGenerator::next_sentence(std::span<const ContextItem> context) {
    std::size_t sentences = 0, stubs = 0;
    for (const auto& c : context) {
        if (c.kind == ContextKind::GeneratedSentence) ++sentences;
        if (c.kind == ContextKind::VisualStub) ++stubs;
    }
    const std::size_t position = sentences + (stubs > 0 ? stubs - 1 : 0);
    if (position >= script_.size()) return {};

    const ScriptLine& line = script_[position];
    GeneratedSentence out{line.text, line.emits_rag, line.perplexity};
    // a section break is never overridden
    if (!out.text.empty() && !context.empty() && context.back().kind == ContextKind::InjectedContext) {
        if (auto it = overrides_.find(sentences); it != overrides_.end()) out.text = it->second;
    }
    return out;
}

Script load_script(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError(LoadErrorKind::Io, "cannot open " + path.string());
    Script s;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            if (j.contains("override_index")) {
                s.overrides[j.at("override_index").get<std::size_t>()] = j.at("text").get<std::string>();
            } else if (j.contains("study_id") && !j.contains("text")) {
                s.study_id = j.at("study_id").get<std::string>();
            } else {
                s.lines.push_back({j.at("text").get<std::string>(), j.value("rag", false), j.value("perplexity", 1.0)});
            }
        } catch (const json::exception& e) {
            throw LoadError(LoadErrorKind::Malformed, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return s;
}

void save_script(const Script& script, const fs::path& path) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw LoadError(LoadErrorKind::Io, "cannot write " + path.string());
    if (script.study_id) out << json{{"study_id", *script.study_id}}.dump() << '\n';
    for (const auto& l : script.lines)
        out << json{{"text", l.text}, {"rag", l.emits_rag}, {"perplexity", l.perplexity}}.dump() << '\n';
    for (const auto& [idx, text] : script.overrides)
        out << json{{"override_index", idx}, {"text", text}}.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Policies

DecodePolicy parse_policy(std::string_view text) {
    auto number_after = [&](std::size_t colon) -> int {
        const std::string digits(text.substr(colon + 1));
        if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
            throw DomainError("bad policy '" + std::string(text) + "'");
        return std::stoi(digits);
    };
    if (text == "norag") return NoRag{};
    if (text == "adaptive") return Adaptive{};
    if (text.starts_with("adaptive:")) return Adaptive{number_after(8)};
    if (text.starts_with("fixed:")) {
        const int n = number_after(5);
        if (n < 1) throw DomainError("fixed interval must be >= 1");
        return FixedInterval{n};
    }
    throw DomainError("unknown policy '" + std::string(text) + "' (expected norag | fixed:N | adaptive:K)");
}

std::string to_string(const DecodePolicy& p) {
    if (std::holds_alternative<NoRag>(p)) return "norag";
    if (auto f = std::get_if<FixedInterval>(&p)) return "fixed:" + std::to_string(f->n);
    return "adaptive:" + std::to_string(std::get<Adaptive>(p).k_rag_max);
}

// ---------------------------------------------------------------------------
// Database-backed retrieval

namespace {

std::string normalize_key(std::string_view text) {
    std::string out;
    for (char c : text) out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    const auto b = out.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = out.find_last_not_of(" \t\r\n");
    return out.substr(b, e - b + 1);
}

}  // namespace

DatabaseLookupEncoder::DatabaseLookupEncoder(const SentenceDB& db) : db_(db) {
    for (const auto& r : db.records())
        if (r.has_embedding && r.organ != Organ::Other) by_text_[normalize_key(r.text)].push_back(r.sentence_id);
}

std::optional<Eigen::VectorXd> DatabaseLookupEncoder::encode(std::string_view text) const {
    auto it = by_text_.find(normalize_key(text));
    if (it == by_text_.end()) return std::nullopt;
    Eigen::VectorXd sum;
    for (const auto& id : it->second) {
        auto v = db_.sentence_embedding(id);
        if (!v) continue;
        if (sum.size() == 0) sum = Eigen::VectorXd::Zero(v->size());
        if (sum.size() != v->size()) continue;
        sum += *v;
    }
    if (sum.size() == 0 || sum.norm() == 0.0) return std::nullopt;
    return sum;
}

DatabaseRetriever::DatabaseRetriever(const SentenceDB& db, const TextEncoder& encoder, RetrievalConfig cfg,
                                     std::map<Organ, Eigen::VectorXd> image_queries,
                                     std::optional<std::string> exclude_study)
    : db_(db),
      encoder_(encoder),
      cfg_(cfg),
      image_queries_(std::move(image_queries)),
      exclude_study_(std::move(exclude_study)) {
    validate(cfg_);
}

RetrievalResult DatabaseRetriever::retrieve(Organ organ, std::string_view query) {
    if (organ == Organ::Other) throw RetrievalFailure("no retrieval index for organ 'other'");
    const auto emb = encoder_.encode(query);
    if (!emb) throw RetrievalFailure("query has no text embedding");
    try {
        if (cfg_.strategy == Strategy::Text2Text) return text2text_retrieve(db_, organ, *emb, cfg_, exclude_study_);
        auto img = image_queries_.find(organ);
        if (img == image_queries_.end())
            throw RetrievalFailure("no image query for organ '" + std::string(to_string(organ)) + "'");
        return two_stage_retrieve(db_, organ, img->second, query, *emb, cfg_, exclude_study_);
    } catch (const DomainError& e) {
        throw RetrievalFailure(e.what());
    }
}

// ---------------------------------------------------------------------------
// Trace

std::string_view event_kind(const TraceEvent& e) {
    struct Visitor {
        std::string_view operator()(const events::OrganStarted&) const { return "organ_started"; }
        std::string_view operator()(const events::SentenceEmitted&) const { return "sentence_emitted"; }
        std::string_view operator()(const events::TriggerFired&) const { return "trigger_fired"; }
        std::string_view operator()(const events::QueryDrafted&) const { return "query_drafted"; }
        std::string_view operator()(const events::Retrieved&) const { return "retrieved"; }
        std::string_view operator()(const events::RetrievalFailed&) const { return "retrieval_failed"; }
        std::string_view operator()(const events::RolledBack&) const { return "rolled_back"; }
        std::string_view operator()(const events::ContextInjected&) const { return "context_injected"; }
        std::string_view operator()(const events::Regenerated&) const { return "regenerated"; }
    };
    return std::visit(Visitor{}, e);
}

namespace {

std::string join(const std::vector<std::string>& parts) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += ' ';
        out += parts[i];
    }
    return out;
}

}  // namespace

std::string replay_report(const DecodeTrace& trace) {
    std::vector<std::string> sentences;
    for (const auto& e : trace.events) {
        if (auto s = std::get_if<events::SentenceEmitted>(&e)) sentences.push_back(s->text);
        if (auto r = std::get_if<events::Regenerated>(&e)) sentences.push_back(r->text);
    }
    return join(sentences);
}

std::optional<std::string> check_trace(const DecodeTrace& trace, const DecodePolicy& policy) {
    const auto& ev = trace.events;
    auto kind_at = [&](std::size_t i) -> std::string_view { return i < ev.size() ? event_kind(ev[i]) : "<end>"; };
    int triggers = 0;
    for (std::size_t i = 0; i < ev.size(); ++i) {
        const auto kind = event_kind(ev[i]);
        if (std::holds_alternative<NoRag>(policy) &&
            (kind == "query_drafted" || kind == "retrieved" || kind == "context_injected" ||
             kind == "retrieval_failed" || kind == "trigger_fired"))
            return "retrieval event '" + std::string(kind) + "' under norag";
        if (auto c = std::get_if<events::ContextInjected>(&ev[i]); c && !matches_context_grammar(c->delimited_text))
            return "context block violates delimiter grammar: " + c->delimited_text;
        if (kind != "trigger_fired") continue;
        if (!std::holds_alternative<Adaptive>(policy)) return "trigger under non-adaptive policy";
        ++triggers;
        if (kind_at(i + 1) != "query_drafted") return "trigger not followed by query_drafted";
        if (kind_at(i + 2) == "retrieval_failed") {
            if (kind_at(i + 3) != "sentence_emitted") return "failed retrieval not followed by sentence_emitted";
            continue;
        }
        const std::string_view expected[] = {"retrieved", "rolled_back", "context_injected", "regenerated"};
        for (std::size_t j = 0; j < 4; ++j)
            if (kind_at(i + 2 + j) != expected[j])
                return "trigger block out of order: expected " + std::string(expected[j]) + ", got " +
                       std::string(kind_at(i + 2 + j));
    }
    if (triggers != trace.trigger_count) return "trigger_count does not match trigger events";
    if (auto a = std::get_if<Adaptive>(&policy); a && triggers > a->k_rag_max) return "trigger cap exceeded";
    if (replay_report(trace) != trace.final_report) return "replay does not reconstruct final_report";
    return std::nullopt;
}

json to_json(const TraceEvent& e) {
    json j{{"kind", std::string(event_kind(e))}};
    std::visit(
        [&](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, events::OrganStarted>) j["organ"] = std::string(to_string(v.organ));
            if constexpr (std::is_same_v<T, events::SentenceEmitted> || std::is_same_v<T, events::Regenerated>) {
                j["index"] = v.index;
                j["text"] = v.text;
                j["perplexity"] = v.perplexity;
            }
            if constexpr (std::is_same_v<T, events::TriggerFired> || std::is_same_v<T, events::RolledBack>)
                j["sentence_index"] = v.sentence_index;
            if constexpr (std::is_same_v<T, events::QueryDrafted>) j["text"] = v.text;
            if constexpr (std::is_same_v<T, events::Retrieved>) {
                j["sentence_ids"] = v.sentence_ids;
                j["strategy"] = std::string(to_string(v.strategy));
            }
            if constexpr (std::is_same_v<T, events::RetrievalFailed>) j["reason"] = v.reason;
            if constexpr (std::is_same_v<T, events::ContextInjected>) j["delimited_text"] = v.delimited_text;
        },
        e);
    return j;
}

namespace {

TraceEvent event_from_json(const json& j) {
    const auto kind = j.at("kind").get<std::string>();
    if (kind == "organ_started") return events::OrganStarted{parse_organ(j.at("organ").get<std::string>())};
    if (kind == "sentence_emitted")
        return events::SentenceEmitted{j.at("index").get<std::size_t>(), j.at("text").get<std::string>(),
                                       j.at("perplexity").get<double>()};
    if (kind == "regenerated")
        return events::Regenerated{j.at("index").get<std::size_t>(), j.at("text").get<std::string>(),
                                   j.at("perplexity").get<double>()};
    if (kind == "trigger_fired") return events::TriggerFired{j.at("sentence_index").get<std::size_t>()};
    if (kind == "rolled_back") return events::RolledBack{j.at("sentence_index").get<std::size_t>()};
    if (kind == "query_drafted") return events::QueryDrafted{j.at("text").get<std::string>()};
    if (kind == "retrieved")
        return events::Retrieved{j.at("sentence_ids").get<std::vector<std::string>>(),
                                 parse_strategy(j.at("strategy").get<std::string>())};
    if (kind == "retrieval_failed") return events::RetrievalFailed{j.at("reason").get<std::string>()};
    if (kind == "context_injected") return events::ContextInjected{j.at("delimited_text").get<std::string>()};
    throw LoadError(LoadErrorKind::Malformed, "unknown trace event kind '" + kind + "'");
}

}  // namespace

void save_trace(const DecodeTrace& trace, const fs::path& path) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw LoadError(LoadErrorKind::Io, "cannot write " + path.string());
    for (const auto& e : trace.events) out << to_json(e).dump() << '\n';
    out << json{{"kind", "final"},
                {"final_report", trace.final_report},
                {"trigger_count", trace.trigger_count},
                {"aborted", trace.aborted},
                {"error", trace.error}}
               .dump()
        << '\n';
}

DecodeTrace load_trace(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError(LoadErrorKind::Io, "cannot open " + path.string());
    DecodeTrace t;
    std::string line;
    bool saw_final = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            if (j.at("kind") == "final") {
                t.final_report = j.at("final_report").get<std::string>();
                t.trigger_count = j.at("trigger_count").get<int>();
                t.aborted = j.value("aborted", false);
                t.error = j.value("error", std::string{});
                saw_final = true;
            } else {
                t.events.push_back(event_from_json(j));
            }
        } catch (const json::exception& e) {
            throw LoadError(LoadErrorKind::Malformed, path.string() + ": " + e.what());
        }
    }
    if (!saw_final) throw LoadError(LoadErrorKind::Truncated, path.string() + " has no final record");
    return t;
}

// ---------------------------------------------------------------------------
// Decoding

std::vector<std::size_t> fixed_interval_positions(std::size_t total_sentences, int n) {
    if (n < 1) throw DomainError("fixed_interval_positions: n must be >= 1");
    std::vector<std::size_t> out;
    for (std::size_t p = static_cast<std::size_t>(n); p <= total_sentences; p += static_cast<std::size_t>(n))
        out.push_back(p);
    return out;
}

namespace {

class Decoder {
public:
    Decoder(Generator& gen, const DecodePolicy& policy, ContextRetriever* retriever)
        : gen_(gen), policy_(policy), retriever_(retriever) {}

    DecodeResult run(std::span<const Organ> plan, std::size_t max_sentences) {
        if (plan.empty()) throw DomainError("decode_report: organ plan must not be empty");
        try {
            for (Organ organ : plan) {
                trace_.events.push_back(events::OrganStarted{organ});
                context_.push_back({ContextKind::VisualStub, std::string(to_string(organ))});
                while (sentences_.size() < max_sentences) {
                    maybe_inject_fixed(organ);
                    GeneratedSentence out = gen_.next_sentence(context_);
                    if (out.text.empty()) break;
                    if (should_trigger(out))
                        handle_trigger(organ, out);
                    else
                        emit(out);
                }
            }
        } catch (const GeneratorError& e) {
            abort(e.what());
        } catch (const std::exception& e) {
            abort(std::string("generator failure: ") + e.what());
        }
        trace_.final_report = join(sentences_);
        return {trace_.final_report, std::move(trace_)};
    }

private:
    void abort(std::string message) {
        trace_.aborted = true;
        trace_.error = std::move(message);
    }

    bool should_trigger(const GeneratedSentence& out) const {
        const auto* a = std::get_if<Adaptive>(&policy_);
        return a && out.emits_rag && trace_.trigger_count < a->k_rag_max;
    }

    void emit(const GeneratedSentence& out) {
        trace_.events.push_back(events::SentenceEmitted{sentences_.size(), out.text, out.perplexity});
        push_sentence(out.text);
    }

    void push_sentence(const std::string& text) {
        sentences_.push_back(text);
        context_.push_back({ContextKind::GeneratedSentence, text});
    }

    /// Retrieval with failures converted into a logged reason.
    std::optional<RetrievalResult> try_retrieve(Organ organ, const std::string& query) {
        if (!retriever_) {
            trace_.events.push_back(events::RetrievalFailed{"no retriever configured"});
            return std::nullopt;
        }
        try {
            RetrievalResult r = retriever_->retrieve(organ, query);
            if (r.selected.empty()) {
                trace_.events.push_back(events::RetrievalFailed{"empty retrieval"});
                return std::nullopt;
            }
            return r;
        } catch (const std::exception& e) {
            trace_.events.push_back(events::RetrievalFailed{e.what()});
            return std::nullopt;
        }
    }

    void inject(const RetrievalResult& r) {
        const auto texts = r.selected_texts();
        context_ = inject_context(std::move(context_), texts);
        trace_.events.push_back(events::ContextInjected{context_.back().payload});
    }

    void maybe_inject_fixed(Organ organ) {
        const auto* f = std::get_if<FixedInterval>(&policy_);
        if (!f) return;
        const std::size_t position = sentences_.size() + 1;
        if (position % static_cast<std::size_t>(f->n) != 0 || position == last_fixed_position_) return;
        last_fixed_position_ = position;
        if (sentences_.empty()) {
            trace_.events.push_back(events::RetrievalFailed{"no previous sentence to query with"});
            return;
        }
        trace_.events.push_back(events::QueryDrafted{sentences_.back()});
        if (auto r = try_retrieve(organ, sentences_.back())) {
            trace_.events.push_back(events::Retrieved{r->selected_ids(), r->strategy});
            inject(*r);
        }
    }

    void handle_trigger(Organ organ, const GeneratedSentence& draft) {
        const std::size_t index = sentences_.size();
        ++trace_.trigger_count;
        trace_.events.push_back(events::TriggerFired{index});
        trace_.events.push_back(events::QueryDrafted{draft.text});
        auto r = try_retrieve(organ, draft.text);
        if (!r) {
            emit(draft);
            return;
        }
        trace_.events.push_back(events::Retrieved{r->selected_ids(), r->strategy});
        trace_.events.push_back(events::RolledBack{index});
        inject(*r);
        const GeneratedSentence regen = gen_.next_sentence(context_);
        if (regen.text.empty()) throw GeneratorError("generator returned nothing on regeneration");
        trace_.events.push_back(events::Regenerated{index, regen.text, regen.perplexity});
        push_sentence(regen.text);
    }

    Generator& gen_;
    const DecodePolicy& policy_;
    ContextRetriever* retriever_;
    std::vector<ContextItem> context_;
    std::vector<std::string> sentences_;
    DecodeTrace trace_;
    std::size_t last_fixed_position_ = 0;
};

}  // namespace

DecodeResult decode_report(Generator& gen, const DecodePolicy& policy, ContextRetriever* retriever,
                           std::span<const Organ> organ_plan, std::size_t max_sentences) {
    if (auto f = std::get_if<FixedInterval>(&policy); f && f->n < 1) throw DomainError("fixed interval n must be >= 1");
    if (auto a = std::get_if<Adaptive>(&policy); a && a->k_rag_max < 0) throw DomainError("k_rag_max must be >= 0");
    return Decoder(gen, policy, retriever).run(organ_plan, max_sentences);
}

TriggerStats trigger_stats(std::span<const DecodeTrace> traces) {
    TriggerStats s;
    if (traces.empty()) return s;
    std::vector<int> counts;
    for (const auto& t : traces) counts.push_back(t.trigger_count);
    std::sort(counts.begin(), counts.end());
    double sum = 0.0;
    std::size_t zero = 0, low = 0, high = 0;
    for (int c : counts) {
        sum += c;
        ++s.histogram[c];
        if (c == 0)
            ++zero;
        else if (c <= 2)
            ++low;
        else
            ++high;
    }
    const double n = static_cast<double>(counts.size());
    s.mean = sum / n;
    const std::size_t m = counts.size() / 2;
    s.median = counts.size() % 2 ? counts[m] : 0.5 * (counts[m - 1] + counts[m]);
    s.zero_fraction = static_cast<double>(zero) / n;
    s.one_to_two_fraction = static_cast<double>(low) / n;
    s.three_plus_fraction = static_cast<double>(high) / n;
    return s;
}

}  // namespace organrag
