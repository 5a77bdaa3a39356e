#include "organrag/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "organrag/diagnostics.hpp"
#include "organrag/orchestrator.hpp"
#include "organrag/parallel.hpp"
#include "organrag/retrieval.hpp"
#include "organrag/rng.hpp"
#include "organrag/sentencedb.hpp"
#include "organrag/synthgen.hpp"
#include "organrag/trainprep.hpp"

namespace organrag::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunConfig {
    std::string config;
    std::uint64_t seed = 0;
    unsigned threads = 1;

    // paths
    std::string out, db, labels, paragraphs, sent_emb, img_emb, reports, perplexities, script, trace_out;
    std::vector<std::string> emb;

    // gen-synthetic
    std::size_t studies = 100;
    long dim_image = 32, dim_text = 32, global_dim = 64;
    double spread = 0.3, prevalence = 0.2;
    std::string planted_signal = "none";
    std::string probe_finding = "Emphysema";
    std::size_t findings_per_study = 0;  // 0 = draw by prevalence

    // probe / project-test
    std::vector<std::string> finding;
    double eval_fraction = 0.5;
    double l2 = 1.0;
    int max_iter = 1000;
    double tol = 1e-8;
    bool unbalanced = false;
    int top_k = 2;

    // retrieval
    std::string organ = "lung";
    std::string query_id;
    std::size_t k = 10;
    std::size_t k_coarse = 20, k_fine = 3, text_pool_depth = 50;
    double lambda = 0.7;
    std::string strategy = "twostage";
    std::string modality = "all";
    bool include_self = false;

    // decode
    std::string policy = "adaptive:4";
    std::string study;
    std::size_t max_sentences = 256;

    // prep-train
    double percentile = 80.0, p_oracle = 0.7;
    int k_rag = 4, oracle_count_min = 1, oracle_count_max = 2;
    std::string percentile_scope = "report";
};

struct UsageError : std::runtime_error {
    UsageError(const std::string& what, std::vector<std::string> keys = {})
        : std::runtime_error(what), keys(std::move(keys)) {}
    std::vector<std::string> keys;
};

// ---------------------------------------------------------------------------
// Config file keys, bound to the same fields as the flags.

using Setter = std::function<bool(const json&)>;  // false = wrong type

template <typename T>
Setter setter(T& ref) {
    return [&ref](const json& j) {
        if constexpr (std::is_same_v<T, std::string>) {
            if (!j.is_string()) return false;
            ref = j.get<std::string>();
        } else if constexpr (std::is_same_v<T, bool>) {
            if (!j.is_boolean()) return false;
            ref = j.get<bool>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!j.is_number()) return false;
            ref = j.get<T>();
        } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
            if (j.is_string()) {
                ref = {j.get<std::string>()};
                return true;
            }
            if (!j.is_array() || !std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_string(); }))
                return false;
            ref = j.get<std::vector<std::string>>();
        } else {
            static_assert(std::is_integral_v<T>);
            if (!j.is_number_integer()) return false;
            if constexpr (std::is_unsigned_v<T>)
                if (j.is_number_integer() && !j.is_number_unsigned()) return false;
            ref = j.get<T>();
        }
        return true;
    };
}

std::map<std::string, Setter> config_keys(RunConfig& c) {
    return {
        {"seed", setter(c.seed)},
        {"threads", setter(c.threads)},
        {"out", setter(c.out)},
        {"db", setter(c.db)},
        {"labels", setter(c.labels)},
        {"paragraphs", setter(c.paragraphs)},
        {"sent_emb", setter(c.sent_emb)},
        {"img_emb", setter(c.img_emb)},
        {"reports", setter(c.reports)},
        {"perplexities", setter(c.perplexities)},
        {"script", setter(c.script)},
        {"trace_out", setter(c.trace_out)},
        {"emb", setter(c.emb)},
        {"studies", setter(c.studies)},
        {"dim_image", setter(c.dim_image)},
        {"dim_text", setter(c.dim_text)},
        {"global_dim", setter(c.global_dim)},
        {"spread", setter(c.spread)},
        {"prevalence", setter(c.prevalence)},
        {"planted_signal", setter(c.planted_signal)},
        {"probe_finding", setter(c.probe_finding)},
        {"findings_per_study", setter(c.findings_per_study)},
        {"finding", setter(c.finding)},
        {"eval_fraction", setter(c.eval_fraction)},
        {"l2", setter(c.l2)},
        {"max_iter", setter(c.max_iter)},
        {"tol", setter(c.tol)},
        {"unbalanced", setter(c.unbalanced)},
        {"top_k", setter(c.top_k)},
        {"organ", setter(c.organ)},
        {"query_id", setter(c.query_id)},
        {"k", setter(c.k)},
        {"k_coarse", setter(c.k_coarse)},
        {"k_fine", setter(c.k_fine)},
        {"text_pool_depth", setter(c.text_pool_depth)},
        {"lambda", setter(c.lambda)},
        {"strategy", setter(c.strategy)},
        {"modality", setter(c.modality)},
        {"include_self", setter(c.include_self)},
        {"policy", setter(c.policy)},
        {"study", setter(c.study)},
        {"max_sentences", setter(c.max_sentences)},
        {"percentile", setter(c.percentile)},
        {"p_oracle", setter(c.p_oracle)},
        {"k_rag", setter(c.k_rag)},
        {"oracle_count_min", setter(c.oracle_count_min)},
        {"oracle_count_max", setter(c.oracle_count_max)},
        {"percentile_scope", setter(c.percentile_scope)},
    };
}

/// Applies a JSON object of config keys; every unknown or mistyped key is reported.
void apply_config_file(const fs::path& path, RunConfig& cfg) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError("config file is not valid JSON: " + std::string(e.what()));
    }
    if (!j.is_object()) throw UsageError("config file must hold a JSON object");
    auto keys = config_keys(cfg);
    std::vector<std::string> unknown, mistyped;
    for (const auto& [key, value] : j.items()) {
        auto it = keys.find(key);
        if (it == keys.end())
            unknown.push_back(key);
        else if (!it->second(value))
            mistyped.push_back(key);
    }
    if (!unknown.empty() || !mistyped.empty()) {
        std::string msg = "invalid config keys:";
        std::vector<std::string> all;
        for (const auto& k : unknown) {
            msg += " " + k + " (unknown)";
            all.push_back(k);
        }
        for (const auto& k : mistyped) {
            msg += " " + k + " (wrong type)";
            all.push_back(k);
        }
        throw UsageError(msg, all);
    }
}

std::optional<std::string> find_config_arg(const std::vector<std::string>& args) {
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
        if (args[i].starts_with("--config=")) return args[i].substr(9);
    }
    return std::nullopt;
}

RetrievalConfig retrieval_config(const RunConfig& c) {
    RetrievalConfig r;
    r.k_coarse = c.k_coarse;
    r.k_fine = c.k_fine;
    r.lambda = c.lambda;
    r.strategy = parse_strategy(c.strategy);
    r.text_pool_depth = c.text_pool_depth;
    validate(r);
    return r;
}

TrainPrepConfig trainprep_config(const RunConfig& c) {
    TrainPrepConfig t;
    t.percentile = c.percentile;
    t.p_oracle = c.p_oracle;
    t.k_rag_max = c.k_rag;
    t.oracle_count_min = c.oracle_count_min;
    t.oracle_count_max = c.oracle_count_max;
    t.seed = c.seed;
    t.scope = parse_percentile_scope(c.percentile_scope);
    validate(t);
    return t;
}

ProbeConfig probe_config(const RunConfig& c) {
    ProbeConfig p;
    p.l2_strength = c.l2;
    p.max_iterations = c.max_iter;
    p.convergence_tol = c.tol;
    p.class_balanced = !c.unbalanced;
    validate(p);
    return p;
}

/// Checks every shared setting up front so no subcommand starts on a bad config.
void validate_run_config(const RunConfig& c) {
    std::vector<std::string> bad;
    std::string msg;
    auto check = [&](const char* key, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            bad.push_back(key);
            msg += std::string(msg.empty() ? "" : "; ") + e.what();
        }
    };
    check("retrieval", [&] { retrieval_config(c); });
    check("trainprep", [&] { trainprep_config(c); });
    check("probe", [&] { probe_config(c); });
    check("policy", [&] { parse_policy(c.policy); });
    check("planted_signal", [&] { parse_planted_signal(c.planted_signal); });
    check("eval_fraction", [&] {
        if (!(c.eval_fraction > 0.0 && c.eval_fraction < 1.0)) throw DomainError("eval_fraction must be in (0,1)");
    });
    check("top_k", [&] {
        if (c.top_k < 1) throw DomainError("top_k must be >= 1");
    });
    check("k", [&] {
        if (c.k < 1) throw DomainError("k must be >= 1");
    });
    if (!bad.empty()) throw UsageError(msg, bad);
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw UsageError(std::string("missing required option ") + flag, {flag});
}

void write_lines(const fs::path& path, const std::vector<json>& records) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream o(path, std::ios::trunc);
    if (!o) throw LoadError(LoadErrorKind::Io, "cannot write " + path.string());
    for (const auto& r : records) o << r.dump() << '\n';
}

std::vector<double> as_vector(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

std::string fixed(double v, int precision = 3) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(precision) << v;
    return s.str();
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_gen_synthetic(const RunConfig& c, std::ostream& out) {
    require(c.out, "--out");
    SynthConfig s;
    s.seed = c.seed;
    s.n_studies = c.studies;
    s.embed_dim_image = c.dim_image;
    s.embed_dim_text = c.dim_text;
    s.global_dim = c.global_dim;
    s.cluster_spread = c.spread;
    s.prevalence = c.prevalence;
    s.planted_signal_mode = parse_planted_signal(c.planted_signal);
    s.probe_finding = c.probe_finding;
    if (c.findings_per_study > 0) s.findings_per_study = c.findings_per_study;
    const auto corpus = gen_synthetic_corpus(s);
    write_synthetic_corpus(corpus, c.out);
    out << json{{"out", c.out},
                {"n_studies", corpus.manifest["n_studies"]},
                {"indexed_sentences", corpus.manifest["indexed_sentences"]},
                {"total_sentences", corpus.manifest["total_sentences"]}}
               .dump()
        << '\n';
    return 0;
}

json to_json(const SpectrumReport& r) {
    return {{"singular_values", as_vector(r.singular_values)},
            {"variance_fractions", as_vector(r.variance_fractions)},
            {"dim90", r.dim90},
            {"dim95", r.dim95},
            {"participation_ratio", r.participation_ratio},
            {"total_dim", r.total_dim}};
}

int cmd_diagnose(const RunConfig& c, std::ostream& out) {
    if (c.emb.empty()) throw UsageError("missing required option --emb", {"--emb"});
    std::vector<json> records;
    out << std::left << std::setw(32) << "embedding" << std::right << std::setw(10) << "total_dim" << std::setw(8)
        << "dim90" << std::setw(8) << "dim95" << std::setw(10) << "PR" << '\n';
    for (const auto& path : c.emb) {
        const auto report = pca_spectrum(load_embeddings(path));
        json r = to_json(report);
        r["embedding"] = path;
        records.push_back(r);
        out << std::left << std::setw(32) << fs::path(path).stem().string() << std::right << std::setw(10)
            << report.total_dim << std::setw(8) << report.dim90 << std::setw(8) << report.dim95 << std::setw(10)
            << fixed(report.participation_ratio, 2) << '\n';
    }
    if (!c.out.empty()) write_lines(c.out, records);
    return 0;
}

/// Embedding rows joined with their labels, in embedding order.
struct Aligned {
    Eigen::MatrixXd x;
    std::vector<std::string> ids;
    std::vector<Eigen::Index> label_rows;
};

Aligned align(const EmbeddingMatrix& emb, const LabelTable& labels) {
    const auto index = labels.row_index();
    Aligned a;
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < emb.ids.size(); ++i) {
        auto it = index.find(emb.ids[i]);
        if (it == index.end()) continue;
        a.ids.push_back(emb.ids[i]);
        a.label_rows.push_back(it->second);
        rows.push_back(static_cast<Eigen::Index>(i));
    }
    if (rows.size() < 4) throw InsufficientDataError("fewer than 4 embedded studies have labels");
    a.x.resize(static_cast<Eigen::Index>(rows.size()), emb.dim());
    for (std::size_t i = 0; i < rows.size(); ++i) a.x.row(static_cast<Eigen::Index>(i)) = emb.data.row(rows[i]);
    return a;
}

/// Seeded shuffle split; returns (train rows, eval rows), each sorted.
std::pair<std::vector<Eigen::Index>, std::vector<Eigen::Index>> split_rows(Eigen::Index n, double eval_fraction,
                                                                           std::uint64_t seed) {
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::mt19937_64 rng(derive_seed(seed, "split"));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
    const auto n_eval = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(eval_fraction * static_cast<double>(n))), 1, order.size() - 1);
    std::vector<Eigen::Index> eval(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_eval));
    std::vector<Eigen::Index> train(order.begin() + static_cast<std::ptrdiff_t>(n_eval), order.end());
    std::sort(eval.begin(), eval.end());
    std::sort(train.begin(), train.end());
    return {train, eval};
}

struct Split {
    Eigen::MatrixXd train_x, eval_x;
    std::vector<int> train_y, eval_y;
};

Split make_split(const Aligned& a, const LabelTable& labels, Eigen::Index col, const std::vector<Eigen::Index>& train,
                 const std::vector<Eigen::Index>& eval) {
    Split s;
    s.train_x = a.x(train, Eigen::all);
    s.eval_x = a.x(eval, Eigen::all);
    for (auto r : train) s.train_y.push_back(labels.matrix(a.label_rows[static_cast<std::size_t>(r)], col));
    for (auto r : eval) s.eval_y.push_back(labels.matrix(a.label_rows[static_cast<std::size_t>(r)], col));
    return s;
}

bool both_classes(const std::vector<int>& y) {
    const auto pos = std::count(y.begin(), y.end(), 1);
    return pos > 0 && pos < static_cast<std::ptrdiff_t>(y.size());
}

int cmd_probe(const RunConfig& c, std::ostream& out) {
    if (c.emb.size() != 1) throw UsageError("probe takes exactly one --emb", {"--emb"});
    require(c.labels, "--labels");
    const auto labels = load_labels(c.labels);
    const auto a = align(load_embeddings(c.emb.front()), labels);
    const auto [train, eval] = split_rows(a.x.rows(), c.eval_fraction, c.seed);
    const auto cfg = probe_config(c);
    std::vector<std::string> findings = c.finding.empty() ? labels.findings : c.finding;
    for (const auto& f : findings)
        if (labels.column_of(f) < 0) throw UsageError("unknown finding '" + f + "'", {"--finding"});

    std::vector<json> records(findings.size());
    parallel_for(findings.size(), c.threads, [&](std::size_t i) {
        const auto s = make_split(a, labels, labels.column_of(findings[i]), train, eval);
        if (!both_classes(s.train_y) || !both_classes(s.eval_y)) {
            records[i] = {{"finding", findings[i]}, {"skipped", "a split lacks one of the classes"}};
            return;
        }
        const auto r = train_linear_probe(s.train_x, s.train_y, s.eval_x, s.eval_y, cfg, findings[i]);
        records[i] = {{"finding", r.finding},     {"auc", r.auc},
                      {"weights", as_vector(r.weights)}, {"bias", r.bias},
                      {"converged", r.converged}, {"iterations", r.iterations}};
    });
    for (const auto& r : records) {
        out << std::left << std::setw(34) << r["finding"].get<std::string>();
        if (r.contains("auc"))
            out << fixed(r["auc"].get<double>()) << '\n';
        else
            out << "skipped" << '\n';
    }
    if (!c.out.empty()) write_lines(c.out, records);
    return 0;
}

int cmd_project_test(const RunConfig& c, std::ostream& out) {
    if (c.emb.size() != 1) throw UsageError("project-test takes exactly one --emb", {"--emb"});
    require(c.labels, "--labels");
    const std::string finding = c.finding.empty() ? c.probe_finding : c.finding.front();
    const auto labels = load_labels(c.labels);
    const Eigen::Index col = labels.column_of(finding);
    if (col < 0) throw UsageError("unknown finding '" + finding + "'", {"--finding"});
    const auto a = align(load_embeddings(c.emb.front()), labels);
    const auto [train, eval] = split_rows(a.x.rows(), c.eval_fraction, c.seed);
    const auto s = make_split(a, labels, col, train, eval);
    if (!both_classes(s.train_y) || !both_classes(s.eval_y))
        throw InsufficientDataError("finding '" + finding + "' lacks one of the classes in a split");
    const auto r = projection_test(s.train_x, s.train_y, s.eval_x, s.eval_y, c.top_k, probe_config(c));
    const json j{{"finding", finding}, {"k", r.k},         {"tail_dims", r.tail_dims},
                 {"top_k_auc", r.top_k_auc}, {"tail_auc", r.tail_auc}, {"delta", r.delta}};
    out << j.dump() << '\n';
    if (!c.out.empty()) write_lines(c.out, {j});
    return 0;
}

json to_json(const DatabaseStats& s) {
    json organs = json::object();
    for (const auto& [organ, os] : s.per_organ)
        organs[std::string(to_string(organ))] = {{"sentences", os.sentences},
                                                 {"unique_studies", os.unique_studies},
                                                 {"avg_sentences_per_study", os.avg_sentences_per_study},
                                                 {"avg_words_per_sentence", os.avg_words_per_sentence},
                                                 {"total_words", os.total_words}};
    return {{"per_organ", organs},
            {"indexed_sentences", s.indexed_sentences},
            {"excluded_other", s.excluded_other},
            {"total_sentences", s.total_sentences}};
}

int cmd_build_db(const RunConfig& c, std::ostream& out) {
    require(c.paragraphs, "--paragraphs");
    require(c.sent_emb, "--sent-emb");
    require(c.labels, "--labels");
    require(c.out, "--out");
    std::map<Organ, EmbeddingMatrix> images;
    if (!c.img_emb.empty()) images = load_image_embeddings(c.img_emb);
    const auto db = build_database(load_paragraphs(c.paragraphs), load_embeddings(c.sent_emb), images,
                                   load_labels(c.labels));
    db.save(c.out);
    const json stats = to_json(db_stats(db));
    std::ofstream(fs::path(c.out) / "stats.json", std::ios::trunc) << stats.dump(2) << '\n';
    out << stats.dump() << '\n';
    return 0;
}

int cmd_retrieve(const RunConfig& c, std::ostream& out) {
    require(c.db, "--db");
    require(c.query_id, "--query-id");
    const auto db = SentenceDB::load(c.db);
    const Organ organ = parse_organ(c.organ);
    auto rcfg = retrieval_config(c);
    rcfg.k_fine = c.k;
    if (rcfg.k_coarse < rcfg.k_fine) rcfg.k_coarse = rcfg.k_fine;
    validate(rcfg);

    std::string study = c.query_id;
    std::string text;
    std::optional<Eigen::VectorXd> text_emb;
    if (const auto* rec = db.find_record(c.query_id)) {
        study = rec->study_id;
        text = rec->text;
        text_emb = db.sentence_embedding(rec->sentence_id);
    } else {
        text_emb = study_text_query(db, study, organ);
    }
    if (!text_emb) throw DomainError("query '" + c.query_id + "' has no text embedding for organ " + c.organ);
    const std::optional<std::string> exclude = c.include_self ? std::nullopt : std::optional<std::string>(study);

    RetrievalResult r;
    if (rcfg.strategy == Strategy::Text2Text) {
        r = text2text_retrieve(db, organ, *text_emb, rcfg, exclude);
    } else {
        const auto img = db.image_embedding(organ, study);
        if (!img) throw DomainError("study '" + study + "' has no " + c.organ + " image embedding");
        r = two_stage_retrieve(db, organ, *img, text, *text_emb, rcfg, exclude);
    }
    const json j = to_json(r);
    out << j.dump() << '\n';
    if (!c.out.empty()) write_lines(c.out, {j});
    return 0;
}

int cmd_eval_retrieval(const RunConfig& c, std::ostream& out) {
    require(c.db, "--db");
    require(c.labels, "--labels");
    const auto db = SentenceDB::load(c.db);
    const auto labels = load_labels(c.labels);
    std::vector<Organ> organs;
    if (c.organ == "all")
        organs.assign(kIndexedOrgans.begin(), kIndexedOrgans.end());
    else
        organs.push_back(parse_organ(c.organ));
    std::vector<Modality> modalities;
    if (c.modality == "all")
        modalities = {Modality::Img2Img, Modality::Img2Txt, Modality::Txt2Txt, Modality::Upper};
    else
        modalities.push_back(parse_modality(c.modality));

    std::vector<json> records;
    out << std::left << std::setw(12) << "organ";
    for (auto m : modalities) out << std::right << std::setw(10) << to_string(m);
    out << '\n';
    for (Organ o : organs) {
        out << std::left << std::setw(12) << to_string(o);
        for (auto m : modalities) {
            const auto row = evaluate_retrieval(db, labels, o, m, c.k, !c.include_self, c.threads);
            records.push_back({{"organ", std::string(to_string(o))},
                               {"modality", std::string(to_string(m))},
                               {"k", row.k},
                               {"mean_jaccard", row.mean_jaccard},
                               {"queries", row.queries},
                               {"skipped", row.skipped}});
            out << std::right << std::setw(10) << (row.queries ? fixed(row.mean_jaccard) : std::string("n/a"));
        }
        out << '\n';
    }
    if (!c.out.empty()) write_lines(c.out, records);
    return 0;
}

int cmd_decode(const RunConfig& c, std::ostream& out) {
    require(c.script, "--script");
    require(c.trace_out, "--trace-out");
    const auto policy = parse_policy(c.policy);
    const auto script = load_script(c.script);
    const std::string study = !c.study.empty() ? c.study : script.study_id.value_or("");

    std::optional<SentenceDB> db;
    std::optional<DatabaseLookupEncoder> encoder;
    std::optional<DatabaseRetriever> retriever;
    if (!c.db.empty()) {
        db.emplace(SentenceDB::load(c.db));
        encoder.emplace(*db);
        std::map<Organ, Eigen::VectorXd> queries;
        for (Organ o : kIndexedOrgans)
            if (auto q = db->image_embedding(o, study)) queries.emplace(o, std::move(*q));
        std::optional<std::string> exclude;
        if (!c.include_self && !study.empty()) exclude = study;
        retriever.emplace(*db, *encoder, retrieval_config(c), std::move(queries), exclude);
    } else if (!std::holds_alternative<NoRag>(policy)) {
        throw UsageError("--db is required unless --policy norag", {"--db"});
    }

    ScriptedGenerator gen(script.lines, script.overrides);
    const std::vector<Organ> plan(kIndexedOrgans.begin(), kIndexedOrgans.end());
    auto result = decode_report(gen, policy, retriever ? &*retriever : nullptr, plan, c.max_sentences);
    save_trace(result.trace, c.trace_out);
    const auto violation = check_trace(result.trace, policy);
    out << json{{"study_id", study},
                {"policy", to_string(policy)},
                {"report", result.report},
                {"trigger_count", result.trace.trigger_count},
                {"aborted", result.trace.aborted},
                {"error", result.trace.error},
                {"trace_valid", !violation.has_value()}}
               .dump()
        << '\n';
    if (violation) throw std::runtime_error("trace check failed: " + *violation);
    return result.trace.aborted ? 1 : 0;
}

int cmd_prep_train(const RunConfig& c, std::ostream& out) {
    require(c.reports, "--reports");
    require(c.perplexities, "--perplexities");
    require(c.out, "--out");
    const auto tcfg = trainprep_config(c);
    const auto reports = load_reports(c.reports);
    const auto ppl = load_perplexities(c.perplexities);
    std::optional<SentenceDB> db;
    if (!c.db.empty()) db.emplace(SentenceDB::load(c.db));
    const auto samples =
        prepare_training_samples(reports, ppl, db ? &*db : nullptr, retrieval_config(c), tcfg, c.threads);
    const std::size_t written = serialize_samples(samples, c.out);
    std::size_t injections = 0, oracle = 0, fallback = 0;
    for (const auto& s : samples) {
        injections += s.rag_positions.size();
        oracle += static_cast<std::size_t>(std::count(s.oracle_flags.begin(), s.oracle_flags.end(), true));
        fallback += static_cast<std::size_t>(std::count(s.fallback_flags.begin(), s.fallback_flags.end(), true));
    }
    out << json{{"samples", written},
                {"injections", injections},
                {"oracle_injections", oracle},
                {"fallbacks", fallback},
                {"oracle_fraction", injections ? static_cast<double>(oracle) / static_cast<double>(injections) : 0.0}}
               .dump()
        << '\n';
    return 0;
}

void error_record(std::ostream& err, std::string_view kind, const std::string& message,
                  const std::vector<std::string>& keys = {}) {
    json j{{"status", "error"}, {"kind", kind}, {"message", message}};
    if (!keys.empty()) j["keys"] = keys;
    err << j.dump() << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    RunConfig c;
    CLI::App app{"Embedding diagnostics, organ-indexed sentence retrieval and adaptive retrieval decoding"};
    app.require_subcommand(1);
    app.add_option("--config", c.config, "JSON file of settings; flags override it");
    app.add_option("--seed", c.seed, "Seed for every random choice");
    app.add_option("--threads", c.threads, "Worker threads (0 = hardware concurrency)");

    auto retrieval_opts = [&](CLI::App* s) {
        s->add_option("--k-coarse", c.k_coarse, "Studies kept by the image stage");
        s->add_option("--k-fine", c.k_fine, "Sentences selected by MMR");
        s->add_option("--lambda", c.lambda, "MMR relevance weight");
        s->add_option("--strategy", c.strategy, "twostage | text2text");
        s->add_option("--text-pool-depth", c.text_pool_depth, "Text2Text candidate pool depth");
        s->add_flag("--include-self", c.include_self, "Allow the query's own study as a neighbour");
    };
    auto probe_opts = [&](CLI::App* s) {
        s->add_option("--emb", c.emb, "Embedding file (AEMB)");
        s->add_option("--labels", c.labels, "Label CSV");
        s->add_option("--finding", c.finding, "Finding name (repeatable)");
        s->add_option("--eval-fraction", c.eval_fraction, "Share of studies held out for evaluation");
        s->add_option("--l2", c.l2, "L2 strength (1/C)");
        s->add_option("--max-iter", c.max_iter, "Optimizer iteration cap");
        s->add_option("--tol", c.tol, "Gradient convergence tolerance");
        s->add_flag("--unbalanced", c.unbalanced, "Disable class-balanced weighting");
        s->add_option("--out", c.out, "JSONL output");
    };

    auto* gen = app.add_subcommand("gen-synthetic", "Write a seeded synthetic corpus");
    gen->add_option("--studies", c.studies, "Number of studies");
    gen->add_option("--out", c.out, "Output directory");
    gen->add_option("--dim-image", c.dim_image, "Image embedding dimension");
    gen->add_option("--dim-text", c.dim_text, "Text embedding dimension");
    gen->add_option("--global-dim", c.global_dim, "Global embedding dimension");
    gen->add_option("--spread", c.spread, "Cluster noise scale");
    gen->add_option("--prevalence", c.prevalence, "Per-finding prevalence");
    gen->add_option("--planted-signal", c.planted_signal, "none | tail_dim | isotropic");
    gen->add_option("--probe-finding", c.probe_finding, "Label planted in the global embedding");
    gen->add_option("--findings-per-study", c.findings_per_study, "Exact findings per study (0 = by prevalence)");

    auto* diag = app.add_subcommand("diagnose", "PCA spectrum table for embedding files");
    diag->add_option("--emb", c.emb, "Embedding file (repeatable)");
    diag->add_option("--out", c.out, "JSONL output");

    auto* probe = app.add_subcommand("probe", "Linear probes per finding");
    probe_opts(probe);
    auto* proj = app.add_subcommand("project-test", "Top-k versus tail projection probes");
    probe_opts(proj);
    proj->add_option("--k", c.top_k, "Number of leading axes");

    auto* build = app.add_subcommand("build-db", "Build the organ-indexed sentence database");
    build->add_option("--paragraphs", c.paragraphs, "Paragraph JSONL file or directory");
    build->add_option("--sent-emb", c.sent_emb, "Sentence embeddings (AEMB)");
    build->add_option("--img-emb", c.img_emb, "Directory of <organ>.aemb image embeddings");
    build->add_option("--labels", c.labels, "Label CSV");
    build->add_option("--out", c.out, "Database directory");

    auto* retrieve = app.add_subcommand("retrieve", "Retrieve sentences for a study or sentence id");
    retrieve->add_option("--db", c.db, "Database directory");
    retrieve->add_option("--organ", c.organ, "Organ");
    retrieve->add_option("--query-id", c.query_id, "Study id or sentence id");
    retrieve->add_option("--k", c.k, "Sentences to select");
    retrieve->add_option("--out", c.out, "JSONL output");
    retrieval_opts(retrieve);

    auto* evalr = app.add_subcommand("eval-retrieval", "Jaccard@k retrieval evaluation");
    evalr->add_option("--db", c.db, "Database directory");
    evalr->add_option("--labels", c.labels, "Label CSV");
    evalr->add_option("--modality", c.modality, "img2img | img2txt | txt2txt | upper | all");
    evalr->add_option("--organ", c.organ, "Organ or all");
    evalr->add_option("--k", c.k, "Neighbours per query");
    evalr->add_option("--out", c.out, "JSONL output");
    evalr->add_flag("--include-self", c.include_self, "Allow the query's own study as a neighbour");

    auto* decode = app.add_subcommand("decode", "Decode a scripted report under a retrieval policy");
    decode->add_option("--db", c.db, "Database directory");
    decode->add_option("--policy", c.policy, "norag | fixed:N | adaptive:K");
    decode->add_option("--script", c.script, "Generator script (JSONL)");
    decode->add_option("--trace-out", c.trace_out, "Trace output (JSONL)");
    decode->add_option("--study", c.study, "Study whose images drive retrieval (default: the script's)");
    decode->add_option("--max-sentences", c.max_sentences, "Hard cap on report length");
    retrieval_opts(decode);

    auto* prep = app.add_subcommand("prep-train", "Assemble oracle-mixed training samples");
    prep->add_option("--db", c.db, "Database directory for retrieved context");
    prep->add_option("--reports", c.reports, "Reports JSONL");
    prep->add_option("--perplexities", c.perplexities, "Per-sentence perplexities JSONL");
    prep->add_option("--percentile", c.percentile, "Target threshold percentile");
    prep->add_option("--percentile-scope", c.percentile_scope, "report | corpus");
    prep->add_option("--p-oracle", c.p_oracle, "Probability of oracle context");
    prep->add_option("--k-rag", c.k_rag, "Maximum targets per sample");
    prep->add_option("--oracle-count-min", c.oracle_count_min, "Fewest oracle sentences per block");
    prep->add_option("--oracle-count-max", c.oracle_count_max, "Most oracle sentences per block");
    prep->add_option("--out", c.out, "Samples JSONL");
    retrieval_opts(prep);

    for (auto* s : app.get_subcommands({})) s->fallthrough();

    try {
        if (auto path = find_config_arg(args)) apply_config_file(*path, c);
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        const auto parsed = app.get_subcommands();
        err << (parsed.empty() ? app.help() : parsed.front()->help());
        error_record(err, "usage", e.what());
        return 2;
    } catch (const UsageError& e) {
        error_record(err, "config", e.what(), e.keys);
        return 2;
    }

    try {
        validate_run_config(c);
        if (gen->parsed()) return cmd_gen_synthetic(c, out);
        if (diag->parsed()) return cmd_diagnose(c, out);
        if (probe->parsed()) return cmd_probe(c, out);
        if (proj->parsed()) return cmd_project_test(c, out);
        if (build->parsed()) return cmd_build_db(c, out);
        if (retrieve->parsed()) return cmd_retrieve(c, out);
        if (evalr->parsed()) return cmd_eval_retrieval(c, out);
        if (decode->parsed()) return cmd_decode(c, out);
        if (prep->parsed()) return cmd_prep_train(c, out);
    } catch (const UsageError& e) {
        error_record(err, "config", e.what(), e.keys);
        return 2;
    } catch (const BuildError& e) {
        error_record(err, "build", e.what(), e.offenders());
        return 1;
    } catch (const LoadError& e) {
        error_record(err, "load", e.what());
        return 1;
    } catch (const std::exception& e) {
        error_record(err, "runtime", e.what());
        return 1;
    }
    return 2;
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, std::cout, std::cerr);
}

}  // namespace organrag::cli
