#include "organrag/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "organrag/rng.hpp"

namespace organrag {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(PlantedSignal m) {
    switch (m) {
        case PlantedSignal::None: return "none";
        case PlantedSignal::TailDim: return "tail_dim";
        case PlantedSignal::Isotropic: return "isotropic";
    }
    return "none";
}

PlantedSignal parse_planted_signal(std::string_view name) {
    for (auto m : {PlantedSignal::None, PlantedSignal::TailDim, PlantedSignal::Isotropic})
        if (to_string(m) == name) return m;
    throw DomainError("unknown planted signal mode '" + std::string(name) + "' (expected none | tail_dim | isotropic)");
}

void validate(const SynthConfig& cfg) {
    if (cfg.n_studies < 2) throw DomainError("synthgen: n_studies must be >= 2");
    if (cfg.embed_dim_image < 2 || cfg.embed_dim_text < 2 || cfg.global_dim < 2)
        throw DomainError("synthgen: embedding dimensions must be >= 2");
    if (!(cfg.cluster_spread >= 0.0) || !std::isfinite(cfg.cluster_spread))
        throw DomainError("synthgen: cluster_spread must be finite and >= 0");
    if (!(cfg.prevalence >= 0.0 && cfg.prevalence <= 1.0)) throw DomainError("synthgen: prevalence must be in [0,1]");
    if (cfg.organs.empty()) throw DomainError("synthgen: at least one organ required");
    for (Organ o : cfg.organs)
        if (o == Organ::Other) throw DomainError("synthgen: 'other' is always generated and cannot be listed");
    const auto& all = all_findings();
    if (std::find(all.begin(), all.end(), cfg.probe_finding) == all.end())
        throw DomainError("synthgen: unknown probe finding '" + cfg.probe_finding + "'");
}

Eigen::VectorXd global_axis_stddev(Eigen::Index dim) {
    Eigen::VectorXd s(dim);
    for (Eigen::Index j = 0; j < dim; ++j)
        s(j) = 10.0 * std::pow(0.05, static_cast<double>(j) / static_cast<double>(dim - 1));
    return s;
}

namespace {

std::string study_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "synth_%05zu", i);
    return buf;
}

std::string lowercase(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

const std::vector<std::string>& locations(Organ o) {
    static const std::vector<std::string> lung{"in the right upper lobe", "in the left lower lobe",
                                               "in the right middle lobe", "in both lower lobes"};
    static const std::vector<std::string> heart{"at the cardiac silhouette", "along the pericardium"};
    static const std::vector<std::string> esophagus{"at the gastroesophageal junction", "in the distal esophagus"};
    static const std::vector<std::string> aorta{"along the aortic arch", "in the descending aorta"};
    static const std::vector<std::string> other{"in the mediastinum", "in the chest wall"};
    switch (o) {
        case Organ::Lung: return lung;
        case Organ::Heart: return heart;
        case Organ::Esophagus: return esophagus;
        case Organ::Aorta: return aorta;
        case Organ::Other: return other;
    }
    return other;
}

std::string normal_sentence(Organ o) {
    switch (o) {
        case Organ::Lung: return "The lungs are clear without focal abnormality.";
        case Organ::Heart: return "Heart size is within normal limits.";
        case Organ::Esophagus: return "The esophagus is unremarkable.";
        case Organ::Aorta: return "The thoracic aorta is normal in caliber.";
        case Organ::Other: return "No mediastinal mass is seen.";
    }
    return {};
}

std::string finding_sentence(const std::string& finding, std::size_t finding_no, Organ o, std::mt19937_64& rng) {
    static const std::vector<std::string> severity{"Mild", "Moderate", "Marked"};
    static const std::vector<std::string> verbs{"is seen", "is noted", "is present", "is observed", "is identified"};
    const auto& loc = locations(o);
    return severity[uniform_index(rng, severity.size())] + " " + lowercase(finding) + " " +
           verbs[finding_no % verbs.size()] + " " + loc[uniform_index(rng, loc.size())] + ".";
}

Eigen::VectorXd gaussian(std::mt19937_64& rng, Eigen::Index d) {
    std::normal_distribution<double> nd;
    Eigen::VectorXd v(d);
    for (Eigen::Index j = 0; j < d; ++j) v(j) = nd(rng);
    return v;
}

Eigen::VectorXd unit_direction(std::uint64_t seed, std::string_view name, Eigen::Index d) {
    std::mt19937_64 rng(derive_seed(seed, name));
    Eigen::VectorXd v = gaussian(rng, d);
    return v / v.norm();
}

// Values are rounded through float32 so the in-memory corpus equals what
// the AEMB files hold.
template <typename M>
EmbeddingMatrix to_matrix(std::vector<std::string> ids, const std::vector<M>& rows, Eigen::Index d) {
    EmbeddingMatrix m;
    m.ids = std::move(ids);
    m.data.resize(static_cast<Eigen::Index>(rows.size()), d);
    for (std::size_t i = 0; i < rows.size(); ++i)
        m.data.row(static_cast<Eigen::Index>(i)) = rows[i].head(d).transpose().template cast<float>().template cast<double>();
    return m;
}

std::size_t words(const std::string& s) {
    std::istringstream in(s);
    std::size_t n = 0;
    for (std::string w; in >> w;) ++n;
    return n;
}

}  // namespace

SyntheticCorpus gen_synthetic_corpus(const SynthConfig& cfg) {
    validate(cfg);
    const Eigen::Index shared_dim = std::max(cfg.embed_dim_image, cfg.embed_dim_text);

    std::vector<Organ> organs = cfg.organs;
    organs.push_back(Organ::Other);
    std::vector<std::pair<Organ, std::string>> pool;  // findings in play, with their organ
    for (Organ o : organs)
        for (const auto& f : organ_findings(o)) pool.emplace_back(o, f);
    if (cfg.findings_per_study && *cfg.findings_per_study > pool.size())
        throw DomainError("synthgen: findings_per_study exceeds the number of findings");

    std::map<Organ, Eigen::VectorXd> organ_base;
    for (Organ o : organs) organ_base[o] = unit_direction(cfg.seed, "organ/" + std::string(to_string(o)), shared_dim);
    std::map<std::string, Eigen::VectorXd> centroid;
    for (const auto& [o, f] : pool) centroid[f] = unit_direction(cfg.seed, "finding/" + f, shared_dim);
    const double noise_scale = cfg.cluster_spread / std::sqrt(static_cast<double>(shared_dim));

    SyntheticCorpus c;
    c.labels.findings = all_findings();
    c.labels.matrix.setZero(static_cast<Eigen::Index>(cfg.n_studies), static_cast<Eigen::Index>(c.labels.findings.size()));

    std::vector<std::string> sent_ids;
    std::vector<Eigen::VectorXd> sent_rows;
    std::map<Organ, std::vector<Eigen::VectorXd>> image_rows;
    std::map<Organ, std::vector<std::string>> image_ids;
    std::vector<std::string> study_ids;
    json assignments = json::object();
    std::map<Organ, std::size_t> sentence_count, word_count;

    for (std::size_t s = 0; s < cfg.n_studies; ++s) {
        const std::string id = study_name(s);
        study_ids.push_back(id);
        c.labels.ids.push_back(id);
        std::mt19937_64 rng(derive_seed(cfg.seed, "study/" + id));

        std::set<std::string> present;
        if (cfg.findings_per_study) {
            std::vector<std::size_t> order(pool.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            for (std::size_t j = 0; j < *cfg.findings_per_study; ++j) {
                std::swap(order[j], order[j + uniform_index(rng, order.size() - j)]);
                present.insert(pool[order[j]].second);
            }
        } else {
            for (const auto& pf : pool)
                if (unit_uniform(rng) < cfg.prevalence) present.insert(pf.second);
        }
        for (const auto& f : present)
            c.labels.matrix(static_cast<Eigen::Index>(s), c.labels.column_of(f)) = 1;

        ReportRecord report{id, {}, {}};
        std::vector<double> ppl;
        json per_organ = json::object();
        for (Organ o : organs) {
            std::vector<std::string> texts;
            std::vector<bool> abnormal;
            Eigen::VectorXd img = organ_base[o];
            json organ_findings_json = json::array();
            const auto& findings = organ_findings(o);
            for (std::size_t fi = 0; fi < findings.size(); ++fi) {
                if (!present.count(findings[fi])) continue;
                organ_findings_json.push_back(findings[fi]);
                texts.push_back(finding_sentence(findings[fi], fi, o, rng));
                abnormal.push_back(true);
                img += centroid[findings[fi]];
                Eigen::VectorXd e = 0.5 * organ_base[o] + centroid[findings[fi]] + noise_scale * gaussian(rng, shared_dim);
                if (o != Organ::Other) {
                    sent_ids.push_back(make_sentence_id(id, o, texts.size() - 1));
                    sent_rows.push_back(std::move(e));
                }
            }
            if (texts.empty()) {
                texts.push_back(normal_sentence(o));
                abnormal.push_back(false);
                Eigen::VectorXd e = organ_base[o] + noise_scale * gaussian(rng, shared_dim);
                if (o != Organ::Other) {
                    sent_ids.push_back(make_sentence_id(id, o, 0));
                    sent_rows.push_back(std::move(e));
                }
            }
            per_organ[std::string(to_string(o))] = organ_findings_json;
            if (o != Organ::Other) {
                img += noise_scale * gaussian(rng, shared_dim);
                image_rows[o].push_back(std::move(img));
                image_ids[o].push_back(id);
            }

            std::string paragraph;
            for (std::size_t i = 0; i < texts.size(); ++i) {
                if (i) paragraph += ' ';
                paragraph += texts[i];
                sentence_count[o] += 1;
                word_count[o] += words(texts[i]);
                report.sentences.push_back(texts[i]);
                report.organs.push_back(o);
                std::normal_distribution<double> nd(1.0, 0.25);
                ppl.push_back(std::exp(nd(rng)) + (abnormal[i] ? 2.0 + unit_uniform(rng) : 0.0));
            }
            c.paragraphs.push_back({id, o, std::move(paragraph)});

            if (s == 0 && o != Organ::Other) {
                for (std::size_t i = 0; i < texts.size(); ++i)
                    c.script.lines.push_back({texts[i], static_cast<bool>(abnormal[i]), ppl[ppl.size() - texts.size() + i]});
                c.script.lines.push_back({"", false, 1.0});  // section break
            }
        }
        assignments[id] = per_organ;
        c.perplexities[id] = std::move(ppl);
        c.reports.push_back(std::move(report));
    }
    c.script.study_id = study_ids.front();

    c.sentence_embeddings = to_matrix(sent_ids, sent_rows, cfg.embed_dim_text);
    for (Organ o : cfg.organs) c.image_embeddings[o] = to_matrix(image_ids[o], image_rows[o], cfg.embed_dim_image);

    // Global embeddings with the probe label planted according to the mode.
    {
        const Eigen::VectorXd sd = global_axis_stddev(cfg.global_dim);
        const Eigen::Index d = cfg.global_dim;
        const Eigen::Index col = c.labels.column_of(cfg.probe_finding);
        std::vector<Eigen::VectorXd> rows;
        for (std::size_t s = 0; s < cfg.n_studies; ++s) {
            std::mt19937_64 rng(derive_seed(cfg.seed, "global/" + study_ids[s]));
            Eigen::VectorXd v = gaussian(rng, d).cwiseProduct(sd);
            if (c.labels.matrix(static_cast<Eigen::Index>(s), col)) {
                if (cfg.planted_signal_mode == PlantedSignal::TailDim) v(d - 1) += 4.0 * sd(d - 1);
                // equal whitened shift on every axis; kept small so the class
                // mean does not become a principal axis of its own
                if (cfg.planted_signal_mode == PlantedSignal::Isotropic) v += 0.1 * sd;
            }
            rows.push_back(std::move(v));
        }
        c.global_embeddings = to_matrix(study_ids, rows, d);
    }

    json m;
    m["seed"] = cfg.seed;
    m["n_studies"] = cfg.n_studies;
    m["embed_dim_image"] = cfg.embed_dim_image;
    m["embed_dim_text"] = cfg.embed_dim_text;
    m["global_dim"] = cfg.global_dim;
    m["cluster_spread"] = cfg.cluster_spread;
    m["prevalence"] = cfg.prevalence;
    m["planted_signal_mode"] = std::string(to_string(cfg.planted_signal_mode));
    m["probe_finding"] = cfg.probe_finding;
    m["assignments"] = assignments;
    json positives = json::object();
    for (Eigen::Index j = 0; j < c.labels.matrix.cols(); ++j)
        positives[c.labels.findings[static_cast<std::size_t>(j)]] = c.labels.matrix.col(j).cast<int>().sum();
    m["label_positives"] = positives;
    json organ_counts = json::object();
    std::size_t indexed = 0, other = 0;
    for (Organ o : organs) {
        const bool is_indexed = o != Organ::Other;
        organ_counts[std::string(to_string(o))] = {
            {"sentences", sentence_count[o]},
            {"unique_studies", cfg.n_studies},
            {"total_words", word_count[o]},
            {"text_index_size", is_indexed ? sentence_count[o] : 0},
            {"image_index_size", is_indexed ? cfg.n_studies : 0}};
        (is_indexed ? indexed : other) += sentence_count[o];
    }
    m["organs"] = organ_counts;
    m["indexed_sentences"] = indexed;
    m["excluded_other"] = other;
    m["total_sentences"] = indexed + other;
    m["sentence_embeddings"] = sent_ids.size();
    m["script_study"] = *c.script.study_id;
    c.manifest = std::move(m);
    return c;
}

void write_synthetic_corpus(const SyntheticCorpus& c, const fs::path& dir) {
    fs::create_directories(dir / "paragraphs");
    fs::create_directories(dir / "image_emb");
    save_paragraphs(c.paragraphs, dir / "paragraphs" / "paragraphs.jsonl");
    save_embeddings(c.sentence_embeddings, dir / "sentence_emb.aemb");
    for (const auto& [organ, m] : c.image_embeddings)
        save_embeddings(m, dir / "image_emb" / (std::string(to_string(organ)) + ".aemb"));
    save_embeddings(c.global_embeddings, dir / "global.aemb");
    save_labels(c.labels, dir / "labels.csv");
    save_reports(c.reports, dir / "reports.jsonl");
    save_perplexities(c.perplexities, dir / "perplexities.jsonl");
    save_script(c.script, dir / "script.jsonl");
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw LoadError(LoadErrorKind::Io, "cannot write " + (dir / "manifest.json").string());
    out << c.manifest.dump(2) << '\n';
}

}  // namespace organrag
