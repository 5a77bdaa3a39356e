#include "organrag/sentencedb.hpp"

#include <cctype>
#include <fstream>
#include <set>
#include <unordered_set>

#include <json.hpp>

namespace organrag {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Organ organ) {
    switch (organ) {
        case Organ::Lung: return "lung";
        case Organ::Heart: return "heart";
        case Organ::Esophagus: return "esophagus";
        case Organ::Aorta: return "aorta";
        case Organ::Other: return "other";
    }
    return "other";
}

Organ parse_organ(std::string_view name) {
    for (Organ o : kAllOrgans)
        if (to_string(o) == name) return o;
    throw DomainError("unknown organ '" + std::string(name) + "'");
}

const std::vector<std::string>& organ_findings(Organ organ) {
    static const std::vector<std::string> lung{"Lung nodule",
                                               "Mosaic attenuation pattern",
                                               "Peribronchial thickening",
                                               "Consolidation",
                                               "Bronchiectasis",
                                               "Interlobular septal thickening",
                                               "Emphysema",
                                               "Atelectasis",
                                               "Lung opacity",
                                               "Pulmonary fibrotic sequela",
                                               "Pleural effusion"};
    static const std::vector<std::string> heart{"Cardiomegaly", "Pericardial effusion"};
    static const std::vector<std::string> aorta{"Arterial wall calcification", "Coronary artery wall calcification"};
    static const std::vector<std::string> esophagus{"Hiatal hernia"};
    static const std::vector<std::string> other{"Lymphadenopathy", "Medical material"};
    switch (organ) {
        case Organ::Lung: return lung;
        case Organ::Heart: return heart;
        case Organ::Esophagus: return esophagus;
        case Organ::Aorta: return aorta;
        case Organ::Other: return other;
    }
    return other;
}

const std::vector<std::string>& all_findings() {
    static const std::vector<std::string> all = [] {
        std::vector<std::string> v;
        for (Organ o : kAllOrgans)
            for (const auto& f : organ_findings(o)) v.push_back(f);
        return v;
    }();
    return all;
}

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string trim(std::string_view s) {
    std::size_t b = 0, e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

bool punctuation_only(std::string_view s) {
    return std::all_of(s.begin(), s.end(),
                       [](char c) { return std::ispunct(static_cast<unsigned char>(c)) || is_space(c); });
}

bool bare_organ_header(std::string_view s) {
    static const std::set<std::string> headers{"lung",      "lungs",      "heart",  "esophagus", "oesophagus",
                                               "aorta",     "other",      "mediastinum"};
    // exactly one alphabetic word, anything else punctuation or space
    std::string word;
    bool ended = false;
    for (char c : s) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            if (ended) return false;
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        } else if (std::ispunct(static_cast<unsigned char>(c)) || is_space(c)) {
            ended = ended || !word.empty();
        } else {
            return false;
        }
    }
    return headers.count(word) > 0;
}

}  // namespace

std::vector<std::string> split_sentences(std::string_view paragraph) {
    std::vector<std::string> out;
    auto emit = [&](std::string_view frag) {
        std::string t = trim(frag);
        if (t.empty() || punctuation_only(t) || bare_organ_header(t)) return;
        out.push_back(std::move(t));
    };
    std::size_t start = 0;
    for (std::size_t i = 0; i + 1 < paragraph.size(); ++i) {
        if ((paragraph[i] == '.' || paragraph[i] == ';') && is_space(paragraph[i + 1])) {
            emit(paragraph.substr(start, i + 1 - start));
            start = i + 1;
        }
    }
    if (start < paragraph.size()) emit(paragraph.substr(start));
    return out;
}

std::string make_sentence_id(std::string_view study_id, Organ organ, std::size_t index) {
    return std::string(study_id) + "/" + std::string(to_string(organ)) + "/" + std::to_string(index);
}

std::size_t count_words(std::string_view text) {
    std::size_t n = 0;
    bool in_word = false;
    for (char c : text) {
        if (is_space(c))
            in_word = false;
        else if (!in_word) {
            in_word = true;
            ++n;
        }
    }
    return n;
}

// ---------------------------------------------------------------------------
// FlatIndex

FlatIndex::FlatIndex(std::vector<std::string> ids, Eigen::MatrixXd vectors)
    : ids_(std::move(ids)), vectors_(normalize_rows(vectors)) {
    if (static_cast<Eigen::Index>(ids_.size()) != vectors_.rows())
        throw DomainError("FlatIndex: id count differs from row count");
    for (std::size_t i = 0; i < ids_.size(); ++i) positions_.emplace(ids_[i], static_cast<Eigen::Index>(i));
}

Eigen::Index FlatIndex::position(const std::string& id) const {
    auto it = positions_.find(id);
    return it == positions_.end() ? -1 : it->second;
}

Eigen::VectorXd FlatIndex::scores(const Eigen::VectorXd& query) const {
    if (query.size() != vectors_.cols()) throw DomainError("FlatIndex: query dimension mismatch");
    const double qn = query.norm();
    if (qn == 0.0) throw DomainError("FlatIndex: zero-norm query");
    return vectors_ * (query / qn);
}

// ---------------------------------------------------------------------------
// SentenceDB

const SentenceRecord* SentenceDB::find_record(const std::string& sentence_id) const {
    auto it = record_pos_.find(sentence_id);
    return it == record_pos_.end() ? nullptr : &records_[it->second];
}

const SentenceRecord& SentenceDB::record(const std::string& sentence_id) const {
    const SentenceRecord* r = find_record(sentence_id);
    if (!r) throw DomainError("unknown sentence id '" + sentence_id + "'");
    return *r;
}

const FlatIndex& SentenceDB::text_index(Organ organ) const {
    static const FlatIndex empty;
    if (organ == Organ::Other) throw DomainError("the 'other' organ has no retrieval index");
    auto it = text_index_.find(organ);
    return it == text_index_.end() ? empty : it->second;
}

const FlatIndex& SentenceDB::image_index(Organ organ) const {
    static const FlatIndex empty;
    if (organ == Organ::Other) throw DomainError("the 'other' organ has no retrieval index");
    auto it = image_index_.find(organ);
    return it == image_index_.end() ? empty : it->second;
}

const std::vector<std::string>& SentenceDB::text_row_studies(Organ organ) const {
    static const std::vector<std::string> empty;
    auto it = text_row_study_.find(organ);
    return it == text_row_study_.end() ? empty : it->second;
}

const std::vector<std::string>& SentenceDB::study_sentences(const std::string& study_id, Organ organ) const {
    static const std::vector<std::string> empty;
    auto it = study_to_sentences_.find({study_id, organ});
    return it == study_to_sentences_.end() ? empty : it->second;
}

std::vector<std::string> SentenceDB::studies() const {
    std::set<std::string> s;
    for (const auto& r : records_) s.insert(r.study_id);
    return {s.begin(), s.end()};
}

std::vector<Neighbor> SentenceDB::knn(Organ organ, Space space, const Eigen::VectorXd& query, std::size_t k,
                                      const std::optional<std::string>& exclude_study) const {
    if (space == Space::Image) {
        const FlatIndex& idx = image_index(organ);
        if (!exclude_study) return idx.search(query, k);
        return idx.search(query, k, [&](Eigen::Index i) { return idx.ids()[static_cast<std::size_t>(i)] == *exclude_study; });
    }
    const FlatIndex& idx = text_index(organ);
    if (!exclude_study) return idx.search(query, k);
    const auto& owners = text_row_studies(organ);
    return idx.search(query, k, [&](Eigen::Index i) { return owners[static_cast<std::size_t>(i)] == *exclude_study; });
}

const std::string& SentenceDB::study_of(Space space, const std::string& id) const {
    if (space == Space::Image) return id;
    return record(id).study_id;
}

std::optional<Eigen::VectorXd> SentenceDB::sentence_embedding(const std::string& sentence_id) const {
    const SentenceRecord* r = find_record(sentence_id);
    if (!r || !r->has_embedding || r->organ == Organ::Other) return std::nullopt;
    const FlatIndex& idx = text_index(r->organ);
    const Eigen::Index pos = idx.position(sentence_id);
    if (pos < 0) return std::nullopt;
    return Eigen::VectorXd(idx.vectors().row(pos).transpose());
}

std::optional<Eigen::VectorXd> SentenceDB::image_embedding(Organ organ, const std::string& study_id) const {
    const FlatIndex& idx = image_index(organ);
    const Eigen::Index pos = idx.position(study_id);
    if (pos < 0) return std::nullopt;
    return Eigen::VectorXd(idx.vectors().row(pos).transpose());
}

SentenceDB assemble_database(std::vector<SentenceRecord> records, const EmbeddingMatrix& sentence_embeddings,
                             const std::map<Organ, EmbeddingMatrix>& image_embeddings) {
    SentenceDB db;
    db.records_ = std::move(records);
    std::set<std::string> known_studies;
    for (std::size_t i = 0; i < db.records_.size(); ++i) {
        const auto& r = db.records_[i];
        if (!db.record_pos_.emplace(r.sentence_id, i).second)
            throw BuildError("duplicate sentence id", {r.sentence_id});
        db.study_to_sentences_[{r.study_id, r.organ}].push_back(r.sentence_id);
        known_studies.insert(r.study_id);
    }

    std::vector<std::string> dangling;
    std::unordered_map<std::string, Eigen::Index> emb_row;
    for (std::size_t i = 0; i < sentence_embeddings.ids.size(); ++i) {
        const auto& id = sentence_embeddings.ids[i];
        if (!db.record_pos_.count(id))
            dangling.push_back(id);
        else
            emb_row.emplace(id, static_cast<Eigen::Index>(i));
    }
    for (const auto& [organ, m] : image_embeddings) {
        if (organ == Organ::Other) continue;
        for (const auto& id : m.ids)
            if (!known_studies.count(id)) dangling.push_back(std::string(to_string(organ)) + ":" + id);
    }
    if (!dangling.empty()) {
        std::string msg = "embedding ids resolve to no sentence or study:";
        for (std::size_t i = 0; i < dangling.size() && i < 10; ++i) msg += " " + dangling[i];
        if (dangling.size() > 10) msg += " ... (" + std::to_string(dangling.size()) + " total)";
        throw BuildError(msg, dangling);
    }

    // Raw sentence vectors kept in record order for persistence.
    db.sentence_raw_.data.resize(0, sentence_embeddings.dim());
    std::vector<Eigen::Index> raw_rows;
    for (auto& r : db.records_) {
        auto it = emb_row.find(r.sentence_id);
        r.has_embedding = it != emb_row.end();
        if (r.has_embedding) {
            raw_rows.push_back(it->second);
            db.sentence_raw_.ids.push_back(r.sentence_id);
        }
    }
    db.sentence_raw_.data.resize(static_cast<Eigen::Index>(raw_rows.size()), sentence_embeddings.dim());
    for (std::size_t i = 0; i < raw_rows.size(); ++i)
        db.sentence_raw_.data.row(static_cast<Eigen::Index>(i)) = sentence_embeddings.data.row(raw_rows[i]);

    for (Organ organ : kIndexedOrgans) {
        std::vector<std::string> ids, owners;
        std::vector<Eigen::Index> rows;
        for (const auto& r : db.records_) {
            if (r.organ != organ || !r.has_embedding) continue;
            ids.push_back(r.sentence_id);
            owners.push_back(r.study_id);
            rows.push_back(emb_row.at(r.sentence_id));
        }
        Eigen::MatrixXd v(static_cast<Eigen::Index>(rows.size()), sentence_embeddings.dim());
        for (std::size_t i = 0; i < rows.size(); ++i)
            v.row(static_cast<Eigen::Index>(i)) = sentence_embeddings.data.row(rows[i]);
        db.text_index_.emplace(organ, FlatIndex(std::move(ids), std::move(v)));
        db.text_row_study_.emplace(organ, std::move(owners));

        auto img = image_embeddings.find(organ);
        if (img != image_embeddings.end()) {
            db.image_raw_.emplace(organ, img->second);
            db.image_index_.emplace(organ, FlatIndex(img->second.ids, Eigen::MatrixXd(img->second.data)));
        }
    }
    return db;
}

SentenceDB build_database(std::span<const OrganParagraph> paragraphs, const EmbeddingMatrix& sentence_embeddings,
                          const std::map<Organ, EmbeddingMatrix>& image_embeddings, const LabelTable& labels) {
    const auto label_rows = labels.row_index();
    std::map<std::pair<std::string, Organ>, std::size_t> next_index;
    std::vector<SentenceRecord> records;
    for (const auto& p : paragraphs) {
        std::vector<std::string> findings;
        if (auto it = label_rows.find(p.study_id); it != label_rows.end()) {
            for (const auto& f : organ_findings(p.organ)) {
                const Eigen::Index col = labels.column_of(f);
                if (col >= 0 && labels.matrix(it->second, col)) findings.push_back(f);
            }
            std::sort(findings.begin(), findings.end());
        }
        std::size_t& idx = next_index[{p.study_id, p.organ}];
        for (auto& text : split_sentences(p.text)) {
            SentenceRecord r;
            r.sentence_id = make_sentence_id(p.study_id, p.organ, idx++);
            r.study_id = p.study_id;
            r.organ = p.organ;
            r.text = std::move(text);
            r.findings = findings;
            records.push_back(std::move(r));
        }
    }
    return assemble_database(std::move(records), sentence_embeddings, image_embeddings);
}

DatabaseStats db_stats(const SentenceDB& db) {
    DatabaseStats s;
    std::map<Organ, std::set<std::string>> studies;
    for (Organ o : kAllOrgans) s.per_organ[o] = {};
    for (const auto& r : db.records()) {
        auto& os = s.per_organ[r.organ];
        ++os.sentences;
        os.total_words += count_words(r.text);
        studies[r.organ].insert(r.study_id);
    }
    for (auto& [organ, os] : s.per_organ) {
        os.unique_studies = studies[organ].size();
        if (os.unique_studies)
            os.avg_sentences_per_study = static_cast<double>(os.sentences) / static_cast<double>(os.unique_studies);
        if (os.sentences)
            os.avg_words_per_sentence = static_cast<double>(os.total_words) / static_cast<double>(os.sentences);
        if (organ == Organ::Other)
            s.excluded_other += os.sentences;
        else
            s.indexed_sentences += os.sentences;
    }
    s.total_sentences = s.indexed_sentences + s.excluded_other;
    return s;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError(LoadErrorKind::Io, "cannot open " + path.string());
    std::vector<json> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw LoadError(LoadErrorKind::Malformed, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::ofstream open_out(const fs::path& path) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw LoadError(LoadErrorKind::Io, "cannot write " + path.string());
    return out;
}

}  // namespace

std::vector<OrganParagraph> load_paragraphs(const fs::path& path_or_dir) {
    std::vector<fs::path> files;
    if (fs::is_directory(path_or_dir)) {
        for (const auto& e : fs::directory_iterator(path_or_dir))
            if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
        std::sort(files.begin(), files.end());
    } else {
        files.push_back(path_or_dir);
    }
    std::vector<OrganParagraph> out;
    for (const auto& f : files)
        for (const auto& j : read_jsonl(f)) {
            try {
                out.push_back({j.at("study_id").get<std::string>(), parse_organ(j.at("organ").get<std::string>()),
                               j.at("text").get<std::string>()});
            } catch (const std::exception& e) {
                throw LoadError(LoadErrorKind::Malformed, f.string() + ": " + e.what());
            }
        }
    return out;
}

void save_paragraphs(std::span<const OrganParagraph> paragraphs, const fs::path& path) {
    auto out = open_out(path);
    for (const auto& p : paragraphs)
        out << json{{"study_id", p.study_id}, {"organ", std::string(to_string(p.organ))}, {"text", p.text}}.dump()
            << '\n';
}

std::vector<SentenceRecord> load_sentence_records(const fs::path& path) {
    std::vector<SentenceRecord> out;
    for (const auto& j : read_jsonl(path)) {
        try {
            SentenceRecord r;
            r.sentence_id = j.at("sentence_id").get<std::string>();
            r.study_id = j.at("study_id").get<std::string>();
            r.organ = parse_organ(j.at("organ").get<std::string>());
            r.text = j.at("text").get<std::string>();
            r.findings = j.at("findings").get<std::vector<std::string>>();
            r.has_embedding = j.value("has_embedding", false);
            out.push_back(std::move(r));
        } catch (const std::exception& e) {
            throw LoadError(LoadErrorKind::Malformed, path.string() + ": " + e.what());
        }
    }
    return out;
}

void save_sentence_records(std::span<const SentenceRecord> records, const fs::path& path) {
    auto out = open_out(path);
    for (const auto& r : records)
        out << json{{"sentence_id", r.sentence_id},
                    {"study_id", r.study_id},
                    {"organ", std::string(to_string(r.organ))},
                    {"text", r.text},
                    {"findings", r.findings},
                    {"has_embedding", r.has_embedding}}
                   .dump()
            << '\n';
}

std::map<Organ, EmbeddingMatrix> load_image_embeddings(const fs::path& dir) {
    std::map<Organ, EmbeddingMatrix> out;
    for (Organ o : kIndexedOrgans) {
        const fs::path p = dir / (std::string(to_string(o)) + ".aemb");
        if (fs::exists(p)) out.emplace(o, load_embeddings(p));
    }
    return out;
}

void SentenceDB::save(const fs::path& dir) const {
    fs::create_directories(dir);
    save_sentence_records(records_, dir / "sentences.jsonl");
    save_embeddings(sentence_raw_, dir / "sentence_emb.aemb");
    for (const auto& [organ, m] : image_raw_) save_embeddings(m, dir / ("image_" + std::string(to_string(organ)) + ".aemb"));
}

SentenceDB SentenceDB::load(const fs::path& dir) {
    auto records = load_sentence_records(dir / "sentences.jsonl");
    EmbeddingMatrix sent = load_embeddings(dir / "sentence_emb.aemb");
    std::map<Organ, EmbeddingMatrix> images;
    for (Organ o : kIndexedOrgans) {
        const fs::path p = dir / ("image_" + std::string(to_string(o)) + ".aemb");
        if (fs::exists(p)) images.emplace(o, load_embeddings(p));
    }
    return assemble_database(std::move(records), sent, images);
}

}  // namespace organrag
