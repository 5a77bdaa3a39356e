#include "organrag/embedcore.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace organrag {

namespace fs = std::filesystem;

const char* to_string(LoadErrorKind kind) {
    switch (kind) {
        case LoadErrorKind::Io: return "io error";
        case LoadErrorKind::BadMagic: return "bad magic";
        case LoadErrorKind::BadVersion: return "unsupported version";
        case LoadErrorKind::Truncated: return "truncated file";
        case LoadErrorKind::IdCountMismatch: return "id count mismatch";
        case LoadErrorKind::DuplicateId: return "duplicate id";
        case LoadErrorKind::NonFinite: return "non-finite value";
        case LoadErrorKind::Malformed: return "malformed input";
    }
    return "load error";
}

namespace {

constexpr std::array<char, 4> kMagic{'A', 'E', 'M', 'B'};

template <typename T>
void write_le(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    os.write(bytes.data(), sizeof(T));
}

template <typename T>
bool read_le(std::istream& is, T& value) {
    std::array<char, sizeof(T)> bytes;
    if (!is.read(bytes.data(), sizeof(T))) return false;
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    std::memcpy(&value, bytes.data(), sizeof(T));
    return true;
}

void check_unique(const std::vector<std::string>& ids, const std::string& where) {
    std::unordered_set<std::string> seen;
    for (const auto& id : ids)
        if (!seen.insert(id).second) throw LoadError(LoadErrorKind::DuplicateId, where + ": " + id);
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

void validate(const EmbeddingMatrix& m) {
    if (static_cast<Eigen::Index>(m.ids.size()) != m.data.rows())
        throw LoadError(LoadErrorKind::IdCountMismatch,
                        std::to_string(m.ids.size()) + " ids for " + std::to_string(m.data.rows()) + " rows");
    check_unique(m.ids, "embedding ids");
    if (!m.data.allFinite()) throw LoadError(LoadErrorKind::NonFinite, "embedding matrix");
}

fs::path ids_path_for(const fs::path& path) {
    fs::path p = path;
    p.replace_extension(".ids");
    return p;
}

EmbeddingMatrix load_embeddings(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError(LoadErrorKind::Io, "cannot open " + path.string());

    std::array<char, 4> magic{};
    if (!in.read(magic.data(), 4)) throw LoadError(LoadErrorKind::Truncated, path.string() + " header");
    if (magic != kMagic) throw LoadError(LoadErrorKind::BadMagic, path.string());

    std::uint32_t version = 0;
    std::uint64_t n = 0;
    std::uint32_t d = 0;
    if (!read_le(in, version) || !read_le(in, n) || !read_le(in, d))
        throw LoadError(LoadErrorKind::Truncated, path.string() + " header");
    if (version != kEmbeddingFormatVersion)
        throw LoadError(LoadErrorKind::BadVersion, path.string() + " version " + std::to_string(version));
    if (d == 0 && n != 0) throw LoadError(LoadErrorKind::Malformed, path.string() + " has zero dimension");

    const auto payload_begin = in.tellg();
    in.seekg(0, std::ios::end);
    const auto payload_bytes = static_cast<std::uint64_t>(in.tellg() - payload_begin);
    in.seekg(payload_begin);
    if ((d > 0 && n > payload_bytes / (4ull * d)) || payload_bytes != n * d * 4ull)
        throw LoadError(LoadErrorKind::Truncated,
                        path.string() + ": payload is " + std::to_string(payload_bytes) + " bytes, header implies " +
                            std::to_string(n * d * 4ull));

    EmbeddingMatrix m;
    m.data.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < m.data.rows(); ++i)
        for (Eigen::Index j = 0; j < m.data.cols(); ++j) {
            float v = 0;
            if (!read_le(in, v)) throw LoadError(LoadErrorKind::Truncated, path.string());
            if (!std::isfinite(v))
                throw LoadError(LoadErrorKind::NonFinite,
                                path.string() + " row " + std::to_string(i) + " col " + std::to_string(j));
            m.data(i, j) = static_cast<double>(v);
        }

    const fs::path ids_file = ids_path_for(path);
    std::ifstream ids_in(ids_file);
    if (!ids_in) throw LoadError(LoadErrorKind::Io, "cannot open sidecar " + ids_file.string());
    std::string line;
    while (std::getline(ids_in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        m.ids.push_back(line);
    }
    if (m.ids.size() != n)
        throw LoadError(LoadErrorKind::IdCountMismatch, ids_file.string() + " has " + std::to_string(m.ids.size()) +
                                                            " ids, header says " + std::to_string(n));
    check_unique(m.ids, ids_file.string());
    return m;
}

void save_embeddings(const EmbeddingMatrix& m, const fs::path& path) {
    validate(m);
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw LoadError(LoadErrorKind::Io, "cannot write " + path.string());
        out.write(kMagic.data(), 4);
        write_le(out, kEmbeddingFormatVersion);
        write_le(out, static_cast<std::uint64_t>(m.data.rows()));
        write_le(out, static_cast<std::uint32_t>(m.data.cols()));
        for (Eigen::Index i = 0; i < m.data.rows(); ++i)
            for (Eigen::Index j = 0; j < m.data.cols(); ++j) write_le(out, static_cast<float>(m.data(i, j)));
        if (!out) throw LoadError(LoadErrorKind::Io, "write failed for " + path.string());
    }
    std::ofstream ids_out(ids_path_for(path), std::ios::trunc);
    if (!ids_out) throw LoadError(LoadErrorKind::Io, "cannot write " + ids_path_for(path).string());
    for (const auto& id : m.ids) ids_out << id << '\n';
}

// ---------------------------------------------------------------------------

Eigen::Index LabelTable::row_of(const std::string& id) const {
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == id) return static_cast<Eigen::Index>(i);
    return -1;
}

Eigen::Index LabelTable::column_of(const std::string& finding) const {
    for (std::size_t i = 0; i < findings.size(); ++i)
        if (findings[i] == finding) return static_cast<Eigen::Index>(i);
    return -1;
}

std::vector<std::string> LabelTable::positives(Eigen::Index row) const {
    std::vector<std::string> out;
    for (Eigen::Index j = 0; j < matrix.cols(); ++j)
        if (matrix(row, j)) out.push_back(findings[static_cast<std::size_t>(j)]);
    return out;
}

std::vector<int> LabelTable::column(Eigen::Index col) const {
    std::vector<int> out(static_cast<std::size_t>(matrix.rows()));
    for (Eigen::Index i = 0; i < matrix.rows(); ++i) out[static_cast<std::size_t>(i)] = matrix(i, col);
    return out;
}

std::unordered_map<std::string, Eigen::Index> LabelTable::row_index() const {
    std::unordered_map<std::string, Eigen::Index> out;
    out.reserve(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) out.emplace(ids[i], static_cast<Eigen::Index>(i));
    return out;
}

void validate(const LabelTable& t) {
    if (static_cast<Eigen::Index>(t.ids.size()) != t.matrix.rows())
        throw LoadError(LoadErrorKind::IdCountMismatch, "label ids vs rows");
    if (static_cast<Eigen::Index>(t.findings.size()) != t.matrix.cols())
        throw LoadError(LoadErrorKind::Malformed, "finding names vs columns");
    check_unique(t.ids, "label ids");
    check_unique(t.findings, "finding names");
    if ((t.matrix.array() > 1).any()) throw LoadError(LoadErrorKind::Malformed, "label entries must be 0 or 1");
}

LabelTable load_labels(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw LoadError(LoadErrorKind::Io, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw LoadError(LoadErrorKind::Truncated, path.string() + " has no header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto header = split_csv_line(line);
    if (header.empty() || header.front() != "id")
        throw LoadError(LoadErrorKind::Malformed, path.string() + ": header must start with 'id'");

    LabelTable t;
    t.findings.assign(header.begin() + 1, header.end());
    std::vector<std::vector<std::uint8_t>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != header.size())
            throw LoadError(LoadErrorKind::Malformed,
                            path.string() + ":" + std::to_string(line_no) + " has " + std::to_string(fields.size()) +
                                " fields, expected " + std::to_string(header.size()));
        t.ids.push_back(fields[0]);
        std::vector<std::uint8_t> row;
        for (std::size_t j = 1; j < fields.size(); ++j) {
            if (fields[j] != "0" && fields[j] != "1")
                throw LoadError(LoadErrorKind::Malformed,
                                path.string() + ":" + std::to_string(line_no) + " non-binary value '" + fields[j] + "'");
            row.push_back(fields[j] == "1" ? 1 : 0);
        }
        rows.push_back(std::move(row));
    }
    t.matrix.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(t.findings.size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            t.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    validate(t);
    return t;
}

void save_labels(const LabelTable& t, const fs::path& path) {
    validate(t);
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw LoadError(LoadErrorKind::Io, "cannot write " + path.string());
    out << "id";
    for (const auto& f : t.findings) out << ',' << f;
    out << '\n';
    for (Eigen::Index i = 0; i < t.matrix.rows(); ++i) {
        out << t.ids[static_cast<std::size_t>(i)];
        for (Eigen::Index j = 0; j < t.matrix.cols(); ++j) out << ',' << static_cast<int>(t.matrix(i, j));
        out << '\n';
    }
}

}  // namespace organrag
