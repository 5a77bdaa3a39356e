#pragma once

// Embedding storage, label tables and the vector primitives every other
// module builds on. Arithmetic is double precision; the on-disk format is
// float32 (see save_embeddings).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace organrag {

/// Raised for invalid arguments to the numeric primitives (zero vectors,
/// dimension mismatch, empty inputs).
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

enum class LoadErrorKind {
    Io,
    BadMagic,
    BadVersion,
    Truncated,
    IdCountMismatch,
    DuplicateId,
    NonFinite,
    Malformed,
};

const char* to_string(LoadErrorKind kind);

class LoadError : public std::runtime_error {
public:
    LoadError(LoadErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    LoadErrorKind kind() const noexcept { return kind_; }

private:
    LoadErrorKind kind_;
};

/// Row-aligned id list plus an n x d dense matrix.
template <typename Scalar>
struct BasicEmbeddingMatrix {
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

    std::vector<std::string> ids;
    Matrix data;

    Eigen::Index rows() const { return data.rows(); }
    Eigen::Index dim() const { return data.cols(); }

    /// Row position of `id`, or -1.
    Eigen::Index find(const std::string& id) const {
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == id) return static_cast<Eigen::Index>(i);
        return -1;
    }

    bool operator==(const BasicEmbeddingMatrix& o) const {
        return ids == o.ids && data.rows() == o.data.rows() && data.cols() == o.data.cols() &&
               (data.array() == o.data.array()).all();
    }
};

using EmbeddingMatrix = BasicEmbeddingMatrix<double>;

/// Throws LoadError if ids and rows disagree, ids repeat, or values are not finite.
void validate(const EmbeddingMatrix& m);

constexpr std::uint32_t kEmbeddingFormatVersion = 1;

/// Sidecar id file for an embedding file: `dir/name.aemb` -> `dir/name.ids`.
std::filesystem::path ids_path_for(const std::filesystem::path& path);

EmbeddingMatrix load_embeddings(const std::filesystem::path& path);

/// Writes the AEMB file plus its `.ids` sidecar. Values are narrowed to
/// float32, so load(save(m)) == m holds bitwise for float-representable data.
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);

/// Binary study x finding table.
struct LabelTable {
    std::vector<std::string> ids;
    std::vector<std::string> findings;
    Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> matrix;

    Eigen::Index row_of(const std::string& id) const;
    Eigen::Index column_of(const std::string& finding) const;

    /// Names of the positive findings for row `row`.
    std::vector<std::string> positives(Eigen::Index row) const;

    /// Column as a 0/1 vector.
    std::vector<int> column(Eigen::Index col) const;

    /// id -> row lookup table.
    std::unordered_map<std::string, Eigen::Index> row_index() const;

    bool operator==(const LabelTable& o) const {
        return ids == o.ids && findings == o.findings && matrix.rows() == o.matrix.rows() &&
               matrix.cols() == o.matrix.cols() && (matrix.array() == o.matrix.array()).all();
    }
};

void validate(const LabelTable& t);

/// Comma separated, header `id,<finding>,...`, one row per id.
LabelTable load_labels(const std::filesystem::path& path);
void save_labels(const LabelTable& t, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Vector primitives

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar cosine_sim(const Eigen::MatrixBase<DerivedA>& a,
                                     const Eigen::MatrixBase<DerivedB>& b) {
    using Scalar = typename DerivedA::Scalar;
    if (a.size() != b.size()) throw DomainError("cosine_sim: dimension mismatch");
    const Scalar na = a.norm();
    const Scalar nb = b.norm();
    if (na == Scalar(0) || nb == Scalar(0)) throw DomainError("cosine_sim: zero-norm input");
    Scalar c = a.dot(b) / (na * nb);
    return std::clamp(c, Scalar(-1), Scalar(1));
}

template <typename Scalar>
struct NormalizedRows {
    BasicEmbeddingMatrix<Scalar> matrix;
    std::vector<Eigen::Index> zero_rows;
};

/// Scales every nonzero row to unit norm; zero rows are kept and reported.
template <typename Scalar>
NormalizedRows<Scalar> l2_normalize(const BasicEmbeddingMatrix<Scalar>& m) {
    NormalizedRows<Scalar> out{m, {}};
    for (Eigen::Index i = 0; i < out.matrix.data.rows(); ++i) {
        const Scalar n = out.matrix.data.row(i).norm();
        if (n == Scalar(0))
            out.zero_rows.push_back(i);
        else
            out.matrix.data.row(i) /= n;
    }
    return out;
}

/// Row-wise normalization of a bare matrix (zero rows untouched).
template <typename Derived>
typename Derived::PlainObject normalize_rows(const Eigen::MatrixBase<Derived>& m) {
    typename Derived::PlainObject out = m;
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const auto n = out.row(i).norm();
        if (n > 0) out.row(i) /= n;
    }
    return out;
}

template <typename Scalar>
struct Centered {
    BasicEmbeddingMatrix<Scalar> matrix;
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> mean;
};

template <typename Scalar>
Centered<Scalar> mean_center(const BasicEmbeddingMatrix<Scalar>& m) {
    Centered<Scalar> out{m, {}};
    if (m.data.rows() == 0) {
        out.mean.setZero(m.data.cols());
        return out;
    }
    out.mean = m.data.colwise().mean().transpose();
    out.matrix.data.rowwise() -= out.mean.transpose();
    return out;
}

}  // namespace organrag
