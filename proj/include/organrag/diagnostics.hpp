#pragma once

// Representational-bottleneck measurements on frozen embeddings: singular
// value spectrum, effective dimensionality, participation ratio, AUC-ROC,
// logistic-regression linear probes and the top-k / tail projection test.

#include <algorithm>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "organrag/embedcore.hpp"

namespace organrag {

class InsufficientDataError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct SpectrumReport {
    Eigen::VectorXd singular_values;     // descending
    Eigen::VectorXd variance_fractions;  // sigma_i^2 / sum sigma_j^2
    int dim90 = 0;
    int dim95 = 0;
    double participation_ratio = 0.0;
    int total_dim = 0;
};

/// Smallest k such that the first k fractions sum to at least `threshold`.
/// Cumulative sums within 1e-12 of the threshold count as reaching it.
template <typename Derived>
int effective_dims(const Eigen::MatrixBase<Derived>& variance_fractions, double threshold) {
    if (variance_fractions.size() == 0) throw DomainError("effective_dims: empty input");
    if (!(threshold > 0.0 && threshold < 1.0)) throw DomainError("effective_dims: threshold must be in (0,1)");
    const double total = variance_fractions.sum();
    if (std::abs(total - 1.0) > 1e-6) throw DomainError("effective_dims: fractions must sum to 1");
    double cumulative = 0.0;
    for (Eigen::Index i = 0; i < variance_fractions.size(); ++i) {
        cumulative += static_cast<double>(variance_fractions[i]);
        if (cumulative >= threshold - 1e-12) return static_cast<int>(i + 1);
    }
    return static_cast<int>(variance_fractions.size());
}

/// (sum sigma^2)^2 / sum sigma^4.
template <typename Derived>
double participation_ratio(const Eigen::MatrixBase<Derived>& singular_values) {
    const Eigen::ArrayXd s2 = singular_values.template cast<double>().array().square();
    const double num = s2.sum();
    const double den = s2.square().sum();
    if (!(num > 0.0)) throw DomainError("participation_ratio: all singular values are zero");
    return num * num / den;
}

/// Spectrum metrics from singular values already sorted descending.
SpectrumReport spectrum_from_singular_values(const Eigen::VectorXd& singular_values);

/// Full SVD of the mean-centred matrix. Requires at least two rows.
template <typename Derived>
SpectrumReport pca_spectrum(const Eigen::MatrixBase<Derived>& data) {
    if (data.rows() < 2) throw InsufficientDataError("pca_spectrum: need at least 2 rows");
    Eigen::MatrixXd centered = data.template cast<double>();
    centered.rowwise() -= centered.colwise().mean();
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered);
    Eigen::VectorXd sv = Eigen::VectorXd::Zero(data.cols());
    sv.head(svd.singularValues().size()) = svd.singularValues();
    auto report = spectrum_from_singular_values(sv);
    report.total_dim = static_cast<int>(data.cols());
    return report;
}

inline SpectrumReport pca_spectrum(const EmbeddingMatrix& m) { return pca_spectrum(m.data); }

/// Mann-Whitney AUC with midrank ties. Labels are 0/1.
double auc_roc(std::span<const double> scores, std::span<const int> labels);

struct ProbeConfig {
    double l2_strength = 1.0;  // 1 / C
    int max_iterations = 1000;
    bool class_balanced = true;
    double convergence_tol = 1e-8;
};

void validate(const ProbeConfig& cfg);

struct ProbeResult {
    std::string finding;
    double auc = 0.5;
    Eigen::VectorXd weights;
    double bias = 0.0;
    bool converged = false;
    int iterations = 0;
};

struct LogisticModel {
    Eigen::VectorXd weights;
    double bias = 0.0;
    bool converged = false;
    int iterations = 0;

    Eigen::VectorXd decision(const Eigen::MatrixXd& x) const {
        return (x * weights).array() + bias;
    }
};

/// L2-regularised logistic regression, optionally class balanced
/// (weight n / (2 n_c) per sample of class c). The bias is not penalised.
LogisticModel fit_logistic(const Eigen::MatrixXd& x, std::span<const int> labels, const ProbeConfig& cfg);

/// Trains on (train_x, train_y) and reports AUC on the evaluation split.
ProbeResult train_linear_probe(const Eigen::MatrixXd& train_x, std::span<const int> train_y,
                               const Eigen::MatrixXd& eval_x, std::span<const int> eval_y,
                               const ProbeConfig& cfg, std::string finding = {});

struct ProjectionTestResult {
    int k = 0;
    int tail_dims = 0;
    double top_k_auc = 0.5;
    double tail_auc = 0.5;
    double delta = 0.0;  // tail - top
};

/// Principal axes fitted on the training split; probes on the first `k`
/// axes and on the lower half (floor(d/2) trailing axes).
ProjectionTestResult projection_test(const Eigen::MatrixXd& train_x, std::span<const int> train_y,
                                     const Eigen::MatrixXd& eval_x, std::span<const int> eval_y, int k,
                                     const ProbeConfig& cfg);

}  // namespace organrag
