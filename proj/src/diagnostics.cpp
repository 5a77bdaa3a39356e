#include "organrag/diagnostics.hpp"

#include <cmath>

namespace organrag {

SpectrumReport spectrum_from_singular_values(const Eigen::VectorXd& singular_values) {
    if (singular_values.size() == 0) throw DomainError("spectrum: no singular values");
    SpectrumReport r;
    r.singular_values = singular_values;
    std::sort(r.singular_values.begin(), r.singular_values.end(), std::greater<>());
    const Eigen::ArrayXd s2 = r.singular_values.array().square();
    const double total = s2.sum();
    if (!(total > 0.0)) throw DomainError("spectrum: zero total variance");
    r.variance_fractions = (s2 / total).matrix();
    r.dim90 = effective_dims(r.variance_fractions, 0.90);
    r.dim95 = effective_dims(r.variance_fractions, 0.95);
    r.participation_ratio = participation_ratio(r.singular_values);
    r.total_dim = static_cast<int>(singular_values.size());
    return r;
}

double auc_roc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw DomainError("auc_roc: scores and labels differ in length");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw DomainError("auc_roc: labels must be 0/1");
        n_pos += static_cast<std::size_t>(y);
    }
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw DomainError("auc_roc: need both classes");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // Midranks over tied groups.
    double positive_rank_sum = 0.0;
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t)
            if (labels[order[t]] == 1) positive_rank_sum += midrank;
        i = j + 1;
    }
    const double np = static_cast<double>(n_pos);
    const double u = positive_rank_sum - np * (np + 1.0) / 2.0;
    return u / (np * static_cast<double>(n_neg));
}

void validate(const ProbeConfig& cfg) {
    if (!(cfg.l2_strength >= 0.0)) throw DomainError("probe: l2_strength must be >= 0");
    if (cfg.max_iterations < 1) throw DomainError("probe: max_iterations must be >= 1");
    if (!(cfg.convergence_tol > 0.0)) throw DomainError("probe: convergence_tol must be > 0");
}

namespace {

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

struct Objective {
    const Eigen::MatrixXd& x;
    const Eigen::VectorXd& y;
    const Eigen::VectorXd& sample_weight;
    double l2;
    double total_weight;

    double value(const Eigen::VectorXd& w, double b) const {
        const Eigen::VectorXd z = (x * w).array() + b;
        double loss = 0.0;
        for (Eigen::Index i = 0; i < z.size(); ++i) loss += sample_weight[i] * (softplus(z[i]) - y[i] * z[i]);
        return (loss + 0.5 * l2 * w.squaredNorm()) / total_weight;
    }
};

}  // namespace

LogisticModel fit_logistic(const Eigen::MatrixXd& x, std::span<const int> labels, const ProbeConfig& cfg) {
    validate(cfg);
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    if (static_cast<Eigen::Index>(labels.size()) != n) throw DomainError("probe: label count differs from rows");

    Eigen::VectorXd y(n);
    Eigen::Index n_pos = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const int v = labels[static_cast<std::size_t>(i)];
        if (v != 0 && v != 1) throw DomainError("probe: labels must be 0/1");
        y[i] = v;
        n_pos += v;
    }
    if (n_pos == 0 || n_pos == n) throw InsufficientDataError("probe: training labels contain a single class");

    Eigen::VectorXd sw = Eigen::VectorXd::Ones(n);
    if (cfg.class_balanced) {
        const double w_pos = static_cast<double>(n) / (2.0 * static_cast<double>(n_pos));
        const double w_neg = static_cast<double>(n) / (2.0 * static_cast<double>(n - n_pos));
        for (Eigen::Index i = 0; i < n; ++i) sw[i] = y[i] > 0.5 ? w_pos : w_neg;
    }
    const Objective obj{x, y, sw, cfg.l2_strength, sw.sum()};

    LogisticModel model;
    model.weights = Eigen::VectorXd::Zero(d);
    double f = obj.value(model.weights, model.bias);

    // Damped Newton iteration on (w, b).
    Eigen::MatrixXd xa(n, d + 1);
    xa.leftCols(d) = x;
    xa.col(d).setOnes();
    for (int it = 1; it <= cfg.max_iterations; ++it) {
        model.iterations = it;
        const Eigen::VectorXd z = (x * model.weights).array() + model.bias;
        Eigen::VectorXd resid(n), curv(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const double p = sigmoid(z[i]);
            resid[i] = sw[i] * (p - y[i]);
            curv[i] = sw[i] * p * (1.0 - p);
        }
        Eigen::VectorXd grad = xa.transpose() * resid;
        grad.head(d) += cfg.l2_strength * model.weights;
        grad /= obj.total_weight;
        if (grad.lpNorm<Eigen::Infinity>() <= cfg.convergence_tol) {
            model.converged = true;
            break;
        }

        Eigen::MatrixXd hess = xa.transpose() * curv.asDiagonal() * xa;
        hess.diagonal().head(d).array() += cfg.l2_strength;
        hess /= obj.total_weight;
        hess.diagonal().array() += 1e-12;
        Eigen::VectorXd step = hess.ldlt().solve(-grad);
        if (!step.allFinite() || grad.dot(step) >= 0.0) step = -grad;

        double t = 1.0;
        const double slope = grad.dot(step);
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            const Eigen::VectorXd w_new = model.weights + t * step.head(d);
            const double b_new = model.bias + t * step[d];
            const double f_new = obj.value(w_new, b_new);
            if (f_new <= f + 1e-4 * t * slope) {
                model.weights = w_new;
                model.bias = b_new;
                f = f_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) break;  // no further descent possible at machine precision
    }
    return model;
}

ProbeResult train_linear_probe(const Eigen::MatrixXd& train_x, std::span<const int> train_y,
                               const Eigen::MatrixXd& eval_x, std::span<const int> eval_y,
                               const ProbeConfig& cfg, std::string finding) {
    if (train_x.cols() != eval_x.cols()) throw DomainError("probe: train/eval dimension mismatch");
    LogisticModel model = fit_logistic(train_x, train_y, cfg);
    const Eigen::VectorXd scores = model.decision(eval_x);
    ProbeResult r;
    r.finding = std::move(finding);
    r.auc = auc_roc(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())), eval_y);
    r.weights = std::move(model.weights);
    r.bias = model.bias;
    r.converged = model.converged;
    r.iterations = model.iterations;
    return r;
}

ProjectionTestResult projection_test(const Eigen::MatrixXd& train_x, std::span<const int> train_y,
                                     const Eigen::MatrixXd& eval_x, std::span<const int> eval_y, int k,
                                     const ProbeConfig& cfg) {
    const Eigen::Index d = train_x.cols();
    if (k < 1) throw DomainError("projection_test: k must be >= 1");
    if (d < 2 * k) throw DomainError("projection_test: need d >= 2k");
    if (train_x.rows() < 2) throw InsufficientDataError("projection_test: need at least 2 training rows");
    if (eval_x.cols() != d) throw DomainError("projection_test: train/eval dimension mismatch");

    const Eigen::RowVectorXd mean = train_x.colwise().mean();
    const Eigen::MatrixXd centered = train_x.rowwise() - mean;
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeFullV);
    const Eigen::MatrixXd& axes = svd.matrixV();

    const Eigen::Index tail = d / 2;
    const Eigen::MatrixXd top_axes = axes.leftCols(k);
    const Eigen::MatrixXd tail_axes = axes.rightCols(tail);
    const Eigen::MatrixXd eval_centered = eval_x.rowwise() - mean;

    ProjectionTestResult r;
    r.k = k;
    r.tail_dims = static_cast<int>(tail);
    r.top_k_auc = train_linear_probe(centered * top_axes, train_y, eval_centered * top_axes, eval_y, cfg).auc;
    r.tail_auc = train_linear_probe(centered * tail_axes, train_y, eval_centered * tail_axes, eval_y, cfg).auc;
    r.delta = r.tail_auc - r.top_k_auc;
    return r;
}

}  // namespace organrag
