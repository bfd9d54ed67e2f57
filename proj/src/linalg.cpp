#include "phenokit/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "phenokit/common.hpp"

namespace phenokit {

// Cyclic Jacobi. Fine for the profile dimensions this toolkit works at
// (tens to a few hundred).
SymEig sym_eig(const std::vector<double>& matrix, int dim) {
    if (dim < 1 || static_cast<int>(matrix.size()) != dim * dim)
        throw InvariantError("sym_eig: bad matrix size");
    std::vector<double> a = matrix;
    std::vector<double> v(static_cast<std::size_t>(dim) * dim, 0.0);
    for (int i = 0; i < dim; ++i) v[i * dim + i] = 1.0;

    auto off_norm = [&] {
        double s = 0;
        for (int i = 0; i < dim; ++i)
            for (int j = i + 1; j < dim; ++j) s += a[i * dim + j] * a[i * dim + j];
        return std::sqrt(2.0 * s);
    };
    double base = 0;
    for (double x : a) base += x * x;
    base = std::sqrt(base);
    const double tol = 1e-14 * std::max(base, 1.0);

    for (int sweep = 0; sweep < 128 && off_norm() > tol; ++sweep) {
        for (int p = 0; p < dim - 1; ++p)
            for (int q = p + 1; q < dim; ++q) {
                const double apq = a[p * dim + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = a[p * dim + p], aqq = a[q * dim + q];
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (int k = 0; k < dim; ++k) {
                    const double akp = a[k * dim + p], akq = a[k * dim + q];
                    a[k * dim + p] = c * akp - s * akq;
                    a[k * dim + q] = s * akp + c * akq;
                }
                for (int k = 0; k < dim; ++k) {
                    const double apk = a[p * dim + k], aqk = a[q * dim + k];
                    a[p * dim + k] = c * apk - s * aqk;
                    a[q * dim + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < dim; ++k) {
                    const double vkp = v[k * dim + p], vkq = v[k * dim + q];
                    v[k * dim + p] = c * vkp - s * vkq;
                    v[k * dim + q] = s * vkp + c * vkq;
                }
            }
    }

    std::vector<int> order(static_cast<std::size_t>(dim));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](int i, int j) { return a[i * dim + i] > a[j * dim + j]; });

    SymEig out;
    out.values.resize(static_cast<std::size_t>(dim));
    out.vectors.resize(static_cast<std::size_t>(dim) * dim);
    for (int j = 0; j < dim; ++j) {
        out.values[j] = a[order[j] * dim + order[j]];
        for (int i = 0; i < dim; ++i) out.vectors[i * dim + j] = v[i * dim + order[j]];
    }
    return out;
}

std::vector<double> column_mean(const std::vector<std::vector<double>>& rows, int dim) {
    std::vector<double> mean(static_cast<std::size_t>(dim), 0.0);
    for (const auto& r : rows)
        for (int i = 0; i < dim; ++i) mean[i] += r[i];
    for (auto& m : mean) m /= static_cast<double>(rows.size());
    return mean;
}

std::vector<double> covariance(const std::vector<std::vector<double>>& rows, int dim) {
    const std::size_t n = rows.size();
    if (n < 2) throw InputError("covariance: need at least 2 rows");
    const auto mean = column_mean(rows, dim);
    std::vector<double> cov(static_cast<std::size_t>(dim) * dim, 0.0);
    for (const auto& r : rows)
        for (int i = 0; i < dim; ++i) {
            const double di = r[i] - mean[i];
            for (int j = i; j < dim; ++j) cov[i * dim + j] += di * (r[j] - mean[j]);
        }
    const double inv = 1.0 / static_cast<double>(n - 1);
    for (int i = 0; i < dim; ++i)
        for (int j = i; j < dim; ++j) {
            cov[i * dim + j] *= inv;
            cov[j * dim + i] = cov[i * dim + j];
        }
    return cov;
}

std::vector<double> mat_vec(const std::vector<double>& m, const std::vector<double>& x, int dim) {
    std::vector<double> y(static_cast<std::size_t>(dim), 0.0);
    for (int i = 0; i < dim; ++i) {
        double acc = 0;
        for (int j = 0; j < dim; ++j) acc += m[i * dim + j] * x[j];
        y[i] = acc;
    }
    return y;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace phenokit
