#pragma once

#include <vector>

namespace phenokit {

// Symmetric eigendecomposition, eigenvalues sorted descending. vectors is
// row-major dim x dim with column j holding the eigenvector of values[j].
struct SymEig {
    std::vector<double> values;
    std::vector<double> vectors;
};

SymEig sym_eig(const std::vector<double>& matrix, int dim);

// Sample covariance (1/(n-1)) of n row vectors of width dim, flattened row-major.
std::vector<double> covariance(const std::vector<std::vector<double>>& rows, int dim);

std::vector<double> column_mean(const std::vector<std::vector<double>>& rows, int dim);

// y = M x for a dim x dim row-major matrix.
std::vector<double> mat_vec(const std::vector<double>& m, const std::vector<double>& x, int dim);

double dot(const std::vector<double>& a, const std::vector<double>& b);
double norm2(const std::vector<double>& a);

}  // namespace phenokit
