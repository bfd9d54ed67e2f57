#pragma once

#include <vector>

#include "phenokit/ops.hpp"

namespace phenokit {

struct LossWeights {
    double lambda1 = 0.1;   // classification
    double lambda2 = 100.0; // regression
    double lambda3 = 1.0;   // contrastive
    double tau = 1.0;
    bool normalize_embeddings = false;

    // The tuning-sweep optimum on the same ray as the defaults.
    static LossWeights tuned_preset() {
        LossWeights w;
        w.lambda1 = 1.0;
        w.lambda2 = 1000.0;
        w.lambda3 = 10.0;
        return w;
    }

    void validate() const {
        if (!(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0))
            throw InputError("loss weights must be nonnegative");
        if (!(tau > 0)) throw InputError("temperature tau must be positive");
    }
};

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Var<T> loss_cls(Tape<T>& tape, Var<T> logits, const std::vector<int>& labels) {
    (void)tape;
    return cross_entropy(logits, labels);
}

// Mean over all B x D scalars of (z - z_hat)^2.
template <typename T>
Var<T> loss_mse(Tape<T>& tape, Var<T> z_hat, Var<T> z) {
    (void)tape;
    detail::require_same_shape(z_hat, z, "loss_mse");
    auto diff = sub(z, z_hat);
    return mean_all(mul(diff, diff));
}

// Row-softmax contrastive loss over raw dot products: the denominator for
// row i runs over every z_j in the batch, j = i included.
template <typename T>
Var<T> loss_con(Tape<T>& tape, Var<T> z_hat, Var<T> z, T tau, bool normalize = false) {
    (void)tape;
    detail::require_same_shape(z_hat, z, "loss_con");
    if (!(tau > T(0))) throw InputError("loss_con: tau must be positive");
    const std::int64_t B = z_hat.dim(0);
    auto a = normalize ? l2_normalize_rows(z_hat) : z_hat;
    auto b = normalize ? l2_normalize_rows(z) : z;
    auto scores = scale(matmul(a, transpose2d(b)), T(1) / tau);
    std::vector<int> diag(static_cast<std::size_t>(B));
    for (std::int64_t i = 0; i < B; ++i) diag[static_cast<std::size_t>(i)] = static_cast<int>(i);
    return cross_entropy(scores, diag);
}

// lambda1 * cls + lambda2 * mse + lambda3 * con; a component may be omitted
// by passing an invalid Var (ablations).
template <typename T>
Var<T> loss_total(Tape<T>& tape, Var<T> cls, Var<T> mse, Var<T> con, const LossWeights& w) {
    w.validate();
    Var<T> total{nullptr, -1};
    auto fold = [&](Var<T> term, double lambda) {
        if (term.tape == nullptr) return;
        auto scaled = scale(term, static_cast<T>(lambda));
        total = total.tape == nullptr ? scaled : add(total, scaled);
    };
    fold(cls, w.lambda1);
    fold(mse, w.lambda2);
    fold(con, w.lambda3);
    if (total.tape == nullptr) {
        (void)tape;
        throw InputError("loss_total: no active objective");
    }
    return total;
}

}  // namespace phenokit
