#pragma once

// Linear probe: frozen encoder features, one softmax layer on top.
//
// Features are mean-pooled patch tokens from a full-image forward,
// standardized and whitened on train-split statistics before the head. The
// head is trained with the closed-form softmax cross-entropy gradient
// (dlogits = p - onehot) and Adam; the problem is convex, so zero init is
// fine and makes the untrained head score exactly the majority class.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cmtmae/data_io.hpp"
#include "cmtmae/errors.hpp"
#include "cmtmae/rng.hpp"
#include "cmtmae/vit.hpp"

namespace cmtmae {

struct ProbeConfig {
    int epochs = 30;
    int batch_size = 32;
    double lr = 1e-2;
    double train_fraction = 0.8;
    uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) throw ConfigError("probe epochs must be non-negative");
        if (batch_size < 1) throw ConfigError("probe batch_size must be positive");
        if (!(lr > 0.0)) throw ConfigError("probe lr must be positive");
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            throw ConfigError("probe train_fraction must lie in (0,1)");
    }
};

struct ProbeResult {
    int classes = 0;
    int64_t train_count = 0;
    int64_t eval_count = 0;
    double train_accuracy = 0.0;
    double eval_accuracy = 0.0;
    double final_train_loss = 0.0;  // mean cross-entropy over the train split
};

// Mean patch token per image under the frozen encoder. The caller's params
// are cloned without gradients, so nothing here touches training state.
inline std::vector<double> probe_features(const ImageDataset& data, const EncoderParams& encoder,
                                          const ViTConfig& cfg) {
    const EncoderParams frozen = clone_params(encoder, /*trainable=*/false);
    const int64_t n = static_cast<int64_t>(data.count());
    std::vector<double> features(static_cast<size_t>(n) * cfg.embed_dim);
    for (int64_t i = 0; i < n; ++i) {
        const Tensor patches = patchify(data.image_standardized(static_cast<uint64_t>(i)), cfg);
        const EncoderOutput enc = encode(patches, MaskSet{}, frozen, cfg);
        const std::vector<double> pooled = mean_patch_tokens(enc);
        std::copy(pooled.begin(), pooled.end(), features.begin() + i * cfg.embed_dim);
    }
    return features;
}

namespace probe_detail {

// Row softmax in place, max-subtracted.
inline void softmax_row(double* p, int k) {
    double mx = p[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, p[j]);
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
    }
    for (int j = 0; j < k; ++j) p[j] /= sum;
}

inline int argmax_row(const double* p, int k) {
    int best = 0;
    for (int j = 1; j < k; ++j)
        if (p[j] > p[best]) best = j;  // ties keep the lower index
    return best;
}

// Jacobi eigendecomposition of a symmetric matrix, plain cyclic sweeps.
// a is row-major dim*dim and is destroyed; on return its diagonal holds the
// eigenvalues and vecs holds the eigenvectors column-wise.
inline void jacobi_eigh(std::vector<double>& a, std::vector<double>& vecs, int dim) {
    vecs.assign(static_cast<size_t>(dim) * dim, 0.0);
    for (int i = 0; i < dim; ++i) vecs[static_cast<size_t>(i) * dim + i] = 1.0;
    auto at = [&](std::vector<double>& m, int r, int c) -> double& {
        return m[static_cast<size_t>(r) * dim + c];
    };
    for (int sweep = 0; sweep < 50; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < dim; ++p)
            for (int q = p + 1; q < dim; ++q) off += at(a, p, q) * at(a, p, q);
        if (off < 1e-24) break;
        for (int p = 0; p < dim; ++p)
            for (int q = p + 1; q < dim; ++q) {
                const double apq = at(a, p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (at(a, q, q) - at(a, p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int k = 0; k < dim; ++k) {
                    const double akp = at(a, k, p), akq = at(a, k, q);
                    at(a, k, p) = c * akp - s * akq;
                    at(a, k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < dim; ++k) {
                    const double apk = at(a, p, k), aqk = at(a, q, k);
                    at(a, p, k) = c * apk - s * aqk;
                    at(a, q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < dim; ++k) {
                    const double vkp = at(vecs, k, p), vkq = at(vecs, k, q);
                    at(vecs, k, p) = c * vkp - s * vkq;
                    at(vecs, k, q) = s * vkp + c * vkq;
                }
            }
    }
}

struct Adam {
    std::vector<double> m, v;
    int64_t t = 0;
    double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    Adam(size_t n, double lr_) : m(n, 0.0), v(n, 0.0), lr(lr_) {}

    void step(std::vector<double>& theta, const std::vector<double>& g) {
        ++t;
        const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < theta.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

}  // namespace probe_detail

// Trains the probe head on a deterministic train/eval split of the features.
// `features` is row-major [count, dim]; classes are inferred from the labels.
inline ProbeResult linear_probe(const std::vector<double>& features,
                                const std::vector<uint16_t>& labels, int64_t count, int dim,
                                const ProbeConfig& cfg) {
    cfg.validate();
    if (count < 2) throw DataError("probe needs at least 2 samples");
    if (static_cast<int64_t>(labels.size()) != count)
        throw DataError("probe: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(count) + " feature rows");
    if (static_cast<int64_t>(features.size()) != count * dim)
        throw DimensionError("probe: feature buffer size does not match count*dim");

    int classes = 0;
    for (uint16_t l : labels) classes = std::max(classes, static_cast<int>(l) + 1);
    if (classes < 2) throw DataError("probe needs at least 2 classes in the labels");

    // Deterministic split.
    std::vector<uint64_t> perm(static_cast<size_t>(count));
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    Rng split_rng(derive_seed(cfg.seed, rng_purpose::probe, 0));
    split_rng.shuffle(perm);
    const int64_t n_train =
        std::max<int64_t>(1, static_cast<int64_t>(cfg.train_fraction * static_cast<double>(count)));
    const int64_t n_eval = count - n_train;
    if (n_eval < 1) throw ConfigError("probe split leaves no eval samples");

    // Standardize feature dims on train statistics.
    std::vector<double> mean(dim, 0.0), inv_std(dim, 0.0);
    for (int64_t r = 0; r < n_train; ++r) {
        const double* f = features.data() + perm[static_cast<size_t>(r)] * dim;
        for (int d = 0; d < dim; ++d) mean[d] += f[d];
    }
    for (int d = 0; d < dim; ++d) mean[d] /= static_cast<double>(n_train);
    for (int64_t r = 0; r < n_train; ++r) {
        const double* f = features.data() + perm[static_cast<size_t>(r)] * dim;
        for (int d = 0; d < dim; ++d) inv_std[d] += (f[d] - mean[d]) * (f[d] - mean[d]);
    }
    for (int d = 0; d < dim; ++d) {
        const double sd = std::sqrt(inv_std[d] / static_cast<double>(n_train));
        inv_std[d] = sd < 1e-8 ? 1.0 : 1.0 / sd;
    }

    // Encoders trained at this scale concentrate almost all pooled-feature
    // variance in a couple of directions while class structure survives in
    // the low-variance remainder, where per-dim scaling cannot reach it. The
    // probe therefore whitens with a shrinkage correlation matrix fit on the
    // train split; the transform folds into the still-linear classifier.
    std::vector<double> corr(static_cast<size_t>(dim) * dim, 0.0);
    {
        std::vector<double> z(dim);
        for (int64_t r = 0; r < n_train; ++r) {
            const double* f = features.data() + perm[static_cast<size_t>(r)] * dim;
            for (int d = 0; d < dim; ++d) z[d] = (f[d] - mean[d]) * inv_std[d];
            for (int i = 0; i < dim; ++i)
                for (int j = i; j < dim; ++j) corr[static_cast<size_t>(i) * dim + j] += z[i] * z[j];
        }
        for (int i = 0; i < dim; ++i)
            for (int j = i; j < dim; ++j) {
                const double v = corr[static_cast<size_t>(i) * dim + j] / static_cast<double>(n_train);
                corr[static_cast<size_t>(i) * dim + j] = v;
                corr[static_cast<size_t>(j) * dim + i] = v;
            }
    }
    std::vector<double> evecs, white(static_cast<size_t>(dim) * dim, 0.0);
    probe_detail::jacobi_eigh(corr, evecs, dim);
    {
        const double shrink = 0.05;  // keeps near-null directions bounded
        std::vector<double> scale(dim);
        for (int d = 0; d < dim; ++d) {
            const double ev = std::max(corr[static_cast<size_t>(d) * dim + d], 0.0);
            scale[d] = 1.0 / std::sqrt(ev + shrink);
        }
        for (int i = 0; i < dim; ++i)
            for (int j = 0; j < dim; ++j) {
                double acc = 0.0;
                for (int k = 0; k < dim; ++k)
                    acc += evecs[static_cast<size_t>(i) * dim + k] * scale[k] *
                           evecs[static_cast<size_t>(j) * dim + k];
                white[static_cast<size_t>(i) * dim + j] = acc;
            }
    }
    std::vector<double> scratch(dim);
    auto standardized = [&](uint64_t row, std::vector<double>& out) {
        const double* f = features.data() + row * dim;
        for (int d = 0; d < dim; ++d) scratch[d] = (f[d] - mean[d]) * inv_std[d];
        for (int i = 0; i < dim; ++i) {
            double acc = 0.0;
            for (int k = 0; k < dim; ++k) acc += white[static_cast<size_t>(i) * dim + k] * scratch[k];
            out[i] = acc;
        }
    };

    std::vector<double> w(static_cast<size_t>(dim) * classes, 0.0), b(classes, 0.0);
    probe_detail::Adam opt_w(w.size(), cfg.lr), opt_b(b.size(), cfg.lr);

    std::vector<uint64_t> order(perm.begin(), perm.begin() + n_train);
    std::vector<double> x(dim), logits(classes);
    std::vector<double> gw(w.size()), gb(b.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng(derive_seed(cfg.seed, rng_purpose::probe, 1 + static_cast<uint64_t>(epoch)));
        order_rng.shuffle(order);
        for (int64_t start = 0; start < n_train; start += cfg.batch_size) {
            const int64_t stop = std::min<int64_t>(n_train, start + cfg.batch_size);
            const double inv_bsz = 1.0 / static_cast<double>(stop - start);
            std::fill(gw.begin(), gw.end(), 0.0);
            std::fill(gb.begin(), gb.end(), 0.0);
            for (int64_t r = start; r < stop; ++r) {
                const uint64_t row = order[static_cast<size_t>(r)];
                standardized(row, x);
                for (int j = 0; j < classes; ++j) {
                    double acc = b[j];
                    for (int d = 0; d < dim; ++d) acc += x[d] * w[static_cast<size_t>(d) * classes + j];
                    logits[j] = acc;
                }
                probe_detail::softmax_row(logits.data(), classes);
                logits[labels[row]] -= 1.0;  // p - onehot
                for (int j = 0; j < classes; ++j) {
                    const double g = logits[j] * inv_bsz;
                    gb[j] += g;
                    for (int d = 0; d < dim; ++d) gw[static_cast<size_t>(d) * classes + j] += g * x[d];
                }
            }
            opt_w.step(w, gw);
            opt_b.step(b, gb);
        }
    }

    ProbeResult res;
    res.classes = classes;
    res.train_count = n_train;
    res.eval_count = n_eval;
    auto evaluate = [&](int64_t lo, int64_t hi, double* loss_out) {
        int64_t hits = 0;
        double loss = 0.0;
        for (int64_t r = lo; r < hi; ++r) {
            const uint64_t row = perm[static_cast<size_t>(r)];
            standardized(row, x);
            for (int j = 0; j < classes; ++j) {
                double acc = b[j];
                for (int d = 0; d < dim; ++d) acc += x[d] * w[static_cast<size_t>(d) * classes + j];
                logits[j] = acc;
            }
            probe_detail::softmax_row(logits.data(), classes);
            if (probe_detail::argmax_row(logits.data(), classes) == labels[row]) ++hits;
            loss -= std::log(std::max(logits[labels[row]], 1e-300));
        }
        if (loss_out) *loss_out = loss / static_cast<double>(hi - lo);
        return static_cast<double>(hits) / static_cast<double>(hi - lo);
    };
    res.train_accuracy = evaluate(0, n_train, &res.final_train_loss);
    res.eval_accuracy = evaluate(n_train, count, nullptr);
    return res;
}

// Convenience wrapper: features from the encoder, then the probe.
inline ProbeResult probe_encoder(const ImageDataset& data, const std::vector<uint16_t>& labels,
                                 const EncoderParams& encoder, const ViTConfig& cfg,
                                 const ProbeConfig& pcfg) {
    const std::vector<double> feats = probe_features(data, encoder, cfg);
    return linear_probe(feats, labels, static_cast<int64_t>(data.count()), cfg.embed_dim, pcfg);
}

}  // namespace cmtmae
