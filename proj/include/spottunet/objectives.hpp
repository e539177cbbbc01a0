#pragma once

#include "spottunet/routing.hpp"

namespace spottunet::objectives {

struct ObjectiveConfig {
    double lambda = 0.0;  // balance of the frozen-share regularizer
    double eps = 1e-6;    // probability clamp for the BCE

    void validate() const {
        if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
        if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("eps must be in (0, 0.5)");
    }
};

/// Mean binary cross-entropy between pre-sigmoid logits and a binary mask,
/// probabilities clamped to [eps, 1-eps]. Bounded by -ln(eps).
template <typename T>
double bce_loss(const Tensor<T>& pred_logits, const Tensor<T>& target_mask, double eps = 1e-6) {
    if (!pred_logits.same_shape(target_mask))
        throw DimensionError("bce_loss: prediction/target shape mismatch " +
                             shape_to_string(pred_logits.shape()) + " vs " +
                             shape_to_string(target_mask.shape()));
    const std::int64_t n = pred_logits.numel();
    if (n == 0) throw DimensionError("bce_loss: empty tensors");
    double acc = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        double p = 1.0 / (1.0 + std::exp(-static_cast<double>(pred_logits[i])));
        const double t = static_cast<double>(target_mask[i]);
        acc += -(t * std::log(std::max(p, eps)) + (1.0 - t) * std::log(std::max(1.0 - p, eps)));
    }
    return acc / static_cast<double>(n);
}

/// lambda * sum_l (1 - I_l(x)) on the hard indicator values.
inline double policy_regularizer(const routing::IndicatorVector& indicators, double lambda) {
    if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
    double s = 0.0;
    for (int h : indicators.hard) s += 1.0 - static_cast<double>(h);
    return lambda * s;
}

/// Batch form: averaged over the per-sample indicator vectors.
inline double policy_regularizer(const std::vector<routing::IndicatorVector>& batch,
                                 double lambda) {
    if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
    if (batch.empty()) return 0.0;
    double s = 0.0;
    for (const auto& iv : batch) s += policy_regularizer(iv, lambda);
    return s / static_cast<double>(batch.size());
}

inline double total_loss(double segm, double reg) {
    if (!std::isfinite(segm) || !std::isfinite(reg))
        throw std::invalid_argument("total_loss: non-finite term");
    return segm + reg;
}

/// Tape-side combined objective for one routed training step:
/// L = BCE(logits, target) + lambda * mean_b sum_l (1 - I_l(x)),
/// the regularizer differentiated through the same straight-through weights
/// that routed the blocks.
template <typename T>
ad::Var<T> total_loss_on_tape(ad::Tape<T>& tape, ad::Var<T> seg_logits, ad::Var<T> targets,
                              ad::Var<T> route_weights, const ObjectiveConfig& cfg) {
    cfg.validate();
    auto segm = ad::bce_with_logits(seg_logits, targets, static_cast<T>(cfg.eps));
    if (cfg.lambda == 0.0) return segm;
    auto reg = ad::frozen_share_penalty(route_weights, static_cast<T>(cfg.lambda));
    return ad::add(segm, reg);
}

}  // namespace spottunet::objectives
