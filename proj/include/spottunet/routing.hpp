#pragma once

#include "spottunet/backbone.hpp"

namespace spottunet::routing {

using backbone::NetVars;
using backbone::ParamStore;
using backbone::SegmentationNetwork;

struct GumbelConfig {
    double tau = 0.1;
    bool hard = true;  // straight-through on/off; off routes the soft relaxation
    std::uint64_t seed = 0;

    void validate() const {
        if (!(tau > 0.0)) throw ConfigError("gumbel temperature must be positive");
    }
};

/// Per-input routing decisions. hard[l] = I_l(x), 1 when the frozen block is
/// chosen; soft[l] is the relaxed class-0 probability carrying the gradient.
struct IndicatorVector {
    std::vector<int> hard;
    std::vector<double> soft;

    int size() const { return static_cast<int>(hard.size()); }
};

struct PolicyConfig {
    int num_blocks = 0;
    int downsample_factor = 2;  // parameter-free average-pool ahead of the stem
    int in_channels = 1;
    std::vector<int> stage_widths = {8, 16, 32, 64};

    void validate() const {
        if (num_blocks < 1) throw ConfigError("policy needs at least one routable block");
        if (downsample_factor < 1 || (downsample_factor & (downsample_factor - 1)))
            throw ConfigError("downsample_factor must be a power of two");
        if (stage_widths.empty()) throw ConfigError("policy needs at least one stage");
    }
};

template <typename T>
struct PolicyNetwork {
    PolicyConfig config;
    ParamStore<T> params;
};

template <typename T = float>
PolicyNetwork<T> build_policy(const PolicyConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    PolicyNetwork<T> p;
    p.config = cfg;
    Rng rng(derive_seed(seed, "policy_init"));
    auto conv = [&](const std::string& name, int k, int in, int out) {
        Tensor<T> w({k, k, in, out});
        backbone::detail_net::init_conv_weight(w, in * k * k, rng);
        p.params.add(name + ".w", std::move(w));
        p.params.add(name + ".b", Tensor<T>({out}));
    };
    auto norm = [&](const std::string& name, int c) {
        p.params.add(name + ".g", Tensor<T>({c}, T(1)));
        p.params.add(name + ".b", Tensor<T>({c}));
    };
    conv("stem", 3, cfg.in_channels, cfg.stage_widths[0]);
    for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
        const std::string pre = "stage" + std::to_string(s);
        const int w = cfg.stage_widths[s];
        const int w_next = s + 1 < cfg.stage_widths.size() ? cfg.stage_widths[s + 1] : w;
        norm(pre + ".res.norm1", w);
        conv(pre + ".res.conv1", 3, w, w);
        norm(pre + ".res.norm2", w);
        conv(pre + ".res.conv2", 3, w, w);
        norm(pre + ".down.norm", w);
        conv(pre + ".down", 3, w, w_next);
    }
    // zero-initialized head: every pair starts at (0,0), softmax (0.5, 0.5)
    p.params.add("head.w", Tensor<T>({2 * cfg.num_blocks, cfg.stage_widths.back()}));
    p.params.add("head.b", Tensor<T>({2 * cfg.num_blocks}));
    return p;
}

template <typename T>
struct PolicyVars {
    std::vector<ad::Var<T>> vars;

    ad::Var<T> at(const PolicyNetwork<T>& p, const std::string& name) const {
        int i = p.params.index_of(name);
        if (i < 0) throw std::out_of_range("no policy parameter named " + name);
        return vars[static_cast<std::size_t>(i)];
    }
};

template <typename T>
PolicyVars<T> bind_policy(ad::Tape<T>& tape, const PolicyNetwork<T>& p, bool with_grads) {
    PolicyVars<T> pv;
    pv.vars.reserve(p.params.size());
    for (std::size_t i = 0; i < p.params.size(); ++i)
        pv.vars.push_back(tape.leaf(p.params.tensor(i), with_grads));
    return pv;
}

/// Policy logits for an NHWC input: (B, 2N), pairs interleaved as
/// (class0, class1) per block.
template <typename T>
ad::Var<T> policy_apply(ad::Tape<T>& tape, const PolicyNetwork<T>& p, const PolicyVars<T>& pv,
                        ad::Var<T> x) {
    const T eps = static_cast<T>(backbone::detail_net::kNormEps);
    auto P = [&](const std::string& n) { return pv.at(p, n); };
    ad::Var<T> cur = x;
    for (int f = p.config.downsample_factor; f > 1; f /= 2) cur = ad::avg_pool2x2(cur);
    cur = ad::conv3x3(cur, P("stem.w"), P("stem.b"));
    for (std::size_t s = 0; s < p.config.stage_widths.size(); ++s) {
        const std::string pre = "stage" + std::to_string(s);
        auto h = ad::conv3x3(
            ad::relu(ad::instance_norm(cur, P(pre + ".res.norm1.g"), P(pre + ".res.norm1.b"), eps)),
            P(pre + ".res.conv1.w"), P(pre + ".res.conv1.b"));
        h = ad::conv3x3(
            ad::relu(ad::instance_norm(h, P(pre + ".res.norm2.g"), P(pre + ".res.norm2.b"), eps)),
            P(pre + ".res.conv2.w"), P(pre + ".res.conv2.b"));
        cur = ad::add(cur, h);
        cur = ad::conv3x3(
            ad::relu(ad::instance_norm(cur, P(pre + ".down.norm.g"), P(pre + ".down.norm.b"), eps)),
            P(pre + ".down.w"), P(pre + ".down.b"), 2);
    }
    return ad::linear(ad::global_avg_pool(cur), P("head.w"), P("head.b"));
}

/// Public form: logits (batch, N, 2) for an input in the (B,C,H,W) convention.
template <typename T>
Tensor<T> policy_forward(const PolicyNetwork<T>& p, const Tensor<T>& x) {
    if (x.ndim() != 4 || x.dim(1) != p.config.in_channels)
        throw DimensionError("policy_forward: want (B,C,H,W) with C=" +
                             std::to_string(p.config.in_channels));
    ad::Tape<T> tape;
    auto pv = bind_policy(tape, p, false);
    auto out = policy_apply(tape, p, pv, tape.constant(nchw_to_nhwc(x)));
    return out.value().reshaped({x.dim(0), p.config.num_blocks, 2});
}

/// One Gumbel-Softmax draw for a single logit pair. soft is the relaxed
/// class-0 probability, hard its 0.5 threshold (ties resolve to the frozen
/// path, hard = 1).
struct GumbelSample {
    int hard = 0;
    double soft = 0.0;
};

inline GumbelSample gumbel_softmax_sample(double logit0, double logit1, const GumbelConfig& cfg,
                                          Rng& rng) {
    cfg.validate();
    const double g0 = rng.gumbel();
    const double g1 = rng.gumbel();
    const double d = ((logit0 + g0) - (logit1 + g1)) / cfg.tau;
    GumbelSample s;
    s.soft = 1.0 / (1.0 + std::exp(-d));
    s.hard = s.soft >= 0.5 ? 1 : 0;
    return s;
}

/// Frozen pretrained copy, trainable copy, and the policy that routes
/// between them.
template <typename T>
struct DualPathModel {
    SegmentationNetwork<T> frozen;
    SegmentationNetwork<T> tuned;
    PolicyNetwork<T> policy;
    GumbelConfig gumbel;

    void validate() const {
        gumbel.validate();
        if (frozen.config.num_routable_blocks() != tuned.config.num_routable_blocks())
            throw ConfigError("frozen/tuned copies disagree on block count");
        if (policy.config.num_blocks != frozen.config.num_routable_blocks())
            throw ConfigError("policy block count does not match the network");
        for (auto t : frozen.trainable)
            if (t) throw ConfigError("frozen copy has trainable parameters");
    }
};

/// Builds the dual-path model from a pretrained network: frozen + trainable
/// duplicates plus a fresh policy.
template <typename T>
DualPathModel<T> make_dual_path(const SegmentationNetwork<T>& pretrained,
                                const GumbelConfig& gumbel, std::uint64_t policy_seed) {
    DualPathModel<T> m;
    auto [frozen, tuned] = backbone::clone_for_finetuning(pretrained);
    m.frozen = std::move(frozen);
    m.tuned = std::move(tuned);
    PolicyConfig pc;
    pc.num_blocks = pretrained.config.num_routable_blocks();
    pc.in_channels = pretrained.config.input_channels;
    m.policy = build_policy<T>(pc, policy_seed);
    m.gumbel = gumbel;
    m.validate();
    return m;
}

enum class RouteMode { train_sample, eval_argmax, forced };

/// Indicator-weighted composition of the two copies. route_weights is (B,N);
/// entry (b,l) multiplies the frozen block's output, its complement the tuned
/// block's output. Skips route the combined map.
template <typename T>
ad::Var<T> routed_compose(ad::Tape<T>& tape, const DualPathModel<T>& m, const NetVars<T>& fv,
                          const NetVars<T>& tv, ad::Var<T> x, ad::Var<T> route_weights) {
    return backbone::compose_blocks(
        m.frozen.config, x, [&](int bi, ad::Var<T> cur, std::optional<ad::Var<T>> skip) {
            auto f = backbone::block_apply(tape, m.frozen, fv, bi, cur, skip);
            auto t = backbone::block_apply(tape, m.tuned, tv, bi, cur, skip);
            auto wl = ad::select_column(route_weights, bi);
            return ad::add(ad::scale_per_sample(f, wl),
                           ad::scale_per_sample(t, ad::one_minus(wl)));
        });
}

template <typename T>
struct RoutedTrain {
    ad::Var<T> logits;         // NHWC (B,H,W,C)
    ad::Var<T> route_weights;  // (B,N), straight-through or soft
    std::vector<IndicatorVector> indicators;
};

/// Training-mode forward on an existing tape: fresh Gumbel noise per sample
/// per block, straight-through (or soft, per config) routing weights.
template <typename T>
RoutedTrain<T> routed_train(ad::Tape<T>& tape, const DualPathModel<T>& m, const NetVars<T>& fv,
                            const NetVars<T>& tv, const PolicyVars<T>& pv, ad::Var<T> x,
                            Rng& rng) {
    m.gumbel.validate();
    const int bsz = tape.value(x).dim(0);
    const int n = m.policy.config.num_blocks;
    auto logits = policy_apply(tape, m.policy, pv, x);
    Tensor<T> noise({bsz, 2 * n});
    for (std::int64_t i = 0; i < noise.numel(); ++i) noise[i] = static_cast<T>(rng.gumbel());
    auto soft = ad::gumbel_pair_soft(logits, noise, static_cast<T>(m.gumbel.tau));

    const Tensor<T>& sv = soft.value();
    Tensor<T> hard(sv.shape());
    std::vector<IndicatorVector> ind(static_cast<std::size_t>(bsz));
    for (int bi = 0; bi < bsz; ++bi) {
        ind[static_cast<std::size_t>(bi)].hard.resize(static_cast<std::size_t>(n));
        ind[static_cast<std::size_t>(bi)].soft.resize(static_cast<std::size_t>(n));
        for (int l = 0; l < n; ++l) {
            const T s = sv.at2(bi, l);
            const int h = s >= T(0.5) ? 1 : 0;
            hard.at2(bi, l) = static_cast<T>(h);
            ind[static_cast<std::size_t>(bi)].hard[static_cast<std::size_t>(l)] = h;
            ind[static_cast<std::size_t>(bi)].soft[static_cast<std::size_t>(l)] =
                static_cast<double>(s);
        }
    }
    RoutedTrain<T> out;
    out.route_weights =
        m.gumbel.hard ? ad::straight_through(soft, std::move(hard)) : soft;
    out.indicators = std::move(ind);
    out.logits = routed_compose(tape, m, fv, tv, x, out.route_weights);
    return out;
}

struct ForcedRoute {
    IndicatorVector indicators;
};

template <typename T>
struct RoutedResult {
    Tensor<T> logits;  // public (B,C,H,W) convention
    std::vector<IndicatorVector> indicators;
};

/// Inference-mode routed forward. eval_argmax thresholds the raw policy
/// logits (class-0 softmax > 0.5, ties to frozen) with no noise; forced
/// applies one indicator vector to every sample; train_sample draws fresh
/// Gumbel noise (rng required).
template <typename T>
RoutedResult<T> routed_forward(const DualPathModel<T>& m, const Tensor<T>& x, RouteMode mode,
                               const ForcedRoute* forced = nullptr, Rng* rng = nullptr) {
    m.validate();
    backbone::check_input(m.frozen.config, x);
    const int bsz = x.dim(0);
    const int n = m.policy.config.num_blocks;

    ad::Tape<T> tape;
    auto fv = backbone::bind(tape, m.frozen, false);
    auto tv = backbone::bind(tape, m.tuned, false);
    auto xin = tape.constant(nchw_to_nhwc(x));

    Tensor<T> weights({bsz, n});
    std::vector<IndicatorVector> ind(static_cast<std::size_t>(bsz));
    switch (mode) {
        case RouteMode::forced: {
            if (forced == nullptr) throw ConfigError("forced mode needs an indicator vector");
            if (forced->indicators.size() != n)
                throw DimensionError("forced indicator vector has length " +
                                     std::to_string(forced->indicators.size()) + ", network has " +
                                     std::to_string(n) + " blocks");
            for (int bi = 0; bi < bsz; ++bi) {
                ind[static_cast<std::size_t>(bi)] = forced->indicators;
                for (int l = 0; l < n; ++l)
                    weights.at2(bi, l) = static_cast<T>(
                        forced->indicators.hard[static_cast<std::size_t>(l)]);
            }
            break;
        }
        case RouteMode::eval_argmax: {
            auto pv = bind_policy(tape, m.policy, false);
            Tensor<T> logits = policy_apply(tape, m.policy, pv, xin).value();
            for (int bi = 0; bi < bsz; ++bi) {
                auto& iv = ind[static_cast<std::size_t>(bi)];
                iv.hard.resize(static_cast<std::size_t>(n));
                iv.soft.resize(static_cast<std::size_t>(n));
                for (int l = 0; l < n; ++l) {
                    const double l0 = logits.at2(bi, 2 * l);
                    const double l1 = logits.at2(bi, 2 * l + 1);
                    const double p0 = 1.0 / (1.0 + std::exp(l1 - l0));
                    const int h = p0 >= 0.5 ? 1 : 0;
                    iv.hard[static_cast<std::size_t>(l)] = h;
                    iv.soft[static_cast<std::size_t>(l)] = p0;
                    weights.at2(bi, l) = static_cast<T>(h);
                }
            }
            break;
        }
        case RouteMode::train_sample: {
            if (rng == nullptr) throw ConfigError("train_sample mode needs an rng");
            auto pv = bind_policy(tape, m.policy, false);
            Tensor<T> logits = policy_apply(tape, m.policy, pv, xin).value();
            for (int bi = 0; bi < bsz; ++bi) {
                auto& iv = ind[static_cast<std::size_t>(bi)];
                iv.hard.resize(static_cast<std::size_t>(n));
                iv.soft.resize(static_cast<std::size_t>(n));
                for (int l = 0; l < n; ++l) {
                    auto s = gumbel_softmax_sample(logits.at2(bi, 2 * l), logits.at2(bi, 2 * l + 1),
                                                   m.gumbel, *rng);
                    iv.hard[static_cast<std::size_t>(l)] = s.hard;
                    iv.soft[static_cast<std::size_t>(l)] = s.soft;
                    weights.at2(bi, l) =
                        m.gumbel.hard ? static_cast<T>(s.hard) : static_cast<T>(s.soft);
                }
            }
            break;
        }
    }

    auto wvar = tape.constant(std::move(weights));
    auto out = routed_compose(tape, m, fv, tv, xin, wvar);
    RoutedResult<T> res;
    res.logits = nhwc_to_nchw(out.value());
    res.indicators = std::move(ind);
    return res;
}

/// Named references to every parameter the optimizer may update: the tuned
/// copy and the policy network. The frozen copy is excluded by construction.
template <typename T>
struct TrainableParam {
    std::string name;
    Tensor<T>* tensor;
};

template <typename T>
std::vector<TrainableParam<T>> trainable_parameters(DualPathModel<T>& m) {
    std::vector<TrainableParam<T>> out;
    for (std::size_t i = 0; i < m.tuned.params.size(); ++i)
        out.push_back({"tuned." + m.tuned.params.name(i), &m.tuned.params.tensor(i)});
    for (std::size_t i = 0; i < m.policy.params.size(); ++i)
        out.push_back({"policy." + m.policy.params.name(i), &m.policy.params.tensor(i)});
    return out;
}

}  // namespace spottunet::routing
