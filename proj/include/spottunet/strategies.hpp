#pragma once

#include <cstdio>
#include <optional>

#include "spottunet/checkpoint.hpp"
#include "spottunet/datagen.hpp"
#include "spottunet/objectives.hpp"

namespace spottunet::strategies {

using datagen::Dataset;
using datagen::Sample;
using routing::DualPathModel;
using routing::GumbelConfig;

struct TrainSchedule {
    int epochs = 0;
    int iters_per_epoch = 0;
    double lr_initial = 0.0;
    double lr_reduced = 0.0;
    int reduce_at_epoch = 0;
    int batch_size = 0;

    void validate() const {
        if (epochs < 0 || iters_per_epoch <= 0 || batch_size <= 0)
            throw ConfigError("schedule counts must be positive");
        if (epochs > 0) {
            if (!(reduce_at_epoch < epochs)) throw ConfigError("reduce_at_epoch must precede epochs");
            if (!(lr_reduced < lr_initial)) throw ConfigError("lr_reduced must be below lr_initial");
            if (!(lr_initial > 0.0)) throw ConfigError("lr_initial must be positive");
        }
    }

    double lr_at(int epoch) const { return epoch < reduce_at_epoch ? lr_initial : lr_reduced; }
};

// Schedule profiles. "paper" keeps the reference protocol; "desk" is the
// CPU-sized default with the same shape (lr values, relative drop point).
inline TrainSchedule paper_pretrain() { return {100, 100, 1e-2, 1e-3, 80, 16}; }
inline TrainSchedule paper_finetune() { return {60, 100, 1e-3, 1e-4, 45, 16}; }
inline TrainSchedule desk_pretrain() { return {20, 25, 1e-2, 1e-3, 16, 8}; }
inline TrainSchedule desk_finetune() { return {12, 6, 1e-3, 1e-4, 9, 8}; }

inline TrainSchedule pretrain_profile(const std::string& name) {
    if (name == "paper") return paper_pretrain();
    if (name == "desk") return desk_pretrain();
    throw ConfigError("unknown profile: " + name);
}

inline TrainSchedule finetune_profile(const std::string& name) {
    if (name == "paper") return paper_finetune();
    if (name == "desk") return desk_finetune();
    throw ConfigError("unknown profile: " + name);
}

enum class StrategyKind {
    baseline_pretrain,
    oracle_cv,
    transfer_only,
    finetune_all,
    finetune_first_k,
    histogram_match_transfer,
    spottunet,
};

inline const char* to_string(StrategyKind k) {
    switch (k) {
        case StrategyKind::baseline_pretrain: return "baseline_pretrain";
        case StrategyKind::oracle_cv: return "oracle_cv";
        case StrategyKind::transfer_only: return "transfer_only";
        case StrategyKind::finetune_all: return "finetune_all";
        case StrategyKind::finetune_first_k: return "finetune_first_k";
        case StrategyKind::histogram_match_transfer: return "histogram_match_transfer";
        case StrategyKind::spottunet: return "spottunet";
    }
    return "?";
}

inline StrategyKind strategy_kind_from_string(const std::string& s) {
    for (StrategyKind k :
         {StrategyKind::baseline_pretrain, StrategyKind::oracle_cv, StrategyKind::transfer_only,
          StrategyKind::finetune_all, StrategyKind::finetune_first_k,
          StrategyKind::histogram_match_transfer, StrategyKind::spottunet})
        if (s == to_string(k)) return k;
    throw ConfigError("unknown strategy: " + s);
}

struct StrategySpec {
    StrategyKind kind = StrategyKind::transfer_only;
    int first_k = 3;
    double lambda = 0.0;
    double tau = 0.1;
    TrainSchedule schedule;
    std::optional<int> scarcity;

    void validate(int num_blocks) const {
        if (kind == StrategyKind::finetune_first_k && (first_k < 0 || first_k > num_blocks))
            throw ConfigError("first_k out of range: " + std::to_string(first_k));
        if (kind == StrategyKind::spottunet) {
            if (!(tau > 0.0)) throw ConfigError("tau must be positive");
            if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
        }
    }
};

/// Directory-safe strategy identifier carrying its hyperparameters.
inline std::string strategy_name(const StrategySpec& s) {
    char buf[96];
    switch (s.kind) {
        case StrategyKind::finetune_first_k:
            std::snprintf(buf, sizeof buf, "finetune_first_k%d", s.first_k);
            return buf;
        case StrategyKind::spottunet:
            std::snprintf(buf, sizeof buf, "spottunet_lam%g_tau%g", s.lambda, s.tau);
            return buf;
        default:
            return to_string(s.kind);
    }
}

inline nlohmann::json schedule_to_json(const TrainSchedule& s) {
    return {{"epochs", s.epochs},
            {"iters_per_epoch", s.iters_per_epoch},
            {"lr_initial", s.lr_initial},
            {"lr_reduced", s.lr_reduced},
            {"reduce_at_epoch", s.reduce_at_epoch},
            {"batch_size", s.batch_size}};
}

inline TrainSchedule schedule_from_json(const nlohmann::json& j) {
    TrainSchedule s;
    s.epochs = j.at("epochs").get<int>();
    s.iters_per_epoch = j.at("iters_per_epoch").get<int>();
    s.lr_initial = j.at("lr_initial").get<double>();
    s.lr_reduced = j.at("lr_reduced").get<double>();
    s.reduce_at_epoch = j.at("reduce_at_epoch").get<int>();
    s.batch_size = j.at("batch_size").get<int>();
    return s;
}

inline nlohmann::json strategy_to_json(const StrategySpec& s) {
    nlohmann::json j{{"kind", to_string(s.kind)},
                     {"first_k", s.first_k},
                     {"lambda", s.lambda},
                     {"tau", s.tau},
                     {"schedule", schedule_to_json(s.schedule)}};
    if (s.scarcity) j["scarcity"] = *s.scarcity;
    return j;
}

inline StrategySpec strategy_from_json(const nlohmann::json& j) {
    StrategySpec s;
    s.kind = strategy_kind_from_string(j.at("kind").get<std::string>());
    s.first_k = j.value("first_k", 3);
    s.lambda = j.value("lambda", 0.0);
    s.tau = j.value("tau", 0.1);
    if (j.contains("schedule")) s.schedule = schedule_from_json(j.at("schedule"));
    if (j.contains("scarcity")) s.scarcity = j.at("scarcity").get<int>();
    return s;
}

// ---------------------------------------------------------------------------
// Training engine
// ---------------------------------------------------------------------------

/// Plain SGD with momentum (velocity per parameter slot).
class Sgd {
public:
    explicit Sgd(double momentum = 0.9) : momentum_(momentum) {}

    void step(std::vector<Tensor<float>*> params, std::vector<const Tensor<float>*> grads,
              double lr) {
        if (velocity_.empty()) {
            velocity_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i)
                velocity_[i] = Tensor<float>(params[i]->shape());
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (grads[i] == nullptr || grads[i]->empty()) continue;
            Tensor<float>& v = velocity_[i];
            Tensor<float>& p = *params[i];
            const Tensor<float>& g = *grads[i];
            const float m = static_cast<float>(momentum_);
            const float l = static_cast<float>(lr);
            for (std::int64_t j = 0; j < p.numel(); ++j) {
                v[j] = m * v[j] + g[j];
                p[j] -= l * v[j];
            }
        }
    }

private:
    double momentum_;
    std::vector<Tensor<float>> velocity_;
};

/// Cycles through the sample list in seeded shuffled order, reshuffling on
/// every full pass; iteration counts stay fixed regardless of subset size.
class BatchStream {
public:
    BatchStream(int count, std::uint64_t seed) : rng_(seed) {
        order_.resize(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) order_[static_cast<std::size_t>(i)] = i;
        rng_.shuffle(order_);
    }

    int next() {
        if (pos_ >= order_.size()) {
            rng_.shuffle(order_);
            pos_ = 0;
        }
        return order_[pos_++];
    }

private:
    Rng rng_;
    std::vector<int> order_;
    std::size_t pos_ = 0;
};

inline void fill_batch(const std::vector<const Sample*>& pool, BatchStream& stream, int batch,
                       Tensor<float>& x, Tensor<float>& y) {
    const int h = pool[0]->image.dim(0), w = pool[0]->image.dim(1);
    x = Tensor<float>({batch, h, w, 1});
    y = Tensor<float>({batch, h, w, 1});
    for (int b = 0; b < batch; ++b) {
        const Sample& s = *pool[static_cast<std::size_t>(stream.next())];
        std::memcpy(x.data() + static_cast<std::size_t>(b) * h * w, s.image.data(),
                    sizeof(float) * static_cast<std::size_t>(h) * w);
        for (std::int64_t p = 0; p < static_cast<std::int64_t>(h) * w; ++p)
            y[static_cast<std::size_t>(b) * h * w + p] = static_cast<float>(s.mask.values[p]);
    }
}

struct EpochLog {
    int epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double val_sdice = 0.0;
};

struct TrainOutcome {
    std::vector<EpochLog> log;
    bool diverged = false;
};

inline void write_log_csv(const std::filesystem::path& p, const std::vector<EpochLog>& log) {
    std::ofstream f(p);
    f << "epoch,lr,train_loss,val_sdice\n";
    char buf[160];
    for (const auto& row : log) {
        std::snprintf(buf, sizeof buf, "%d,%.6g,%.6f,%.6f\n", row.epoch, row.lr, row.train_loss,
                      row.val_sdice);
        f << buf;
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline metrics::BinaryMask logits_to_mask(const Tensor<float>& logits, int b, int h, int w,
                                          const std::vector<double>& spacing) {
    std::vector<std::uint8_t> v(static_cast<std::size_t>(h) * w);
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(h) * w; ++p)
        v[static_cast<std::size_t>(p)] =
            logits[static_cast<std::size_t>(b) * h * w + p] > 0.0f ? 1 : 0;
    return metrics::BinaryMask{{h, w}, spacing, std::move(v)};
}

/// Per-image surface Dice of thresholded predictions against ground truth.
template <typename Forward>
std::vector<double> evaluate_images(const std::vector<const Sample*>& samples, double tol_mm,
                                    Forward&& forward_batch) {
    if (samples.empty()) throw ConfigError("evaluation needs a nonempty sample set");
    const int h = samples[0]->image.dim(0), w = samples[0]->image.dim(1);
    std::vector<double> scores;
    scores.reserve(samples.size());
    const int chunk = 8;
    for (std::size_t s0 = 0; s0 < samples.size(); s0 += chunk) {
        const int b = static_cast<int>(std::min<std::size_t>(chunk, samples.size() - s0));
        Tensor<float> x({b, h, w, 1});
        for (int bi = 0; bi < b; ++bi)
            std::memcpy(x.data() + static_cast<std::size_t>(bi) * h * w,
                        samples[s0 + static_cast<std::size_t>(bi)]->image.data(),
                        sizeof(float) * static_cast<std::size_t>(h) * w);
        Tensor<float> logits = forward_batch(x);
        for (int bi = 0; bi < b; ++bi) {
            const Sample& s = *samples[s0 + static_cast<std::size_t>(bi)];
            auto pred = logits_to_mask(logits, bi, h, w, s.mask.spacing);
            scores.push_back(metrics::surface_dice(pred, s.mask, tol_mm).score);
        }
    }
    return scores;
}

inline std::vector<double> evaluate_network(const backbone::SegmentationNetwork<float>& net,
                                            const std::vector<const Sample*>& samples,
                                            double tol_mm = 1.0) {
    return evaluate_images(samples, tol_mm, [&](const Tensor<float>& x) {
        ad::Tape<float> tape;
        auto nv = backbone::bind(tape, net, false);
        return backbone::network_apply(tape, net, nv, tape.constant(x)).value();
    });
}

inline std::vector<double> evaluate_dual_argmax(const DualPathModel<float>& m,
                                                const std::vector<const Sample*>& samples,
                                                double tol_mm = 1.0) {
    return evaluate_images(samples, tol_mm, [&](const Tensor<float>& x) {
        const int b = x.dim(0), h = x.dim(1), w = x.dim(2);
        auto res = routing::routed_forward(m, x.reshaped({b, 1, h, w}),
                                           routing::RouteMode::eval_argmax);
        return res.logits.reshaped({b, h, w, 1});
    });
}

/// Evaluation-ready histogram-matching pipeline: every target image is
/// matched to the source reference before inference; no training involved.
inline std::vector<double> evaluate_histogram_transfer(
    const backbone::SegmentationNetwork<float>& net, const Tensor<float>& source_reference,
    const std::vector<const Sample*>& samples, double tol_mm = 1.0) {
    if (samples.empty()) throw ConfigError("evaluation needs a nonempty sample set");
    std::vector<Sample> matched(samples.size());
    std::vector<const Sample*> ptrs(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        matched[i] = *samples[i];
        matched[i].image = datagen::histogram_match(samples[i]->image, source_reference);
        ptrs[i] = &matched[i];
    }
    return evaluate_network(net, ptrs, tol_mm);
}

inline double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// ---------------------------------------------------------------------------
// Training procedures
// ---------------------------------------------------------------------------

/// BCE training of the plain network under a schedule. Only parameters marked
/// trainable receive gradients and updates.
inline TrainOutcome train_network(backbone::SegmentationNetwork<float>& net,
                                  const std::vector<const Sample*>& train,
                                  const std::vector<const Sample*>& val,
                                  const TrainSchedule& sched, std::uint64_t seed,
                                  double bce_eps = 1e-6) {
    sched.validate();
    if (train.empty()) throw ConfigError("training needs a nonempty sample set");
    TrainOutcome out;
    Sgd sgd;
    BatchStream stream(static_cast<int>(train.size()), derive_seed(seed, "batches"));
    Tensor<float> x, y;
    for (int epoch = 0; epoch < sched.epochs; ++epoch) {
        const double lr = sched.lr_at(epoch);
        double loss_acc = 0.0;
        for (int it = 0; it < sched.iters_per_epoch; ++it) {
            fill_batch(train, stream, sched.batch_size, x, y);
            ad::Tape<float> tape;
            auto nv = backbone::bind(tape, net, true);
            auto logits = backbone::network_apply(tape, net, nv, tape.constant(x));
            auto loss = ad::bce_with_logits(logits, tape.constant(y), static_cast<float>(bce_eps));
            const double lv = loss.value()[0];
            if (!std::isfinite(lv)) {
                out.diverged = true;
                return out;
            }
            loss_acc += lv;
            tape.backward(loss);
            std::vector<Tensor<float>*> params(net.params.size());
            std::vector<const Tensor<float>*> grads(net.params.size());
            for (std::size_t i = 0; i < net.params.size(); ++i) {
                params[i] = &net.params.tensor(i);
                grads[i] = &tape.grad_of(nv.vars[i]);
            }
            sgd.step(params, grads, lr);
        }
        EpochLog row;
        row.epoch = epoch;
        row.lr = lr;
        row.train_loss = loss_acc / sched.iters_per_epoch;
        row.val_sdice = val.empty() ? 0.0 : mean(evaluate_network(net, val));
        out.log.push_back(row);
    }
    return out;
}

/// Baseline: a fresh network trained on the source domain's train split.
inline std::pair<backbone::SegmentationNetwork<float>, TrainOutcome> pretrain_baseline(
    const Dataset& ds, const std::string& domain, const TrainSchedule& sched,
    std::uint64_t seed) {
    auto net = backbone::build_network<float>(backbone::NetworkConfig::default_unet(),
                                              derive_seed(seed, "init"));
    auto outcome =
        train_network(net, ds.train_split(domain), ds.val_split(domain), sched, seed);
    return {std::move(net), std::move(outcome)};
}

/// Fine-tuning with an explicit trainable mask: all parameters or the first k
/// blocks in enumeration order.
inline std::pair<backbone::SegmentationNetwork<float>, TrainOutcome> finetune(
    const backbone::SegmentationNetwork<float>& pretrained, const StrategySpec& spec,
    const std::vector<const Sample*>& target_subset, const std::vector<const Sample*>& val,
    std::uint64_t seed) {
    spec.validate(pretrained.config.num_routable_blocks());
    auto net = pretrained;
    switch (spec.kind) {
        case StrategyKind::finetune_all:
            net.set_all_trainable(true);
            break;
        case StrategyKind::finetune_first_k:
            net.set_first_k_trainable(spec.first_k);
            break;
        default:
            throw ConfigError("finetune expects finetune_all or finetune_first_k");
    }
    auto outcome = train_network(net, target_subset, val, spec.schedule, seed);
    return {std::move(net), std::move(outcome)};
}

/// Adaptive fine-tuning: duplicates the pretrained network, trains the tuned
/// copy and a fresh policy against BCE + the frozen-share regularizer with
/// sampled straight-through routing. The frozen copy stays bit-identical.
inline std::pair<DualPathModel<float>, TrainOutcome> finetune_spottunet(
    const backbone::SegmentationNetwork<float>& pretrained, double lambda, double tau,
    const TrainSchedule& sched, const std::vector<const Sample*>& target_subset,
    const std::vector<const Sample*>& val, std::uint64_t seed) {
    sched.validate();
    if (target_subset.empty()) throw ConfigError("training needs a nonempty sample set");
    GumbelConfig g;
    g.tau = tau;
    g.hard = true;
    g.seed = derive_seed(seed, "gumbel");
    auto model = routing::make_dual_path(pretrained, g, derive_seed(seed, "policy"));
    objectives::ObjectiveConfig oc;
    oc.lambda = lambda;

    TrainOutcome out;
    Sgd sgd;
    BatchStream stream(static_cast<int>(target_subset.size()), derive_seed(seed, "batches"));
    Rng noise(derive_seed(seed, "gumbel_noise"));
    Tensor<float> x, y;
    for (int epoch = 0; epoch < sched.epochs; ++epoch) {
        const double lr = sched.lr_at(epoch);
        double loss_acc = 0.0;
        for (int it = 0; it < sched.iters_per_epoch; ++it) {
            fill_batch(target_subset, stream, sched.batch_size, x, y);
            ad::Tape<float> tape;
            auto fv = backbone::bind(tape, model.frozen, false);
            auto tv = backbone::bind(tape, model.tuned, true);
            auto pv = routing::bind_policy(tape, model.policy, true);
            auto rt = routing::routed_train(tape, model, fv, tv, pv, tape.constant(x), noise);
            auto loss =
                objectives::total_loss_on_tape(tape, rt.logits, tape.constant(y),
                                               rt.route_weights, oc);
            const double lv = loss.value()[0];
            if (!std::isfinite(lv)) {
                out.diverged = true;
                return {std::move(model), std::move(out)};
            }
            loss_acc += lv;
            tape.backward(loss);
            std::vector<Tensor<float>*> params;
            std::vector<const Tensor<float>*> grads;
            for (std::size_t i = 0; i < model.tuned.params.size(); ++i) {
                params.push_back(&model.tuned.params.tensor(i));
                grads.push_back(&tape.grad_of(tv.vars[i]));
            }
            for (std::size_t i = 0; i < model.policy.params.size(); ++i) {
                params.push_back(&model.policy.params.tensor(i));
                grads.push_back(&tape.grad_of(pv.vars[i]));
            }
            sgd.step(params, grads, lr);
        }
        EpochLog row;
        row.epoch = epoch;
        row.lr = lr;
        row.train_loss = loss_acc / sched.iters_per_epoch;
        row.val_sdice = val.empty() ? 0.0 : mean(evaluate_dual_argmax(model, val));
        out.log.push_back(row);
    }
    return {std::move(model), std::move(out)};
}

/// Within-domain oracle: seeded k-fold cross-validation over the whole
/// domain, one fresh network per fold; returns fold-wise mean surface Dice.
inline std::vector<double> run_oracle_cv(const Dataset& ds, const std::string& domain, int folds,
                                         const TrainSchedule& sched, std::uint64_t seed) {
    if (folds < 2) throw ConfigError("oracle needs at least 2 folds");
    const auto& all = ds.samples.at(domain);
    if (static_cast<int>(all.size()) < folds) throw ConfigError("too few samples for the folds");
    std::vector<int> ids(all.size());
    for (std::size_t i = 0; i < all.size(); ++i) ids[i] = static_cast<int>(i);
    Rng rng(derive_seed(seed, "oracle_folds"));
    rng.shuffle(ids);

    std::vector<double> fold_scores;
    for (int f = 0; f < folds; ++f) {
        std::vector<const Sample*> train, test;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const Sample* s = &all[static_cast<std::size_t>(ids[i])];
            if (static_cast<int>(i % static_cast<std::size_t>(folds)) == f)
                test.push_back(s);
            else
                train.push_back(s);
        }
        auto net = backbone::build_network<float>(backbone::NetworkConfig::default_unet(),
                                                  derive_seed(seed, "oracle_init", f));
        train_network(net, train, {}, sched, derive_seed(seed, "oracle_train", f));
        fold_scores.push_back(mean(evaluate_network(net, test)));
    }
    return fold_scores;
}

}  // namespace spottunet::strategies
