#include <catch2/catch_amalgamated.hpp>

#include "spottunet/objectives.hpp"
#include "spottunet/routing.hpp"
#include "testutil.hpp"

using namespace spottunet;
using namespace spottunet::backbone;
using namespace spottunet::routing;
using testutil::cast_tensor;
using testutil::random_tensor;

namespace {

NetworkConfig mini_config() {
    NetworkConfig cfg;
    cfg.base_width = 3;
    cfg.blocks = {
        {"stem", BlockKind::init_conv, 1, 3, Scale::same},
        {"head", BlockKind::final_conv, 3, 1, Scale::same},
    };
    return cfg;
}

// Miniature dual-path model with a tiny policy. Every parameter is nudged off
// its initialization so no ReLU sits exactly on its kink (keeps central
// differences well-defined).
template <typename T>
DualPathModel<T> mini_model(double tau, bool hard, std::uint64_t seed) {
    auto net = build_network<T>(mini_config(), seed);
    DualPathModel<T> m;
    auto [fr, tu] = clone_for_finetuning(net);
    m.frozen = std::move(fr);
    m.tuned = std::move(tu);
    PolicyConfig pc;
    pc.num_blocks = net.config.num_routable_blocks();
    pc.in_channels = 1;
    pc.stage_widths = {2, 3};
    m.policy = build_policy<T>(pc, seed + 1);
    m.gumbel.tau = tau;
    m.gumbel.hard = hard;
    m.gumbel.seed = seed;
    Rng r(seed + 2);
    for (std::size_t i = 0; i < m.policy.params.size(); ++i)
        for (auto& v : m.policy.params.tensor(i).vec()) v += static_cast<T>(r.uniform(-0.3, 0.3));
    for (std::size_t i = 0; i < m.tuned.params.size(); ++i)
        for (auto& v : m.tuned.params.tensor(i).vec()) v += static_cast<T>(r.uniform(-0.05, 0.05));
    m.validate();
    return m;
}

}  // namespace

TEST_CASE("zero-initialized policy head emits (0,0) pairs") {
    PolicyConfig pc;
    pc.num_blocks = 5;
    auto p = build_policy<float>(pc, 0);
    Rng rng(1);
    auto x = cast_tensor<float>(random_tensor({2, 1, 16, 16}, rng, 0, 1));
    auto logits = policy_forward(p, x);
    REQUIRE(logits.shape() == std::vector<int>{2, 5, 2});
    for (std::int64_t i = 0; i < logits.numel(); ++i) REQUIRE(logits[i] == 0.0f);
}

TEST_CASE("policy is per-sample and deterministic") {
    PolicyConfig pc;
    pc.num_blocks = 3;
    auto p = build_policy<float>(pc, 7);
    // non-trivial head so outputs depend on the input
    Rng r(3);
    for (auto& v : p.params.at("head.w").vec()) v = static_cast<float>(r.uniform(-0.5, 0.5));

    Rng rng(4);
    auto a = random_tensor({1, 1, 16, 16}, rng, 0, 1);
    auto b = random_tensor({1, 1, 16, 16}, rng, 0, 1);
    Tensor<float> ab({2, 1, 16, 16});
    Tensor<float> ba({2, 1, 16, 16});
    for (int i = 0; i < 256; ++i) {
        ab[i] = static_cast<float>(a[i]);
        ab[256 + i] = static_cast<float>(b[i]);
        ba[i] = static_cast<float>(b[i]);
        ba[256 + i] = static_cast<float>(a[i]);
    }
    auto lab = policy_forward(p, ab);
    auto lba = policy_forward(p, ba);
    for (int l = 0; l < 3; ++l)
        for (int k = 0; k < 2; ++k) {
            REQUIRE_THAT(lab[(0 * 3 + l) * 2 + k],
                         Catch::Matchers::WithinAbs(lba[(1 * 3 + l) * 2 + k], 1e-5));
            REQUIRE_THAT(lab[(1 * 3 + l) * 2 + k],
                         Catch::Matchers::WithinAbs(lba[(0 * 3 + l) * 2 + k], 1e-5));
        }
    REQUIRE(policy_forward(p, ab) == lab);
}

TEST_CASE("gumbel_softmax_sample saturated and balanced logits") {
    GumbelConfig cfg;
    cfg.tau = 0.1;
    Rng rng(11);
    for (int i = 0; i < 2000; ++i) {
        auto s = gumbel_softmax_sample(50.0, -50.0, cfg, rng);
        REQUIRE(s.hard == 1);
        REQUIRE(s.soft > 0.5);
    }
    cfg.tau = 1.0;
    Rng rng2(12);
    int ones = 0;
    for (int i = 0; i < 10000; ++i) {
        auto s = gumbel_softmax_sample(0.0, 0.0, cfg, rng2);
        REQUIRE(s.soft > 0.0);
        REQUIRE(s.soft < 1.0);
        ones += s.hard;
    }
    REQUIRE(std::abs(ones / 10000.0 - 0.5) < 0.02);

    GumbelConfig bad;
    bad.tau = 0.0;
    REQUIRE_THROWS_AS(gumbel_softmax_sample(0, 0, bad, rng), ConfigError);
}

TEST_CASE("hard-sample marginal follows softmax of the logits") {
    GumbelConfig cfg;
    cfg.tau = 0.7;
    Rng logit_rng(21);
    for (int rep = 0; rep < 4; ++rep) {
        double l0 = logit_rng.uniform(-1.5, 1.5);
        double l1 = logit_rng.uniform(-1.5, 1.5);
        double want = 1.0 / (1.0 + std::exp(l1 - l0));
        Rng rng(100 + rep);
        int ones = 0;
        for (int i = 0; i < 10000; ++i) ones += gumbel_softmax_sample(l0, l1, cfg, rng).hard;
        REQUIRE(std::abs(ones / 10000.0 - want) < 0.02);
    }
}

TEST_CASE("scalar gumbel sample agrees with the batched tape op") {
    GumbelConfig cfg;
    cfg.tau = 0.37;
    Rng rng(5);
    Tensor<double> logits({1, 4}, {0.3, -0.2, 1.1, 0.4});
    // capture the same noise the scalar path would draw
    Rng noise_rng(77);
    Tensor<double> noise({1, 4});
    for (int i = 0; i < 4; ++i) noise[i] = noise_rng.gumbel();
    ad::Tape<double> tape;
    auto soft = ad::gumbel_pair_soft(tape.leaf(logits, false), noise, cfg.tau);
    Rng scalar_rng(77);
    for (int l = 0; l < 2; ++l) {
        auto s = gumbel_softmax_sample(logits[2 * l], logits[2 * l + 1], cfg, scalar_rng);
        REQUIRE_THAT(s.soft, Catch::Matchers::WithinAbs(soft.value().at2(0, l), 1e-12));
        REQUIRE(s.hard == (soft.value().at2(0, l) >= 0.5 ? 1 : 0));
    }
}

TEST_CASE("temperature limit tightens the relaxation monotonically") {
    Rng rng(31);
    const int draws = 256;
    std::vector<double> l0(draws), l1(draws), g0(draws), g1(draws);
    for (int i = 0; i < draws; ++i) {
        l0[i] = rng.uniform(-2, 2);
        l1[i] = rng.uniform(-2, 2);
        g0[i] = rng.gumbel();
        g1[i] = rng.gumbel();
    }
    double prev = 1e9;
    for (double tau : {2.0, 1.0, 0.5, 0.1}) {
        double gap = 0;
        for (int i = 0; i < draws; ++i) {
            double soft = 1.0 / (1.0 + std::exp(-((l0[i] + g0[i]) - (l1[i] + g1[i])) / tau));
            double hard = soft >= 0.5 ? 1.0 : 0.0;
            gap += std::abs(soft - hard);
        }
        gap /= draws;
        REQUIRE(gap <= prev + 1e-12);
        prev = gap;
    }
}

TEST_CASE("forced all-frozen equals the frozen network") {
    auto m = mini_model<float>(0.5, true, 3);
    Rng rng(8);
    auto x = cast_tensor<float>(random_tensor({2, 1, 8, 8}, rng, 0, 1));
    ForcedRoute all_frozen{{std::vector<int>(2, 1), std::vector<double>(2, 1.0)}};
    auto res = routed_forward(m, x, RouteMode::forced, &all_frozen);
    auto want = forward(m.frozen, x);
    REQUIRE(res.logits.shape() == want.shape());
    for (std::int64_t i = 0; i < want.numel(); ++i)
        REQUIRE_THAT(res.logits[i], Catch::Matchers::WithinAbs(want[i], 1e-6));
    for (const auto& iv : res.indicators)
        for (int h : iv.hard) REQUIRE(h == 1);
}

TEST_CASE("forced all-tuned with identical copies equals the frozen network") {
    auto net = build_network<float>(mini_config(), 5);
    auto m = make_dual_path(net, GumbelConfig{}, 6);
    Rng rng(9);
    auto x = cast_tensor<float>(random_tensor({2, 1, 8, 8}, rng, 0, 1));
    ForcedRoute all_tuned{{std::vector<int>(2, 0), std::vector<double>(2, 0.0)}};
    auto res = routed_forward(m, x, RouteMode::forced, &all_tuned);
    auto want = forward(m.frozen, x);
    for (std::int64_t i = 0; i < want.numel(); ++i)
        REQUIRE_THAT(res.logits[i], Catch::Matchers::WithinAbs(want[i], 1e-6));
}

TEST_CASE("forced mixed policy equals manual composition over the two copies") {
    auto net = build_network<float>(NetworkConfig::default_unet(), 13);
    auto m = make_dual_path(net, GumbelConfig{}, 14);
    Rng r(15);
    for (std::size_t i = 0; i < m.tuned.params.size(); ++i)
        for (auto& v : m.tuned.params.tensor(i).vec()) v += static_cast<float>(r.uniform(-0.02, 0.02));

    const int n = m.frozen.config.num_routable_blocks();
    IndicatorVector iv;
    iv.hard.assign(static_cast<std::size_t>(n), 1);
    iv.soft.assign(static_cast<std::size_t>(n), 1.0);
    for (int l = 0; l < 5; ++l) iv.hard[static_cast<std::size_t>(l)] = 0;  // first 5 tuned

    Rng rng(16);
    auto x = cast_tensor<float>(random_tensor({1, 1, 32, 32}, rng, 0, 1));
    ForcedRoute forced{iv};
    auto res = routed_forward(m, x, RouteMode::forced, &forced);

    // manual composition: tuned blocks where I_l = 0, frozen blocks otherwise
    ad::Tape<float> tape;
    auto fv = bind(tape, m.frozen, false);
    auto tv = bind(tape, m.tuned, false);
    std::unordered_map<std::string, ad::Var<float>> outputs;
    ad::Var<float> cur = tape.constant(nchw_to_nhwc(x));
    for (int bi = 0; bi < n; ++bi) {
        std::optional<ad::Var<float>> skip;
        for (const auto& [src, dst] : m.frozen.config.skip_connections)
            if (dst == m.frozen.config.blocks[static_cast<std::size_t>(bi)].name)
                skip = outputs.at(src);
        cur = iv.hard[static_cast<std::size_t>(bi)] == 1
                  ? block_apply(tape, m.frozen, fv, bi, cur, skip)
                  : block_apply(tape, m.tuned, tv, bi, cur, skip);
        outputs.emplace(m.frozen.config.blocks[static_cast<std::size_t>(bi)].name, cur);
    }
    auto manual = nhwc_to_nchw(cur.value());
    for (std::int64_t i = 0; i < manual.numel(); ++i)
        REQUIRE_THAT(res.logits[i], Catch::Matchers::WithinAbs(manual[i], 1e-5));
}

TEST_CASE("forced vector of wrong length is rejected") {
    auto m = mini_model<float>(0.5, true, 3);
    Rng rng(8);
    auto x = cast_tensor<float>(random_tensor({1, 1, 8, 8}, rng, 0, 1));
    ForcedRoute bad{{std::vector<int>(5, 1), std::vector<double>(5, 1.0)}};
    REQUIRE_THROWS_AS(routed_forward(m, x, RouteMode::forced, &bad), DimensionError);
}

TEST_CASE("eval_argmax is deterministic and train_sample varies") {
    auto m = mini_model<float>(1.0, true, 42);
    Rng rng(17);
    auto x = cast_tensor<float>(random_tensor({2, 1, 8, 8}, rng, 0, 1));
    auto a = routed_forward(m, x, RouteMode::eval_argmax);
    auto b = routed_forward(m, x, RouteMode::eval_argmax);
    REQUIRE(a.logits == b.logits);
    for (std::size_t i = 0; i < a.indicators.size(); ++i)
        REQUIRE(a.indicators[i].hard == b.indicators[i].hard);

    Rng g1(100), g2(100);
    auto s1 = routed_forward(m, x, RouteMode::train_sample, nullptr, &g1);
    auto s2 = routed_forward(m, x, RouteMode::train_sample, nullptr, &g2);
    REQUIRE(s1.logits == s2.logits);  // same rng stream, same draws
}

TEST_CASE("straight-through loss value is a function of hard indicators only") {
    auto m = mini_model<float>(0.8, true, 21);
    Rng rng(22);
    auto x = cast_tensor<float>(random_tensor({1, 1, 8, 8}, rng, 0, 1));
    Tensor<float> target({1, 1, 8, 8});
    for (auto& v : target.vec()) v = rng.uniform() < 0.4 ? 1.0f : 0.0f;

    ad::Tape<float> tape;
    auto fv = bind(tape, m.frozen, false);
    auto tv = bind(tape, m.tuned, true);
    auto pv = bind_policy(tape, m.policy, true);
    Rng noise(55);
    auto rt = routed_train(tape, m, fv, tv, pv, tape.constant(nchw_to_nhwc(x)), noise);
    objectives::ObjectiveConfig oc;
    oc.lambda = 0.01;
    auto loss = objectives::total_loss_on_tape(tape, rt.logits,
                                               tape.constant(nchw_to_nhwc(target)),
                                               rt.route_weights, oc);
    const double train_loss = loss.value()[0];

    // same hard indicators, forced: value must match
    ForcedRoute forced{rt.indicators[0]};
    auto res = routed_forward(m, x, RouteMode::forced, &forced);
    double forced_loss = objectives::bce_loss(res.logits, target, oc.eps) +
                         objectives::policy_regularizer(res.indicators, oc.lambda);
    REQUIRE_THAT(train_loss, Catch::Matchers::WithinAbs(forced_loss, 1e-5));

    // gradient reaches the policy parameters through the soft path
    tape.backward(loss);
    bool any_nonzero = false;
    for (std::size_t i = 0; i < m.policy.params.size(); ++i) {
        const auto& g = tape.grad_of(pv.vars[i]);
        if (g.empty()) continue;
        for (std::int64_t j = 0; j < g.numel(); ++j)
            if (g[j] != 0.0f) any_nonzero = true;
    }
    REQUIRE(any_nonzero);
}

TEST_CASE("soft-mode routed loss passes finite-difference checks") {
    // gumbel.hard = false: the relaxed weights route the blocks, so the whole
    // graph is differentiable and comparable against central differences.
    auto m = mini_model<double>(0.9, false, 31);
    Rng rng(32);
    auto x = random_tensor({2, 1, 8, 8}, rng, 0, 1);
    Tensor<double> target({2, 1, 8, 8});
    for (auto& v : target.vec()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    objectives::ObjectiveConfig oc;
    oc.lambda = 0.05;

    auto eval = [&](DualPathModel<double>& model) {
        ad::Tape<double> tape;
        auto fv = bind(tape, model.frozen, false);
        auto tv = bind(tape, model.tuned, false);
        auto pv = bind_policy(tape, model.policy, false);
        Rng noise(5150);  // identical draws every evaluation
        auto rt = routed_train(tape, model, fv, tv, pv, tape.constant(nchw_to_nhwc(x)), noise);
        auto loss = objectives::total_loss_on_tape(
            tape, rt.logits, tape.constant(nchw_to_nhwc(target)), rt.route_weights, oc);
        return loss.value()[0];
    };

    // analytic gradients
    ad::Tape<double> tape;
    auto fv = bind(tape, m.frozen, false);
    auto tv = bind(tape, m.tuned, true);
    auto pv = bind_policy(tape, m.policy, true);
    Rng noise(5150);
    auto rt = routed_train(tape, m, fv, tv, pv, tape.constant(nchw_to_nhwc(x)), noise);
    auto loss = objectives::total_loss_on_tape(tape, rt.logits,
                                               tape.constant(nchw_to_nhwc(target)),
                                               rt.route_weights, oc);
    tape.backward(loss, false);

    const double h = 1e-5;
    double max_rel = 0;
    auto check_store = [&](backbone::ParamStore<double>& store,
                           const std::vector<ad::Var<double>>& vars) {
        for (std::size_t i = 0; i < store.size(); ++i) {
            const Tensor<double>& g = tape.grad_of(vars[i]);
            for (std::int64_t j = 0; j < store.tensor(i).numel(); ++j) {
                double orig = store.tensor(i)[j];
                store.tensor(i)[j] = orig + h;
                double up = eval(m);
                store.tensor(i)[j] = orig - h;
                double dn = eval(m);
                store.tensor(i)[j] = orig;
                double fd = (up - dn) / (2 * h);
                double an = g.empty() ? 0.0 : g[j];
                double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
                max_rel = std::max(max_rel, rel);
            }
        }
    };
    check_store(m.tuned.params, tv.vars);
    check_store(m.policy.params, pv.vars);
    REQUIRE(max_rel < 1e-3);
}

TEST_CASE("trainable_parameters covers tuned and policy, never frozen") {
    auto m = mini_model<float>(0.5, true, 51);
    auto params = trainable_parameters(m);
    REQUIRE(params.size() == m.tuned.params.size() + m.policy.params.size());
    auto frozen_before = m.frozen.params;
    for (auto& p : params)
        for (auto& v : p.tensor->vec()) v += 1.0f;
    REQUIRE(m.frozen.params == frozen_before);
}

TEST_CASE("one training step moves both tuned and policy parameters") {
    auto m = mini_model<float>(0.8, true, 61);
    Rng rng(62);
    auto x = cast_tensor<float>(random_tensor({2, 1, 8, 8}, rng, 0, 1));
    Tensor<float> target({2, 1, 8, 8});
    for (auto& v : target.vec()) v = rng.uniform() < 0.4 ? 1.0f : 0.0f;

    auto tuned_before = m.tuned.params;
    auto policy_before = m.policy.params;
    auto frozen_before = m.frozen.params;

    ad::Tape<float> tape;
    auto fv = bind(tape, m.frozen, false);
    auto tv = bind(tape, m.tuned, true);
    auto pv = bind_policy(tape, m.policy, true);
    Rng noise(63);
    auto rt = routed_train(tape, m, fv, tv, pv, tape.constant(nchw_to_nhwc(x)), noise);
    objectives::ObjectiveConfig oc;
    oc.lambda = 0.01;
    auto loss = objectives::total_loss_on_tape(tape, rt.logits,
                                               tape.constant(nchw_to_nhwc(target)),
                                               rt.route_weights, oc);
    tape.backward(loss);
    for (std::size_t i = 0; i < m.tuned.params.size(); ++i) {
        const auto& g = tape.grad_of(tv.vars[i]);
        if (g.empty()) continue;
        for (std::int64_t j = 0; j < g.numel(); ++j) m.tuned.params.tensor(i)[j] -= 0.01f * g[j];
    }
    for (std::size_t i = 0; i < m.policy.params.size(); ++i) {
        const auto& g = tape.grad_of(pv.vars[i]);
        if (g.empty()) continue;
        for (std::int64_t j = 0; j < g.numel(); ++j) m.policy.params.tensor(i)[j] -= 0.01f * g[j];
    }
    REQUIRE_FALSE(m.tuned.params == tuned_before);
    REQUIRE_FALSE(m.policy.params == policy_before);
    REQUIRE(m.frozen.params == frozen_before);
}
