#include <catch2/catch_amalgamated.hpp>

#include "spottunet/backbone.hpp"
#include "testutil.hpp"

using namespace spottunet;
using namespace spottunet::backbone;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

NetworkConfig mini_config() {
    NetworkConfig cfg;
    cfg.input_channels = 1;
    cfg.output_channels = 1;
    cfg.base_width = 3;
    cfg.blocks = {
        {"stem", BlockKind::init_conv, 1, 3, Scale::same},
        {"head", BlockKind::final_conv, 3, 1, Scale::same},
    };
    return cfg;
}

}  // namespace

TEST_CASE("default config builds deterministically") {
    auto cfg = NetworkConfig::default_unet();
    auto a = build_network<float>(cfg, 0);
    auto b = build_network<float>(cfg, 0);
    REQUIRE(a.params == b.params);
    auto c = build_network<float>(cfg, 1);
    REQUIRE_FALSE(a.params == c.params);
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        REQUIRE(a.params.name(i) == c.params.name(i));
        REQUIRE(a.params.tensor(i).shape() == c.params.tensor(i).shape());
    }
    REQUIRE(std::all_of(a.trainable.begin(), a.trainable.end(), [](auto v) { return v == 1; }));
}

TEST_CASE("default forward keeps resolution and is deterministic") {
    auto net = build_network<float>(NetworkConfig::default_unet(), 0);
    Rng rng(3);
    auto x = testutil::cast_tensor<float>(random_tensor({1, 1, 64, 64}, rng, 0, 1));
    auto y1 = forward(net, x);
    REQUIRE(y1.shape() == std::vector<int>{1, 1, 64, 64});
    auto y2 = forward(net, x);
    REQUIRE(y1 == y2);
}

TEST_CASE("channel mismatch raises a configuration error naming the pair") {
    NetworkConfig cfg = mini_config();
    cfg.blocks[1].in_channels = 32;
    cfg.blocks[0].out_channels = 16;
    try {
        build_network<float>(cfg, 0);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        REQUIRE(msg.find("stem") != std::string::npos);
        REQUIRE(msg.find("head") != std::string::npos);
    }
}

TEST_CASE("config validation catches bad topologies") {
    auto cfg = NetworkConfig::default_unet();
    SECTION("residual must preserve channels") {
        cfg.blocks[1].out_channels = 99;
        REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    }
    SECTION("skip at wrong resolution") {
        cfg.skip_connections[0] = {"enc_res1", "dec_up1"};
        REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    }
    SECTION("skip target must be up_conv") {
        cfg.skip_connections[0] = {"enc_res2", "dec_res1"};
        REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    }
    SECTION("kind/scale coherence") {
        cfg.blocks[2].scale = Scale::same;
        REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    }
}

TEST_CASE("all-zero parameters give all-zero logits") {
    auto net = build_network<float>(NetworkConfig::default_unet(), 0);
    for (std::size_t i = 0; i < net.params.size(); ++i) net.params.tensor(i).fill(0.0f);
    Rng rng(4);
    auto x = testutil::cast_tensor<float>(random_tensor({2, 1, 32, 32}, rng, 0, 1));
    auto y = forward(net, x);
    for (std::int64_t i = 0; i < y.numel(); ++i) REQUIRE(y[i] == 0.0f);
}

TEST_CASE("forward rejects indivisible spatial dims") {
    auto net = build_network<float>(NetworkConfig::default_unet(), 0);
    Tensor<float> x({1, 1, 30, 30});
    REQUIRE_THROWS_AS(forward(net, x), DimensionError);
    Tensor<float> x2({1, 2, 32, 32});
    REQUIRE_THROWS_AS(forward(net, x2), DimensionError);
}

TEST_CASE("enumerate_blocks matches the default topology") {
    auto net = build_network<float>(NetworkConfig::default_unet(), 0);
    auto blocks = enumerate_blocks(net);
    REQUIRE(blocks.size() == 17);
    REQUIRE(blocks.front().kind == BlockKind::init_conv);
    REQUIRE(blocks.back().kind == BlockKind::final_conv);
    auto again = enumerate_blocks(net);
    for (std::size_t i = 0; i < blocks.size(); ++i) REQUIRE(blocks[i].name == again[i].name);
}

TEST_CASE("network forward equals manual block-by-block composition") {
    auto net = build_network<float>(NetworkConfig::default_unet(), 7);
    Rng rng(8);
    auto x = testutil::cast_tensor<float>(random_tensor({2, 1, 32, 32}, rng, 0, 1));
    auto whole = forward(net, x);

    // Independent composition: walk enumerate_blocks, tracking skip feeds by hand.
    ad::Tape<float> tape;
    auto nv = bind(tape, net, false);
    std::unordered_map<std::string, ad::Var<float>> outputs;
    ad::Var<float> cur = tape.constant(nchw_to_nhwc(x));
    auto blocks = enumerate_blocks(net);
    for (int bi = 0; bi < static_cast<int>(blocks.size()); ++bi) {
        std::optional<ad::Var<float>> skip;
        for (const auto& [src, dst] : net.config.skip_connections)
            if (dst == blocks[static_cast<std::size_t>(bi)].name) skip = outputs.at(src);
        cur = block_apply(tape, net, nv, bi, cur, skip);
        outputs.emplace(blocks[static_cast<std::size_t>(bi)].name, cur);
    }
    const auto manual = nhwc_to_nchw(cur.value());
    REQUIRE(manual.shape() == whole.shape());
    for (std::int64_t i = 0; i < manual.numel(); ++i)
        REQUIRE_THAT(manual[i], Catch::Matchers::WithinAbs(whole[i], 1e-6));
}

TEST_CASE("miniature gradient check across every parameter") {
    auto cfg = mini_config();
    auto net = build_network<double>(cfg, 1);
    Rng rng(21);
    auto x = random_tensor({2, 1, 6, 6}, rng, 0, 1);

    std::vector<Tensor<double>> inputs;
    for (std::size_t i = 0; i < net.params.size(); ++i) inputs.push_back(net.params.tensor(i));

    auto res = grad_check(
        [&](ad::Tape<double>& t, std::vector<ad::Var<double>>& v) {
            NetVars<double> nv{v};
            auto out = network_apply(t, net, nv, t.constant(nchw_to_nhwc(x)));
            Tensor<double> w(out.value().shape());
            Rng r2(5);
            for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = r2.uniform(-1, 1);
            return ad::sum_all(ad::mul(out, t.constant(w)));
        },
        inputs, 1e-4);
    REQUIRE(res.checked == static_cast<int>(net.params.total_elements()));
    REQUIRE(res.max_rel_err < 1e-3);
}

TEST_CASE("clone_for_finetuning isolates the frozen copy") {
    auto net = build_network<float>(NetworkConfig::default_unet(), 3);
    auto [frozen, tuned] = clone_for_finetuning(net);
    REQUIRE(frozen.params == tuned.params);
    REQUIRE(std::all_of(frozen.trainable.begin(), frozen.trainable.end(),
                        [](auto v) { return v == 0; }));
    REQUIRE(std::all_of(tuned.trainable.begin(), tuned.trainable.end(),
                        [](auto v) { return v == 1; }));

    Rng rng(10);
    auto x = testutil::cast_tensor<float>(random_tensor({1, 1, 32, 32}, rng, 0, 1));
    auto yf = forward(frozen, x);
    auto yt = forward(tuned, x);
    REQUIRE(yf == yt);

    auto before = frozen.params;
    tuned.params.at("enc_res1.conv1.w")[0] += 1.0f;
    REQUIRE(forward(frozen, x) == yf);
    REQUIRE(frozen.params == before);

    // One SGD step on the tuned copy must leave the frozen copy bitwise intact.
    ad::Tape<float> tape;
    auto nv = bind(tape, tuned, true);
    auto out = network_apply(tape, tuned, nv, tape.constant(nchw_to_nhwc(x)));
    auto loss = ad::sum_all(out);
    tape.backward(loss);
    for (std::size_t i = 0; i < tuned.params.size(); ++i) {
        const auto& g = tape.grad_of(nv.vars[i]);
        if (g.empty()) continue;
        auto& p = tuned.params.tensor(i);
        for (std::int64_t j = 0; j < p.numel(); ++j) p[j] -= 0.01f * g[j];
    }
    REQUIRE(frozen.params == before);
}

TEST_CASE("first-k trainable mask covers exactly the first k blocks") {
    auto net = build_network<float>(NetworkConfig::default_unet(), 0);
    net.set_first_k_trainable(3);
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        const std::string& n = net.params.name(i);
        bool expect = n.rfind("init_conv.", 0) == 0 || n.rfind("enc_res1.", 0) == 0 ||
                      n.rfind("enc_down1.", 0) == 0;
        REQUIRE((net.trainable[i] != 0) == expect);
    }
    REQUIRE_THROWS_AS(net.set_first_k_trainable(18), ConfigError);
    REQUIRE_THROWS_AS(net.set_first_k_trainable(-1), ConfigError);
}
