#include <catch2/catch_amalgamated.hpp>

#include "spottunet/datagen.hpp"
#include "testutil.hpp"

using namespace spottunet;
using namespace spottunet::datagen;

TEST_CASE("anatomy generation is deterministic and well formed") {
    auto a1 = generate_anatomy(7, 64, 64);
    auto a2 = generate_anatomy(7, 64, 64);
    REQUIRE(a1.tissue == a2.tissue);
    REQUIRE(a1.mask.values == a2.mask.values);
    auto a3 = generate_anatomy(8, 64, 64);
    REQUIRE_FALSE(a1.tissue == a3.tissue);
    REQUIRE_THROWS_AS(generate_anatomy(1, 30, 64), ConfigError);

    // brain strictly inside the head: every mask pixel is tissue class 2 and
    // the skull ring never overlaps the mask
    for (std::size_t p = 0; p < a1.tissue.size(); ++p) {
        if (a1.mask.values[p]) REQUIRE(a1.tissue[p] == 2);
        if (a1.tissue[p] == 1) REQUIRE(a1.mask.values[p] == 0);
    }
}

TEST_CASE("mask area fraction stays within the calibrated band over 100 seeds") {
    for (int seed = 0; seed < 100; ++seed) {
        auto a = generate_anatomy(static_cast<std::uint64_t>(seed), 64, 64);
        double area = 0;
        for (auto v : a.mask.values) area += v;
        double frac = area / (64.0 * 64.0);
        REQUIRE(frac >= 0.1);
        REQUIRE(frac <= 0.6);
    }
}

TEST_CASE("identity domain renders piecewise-constant contrast levels") {
    auto a = generate_anatomy(3, 64, 64);
    DomainSpec spec;
    spec.domain_id = "identity";
    Rng rng(1);
    auto img = render_domain(a, spec, rng);
    for (std::int64_t p = 0; p < img.numel(); ++p) {
        double want = spec.contrast_levels[a.tissue[static_cast<std::size_t>(p)]];
        REQUIRE_THAT(img[p], Catch::Matchers::WithinAbs(want, 1e-6));
    }
}

TEST_CASE("gamma-2 render is the pixelwise square of the gamma-1 render") {
    auto a = generate_anatomy(5, 64, 64);
    DomainSpec g1;
    g1.domain_id = "g1";
    g1.bias_amp = 0.3;
    g1.blur_sigma = 0.7;
    DomainSpec g2 = g1;
    g2.domain_id = "g2";
    g2.gamma = 2.0;
    Rng r1(9), r2(9);
    auto i1 = render_domain(a, g1, r1);
    auto i2 = render_domain(a, g2, r2);
    for (std::int64_t p = 0; p < i1.numel(); ++p)
        REQUIRE_THAT(i2[p], Catch::Matchers::WithinAbs(i1[p] * i1[p], 1e-5));
}

TEST_CASE("renders stay in [0,1] and masks are domain-invariant") {
    auto cfg = desk_dataset_config(11);
    cfg.samples_per_domain = 4;
    cfg.train_count = 2;
    cfg.val_count = 1;
    cfg.test_count = 1;
    auto ds = build_dataset(cfg);
    REQUIRE(ds.domain_ids.size() == 6);
    const auto& ref = ds.samples.at(ds.domain_ids[0]);
    for (const auto& [domain, vec] : ds.samples) {
        for (std::size_t i = 0; i < vec.size(); ++i) {
            for (std::int64_t p = 0; p < vec[i].image.numel(); ++p) {
                REQUIRE(vec[i].image[p] >= 0.0f);
                REQUIRE(vec[i].image[p] <= 1.0f);
            }
            REQUIRE(vec[i].mask.values == ref[i].mask.values);
        }
    }
}

TEST_CASE("dataset build is bitwise reproducible") {
    auto cfg = desk_dataset_config(13);
    cfg.samples_per_domain = 3;
    cfg.train_count = 1;
    cfg.val_count = 1;
    cfg.test_count = 1;
    auto d1 = build_dataset(cfg);
    auto d2 = build_dataset(cfg);
    for (const auto& [domain, vec] : d1.samples)
        for (std::size_t i = 0; i < vec.size(); ++i)
            REQUIRE(vec[i].image == d2.samples.at(domain)[i].image);
}

TEST_CASE("histogram matching fixed points and degenerate inputs") {
    Rng rng(21);
    Tensor<float> img({32, 32});
    for (auto& v : img.vec()) v = static_cast<float>(rng.uniform());
    auto self = histogram_match(img, img);
    for (std::int64_t p = 0; p < img.numel(); ++p)
        REQUIRE(std::abs(self[p] - img[p]) <= 1.0f / 256.0f);

    Tensor<float> constant({16, 16}, 0.3f);
    Tensor<float> ref({16, 16});
    for (auto& v : ref.vec()) v = static_cast<float>(rng.uniform());
    auto matched = histogram_match(constant, ref);
    float first = matched[0];
    for (std::int64_t p = 0; p < matched.numel(); ++p) REQUIRE(matched[p] == first);
    // the constant maps to the reference's top quantile
    float maxref = 0;
    for (std::int64_t p = 0; p < ref.numel(); ++p) maxref = std::max(maxref, ref[p]);
    REQUIRE(std::abs(first - maxref) < 2.0f / 256.0f);
}

TEST_CASE("histogram matching inverts a pure monotone gamma shift") {
    auto a = generate_anatomy(31, 64, 64);
    DomainSpec base;
    base.domain_id = "base";
    base.blur_sigma = 0.6;  // a few in-between intensities, no noise
    DomainSpec shifted = base;
    shifted.domain_id = "shifted";
    shifted.gamma = 2.0;
    Rng r1(4), r2(4);
    auto src = render_domain(a, base, r1);
    auto tgt = render_domain(a, shifted, r2);
    auto recovered = histogram_match(tgt, src);
    for (std::int64_t p = 0; p < src.numel(); ++p)
        REQUIRE(std::abs(recovered[p] - src[p]) <= 2.0f / 256.0f);
}

TEST_CASE("scarce subsets are deterministic, sized, and train-only") {
    auto cfg = desk_dataset_config(17);
    auto ds = build_dataset(cfg);
    ScarcitySetup s8{8};
    auto sub1 = sample_scarce_subset(ds, s8, 5);
    auto sub2 = sample_scarce_subset(ds, s8, 5);
    REQUIRE(sub1 == sub2);
    REQUIRE(sub1.size() == 8);
    for (int id : sub1)
        REQUIRE(std::find(ds.splits.train.begin(), ds.splits.train.end(), id) !=
                ds.splits.train.end());
    auto sub3 = sample_scarce_subset(ds, s8, 6);
    REQUIRE_FALSE(sub1 == sub3);

    auto full = sample_scarce_subset(ds, ScarcitySetup{28}, 5);
    REQUIRE(full.size() == ds.splits.train.size());
    REQUIRE_THROWS_AS(sample_scarce_subset(ds, ScarcitySetup{29}, 5), ConfigError);
}

TEST_CASE("dataset round-trips through the on-disk layout") {
    auto cfg = desk_dataset_config(19);
    cfg.samples_per_domain = 3;
    cfg.train_count = 1;
    cfg.val_count = 1;
    cfg.test_count = 1;
    auto ds = build_dataset(cfg);
    auto root = std::filesystem::temp_directory_path() / "spottunet_test_dataset";
    std::filesystem::remove_all(root);
    save_dataset(ds, root);
    REQUIRE(std::filesystem::exists(root / "dataset.json"));
    REQUIRE(std::filesystem::exists(root / "d0_canonical" / "0.img"));
    REQUIRE(std::filesystem::exists(root / "d0_canonical" / "0.msk"));
    REQUIRE(std::filesystem::exists(root / "d0_canonical" / "0.json"));

    auto loaded = load_dataset(root);
    REQUIRE(loaded.splits.train == ds.splits.train);
    REQUIRE(loaded.splits.test == ds.splits.test);
    for (const auto& [domain, vec] : ds.samples)
        for (std::size_t i = 0; i < vec.size(); ++i) {
            REQUIRE(vec[i].image == loaded.samples.at(domain)[i].image);
            REQUIRE(vec[i].mask.values == loaded.samples.at(domain)[i].mask.values);
        }
    std::filesystem::remove_all(root);
}
