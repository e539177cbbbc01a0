// Scratch calibration runner for the synthetic benchmark: pretrains the
// canonical baseline, then reports transfer drops, histogram-matching
// behavior, and small-data fine-tuning gains per shifted domain.
#include <chrono>
#include <cstdio>

#include "spottunet/strategies.hpp"

using namespace spottunet;
using namespace spottunet::strategies;
using Clock = std::chrono::steady_clock;

static double secs(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

int main(int argc, char** argv) {
    const std::uint64_t seed = argc > 1 ? std::strtoull(argv[1], nullptr, 10) : 1;
    auto t0 = Clock::now();
    auto ds = datagen::build_dataset(datagen::desk_dataset_config(17));
    std::printf("dataset built (%.1fs)\n", secs(t0, Clock::now()));

    t0 = Clock::now();
    auto [baseline, outcome] = pretrain_baseline(ds, "d0_canonical", desk_pretrain(), seed);
    std::printf("pretrain done (%.1fs), final train loss %.4f\n", secs(t0, Clock::now()),
                outcome.log.back().train_loss);
    std::fflush(stdout);
    for (const auto& row : outcome.log)
        if (row.epoch % 5 == 0 || row.epoch == 19)
            std::printf("  epoch %2d lr %.4g loss %.4f val %.4f\n", row.epoch, row.lr,
                        row.train_loss, row.val_sdice);

    double src = mean(evaluate_network(baseline, ds.test_split("d0_canonical")));
    std::printf("source test sdice: %.4f\n", src);
    std::fflush(stdout);

    const auto& ref = ds.train_split("d0_canonical")[0]->image;
    for (const auto& dom : ds.domain_ids) {
        if (dom == "d0_canonical") continue;
        auto test = ds.test_split(dom);
        double transfer = mean(evaluate_network(baseline, test));
        double hist = mean(evaluate_histogram_transfer(baseline, ref, test));
        std::printf("%s: transfer %.4f (drop %.4f), histmatch %.4f\n", dom.c_str(), transfer,
                    src - transfer, hist);
        std::fflush(stdout);
    }

    // small-data fine-tuning gains at scarcity 4
    for (const auto& dom : ds.domain_ids) {
        if (dom == "d0_canonical") continue;
        auto ids = datagen::sample_scarce_subset(ds, datagen::ScarcitySetup{4},
                                                 derive_seed(seed, dom, 4));
        auto subset = ds.split(dom, ids);
        auto val = ds.val_split(dom);
        auto test = ds.test_split(dom);
        double transfer = mean(evaluate_network(baseline, test));

        t0 = Clock::now();
        StrategySpec sa;
        sa.kind = StrategyKind::finetune_all;
        sa.schedule = desk_finetune();
        auto [na, oa] = finetune(baseline, sa, subset, val, derive_seed(seed, dom, "all"));
        double all_s = mean(evaluate_network(na, test));
        double t_all = secs(t0, Clock::now());

        t0 = Clock::now();
        StrategySpec sk;
        sk.kind = StrategyKind::finetune_first_k;
        sk.first_k = 3;
        sk.schedule = desk_finetune();
        auto [nk, ok] = finetune(baseline, sk, subset, val, derive_seed(seed, dom, "k"));
        double k_s = mean(evaluate_network(nk, test));
        double t_k = secs(t0, Clock::now());

        auto spot_probe = [&](double lam) {
            auto [model, om] = finetune_spottunet(baseline, lam, 0.1, desk_finetune(), subset, val,
                                                  derive_seed(seed, dom, "spot", static_cast<int>(lam * 1000)));
            double spot_s = mean(evaluate_dual_argmax(model, test));
            double tuned_frac = 0;
            int count = 0;
            for (const auto* ts : test) {
                auto res = routing::routed_forward(
                    model,
                    Tensor<float>({1, 1, 64, 64}, ts->image.vec()),
                    routing::RouteMode::eval_argmax);
                for (int h : res.indicators[0].hard) tuned_frac += 1 - h;
                count += static_cast<int>(res.indicators[0].hard.size());
            }
            tuned_frac /= count;
            std::printf("    spot lam=%g: %.3f (+%.3f) tuned %.2f div %d\n", lam, spot_s,
                        spot_s - transfer, tuned_frac, om.diverged);
            std::fflush(stdout);
        };
        std::printf(
            "%s@4: transfer %.3f | all %.3f (+%.3f, %.0fs) | first3 %.3f (+%.3f, %.0fs)\n",
            dom.c_str(), transfer, all_s, all_s - transfer, t_all, k_s, k_s - transfer, t_k);
        std::fflush(stdout);
        spot_probe(0.0);
        spot_probe(0.02);
        (void)oa; (void)ok;
    }
    return 0;
}
