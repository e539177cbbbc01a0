#include <chrono>
#include <iostream>

#include "spottunet/backbone.hpp"

using namespace spottunet;
using namespace spottunet::backbone;

int main(int argc, char** argv) {
    int threads = argc > 1 ? std::atoi(argv[1]) : 2;
    (void)threads;
    auto net = build_network<float>(NetworkConfig::default_unet(), 0);
    Rng rng(1);
    Tensor<float> x({8, 1, 64, 64});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform());
    Tensor<float> target({8, 1, 64, 64});
    for (std::int64_t i = 0; i < target.numel(); ++i) target[i] = rng.uniform() < 0.3 ? 1.f : 0.f;

    // warmup + timed steps of forward/backward/sgd
    int steps = 20;
    double total = 0;
    for (int s = 0; s < steps + 2; ++s) {
        auto t0 = std::chrono::steady_clock::now();
        ad::Tape<float> tape;
        auto nv = bind(tape, net, true);
        auto out = network_apply(tape, net, nv, tape.constant(nchw_to_nhwc(x)));
        auto loss = ad::bce_with_logits(out, tape.constant(nchw_to_nhwc(target)), 1e-6f);
        tape.backward(loss);
        for (std::size_t i = 0; i < net.params.size(); ++i) {
            const auto& g = tape.grad_of(nv.vars[i]);
            if (g.empty()) continue;
            auto& p = net.params.tensor(i);
            for (std::int64_t j = 0; j < p.numel(); ++j) p[j] -= 1e-3f * g[j];
        }
        auto t1 = std::chrono::steady_clock::now();
        double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
        if (s >= 2) total += ms;
        if (s == 0) std::cout << "loss " << loss.value()[0] << "\n";
    }
    std::cout << "threads=" << threads << " avg step ms: " << total / steps << "\n";
    std::cout << "desk pretrain (500 steps) est s: " << total / steps * 500 / 1000.0 << "\n";
    std::cout << "desk finetune (300 steps) est s: " << total / steps * 300 / 1000.0 << "\n";
    return 0;
}
