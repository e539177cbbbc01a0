#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "spottunet/core/ops.hpp"
#include "spottunet/core/rng.hpp"

namespace spottunet::backbone {

enum class BlockKind { init_conv, residual, down_conv, up_conv, final_conv };
enum class Scale { same, down2, up2 };

inline const char* to_string(BlockKind k) {
    switch (k) {
        case BlockKind::init_conv: return "init_conv";
        case BlockKind::residual: return "residual";
        case BlockKind::down_conv: return "down_conv";
        case BlockKind::up_conv: return "up_conv";
        case BlockKind::final_conv: return "final_conv";
    }
    return "?";
}

inline BlockKind block_kind_from_string(const std::string& s) {
    if (s == "init_conv") return BlockKind::init_conv;
    if (s == "residual") return BlockKind::residual;
    if (s == "down_conv") return BlockKind::down_conv;
    if (s == "up_conv") return BlockKind::up_conv;
    if (s == "final_conv") return BlockKind::final_conv;
    throw ConfigError("unknown block kind: " + s);
}

struct BlockSpec {
    std::string name;
    BlockKind kind = BlockKind::residual;
    int in_channels = 0;
    int out_channels = 0;
    Scale scale = Scale::same;
};

/// Declarative network description; parameter shapes are fully determined by it.
struct NetworkConfig {
    std::vector<BlockSpec> blocks;
    /// (encoder_block_name, up_conv_block_name): the up_conv concatenates the
    /// encoder block's routed output after upsampling and reduces it back with
    /// its own 1x1 merge convolution.
    std::vector<std::pair<std::string, std::string>> skip_connections;
    int input_channels = 1;
    int output_channels = 1;
    int base_width = 16;

    int num_routable_blocks() const { return static_cast<int>(blocks.size()); }

    int block_index(const std::string& name) const {
        for (std::size_t i = 0; i < blocks.size(); ++i)
            if (blocks[i].name == name) return static_cast<int>(i);
        return -1;
    }

    /// Skip source index feeding block `target_idx`, or -1.
    int skip_source_of(int target_idx) const {
        for (const auto& [src, dst] : skip_connections)
            if (dst == blocks[static_cast<std::size_t>(target_idx)].name) return block_index(src);
        return -1;
    }

    /// Maximum number of down2 blocks crossed along the chain.
    int max_depth() const {
        int depth = 0, max_d = 0;
        for (const auto& b : blocks) {
            if (b.scale == Scale::down2) ++depth;
            if (b.scale == Scale::up2) --depth;
            max_d = std::max(max_d, depth);
        }
        return max_d;
    }

    void validate() const {
        if (blocks.empty()) throw ConfigError("network has no blocks");
        int cur = input_channels;
        std::string prev = "input";
        std::vector<int> level(blocks.size());
        int depth = 0;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const BlockSpec& b = blocks[i];
            if (b.in_channels <= 0 || b.out_channels <= 0)
                throw ConfigError("block '" + b.name + "' has non-positive channel count");
            if (b.in_channels != cur)
                throw ConfigError("channel mismatch between '" + prev + "' (out=" +
                                  std::to_string(cur) + ") and '" + b.name +
                                  "' (in=" + std::to_string(b.in_channels) + ")");
            bool scale_ok = (b.kind == BlockKind::down_conv && b.scale == Scale::down2) ||
                            (b.kind == BlockKind::up_conv && b.scale == Scale::up2) ||
                            (b.kind != BlockKind::down_conv && b.kind != BlockKind::up_conv &&
                             b.scale == Scale::same);
            if (!scale_ok)
                throw ConfigError("block '" + b.name + "' kind/scale combination is invalid");
            if (b.kind == BlockKind::residual && b.in_channels != b.out_channels)
                throw ConfigError("residual block '" + b.name + "' must preserve channels");
            if (b.scale == Scale::down2) ++depth;
            if (b.scale == Scale::up2) --depth;
            if (depth < 0) throw ConfigError("block '" + b.name + "' upsamples above input level");
            level[i] = depth;
            cur = b.out_channels;
            prev = b.name;
        }
        if (cur != output_channels)
            throw ConfigError("last block '" + prev + "' outputs " + std::to_string(cur) +
                              " channels, config declares " + std::to_string(output_channels));
        std::unordered_map<std::string, int> seen;
        for (const auto& b : blocks)
            if (++seen[b.name] > 1) throw ConfigError("duplicate block name '" + b.name + "'");
        std::unordered_map<std::string, int> skip_targets;
        for (const auto& [src, dst] : skip_connections) {
            int si = block_index(src), di = block_index(dst);
            if (si < 0) throw ConfigError("skip source '" + src + "' is not a block");
            if (di < 0) throw ConfigError("skip target '" + dst + "' is not a block");
            if (blocks[static_cast<std::size_t>(di)].kind != BlockKind::up_conv)
                throw ConfigError("skip target '" + dst + "' is not an up_conv block");
            if (si >= di) throw ConfigError("skip '" + src + "' -> '" + dst + "' goes backwards");
            if (level[static_cast<std::size_t>(si)] != level[static_cast<std::size_t>(di)])
                throw ConfigError("skip '" + src + "' -> '" + dst +
                                  "' connects mismatched resolutions");
            if (++skip_targets[dst] > 1)
                throw ConfigError("up_conv '" + dst + "' has multiple skip sources");
        }
    }

    /// The default residual U-Net: 17 routable blocks over widths w/2w/4w.
    static NetworkConfig default_unet(int input_channels = 1, int output_channels = 1,
                                      int base_width = 16) {
        const int w1 = base_width, w2 = 2 * base_width, w3 = 4 * base_width;
        NetworkConfig cfg;
        cfg.input_channels = input_channels;
        cfg.output_channels = output_channels;
        cfg.base_width = base_width;
        auto B = [](std::string name, BlockKind kind, int in, int out, Scale sc) {
            return BlockSpec{std::move(name), kind, in, out, sc};
        };
        cfg.blocks = {
            B("init_conv", BlockKind::init_conv, input_channels, w1, Scale::same),
            B("enc_res1", BlockKind::residual, w1, w1, Scale::same),
            B("enc_down1", BlockKind::down_conv, w1, w2, Scale::down2),
            B("enc_res2", BlockKind::residual, w2, w2, Scale::same),
            B("enc_down2", BlockKind::down_conv, w2, w3, Scale::down2),
            B("enc_res3", BlockKind::residual, w3, w3, Scale::same),
            B("bot_res1", BlockKind::residual, w3, w3, Scale::same),
            B("bot_res2", BlockKind::residual, w3, w3, Scale::same),
            B("dec_up1", BlockKind::up_conv, w3, w2, Scale::up2),
            B("dec_res1", BlockKind::residual, w2, w2, Scale::same),
            B("dec_res2", BlockKind::residual, w2, w2, Scale::same),
            B("dec_up2", BlockKind::up_conv, w2, w1, Scale::up2),
            B("dec_res3", BlockKind::residual, w1, w1, Scale::same),
            B("dec_res4", BlockKind::residual, w1, w1, Scale::same),
            B("head_res1", BlockKind::residual, w1, w1, Scale::same),
            B("head_res2", BlockKind::residual, w1, w1, Scale::same),
            B("final_conv", BlockKind::final_conv, w1, output_channels, Scale::same),
        };
        cfg.skip_connections = {{"enc_res2", "dec_up1"}, {"enc_res1", "dec_up2"}};
        return cfg;
    }
};

/// Ordered, name-indexed parameter collection.
template <typename T>
class ParamStore {
public:
    int add(std::string name, Tensor<T> t) {
        index_.emplace(name, static_cast<int>(items_.size()));
        items_.emplace_back(std::move(name), std::move(t));
        return static_cast<int>(items_.size()) - 1;
    }

    int index_of(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? -1 : it->second;
    }

    Tensor<T>& at(const std::string& name) {
        int i = index_of(name);
        if (i < 0) throw std::out_of_range("no parameter named " + name);
        return items_[static_cast<std::size_t>(i)].second;
    }
    const Tensor<T>& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }

    std::size_t size() const { return items_.size(); }
    const std::string& name(std::size_t i) const { return items_[i].first; }
    Tensor<T>& tensor(std::size_t i) { return items_[i].second; }
    const Tensor<T>& tensor(std::size_t i) const { return items_[i].second; }

    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& [_, t] : items_) n += t.numel();
        return n;
    }

    bool operator==(const ParamStore& o) const { return items_ == o.items_; }

private:
    std::vector<std::pair<std::string, Tensor<T>>> items_;
    std::unordered_map<std::string, int> index_;
};

template <typename T>
struct SegmentationNetwork {
    NetworkConfig config;
    ParamStore<T> params;
    std::vector<std::uint8_t> trainable;  // parallel to params

    void set_all_trainable(bool v) {
        trainable.assign(params.size(), v ? 1 : 0);
    }

    /// Marks parameters of the first k blocks (enumeration order) trainable,
    /// the rest frozen.
    void set_first_k_trainable(int k) {
        if (k < 0 || k > config.num_routable_blocks())
            throw ConfigError("k out of range: " + std::to_string(k));
        trainable.assign(params.size(), 0);
        for (int bi = 0; bi < k; ++bi) {
            const std::string prefix = config.blocks[static_cast<std::size_t>(bi)].name + ".";
            for (std::size_t i = 0; i < params.size(); ++i)
                if (params.name(i).rfind(prefix, 0) == 0) trainable[i] = 1;
        }
    }
};

namespace detail_net {

constexpr double kNormEps = 1e-5;

template <typename T>
void init_conv_weight(Tensor<T>& w, int fan_in, Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < w.numel(); ++i)
        w[i] = static_cast<T>(rng.uniform(-s, s));
}

template <typename T>
void add_block_params(ParamStore<T>& ps, const NetworkConfig& cfg, int bi, Rng& rng) {
    const BlockSpec& b = cfg.blocks[static_cast<std::size_t>(bi)];
    const std::string& n = b.name;
    auto conv = [&](const std::string& tag, int out, int in, int k) {
        Tensor<T> w({k, k, in, out});
        init_conv_weight(w, in * k * k, rng);
        ps.add(n + "." + tag + ".w", std::move(w));
        ps.add(n + "." + tag + ".b", Tensor<T>({out}));
    };
    auto norm = [&](const std::string& tag, int c) {
        ps.add(n + "." + tag + ".g", Tensor<T>({c}, T(1)));
        ps.add(n + "." + tag + ".b", Tensor<T>({c}));
    };
    switch (b.kind) {
        case BlockKind::init_conv:
            conv("conv", b.out_channels, b.in_channels, 3);
            break;
        case BlockKind::residual:
            norm("norm1", b.in_channels);
            conv("conv1", b.out_channels, b.in_channels, 3);
            norm("norm2", b.out_channels);
            conv("conv2", b.out_channels, b.out_channels, 3);
            break;
        case BlockKind::down_conv:
            norm("norm", b.in_channels);
            conv("conv", b.out_channels, b.in_channels, 3);
            break;
        case BlockKind::up_conv: {
            norm("norm", b.in_channels);
            Tensor<T> wt({2, 2, b.in_channels, b.out_channels});
            init_conv_weight(wt, b.in_channels, rng);
            ps.add(n + ".convt.w", std::move(wt));
            ps.add(n + ".convt.b", Tensor<T>({b.out_channels}));
            int src = cfg.skip_source_of(bi);
            if (src >= 0) {
                int skip_ch = cfg.blocks[static_cast<std::size_t>(src)].out_channels;
                conv("merge", b.out_channels, b.out_channels + skip_ch, 1);
            }
            break;
        }
        case BlockKind::final_conv:
            norm("norm", b.in_channels);
            conv("conv", b.out_channels, b.in_channels, 1);
            break;
    }
}

}  // namespace detail_net

template <typename T = float>
SegmentationNetwork<T> build_network(const NetworkConfig& config, std::uint64_t seed) {
    config.validate();
    SegmentationNetwork<T> net;
    net.config = config;
    Rng rng(derive_seed(seed, "param_init"));
    for (int bi = 0; bi < config.num_routable_blocks(); ++bi)
        detail_net::add_block_params(net.params, config, bi, rng);
    net.set_all_trainable(true);
    return net;
}

/// Per-tape binding of a network's parameters to leaf vars.
template <typename T>
struct NetVars {
    std::vector<ad::Var<T>> vars;  // parallel to params

    ad::Var<T> at(const SegmentationNetwork<T>& net, const std::string& name) const {
        int i = net.params.index_of(name);
        if (i < 0) throw std::out_of_range("no parameter named " + name);
        return vars[static_cast<std::size_t>(i)];
    }
};

/// Leafs every parameter onto the tape. `with_grads` additionally respects the
/// per-parameter trainable mask; pass false for pure inference or a frozen copy.
template <typename T>
NetVars<T> bind(ad::Tape<T>& tape, const SegmentationNetwork<T>& net, bool with_grads) {
    NetVars<T> nv;
    nv.vars.reserve(net.params.size());
    for (std::size_t i = 0; i < net.params.size(); ++i)
        nv.vars.push_back(tape.leaf(net.params.tensor(i), with_grads && net.trainable[i] != 0));
    return nv;
}

/// Runs one block. `skip` must be present iff the config declares a skip into
/// this block.
template <typename T>
ad::Var<T> block_apply(ad::Tape<T>& tape, const SegmentationNetwork<T>& net, const NetVars<T>& nv,
                       int block_idx, ad::Var<T> x, std::optional<ad::Var<T>> skip) {
    const BlockSpec& b = net.config.blocks[static_cast<std::size_t>(block_idx)];
    const std::string& n = b.name;
    const T eps = static_cast<T>(detail_net::kNormEps);
    auto P = [&](const std::string& tag) { return nv.at(net, n + "." + tag); };
    switch (b.kind) {
        case BlockKind::init_conv:
            return ad::conv3x3(x, P("conv.w"), P("conv.b"));
        case BlockKind::residual: {
            auto h = ad::conv3x3(ad::relu(ad::instance_norm(x, P("norm1.g"), P("norm1.b"), eps)),
                                 P("conv1.w"), P("conv1.b"));
            h = ad::conv3x3(ad::relu(ad::instance_norm(h, P("norm2.g"), P("norm2.b"), eps)),
                            P("conv2.w"), P("conv2.b"));
            return ad::add(x, h);
        }
        case BlockKind::down_conv:
            return ad::conv3x3(ad::relu(ad::instance_norm(x, P("norm.g"), P("norm.b"), eps)),
                               P("conv.w"), P("conv.b"), 2);
        case BlockKind::up_conv: {
            auto u = ad::conv_transpose2x2(
                ad::relu(ad::instance_norm(x, P("norm.g"), P("norm.b"), eps)), P("convt.w"),
                P("convt.b"));
            bool has_skip = net.config.skip_source_of(block_idx) >= 0;
            if (has_skip != skip.has_value())
                throw std::logic_error("block '" + n + "': skip presence mismatch");
            if (!skip) return u;
            return ad::conv1x1(ad::concat_channels(u, *skip), P("merge.w"), P("merge.b"));
        }
        case BlockKind::final_conv:
            return ad::conv1x1(ad::relu(ad::instance_norm(x, P("norm.g"), P("norm.b"), eps)),
                               P("conv.w"), P("conv.b"));
    }
    throw std::logic_error("unreachable");
}

/// Composes blocks in declaration order, routing declared skips from the
/// producing block's output into the consuming up_conv. The callback maps
/// (block index, input, skip) to the block's output, so routed and plain
/// execution share one composition path.
template <typename T, typename BlockFn>
ad::Var<T> compose_blocks(const NetworkConfig& cfg, ad::Var<T> x, BlockFn&& fn) {
    std::unordered_map<int, ad::Var<T>> saved;  // producer index -> output
    std::vector<bool> needed(cfg.blocks.size(), false);
    for (const auto& [src, dst] : cfg.skip_connections)
        needed[static_cast<std::size_t>(cfg.block_index(src))] = true;
    ad::Var<T> cur = x;
    for (int bi = 0; bi < cfg.num_routable_blocks(); ++bi) {
        std::optional<ad::Var<T>> skip;
        int src = cfg.skip_source_of(bi);
        if (src >= 0) skip = saved.at(src);
        cur = fn(bi, cur, skip);
        if (needed[static_cast<std::size_t>(bi)]) saved.emplace(bi, cur);
    }
    return cur;
}

template <typename T>
void check_input(const NetworkConfig& cfg, const Tensor<T>& x) {
    if (x.ndim() != 4) throw DimensionError("input must be (B,C,H,W)");
    if (x.dim(1) != cfg.input_channels)
        throw DimensionError("input has " + std::to_string(x.dim(1)) + " channels, network wants " +
                             std::to_string(cfg.input_channels));
    const int div = 1 << cfg.max_depth();
    if (x.dim(2) % div || x.dim(3) % div)
        throw DimensionError("spatial dims " + std::to_string(x.dim(2)) + "x" +
                             std::to_string(x.dim(3)) + " not divisible by " + std::to_string(div));
}

template <typename T>
ad::Var<T> network_apply(ad::Tape<T>& tape, const SegmentationNetwork<T>& net, const NetVars<T>& nv,
                         ad::Var<T> x) {
    return compose_blocks(net.config, x,
                          [&](int bi, ad::Var<T> cur, std::optional<ad::Var<T>> skip) {
                              return block_apply(tape, net, nv, bi, cur, skip);
                          });
}

/// Inference convenience: pre-sigmoid logits for a batch. Input and output
/// follow the public (batch, channels, height, width) convention.
template <typename T>
Tensor<T> forward(const SegmentationNetwork<T>& net, const Tensor<T>& x) {
    check_input(net.config, x);
    ad::Tape<T> tape;
    NetVars<T> nv = bind(tape, net, false);
    ad::Var<T> out = network_apply(tape, net, nv, tape.constant(nchw_to_nhwc(x)));
    return nhwc_to_nchw(out.value());
}

/// The N routable blocks in execution order.
inline std::vector<BlockSpec> enumerate_blocks(const NetworkConfig& cfg) { return cfg.blocks; }

template <typename T>
std::vector<BlockSpec> enumerate_blocks(const SegmentationNetwork<T>& net) {
    return net.config.blocks;
}

/// Duplicates a pretrained network into a frozen copy and a trainable copy.
template <typename T>
std::pair<SegmentationNetwork<T>, SegmentationNetwork<T>> clone_for_finetuning(
    const SegmentationNetwork<T>& net) {
    SegmentationNetwork<T> frozen = net;
    frozen.set_all_trainable(false);
    SegmentationNetwork<T> tuned = net;
    tuned.set_all_trainable(true);
    return {std::move(frozen), std::move(tuned)};
}

}  // namespace spottunet::backbone
