#pragma once

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "spottunet/routing.hpp"

namespace spottunet::checkpoint {

namespace fs = std::filesystem;
using json = nlohmann::json;
using backbone::BlockKind;
using backbone::BlockSpec;
using backbone::NetworkConfig;
using backbone::ParamStore;
using backbone::Scale;
using backbone::SegmentationNetwork;
using routing::DualPathModel;
using routing::GumbelConfig;
using routing::PolicyConfig;
using routing::PolicyNetwork;

constexpr int kFormatVersion = 1;

inline json network_config_to_json(const NetworkConfig& cfg) {
    json blocks = json::array();
    for (const auto& b : cfg.blocks)
        blocks.push_back({{"name", b.name},
                          {"kind", backbone::to_string(b.kind)},
                          {"in_channels", b.in_channels},
                          {"out_channels", b.out_channels},
                          {"scale", b.scale == Scale::same ? "same"
                                    : b.scale == Scale::down2 ? "down2"
                                                              : "up2"}});
    json skips = json::array();
    for (const auto& [src, dst] : cfg.skip_connections) skips.push_back({src, dst});
    return json{{"blocks", blocks},
                {"skip_connections", skips},
                {"input_channels", cfg.input_channels},
                {"output_channels", cfg.output_channels},
                {"base_width", cfg.base_width}};
}

inline NetworkConfig network_config_from_json(const json& j) {
    NetworkConfig cfg;
    for (const auto& bj : j.at("blocks")) {
        BlockSpec b;
        b.name = bj.at("name").get<std::string>();
        b.kind = backbone::block_kind_from_string(bj.at("kind").get<std::string>());
        b.in_channels = bj.at("in_channels").get<int>();
        b.out_channels = bj.at("out_channels").get<int>();
        const std::string s = bj.at("scale").get<std::string>();
        b.scale = s == "same" ? Scale::same : s == "down2" ? Scale::down2 : Scale::up2;
        cfg.blocks.push_back(std::move(b));
    }
    for (const auto& sj : j.at("skip_connections"))
        cfg.skip_connections.emplace_back(sj.at(0).get<std::string>(), sj.at(1).get<std::string>());
    cfg.input_channels = j.at("input_channels").get<int>();
    cfg.output_channels = j.at("output_channels").get<int>();
    cfg.base_width = j.at("base_width").get<int>();
    return cfg;
}

namespace detail_ckpt {

inline json param_index(const ParamStore<float>& ps, std::size_t& offset) {
    json index = json::array();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        index.push_back({{"name", ps.name(i)},
                         {"shape", ps.tensor(i).shape()},
                         {"dtype", "float32le"},
                         {"offset", offset}});
        offset += static_cast<std::size_t>(ps.tensor(i).numel());
    }
    return index;
}

inline void append_params(std::ofstream& bin, const ParamStore<float>& ps) {
    for (std::size_t i = 0; i < ps.size(); ++i)
        bin.write(reinterpret_cast<const char*>(ps.tensor(i).data()),
                  static_cast<std::streamsize>(ps.tensor(i).numel() * sizeof(float)));
}

inline void read_params(std::ifstream& bin, const json& index, ParamStore<float>& ps) {
    for (const auto& pj : index) {
        const std::string name = pj.at("name").get<std::string>();
        const auto shape = pj.at("shape").get<std::vector<int>>();
        Tensor<float> t(shape);
        bin.seekg(static_cast<std::streamoff>(pj.at("offset").get<std::size_t>() * sizeof(float)));
        bin.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(t.numel() * sizeof(float)));
        if (!bin) throw std::runtime_error("truncated params.bin while reading " + name);
        ps.add(name, std::move(t));
    }
}

}  // namespace detail_ckpt

/// Single-network checkpoint: manifest.json + params.bin (little-endian
/// float32, concatenated in index order). load(save(net)) is bit-identical.
inline void save_network(const SegmentationNetwork<float>& net, const fs::path& dir,
                         std::uint64_t seed = 0) {
    fs::create_directories(dir);
    std::size_t offset = 0;
    json manifest{{"format_version", kFormatVersion},
                  {"kind", "segmentation"},
                  {"seed", seed},
                  {"config", network_config_to_json(net.config)},
                  {"params", detail_ckpt::param_index(net.params, offset)},
                  {"trainable", net.trainable}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
    std::ofstream bin(dir / "params.bin", std::ios::binary);
    detail_ckpt::append_params(bin, net.params);
}

inline SegmentationNetwork<float> load_network(const fs::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw std::runtime_error("no manifest.json under " + dir.string());
    json manifest = json::parse(mf);
    if (manifest.at("kind").get<std::string>() != "segmentation")
        throw std::runtime_error("checkpoint at " + dir.string() + " is not a plain network");
    SegmentationNetwork<float> net;
    net.config = network_config_from_json(manifest.at("config"));
    std::ifstream bin(dir / "params.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("no params.bin under " + dir.string());
    detail_ckpt::read_params(bin, manifest.at("params"), net.params);
    net.trainable = manifest.at("trainable").get<std::vector<std::uint8_t>>();
    return net;
}

inline json policy_config_to_json(const PolicyConfig& pc) {
    return json{{"num_blocks", pc.num_blocks},
                {"downsample_factor", pc.downsample_factor},
                {"in_channels", pc.in_channels},
                {"stage_widths", pc.stage_widths}};
}

inline PolicyConfig policy_config_from_json(const json& j) {
    PolicyConfig pc;
    pc.num_blocks = j.at("num_blocks").get<int>();
    pc.downsample_factor = j.at("downsample_factor").get<int>();
    pc.in_channels = j.at("in_channels").get<int>();
    pc.stage_widths = j.at("stage_widths").get<std::vector<int>>();
    return pc;
}

/// Dual-path checkpoint: same format with frozen/tuned/policy sections and a
/// gumbel block recording tau, the straight-through flag, and the seed.
inline void save_dual_path(const DualPathModel<float>& m, const fs::path& dir) {
    fs::create_directories(dir);
    std::size_t offset = 0;
    json sections{{"frozen", detail_ckpt::param_index(m.frozen.params, offset)},
                  {"tuned", detail_ckpt::param_index(m.tuned.params, offset)},
                  {"policy", detail_ckpt::param_index(m.policy.params, offset)}};
    json manifest{{"format_version", kFormatVersion},
                  {"kind", "dual_path"},
                  {"config", network_config_to_json(m.frozen.config)},
                  {"policy_config", policy_config_to_json(m.policy.config)},
                  {"sections", sections},
                  {"gumbel", {{"tau", m.gumbel.tau}, {"hard", m.gumbel.hard}, {"seed", m.gumbel.seed}}}};
    std::ofstream(dir / "manifest.json") << manifest.dump(2) << "\n";
    std::ofstream bin(dir / "params.bin", std::ios::binary);
    detail_ckpt::append_params(bin, m.frozen.params);
    detail_ckpt::append_params(bin, m.tuned.params);
    detail_ckpt::append_params(bin, m.policy.params);
}

inline DualPathModel<float> load_dual_path(const fs::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw std::runtime_error("no manifest.json under " + dir.string());
    json manifest = json::parse(mf);
    if (manifest.at("kind").get<std::string>() != "dual_path")
        throw std::runtime_error("checkpoint at " + dir.string() + " is not dual-path");
    DualPathModel<float> m;
    m.frozen.config = network_config_from_json(manifest.at("config"));
    m.tuned.config = m.frozen.config;
    m.policy.config = policy_config_from_json(manifest.at("policy_config"));
    std::ifstream bin(dir / "params.bin", std::ios::binary);
    detail_ckpt::read_params(bin, manifest.at("sections").at("frozen"), m.frozen.params);
    detail_ckpt::read_params(bin, manifest.at("sections").at("tuned"), m.tuned.params);
    detail_ckpt::read_params(bin, manifest.at("sections").at("policy"), m.policy.params);
    m.frozen.set_all_trainable(false);
    m.tuned.set_all_trainable(true);
    const auto& g = manifest.at("gumbel");
    m.gumbel.tau = g.at("tau").get<double>();
    m.gumbel.hard = g.at("hard").get<bool>();
    m.gumbel.seed = g.at("seed").get<std::uint64_t>();
    m.validate();
    return m;
}

}  // namespace spottunet::checkpoint
