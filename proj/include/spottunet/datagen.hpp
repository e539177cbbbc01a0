#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

#include "spottunet/core/rng.hpp"
#include "spottunet/core/tensor.hpp"
#include "spottunet/metrics.hpp"

namespace spottunet::datagen {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// One scanner-like rendering of the shared anatomy. Tissue classes are
/// 0 = background, 1 = skull ring, 2 = brain; contrast_levels holds their
/// mean intensities in that order.
struct DomainSpec {
    std::string domain_id;
    double gamma = 1.0;
    double bias_amp = 0.0;
    double noise_sigma = 0.0;
    std::array<double, 3> contrast_levels = {0.05, 0.85, 0.45};
    double blur_sigma = 0.0;

    void validate() const {
        if (domain_id.empty()) throw ConfigError("domain needs an id");
        if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
        if (bias_amp < 0.0 || noise_sigma < 0.0 || blur_sigma < 0.0)
            throw ConfigError("bias/noise/blur amplitudes must be non-negative");
        for (double c : contrast_levels)
            if (!(c > 0.0 && c <= 1.0)) throw ConfigError("contrast levels must lie in (0,1]");
    }

    bool is_identity() const {
        return gamma == 1.0 && bias_amp == 0.0 && noise_sigma == 0.0 && blur_sigma == 0.0;
    }
};

struct Sample {
    Tensor<float> image;        // (H,W), intensities in [0,1]
    metrics::BinaryMask mask;   // brain region, invariant across domains
    std::string domain_id;
    int sample_id = 0;
};

struct ScarcitySetup {
    int slices_available = 0;
};

struct Anatomy {
    std::vector<std::uint8_t> tissue;  // (H,W) row-major class labels
    metrics::BinaryMask mask;
    int height = 0, width = 0;
};

/// Smooth random head: a Fourier-perturbed closed contour with a brain region
/// (the mask) inside a skull ring. Deterministic per seed.
inline Anatomy generate_anatomy(std::uint64_t seed, int height, int width) {
    if (height < 32 || width < 32 || height % 8 || width % 8)
        throw ConfigError("anatomy wants H, W >= 32 and divisible by 8");
    Rng rng(derive_seed(seed, "anatomy"));
    const double s = std::min(height, width);
    const double cy = height / 2.0 + rng.uniform(-0.06, 0.06) * s;
    const double cx = width / 2.0 + rng.uniform(-0.06, 0.06) * s;
    const double r0 = rng.uniform(0.30, 0.40) * s;
    const double brain_frac = rng.uniform(0.68, 0.80);
    std::array<double, 4> amp_head, phase_head;
    std::array<double, 3> amp_brain, phase_brain;
    for (int k = 0; k < 4; ++k) {
        amp_head[static_cast<std::size_t>(k)] = rng.uniform(-0.07, 0.07);
        phase_head[static_cast<std::size_t>(k)] = rng.uniform(0, 6.283185307179586);
    }
    for (int k = 0; k < 3; ++k) {
        amp_brain[static_cast<std::size_t>(k)] = rng.uniform(-0.05, 0.05);
        phase_brain[static_cast<std::size_t>(k)] = rng.uniform(0, 6.283185307179586);
    }
    auto radius = [](double theta, double base, const double* amp, const double* phase, int n) {
        double r = 1.0;
        for (int k = 0; k < n; ++k) r += amp[k] * std::cos((k + 2) * theta + phase[k]);
        return base * r;
    };

    Anatomy a;
    a.height = height;
    a.width = width;
    a.tissue.assign(static_cast<std::size_t>(height) * width, 0);
    std::vector<std::uint8_t> mask_vals(static_cast<std::size_t>(height) * width, 0);
    for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j) {
            const double dy = i - cy, dx = j - cx;
            const double rho = std::sqrt(dy * dy + dx * dx);
            const double theta = std::atan2(dy, dx);
            const double rh = radius(theta, r0, amp_head.data(), phase_head.data(), 4);
            if (rho >= rh) continue;
            double rb = radius(theta, brain_frac * r0, amp_brain.data(), phase_brain.data(), 3);
            rb = std::min(rb, rh - 2.0);  // brain strictly inside the skull ring
            const std::size_t p = static_cast<std::size_t>(i) * width + j;
            if (rho < rb) {
                a.tissue[p] = 2;
                mask_vals[p] = 1;
            } else {
                a.tissue[p] = 1;
            }
        }
    a.mask = metrics::BinaryMask{{height, width}, {1.0, 1.0}, std::move(mask_vals)};
    return a;
}

namespace detail_gen {

inline void gaussian_blur_inplace(std::vector<float>& img, int h, int w, double sigma) {
    if (sigma <= 0.0) return;
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double norm = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
        norm += k[static_cast<std::size_t>(i + r)];
    }
    for (auto& v : k) v /= norm;
    std::vector<float> tmp(img.size());
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double acc = 0.0;
            for (int d = -r; d <= r; ++d) {
                int jj = std::clamp(j + d, 0, w - 1);
                acc += k[static_cast<std::size_t>(d + r)] * img[static_cast<std::size_t>(i) * w + jj];
            }
            tmp[static_cast<std::size_t>(i) * w + j] = static_cast<float>(acc);
        }
    for (int j = 0; j < w; ++j)
        for (int i = 0; i < h; ++i) {
            double acc = 0.0;
            for (int d = -r; d <= r; ++d) {
                int ii = std::clamp(i + d, 0, h - 1);
                acc += k[static_cast<std::size_t>(d + r)] * tmp[static_cast<std::size_t>(ii) * w + j];
            }
            img[static_cast<std::size_t>(i) * w + j] = static_cast<float>(acc);
        }
}

}  // namespace detail_gen

/// Renders one anatomy under a domain's intensity model:
/// clamp01(blur(contrast(tissue) * bias_field + noise)) ^ gamma.
/// The mask is untouched by construction.
inline Tensor<float> render_domain(const Anatomy& anatomy, const DomainSpec& spec, Rng& rng) {
    spec.validate();
    const int h = anatomy.height, w = anatomy.width;
    std::vector<float> img(static_cast<std::size_t>(h) * w);

    // multiplicative low-frequency bias field, mean ~1
    const int nwaves = spec.bias_amp > 0.0 ? 2 + rng.uniform_int(3) : 0;
    std::vector<std::array<double, 4>> waves;  // fy, fx, phy, phx
    for (int k = 0; k < nwaves; ++k)
        waves.push_back({rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5),
                         rng.uniform(0, 6.283185307179586), rng.uniform(0, 6.283185307179586)});

    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * w + j;
            double v = spec.contrast_levels[anatomy.tissue[p]];
            if (nwaves > 0) {
                double f = 0.0;
                for (const auto& wv : waves)
                    f += std::cos(6.283185307179586 * wv[0] * i / h + wv[2]) *
                         std::cos(6.283185307179586 * wv[1] * j / w + wv[3]);
                v *= 1.0 + spec.bias_amp * f / nwaves;
            }
            if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
            img[p] = static_cast<float>(v);
        }

    detail_gen::gaussian_blur_inplace(img, h, w, spec.blur_sigma);

    for (auto& v : img) {
        double u = std::clamp(static_cast<double>(v), 0.0, 1.0);
        v = static_cast<float>(spec.gamma == 1.0 ? u : std::pow(u, spec.gamma));
    }
    return Tensor<float>({h, w}, std::move(img));
}

/// Monotone intensity remap of `target` so its histogram matches `reference`
/// (256-bin quantile mapping). Output values are bin centers in [0,1].
inline Tensor<float> histogram_match(const Tensor<float>& target, const Tensor<float>& reference) {
    constexpr int kBins = 256;
    auto bin_of = [](float v) {
        int b = static_cast<int>(v * kBins);
        return std::clamp(b, 0, kBins - 1);
    };
    std::array<double, kBins> cdf_t{}, cdf_r{};
    for (std::int64_t i = 0; i < target.numel(); ++i) cdf_t[static_cast<std::size_t>(bin_of(target[i]))] += 1.0;
    for (std::int64_t i = 0; i < reference.numel(); ++i) cdf_r[static_cast<std::size_t>(bin_of(reference[i]))] += 1.0;
    for (int b = 1; b < kBins; ++b) {
        cdf_t[static_cast<std::size_t>(b)] += cdf_t[static_cast<std::size_t>(b - 1)];
        cdf_r[static_cast<std::size_t>(b)] += cdf_r[static_cast<std::size_t>(b - 1)];
    }
    for (int b = 0; b < kBins; ++b) {
        cdf_t[static_cast<std::size_t>(b)] /= static_cast<double>(target.numel());
        cdf_r[static_cast<std::size_t>(b)] /= static_cast<double>(reference.numel());
    }
    std::array<float, kBins> lut{};
    int j = 0;
    for (int b = 0; b < kBins; ++b) {
        while (j < kBins - 1 && cdf_r[static_cast<std::size_t>(j)] < cdf_t[static_cast<std::size_t>(b)] - 1e-12)
            ++j;
        lut[static_cast<std::size_t>(b)] = static_cast<float>((j + 0.5) / kBins);
    }
    Tensor<float> out(target.shape());
    for (std::int64_t i = 0; i < target.numel(); ++i)
        out[i] = lut[static_cast<std::size_t>(bin_of(target[i]))];
    return out;
}

struct SplitIds {
    std::vector<int> train, val, test;
};

struct DatasetConfig {
    int image_size = 64;
    int samples_per_domain = 40;
    int train_count = 28;
    int val_count = 4;
    int test_count = 8;
    double spacing_mm = 1.0;
    std::uint64_t seed = 0;
    std::vector<DomainSpec> domains;

    void validate() const {
        if (train_count + val_count + test_count != samples_per_domain)
            throw ConfigError("split counts must sum to samples_per_domain");
        if (domains.empty()) throw ConfigError("dataset needs at least one domain");
        for (const auto& d : domains) d.validate();
    }
};

/// The canonical domain plus five shifted scanners, calibrated so that a
/// source-trained baseline degrades clearly on every shifted domain.
inline std::vector<DomainSpec> default_domain_specs() {
    std::vector<DomainSpec> d(6);
    d[0].domain_id = "d0_canonical";
    d[1].domain_id = "d1_gamma";
    d[1].gamma = 5.0;
    d[2].domain_id = "d2_contrast";
    d[2].contrast_levels = {0.40, 0.20, 0.80};
    d[2].noise_sigma = 0.02;
    d[3].domain_id = "d3_bias";
    d[3].bias_amp = 1.0;
    d[3].gamma = 0.40;
    d[3].noise_sigma = 0.06;
    d[4].domain_id = "d4_noise";
    d[4].noise_sigma = 0.40;
    d[4].blur_sigma = 1.4;
    d[4].gamma = 1.8;
    d[5].domain_id = "d5_mixed";
    d[5].contrast_levels = {0.20, 0.55, 0.35};
    d[5].gamma = 2.4;
    d[5].bias_amp = 0.50;
    d[5].noise_sigma = 0.12;
    d[5].blur_sigma = 0.6;
    return d;
}

inline DatasetConfig desk_dataset_config(std::uint64_t seed = 17) {
    DatasetConfig cfg;
    cfg.seed = seed;
    cfg.domains = default_domain_specs();
    return cfg;
}

/// In-memory dataset: every domain renders the same anatomies (shared by
/// sample_id), so all domain shift is intensity-level by construction.
/// Splits are by sample_id and identical across domains.
struct Dataset {
    DatasetConfig config;
    std::vector<std::string> domain_ids;
    std::map<std::string, std::vector<Sample>> samples;
    SplitIds splits;

    const DomainSpec& spec_of(const std::string& domain) const {
        for (const auto& d : config.domains)
            if (d.domain_id == domain) return d;
        throw ConfigError("unknown domain: " + domain);
    }

    const Sample& at(const std::string& domain, int sample_id) const {
        auto it = samples.find(domain);
        if (it == samples.end()) throw ConfigError("unknown domain: " + domain);
        return it->second.at(static_cast<std::size_t>(sample_id));
    }

    std::vector<const Sample*> split(const std::string& domain, const std::vector<int>& ids) const {
        std::vector<const Sample*> out;
        out.reserve(ids.size());
        for (int id : ids) out.push_back(&at(domain, id));
        return out;
    }

    std::vector<const Sample*> train_split(const std::string& d) const { return split(d, splits.train); }
    std::vector<const Sample*> val_split(const std::string& d) const { return split(d, splits.val); }
    std::vector<const Sample*> test_split(const std::string& d) const { return split(d, splits.test); }
};

inline Dataset build_dataset(const DatasetConfig& cfg) {
    cfg.validate();
    Dataset ds;
    ds.config = cfg;
    for (int id = 0; id < cfg.train_count; ++id) ds.splits.train.push_back(id);
    for (int id = 0; id < cfg.val_count; ++id) ds.splits.val.push_back(cfg.train_count + id);
    for (int id = 0; id < cfg.test_count; ++id)
        ds.splits.test.push_back(cfg.train_count + cfg.val_count + id);
    for (const auto& spec : cfg.domains) {
        ds.domain_ids.push_back(spec.domain_id);
        auto& vec = ds.samples[spec.domain_id];
        vec.reserve(static_cast<std::size_t>(cfg.samples_per_domain));
        for (int id = 0; id < cfg.samples_per_domain; ++id) {
            Anatomy anatomy =
                generate_anatomy(derive_seed(cfg.seed, "sample", id), cfg.image_size, cfg.image_size);
            Rng render_rng(derive_seed(cfg.seed, "render", spec.domain_id, id));
            Sample s;
            s.image = render_domain(anatomy, spec, render_rng);
            s.mask = anatomy.mask;
            s.mask.spacing = {cfg.spacing_mm, cfg.spacing_mm};
            s.domain_id = spec.domain_id;
            s.sample_id = id;
            vec.push_back(std::move(s));
        }
    }
    return ds;
}

/// Deterministic scarce subset of the training split (never touches val/test).
inline std::vector<int> sample_scarce_subset(const Dataset& ds, const ScarcitySetup& setup,
                                             std::uint64_t seed) {
    if (setup.slices_available <= 0)
        throw ConfigError("scarcity setup must request at least one slice");
    if (setup.slices_available > static_cast<int>(ds.splits.train.size()))
        throw ConfigError("requested " + std::to_string(setup.slices_available) +
                          " slices but the training pool has " +
                          std::to_string(ds.splits.train.size()));
    std::vector<int> pool = ds.splits.train;
    Rng rng(derive_seed(seed, "scarce_subset"));
    rng.shuffle(pool);
    pool.resize(static_cast<std::size_t>(setup.slices_available));
    std::sort(pool.begin(), pool.end());
    return pool;
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

inline json domain_to_json(const DomainSpec& d) {
    return json{{"domain_id", d.domain_id},
                {"gamma", d.gamma},
                {"bias_amp", d.bias_amp},
                {"noise_sigma", d.noise_sigma},
                {"contrast_levels", d.contrast_levels},
                {"blur_sigma", d.blur_sigma}};
}

inline DomainSpec domain_from_json(const json& j) {
    DomainSpec d;
    d.domain_id = j.at("domain_id").get<std::string>();
    d.gamma = j.at("gamma").get<double>();
    d.bias_amp = j.at("bias_amp").get<double>();
    d.noise_sigma = j.at("noise_sigma").get<double>();
    auto c = j.at("contrast_levels");
    for (int k = 0; k < 3; ++k) d.contrast_levels[static_cast<std::size_t>(k)] = c.at(k).get<double>();
    d.blur_sigma = j.at("blur_sigma").get<double>();
    return d;
}

inline json dataset_config_to_json(const DatasetConfig& cfg) {
    json domains = json::array();
    for (const auto& d : cfg.domains) domains.push_back(domain_to_json(d));
    return json{{"image_size", cfg.image_size},
                {"samples_per_domain", cfg.samples_per_domain},
                {"train_count", cfg.train_count},
                {"val_count", cfg.val_count},
                {"test_count", cfg.test_count},
                {"spacing_mm", cfg.spacing_mm},
                {"seed", cfg.seed},
                {"domains", domains}};
}

inline DatasetConfig dataset_config_from_json(const json& j) {
    DatasetConfig cfg;
    cfg.image_size = j.at("image_size").get<int>();
    cfg.samples_per_domain = j.at("samples_per_domain").get<int>();
    cfg.train_count = j.at("train_count").get<int>();
    cfg.val_count = j.at("val_count").get<int>();
    cfg.test_count = j.at("test_count").get<int>();
    cfg.spacing_mm = j.at("spacing_mm").get<double>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& dj : j.at("domains")) cfg.domains.push_back(domain_from_json(dj));
    return cfg;
}

namespace detail_gen {

template <typename T>
void write_raw(const fs::path& p, const T* data, std::size_t count) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + p.string());
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
}

template <typename T>
std::vector<T> read_raw(const fs::path& p, std::size_t count) {
    std::ifstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + p.string());
    std::vector<T> out(count);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(T)));
    if (static_cast<std::size_t>(f.gcount()) != count * sizeof(T))
        throw std::runtime_error("short read on " + p.string());
    return out;
}

}  // namespace detail_gen

/// Layout: <root>/<domain>/<id>.img + .msk + .json sidecar, plus a top-level
/// dataset.json with the full config and fixed split assignment.
inline void save_dataset(const Dataset& ds, const fs::path& root) {
    fs::create_directories(root);
    json top = dataset_config_to_json(ds.config);
    top["format_version"] = 1;
    top["splits"] = json{{"train", ds.splits.train}, {"val", ds.splits.val}, {"test", ds.splits.test}};
    std::ofstream(root / "dataset.json") << top.dump(2) << "\n";
    for (const auto& [domain, vec] : ds.samples) {
        fs::create_directories(root / domain);
        for (const Sample& s : vec) {
            const std::string base = std::to_string(s.sample_id);
            detail_gen::write_raw(root / domain / (base + ".img"), s.image.data(),
                                  static_cast<std::size_t>(s.image.numel()));
            detail_gen::write_raw(root / domain / (base + ".msk"), s.mask.values.data(),
                                  s.mask.values.size());
            json side{{"shape", {s.image.dim(0), s.image.dim(1)}},
                      {"dtype", {{"img", "float32le"}, {"msk", "uint8"}}},
                      {"spacing", s.mask.spacing},
                      {"domain_id", s.domain_id},
                      {"generator_seed", ds.config.seed},
                      {"sample_id", s.sample_id}};
            std::ofstream(root / domain / (base + ".json")) << side.dump(2) << "\n";
        }
    }
}

inline Dataset load_dataset(const fs::path& root) {
    std::ifstream f(root / "dataset.json");
    if (!f) throw std::runtime_error("no dataset.json under " + root.string());
    json top = json::parse(f);
    Dataset ds;
    ds.config = dataset_config_from_json(top);
    ds.splits.train = top.at("splits").at("train").get<std::vector<int>>();
    ds.splits.val = top.at("splits").at("val").get<std::vector<int>>();
    ds.splits.test = top.at("splits").at("test").get<std::vector<int>>();
    const int hw = ds.config.image_size;
    for (const auto& spec : ds.config.domains) {
        ds.domain_ids.push_back(spec.domain_id);
        auto& vec = ds.samples[spec.domain_id];
        for (int id = 0; id < ds.config.samples_per_domain; ++id) {
            const std::string base = std::to_string(id);
            Sample s;
            s.image = Tensor<float>({hw, hw}, detail_gen::read_raw<float>(
                                                  root / spec.domain_id / (base + ".img"),
                                                  static_cast<std::size_t>(hw) * hw));
            s.mask = metrics::BinaryMask{{hw, hw},
                                         {ds.config.spacing_mm, ds.config.spacing_mm},
                                         detail_gen::read_raw<std::uint8_t>(
                                             root / spec.domain_id / (base + ".msk"),
                                             static_cast<std::size_t>(hw) * hw)};
            s.domain_id = spec.domain_id;
            s.sample_id = id;
            vec.push_back(std::move(s));
        }
    }
    return ds;
}

}  // namespace spottunet::datagen
