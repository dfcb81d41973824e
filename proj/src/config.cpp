#include "uda/config.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <sstream>

#include "uda/io.hpp"

namespace uda {

namespace {

struct Entry {
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

// Shortest text that parses back to the same double.
std::string fmt(double v) {
    char buf[40];
    const auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return {buf, r.ptr};
}

double parse_double(const std::string& key, const std::string& s) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
    }
}

long long parse_int(const std::string& key, const std::string& s) {
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
        throw ConfigError("config key '" + key + "': expected an integer, got '" + s + "'");
    }
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) {
        throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + s + "'");
    }
    return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
    if (s == "0" || s == "false" || s == "no" || s == "off") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + s + "'");
}

std::vector<double> parse_list(const std::string& key, const std::string& s) {
    std::vector<double> out;
    if (s.empty() || s == "default") return out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) out.push_back(parse_double(key, item));
    return out;
}

std::string fmt_list(const std::vector<double>& v, const char* empty) {
    if (v.empty()) return empty;
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
    return out;
}

// Helpers binding a member reachable through `acc` to typed parse/format.
template <class Acc>
Entry real(std::string key, Acc acc) {
    return {key, [acc](const ExperimentConfig& c) { return fmt(acc(const_cast<ExperimentConfig&>(c))); },
            [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = parse_double(key, v); }};
}

template <class Acc>
Entry integer(std::string key, Acc acc) {
    return {key, [acc](const ExperimentConfig& c) { return std::to_string(acc(const_cast<ExperimentConfig&>(c))); },
            [acc, key](ExperimentConfig& c, const std::string& v) {
                acc(c) = static_cast<std::remove_reference_t<decltype(acc(c))>>(parse_int(key, v));
            }};
}

template <class Acc>
Entry boolean(std::string key, Acc acc) {
    return {key,
            [acc](const ExperimentConfig& c) { return std::string(acc(const_cast<ExperimentConfig&>(c)) ? "1" : "0"); },
            [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = parse_bool(key, v); }};
}

void rendering_entries(std::vector<Entry>& e, const std::string& prefix, ModalityRendering& (*get)(ExperimentConfig&)) {
    e.push_back(real(prefix + ".air", [get](ExperimentConfig& c) -> double& { return get(c).air; }));
    e.push_back(real(prefix + ".tissue", [get](ExperimentConfig& c) -> double& { return get(c).tissue; }));
    e.push_back({prefix + ".intensities",
                 [get](const ExperimentConfig& c) {
                     auto& r = get(const_cast<ExperimentConfig&>(c));
                     return fmt_list(std::vector<double>(r.class_intensity.begin() + 1, r.class_intensity.end()), "");
                 },
                 [get, prefix](ExperimentConfig& c, const std::string& v) {
                     auto vals = parse_list(prefix + ".intensities", v);
                     if (vals.size() != 4) throw ConfigError(prefix + ".intensities: expected 4 values");
                     vals.insert(vals.begin(), 0.0);
                     get(c).class_intensity = vals;
                 }});
    e.push_back({prefix + ".contrast",
                 [get](const ExperimentConfig& c) {
                     return std::string(get(const_cast<ExperimentConfig&>(c)).contrast ==
                                                ModalityRendering::Contrast::identity
                                            ? "identity"
                                            : "invert_gamma");
                 },
                 [get, prefix](ExperimentConfig& c, const std::string& v) {
                     if (v == "identity")
                         get(c).contrast = ModalityRendering::Contrast::identity;
                     else if (v == "invert_gamma")
                         get(c).contrast = ModalityRendering::Contrast::invert_gamma;
                     else
                         throw ConfigError(prefix + ".contrast: expected identity|invert_gamma");
                 }});
    e.push_back(real(prefix + ".gamma", [get](ExperimentConfig& c) -> double& { return get(c).gamma; }));
    e.push_back(real(prefix + ".noise", [get](ExperimentConfig& c) -> double& { return get(c).noise_sigma; }));
    e.push_back(real(prefix + ".bias", [get](ExperimentConfig& c) -> double& { return get(c).bias_amplitude; }));
    e.push_back(
        real(prefix + ".texture_scale", [get](ExperimentConfig& c) -> double& { return get(c).texture_scale; }));
    e.push_back(real(prefix + ".texture_amplitude",
                     [get](ExperimentConfig& c) -> double& { return get(c).texture_amplitude; }));
    e.push_back(real(prefix + ".blur", [get](ExperimentConfig& c) -> double& { return get(c).blur_sigma; }));
    e.push_back(real(prefix + ".jitter", [get](ExperimentConfig& c) -> double& { return get(c).intensity_jitter; }));
}

const std::vector<Entry>& registry() {
    static const std::vector<Entry> entries = [] {
        using C = ExperimentConfig;
        std::vector<Entry> e;
        e.push_back({"seed", [](const C& c) { return std::to_string(c.seed); },
                     [](C& c, const std::string& v) { c.seed = parse_u64("seed", v); }});
        e.push_back(integer("n_source", [](C& c) -> int& { return c.n_source; }));
        e.push_back(integer("n_target", [](C& c) -> int& { return c.n_target; }));
        e.push_back(integer("n_source_val", [](C& c) -> int& { return c.n_source_val; }));
        e.push_back(integer("n_target_val", [](C& c) -> int& { return c.n_target_val; }));
        e.push_back(integer("n_target_test", [](C& c) -> int& { return c.n_target_test; }));
        e.push_back(integer("height", [](C& c) -> int& { return c.data.phantom.height; }));
        e.push_back(integer("width", [](C& c) -> int& { return c.data.phantom.width; }));
        e.push_back(integer("depth", [](C& c) -> int& { return c.data.phantom.depth; }));
        e.push_back(integer("min_class_pixels", [](C& c) -> int& { return c.data.phantom.min_class_pixels; }));
        e.push_back(integer("max_attempts", [](C& c) -> int& { return c.data.phantom.max_attempts; }));
        rendering_entries(e, "source", [](C& c) -> ModalityRendering& { return c.data.source; });
        rendering_entries(e, "target", [](C& c) -> ModalityRendering& { return c.data.target; });

        e.push_back(boolean("augment", [](C& c) -> bool& { return c.train.augment; }));
        e.push_back(real("aug.rotation_deg", [](C& c) -> double& { return c.train.augmentation.rotation_deg; }));
        e.push_back(real("aug.translation_px", [](C& c) -> double& { return c.train.augmentation.translation_px; }));
        e.push_back(real("aug.shear", [](C& c) -> double& { return c.train.augmentation.shear; }));
        e.push_back(integer("aug.elastic_spacing", [](C& c) -> int& { return c.train.augmentation.elastic_spacing; }));
        e.push_back(real("aug.elastic_sigma", [](C& c) -> double& { return c.train.augmentation.elastic_sigma; }));
        e.push_back(real("aug.gamma_lo", [](C& c) -> double& { return c.train.augmentation.gamma_lo; }));
        e.push_back(real("aug.gamma_hi", [](C& c) -> double& { return c.train.augmentation.gamma_hi; }));
        e.push_back({"aug.normalization",
                     [](const C& c) {
                         return std::string(c.train.augmentation.normalization == IntensityNorm::minmax ? "minmax"
                                                                                                        : "none");
                     },
                     [](C& c, const std::string& v) {
                         if (v == "minmax")
                             c.train.augmentation.normalization = IntensityNorm::minmax;
                         else if (v == "none")
                             c.train.augmentation.normalization = IntensityNorm::none;
                         else
                             throw ConfigError("aug.normalization: expected minmax|none");
                     }});

        e.push_back(integer("net.base_channels", [](C& c) -> int& { return c.net.base_channels; }));
        e.push_back(integer("net.latent_channels", [](C& c) -> int& { return c.net.latent_channels; }));
        e.push_back(integer("net.ez_blocks", [](C& c) -> int& { return c.net.ez_blocks; }));
        e.push_back(integer("net.dz_blocks", [](C& c) -> int& { return c.net.dz_blocks; }));
        e.push_back(integer("net.seg_channels", [](C& c) -> int& { return c.net.seg_channels; }));
        e.push_back(integer("net.seg_blocks", [](C& c) -> int& { return c.net.seg_blocks; }));
        e.push_back(integer("net.disc_channels", [](C& c) -> int& { return c.net.disc_channels; }));
        e.push_back(integer("net.disc_downsample", [](C& c) -> int& { return c.net.disc_downsample; }));
        e.push_back(real("net.leaky_slope", [](C& c) -> double& { return c.net.leaky_slope; }));

        e.push_back(integer("source_epochs", [](C& c) -> int& { return c.train.source_epochs; }));
        e.push_back(integer("uda_epochs", [](C& c) -> int& { return c.train.uda_epochs; }));
        e.push_back(integer("oracle_epochs", [](C& c) -> int& { return c.train.oracle_epochs; }));
        e.push_back(integer("batch_size", [](C& c) -> int& { return c.train.batch_size; }));
        e.push_back(integer("uda_steps_per_epoch", [](C& c) -> int& { return c.train.uda_steps_per_epoch; }));
        e.push_back(integer("oracle_steps_per_epoch", [](C& c) -> int& { return c.train.oracle_steps_per_epoch; }));
        e.push_back(integer("max_steps", [](C& c) -> std::int64_t& { return c.train.max_steps; }));
        e.push_back(real("lr", [](C& c) -> double& { return c.train.lr; }));
        e.push_back(real("beta1", [](C& c) -> double& { return c.train.beta1; }));
        e.push_back(real("beta2", [](C& c) -> double& { return c.train.beta2; }));
        e.push_back(real("adam_eps", [](C& c) -> double& { return c.train.adam_eps; }));
        e.push_back(real("lambda_rec", [](C& c) -> double& { return c.train.weights.rec; }));
        e.push_back(real("lambda_kl", [](C& c) -> double& { return c.train.weights.kl; }));
        e.push_back(real("lambda_seg", [](C& c) -> double& { return c.train.weights.seg; }));
        e.push_back(real("lambda_adv", [](C& c) -> double& { return c.train.weights.adv; }));
        e.push_back(real("lambda_cyc", [](C& c) -> double& { return c.train.weights.cyc; }));
        e.push_back({"class_weights", [](const C& c) { return fmt_list(c.train.class_weights, "default"); },
                     [](C& c, const std::string& v) { c.train.class_weights = parse_list("class_weights", v); }});
        e.push_back({"kl_reduction",
                     [](const C& c) { return std::string(c.train.kl_reduction == KlReduction::sum ? "sum" : "mean"); },
                     [](C& c, const std::string& v) {
                         if (v == "sum")
                             c.train.kl_reduction = KlReduction::sum;
                         else if (v == "mean")
                             c.train.kl_reduction = KlReduction::mean;
                         else
                             throw ConfigError("kl_reduction: expected sum|mean");
                     }});
        e.push_back({"gan_mode",
                     [](const C& c) {
                         return std::string(c.train.gan_mode == GanMode::non_saturating ? "non_saturating" : "minimax");
                     },
                     [](C& c, const std::string& v) {
                         if (v == "non_saturating")
                             c.train.gan_mode = GanMode::non_saturating;
                         else if (v == "minimax")
                             c.train.gan_mode = GanMode::minimax;
                         else
                             throw ConfigError("gan_mode: expected non_saturating|minimax");
                     }});
        e.push_back(boolean("disable_kl", [](C& c) -> bool& { return c.train.disable_kl; }));
        e.push_back(boolean("disable_adv", [](C& c) -> bool& { return c.train.disable_adv; }));
        e.push_back(integer("disc_steps", [](C& c) -> int& { return c.train.disc_steps; }));
        e.push_back(integer("eval_every", [](C& c) -> int& { return c.train.eval_every; }));
        e.push_back(boolean("early_stop", [](C& c) -> bool& { return c.train.early_stop; }));
        e.push_back(integer("patience", [](C& c) -> int& { return c.train.patience; }));
        e.push_back({"test_latent",
                     [](const C& c) { return std::string(c.train.test_latent == TestLatent::mu ? "mu" : "sample"); },
                     [](C& c, const std::string& v) {
                         if (v == "mu")
                             c.train.test_latent = TestLatent::mu;
                         else if (v == "sample")
                             c.train.test_latent = TestLatent::sample;
                         else
                             throw ConfigError("test_latent: expected mu|sample");
                     }});
        e.push_back(boolean("init_target_from_source", [](C& c) -> bool& { return c.train.init_target_from_source; }));

        e.push_back(integer("target_scans", [](C& c) -> int& { return c.target_scans; }));
        e.push_back(boolean("few_shot", [](C& c) -> bool& { return c.few_shot; }));
        e.push_back(integer("few_shot_slices", [](C& c) -> int& { return c.few_shot_slices; }));
        e.push_back(integer("seeds", [](C& c) -> int& { return c.seeds; }));

        e.push_back({"metric_filtering",
                     [](const C& c) { return std::string(c.eval.filtering == Filtering::pred ? "pred" : "none"); },
                     [](C& c, const std::string& v) {
                         if (v == "pred")
                             c.eval.filtering = Filtering::pred;
                         else if (v == "none")
                             c.eval.filtering = Filtering::none;
                         else
                             throw ConfigError("metric_filtering: expected pred|none");
                     }});
        e.push_back(integer("connectivity", [](C& c) -> int& { return c.eval.connectivity; }));
        return e;
    }();
    return entries;
}

}  // namespace

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    for (const auto& e : registry()) {
        if (e.key == key) {
            e.set(*this, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

void ExperimentConfig::apply_text(const std::string& text, const std::string& origin) {
    for (const auto& [k, v] : parse_key_values(text, origin)) set(k, v);
}

void ExperimentConfig::apply_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    apply_text(read_text(path), path.string());
}

void ExperimentConfig::validate() const {
    if (n_source < 1 || n_target < 1) throw ConfigError("n_source and n_target must be >= 1");
    if (n_source_val < 0 || n_target_val < 0 || n_target_test < 0) throw ConfigError("split sizes must be >= 0");
    data.phantom.validate();
    if (net.num_classes != data.phantom.num_classes) throw ConfigError("network and phantom class counts differ");
    train.validate();
    if (target_scans < 1) throw ConfigError("target_scans must be >= 1");
    if (few_shot_slices < 3) throw ConfigError("few_shot_slices must be >= 3");
    if (seeds < 1) throw ConfigError("seeds must be >= 1");
    if (eval.connectivity != 6 && eval.connectivity != 26) throw ConfigError("connectivity must be 6 or 26");
}

std::string ExperimentConfig::to_text() const {
    std::string out;
    for (const auto& e : registry()) out += e.key + "=" + e.get(*this) + "\n";
    return out;
}

std::vector<std::string> ExperimentConfig::keys() const {
    std::vector<std::string> out;
    for (const auto& e : registry()) out.push_back(e.key);
    return out;
}

std::string ExperimentConfig::hash() const { return digest_hex(to_text()); }

bool deterministic_mode() {
    const char* v = std::getenv("DETERMINISTIC");
    return v && std::string(v) == "1";
}

}  // namespace uda
