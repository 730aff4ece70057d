#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#include "ssem/config.hpp"
#include "ssem/errors.hpp"

namespace ssem::cfg {

namespace {

std::string format_real(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_real(const std::string& s, double& out) {
    const auto* end = s.data() + s.size();
    auto res = std::from_chars(s.data(), end, out);
    return res.ec == std::errc{} && res.ptr == end && std::isfinite(out);
}

bool parse_integer(const std::string& s, std::int64_t& out) {
    const auto* end = s.data() + s.size();
    auto res = std::from_chars(s.data(), end, out);
    return res.ec == std::errc{} && res.ptr == end;
}

std::vector<KeyInfo> build_keys() {
    const ae::TrainConfig train;
    const reg::RegistrationConfig reg;
    const stack::AlignmentPlan plan;
    const synth::DeformStackOptions deform;
    using V = ValueType;
    return {
        {"arch", V::choice, "shallow7x7", "autoencoder preset", {"shallow7x7", "deep3x3"}},
        {"lambda", V::real, format_real(train.lambda), "weight-decay factor of the autoencoder loss", {}},
        {"train-lr", V::real, format_real(train.adam.lr), "ADAM learning rate for training", {}},
        {"batch-size", V::integer, std::to_string(train.batch_size), "patches per training step", {}},
        {"steps", V::integer, std::to_string(train.steps), "training steps", {}},
        {"patch-size", V::integer, std::to_string(train.patch_size), "training patch extent", {}},
        {"patch-count", V::integer, std::to_string(train.patch_count), "patches sampled from the stack", {}},
        {"seed", V::integer, std::to_string(train.seed), "seed for initialization and patch sampling", {}},
        {"adam-beta1", V::real, format_real(reg.adam.beta1), "ADAM first-moment decay", {}},
        {"adam-beta2", V::real, format_real(reg.adam.beta2), "ADAM second-moment decay", {}},
        {"adam-eps", V::real, format_real(reg.adam.eps), "ADAM epsilon", {}},
        {"alpha", V::real, format_real(reg.alpha), "weight of the displacement magnitude term", {}},
        {"beta", V::real, format_real(reg.beta), "smoothness weight of the column displacements", {}},
        {"gamma", V::real, format_real(reg.gamma), "smoothness weight of the row displacements", {}},
        {"lr", V::real, format_real(reg.adam.lr), "ADAM learning rate for registration", {}},
        {"iterations", V::integer, std::to_string(reg.iterations), "registration iterations", {}},
        {"grid-spacing", V::integer, std::to_string(reg.grid_spacing), "pixels between control points", {}},
        {"grid-minimum", V::integer, std::to_string(reg.grid_minimum), "minimum control points per axis", {}},
        {"drop-rate", V::real, format_real(reg.drop_rate), "initial loss-drop fraction", {}},
        {"drop-floor", V::real, format_real(reg.drop_floor), "drop rates below this become 0", {}},
        {"interpolation", V::choice, warp::to_string(reg.interpolation), "vector-map interpolation", {"bilinear", "tps"}},
        {"similarity", V::choice, reg::to_string(reg.similarity), "registration error", {"feature", "pixel"}},
        {"window", V::integer, std::to_string(plan.window), "neighbour sections per registration", {}},
        {"weights", V::choice, stack::to_string(plan.weights), "neighbour weight scheme", {"halving", "uniform"}},
        {"sigma", V::real, format_real(deform.sigma), "std. dev. of synthetic control-point displacements", {}},
        {"tps-points", V::integer, std::to_string(deform.points), "control points per synthetic deformation", {}},
        {"warp-seed", V::integer, std::to_string(deform.seed), "seed for synthetic deformations", {}},
        {"keep-first", V::boolean, deform.keep_first ? "true" : "false", "leave the first section undeformed", {}},
        {"heatmap-window", V::integer, "32", "NCC heatmap window", {}},
        {"heatmap-stride", V::integer, "16", "NCC heatmap stride", {}},
        {"dice-top-k", V::integer, "50", "labels scored by eval dice", {}},
    };
}

const KeyInfo* find_key(const std::string& key) {
    const auto& keys = known_keys();
    auto it = std::find_if(keys.begin(), keys.end(), [&](const KeyInfo& k) { return k.key == key; });
    return it == keys.end() ? nullptr : &*it;
}

} // namespace

const std::vector<KeyInfo>& known_keys() {
    static const std::vector<KeyInfo> keys = build_keys();
    return keys;
}

Config::Config() {
    for (const auto& k : known_keys()) values_[k.key] = k.default_value;
}

void Config::set(const std::string& key, const std::string& raw) {
    const auto* info = find_key(key);
    if (!info) throw ConfigError("unknown config key '" + key + "'");
    const auto value = trim(raw);
    const auto bad = [&](const std::string& expected) {
        return ConfigError("config key '" + key + "': cannot parse '" + value + "' as " + expected);
    };
    switch (info->type) {
        case ValueType::real: {
            double v;
            if (!parse_real(value, v)) throw bad("a number");
            break;
        }
        case ValueType::integer: {
            std::int64_t v;
            if (!parse_integer(value, v)) throw bad("an integer");
            if (v < 0) throw bad("a non-negative integer");
            break;
        }
        case ValueType::boolean:
            if (value != "true" && value != "false" && value != "1" && value != "0") throw bad("true or false");
            break;
        case ValueType::choice:
            if (std::find(info->choices.begin(), info->choices.end(), value) == info->choices.end()) {
                std::string list;
                for (const auto& c : info->choices) list += (list.empty() ? "" : "|") + c;
                throw bad(list);
            }
            break;
    }
    values_[key] = value;
}

void Config::load_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const auto where = origin + ":" + std::to_string(number) + ": ";
        if (eq == std::string::npos) throw ConfigError(where + "expected key=value, got '" + line + "'");
        try {
            set(trim(line.substr(0, eq)), line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
}

void Config::load_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    load_text(text.str(), path.string());
}

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

double Config::real(const std::string& key) const {
    double v = 0.0;
    parse_real(get(key), v);
    return v;
}

std::int64_t Config::integer(const std::string& key) const {
    std::int64_t v = 0;
    parse_integer(get(key), v);
    return v;
}

bool Config::boolean(const std::string& key) const {
    const auto& v = get(key);
    return v == "true" || v == "1";
}

void Config::echo(std::ostream& out) const {
    for (const auto& k : known_keys()) out << k.key << "=" << get(k.key) << "\n";
}

ae::ArchitectureSpec Config::architecture() const { return ae::ArchitectureSpec::from_preset(get("arch")); }

ae::TrainConfig Config::training() const {
    ae::TrainConfig t;
    t.lambda = real("lambda");
    t.adam = {real("train-lr"), real("adam-beta1"), real("adam-beta2"), real("adam-eps")};
    t.batch_size = integer("batch-size");
    t.steps = integer("steps");
    t.patch_size = integer("patch-size");
    t.patch_count = integer("patch-count");
    t.seed = static_cast<std::uint64_t>(integer("seed"));
    return t;
}

reg::RegistrationConfig Config::registration() const {
    reg::RegistrationConfig r;
    r.alpha = real("alpha");
    r.beta = real("beta");
    r.gamma = real("gamma");
    r.grid_spacing = integer("grid-spacing");
    r.grid_minimum = integer("grid-minimum");
    r.iterations = integer("iterations");
    r.adam = {real("lr"), real("adam-beta1"), real("adam-beta2"), real("adam-eps")};
    r.drop_rate = real("drop-rate");
    r.drop_floor = real("drop-floor");
    r.interpolation = warp::parse_interpolation(get("interpolation"));
    r.similarity = reg::parse_similarity(get("similarity"));
    return r;
}

stack::AlignmentPlan Config::alignment() const {
    stack::AlignmentPlan p;
    p.window = static_cast<std::size_t>(integer("window"));
    p.weights = stack::parse_weight_scheme(get("weights"));
    p.registration = registration();
    return p;
}

synth::DeformStackOptions Config::deformation() const {
    synth::DeformStackOptions d;
    d.sigma = real("sigma");
    d.points = static_cast<std::size_t>(integer("tps-points"));
    d.seed = static_cast<std::uint64_t>(integer("warp-seed"));
    d.keep_first = boolean("keep-first");
    return d;
}

} // namespace ssem::cfg
