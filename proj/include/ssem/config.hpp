#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "ssem/autoencoder.hpp"
#include "ssem/registration.hpp"
#include "ssem/stackalign.hpp"
#include "ssem/synthwarp.hpp"

namespace ssem::cfg {

enum class ValueType { real, integer, boolean, choice };

struct KeyInfo {
    std::string key;
    ValueType type;
    std::string default_value;
    std::string help;
    std::vector<std::string> choices;  // for ValueType::choice
};

// All recognized keys, in echo order.
const std::vector<KeyInfo>& known_keys();

// Flat key=value configuration. Every key starts at its default; values are
// checked against the key's type when set.
class Config {
public:
    Config();

    // Throws ConfigError naming the key if it is unknown or the value does not parse.
    void set(const std::string& key, const std::string& value);
    // Reads `key=value` lines; '#' starts a comment. Errors carry file:line.
    void load_file(const std::filesystem::path& path);
    void load_text(const std::string& text, const std::string& origin = "<text>");

    const std::string& get(const std::string& key) const;
    double real(const std::string& key) const;
    std::int64_t integer(const std::string& key) const;
    bool boolean(const std::string& key) const;

    // One `key=value` line per key; load_text(echo) reproduces the config.
    void echo(std::ostream& out) const;

    ae::ArchitectureSpec architecture() const;
    ae::TrainConfig training() const;
    reg::RegistrationConfig registration() const;
    stack::AlignmentPlan alignment() const;
    synth::DeformStackOptions deformation() const;
    std::int64_t heatmap_window() const { return integer("heatmap-window"); }
    std::int64_t heatmap_stride() const { return integer("heatmap-stride"); }
    std::size_t dice_top_k() const { return static_cast<std::size_t>(integer("dice-top-k")); }

private:
    std::map<std::string, std::string> values_;
};

} // namespace ssem::cfg
