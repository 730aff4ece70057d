#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "ssem/registration.hpp"
#include "ssem/section_stack.hpp"

namespace ssem::stack {

enum class WeightScheme { halving, uniform };

std::string to_string(WeightScheme s);
WeightScheme parse_weight_scheme(const std::string& text);

// Weights for the n nearest previously aligned neighbours, nearest first.
// halving: 2^(1-i) for i = 1..n; uniform: all 1.
std::vector<double> neighbor_weights(std::size_t n, WeightScheme scheme);

enum class Resampling { bilinear, nearest };

// Applies a vector map to a section. Label sections only accept nearest
// resampling.
nd::Tensor resample_section(const nd::Tensor& section, SectionKind kind, const warp::VectorMap& map,
                            Resampling mode);

struct AlignmentPlan {
    std::size_t window = 3;  // neighbours per registration
    WeightScheme weights = WeightScheme::halving;
    reg::RegistrationConfig registration{};

    void validate() const;
};

struct AlignedSection {
    std::size_t position = 0;
    std::int64_t index = 0;
    nd::Tensor image;
    std::optional<nd::Tensor> labels;
    warp::VectorMap map;
    std::vector<double> trace;
};

using SectionSink = std::function<void(const AlignedSection&)>;

struct AlignmentReport {
    std::size_t sections = 0;
    // Largest number of section-sized images held at once.
    std::size_t peak_resident = 0;
    std::vector<double> final_loss;  // per section, 0 for the anchor
};

// Sequential alignment: section 0 is the anchor and stays unchanged; every
// later section is registered against up to `window` already aligned
// predecessors and handed to the sink, after which only the window is kept.
// If `labels` is given, each label section is resampled (nearest) with the
// map of the matching raw section.
AlignmentReport align_stack(const SectionStack& raw, const SectionStack* labels, const ae::AutoencoderModel* model,
                            const AlignmentPlan& plan, const SectionSink& sink);

struct AlignedStack {
    std::vector<nd::Tensor> sections;
    std::vector<nd::Tensor> labels;
    std::vector<warp::VectorMap> maps;
    AlignmentReport report;
};

AlignedStack align_stack(const SectionStack& raw, const SectionStack* labels, const ae::AutoencoderModel* model,
                         const AlignmentPlan& plan);

} // namespace ssem::stack
