#include "ssem/stackalign.hpp"

#include <cmath>
#include <deque>

#include "ssem/errors.hpp"

namespace ssem::stack {

using nd::Tensor;

std::string to_string(WeightScheme s) { return s == WeightScheme::halving ? "halving" : "uniform"; }

WeightScheme parse_weight_scheme(const std::string& text) {
    if (text == "halving") return WeightScheme::halving;
    if (text == "uniform") return WeightScheme::uniform;
    throw Error("unknown neighbour weighting '" + text + "' (expected halving or uniform)");
}

std::vector<double> neighbor_weights(std::size_t n, WeightScheme scheme) {
    std::vector<double> w(n, 1.0);
    if (scheme == WeightScheme::halving)
        for (std::size_t i = 0; i < n; ++i) w[i] = std::exp2(-static_cast<double>(i));
    return w;
}

Tensor resample_section(const Tensor& section, SectionKind kind, const warp::VectorMap& map, Resampling mode) {
    map.validate();
    if (section.rank() != 2 || section.dim(0) != map.image_h || section.dim(1) != map.image_w) {
        throw ShapeError("section " + nd::shape_string(section.shape()) + " does not match the vector map extents");
    }
    if (kind == SectionKind::label && mode == Resampling::bilinear) {
        throw Error("label sections must be resampled with nearest neighbour");
    }
    auto flow = warp::upsample_field(map);
    return mode == Resampling::bilinear ? warp::warp_image(section, flow) : warp::warp_image_nearest(section, flow);
}

void AlignmentPlan::validate() const {
    if (window < 1) throw Error("alignment window must be >= 1");
    registration.validate();
}

namespace {

// Counts section-sized images currently held.
struct Residency {
    std::size_t now = 0;
    std::size_t peak = 0;
    void acquire() { peak = std::max(peak, ++now); }
    void release() { --now; }
};

} // namespace

AlignmentReport align_stack(const SectionStack& raw, const SectionStack* labels, const ae::AutoencoderModel* model,
                            const AlignmentPlan& plan, const SectionSink& sink) {
    plan.validate();
    if (raw.kind() != SectionKind::raw) throw Error("alignment needs a raw section stack");
    if (raw.depth() < 2) throw Error("alignment needs at least 2 sections, got " + std::to_string(raw.depth()));
    if (labels != nullptr) {
        if (labels->kind() != SectionKind::label) throw Error("label stack must have kind label");
        if (labels->depth() != raw.depth() || labels->height() != raw.height() || labels->width() != raw.width()) {
            throw ShapeError("label stack does not match the raw stack");
        }
    }

    AlignmentReport report;
    Residency resident;
    std::deque<Tensor> window;  // aligned predecessors, nearest first

    for (std::size_t k = 0; k < raw.depth(); ++k) {
        AlignedSection out;
        out.position = k;
        out.index = raw.indices()[k];
        Tensor moving = raw.load(k);
        resident.acquire();
        if (k == 0) {
            auto [gh, gw] = warp::grid_extents_for(raw.height(), raw.width(), plan.registration.grid_spacing,
                                                   plan.registration.grid_minimum);
            out.map = warp::VectorMap::zeros(gh, gw, raw.height(), raw.width(), plan.registration.interpolation);
            out.image = std::move(moving);
            report.final_loss.push_back(0.0);
        } else {
            const std::vector<Tensor> refs(window.begin(), window.end());
            const auto weights = neighbor_weights(refs.size(), plan.weights);
            auto result = reg::register_image(moving, refs, weights, model, plan.registration);
            out.map = std::move(result.map);
            out.trace = std::move(result.trace);
            report.final_loss.push_back(out.trace.empty() ? 0.0 : out.trace.back());
            // The farthest neighbour is not needed for the next section.
            if (window.size() == plan.window) {
                window.pop_back();
                resident.release();
            }
            out.image = resample_section(moving, SectionKind::raw, out.map, Resampling::bilinear);
            resident.acquire();
            moving = Tensor();
            resident.release();
        }
        if (labels != nullptr) {
            out.labels = resample_section(labels->load(k), SectionKind::label, out.map, Resampling::nearest);
        }
        if (sink) sink(out);
        if (window.size() == plan.window) {
            window.pop_back();
            resident.release();
        }
        window.push_front(std::move(out.image));
        ++report.sections;
    }
    report.peak_resident = resident.peak;
    return report;
}

AlignedStack align_stack(const SectionStack& raw, const SectionStack* labels, const ae::AutoencoderModel* model,
                         const AlignmentPlan& plan) {
    AlignedStack out;
    out.report = align_stack(raw, labels, model, plan, [&out](const AlignedSection& s) {
        out.sections.push_back(s.image);
        if (s.labels) out.labels.push_back(*s.labels);
        out.maps.push_back(s.map);
    });
    return out;
}

} // namespace ssem::stack
