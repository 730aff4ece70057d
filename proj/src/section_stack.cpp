#include "ssem/section_stack.hpp"

#include <memory>

namespace ssem {

std::string to_string(SectionKind kind) { return kind == SectionKind::raw ? "raw" : "label"; }

SectionKind parse_section_kind(const std::string& text) {
    if (text == "raw") return SectionKind::raw;
    if (text == "label") return SectionKind::label;
    throw Error("unknown section kind '" + text + "' (expected raw or label)");
}

SectionStack::SectionStack(std::int64_t height, std::int64_t width, SectionKind kind)
    : height_(height), width_(width), kind_(kind) {}

SectionStack SectionStack::from_images(std::vector<nd::Tensor> images, SectionKind kind) {
    if (images.empty()) return SectionStack(0, 0, kind);
    SectionStack stack(images.front().dim(0), images.front().dim(1), kind);
    for (std::size_t i = 0; i < images.size(); ++i) {
        auto shared = std::make_shared<const nd::Tensor>(std::move(images[i]));
        stack.add_section(static_cast<std::int64_t>(i), [shared] { return *shared; });
    }
    return stack;
}

void SectionStack::add_section(std::int64_t index, Loader loader) {
    if (!indices_.empty() && index <= indices_.back()) {
        throw Error("section index " + std::to_string(index) + " does not follow " +
                    std::to_string(indices_.back()));
    }
    indices_.push_back(index);
    loaders_.push_back(std::move(loader));
}

nd::Tensor SectionStack::load(std::size_t position) const {
    const auto index = indices_.at(position);
    nd::Tensor section;
    try {
        section = loaders_[position]();
    } catch (const std::exception& e) {
        throw IoError("section " + std::to_string(index) + ": " + e.what());
    }
    if (section.rank() != 2 || section.dim(0) != height_ || section.dim(1) != width_) {
        throw ShapeError("section " + std::to_string(index) + " has extents " + nd::shape_string(section.shape()) +
                         ", stack expects [" + std::to_string(height_) + "x" + std::to_string(width_) + "]");
    }
    return section;
}

std::vector<nd::Tensor> SectionStack::materialize() const {
    std::vector<nd::Tensor> out;
    out.reserve(depth());
    for (std::size_t i = 0; i < depth(); ++i) out.push_back(load(i));
    return out;
}

} // namespace ssem
