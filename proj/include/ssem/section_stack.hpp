#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ssem/tensor.hpp"

namespace ssem {

enum class SectionKind { raw, label };

std::string to_string(SectionKind kind);
SectionKind parse_section_kind(const std::string& text);

// Ordered sequence of same-extent 2-D sections. Each section is produced on
// demand by a loader, so only the sections a caller holds are resident.
// Raw sections carry intensities in [0,1]; label sections carry integer IDs
// stored exactly in float.
class SectionStack {
public:
    using Loader = std::function<nd::Tensor()>;

    SectionStack() = default;
    SectionStack(std::int64_t height, std::int64_t width, SectionKind kind);

    static SectionStack from_images(std::vector<nd::Tensor> images, SectionKind kind);

    // Indices must be strictly increasing.
    void add_section(std::int64_t index, Loader loader);

    std::size_t depth() const noexcept { return loaders_.size(); }
    std::int64_t height() const noexcept { return height_; }
    std::int64_t width() const noexcept { return width_; }
    SectionKind kind() const noexcept { return kind_; }
    const std::vector<std::int64_t>& indices() const noexcept { return indices_; }

    // Loads the section at `position` (0-based) and checks its extents.
    nd::Tensor load(std::size_t position) const;
    std::vector<nd::Tensor> materialize() const;

private:
    std::int64_t height_ = 0;
    std::int64_t width_ = 0;
    SectionKind kind_ = SectionKind::raw;
    std::vector<std::int64_t> indices_;
    std::vector<Loader> loaders_;
};

} // namespace ssem
