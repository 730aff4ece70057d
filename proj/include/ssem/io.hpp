#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ssem/autoencoder.hpp"
#include "ssem/section_stack.hpp"
#include "ssem/warpfield.hpp"

namespace ssem::io {

namespace fs = std::filesystem;

// ---- images ---------------------------------------------------------------

// Reads an 8- or 16-bit grayscale PNG. Raw images are scaled to [0,1]; label
// images keep their integer values.
nd::Tensor load_image(const fs::path& path, SectionKind kind);

// Raw: clamped to [0,1] and written 8-bit. Label: written 16-bit; values must
// be integers in [0, 65535].
void save_image(const nd::Tensor& image, const fs::path& path, SectionKind kind);

// Linearly maps [lo, hi] to 8-bit gray, for visualizing arbitrary-range data.
void save_image_scaled(const nd::Tensor& image, const fs::path& path, float lo, float hi);

// ---- stacks -----------------------------------------------------------------

// Stack of the images in `dir` named by zero-padded numeric indices
// (e.g. 000.png). Sections load lazily. Index gaps are reported on `warn`.
SectionStack load_stack(const fs::path& dir, SectionKind kind, std::ostream* warn = nullptr);

// Writes sections as <index>.png, zero-padded to at least 3 digits. An
// existing non-empty directory is refused unless `force` is set.
void save_stack(const SectionStack& stack, const fs::path& dir, bool force = false);

// Prepares an output directory under the same overwrite rule.
void prepare_output_dir(const fs::path& dir, bool force);

std::string section_file_name(std::int64_t index, std::size_t width = 3);

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const ae::AutoencoderModel& model, const fs::path& path);
ae::AutoencoderModel load_checkpoint(const fs::path& path);
// Also throws ArchitectureMismatchError unless the stored architecture is `expected`.
ae::AutoencoderModel load_checkpoint(const fs::path& path, const ae::ArchitectureSpec& expected);

// ---- vector maps --------------------------------------------------------------

enum class MapKind : std::uint32_t { coarse = 0, dense = 1 };

inline constexpr std::size_t vector_map_header_size = 40;

void save_vector_map(const warp::VectorMap& v, const fs::path& path);
void save_dense_flow(const warp::DenseFlow& flow, const fs::path& path);
MapKind peek_map_kind(const fs::path& path);
warp::VectorMap load_vector_map(const fs::path& path);
warp::DenseFlow load_dense_flow(const fs::path& path);
// Coarse maps are upsampled; dense flows are returned as stored.
warp::DenseFlow load_as_dense_flow(const fs::path& path);

} // namespace ssem::io
