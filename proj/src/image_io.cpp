#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <map>
#include <ostream>

#include "ssem/errors.hpp"
#include "ssem/io.hpp"

namespace ssem::io {

namespace {

struct File {
    std::FILE* f = nullptr;
    ~File() {
        if (f) std::fclose(f);
    }
};

struct Decoded {
    std::uint32_t width = 0, height = 0;
    int bit_depth = 0;
    int color_type = 0;
};

thread_local char last_png_error[256];

void png_error_handler(png_structp png, png_const_charp msg) {
    std::snprintf(last_png_error, sizeof last_png_error, "%s", msg);
    png_longjmp(png, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

// Fills `out` from an open file. Only trivially destructible locals live in
// this frame, so longjmp out of libpng is safe here.
bool decode_png(std::FILE* fp, Decoded& out, std::vector<png_byte>& rows) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
    if (!png) return false;
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        return false;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        return false;
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    out.width = png_get_image_width(png, info);
    out.height = png_get_image_height(png, info);
    out.bit_depth = png_get_bit_depth(png, info);
    out.color_type = png_get_color_type(png, info);
    if (out.color_type != PNG_COLOR_TYPE_GRAY && out.color_type != PNG_COLOR_TYPE_GRAY_ALPHA) {
        png_destroy_read_struct(&png, &info, nullptr);
        return true;  // caller reports the colour type
    }
    if (out.bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (out.color_type == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    rows.resize(stride * out.height);
    for (std::uint32_t r = 0; r < out.height; ++r) png_read_row(png, rows.data() + r * stride, nullptr);
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return true;
}

bool encode_png(std::FILE* fp, std::uint32_t width, std::uint32_t height, int bit_depth, const png_byte* data) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler, png_warning_handler);
    if (!png) return false;
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        return false;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        return false;
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, width, height, bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(width) * (bit_depth / 8);
    for (std::uint32_t r = 0; r < height; ++r) png_write_row(png, data + r * stride);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return true;
}

void write_gray(const fs::path& path, std::int64_t h, std::int64_t w, int bit_depth,
                const std::vector<std::uint16_t>& values) {
    std::vector<png_byte> bytes;
    bytes.reserve(values.size() * (bit_depth / 8));
    for (auto v : values) {
        if (bit_depth == 16) bytes.push_back(static_cast<png_byte>(v >> 8));  // PNG is big-endian
        bytes.push_back(static_cast<png_byte>(v & 0xff));
    }
    File file{std::fopen(path.c_str(), "wb")};
    if (!file.f) throw IoError("cannot open " + path.string() + " for writing");
    if (!encode_png(file.f, static_cast<std::uint32_t>(w), static_cast<std::uint32_t>(h), bit_depth, bytes.data()))
        throw IoError("cannot write " + path.string() + ": " + last_png_error);
    if (std::fclose(file.f) != 0) {
        file.f = nullptr;
        throw IoError("cannot write " + path.string());
    }
    file.f = nullptr;
}

void require_image(const nd::Tensor& image, const fs::path& path) {
    if (image.rank() != 2 || image.size() == 0)
        throw ShapeError("cannot save " + path.string() + ": expected a non-empty 2-D image, got " +
                         nd::shape_string(image.shape()));
}

// Parses "<digits>.png"; returns -1 for anything else.
std::int64_t parse_index(const fs::path& file) {
    const auto stem = file.stem().string();
    if (stem.empty() || stem.size() > 15 || !std::all_of(stem.begin(), stem.end(), [](char c) { return c >= '0' && c <= '9'; }))
        return -1;
    return std::stoll(stem);
}

} // namespace

nd::Tensor load_image(const fs::path& path, SectionKind kind) {
    File file{std::fopen(path.c_str(), "rb")};
    if (!file.f) throw IoError("cannot open " + path.string());
    Decoded d;
    std::vector<png_byte> rows;
    if (!decode_png(file.f, d, rows)) throw FormatError("cannot read PNG " + path.string() + ": " + last_png_error);
    if (d.color_type != PNG_COLOR_TYPE_GRAY && d.color_type != PNG_COLOR_TYPE_GRAY_ALPHA)
        throw FormatError(path.string() + " is not a grayscale image");
    const auto h = static_cast<std::int64_t>(d.height), w = static_cast<std::int64_t>(d.width);
    nd::Tensor out({h, w});
    const bool wide = d.bit_depth == 16;
    const float scale = kind == SectionKind::raw ? 1.0f / (wide ? 65535.0f : 255.0f) : 1.0f;
    for (std::int64_t i = 0; i < h * w; ++i) {
        const std::uint32_t v = wide ? (std::uint32_t(rows[2 * i]) << 8 | rows[2 * i + 1]) : rows[i];
        out[i] = static_cast<float>(v) * scale;
    }
    return out;
}

void save_image(const nd::Tensor& image, const fs::path& path, SectionKind kind) {
    require_image(image, path);
    std::vector<std::uint16_t> values(static_cast<std::size_t>(image.size()));
    if (kind == SectionKind::raw) {
        for (std::int64_t i = 0; i < image.size(); ++i) {
            const float v = std::isnan(image[i]) ? 0.0f : std::clamp(image[i], 0.0f, 1.0f);
            values[i] = static_cast<std::uint16_t>(std::lround(v * 255.0f));
        }
        write_gray(path, image.dim(0), image.dim(1), 8, values);
        return;
    }
    for (std::int64_t i = 0; i < image.size(); ++i) {
        const float v = image[i];
        if (!(v >= 0.0f && v <= 65535.0f) || v != std::floor(v))
            throw FormatError("cannot save " + path.string() + ": label value " + std::to_string(v) +
                              " is not an integer in [0, 65535]");
        values[i] = static_cast<std::uint16_t>(v);
    }
    write_gray(path, image.dim(0), image.dim(1), 16, values);
}

void save_image_scaled(const nd::Tensor& image, const fs::path& path, float lo, float hi) {
    require_image(image, path);
    const float span = hi > lo ? hi - lo : 1.0f;
    nd::Tensor scaled = image;
    for (float& v : scaled.data()) v = (v - lo) / span;
    save_image(scaled, path, SectionKind::raw);
}

std::string section_file_name(std::int64_t index, std::size_t width) {
    auto digits = std::to_string(index);
    if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
    return digits + ".png";
}

SectionStack load_stack(const fs::path& dir, SectionKind kind, std::ostream* warn) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) throw IoError("stack directory " + dir.string() + " does not exist");
    std::map<std::int64_t, fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        const auto index = parse_index(entry.path());
        if (index < 0) continue;
        if (ext == ".tif" || ext == ".tiff")
            throw FormatError(entry.path().string() + ": TIFF sections are not supported, convert to PNG");
        if (ext != ".png") continue;
        if (!files.emplace(index, entry.path()).second)
            throw FormatError("duplicate section index " + std::to_string(index) + " in " + dir.string());
    }
    if (files.empty()) throw IoError("empty stack: no numbered PNG sections in " + dir.string());

    // Extents come from the first section; every other header is checked now
    // so a mismatch surfaces before any processing starts.
    const auto first = load_image(files.begin()->second, kind);
    SectionStack stack(first.dim(0), first.dim(1), kind);
    std::int64_t previous = -1;
    for (const auto& [index, path] : files) {
        if (previous >= 0 && index != previous + 1 && warn)
            *warn << "warning: " << dir.string() << ": gap in section indices between " << previous << " and "
                  << index << "\n";
        previous = index;
        if (index != files.begin()->first) {
            File f{std::fopen(path.c_str(), "rb")};
            if (!f.f) throw IoError("cannot open " + path.string());
            unsigned char header[24];
            if (std::fread(header, 1, 24, f.f) != 24 || png_sig_cmp(header, 0, 8) != 0)
                throw FormatError(path.string() + " is not a PNG file");
            const auto be32 = [&](int o) {
                return std::int64_t(header[o]) << 24 | std::int64_t(header[o + 1]) << 16 |
                       std::int64_t(header[o + 2]) << 8 | std::int64_t(header[o + 3]);
            };
            const auto w = be32(16), h = be32(20);
            if (h != stack.height() || w != stack.width())
                throw ShapeError("section " + path.string() + " is " + std::to_string(h) + "x" + std::to_string(w) +
                                 " but the stack is " + std::to_string(stack.height()) + "x" +
                                 std::to_string(stack.width()));
        }
        stack.add_section(index, [path = path, kind] { return load_image(path, kind); });
    }
    return stack;
}

void prepare_output_dir(const fs::path& dir, bool force) {
    std::error_code ec;
    if (fs::exists(dir, ec)) {
        if (!fs::is_directory(dir, ec)) throw IoError(dir.string() + " exists and is not a directory");
        if (!fs::is_empty(dir, ec) && !force)
            throw IoError("refusing to overwrite non-empty directory " + dir.string() + " (use --force)");
        return;
    }
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void save_stack(const SectionStack& stack, const fs::path& dir, bool force) {
    prepare_output_dir(dir, force);
    std::size_t width = 3;
    for (auto index : stack.indices()) width = std::max(width, std::to_string(index).size());
    for (std::size_t k = 0; k < stack.depth(); ++k)
        save_image(stack.load(k), dir / section_file_name(stack.indices()[k], width), stack.kind());
}

} // namespace ssem::io
