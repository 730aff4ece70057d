#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ssem/errors.hpp"
#include "ssem/io.hpp"

namespace ssem::io {

namespace {

constexpr char checkpoint_magic[8] = {'S', 'S', 'E', 'M', 'N', 'E', 'T', '1'};
constexpr std::uint32_t checkpoint_version = 1;
constexpr char map_magic[8] = {'S', 'S', 'E', 'M', 'V', 'M', 'A', 'P'};
constexpr std::uint32_t map_version = 1;

// Little-endian byte buffer.
class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    std::vector<unsigned char>& buffer() { return buf_; }

private:
    std::vector<unsigned char> buf_;
};

class Reader {
public:
    Reader(const std::vector<unsigned char>& buf, std::size_t end, std::string what)
        : buf_(buf), end_(end), what_(std::move(what)) {}

    void need(std::size_t n) const {
        if (pos_ + n > end_) throw FormatError(what_ + ": unexpected end of data");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    std::string str() {
        const auto n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return end_ - pos_; }

private:
    const std::vector<unsigned char>& buf_;
    std::size_t pos_ = 0;
    std::size_t end_;
    std::string what_;
};

std::vector<unsigned char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<unsigned char>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    out.close();
    if (!out) throw IoError("cannot write " + path.string());
}

std::uint32_t crc_of(const unsigned char* data, std::size_t n) {
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in pieces.
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, data, chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

void write_tensor(Writer& w, const std::string& name, const nd::Tensor& t) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u64(static_cast<std::uint64_t>(d));
    for (float v : t.data()) w.f32(v);
}

nd::Tensor read_tensor(Reader& r, const std::string& expected_name, const fs::path& path) {
    const auto name = r.str();
    if (name != expected_name)
        throw FormatError(path.string() + ": expected parameter array '" + expected_name + "', found '" + name + "'");
    const auto rank = r.u32();
    if (rank > 8) throw FormatError(path.string() + ": array '" + name + "' has implausible rank");
    nd::Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
        const auto v = r.u64();
        if (v > (1ull << 32)) throw FormatError(path.string() + ": array '" + name + "' has implausible extent");
        d = static_cast<std::int64_t>(v);
        count *= v;
    }
    if (count * 4 > r.remaining()) throw FormatError(path.string() + ": array '" + name + "' runs past end of file");
    nd::Tensor t(shape);
    for (float& v : t.data()) v = r.f32();
    return t;
}

std::string layer_name(const char* part, std::size_t i) { return std::string(part) + "." + std::to_string(i); }

void write_map(const fs::path& path, MapKind kind, warp::Interpolation interp, std::int64_t gh, std::int64_t gw,
               std::int64_t h, std::int64_t w, const nd::Tensor& data) {
    Writer out;
    out.bytes(map_magic, 8);
    out.u32(map_version);
    out.u32(static_cast<std::uint32_t>(kind));
    out.u32(interp == warp::Interpolation::tps ? 1u : 0u);
    for (auto v : {gh, gw, h, w}) out.u32(static_cast<std::uint32_t>(v));
    out.u32(0);  // reserved
    for (float v : data.data()) out.f32(v);
    write_file(path, out.buffer());
}

struct MapHeader {
    MapKind kind;
    warp::Interpolation interp;
    std::int64_t gh, gw, h, w;
};

MapHeader read_map_header(const std::vector<unsigned char>& buf, const fs::path& path) {
    if (buf.size() < vector_map_header_size || std::memcmp(buf.data(), map_magic, 8) != 0)
        throw FormatError(path.string() + " is not a vector-map file");
    Reader r(buf, buf.size(), path.string());
    r.need(8);
    for (int i = 0; i < 2; ++i) r.u32();  // skip magic
    if (const auto v = r.u32(); v != map_version)
        throw FormatError(path.string() + ": unsupported vector-map version " + std::to_string(v));
    MapHeader hdr{};
    const auto kind = r.u32(), interp = r.u32();
    if (kind > 1) throw FormatError(path.string() + ": malformed header, unknown map kind " + std::to_string(kind));
    if (interp > 1) throw FormatError(path.string() + ": malformed header, unknown interpolation " + std::to_string(interp));
    hdr.kind = static_cast<MapKind>(kind);
    hdr.interp = interp == 1 ? warp::Interpolation::tps : warp::Interpolation::bilinear;
    hdr.gh = r.u32();
    hdr.gw = r.u32();
    hdr.h = r.u32();
    hdr.w = r.u32();
    const std::uint64_t payload = std::uint64_t(hdr.gh) * std::uint64_t(hdr.gw) * 8;
    if (hdr.gh < 1 || hdr.gw < 1 || hdr.h < 1 || hdr.w < 1 || buf.size() != vector_map_header_size + payload)
        throw FormatError(path.string() + ": malformed header, extents do not match the file size");
    if (hdr.kind == MapKind::dense && (hdr.gh != hdr.h || hdr.gw != hdr.w))
        throw FormatError(path.string() + ": malformed header, dense grid differs from the image extents");
    return hdr;
}

nd::Tensor read_map_payload(const std::vector<unsigned char>& buf, const MapHeader& hdr) {
    nd::Tensor t({hdr.gh, hdr.gw, 2});
    const unsigned char* p = buf.data() + vector_map_header_size;
    for (float& v : t.data()) {
        std::uint32_t bits = 0;
        for (int i = 0; i < 4; ++i) bits |= std::uint32_t(p[i]) << (8 * i);
        v = std::bit_cast<float>(bits);
        p += 4;
    }
    return t;
}

const char* kind_name(MapKind k) { return k == MapKind::coarse ? "coarse vector map" : "dense flow"; }

} // namespace

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const ae::AutoencoderModel& model, const fs::path& path) {
    check_parameter_shapes(model);
    Writer w;
    w.bytes(checkpoint_magic, 8);
    w.u32(checkpoint_version);
    w.str(model.spec.describe());
    w.u32(static_cast<std::uint32_t>(model.encoder.size() + model.decoder.size()));
    for (std::size_t i = 0; i < model.encoder.size(); ++i) write_tensor(w, layer_name("encoder", i), model.encoder[i]);
    for (std::size_t i = 0; i < model.decoder.size(); ++i) write_tensor(w, layer_name("decoder", i), model.decoder[i]);
    w.u32(crc_of(w.buffer().data(), w.buffer().size()));
    write_file(path, w.buffer());
}

ae::AutoencoderModel load_checkpoint(const fs::path& path) {
    const auto buf = read_file(path);
    if (buf.size() < 8 || std::memcmp(buf.data(), checkpoint_magic, 8) != 0)
        throw FormatError(path.string() + ": bad magic, not an SSEMNET1 checkpoint");
    if (buf.size() < 16) throw ChecksumError(path.string() + ": checksum mismatch (file truncated)");
    const std::size_t body = buf.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) stored |= std::uint32_t(buf[body + i]) << (8 * i);
    if (stored != crc_of(buf.data(), body))
        throw ChecksumError(path.string() + ": checksum mismatch (file corrupt or truncated)");

    Reader r(buf, body, path.string());
    r.u32();
    r.u32();  // magic
    if (const auto v = r.u32(); v != checkpoint_version)
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
    ae::AutoencoderModel model;
    try {
        model.spec = ae::ArchitectureSpec::parse(r.str());
    } catch (const Error& e) {
        throw FormatError(path.string() + ": bad architecture descriptor: " + e.what());
    }
    const auto arrays = r.u32();
    const auto layers = model.spec.encoder.size();
    if (arrays != layers + model.spec.decoder.size())
        throw ArchitectureMismatchError(path.string() + ": " + std::to_string(arrays) +
                                        " parameter arrays for a " + std::to_string(layers) + "-layer encoder");
    for (std::size_t i = 0; i < layers; ++i) model.encoder.push_back(read_tensor(r, layer_name("encoder", i), path));
    for (std::size_t i = 0; i < model.spec.decoder.size(); ++i)
        model.decoder.push_back(read_tensor(r, layer_name("decoder", i), path));
    if (r.remaining() != 0) throw FormatError(path.string() + ": trailing bytes after the parameter arrays");
    try {
        check_parameter_shapes(model);
    } catch (const ArchitectureMismatchError& e) {
        throw ArchitectureMismatchError(path.string() + ": " + e.what());
    }
    return model;
}

ae::AutoencoderModel load_checkpoint(const fs::path& path, const ae::ArchitectureSpec& expected) {
    auto model = load_checkpoint(path);
    if (!(model.spec == expected))
        throw ArchitectureMismatchError(path.string() + " holds architecture " + model.spec.describe() +
                                        " but " + expected.describe() + " was expected");
    return model;
}

// ---- vector maps --------------------------------------------------------------

void save_vector_map(const warp::VectorMap& v, const fs::path& path) {
    v.validate();
    write_map(path, MapKind::coarse, v.interpolation, v.grid_h, v.grid_w, v.image_h, v.image_w, v.displacements);
}

void save_dense_flow(const warp::DenseFlow& flow, const fs::path& path) {
    flow.validate();
    write_map(path, MapKind::dense, warp::Interpolation::bilinear, flow.height(), flow.width(), flow.height(),
              flow.width(), flow.data);
}

MapKind peek_map_kind(const fs::path& path) { return read_map_header(read_file(path), path).kind; }

warp::VectorMap load_vector_map(const fs::path& path) {
    const auto buf = read_file(path);
    const auto hdr = read_map_header(buf, path);
    if (hdr.kind != MapKind::coarse)
        throw FormatError(path.string() + ": expected a " + kind_name(MapKind::coarse) + " but the file holds a " +
                          kind_name(hdr.kind));
    warp::VectorMap v;
    v.grid_h = hdr.gh;
    v.grid_w = hdr.gw;
    v.image_h = hdr.h;
    v.image_w = hdr.w;
    v.interpolation = hdr.interp;
    v.displacements = read_map_payload(buf, hdr);
    v.validate();
    return v;
}

warp::DenseFlow load_dense_flow(const fs::path& path) {
    const auto buf = read_file(path);
    const auto hdr = read_map_header(buf, path);
    if (hdr.kind != MapKind::dense)
        throw FormatError(path.string() + ": expected a " + kind_name(MapKind::dense) + " but the file holds a " +
                          kind_name(hdr.kind));
    return warp::DenseFlow{read_map_payload(buf, hdr)};
}

warp::DenseFlow load_as_dense_flow(const fs::path& path) {
    if (peek_map_kind(path) == MapKind::dense) return load_dense_flow(path);
    return warp::upsample_field(load_vector_map(path));
}

} // namespace ssem::io
