#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include <unistd.h>

#include "doctest.h"

#include "ssem/cli.hpp"
#include "ssem/config.hpp"
#include "ssem/io.hpp"
#include "ssem/synthwarp.hpp"
#include "test_util.hpp"

using namespace ssem;
using nd::Tensor;
namespace fs = std::filesystem;

namespace {

// Fresh directory under the system temp dir, removed on scope exit.
struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("ssem-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    fs::path operator/(const std::string& name) const { return path / name; }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_stack(const fs::path& dir, const std::vector<Tensor>& images, SectionKind kind) {
    io::save_stack(SectionStack::from_images(images, kind), dir, true);
}

struct Run {
    int code;
    std::string out, err;
};

Run run(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::cli_dispatch(args, out, err);
    return {code, out.str(), err.str()};
}

// Value of `key=` in a key=value report.
double report_value(const std::string& report, const std::string& key) {
    std::istringstream in(report);
    std::string line;
    while (std::getline(in, line))
        if (line.rfind(key + "=", 0) == 0) return std::stod(line.substr(key.size() + 1));
    FAIL("missing report key " << key);
    return 0.0;
}

} // namespace

// ---- images and stacks ------------------------------------------------------

TEST_CASE("raw images round-trip within 8-bit quantization") {
    TempDir tmp;
    auto img = test::random_tensor({20, 30}, 1, 0.0f, 1.0f);
    io::save_image(img, tmp / "a.png", SectionKind::raw);
    auto back = io::load_image(tmp / "a.png", SectionKind::raw);
    REQUIRE(back.shape() == img.shape());
    for (std::int64_t i = 0; i < img.size(); ++i) CHECK(std::abs(back[i] - img[i]) <= 0.5f / 255.0f + 1e-6f);
}

TEST_CASE("raw values outside [0,1] are clamped") {
    TempDir tmp;
    Tensor img({1, 2});
    img[0] = -3.0f;
    img[1] = 7.0f;
    io::save_image(img, tmp / "c.png", SectionKind::raw);
    auto back = io::load_image(tmp / "c.png", SectionKind::raw);
    CHECK(back[0] == 0.0f);
    CHECK(back[1] == 1.0f);
}

TEST_CASE("labels round-trip exactly through 16-bit files and 16-bit raw reads normalize") {
    TempDir tmp;
    Tensor labels({3, 3});
    for (std::int64_t i = 0; i < 9; ++i) labels[i] = static_cast<float>(i * 8000);
    labels[8] = 65535.0f;
    io::save_image(labels, tmp / "l.png", SectionKind::label);
    CHECK(io::load_image(tmp / "l.png", SectionKind::label) == labels);
    auto raw = io::load_image(tmp / "l.png", SectionKind::raw);
    CHECK(raw[8] == 1.0f);
    CHECK(raw[1] == doctest::Approx(8000.0 / 65535.0));

    Tensor bad({1, 1}, 2.5f);
    CHECK_THROWS_AS(io::save_image(bad, tmp / "b.png", SectionKind::label), FormatError);
}

TEST_CASE("non-PNG files are reported with their name") {
    TempDir tmp;
    std::ofstream(tmp / "x.png") << "not an image";
    CHECK_THROWS_WITH_AS(io::load_image(tmp / "x.png", SectionKind::raw), doctest::Contains("x.png"), FormatError);
    CHECK_THROWS_AS(io::load_image(tmp / "missing.png", SectionKind::raw), IoError);
}

TEST_CASE("load_stack orders sections by index and loads lazily") {
    TempDir tmp;
    auto ph = synth::cell_phantom(128, 128, 3, 1);
    write_stack(tmp.path, ph.raw, SectionKind::raw);
    std::ofstream(tmp / "notes.txt") << "ignored";
    CHECK(fs::exists(tmp / "000.png"));
    CHECK(fs::exists(tmp / "002.png"));
    auto stack = io::load_stack(tmp.path, SectionKind::raw);
    CHECK(stack.depth() == 3);
    CHECK(stack.indices() == std::vector<std::int64_t>{0, 1, 2});
    CHECK(stack.height() == 128);
    auto s1 = stack.load(1);
    for (std::int64_t i = 0; i < s1.size(); ++i) REQUIRE(std::abs(s1[i] - ph.raw[1][i]) <= 0.5f / 255.0f + 1e-6f);
}

TEST_CASE("empty, mixed-extent and TIFF directories are rejected") {
    TempDir tmp;
    CHECK_THROWS_WITH_AS(io::load_stack(tmp.path, SectionKind::raw), doctest::Contains("empty stack"), IoError);
    io::save_image(Tensor({128, 128}), tmp / "000.png", SectionKind::raw);
    io::save_image(Tensor({256, 256}), tmp / "001.png", SectionKind::raw);
    CHECK_THROWS_WITH_AS(io::load_stack(tmp.path, SectionKind::raw), doctest::Contains("001.png"), ShapeError);
    fs::remove(tmp / "001.png");
    std::ofstream(tmp / "001.tif") << "II*";
    CHECK_THROWS_AS(io::load_stack(tmp.path, SectionKind::raw), FormatError);
    CHECK_THROWS_AS(io::load_stack(tmp / "nope", SectionKind::raw), IoError);
}

TEST_CASE("index gaps warn but load") {
    TempDir tmp;
    io::save_image(Tensor({8, 8}), tmp / "000.png", SectionKind::raw);
    io::save_image(Tensor({8, 8}), tmp / "003.png", SectionKind::raw);
    std::ostringstream warn;
    auto stack = io::load_stack(tmp.path, SectionKind::raw, &warn);
    CHECK(stack.depth() == 2);
    CHECK(warn.str().find("between 0 and 3") != std::string::npos);
}

TEST_CASE("save_stack: empty stack, overwrite refusal and label round trip") {
    TempDir tmp;
    io::save_stack(SectionStack(8, 8, SectionKind::raw), tmp / "empty");
    CHECK(fs::is_directory(tmp / "empty"));
    CHECK(fs::is_empty(tmp / "empty"));

    auto ph = synth::cell_phantom(32, 32, 2, 5);
    auto labels = SectionStack::from_images(ph.labels, SectionKind::label);
    io::save_stack(labels, tmp / "labels");
    CHECK_THROWS_WITH_AS(io::save_stack(labels, tmp / "labels"), doctest::Contains("--force"), IoError);
    io::save_stack(labels, tmp / "labels", true);
    auto back = io::load_stack(tmp / "labels", SectionKind::label).materialize();
    CHECK(back == ph.labels);
}

// ---- checkpoints ------------------------------------------------------------

TEST_CASE("checkpoints round-trip bit-exactly") {
    TempDir tmp;
    for (const auto& spec : {ae::ArchitectureSpec::shallow7x7(), ae::ArchitectureSpec::deep3x3()}) {
        auto model = ae::build_model(spec, 17);
        io::save_checkpoint(model, tmp / "m.ckpt");
        CHECK(slurp(tmp / "m.ckpt").rfind("SSEMNET1", 0) == 0);
        auto back = io::load_checkpoint(tmp / "m.ckpt");
        CHECK(back.spec == spec);
        REQUIRE(back.encoder.size() == model.encoder.size());
        for (std::size_t i = 0; i < model.encoder.size(); ++i) {
            CHECK(back.encoder[i] == model.encoder[i]);
            CHECK(back.decoder[i] == model.decoder[i]);
        }
    }
}

TEST_CASE("damaged checkpoints are rejected") {
    TempDir tmp;
    io::save_checkpoint(ae::build_model(ae::ArchitectureSpec::shallow7x7(), 1), tmp / "m.ckpt");
    const auto bytes = slurp(tmp / "m.ckpt");

    std::ofstream(tmp / "t.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(io::load_checkpoint(tmp / "t.ckpt"), ChecksumError);

    auto flipped = bytes;
    flipped[bytes.size() / 3] ^= 0x01;
    std::ofstream(tmp / "f.ckpt", std::ios::binary) << flipped;
    CHECK_THROWS_AS(io::load_checkpoint(tmp / "f.ckpt"), ChecksumError);

    auto magic = bytes;
    magic[0] = 'X';
    std::ofstream(tmp / "g.ckpt", std::ios::binary) << magic;
    CHECK_THROWS_WITH_AS(io::load_checkpoint(tmp / "g.ckpt"), doctest::Contains("magic"), FormatError);
}

TEST_CASE("a shallow checkpoint loaded where deep is expected is an architecture mismatch") {
    TempDir tmp;
    io::save_checkpoint(ae::build_model(ae::ArchitectureSpec::shallow7x7(), 1), tmp / "m.ckpt");
    CHECK_THROWS_AS(io::load_checkpoint(tmp / "m.ckpt", ae::ArchitectureSpec::deep3x3()), ArchitectureMismatchError);
    CHECK_NOTHROW(io::load_checkpoint(tmp / "m.ckpt", ae::ArchitectureSpec::shallow7x7()));
}

// ---- vector maps --------------------------------------------------------------

TEST_CASE("vector maps round-trip bit-exactly with the documented size") {
    TempDir tmp;
    auto v = warp::VectorMap::zeros(5, 7, 100, 140, warp::Interpolation::tps);
    io::save_vector_map(v, tmp / "z.vmap");
    CHECK(fs::file_size(tmp / "z.vmap") == io::vector_map_header_size + 5 * 7 * 8);

    v.displacements = test::random_tensor({5, 7, 2}, 3, -10.0f, 10.0f);
    io::save_vector_map(v, tmp / "v.vmap");
    auto back = io::load_vector_map(tmp / "v.vmap");
    CHECK(back.displacements == v.displacements);
    CHECK(back.interpolation == warp::Interpolation::tps);
    CHECK(back.image_h == 100);
    CHECK(back.image_w == 140);
    CHECK(io::peek_map_kind(tmp / "v.vmap") == io::MapKind::coarse);

    warp::DenseFlow flow{test::random_tensor({6, 9, 2}, 4)};
    io::save_dense_flow(flow, tmp / "d.vmap");
    CHECK(io::load_dense_flow(tmp / "d.vmap").data == flow.data);
    CHECK(io::load_as_dense_flow(tmp / "d.vmap").data == flow.data);
    CHECK(io::load_as_dense_flow(tmp / "v.vmap").data == warp::upsample_field(v).data);
}

TEST_CASE("vector-map kind and header errors") {
    TempDir tmp;
    io::save_vector_map(warp::VectorMap::zeros(4, 4, 32, 32), tmp / "c.vmap");
    io::save_dense_flow(warp::DenseFlow::zeros(8, 8), tmp / "d.vmap");
    CHECK_THROWS_WITH_AS(io::load_dense_flow(tmp / "c.vmap"), doctest::Contains("coarse"), FormatError);
    CHECK_THROWS_WITH_AS(io::load_vector_map(tmp / "d.vmap"), doctest::Contains("dense"), FormatError);

    auto bytes = slurp(tmp / "c.vmap");
    std::ofstream(tmp / "short.vmap", std::ios::binary) << bytes.substr(0, bytes.size() - 4);
    CHECK_THROWS_AS(io::load_vector_map(tmp / "short.vmap"), FormatError);
    std::ofstream(tmp / "junk.vmap", std::ios::binary) << std::string(64, 'x');
    CHECK_THROWS_AS(io::load_vector_map(tmp / "junk.vmap"), FormatError);
}

// ---- configuration ----------------------------------------------------------

TEST_CASE("empty config gives the library defaults") {
    cfg::Config c;
    c.load_text("# nothing here\n\n");
    const reg::RegistrationConfig r;
    CHECK(c.registration().alpha == r.alpha);
    CHECK(c.registration().grid_spacing == r.grid_spacing);
    CHECK(c.training().steps == ae::TrainConfig{}.steps);
    CHECK(c.alignment().window == 3);
    CHECK(c.architecture() == ae::ArchitectureSpec::shallow7x7());
}

TEST_CASE("config values parse, echo round-trips and bad input names the key") {
    cfg::Config c;
    c.load_text("alpha = 0.2  # magnitude\nsimilarity=pixel\nkeep-first=true\n");
    CHECK(c.registration().alpha == 0.2);
    CHECK(c.registration().similarity == reg::Similarity::pixel);
    CHECK(c.deformation().keep_first);

    std::ostringstream echo;
    c.echo(echo);
    cfg::Config d;
    d.load_text(echo.str());
    std::ostringstream echo2;
    d.echo(echo2);
    CHECK(echo.str() == echo2.str());

    CHECK_THROWS_WITH_AS(c.load_text("alhpa=0.2"), doctest::Contains("alhpa"), ConfigError);
    CHECK_THROWS_WITH_AS(c.set("iterations", "many"), doctest::Contains("iterations"), ConfigError);
    CHECK_THROWS_AS(c.set("interpolation", "cubic"), ConfigError);
    CHECK_THROWS_AS(c.load_text("alpha"), ConfigError);
}

TEST_CASE("command-line values override the config file") {
    TempDir tmp;
    std::ofstream(tmp / "run.cfg") << "alpha=0.2\nbeta=0.7\n";
    auto img = synth::textured_image(32, 32, 1);
    io::save_image(img, tmp / "a.png", SectionKind::raw);
    auto r = run({"eval", "heatmap", "--a", (tmp / "a.png").string(), "--b", (tmp / "a.png").string(), "--config",
                  (tmp / "run.cfg").string(), "--alpha", "0.3"});
    CHECK(r.code == 0);
    CHECK(r.err.find("alpha=0.3\n") != std::string::npos);
    CHECK(r.err.find("beta=0.7\n") != std::string::npos);
}

// ---- command line -------------------------------------------------------------

TEST_CASE("no arguments prints usage and exits 2") {
    auto r = run({});
    CHECK(r.code == 2);
    CHECK(r.err.find("Usage") != std::string::npos);
    CHECK(run({"frobnicate"}).code == 2);
    CHECK(run({"align-pair", "--out", "x"}).code == 2);
}

TEST_CASE("runtime errors give a one-line diagnostic and exit 1") {
    TempDir tmp;
    auto r = run({"xsection", "--stack", (tmp / "none").string(), "--index", "0", "--out", (tmp / "x.png").string()});
    CHECK(r.code == 1);
    CHECK(r.err.rfind("error: ", 0) == 0);
    CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
}

TEST_CASE("align-pair on identical images reports a near-zero map") {
    TempDir tmp;
    io::save_checkpoint(ae::build_model(ae::ArchitectureSpec::shallow7x7(), 2), tmp / "m.ckpt");
    io::save_image(synth::textured_image(64, 64, 5), tmp / "i.png", SectionKind::raw);
    const auto img = (tmp / "i.png").string();
    auto r = run({"align-pair", "--fixed", img, "--moving", img, "--checkpoint", (tmp / "m.ckpt").string(), "--out",
                  (tmp / "out").string(), "--iterations", "20"});
    REQUIRE(r.code == 0);
    CHECK(report_value(r.out, "mean_abs_v_feature") <= 0.1);
    CHECK(report_value(r.out, "mean_abs_v_pixel") <= 0.1);
    for (const char* f : {"map-feature.vmap", "map-pixel.vmap", "aligned-feature.png", "aligned-pixel.png",
                          "heatmap-feature.csv", "heatmap-pixel.csv", "heatmap-unregistered.csv", "report.txt"})
        CHECK(fs::exists(tmp / "out" / f));

    auto again = run({"align-pair", "--fixed", img, "--moving", img, "--similarity", "pixel", "--out",
                      (tmp / "out").string()});
    CHECK(again.code == 1);
    CHECK(again.err.find("--force") != std::string::npos);
    auto no_model = run({"align-pair", "--fixed", img, "--moving", img, "--similarity", "feature", "--out",
                         (tmp / "out2").string()});
    CHECK(no_model.code == 1);
}

TEST_CASE("eval dice with mismatched depths names both depths") {
    TempDir tmp;
    auto ph = synth::cell_phantom(32, 32, 3, 1);
    write_stack(tmp / "a", ph.labels, SectionKind::label);
    write_stack(tmp / "b", {ph.labels[0], ph.labels[1]}, SectionKind::label);
    auto r = run({"eval", "dice", "--truth", (tmp / "a").string(), "--test", (tmp / "b").string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("depth 3") != std::string::npos);
    CHECK(r.err.find("depth 2") != std::string::npos);

    auto same = run({"eval", "dice", "--truth", (tmp / "a").string(), "--test", (tmp / "a").string(), "--dice-top-k", "5"});
    CHECK(same.code == 0);
    CHECK(report_value(same.out, "dice_mean") == 1.0);
}

TEST_CASE("gen-warp, align-stack, eval and xsection work end to end and reproducibly") {
    TempDir tmp;
    auto ph = synth::cell_phantom(64, 64, 3, 7);
    write_stack(tmp / "raw", ph.raw, SectionKind::raw);
    write_stack(tmp / "labels", ph.labels, SectionKind::label);

    auto gen = run({"gen-warp", "--stack", (tmp / "raw").string(), "--labels", (tmp / "labels").string(), "--out",
                    (tmp / "warped").string(), "--sigma", "2", "--warp-seed", "3"});
    REQUIRE(gen.code == 0);
    CHECK(report_value(gen.out, "sections") == 3);
    CHECK(fs::exists(tmp / "warped" / "labels" / "002.png"));

    auto epe = run({"eval", "epe", "--estimate", (tmp / "warped" / "truth" / "001.vmap").string(), "--truth",
                    (tmp / "warped" / "truth" / "001.vmap").string()});
    REQUIRE(epe.code == 0);
    CHECK(report_value(epe.out, "epe") == 0.0);

    const std::vector<std::string> align{"align-stack", "--stack", (tmp / "warped" / "raw").string(), "--labels",
                                         (tmp / "warped" / "labels").string(), "--similarity", "pixel",
                                         "--iterations", "10"};
    auto a1 = align, a2 = align;
    a1.insert(a1.end(), {"--out", (tmp / "run1").string()});
    a2.insert(a2.end(), {"--out", (tmp / "run2").string()});
    REQUIRE(run(a1).code == 0);
    REQUIRE(run(a2).code == 0);
    for (const char* f : {"000.vmap", "001.vmap", "002.vmap"}) {
        CAPTURE(f);
        CHECK(slurp(tmp / "run1" / "maps" / f) == slurp(tmp / "run2" / "maps" / f));
    }
    CHECK(fs::exists(tmp / "run1" / "labels" / "001.png"));

    auto est = run({"eval", "epe", "--estimate", (tmp / "run1" / "maps" / "001.vmap").string(), "--truth",
                    (tmp / "warped" / "truth" / "001.vmap").string()});
    CHECK(est.code == 0);

    auto xs = run({"xsection", "--stack", (tmp / "run1" / "aligned").string(), "--axis", "column", "--index", "10",
                   "--out", (tmp / "xs.png").string()});
    REQUIRE(xs.code == 0);
    CHECK(io::load_image(tmp / "xs.png", SectionKind::raw).shape() == nd::Shape{3, 64});
}

TEST_CASE("train writes a loadable checkpoint and a loss curve") {
    TempDir tmp;
    write_stack(tmp / "raw", synth::cell_phantom(64, 64, 2, 3).raw, SectionKind::raw);
    auto r = run({"train", "--stack", (tmp / "raw").string(), "--out", (tmp / "m.ckpt").string(), "--steps", "3",
                  "--patch-size", "32", "--patch-count", "8"});
    REQUIRE(r.code == 0);
    CHECK(io::load_checkpoint(tmp / "m.ckpt").spec == ae::ArchitectureSpec::shallow7x7());
    const auto curve = slurp(tmp / "m.ckpt.loss.csv");
    CHECK(curve.rfind("step,loss,mse\n", 0) == 0);
    CHECK(std::count(curve.begin(), curve.end(), '\n') == 4);
}
