#include <CLI11.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>

#include "ssem/cli.hpp"
#include "ssem/config.hpp"
#include "ssem/errors.hpp"
#include "ssem/io.hpp"
#include "ssem/metrics.hpp"

namespace ssem::cli {

namespace {

namespace fs = std::filesystem;

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

// Ordered key=value report, printed to stdout and optionally saved.
class Report {
public:
    void add(const std::string& key, const std::string& value) { lines_.emplace_back(key, value); }
    void add(const std::string& key, double value) { add(key, fmt(value)); }
    void write(std::ostream& out) const {
        for (const auto& [k, v] : lines_) out << k << "=" << v << "\n";
    }
    void save(const fs::path& path) const {
        std::ofstream f(path);
        if (!f) throw IoError("cannot open " + path.string() + " for writing");
        write(f);
        if (!f) throw IoError("cannot write " + path.string());
    }

private:
    std::vector<std::pair<std::string, std::string>> lines_;
};

// `--config FILE` plus one `--<key>` override per config key.
struct ConfigOptions {
    std::string file;
    std::map<std::string, std::string> values;
    std::map<std::string, CLI::Option*> options;

    void attach(CLI::App& app, const std::vector<std::string>& skip = {}) {
        app.add_option("--config", file, "key=value configuration file")->check(CLI::ExistingFile);
        for (const auto& k : cfg::known_keys()) {
            if (std::find(skip.begin(), skip.end(), k.key) != skip.end()) continue;
            options[k.key] = app.add_option("--" + k.key, values[k.key], k.help + " (default " + k.default_value + ")")
                                 ->group("Configuration");
        }
    }

    cfg::Config resolve(std::ostream& err) const {
        cfg::Config c;
        if (!file.empty()) c.load_file(file);
        for (const auto& [key, opt] : options)
            if (opt->count() > 0) c.set(key, values.at(key));
        err << "# effective configuration\n";
        c.echo(err);
        return c;
    }
};

void write_heatmap_csv(const metrics::Heatmap& hm, const fs::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    for (std::int64_t r = 0; r < hm.values.dim(0); ++r) {
        for (std::int64_t c = 0; c < hm.values.dim(1); ++c) {
            if (c > 0) f << ",";
            f << (hm.valid.at(r, c) > 0.0f ? fmt(hm.values.at(r, c)) : "nan");
        }
        f << "\n";
    }
    if (!f) throw IoError("cannot write " + path.string());
}

std::optional<ae::AutoencoderModel> load_model_if(const std::string& path, bool needed, const std::string& command) {
    if (!needed) return std::nullopt;
    if (path.empty()) throw ConfigError(command + ": --checkpoint is required for feature similarity");
    return io::load_checkpoint(path);
}

// ---- subcommands ------------------------------------------------------------

struct TrainArgs {
    std::string stack, out, curve;
    ConfigOptions config;
};

int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    const auto c = a.config.resolve(err);
    const auto stack = io::load_stack(a.stack, SectionKind::raw, &err);
    const auto cfg = c.training();
    const auto model = ae::build_model(c.architecture(), cfg.seed);
    const auto result = ae::train_autoencoder(model, stack, cfg);
    io::save_checkpoint(result.model, a.out);
    const fs::path curve = a.curve.empty() ? fs::path(a.out + ".loss.csv") : fs::path(a.curve);
    {
        std::ofstream f(curve);
        if (!f) throw IoError("cannot open " + curve.string() + " for writing");
        f << "step,loss,mse\n";
        for (std::size_t i = 0; i < result.loss.size(); ++i)
            f << i + 1 << "," << fmt(result.loss[i]) << "," << fmt(result.mse[i]) << "\n";
        if (!f) throw IoError("cannot write " + curve.string());
    }
    Report r;
    r.add("checkpoint", a.out);
    r.add("loss_curve", curve.string());
    r.add("architecture", result.model.spec.describe());
    r.add("steps", std::to_string(result.loss.size()));
    r.add("initial_mse", result.mse.front());
    r.add("final_mse", result.mse.back());
    r.write(out);
    return 0;
}

struct AlignPairArgs {
    std::string fixed, moving, checkpoint, out, similarity = "both";
    bool force = false;
    ConfigOptions config;
};

int run_align_pair(const AlignPairArgs& a, std::ostream& out, std::ostream& err) {
    const auto c = a.config.resolve(err);
    std::vector<reg::Similarity> modes;
    if (a.similarity == "both") modes = {reg::Similarity::pixel, reg::Similarity::feature};
    else modes = {reg::parse_similarity(a.similarity)};
    const bool need_model = std::find(modes.begin(), modes.end(), reg::Similarity::feature) != modes.end();
    const auto model = load_model_if(a.checkpoint, need_model, "align-pair");

    const auto fixed = io::load_image(a.fixed, SectionKind::raw);
    const auto moving = io::load_image(a.moving, SectionKind::raw);
    if (fixed.shape() != moving.shape())
        throw ShapeError("align-pair: " + a.fixed + " is " + nd::shape_string(fixed.shape()) + " but " + a.moving +
                         " is " + nd::shape_string(moving.shape()));
    io::prepare_output_dir(a.out, a.force);
    const fs::path dir(a.out);
    const auto window = c.heatmap_window(), stride = c.heatmap_stride();

    Report r;
    r.add("ncc_unregistered", metrics::ncc(moving, fixed));
    const auto before = metrics::ncc_heatmap(moving, fixed, window, stride);
    write_heatmap_csv(before, dir / "heatmap-unregistered.csv");
    r.add("heatmap_mean_unregistered", before.mean);

    const std::vector<nd::Tensor> refs{fixed};
    const std::vector<double> weights{1.0};
    for (auto mode : modes) {
        auto rc = c.registration();
        rc.similarity = mode;
        const auto res = reg::register_image(moving, refs, weights, model ? &*model : nullptr, rc);
        const auto flow = warp::upsample_field(res.map);
        const auto aligned = warp::warp_image(moving, flow);
        const auto mask = warp::empty_space_mask(flow, moving.dim(0), moving.dim(1));
        const auto name = reg::to_string(mode);
        io::save_vector_map(res.map, dir / ("map-" + name + ".vmap"));
        io::save_image(aligned, dir / ("aligned-" + name + ".png"), SectionKind::raw);
        const auto hm = metrics::ncc_heatmap(aligned, fixed, window, stride);
        write_heatmap_csv(hm, dir / ("heatmap-" + name + ".csv"));
        r.add("ncc_" + name, metrics::ncc(aligned, fixed, &mask));
        r.add("heatmap_mean_" + name, hm.mean);
        r.add("mean_abs_v_" + name, res.map.mean_magnitude());
        r.add("final_loss_" + name, res.trace.empty() ? 0.0 : res.trace.back());
    }
    r.save(dir / "report.txt");
    r.write(out);
    return 0;
}

struct AlignStackArgs {
    std::string stack, labels, checkpoint, out;
    bool force = false;
    ConfigOptions config;
};

int run_align_stack(const AlignStackArgs& a, std::ostream& out, std::ostream& err) {
    const auto c = a.config.resolve(err);
    const auto plan = c.alignment();
    plan.validate();
    const auto model = load_model_if(a.checkpoint, plan.registration.similarity == reg::Similarity::feature,
                                     "align-stack");
    const auto raw = io::load_stack(a.stack, SectionKind::raw, &err);
    std::optional<SectionStack> labels;
    if (!a.labels.empty()) labels = io::load_stack(a.labels, SectionKind::label, &err);

    const fs::path dir(a.out);
    io::prepare_output_dir(dir, a.force);
    for (const char* sub : {"aligned", "maps", "labels"}) {
        if (std::string(sub) == "labels" && !labels) continue;
        io::prepare_output_dir(dir / sub, a.force);
    }
    std::size_t width = 3;
    for (auto index : raw.indices()) width = std::max(width, std::to_string(index).size());

    const auto report = stack::align_stack(raw, labels ? &*labels : nullptr, model ? &*model : nullptr, plan,
                                           [&](const stack::AlignedSection& s) {
                                               const auto name = io::section_file_name(s.index, width);
                                               io::save_image(s.image, dir / "aligned" / name, SectionKind::raw);
                                               io::save_vector_map(s.map, dir / "maps" / fs::path(name).replace_extension(".vmap"));
                                               if (s.labels) io::save_image(*s.labels, dir / "labels" / name, SectionKind::label);
                                           });
    double total = 0.0;
    for (double l : report.final_loss) total += l;
    Report r;
    r.add("sections", std::to_string(report.sections));
    r.add("peak_resident", std::to_string(report.peak_resident));
    r.add("mean_final_loss", report.sections > 1 ? total / static_cast<double>(report.sections - 1) : 0.0);
    r.save(dir / "report.txt");
    r.write(out);
    return 0;
}

struct GenWarpArgs {
    std::string stack, labels, out;
    bool force = false;
    ConfigOptions config;
};

int run_gen_warp(const GenWarpArgs& a, std::ostream& out, std::ostream& err) {
    const auto c = a.config.resolve(err);
    const auto raw = io::load_stack(a.stack, SectionKind::raw, &err);
    std::optional<SectionStack> labels;
    if (!a.labels.empty()) {
        labels = io::load_stack(a.labels, SectionKind::label, &err);
        if (labels->depth() != raw.depth() || labels->height() != raw.height() || labels->width() != raw.width())
            throw ShapeError("gen-warp: label stack " + a.labels + " does not match raw stack " + a.stack);
    }
    const auto deformed = synth::deform_stack(raw, c.deformation());

    const fs::path dir(a.out);
    io::prepare_output_dir(dir, a.force);
    for (const char* sub : {"raw", "flows", "truth"}) io::prepare_output_dir(dir / sub, a.force);
    if (labels) io::prepare_output_dir(dir / "labels", a.force);
    std::size_t width = 3;
    for (auto index : raw.indices()) width = std::max(width, std::to_string(index).size());

    double displacement = 0.0;
    for (std::size_t k = 0; k < raw.depth(); ++k) {
        const auto name = io::section_file_name(raw.indices()[k], width);
        const auto map_name = fs::path(name).replace_extension(".vmap");
        io::save_image(deformed.sections[k], dir / "raw" / name, SectionKind::raw);
        io::save_dense_flow(deformed.flows[k], dir / "flows" / map_name);
        io::save_dense_flow(synth::invert_flow(deformed.flows[k]), dir / "truth" / map_name);
        if (labels)
            io::save_image(synth::deform_image(labels->load(k), deformed.flows[k], SectionKind::label),
                           dir / "labels" / name, SectionKind::label);
        displacement += metrics::mean_endpoint_error(deformed.flows[k], warp::DenseFlow::zeros(raw.height(), raw.width()));
    }
    Report r;
    r.add("sections", std::to_string(raw.depth()));
    r.add("mean_displacement", displacement / static_cast<double>(raw.depth()));
    r.save(dir / "report.txt");
    r.write(out);
    return 0;
}

struct EvalArgs {
    std::string a, b, csv;
    std::string truth, test;
    std::string estimate;
    ConfigOptions heatmap_config, dice_config;
};

int run_eval_ncc(const EvalArgs& a, std::ostream& out) {
    Report r;
    r.add("ncc", metrics::ncc(io::load_image(a.a, SectionKind::raw), io::load_image(a.b, SectionKind::raw)));
    r.write(out);
    return 0;
}

int run_eval_heatmap(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    const auto c = a.heatmap_config.resolve(err);
    const auto hm = metrics::ncc_heatmap(io::load_image(a.a, SectionKind::raw), io::load_image(a.b, SectionKind::raw),
                                         c.heatmap_window(), c.heatmap_stride());
    if (!a.csv.empty()) write_heatmap_csv(hm, a.csv);
    Report r;
    r.add("heatmap_mean", hm.mean);
    r.add("valid_windows", std::to_string(hm.valid_count));
    r.add("windows", std::to_string(hm.values.size()));
    r.write(out);
    return 0;
}

int run_eval_dice(const EvalArgs& a, std::ostream& out, std::ostream& err) {
    const auto c = a.dice_config.resolve(err);
    const auto truth = io::load_stack(a.truth, SectionKind::label, &err);
    const auto test = io::load_stack(a.test, SectionKind::label, &err);
    if (truth.depth() != test.depth())
        throw ShapeError("eval dice: truth stack " + a.truth + " has depth " + std::to_string(truth.depth()) +
                         " but test stack " + a.test + " has depth " + std::to_string(test.depth()));
    const auto top = metrics::mean_dice_top_k(truth.materialize(), test.materialize(), c.dice_top_k());
    Report r;
    r.add("dice_mean", top.mean);
    r.add("labels_scored", std::to_string(top.labels.size()));
    if (top.labels.size() < c.dice_top_k())
        err << "warning: only " << top.labels.size() << " labels available, fewer than k=" << c.dice_top_k() << "\n";
    r.write(out);
    return 0;
}

int run_eval_epe(const EvalArgs& a, std::ostream& out) {
    const auto est = io::load_as_dense_flow(a.estimate);
    const auto truth = io::load_dense_flow(a.truth);
    Report r;
    r.add("epe", metrics::mean_endpoint_error(est, truth));
    r.write(out);
    return 0;
}

struct XsectionArgs {
    std::string stack, axis = "row", out, kind = "raw";
    std::int64_t index = 0;
};

int run_xsection(const XsectionArgs& a, std::ostream& out, std::ostream& err) {
    const auto kind = parse_section_kind(a.kind);
    const auto stack = io::load_stack(a.stack, kind, &err);
    const auto axis = a.axis == "row" ? metrics::Axis::row : metrics::Axis::column;
    const auto slice = metrics::cross_section(stack.materialize(), axis, a.index);
    io::save_image(slice, a.out, kind);
    Report r;
    r.add("image", a.out);
    r.add("rows", std::to_string(slice.dim(0)));
    r.add("columns", std::to_string(slice.dim(1)));
    r.write(out);
    return 0;
}

} // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Serial-section EM stack alignment with learned features", "ssem"};
    app.require_subcommand(1);
    app.fallthrough(false);

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train the feature autoencoder on a raw stack");
    train_cmd->add_option("--stack", train.stack, "raw section directory")->required();
    train_cmd->add_option("--out", train.out, "checkpoint file to write")->required();
    train_cmd->add_option("--curve", train.curve, "loss-curve CSV (default <out>.loss.csv)");
    train.config.attach(*train_cmd);

    AlignPairArgs pair;
    auto* pair_cmd = app.add_subcommand("align-pair", "Register a moving image to a fixed image");
    pair_cmd->add_option("--fixed", pair.fixed, "fixed image")->required()->check(CLI::ExistingFile);
    pair_cmd->add_option("--moving", pair.moving, "moving image")->required()->check(CLI::ExistingFile);
    pair_cmd->add_option("--checkpoint", pair.checkpoint, "autoencoder checkpoint");
    pair_cmd->add_option("--out", pair.out, "output directory")->required();
    pair_cmd->add_option("--similarity", pair.similarity, "feature, pixel or both")
        ->check(CLI::IsMember({"feature", "pixel", "both"}));
    pair_cmd->add_flag("--force", pair.force, "overwrite a non-empty output directory");
    pair.config.attach(*pair_cmd, {"similarity"});

    AlignStackArgs st;
    auto* stack_cmd = app.add_subcommand("align-stack", "Align a whole stack with the sliding window");
    stack_cmd->add_option("--stack", st.stack, "raw section directory")->required();
    stack_cmd->add_option("--labels", st.labels, "label directory to carry along");
    stack_cmd->add_option("--checkpoint", st.checkpoint, "autoencoder checkpoint");
    stack_cmd->add_option("--out", st.out, "output directory")->required();
    stack_cmd->add_flag("--force", st.force, "overwrite a non-empty output directory");
    st.config.attach(*stack_cmd);

    GenWarpArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-warp", "Apply random smooth deformations to a stack");
    gen_cmd->add_option("--stack", gen.stack, "raw section directory")->required();
    gen_cmd->add_option("--labels", gen.labels, "label directory deformed with the same flows");
    gen_cmd->add_option("--out", gen.out, "output directory")->required();
    gen_cmd->add_flag("--force", gen.force, "overwrite a non-empty output directory");
    gen.config.attach(*gen_cmd);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Score images, stacks or flows");
    eval_cmd->require_subcommand(1);
    auto* ncc_cmd = eval_cmd->add_subcommand("ncc", "NCC of two images");
    ncc_cmd->add_option("--a", ev.a, "first image")->required()->check(CLI::ExistingFile);
    ncc_cmd->add_option("--b", ev.b, "second image")->required()->check(CLI::ExistingFile);
    auto* heat_cmd = eval_cmd->add_subcommand("heatmap", "Windowed NCC of two images");
    heat_cmd->add_option("--a", ev.a, "first image")->required()->check(CLI::ExistingFile);
    heat_cmd->add_option("--b", ev.b, "second image")->required()->check(CLI::ExistingFile);
    heat_cmd->add_option("--csv", ev.csv, "write the heatmap values here");
    ev.heatmap_config.attach(*heat_cmd);
    auto* dice_cmd = eval_cmd->add_subcommand("dice", "Mean Dice of the largest labels");
    dice_cmd->add_option("--truth", ev.truth, "ground-truth label directory")->required();
    dice_cmd->add_option("--test", ev.test, "label directory to score")->required();
    ev.dice_config.attach(*dice_cmd);
    auto* epe_cmd = eval_cmd->add_subcommand("epe", "Mean endpoint error of a flow estimate");
    epe_cmd->add_option("--estimate", ev.estimate, "vector map or dense flow")->required()->check(CLI::ExistingFile);
    epe_cmd->add_option("--truth", ev.truth, "ground-truth dense flow")->required()->check(CLI::ExistingFile);

    XsectionArgs xs;
    auto* xs_cmd = app.add_subcommand("xsection", "Slice a stack along a row or column");
    xs_cmd->add_option("--stack", xs.stack, "section directory")->required();
    xs_cmd->add_option("--axis", xs.axis, "row or column")->check(CLI::IsMember({"row", "column"}));
    xs_cmd->add_option("--index", xs.index, "row or column index")->required();
    xs_cmd->add_option("--kind", xs.kind, "raw or label")->check(CLI::IsMember({"raw", "label"}));
    xs_cmd->add_option("--out", xs.out, "output image")->required();

    if (argc <= 1) {
        err << app.help();
        return 2;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (train_cmd->parsed()) return run_train(train, out, err);
        if (pair_cmd->parsed()) return run_align_pair(pair, out, err);
        if (stack_cmd->parsed()) return run_align_stack(st, out, err);
        if (gen_cmd->parsed()) return run_gen_warp(gen, out, err);
        if (ncc_cmd->parsed()) return run_eval_ncc(ev, out);
        if (heat_cmd->parsed()) return run_eval_heatmap(ev, out, err);
        if (dice_cmd->parsed()) return run_eval_dice(ev, out, err);
        if (epe_cmd->parsed()) return run_eval_epe(ev, out);
        if (xs_cmd->parsed()) return run_xsection(xs, out, err);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    err << app.help();
    return 2;
}

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"ssem"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return cli_dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace ssem::cli
