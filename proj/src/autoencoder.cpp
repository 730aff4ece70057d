#include "ssem/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace ssem::ae {

using nd::Graph;
using nd::Padding;
using nd::Tensor;
using nd::Var;

ArchitectureSpec ArchitectureSpec::mirrored(std::string preset, std::vector<LayerSpec> encoder) {
    ArchitectureSpec spec;
    spec.preset = std::move(preset);
    spec.encoder = std::move(encoder);
    for (std::size_t j = 0; j < spec.encoder.size(); ++j) {
        const std::size_t m = spec.encoder.size() - 1 - j;
        const std::int64_t out = m == 0 ? 1 : spec.encoder[m - 1].channels;
        spec.decoder.push_back({spec.encoder[m].kernel, out, spec.encoder[m].stride});
    }
    return spec;
}

ArchitectureSpec ArchitectureSpec::deep3x3() {
    return mirrored("deep3x3", {{3, 16, 2}, {3, 32, 2}, {3, 64, 2}, {3, 64, 2}});
}

ArchitectureSpec ArchitectureSpec::shallow7x7() {
    return mirrored("shallow7x7", {{7, 16, 2}, {7, 32, 2}, {7, 64, 2}});
}

ArchitectureSpec ArchitectureSpec::from_preset(const std::string& name) {
    if (name == "deep3x3") return deep3x3();
    if (name == "shallow7x7") return shallow7x7();
    throw Error("unknown architecture preset '" + name + "' (expected deep3x3 or shallow7x7)");
}

void ArchitectureSpec::validate() const {
    if (encoder.empty()) throw Error("architecture has no encoder layers");
    for (const auto& l : encoder) {
        if (l.kernel < 1 || l.channels < 1 || l.stride < 1) throw Error("architecture has a non-positive layer extent");
    }
    const auto mirror = mirrored(preset, encoder);
    if (decoder != mirror.decoder) throw Error("decoder of architecture '" + preset + "' is not the mirror of its encoder");
    const auto d = downscale();
    if ((d & (d - 1)) != 0) throw Error("total encoder downscale " + std::to_string(d) + " is not a power of two");
}

std::int64_t ArchitectureSpec::downscale() const {
    std::int64_t d = 1;
    for (const auto& l : encoder) d *= l.stride;
    return d;
}

std::int64_t ArchitectureSpec::feature_channels() const { return encoder.empty() ? 0 : encoder.back().channels; }

std::string ArchitectureSpec::describe() const {
    std::ostringstream os;
    os << preset << ':';
    for (std::size_t i = 0; i < encoder.size(); ++i) {
        if (i) os << ',';
        os << encoder[i].kernel << '/' << encoder[i].channels << '/' << encoder[i].stride;
    }
    return os.str();
}

ArchitectureSpec ArchitectureSpec::parse(const std::string& text) {
    const auto colon = text.find(':');
    if (colon == std::string::npos) throw FormatError("malformed architecture descriptor '" + text + "'");
    std::vector<LayerSpec> layers;
    std::istringstream is(text.substr(colon + 1));
    std::string item;
    while (std::getline(is, item, ',')) {
        LayerSpec l;
        char s1 = 0, s2 = 0;
        std::istringstream li(item);
        if (!(li >> l.kernel >> s1 >> l.channels >> s2 >> l.stride) || s1 != '/' || s2 != '/') {
            throw FormatError("malformed layer '" + item + "' in architecture descriptor");
        }
        layers.push_back(l);
    }
    auto spec = mirrored(text.substr(0, colon), std::move(layers));
    spec.validate();
    return spec;
}

namespace {

std::vector<nd::Shape> encoder_shapes(const ArchitectureSpec& spec) {
    std::vector<nd::Shape> shapes;
    std::int64_t in = 1;
    for (const auto& l : spec.encoder) {
        shapes.push_back({l.channels, in, l.kernel, l.kernel});
        in = l.channels;
    }
    return shapes;
}

} // namespace

AutoencoderModel build_model(const ArchitectureSpec& spec, std::uint64_t seed) {
    spec.validate();
    AutoencoderModel model;
    model.spec = spec;
    std::mt19937_64 rng(seed);
    auto init = [&rng](const nd::Shape& shape) {
        const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
        const double fan_out = static_cast<double>(shape[0] * shape[2] * shape[3]);
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Tensor t(shape);
        for (auto& v : t.data()) v = static_cast<float>(dist(rng));
        return t;
    };
    const auto shapes = encoder_shapes(spec);
    for (const auto& s : shapes) model.encoder.push_back(init(s));
    for (std::size_t j = 0; j < shapes.size(); ++j) model.decoder.push_back(init(shapes[shapes.size() - 1 - j]));
    return model;
}

void check_parameter_shapes(const AutoencoderModel& model) {
    const auto shapes = encoder_shapes(model.spec);
    if (model.encoder.size() != shapes.size() || model.decoder.size() != shapes.size()) {
        throw ArchitectureMismatchError("model has " + std::to_string(model.encoder.size()) + "+" +
                                        std::to_string(model.decoder.size()) + " layers, architecture '" +
                                        model.spec.describe() + "' needs " + std::to_string(shapes.size()) + "+" +
                                        std::to_string(shapes.size()));
    }
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        const auto& dec = model.decoder[shapes.size() - 1 - i];
        if (model.encoder[i].shape() != shapes[i] || dec.shape() != shapes[i]) {
            throw ArchitectureMismatchError("parameter shape of layer " + std::to_string(i) +
                                            " does not match architecture '" + model.spec.describe() + "'");
        }
    }
}

template <class T>
ModelVars<T> bind_constants(Graph<T>& g, const AutoencoderModel& model) {
    ModelVars<T> vars;
    for (const auto& k : model.encoder) vars.encoder.push_back(nd::lift(g, k));
    for (const auto& k : model.decoder) vars.decoder.push_back(nd::lift(g, k));
    return vars;
}

template <class T>
ModelVars<T> bind_leaves(Graph<T>& g, const AutoencoderModel& model) {
    ModelVars<T> vars;
    for (const auto& k : model.encoder) vars.encoder.push_back(g.leaf(k.template cast<T>()));
    for (const auto& k : model.decoder) vars.decoder.push_back(g.leaf(k.template cast<T>()));
    return vars;
}

template <class T>
Var<T> encode(const ArchitectureSpec& spec, const ModelVars<T>& params, const Var<T>& image) {
    const auto& shape = image.shape();
    if (shape.size() != 4 || shape[1] != 1) {
        throw ShapeError("encode expects a [B,1,H,W] image, got " + nd::shape_string(shape));
    }
    const auto d = spec.downscale();
    if (shape[2] % d != 0 || shape[3] % d != 0) {
        throw ShapeError("image extents " + std::to_string(shape[2]) + "x" + std::to_string(shape[3]) +
                         " are not divisible by the encoder downscale factor " + std::to_string(d));
    }
    Var<T> x = image;
    for (std::size_t i = 0; i < spec.encoder.size(); ++i) {
        x = nd::relu(nd::conv2d(x, params.encoder[i], spec.encoder[i].stride, Padding::same));
    }
    return x;
}

template <class T>
Var<T> decode(const ArchitectureSpec& spec, const ModelVars<T>& params, const Var<T>& features) {
    const auto& shape = features.shape();
    if (shape.size() != 4 || shape[1] != spec.feature_channels()) {
        throw ShapeError("decode expects [B," + std::to_string(spec.feature_channels()) + ",h,w] features, got " +
                         nd::shape_string(shape));
    }
    Var<T> x = features;
    for (std::size_t j = 0; j < spec.decoder.size(); ++j) {
        x = nd::transposed_conv2d(x, params.decoder[j], spec.decoder[j].stride, Padding::same);
        // The output layer stays linear so reconstructions are not clipped at 0.
        if (j + 1 < spec.decoder.size()) x = nd::relu(x);
    }
    return x;
}

namespace {

template <class T>
Var<T> with_weight_penalty(const ModelVars<T>& params, const Var<T>& reconstruction_term, double lambda) {
    if (lambda == 0.0) return reconstruction_term;
    Var<T> reg = nd::sum_sq(params.encoder.front());
    for (std::size_t i = 1; i < params.encoder.size(); ++i) reg = nd::add(reg, nd::sum_sq(params.encoder[i]));
    for (const auto& k : params.decoder) reg = nd::add(reg, nd::sum_sq(k));
    return nd::add(reconstruction_term, nd::scale(reg, static_cast<T>(lambda)));
}

} // namespace

template <class T>
Var<T> ae_loss(const ArchitectureSpec& spec, const ModelVars<T>& params, const Var<T>& batch, double lambda) {
    auto recon = decode(spec, params, encode(spec, params, batch));
    return with_weight_penalty(params, nd::sum_sq(nd::sub(batch, recon)), lambda);
}

namespace {

Tensor as_batch(const Tensor& image) {
    if (image.rank() == 2) return image.reshaped({1, 1, image.dim(0), image.dim(1)});
    return image;
}

} // namespace

Tensor encode(const AutoencoderModel& model, const Tensor& image) {
    Graph<float> g;
    auto params = bind_constants(g, model);
    return encode(model.spec, params, g.constant(as_batch(image))).value();
}

Tensor decode(const AutoencoderModel& model, const Tensor& features) {
    Graph<float> g;
    auto params = bind_constants(g, model);
    return decode(model.spec, params, g.constant(features)).value();
}

double ae_loss(const AutoencoderModel& model, const Tensor& batch, double lambda) {
    Graph<double> g;
    auto params = bind_constants(g, model);
    return ae_loss(model.spec, params, g.constant(as_batch(batch).cast<double>()), lambda).value().item();
}

PatchBatch sample_patches(const SectionStack& stack, std::int64_t patch, std::size_t count, std::uint64_t seed) {
    if (patch < 1 || patch > stack.height() || patch > stack.width()) {
        throw ShapeError("patch extent " + std::to_string(patch) + " does not fit sections of " +
                         std::to_string(stack.height()) + "x" + std::to_string(stack.width()));
    }
    PatchBatch batch;
    batch.patches = Tensor({static_cast<std::int64_t>(count), 1, patch, patch});
    if (count == 0) return batch;
    if (stack.depth() == 0) throw Error("cannot sample patches from an empty stack");

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick_section(0, stack.depth() - 1);
    std::uniform_int_distribution<std::int64_t> pick_row(0, stack.height() - patch);
    std::uniform_int_distribution<std::int64_t> pick_col(0, stack.width() - patch);
    batch.origins.resize(count);
    for (auto& o : batch.origins) {
        o.section = pick_section(rng);
        o.row = pick_row(rng);
        o.col = pick_col(rng);
    }

    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return batch.origins[a].section < batch.origins[b].section; });
    Tensor section;
    std::size_t loaded = stack.depth();
    for (std::size_t n : order) {
        const auto& o = batch.origins[n];
        if (o.section != loaded) {
            section = stack.load(o.section);
            loaded = o.section;
        }
        float* dst = batch.patches.raw() + static_cast<std::int64_t>(n) * patch * patch;
        for (std::int64_t r = 0; r < patch; ++r)
            for (std::int64_t c = 0; c < patch; ++c) dst[r * patch + c] = section.at(o.row + r, o.col + c);
    }
    return batch;
}

void TrainConfig::validate() const {
    if (lambda < 0.0) throw ConfigError("train lambda must be >= 0");
    if (batch_size < 1) throw ConfigError("train batch size must be >= 1");
    if (steps < 0) throw ConfigError("train step count must be >= 0");
    if (patch_count < 1) throw ConfigError("train patch count must be >= 1");
    if (adam.lr < 0.0) throw ConfigError("train learning rate must be >= 0");
}

TrainResult train_autoencoder(const AutoencoderModel& model, const SectionStack& stack, const TrainConfig& cfg) {
    cfg.validate();
    auto pool = sample_patches(stack, cfg.patch_size, static_cast<std::size_t>(cfg.patch_count), cfg.seed);
    return train_autoencoder(model, pool.patches, cfg);
}

TrainResult train_autoencoder(const AutoencoderModel& model, const Tensor& patches, const TrainConfig& cfg) {
    cfg.validate();
    check_parameter_shapes(model);
    if (patches.rank() != 4 || patches.dim(1) != 1 || patches.dim(0) < 1) {
        throw ShapeError("training patches must be [N,1,p,p], got " + nd::shape_string(patches.shape()));
    }
    const std::int64_t pool = patches.dim(0);
    const std::int64_t batch = std::min(cfg.batch_size, pool);
    const std::int64_t patch_area = patches.dim(2) * patches.dim(3);

    TrainResult result;
    result.model = model;
    std::vector<AdamMoments> moments(model.encoder.size() + model.decoder.size());
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::int64_t> permutation(static_cast<std::size_t>(pool));
    std::iota(permutation.begin(), permutation.end(), std::int64_t{0});
    std::int64_t cursor = pool;

    for (std::int64_t step = 1; step <= cfg.steps; ++step) {
        if (cursor + batch > pool) {
            std::shuffle(permutation.begin(), permutation.end(), rng);
            cursor = 0;
        }
        std::vector<std::int64_t> chosen(permutation.begin() + cursor, permutation.begin() + cursor + batch);
        cursor += batch;
        std::sort(chosen.begin(), chosen.end());
        Tensor x({batch, 1, patches.dim(2), patches.dim(3)});
        for (std::int64_t b = 0; b < batch; ++b) {
            std::copy_n(patches.raw() + chosen[static_cast<std::size_t>(b)] * patch_area, patch_area,
                        x.raw() + b * patch_area);
        }

        Graph<float> g;
        std::vector<Tensor> grads;
        double loss_value = 0.0, recon_value = 0.0;
        try {
            auto params = bind_leaves(g, result.model);
            auto input = g.constant(std::move(x));
            auto recon = decode(result.model.spec, params, encode(result.model.spec, params, input));
            auto recon_term = nd::sum_sq(nd::sub(input, recon));
            auto loss = with_weight_penalty(params, recon_term, cfg.lambda);
            recon_value = recon_term.value().item();
            loss_value = loss.value().item();
            std::vector<Var<float>> wrt(params.encoder);
            wrt.insert(wrt.end(), params.decoder.begin(), params.decoder.end());
            grads = g.backward(loss, wrt);
        } catch (const NonFiniteError& e) {
            throw NonFiniteError("autoencoder training diverged at step " + std::to_string(step) + ": " + e.what());
        }
        if (!std::isfinite(loss_value)) {
            throw NonFiniteError("autoencoder training diverged at step " + std::to_string(step));
        }
        result.loss.push_back(loss_value);
        result.mse.push_back(recon_value / static_cast<double>(batch * patch_area));

        const std::size_t n_enc = result.model.encoder.size();
        for (std::size_t i = 0; i < moments.size(); ++i) {
            Tensor& param = i < n_enc ? result.model.encoder[i] : result.model.decoder[i - n_enc];
            adam_step(moments[i], step, param, grads[i], cfg.adam);
        }
    }
    return result;
}

#define SSEM_INSTANTIATE_AE(T)                                                                          \
    template ModelVars<T> bind_constants(Graph<T>&, const AutoencoderModel&);                           \
    template ModelVars<T> bind_leaves(Graph<T>&, const AutoencoderModel&);                              \
    template Var<T> encode(const ArchitectureSpec&, const ModelVars<T>&, const Var<T>&);                \
    template Var<T> decode(const ArchitectureSpec&, const ModelVars<T>&, const Var<T>&);                \
    template Var<T> ae_loss(const ArchitectureSpec&, const ModelVars<T>&, const Var<T>&, double);

SSEM_INSTANTIATE_AE(float)
SSEM_INSTANTIATE_AE(double)

#undef SSEM_INSTANTIATE_AE

} // namespace ssem::ae
