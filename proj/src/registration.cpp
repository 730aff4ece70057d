#include "ssem/registration.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssem/errors.hpp"

namespace ssem::reg {

using nd::Graph;
using nd::Tensor;
using nd::Var;

std::string to_string(Similarity s) { return s == Similarity::feature ? "feature" : "pixel"; }

Similarity parse_similarity(const std::string& text) {
    if (text == "feature") return Similarity::feature;
    if (text == "pixel") return Similarity::pixel;
    throw Error("unknown similarity '" + text + "' (expected feature or pixel)");
}

void RegistrationConfig::validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) throw Error("regularization weights must be >= 0");
    if (grid_spacing < 1) throw Error("grid spacing must be >= 1");
    if (grid_minimum < 2) throw Error("grid minimum must be >= 2");
    if (iterations < 0) throw Error("iterations must be >= 0");
    if (!(adam.lr >= 0)) throw Error("learning rate must be >= 0");
    if (drop_rate < 0 || drop_rate >= 1) throw Error("drop rate must lie in [0, 1)");
}

Tensor loss_drop_mask(const Tensor& error_map, double drop_rate) {
    if (drop_rate < 0 || drop_rate > 1) throw Error("drop rate must lie in [0, 1]");
    const auto n = static_cast<std::size_t>(error_map.size());
    const auto drop = static_cast<std::size_t>(std::floor(drop_rate * static_cast<double>(n)));
    Tensor keep(error_map.shape(), 1.0f);
    if (drop == 0) return keep;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const float* e = error_map.data().data();
    // Highest error first; among ties the higher index goes first so the
    // lower one survives.
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(drop), order.end(),
                      [e](std::size_t a, std::size_t b) { return e[a] != e[b] ? e[a] > e[b] : a > b; });
    for (std::size_t i = 0; i < drop; ++i) keep[static_cast<std::int64_t>(order[i])] = 0.0f;
    return keep;
}

double drop_schedule(std::int64_t iteration, double initial_rate, double floor) {
    const double rate = initial_rate * std::exp2(-static_cast<double>(iteration));
    return rate < floor ? 0.0 : rate;
}

void adam_update(AdamState& state, warp::VectorMap& v, const Tensor& grad, const AdamSettings& settings) {
    if (grad.shape() != v.displacements.shape()) {
        throw ShapeError("gradient " + nd::shape_string(grad.shape()) + " does not match vector map " +
                         nd::shape_string(v.displacements.shape()));
    }
    if (state.first.shape() != grad.shape()) {
        state.first = Tensor(grad.shape());
        state.second = Tensor(grad.shape());
        state.step = 0;
    }
    AdamMoments moments{std::move(state.first), std::move(state.second)};
    adam_step(moments, ++state.step, v.displacements, grad, settings);
    state.first = std::move(moments.first);
    state.second = std::move(moments.second);
}

// ---- objective ----------------------------------------------------------------

namespace {

Tensor as_image(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw ShapeError(std::string(what) + " must be a [H,W] image, got " + nd::shape_string(t.shape()));
    return t;
}

} // namespace

Objective::Objective(const Tensor& moving, std::span<const Tensor> references, std::span<const double> weights,
                     const ae::AutoencoderModel* model, const RegistrationConfig& cfg, Options options)
    : moving_(as_image(moving, "moving section").reshaped({1, moving.dim(0), moving.dim(1)})),
      weights_(weights.begin(), weights.end()),
      model_(model),
      cfg_(cfg),
      options_(options),
      grid_h_(warp::grid_extents_for(moving.dim(0), moving.dim(1), cfg.grid_spacing, cfg.grid_minimum).first),
      grid_w_(warp::grid_extents_for(moving.dim(0), moving.dim(1), cfg.grid_spacing, cfg.grid_minimum).second),
      feature_h_(moving.dim(0)),
      feature_w_(moving.dim(1)),
      upsampler_(grid_h_, grid_w_, moving.dim(0), moving.dim(1), cfg.interpolation) {
    cfg_.validate();
    if (references.empty()) throw Error("registration needs at least one reference section");
    if (references.size() != weights.size()) {
        throw Error("got " + std::to_string(references.size()) + " references but " + std::to_string(weights.size()) +
                    " weights");
    }
    const auto h = moving.dim(0), w = moving.dim(1);
    for (const auto& r : references) {
        if (as_image(r, "reference section").shape() != moving.shape()) {
            throw ShapeError("reference " + nd::shape_string(r.shape()) + " differs from moving section " +
                             nd::shape_string(moving.shape()));
        }
    }
    if (cfg_.similarity == Similarity::feature) {
        if (model_ == nullptr) throw Error("feature similarity requires a trained encoder");
        const auto ds = model_->spec.downscale();
        if (h % ds != 0 || w % ds != 0) {
            throw ShapeError("section extents " + std::to_string(h) + "x" + std::to_string(w) +
                             " are not divisible by the encoder downscale " + std::to_string(ds));
        }
        feature_h_ = h / ds;
        feature_w_ = w / ds;
        for (const auto& r : references) reference_features_.push_back(ae::encode(*model_, r));
    } else {
        for (const auto& r : references) reference_features_.push_back(r.reshaped({1, 1, h, w}));
    }
}

warp::VectorMap Objective::zero_map() const {
    return warp::VectorMap::zeros(grid_h_, grid_w_, moving_.dim(1), moving_.dim(2), cfg_.interpolation);
}

template <class T>
LossVars<T> Objective::build(Graph<T>& g, const Var<T>& v, double drop_rate, const Tensor* fixed_keep) const {
    if (v.shape() != nd::Shape{grid_h_, grid_w_, 2}) {
        throw ShapeError("displacements " + nd::shape_string(v.shape()) + " do not match the " +
                         std::to_string(grid_h_) + "x" + std::to_string(grid_w_) + " control grid");
    }
    const auto h = moving_.dim(1), w = moving_.dim(2);
    auto flow = upsampler_.dense(v);
    auto warped = nd::reshape(warp::warp_image(nd::lift(g, moving_), flow), {1, 1, h, w});

    Var<T> features = warped;
    if (cfg_.similarity == Similarity::feature) {
        auto params = ae::bind_constants(g, *model_);
        features = ae::encode(model_->spec, params, warped);
    }

    Tensor mask_weights({feature_h_, feature_w_}, 1.0f);
    if (options_.use_mask) {
        warp::DenseFlow dense{flow.value().template cast<float>()};
        mask_weights = warp::mask_to_feature_weights(warp::empty_space_mask(dense, h, w), feature_h_, feature_w_);
    }

    Var<T> pooled;
    for (std::size_t i = 0; i < reference_features_.size(); ++i) {
        auto d = nd::sub(features, nd::lift(g, reference_features_[i]));
        auto e = nd::reshape(nd::sum_axis(nd::mul(d, d), 1), {feature_h_, feature_w_});
        auto term = nd::scale(e, static_cast<T>(weights_[i]));
        pooled = pooled.valid() ? nd::add(pooled, term) : term;
    }
    auto masked = nd::mul(pooled, nd::lift(g, mask_weights));

    LossVars<T> out;
    out.error_map = masked.value().template cast<float>();
    out.keep = fixed_keep ? *fixed_keep : loss_drop_mask(out.error_map, drop_rate);
    if (out.keep.shape() != out.error_map.shape()) throw ShapeError("keep mask does not match the feature extents");
    out.mask_weights = std::move(mask_weights);
    out.feature = nd::sum(nd::mul(masked, nd::lift(g, out.keep)));

    auto by_component = nd::permute(v, {2, 0, 1});
    auto v_row = nd::take(by_component, 0);
    auto v_col = nd::take(by_component, 1);
    auto [col_dr, col_dc] = nd::spatial_gradient(v_col);
    auto [row_dr, row_dc] = nd::spatial_gradient(v_row);
    out.magnitude = nd::sum_sq(v);
    out.smooth_x = nd::add(nd::sum_sq(col_dr), nd::sum_sq(col_dc));
    out.smooth_y = nd::add(nd::sum_sq(row_dr), nd::sum_sq(row_dc));

    out.total = nd::add(nd::add(out.feature, nd::scale(out.magnitude, static_cast<T>(cfg_.alpha))),
                        nd::add(nd::scale(out.smooth_x, static_cast<T>(cfg_.beta)),
                                nd::scale(out.smooth_y, static_cast<T>(cfg_.gamma))));
    return out;
}

namespace {

template <class T>
LossTerms terms_of(const LossVars<T>& l) {
    return {static_cast<double>(l.feature.value().item()), static_cast<double>(l.magnitude.value().item()),
            static_cast<double>(l.smooth_x.value().item()), static_cast<double>(l.smooth_y.value().item()),
            static_cast<double>(l.total.value().item())};
}

} // namespace

LossTerms Objective::evaluate(const warp::VectorMap& v, double drop_rate) const {
    v.validate();
    Graph<float> g;
    auto vars = build(g, g.constant(v.displacements), drop_rate);
    return terms_of(vars);
}

template LossVars<float> Objective::build(Graph<float>&, const Var<float>&, double, const Tensor*) const;
template LossVars<double> Objective::build(Graph<double>&, const Var<double>&, double, const Tensor*) const;

double feature_loss_pair(const Tensor& moving, const Tensor& reference, const warp::VectorMap& v,
                         const ae::AutoencoderModel* model, const RegistrationConfig& cfg) {
    const double one = 1.0;
    Objective obj(moving, std::span<const Tensor>(&reference, 1), std::span<const double>(&one, 1), model, cfg,
                  Objective::Options{false});
    return obj.evaluate(v, 0.0).total;
}

double multi_neighbor_loss(const Tensor& moving, std::span<const Tensor> references, std::span<const double> weights,
                           const warp::VectorMap& v, const ae::AutoencoderModel* model, const RegistrationConfig& cfg,
                           double drop_rate) {
    Objective obj(moving, references, weights, model, cfg);
    return obj.evaluate(v, drop_rate).total;
}

RegistrationResult register_image(const Tensor& moving, std::span<const Tensor> references,
                                  std::span<const double> weights, const ae::AutoencoderModel* model,
                                  const RegistrationConfig& cfg) {
    Objective obj(moving, references, weights, model, cfg);
    RegistrationResult res;
    res.map = obj.zero_map();
    AdamState state;
    for (std::int64_t it = 0; it < cfg.iterations; ++it) {
        Graph<float> g;
        auto v = g.leaf(res.map.displacements);
        LossVars<float> vars;
        try {
            vars = obj.build(g, v, drop_schedule(it, cfg.drop_rate, cfg.drop_floor));
        } catch (const NonFiniteError& e) {
            throw NonFiniteError("registration diverged at iteration " + std::to_string(it) + ": " + e.what());
        }
        res.terms.push_back(terms_of(vars));
        res.trace.push_back(res.terms.back().total);
        const Var<float> wrt[] = {v};
        auto grads = g.backward(vars.total, wrt);
        adam_update(state, res.map, grads[0], cfg.adam);
        if (!res.map.displacements.all_finite()) {
            throw NonFiniteError("registration diverged at iteration " + std::to_string(it) +
                                 ": displacements became non-finite");
        }
        res.iterations = it + 1;
    }
    return res;
}

} // namespace ssem::reg
