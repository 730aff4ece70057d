#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssem/adam.hpp"
#include "ssem/autoencoder.hpp"
#include "ssem/warpfield.hpp"

namespace ssem::reg {

// feature: compare encoder features of the warped moving image and the
// references. pixel: compare raw intensities (baseline).
enum class Similarity { feature, pixel };

std::string to_string(Similarity s);
Similarity parse_similarity(const std::string& text);

struct RegistrationConfig {
    double alpha = 0.1;  // weight of ||v||²
    double beta = 1.0;   // weight of ||∇v_col||²
    double gamma = 1.0;  // weight of ||∇v_row||²
    std::int64_t grid_spacing = 32;
    std::int64_t grid_minimum = 4;
    std::int64_t iterations = 200;
    AdamSettings adam{0.05, 0.9, 0.999, 1e-8};
    double drop_rate = 0.5;    // initial loss-drop fraction
    double drop_floor = 0.01;  // rates below this become 0
    warp::Interpolation interpolation = warp::Interpolation::bilinear;
    Similarity similarity = Similarity::feature;

    void validate() const;
};

struct AdamState {
    nd::Tensor first;
    nd::Tensor second;
    std::int64_t step = 0;
};

struct LossTerms {
    double feature = 0.0;
    double magnitude = 0.0;  // ||v||², unweighted
    double smooth_x = 0.0;   // ||∇v_col||², unweighted
    double smooth_y = 0.0;   // ||∇v_row||², unweighted
    double total = 0.0;
};

struct RegistrationResult {
    warp::VectorMap map;
    std::vector<double> trace;     // total loss per iteration, before the update
    std::vector<LossTerms> terms;  // per iteration
    std::int64_t iterations = 0;
};

// Keep-mask that zeroes exactly floor(rate * count) positions of highest
// error. Among equal errors the lower linear index is kept.
nd::Tensor loss_drop_mask(const nd::Tensor& error_map, double drop_rate);

// initial * 2^-iteration, clamped to 0 once below `floor`.
double drop_schedule(std::int64_t iteration, double initial_rate, double floor = 0.01);

void adam_update(AdamState& state, warp::VectorMap& v, const nd::Tensor& grad, const AdamSettings& settings);

template <class T>
struct LossVars {
    nd::Var<T> total;
    nd::Var<T> feature;
    nd::Var<T> magnitude;
    nd::Var<T> smooth_x;
    nd::Var<T> smooth_y;
    nd::Tensor error_map;     // pooled masked per-position feature error
    nd::Tensor keep;          // loss-drop keep mask used
    nd::Tensor mask_weights;  // resized empty-space mask
};

// Multi-neighbour registration objective for one moving image. Reference
// features are computed once at construction; the encoder stays fixed.
class Objective {
public:
    struct Options {
        bool use_mask = true;
    };

    Objective(const nd::Tensor& moving, std::span<const nd::Tensor> references, std::span<const double> weights,
              const ae::AutoencoderModel* model, const RegistrationConfig& cfg, Options options);
    Objective(const nd::Tensor& moving, std::span<const nd::Tensor> references, std::span<const double> weights,
              const ae::AutoencoderModel* model, const RegistrationConfig& cfg)
        : Objective(moving, references, weights, model, cfg, Options{}) {}

    // Builds the loss for displacements v [gh,gw,2]. The loss-drop keep mask
    // is computed from the current error map unless `fixed_keep` is given;
    // either way it is a constant of the graph.
    template <class T>
    LossVars<T> build(nd::Graph<T>& g, const nd::Var<T>& v, double drop_rate,
                      const nd::Tensor* fixed_keep = nullptr) const;

    LossTerms evaluate(const warp::VectorMap& v, double drop_rate) const;

    warp::VectorMap zero_map() const;
    std::int64_t feature_h() const noexcept { return feature_h_; }
    std::int64_t feature_w() const noexcept { return feature_w_; }

private:
    nd::Tensor moving_;  // [1,H,W]
    std::vector<nd::Tensor> reference_features_;
    std::vector<double> weights_;
    const ae::AutoencoderModel* model_;
    RegistrationConfig cfg_;
    Options options_;
    std::int64_t grid_h_, grid_w_;
    std::int64_t feature_h_, feature_w_;
    warp::FieldUpsampler upsampler_;
};

// Pair loss: single reference, no mask, no loss drop.
double feature_loss_pair(const nd::Tensor& moving, const nd::Tensor& reference, const warp::VectorMap& v,
                         const ae::AutoencoderModel* model, const RegistrationConfig& cfg);

double multi_neighbor_loss(const nd::Tensor& moving, std::span<const nd::Tensor> references,
                           std::span<const double> weights, const warp::VectorMap& v,
                           const ae::AutoencoderModel* model, const RegistrationConfig& cfg, double drop_rate);

// Optimizes v from zero with ADAM over cfg.iterations steps. model may be
// null only for Similarity::pixel. Throws NonFiniteError if the loss diverges.
RegistrationResult register_image(const nd::Tensor& moving, std::span<const nd::Tensor> references,
                                  std::span<const double> weights, const ae::AutoencoderModel* model,
                                  const RegistrationConfig& cfg);

} // namespace ssem::reg
