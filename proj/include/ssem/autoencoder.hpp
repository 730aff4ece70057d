#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssem/adam.hpp"
#include "ssem/ndgrad.hpp"
#include "ssem/section_stack.hpp"

namespace ssem::ae {

struct LayerSpec {
    std::int64_t kernel = 3;
    // Output channels of the layer.
    std::int64_t channels = 1;
    std::int64_t stride = 2;

    bool operator==(const LayerSpec&) const = default;
};

// Convolutional encoder plus a mirror-symmetric transposed-convolution
// decoder, without bias terms or fully connected layers.
struct ArchitectureSpec {
    std::string preset;  // "deep3x3", "shallow7x7" or "custom"
    std::vector<LayerSpec> encoder;
    std::vector<LayerSpec> decoder;

    static ArchitectureSpec deep3x3();
    static ArchitectureSpec shallow7x7();
    static ArchitectureSpec from_preset(const std::string& name);
    // Encoder layers as given, decoder derived as their mirror.
    static ArchitectureSpec mirrored(std::string preset, std::vector<LayerSpec> encoder);

    // Throws Error unless the decoder mirrors the encoder and the total
    // downscale is a power of two.
    void validate() const;
    std::int64_t downscale() const;
    std::int64_t feature_channels() const;
    // Single-line textual form, e.g. "shallow7x7:7/16/2,7/32/2,7/64/2".
    std::string describe() const;
    static ArchitectureSpec parse(const std::string& text);

    bool operator==(const ArchitectureSpec&) const = default;
};

struct AutoencoderModel {
    ArchitectureSpec spec;
    // encoder[i]: [c_i, c_{i-1}, k, k]; decoder[j] mirrors encoder[L-1-j] and
    // has that layer's kernel shape (it maps c_i back to c_{i-1}).
    std::vector<nd::Tensor> encoder;
    std::vector<nd::Tensor> decoder;
};

// Uniform(-b, b) initialization with b = sqrt(6 / (fan_in + fan_out)).
AutoencoderModel build_model(const ArchitectureSpec& spec, std::uint64_t seed);

// Throws ArchitectureMismatchError if parameter shapes disagree with the spec.
void check_parameter_shapes(const AutoencoderModel& model);

template <class T>
struct ModelVars {
    std::vector<nd::Var<T>> encoder;
    std::vector<nd::Var<T>> decoder;
};

template <class T>
ModelVars<T> bind_constants(nd::Graph<T>& g, const AutoencoderModel& model);
template <class T>
ModelVars<T> bind_leaves(nd::Graph<T>& g, const AutoencoderModel& model);

// image: [B,1,H,W] with H and W divisible by spec.downscale().
template <class T>
nd::Var<T> encode(const ArchitectureSpec& spec, const ModelVars<T>& params, const nd::Var<T>& image);
template <class T>
nd::Var<T> decode(const ArchitectureSpec& spec, const ModelVars<T>& params, const nd::Var<T>& features);

// Σ_i ||x_i - y_i||² + λ (Σ ||θ_k||² + Σ ||φ_k||²)
template <class T>
nd::Var<T> ae_loss(const ArchitectureSpec& spec, const ModelVars<T>& params, const nd::Var<T>& batch, double lambda);

// Graph-free conveniences. A rank-2 image is treated as [1,1,H,W].
nd::Tensor encode(const AutoencoderModel& model, const nd::Tensor& image);
nd::Tensor decode(const AutoencoderModel& model, const nd::Tensor& features);
double ae_loss(const AutoencoderModel& model, const nd::Tensor& batch, double lambda);

struct PatchOrigin {
    std::size_t section = 0;
    std::int64_t row = 0;
    std::int64_t col = 0;
};

struct PatchBatch {
    nd::Tensor patches;  // [count, 1, patch, patch]
    std::vector<PatchOrigin> origins;
};

// Uniformly random axis-aligned square patches across sections; each
// section is loaded once.
PatchBatch sample_patches(const SectionStack& stack, std::int64_t patch, std::size_t count, std::uint64_t seed);

struct TrainConfig {
    double lambda = 1e-4;
    AdamSettings adam{};
    std::int64_t batch_size = 4;
    std::int64_t steps = 2000;
    std::int64_t patch_size = 64;
    std::int64_t patch_count = 500;
    std::uint64_t seed = 1;

    void validate() const;
};

struct TrainResult {
    AutoencoderModel model;
    std::vector<double> loss;  // ae_loss per step
    std::vector<double> mse;   // reconstruction mean squared error per step
};

// ADAM minimization of ae_loss over minibatches drawn from a pool of
// cfg.patch_count patches. Batches walk seeded permutations of the pool.
TrainResult train_autoencoder(const AutoencoderModel& model, const SectionStack& stack, const TrainConfig& cfg);
TrainResult train_autoencoder(const AutoencoderModel& model, const nd::Tensor& patches, const TrainConfig& cfg);

} // namespace ssem::ae
