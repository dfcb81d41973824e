#pragma once

// Trainable components of the shared-latent dual VAE:
//   e_s, e_t  domain encoder fronts (x4 downsampling)
//   e_z       shared encoder tail with separate mu / log-variance branches
//   d_z       shared decoder head
//   d_s, d_t  domain decoder tails (x4 upsampling, output in [0,1])
//   seg       dilated residual segmenter on the latent map
//   disc      image discriminator, one score in (0,1) per sample

#include <array>
#include <bitset>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <string_view>
#include <vector>

#include "uda/autodiff.hpp"

namespace uda {

enum class Domain { source, target };

enum class Component : int { e_s = 0, e_t, e_z, d_z, d_s, d_t, seg, disc };
inline constexpr int kNumComponents = 8;
inline constexpr std::array<Component, kNumComponents> kAllComponents{Component::e_s, Component::e_t, Component::e_z,
                                                                      Component::d_z, Component::d_s, Component::d_t,
                                                                      Component::seg, Component::disc};

using ComponentMask = std::bitset<kNumComponents>;

ComponentMask mask_of(std::initializer_list<Component> components);
std::string_view component_name(Component c);
std::string mask_str(const ComponentMask& m);

struct NetConfig {
    int in_channels = 1;
    int base_channels = 16;
    int latent_channels = 32;
    int ez_blocks = 1;
    int dz_blocks = 1;
    int seg_channels = 16;
    int seg_blocks = 8;
    int disc_channels = 16;
    int disc_downsample = 3;  // stride-2 discriminator convs (1-3); the rest use stride 1
    int num_classes = 5;
    double leaky_slope = 0.2;
    double log_var_min = -10.0;
    double log_var_max = 10.0;
};

template <class T>
struct LatentPosterior {
    ad::Var<T> mu;
    ad::Var<T> log_var;
};

namespace layers {

template <class T>
struct Conv {
    ad::Parameter<T> weight;
    ad::Parameter<T> bias;
    ad::ConvSpec spec;

    Conv() = default;
    Conv(std::string name, int in, int out, int k, ad::ConvSpec spec, std::mt19937_64& rng, double gain = 1.0);
    ad::Var<T> operator()(const ad::Var<T>& x, bool trainable) const;
};

template <class T>
struct ConvTranspose {
    ad::Parameter<T> weight;
    ad::Parameter<T> bias;
    int stride = 2;
    int pad = 1;

    ConvTranspose() = default;
    ConvTranspose(std::string name, int in, int out, int k, int stride, int pad, std::mt19937_64& rng);
    ad::Var<T> operator()(const ad::Var<T>& x, bool trainable) const;
};

template <class T>
struct InstanceNorm {
    ad::Parameter<T> gamma;
    ad::Parameter<T> beta;

    InstanceNorm() = default;
    InstanceNorm(std::string name, int channels);
    ad::Var<T> operator()(const ad::Var<T>& x, bool trainable) const;
};

// x + IN(conv(act(IN(conv(x))))), both convolutions 3x3 with the given dilation.
template <class T>
struct ResBlock {
    Conv<T> conv1, conv2;
    InstanceNorm<T> norm1, norm2;
    T slope = T(0.2);

    ResBlock() = default;
    ResBlock(std::string name, int channels, int dilation, T slope, std::mt19937_64& rng);
    ad::Var<T> operator()(const ad::Var<T>& x, bool trainable) const;
};

}  // namespace layers

template <class T>
class NetworkSet {
public:
    explicit NetworkSet(NetConfig config, std::uint64_t seed);

    NetworkSet(const NetworkSet&) = delete;
    NetworkSet& operator=(const NetworkSet&) = delete;
    NetworkSet(NetworkSet&&) noexcept = default;
    NetworkSet& operator=(NetworkSet&&) noexcept = default;

    [[nodiscard]] const NetConfig& config() const { return config_; }

    LatentPosterior<T> encode(const ad::Var<T>& x, Domain domain, const ComponentMask& trainable) const;
    ad::Var<T> decode(const ad::Var<T>& z, Domain domain, const ComponentMask& trainable) const;
    ad::Var<T> segment_logits(const ad::Var<T>& z, const ComponentMask& trainable) const;
    ad::Var<T> segment(const ad::Var<T>& z, const ComponentMask& trainable) const;
    ad::Var<T> discriminate(const ad::Var<T>& x, const ComponentMask& trainable) const;

    std::vector<ad::Parameter<T>*> parameters(Component c);
    std::vector<const ad::Parameter<T>*> parameters(Component c) const;
    std::vector<ad::Parameter<T>*> parameters();
    [[nodiscard]] std::size_t parameter_count(Component c) const;

    void zero_grad();
    // Overwrites the parameters of `to` with those of `from` (e_s <-> e_t, d_s <-> d_t).
    void copy_component(Component from, Component to);

private:
    struct EncoderFront {
        layers::Conv<T> conv1, conv2;
        layers::InstanceNorm<T> norm1, norm2;
    };
    struct SharedEncoder {
        std::vector<layers::ResBlock<T>> blocks;
        layers::Conv<T> mu_conv, lv_conv;
        layers::InstanceNorm<T> mu_norm, lv_norm;
        layers::Conv<T> mu_head, lv_head;
    };
    struct SharedDecoder {
        std::vector<layers::ResBlock<T>> blocks;
    };
    struct DecoderTail {
        layers::ConvTranspose<T> up1, up2;
        layers::InstanceNorm<T> norm1, norm2;
        layers::Conv<T> out;
    };
    struct Segmenter {
        layers::Conv<T> proj;
        std::vector<layers::ResBlock<T>> blocks;
        layers::Conv<T> classifier;
    };
    struct Discriminator {
        layers::Conv<T> conv1, conv2, conv3, head;
        layers::InstanceNorm<T> norm2, norm3;
    };

    ad::Var<T> front_forward(const EncoderFront& f, const ad::Var<T>& x, bool trainable) const;
    ad::Var<T> tail_forward(const DecoderTail& t, const ad::Var<T>& h, bool trainable) const;

    NetConfig config_;
    EncoderFront e_s_, e_t_;
    SharedEncoder e_z_;
    SharedDecoder d_z_;
    DecoderTail d_s_, d_t_;
    Segmenter seg_;
    Discriminator disc_;
};

// z = mu + exp(log_var / 2) * eps with eps supplied by the caller.
template <class T>
ad::Var<T> sample_with_noise(const LatentPosterior<T>& post, const Tensor<T>& eps);

// Reparameterized draw with eps ~ N(0, I) from `rng`.
template <class T>
ad::Var<T> sample(const LatentPosterior<T>& post, std::mt19937_64& rng);

template <class T>
Tensor<T> standard_normal(const Shape& shape, std::mt19937_64& rng);

struct GradCheckResult {
    double max_rel_error = 0.0;
    double max_abs_error = 0.0;
    int probes = 0;
    bool passed = false;
};

// Central finite differences against reverse-mode gradients on up to `n_probe`
// randomly chosen scalar parameters. Relative error uses
// |a - n| / max(|a|, |n|, 1e-6).
GradCheckResult grad_check(const std::vector<ad::Parameter<double>*>& params,
                           const std::function<ad::Var<double>()>& loss_fn, int n_probe, double step, double tolerance,
                           std::uint64_t seed);

}  // namespace uda
