#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "chandiv/ops.hpp"

namespace chandiv {

enum class CorrelationSign { negative, positive };
enum class FusionMode { concat, elementwise_add };
enum class AblationVariant { gap_only, attn_only, positive_corr, full };

std::string to_string(CorrelationSign sign);
std::string to_string(FusionMode mode);
std::string to_string(AblationVariant variant);
FusionMode parse_fusion_mode(std::string_view text);
AblationVariant parse_ablation_variant(std::string_view text);

// Trainable state of the channel diversification block: one shared filter
// slid over the rows of the fused C x K matrix plus a scalar bias.
template <typename T>
struct ChanDivParams {
    Tensor<T> transform_kernel;  // [1,1,1,K]
    Tensor<T> transform_bias;    // [1]
    CorrelationSign correlation_sign = CorrelationSign::negative;
    FusionMode fusion_mode = FusionMode::concat;

    // Kernel uniform in +-1/sqrt(K), bias zero.
    static ChanDivParams random(std::size_t channels, std::mt19937_64& rng,
                                FusionMode fusion = FusionMode::concat,
                                CorrelationSign sign = CorrelationSign::negative);
    static ChanDivParams zeros(std::size_t channels, FusionMode fusion = FusionMode::concat,
                               CorrelationSign sign = CorrelationSign::negative);

    std::size_t channels() const;
    std::size_t trainable_count() const { return transform_kernel.size() + transform_bias.size(); }
};

// Squeeze-and-excitation gate without biases.
template <typename T>
struct SEParams {
    Tensor<T> w1;  // [C/r, C]
    Tensor<T> w2;  // [C, C/r]
    std::size_t reduction = 4;

    static SEParams random(std::size_t channels, std::size_t reduction, std::mt19937_64& rng);
    static SEParams zeros(std::size_t channels, std::size_t reduction);
    std::size_t trainable_count() const { return w1.size() + w2.size(); }
};

// Kernel widths per ablation variant: gap_only holds a [C,1] per-channel
// weight, attn_only a [1,1,1,C] row filter, the others [1,1,1,C+1].
template <typename T>
ChanDivParams<T> make_ablation_params(AblationVariant variant, std::size_t channels, std::mt19937_64& rng);
template <typename T>
ChanDivParams<T> zero_ablation_params(AblationVariant variant, std::size_t channels);

// All block operations accept a single map [C,H,W] (vectors come out as
// [C,1], matrices as [C,C]) or a batch [N,C,H,W] ([N,C,1] and [N,C,C]).

template <typename T>
Tensor<T> channel_significance(const Tensor<T>& x);

template <typename T>
Tensor<T> channel_relation(const Tensor<T>& x, CorrelationSign sign = CorrelationSign::negative);

template <typename T>
Tensor<T> fuse(const Tensor<T>& significance, const Tensor<T>& relation, FusionMode mode);

template <typename T>
Tensor<T> transform(const Tensor<T>& fused, const ChanDivParams<T>& params);

template <typename T>
Tensor<T> apply_attention(const Tensor<T>& x, const Tensor<T>& weights);

template <typename T>
Tensor<T> chandiv_forward(const Tensor<T>& x, const ChanDivParams<T>& params);

template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const SEParams<T>& params);

template <typename T>
Tensor<T> ablation_forward(const Tensor<T>& x, AblationVariant variant, const ChanDivParams<T>& params);

}  // namespace chandiv
