#include "chandiv/attention.hpp"

#include <cmath>

namespace chandiv {

namespace {

template <typename T>
Array<T> uniform_array(Shape shape, T bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
    Array<T> out(std::move(shape));
    for (auto& v : out.values()) v = static_cast<T>(dist(rng));
    return out;
}

std::size_t kernel_width(std::size_t channels, FusionMode fusion) {
    return fusion == FusionMode::concat ? channels + 1 : channels;
}

template <typename T>
void require_feature_map(const char* op, const Tensor<T>& x) {
    if (x.rank() != 3 && x.rank() != 4) {
        throw DimensionError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_str(x.shape()));
    }
}

// Flattens spatial extents: [C,H,W] -> [C,HW], [N,C,H,W] -> [N,C,HW].
template <typename T>
Tensor<T> flatten_channels(const Tensor<T>& x) {
    const auto& s = x.shape();
    if (x.rank() == 3) return reshape(x, {s[0], s[1] * s[2]});
    return reshape(x, {s[0], s[1], s[2] * s[3]});
}

}  // namespace

std::string to_string(CorrelationSign sign) { return sign == CorrelationSign::negative ? "negative" : "positive"; }

std::string to_string(FusionMode mode) { return mode == FusionMode::concat ? "concat" : "elementwise_add"; }

std::string to_string(AblationVariant variant) {
    switch (variant) {
        case AblationVariant::gap_only:
            return "gap_only";
        case AblationVariant::attn_only:
            return "attn_only";
        case AblationVariant::positive_corr:
            return "positive_corr";
        case AblationVariant::full:
            return "full";
    }
    return "unknown";
}

FusionMode parse_fusion_mode(std::string_view text) {
    if (text == "concat") return FusionMode::concat;
    if (text == "elementwise_add") return FusionMode::elementwise_add;
    throw ConfigError("unknown fusion mode '" + std::string(text) + "'");
}

AblationVariant parse_ablation_variant(std::string_view text) {
    if (text == "gap_only") return AblationVariant::gap_only;
    if (text == "attn_only") return AblationVariant::attn_only;
    if (text == "positive_corr") return AblationVariant::positive_corr;
    if (text == "full") return AblationVariant::full;
    throw ConfigError("unknown ablation variant '" + std::string(text) + "'");
}

template <typename T>
ChanDivParams<T> ChanDivParams<T>::random(std::size_t channels, std::mt19937_64& rng, FusionMode fusion,
                                          CorrelationSign sign) {
    if (channels == 0) throw ConfigError("channel diversification block needs at least one channel");
    std::size_t width = kernel_width(channels, fusion);
    ChanDivParams p;
    p.transform_kernel = Tensor<T>(uniform_array<T>({1, 1, 1, width}, T(1) / std::sqrt(T(width)), rng), true);
    p.transform_bias = Tensor<T>(Array<T>({1}), true);
    p.correlation_sign = sign;
    p.fusion_mode = fusion;
    return p;
}

template <typename T>
ChanDivParams<T> ChanDivParams<T>::zeros(std::size_t channels, FusionMode fusion, CorrelationSign sign) {
    if (channels == 0) throw ConfigError("channel diversification block needs at least one channel");
    ChanDivParams p;
    p.transform_kernel = Tensor<T>(Array<T>({1, 1, 1, kernel_width(channels, fusion)}), true);
    p.transform_bias = Tensor<T>(Array<T>({1}), true);
    p.correlation_sign = sign;
    p.fusion_mode = fusion;
    return p;
}

template <typename T>
std::size_t ChanDivParams<T>::channels() const {
    std::size_t width = transform_kernel.dim(transform_kernel.rank() - 1);
    return fusion_mode == FusionMode::concat ? width - 1 : width;
}

template <typename T>
SEParams<T> SEParams<T>::random(std::size_t channels, std::size_t reduction, std::mt19937_64& rng) {
    if (reduction == 0 || channels % reduction != 0) {
        throw ConfigError("SE reduction " + std::to_string(reduction) + " does not divide " + std::to_string(channels) +
                          " channels");
    }
    std::size_t hidden = channels / reduction;
    SEParams p;
    p.w1 = Tensor<T>(uniform_array<T>({hidden, channels}, T(1) / std::sqrt(T(channels)), rng), true);
    p.w2 = Tensor<T>(uniform_array<T>({channels, hidden}, T(1) / std::sqrt(T(hidden)), rng), true);
    p.reduction = reduction;
    return p;
}

template <typename T>
SEParams<T> SEParams<T>::zeros(std::size_t channels, std::size_t reduction) {
    if (reduction == 0 || channels % reduction != 0) {
        throw ConfigError("SE reduction " + std::to_string(reduction) + " does not divide " + std::to_string(channels) +
                          " channels");
    }
    std::size_t hidden = channels / reduction;
    SEParams p;
    p.w1 = Tensor<T>(Array<T>({hidden, channels}), true);
    p.w2 = Tensor<T>(Array<T>({channels, hidden}), true);
    p.reduction = reduction;
    return p;
}

template <typename T>
ChanDivParams<T> make_ablation_params(AblationVariant variant, std::size_t channels, std::mt19937_64& rng) {
    switch (variant) {
        case AblationVariant::gap_only: {
            auto p = ChanDivParams<T>::zeros(channels);
            p.transform_kernel = Tensor<T>(uniform_array<T>({channels, 1}, T(1), rng), true);
            return p;
        }
        case AblationVariant::attn_only:
            return ChanDivParams<T>::random(channels, rng, FusionMode::elementwise_add);
        case AblationVariant::positive_corr:
            return ChanDivParams<T>::random(channels, rng, FusionMode::concat, CorrelationSign::positive);
        case AblationVariant::full:
            return ChanDivParams<T>::random(channels, rng);
    }
    throw ConfigError("unknown ablation variant");
}

template <typename T>
ChanDivParams<T> zero_ablation_params(AblationVariant variant, std::size_t channels) {
    switch (variant) {
        case AblationVariant::gap_only: {
            auto p = ChanDivParams<T>::zeros(channels);
            p.transform_kernel = Tensor<T>(Array<T>({channels, 1}), true);
            return p;
        }
        case AblationVariant::attn_only:
            return ChanDivParams<T>::zeros(channels, FusionMode::elementwise_add);
        case AblationVariant::positive_corr:
            return ChanDivParams<T>::zeros(channels, FusionMode::concat, CorrelationSign::positive);
        case AblationVariant::full:
            return ChanDivParams<T>::zeros(channels);
    }
    throw ConfigError("unknown ablation variant");
}

template <typename T>
Tensor<T> channel_significance(const Tensor<T>& x) {
    require_feature_map("channel_significance", x);
    auto pooled = global_avg_pool(x);
    if (x.rank() == 3) return softmax(pooled, 0);
    return softmax(reshape(pooled, {x.dim(0), x.dim(1), 1}), 1);
}

template <typename T>
Tensor<T> channel_relation(const Tensor<T>& x, CorrelationSign sign) {
    require_feature_map("channel_relation", x);
    auto flat = flatten_channels(x);
    auto gram = matmul(flat, transpose(flat));
    auto signed_gram = scale(gram, sign == CorrelationSign::negative ? T(-1) : T(1));
    return softmax(signed_gram, signed_gram.rank() - 1);
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& significance, const Tensor<T>& relation, FusionMode mode) {
    const std::string shapes = shape_str(significance.shape()) + " and " + shape_str(relation.shape());
    bool ok = relation.rank() >= 2 && significance.rank() == relation.rank() &&
              relation.dim(relation.rank() - 1) == relation.dim(relation.rank() - 2) &&
              significance.dim(significance.rank() - 1) == 1;
    if (ok) {
        for (std::size_t i = 0; i + 1 < relation.rank(); ++i) ok = ok && significance.dim(i) == relation.dim(i);
    }
    if (!ok) throw DimensionError("fuse: expected [..,C,1] and [..,C,C], got " + shapes);
    if (mode == FusionMode::concat) return concat_last(significance, relation);
    return add_column_broadcast(relation, significance);
}

template <typename T>
Tensor<T> transform(const Tensor<T>& fused, const ChanDivParams<T>& params) {
    if (fused.rank() != 2 && fused.rank() != 3) {
        throw DimensionError("transform: expected [C,K] or [N,C,K], got " + shape_str(fused.shape()));
    }
    const auto& k = params.transform_kernel;
    std::size_t width = fused.dim(fused.rank() - 1);
    if (k.rank() != 4 || k.dim(0) != 1 || k.dim(1) != 1 || k.dim(2) != 1 || k.dim(3) != width) {
        throw DimensionError("transform: kernel " + shape_str(k.shape()) + " does not match fused width " +
                             std::to_string(width) + " (expected [1x1x1x" + std::to_string(width) + "])");
    }
    if (params.transform_bias.size() != 1) {
        throw DimensionError("transform: bias must be a single value, got " + shape_str(params.transform_bias.shape()));
    }
    std::size_t n_batch = fused.rank() == 3 ? fused.dim(0) : 1;
    std::size_t channels = fused.dim(fused.rank() - 2);
    auto image = reshape(fused, {n_batch, 1, channels, width});
    auto filtered = add_channel_bias(conv2d(image, k), params.transform_bias);
    if (fused.rank() == 2) return reshape(filtered, {channels, 1});
    return reshape(filtered, {n_batch, channels, 1});
}

template <typename T>
Tensor<T> apply_attention(const Tensor<T>& x, const Tensor<T>& weights) {
    require_feature_map("apply_attention", x);
    std::size_t expected = x.rank() == 4 ? x.dim(0) * x.dim(1) : x.dim(0);
    if (weights.size() != expected) {
        throw DimensionError("apply_attention: weights " + shape_str(weights.shape()) + " do not match channels of " +
                             shape_str(x.shape()));
    }
    return add(scale_channels(x, weights), x);
}

template <typename T>
Tensor<T> chandiv_forward(const Tensor<T>& x, const ChanDivParams<T>& params) {
    auto significance = channel_significance(x);
    auto relation = channel_relation(x, params.correlation_sign);
    auto weights = transform(fuse(significance, relation, params.fusion_mode), params);
    return apply_attention(x, weights);
}

template <typename T>
Tensor<T> se_forward(const Tensor<T>& x, const SEParams<T>& params) {
    require_feature_map("se_forward", x);
    std::size_t channels = x.dim(x.rank() == 4 ? 1 : 0);
    if (params.reduction == 0 || channels % params.reduction != 0) {
        throw ConfigError("SE reduction " + std::to_string(params.reduction) + " does not divide " +
                          std::to_string(channels) + " channels");
    }
    if (params.w1.rank() != 2 || params.w1.dim(1) != channels || params.w2.rank() != 2 ||
        params.w2.dim(0) != channels || params.w2.dim(1) != params.w1.dim(0)) {
        throw DimensionError("se_forward: weights " + shape_str(params.w1.shape()) + ", " +
                             shape_str(params.w2.shape()) + " do not fit " + shape_str(x.shape()));
    }
    auto pooled = global_avg_pool(x);
    Tensor<T> gate;
    if (x.rank() == 3) {
        gate = sigmoid(matmul(params.w2, relu(matmul(params.w1, pooled))));
    } else {
        gate = sigmoid(matmul(relu(matmul(pooled, transpose(params.w1))), transpose(params.w2)));
    }
    return scale_channels(x, gate);
}

template <typename T>
Tensor<T> ablation_forward(const Tensor<T>& x, AblationVariant variant, const ChanDivParams<T>& params) {
    switch (variant) {
        case AblationVariant::gap_only: {
            auto weights = channel_affine(channel_significance(x), params.transform_kernel, params.transform_bias);
            return apply_attention(x, weights);
        }
        case AblationVariant::attn_only: {
            auto relation = channel_relation(x, params.correlation_sign);
            return apply_attention(x, transform(relation, params));
        }
        case AblationVariant::positive_corr: {
            ChanDivParams<T> flipped = params;
            flipped.correlation_sign = CorrelationSign::positive;
            return chandiv_forward(x, flipped);
        }
        case AblationVariant::full:
            return chandiv_forward(x, params);
    }
    throw ConfigError("unknown ablation variant");
}

#define CHANDIV_INSTANTIATE_ATTENTION(T)                                                                  \
    template struct ChanDivParams<T>;                                                                     \
    template struct SEParams<T>;                                                                          \
    template ChanDivParams<T> make_ablation_params<T>(AblationVariant, std::size_t, std::mt19937_64&);    \
    template ChanDivParams<T> zero_ablation_params<T>(AblationVariant, std::size_t);                      \
    template Tensor<T> channel_significance(const Tensor<T>&);                                            \
    template Tensor<T> channel_relation(const Tensor<T>&, CorrelationSign);                               \
    template Tensor<T> fuse(const Tensor<T>&, const Tensor<T>&, FusionMode);                              \
    template Tensor<T> transform(const Tensor<T>&, const ChanDivParams<T>&);                              \
    template Tensor<T> apply_attention(const Tensor<T>&, const Tensor<T>&);                               \
    template Tensor<T> chandiv_forward(const Tensor<T>&, const ChanDivParams<T>&);                        \
    template Tensor<T> se_forward(const Tensor<T>&, const SEParams<T>&);                                  \
    template Tensor<T> ablation_forward(const Tensor<T>&, AblationVariant, const ChanDivParams<T>&);

CHANDIV_INSTANTIATE_ATTENTION(float)
CHANDIV_INSTANTIATE_ATTENTION(double)

}  // namespace chandiv
