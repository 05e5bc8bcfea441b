#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "chandiv/attention.hpp"

namespace chandiv {

enum class BlockKind { plain_conv, residual };
enum class AttentionKind { none, chandiv, se, gap_only, attn_only, positive_corr };
enum class AttentionPlacement { tail, per_residual_block };

std::string to_string(BlockKind kind);
std::string to_string(AttentionKind kind);
std::string to_string(AttentionPlacement placement);
BlockKind parse_block_kind(std::string_view text);
AttentionKind parse_attention_kind(std::string_view text);
AttentionPlacement parse_attention_placement(std::string_view text);

struct BackboneSpec {
    std::vector<std::size_t> stage_channels{16, 32, 64};
    std::size_t blocks_per_stage = 1;
    BlockKind block_kind = BlockKind::residual;
    AttentionKind attention = AttentionKind::none;
    AttentionPlacement attention_placement = AttentionPlacement::tail;
    FusionMode fusion_mode = FusionMode::concat;
    std::size_t se_reduction = 4;
    std::size_t num_classes = 10;
    Shape input_shape{3, 32, 32};

    // Throws ConfigError naming the first violated constraint.
    void validate() const;
};

struct NamedParam {
    std::string name;
    Tensor<float> tensor;
    bool weight_decay = false;  // conv / affine weights only
};

struct NamedBuffer {
    std::string name;
    Array<float>* array = nullptr;
};

struct LayerRow {
    std::string name;
    std::string kind;
    std::size_t params = 0;
    std::uint64_t macs = 0;
};

struct ParamReport {
    std::vector<LayerRow> rows;
    std::size_t total_params = 0;
    std::uint64_t total_macs = 0;
};

class Module {
   public:
    virtual ~Module() = default;
    // x is [N,C,H,W]; `training` selects batch statistics in normalization layers.
    virtual Tensor<float> forward(const Tensor<float>& x, bool training) = 0;
    // Per-sample shapes, [C,H,W] -> [C',H',W'].
    virtual Shape output_shape(const Shape& in) const = 0;
    virtual void parameters(const std::string& prefix, std::vector<NamedParam>& out) = 0;
    virtual void buffers(const std::string& prefix, std::vector<NamedBuffer>& out);
    // Appends one row per leaf layer with its trainable count and MACs per sample.
    virtual void describe(const std::string& prefix, const Shape& in, std::vector<LayerRow>& rows) const = 0;
};

class Network {
   public:
    Network(BackboneSpec spec, std::vector<std::pair<std::string, std::unique_ptr<Module>>> body, Tensor<float> fc_weight,
            Tensor<float> fc_bias);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    const BackboneSpec& spec() const { return spec_; }

    // Logits [N,num_classes] for a batch [N,C,H,W].
    Tensor<float> forward(const Tensor<float>& batch, bool training = false);
    // Final pre-pool feature maps [N,C,h,w].
    Tensor<float> features(const Tensor<float>& batch, bool training = false);
    // Output of the named top-level layer (e.g. "attention").
    Tensor<float> forward_to(std::string_view layer, const Tensor<float>& batch, bool training = false);

    std::vector<std::string> layer_names() const;
    const std::vector<NamedParam>& parameters() const { return params_; }
    std::vector<NamedBuffer> buffers();
    std::size_t trainable_count() const;
    void zero_grad();

    const Tensor<float>& classifier_weight() const { return fc_weight_; }
    const Tensor<float>& classifier_bias() const { return fc_bias_; }

    ParamReport param_report() const;

   private:
    void check_batch(const Tensor<float>& batch) const;

    BackboneSpec spec_;
    std::vector<std::pair<std::string, std::unique_ptr<Module>>> body_;
    Tensor<float> fc_weight_;  // [num_classes, C]
    Tensor<float> fc_bias_;    // [num_classes]
    std::vector<NamedParam> params_;
};

// Deterministic for a given seed.
Network build(const BackboneSpec& spec, std::uint64_t seed);

ParamReport param_count(const Network& net);

}  // namespace chandiv
