#include "chandiv/backbone.hpp"

#include <cmath>
#include <set>

namespace chandiv {

namespace {

Array<float> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Array<float> out(std::move(shape));
    for (auto& v : out.values()) v = static_cast<float>(dist(rng));
    return out;
}

std::string join(const std::string& prefix, const std::string& name) {
    return prefix.empty() ? name : prefix + "." + name;
}

class Conv final : public Module {
   public:
    Conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::mt19937_64& rng)
        : weight_(he_normal({out, in, k, k}, in * k * k, rng), true), stride_(stride), pad_(k / 2) {}

    Tensor<float> forward(const Tensor<float>& x, bool) override {
        return conv2d(x, weight_, {stride_, stride_}, {pad_, pad_});
    }

    Shape output_shape(const Shape& in) const override {
        std::size_t k = weight_.dim(2);
        return {weight_.dim(0), (in[1] + 2 * pad_ - k) / stride_ + 1, (in[2] + 2 * pad_ - k) / stride_ + 1};
    }

    void parameters(const std::string& prefix, std::vector<NamedParam>& out) override {
        out.push_back({join(prefix, "weight"), weight_, true});
    }

    void describe(const std::string& prefix, const Shape& in, std::vector<LayerRow>& rows) const override {
        Shape o = output_shape(in);
        std::uint64_t per_out = weight_.size() / weight_.dim(0);
        rows.push_back({prefix, "conv" + std::to_string(weight_.dim(2)) + "x" + std::to_string(weight_.dim(3)),
                        weight_.size(), per_out * o[0] * o[1] * o[2]});
    }

   private:
    Tensor<float> weight_;
    std::size_t stride_;
    std::size_t pad_;
};

class BatchNorm final : public Module {
   public:
    explicit BatchNorm(std::size_t channels)
        : gamma_(Array<float>({channels}, 1.0f), true),
          beta_(Array<float>({channels}), true),
          running_mean_({channels}),
          running_var_({channels}, 1.0f) {}

    Tensor<float> forward(const Tensor<float>& x, bool training) override {
        return batch_norm(x, gamma_, beta_, running_mean_, running_var_, training, 0.9f, 1e-5f);
    }

    Shape output_shape(const Shape& in) const override { return in; }

    void parameters(const std::string& prefix, std::vector<NamedParam>& out) override {
        out.push_back({join(prefix, "weight"), gamma_, false});
        out.push_back({join(prefix, "bias"), beta_, false});
    }

    void buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override {
        out.push_back({join(prefix, "running_mean"), &running_mean_});
        out.push_back({join(prefix, "running_var"), &running_var_});
    }

    void describe(const std::string& prefix, const Shape& in, std::vector<LayerRow>& rows) const override {
        rows.push_back({prefix, "batchnorm", gamma_.size() + beta_.size(), 2ull * shape_numel(in)});
    }

   private:
    Tensor<float> gamma_;
    Tensor<float> beta_;
    Array<float> running_mean_;
    Array<float> running_var_;
};

// conv -> batchnorm -> relu
class ConvUnit final : public Module {
   public:
    ConvUnit(std::size_t in, std::size_t out, std::size_t stride, std::mt19937_64& rng)
        : conv_(in, out, 3, stride, rng), bn_(out) {}

    Tensor<float> forward(const Tensor<float>& x, bool training) override {
        return relu(bn_.forward(conv_.forward(x, training), training));
    }
    Shape output_shape(const Shape& in) const override { return conv_.output_shape(in); }
    void parameters(const std::string& prefix, std::vector<NamedParam>& out) override {
        conv_.parameters(join(prefix, "conv"), out);
        bn_.parameters(join(prefix, "bn"), out);
    }
    void buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override {
        bn_.buffers(join(prefix, "bn"), out);
    }
    void describe(const std::string& prefix, const Shape& in, std::vector<LayerRow>& rows) const override {
        conv_.describe(join(prefix, "conv"), in, rows);
        bn_.describe(join(prefix, "bn"), conv_.output_shape(in), rows);
    }

   private:
    Conv conv_;
    BatchNorm bn_;
};

// Two 3x3 convs with identity shortcut; 1x1 projection when the shape changes.
class ResidualBlock final : public Module {
   public:
    ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, std::mt19937_64& rng)
        : conv1_(in, out, 3, stride, rng), bn1_(out), conv2_(out, out, 3, 1, rng), bn2_(out) {
        if (stride != 1 || in != out) {
            proj_conv_ = std::make_unique<Conv>(in, out, 1, stride, rng);
            proj_bn_ = std::make_unique<BatchNorm>(out);
        }
    }

    Tensor<float> forward(const Tensor<float>& x, bool training) override {
        auto h = relu(bn1_.forward(conv1_.forward(x, training), training));
        h = bn2_.forward(conv2_.forward(h, training), training);
        auto shortcut = proj_conv_ ? proj_bn_->forward(proj_conv_->forward(x, training), training) : x;
        return relu(add(h, shortcut));
    }

    Shape output_shape(const Shape& in) const override { return conv1_.output_shape(in); }

    void parameters(const std::string& prefix, std::vector<NamedParam>& out) override {
        conv1_.parameters(join(prefix, "conv1"), out);
        bn1_.parameters(join(prefix, "bn1"), out);
        conv2_.parameters(join(prefix, "conv2"), out);
        bn2_.parameters(join(prefix, "bn2"), out);
        if (proj_conv_) {
            proj_conv_->parameters(join(prefix, "shortcut.conv"), out);
            proj_bn_->parameters(join(prefix, "shortcut.bn"), out);
        }
    }

    void buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override {
        bn1_.buffers(join(prefix, "bn1"), out);
        bn2_.buffers(join(prefix, "bn2"), out);
        if (proj_bn_) proj_bn_->buffers(join(prefix, "shortcut.bn"), out);
    }

    void describe(const std::string& prefix, const Shape& in, std::vector<LayerRow>& rows) const override {
        Shape mid = conv1_.output_shape(in);
        conv1_.describe(join(prefix, "conv1"), in, rows);
        bn1_.describe(join(prefix, "bn1"), mid, rows);
        conv2_.describe(join(prefix, "conv2"), mid, rows);
        bn2_.describe(join(prefix, "bn2"), mid, rows);
        if (proj_conv_) {
            proj_conv_->describe(join(prefix, "shortcut.conv"), in, rows);
            proj_bn_->describe(join(prefix, "shortcut.bn"), mid, rows);
        }
    }

   private:
    Conv conv1_;
    BatchNorm bn1_;
    Conv conv2_;
    BatchNorm bn2_;
    std::unique_ptr<Conv> proj_conv_;
    std::unique_ptr<BatchNorm> proj_bn_;
};

class AttentionLayer final : public Module {
   public:
    AttentionLayer(AttentionKind kind, std::size_t channels, FusionMode fusion, std::size_t reduction,
                   std::mt19937_64& rng)
        : kind_(kind) {
        switch (kind) {
            case AttentionKind::chandiv:
                chandiv_ = ChanDivParams<float>::random(channels, rng, fusion);
                break;
            case AttentionKind::se:
                se_ = SEParams<float>::random(channels, reduction, rng);
                break;
            case AttentionKind::gap_only:
                chandiv_ = make_ablation_params<float>(AblationVariant::gap_only, channels, rng);
                break;
            case AttentionKind::attn_only:
                chandiv_ = make_ablation_params<float>(AblationVariant::attn_only, channels, rng);
                break;
            case AttentionKind::positive_corr:
                chandiv_ = make_ablation_params<float>(AblationVariant::positive_corr, channels, rng);
                break;
            case AttentionKind::none:
                throw ConfigError("attention layer requested with kind none");
        }
    }

    Tensor<float> forward(const Tensor<float>& x, bool) override {
        switch (kind_) {
            case AttentionKind::chandiv:
                return chandiv_forward(x, chandiv_);
            case AttentionKind::se:
                return se_forward(x, se_);
            case AttentionKind::gap_only:
                return ablation_forward(x, AblationVariant::gap_only, chandiv_);
            case AttentionKind::attn_only:
                return ablation_forward(x, AblationVariant::attn_only, chandiv_);
            case AttentionKind::positive_corr:
                return ablation_forward(x, AblationVariant::positive_corr, chandiv_);
            case AttentionKind::none:
                break;
        }
        return x;
    }

    Shape output_shape(const Shape& in) const override { return in; }

    void parameters(const std::string& prefix, std::vector<NamedParam>& out) override {
        if (kind_ == AttentionKind::se) {
            out.push_back({join(prefix, "w1"), se_.w1, true});
            out.push_back({join(prefix, "w2"), se_.w2, true});
        } else {
            out.push_back({join(prefix, "transform_kernel"), chandiv_.transform_kernel, true});
            out.push_back({join(prefix, "transform_bias"), chandiv_.transform_bias, false});
        }
    }

    void describe(const std::string& prefix, const Shape& in, std::vector<LayerRow>& rows) const override {
        std::uint64_t c = in[0], hw = in[1] * in[2];
        std::uint64_t pooling = c * hw, apply = c * hw, gram = c * c * hw;
        switch (kind_) {
            case AttentionKind::se: {
                std::uint64_t hidden = se_.w1.dim(0);
                rows.push_back({prefix, "se", se_.trainable_count(), pooling + 2 * c * hidden + apply});
                return;
            }
            case AttentionKind::gap_only:
                rows.push_back({prefix, "gap_only", chandiv_.trainable_count(), pooling + c + apply});
                return;
            case AttentionKind::attn_only:
                rows.push_back({prefix, "attn_only", chandiv_.trainable_count(), gram + c * c + apply});
                return;
            default: {
                std::uint64_t width = chandiv_.transform_kernel.size();
                rows.push_back({prefix, to_string(kind_), chandiv_.trainable_count(),
                                pooling + gram + c * width + apply});
                return;
            }
        }
    }

   private:
    AttentionKind kind_;
    ChanDivParams<float> chandiv_;
    SEParams<float> se_;
};

}  // namespace

void Module::buffers(const std::string&, std::vector<NamedBuffer>&) {}

std::string to_string(BlockKind kind) { return kind == BlockKind::residual ? "residual" : "plain_conv"; }

std::string to_string(AttentionKind kind) {
    switch (kind) {
        case AttentionKind::none:
            return "none";
        case AttentionKind::chandiv:
            return "chandiv";
        case AttentionKind::se:
            return "se";
        case AttentionKind::gap_only:
            return "gap_only";
        case AttentionKind::attn_only:
            return "attn_only";
        case AttentionKind::positive_corr:
            return "positive_corr";
    }
    return "unknown";
}

std::string to_string(AttentionPlacement placement) {
    return placement == AttentionPlacement::tail ? "tail" : "per_residual_block";
}

BlockKind parse_block_kind(std::string_view text) {
    if (text == "residual") return BlockKind::residual;
    if (text == "plain_conv") return BlockKind::plain_conv;
    throw ConfigError("unknown block kind '" + std::string(text) + "'");
}

AttentionKind parse_attention_kind(std::string_view text) {
    if (text == "none") return AttentionKind::none;
    if (text == "chandiv" || text == "full") return AttentionKind::chandiv;
    if (text == "se") return AttentionKind::se;
    if (text == "gap_only") return AttentionKind::gap_only;
    if (text == "attn_only") return AttentionKind::attn_only;
    if (text == "positive_corr") return AttentionKind::positive_corr;
    throw ConfigError("unknown attention kind '" + std::string(text) + "'");
}

AttentionPlacement parse_attention_placement(std::string_view text) {
    if (text == "tail") return AttentionPlacement::tail;
    if (text == "per_residual_block") return AttentionPlacement::per_residual_block;
    throw ConfigError("unknown attention placement '" + std::string(text) + "'");
}

void BackboneSpec::validate() const {
    if (stage_channels.empty()) throw ConfigError("backbone needs at least one stage");
    for (auto c : stage_channels) {
        if (c == 0) throw ConfigError("stage channel counts must be positive");
    }
    if (blocks_per_stage == 0) throw ConfigError("blocks_per_stage must be positive");
    if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
    if (input_shape.size() != 3 || shape_numel(input_shape) == 0) {
        throw ConfigError("input_shape must be C,H,W with positive extents");
    }
    if (attention == AttentionKind::se) {
        for (auto c : stage_channels) {
            bool used = attention_placement == AttentionPlacement::per_residual_block || c == stage_channels.back();
            if (used && (se_reduction == 0 || c % se_reduction != 0)) {
                throw ConfigError("se_reduction " + std::to_string(se_reduction) + " does not divide " +
                                  std::to_string(c) + " channels");
            }
        }
    }
    std::size_t h = input_shape[1], w = input_shape[2];
    for (std::size_t i = 1; i < stage_channels.size(); ++i) {
        h = (h + 1) / 2;
        w = (w + 1) / 2;
    }
    if (h == 0 || w == 0) throw ConfigError("input too small for the number of stages");
}

Network::Network(BackboneSpec spec, std::vector<std::pair<std::string, std::unique_ptr<Module>>> body,
                 Tensor<float> fc_weight, Tensor<float> fc_bias)
    : spec_(std::move(spec)), body_(std::move(body)), fc_weight_(std::move(fc_weight)), fc_bias_(std::move(fc_bias)) {
    for (auto& [name, module] : body_) module->parameters(name, params_);
    params_.push_back({"classifier.weight", fc_weight_, true});
    params_.push_back({"classifier.bias", fc_bias_, false});

    std::set<std::string> seen;
    for (const auto& p : params_) {
        if (!seen.insert(p.name).second) throw ContractError("duplicate parameter name '" + p.name + "'");
    }
    for (const auto& b : buffers()) {
        if (!seen.insert(b.name).second) throw ContractError("duplicate buffer name '" + b.name + "'");
    }
}

void Network::check_batch(const Tensor<float>& batch) const {
    const auto& s = batch.shape();
    if (s.size() != 4 || s[1] != spec_.input_shape[0] || s[2] != spec_.input_shape[1] ||
        s[3] != spec_.input_shape[2]) {
        throw DimensionError("network expects [N," + std::to_string(spec_.input_shape[0]) + "," +
                             std::to_string(spec_.input_shape[1]) + "," + std::to_string(spec_.input_shape[2]) +
                             "] batches, got " + shape_str(s));
    }
}

Tensor<float> Network::features(const Tensor<float>& batch, bool training) {
    check_batch(batch);
    Tensor<float> h = batch;
    for (auto& [name, module] : body_) h = module->forward(h, training);
    return h;
}

Tensor<float> Network::forward_to(std::string_view layer, const Tensor<float>& batch, bool training) {
    check_batch(batch);
    Tensor<float> h = batch;
    for (auto& [name, module] : body_) {
        h = module->forward(h, training);
        if (name == layer) return h;
    }
    throw ContractError("network has no layer named '" + std::string(layer) + "'");
}

Tensor<float> Network::forward(const Tensor<float>& batch, bool training) {
    return linear(global_avg_pool(features(batch, training)), fc_weight_, fc_bias_);
}

std::vector<std::string> Network::layer_names() const {
    std::vector<std::string> names;
    for (const auto& entry : body_) names.push_back(entry.first);
    names.push_back("classifier");
    return names;
}

std::vector<NamedBuffer> Network::buffers() {
    std::vector<NamedBuffer> out;
    for (auto& [name, module] : body_) module->buffers(name, out);
    return out;
}

std::size_t Network::trainable_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.tensor.size();
    return total;
}

void Network::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

ParamReport Network::param_report() const {
    ParamReport report;
    Shape shape = spec_.input_shape;
    for (const auto& [name, module] : body_) {
        module->describe(name, shape, report.rows);
        shape = module->output_shape(shape);
    }
    std::uint64_t channels = shape[0], classes = fc_weight_.dim(0);
    report.rows.push_back({"pool", "global_avg_pool", 0, channels * shape[1] * shape[2]});
    report.rows.push_back({"classifier", "linear", fc_weight_.size() + fc_bias_.size(), channels * classes});
    for (const auto& row : report.rows) {
        report.total_params += row.params;
        report.total_macs += row.macs;
    }
    return report;
}

ParamReport param_count(const Network& net) { return net.param_report(); }

Network build(const BackboneSpec& spec, std::uint64_t seed) {
    spec.validate();
    std::mt19937_64 rng(seed);
    std::vector<std::pair<std::string, std::unique_ptr<Module>>> body;

    std::size_t channels = spec.stage_channels.front();
    body.emplace_back("stem", std::make_unique<ConvUnit>(spec.input_shape[0], channels, 1, rng));
    bool per_block = spec.attention != AttentionKind::none &&
                     spec.attention_placement == AttentionPlacement::per_residual_block;
    for (std::size_t s = 0; s < spec.stage_channels.size(); ++s) {
        std::size_t out = spec.stage_channels[s];
        for (std::size_t b = 0; b < spec.blocks_per_stage; ++b) {
            std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
            std::string name = "stage" + std::to_string(s) + ".block" + std::to_string(b);
            if (spec.block_kind == BlockKind::residual) {
                body.emplace_back(name, std::make_unique<ResidualBlock>(channels, out, stride, rng));
            } else {
                body.emplace_back(name, std::make_unique<ConvUnit>(channels, out, stride, rng));
            }
            channels = out;
            if (per_block) {
                body.emplace_back(name + ".attention",
                                  std::make_unique<AttentionLayer>(spec.attention, channels, spec.fusion_mode,
                                                                   spec.se_reduction, rng));
            }
        }
    }
    if (spec.attention != AttentionKind::none) {
        if (!per_block) {
            body.emplace_back("attention", std::make_unique<AttentionLayer>(spec.attention, channels, spec.fusion_mode,
                                                                            spec.se_reduction, rng));
        }
        body.emplace_back("post", std::make_unique<ConvUnit>(channels, channels, 1, rng));
    }

    double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Array<float> fc({spec.num_classes, channels});
    for (auto& v : fc.values()) v = static_cast<float>(dist(rng));
    return Network(spec, std::move(body), Tensor<float>(std::move(fc), true),
                   Tensor<float>(Array<float>({spec.num_classes}), true));
}

}  // namespace chandiv
