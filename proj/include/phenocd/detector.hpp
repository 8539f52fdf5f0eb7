#pragma once

// The change-detection network. A twin shared-weight two-resolution backbone
// feeds a fusion block (attention, plain concat, or absolute difference),
// a spatial pyramid, and a change head; optional semantic and projection
// heads serve the training losses. Everything is built once per model
// instance and registered under dotted parameter names, so checkpoints and
// the optimizer see a stable order.

#include <string>
#include <vector>

#include "phenocd/layers.hpp"
#include "phenocd/loss_ops.hpp"

namespace phenocd::model {

using nn::NodePtr;
using nn::concat_channels;  // the initializer-list overload is not found by ADL

struct DetectorConfig {
    int height = 64;
    int width = 64;
    int channels = 32;             // backbone width C; feature maps are C x H/4 x W/4
    int attention_reduction = 4;   // channel-attention bottleneck divisor
    std::vector<int> pyramid_scales = {1, 2, 4};
    int head_hidden = 32;
    int num_classes = 4;           // semantic classes
    std::string fusion = "attention";  // attention | concat | subtract
    int embed_dim = 32;            // projection head output width
    int proj_hidden = 128;
    bool with_semantic_head = true;
    bool with_projector = true;
    double threshold = 0.5;        // change probability cut; ties go to class 1

    void validate() const {
        if (height < 16 || width < 16)
            throw ConfigError("detector: height and width must be >= 16");
        if (height % 4 != 0 || width % 4 != 0)
            throw ConfigError("detector: height and width must be divisible by 4");
        if (channels < 4) throw ConfigError("detector: channels must be >= 4");
        if (attention_reduction < 1 || channels % attention_reduction != 0)
            throw ConfigError("detector: channels must be divisible by attention_reduction");
        if (pyramid_scales.empty()) throw ConfigError("detector: pyramid_scales empty");
        int fh = height / 4, fw = width / 4;
        for (int s : pyramid_scales)
            if (s < 1 || s > fh || s > fw)
                throw ConfigError("detector: pyramid scale " + std::to_string(s) +
                                  " exceeds feature size " + std::to_string(fh) + "x" +
                                  std::to_string(fw));
        if (channels < static_cast<int>(pyramid_scales.size()))
            throw ConfigError("detector: need channels >= number of pyramid scales");
        if (head_hidden < 1) throw ConfigError("detector: head_hidden must be >= 1");
        if (num_classes < 2) throw ConfigError("detector: num_classes must be >= 2");
        if (fusion != "attention" && fusion != "concat" && fusion != "subtract")
            throw ConfigError("detector: fusion must be attention, concat, or subtract, got '" +
                              fusion + "'");
        if (embed_dim < 2 || proj_hidden < 1)
            throw ConfigError("detector: projector widths must be >= 2 / >= 1");
        if (threshold <= 0.0 || threshold >= 1.0)
            throw ConfigError("detector: threshold must be in (0,1)");
    }
};

// conv3x3 -> BN -> relu, the building unit everywhere below.
template <typename T>
struct ConvBnRelu {
    nn::Conv2d<T> conv;
    nn::BatchNorm2d<T> bn;

    ConvBnRelu() = default;
    ConvBnRelu(nn::ParamRegistry<T>& reg, Rng& rng, const std::string& name, int cin, int cout,
               int k, int stride)
        : conv(reg, rng, name + ".conv", cin, cout, k, stride, k / 2, false),
          bn(reg, name + ".bn", cout) {}

    NodePtr<T> operator()(const NodePtr<T>& x, bool training) const {
        return relu(bn(conv(x), training));
    }
};

// Two-resolution trunk: stride-4 and stride-8 branches with one bilateral
// exchange, merged back to C channels at stride 4.
template <typename T>
struct Backbone {
    int channels = 0;
    ConvBnRelu<T> stem, trunk;        // stride 2 each
    ConvBnRelu<T> branch_a;           // stride 4, C
    ConvBnRelu<T> branch_b;           // stride 8, 2C
    nn::Conv2d<T> exch_up_conv;       // 1x1 2C -> C (then upsample, add to A)
    nn::BatchNorm2d<T> exch_up_bn;
    nn::Conv2d<T> exch_down_conv;     // 3x3 stride 2, C -> 2C (add to B)
    nn::BatchNorm2d<T> exch_down_bn;
    ConvBnRelu<T> post_a, post_b;
    nn::Conv2d<T> merge_conv;         // 1x1 3C -> C
    nn::BatchNorm2d<T> merge_bn;

    Backbone() = default;
    Backbone(nn::ParamRegistry<T>& reg, Rng& rng, int c)
        : channels(c),
          stem(reg, rng, "backbone.stem", 3, c, 3, 2),
          trunk(reg, rng, "backbone.trunk", c, c, 3, 2),
          branch_a(reg, rng, "backbone.branch_a", c, c, 3, 1),
          branch_b(reg, rng, "backbone.branch_b", c, 2 * c, 3, 2),
          exch_up_conv(reg, rng, "backbone.exch_up.conv", 2 * c, c, 1, 1, 0, false),
          exch_up_bn(reg, "backbone.exch_up.bn", c),
          exch_down_conv(reg, rng, "backbone.exch_down.conv", c, 2 * c, 3, 2, 1, false),
          exch_down_bn(reg, "backbone.exch_down.bn", 2 * c),
          post_a(reg, rng, "backbone.post_a", c, c, 3, 1),
          post_b(reg, rng, "backbone.post_b", 2 * c, 2 * c, 3, 1),
          merge_conv(reg, rng, "backbone.merge.conv", 3 * c, c, 1, 1, 0, false),
          merge_bn(reg, "backbone.merge.bn", c) {}

    NodePtr<T> operator()(const NodePtr<T>& image, bool training) const {
        const auto& s = image->value;
        if (s.rank() != 4 || s.shape[1] != 3)
            throw ShapeError("backbone: want [n,3,h,w], got " + s.shape_str());
        if (s.shape[2] % 4 != 0 || s.shape[3] % 4 != 0)
            throw ShapeError("backbone: spatial extents must be divisible by 4, got " +
                             s.shape_str());
        auto x = trunk(stem(image, training), training);  // C, stride 4
        auto a = branch_a(x, training);                   // C, stride 4
        auto b = branch_b(x, training);                   // 2C, stride 8
        int fh = a->value.shape[2], fw = a->value.shape[3];
        auto b_up = upsample_bilinear2d(exch_up_bn(exch_up_conv(b), training), fh, fw);
        auto a2 = relu(add(a, b_up));
        auto a_down = exch_down_bn(exch_down_conv(a), training);
        auto b2 = relu(add(b, a_down));
        auto pa = post_a(a2, training);
        auto pb = post_b(b2, training);
        auto merged = concat_channels({pa, upsample_bilinear2d(pb, fh, fw)});
        return relu(merge_bn(merge_conv(merged), training));
    }
};

// Fusion of the two temporal feature maps into one change feature map.
// attention: difference branch gated by channel and positional attention.
// concat:    difference branch alone.
// subtract:  |f1 - f2| through the same two-conv stack.
template <typename T>
struct FusionBlock {
    std::string mode;
    nn::Conv2d<T> diff_conv1;
    nn::BatchNorm2d<T> diff_bn;
    nn::Conv2d<T> diff_conv2;
    nn::Conv2d<T> ca_squeeze, ca_expand;  // channel attention bottleneck
    nn::Conv2d<T> pa_conv;                // positional attention 7x7

    FusionBlock() = default;
    FusionBlock(nn::ParamRegistry<T>& reg, Rng& rng, int c, int reduction, std::string mode_)
        : mode(std::move(mode_)) {
        int diff_in = mode == "subtract" ? c : 2 * c;
        diff_conv1 = nn::Conv2d<T>(reg, rng, "fusion.diff1.conv", diff_in, c, 3, 1, 1, false);
        diff_bn = nn::BatchNorm2d<T>(reg, "fusion.diff1.bn", c);
        diff_conv2 = nn::Conv2d<T>(reg, rng, "fusion.diff2", c, c, 3, 1, 1);
        if (mode == "attention") {
            ca_squeeze = nn::Conv2d<T>(reg, rng, "fusion.ca.squeeze", 2 * c, c / reduction, 1, 1,
                                       0);
            ca_expand = nn::Conv2d<T>(reg, rng, "fusion.ca.expand", c / reduction, c, 1, 1, 0);
            pa_conv = nn::Conv2d<T>(reg, rng, "fusion.pa.conv", 2, 1, 7, 1, 3);
        }
    }

    NodePtr<T> operator()(const NodePtr<T>& f1, const NodePtr<T>& f2, bool training) const {
        if (!f1->value.same_shape(f2->value))
            throw ShapeError("fusion: mismatched feature maps " + f1->value.shape_str() + " vs " +
                             f2->value.shape_str());
        auto diff_in = mode == "subtract" ? absval(sub(f1, f2)) : concat_channels({f1, f2});
        auto d = diff_conv2(relu(diff_bn(diff_conv1(diff_in), training)));
        if (mode != "attention") return d;
        auto both = concat_channels({f1, f2});
        auto ca = sigmoid(ca_expand(relu(ca_squeeze(spatial_mean(both)))));  // [n,C,1,1]
        auto delta = absval(sub(f1, f2));
        auto pa = sigmoid(pa_conv(concat_channels({channel_mean(delta), channel_max(delta)})));
        return mul(d, mul(ca, pa));
    }
};

// Pool-project-upsample pyramid; branch widths split C as evenly as possible
// (earlier branches take the remainder) so the concat with the input is
// exactly 2C channels.
template <typename T>
struct PyramidBlock {
    std::vector<int> scales;
    std::vector<nn::Conv2d<T>> convs;
    std::vector<nn::BatchNorm2d<T>> bns;

    PyramidBlock() = default;
    PyramidBlock(nn::ParamRegistry<T>& reg, Rng& rng, int c, std::vector<int> scales_)
        : scales(std::move(scales_)) {
        int k = static_cast<int>(scales.size());
        int base = c / k, rem = c % k;
        for (int i = 0; i < k; ++i) {
            int width = base + (i < rem ? 1 : 0);
            std::string name = "pyramid.s" + std::to_string(scales[i]);
            convs.emplace_back(reg, rng, name + ".conv", c, width, 1, 1, 0, false);
            bns.emplace_back(reg, name + ".bn", width);
        }
    }

    NodePtr<T> operator()(const NodePtr<T>& f, bool training) const {
        int fh = f->value.shape[2], fw = f->value.shape[3];
        std::vector<NodePtr<T>> parts = {f};
        for (size_t i = 0; i < scales.size(); ++i) {
            int s = scales[i];
            if (s > fh || s > fw)
                throw ConfigError("pyramid: scale " + std::to_string(s) +
                                  " exceeds feature size " + f->value.shape_str());
            auto pooled = adaptive_avg_pool2d(f, s, s);
            auto projected = relu(bns[i](convs[i](pooled), training));
            parts.push_back(upsample_bilinear2d(projected, fh, fw));
        }
        return concat_channels(parts);
    }
};

// conv3x3 -> relu -> conv1x1 logits head, applied at feature resolution.
template <typename T>
struct ConvHead {
    nn::Conv2d<T> conv1, conv2;

    ConvHead() = default;
    ConvHead(nn::ParamRegistry<T>& reg, Rng& rng, const std::string& name, int cin, int hidden,
             int cout)
        : conv1(reg, rng, name + ".conv1", cin, hidden, 3, 1, 1),
          conv2(reg, rng, name + ".conv2", hidden, cout, 1, 1, 0) {}

    NodePtr<T> operator()(const NodePtr<T>& x) const { return conv2(relu(conv1(x))); }
};

// 1x1 -> relu -> 1x1 pixel embedding head; rows are normalized later, at
// batch-assembly time, so prototypes average raw embeddings first.
template <typename T>
struct Projector {
    nn::Conv2d<T> conv1, conv2;

    Projector() = default;
    Projector(nn::ParamRegistry<T>& reg, Rng& rng, int cin, int hidden, int dout)
        : conv1(reg, rng, "projector.conv1", cin, hidden, 1, 1, 0),
          conv2(reg, rng, "projector.conv2", hidden, dout, 1, 1, 0) {}

    NodePtr<T> operator()(const NodePtr<T>& x) const { return conv2(relu(conv1(x))); }
};

template <typename T>
struct Detector {
    DetectorConfig cfg;
    nn::ParamRegistry<T> params;
    Backbone<T> backbone;
    FusionBlock<T> fusion;
    PyramidBlock<T> pyramid;
    ConvHead<T> change_head;
    ConvHead<T> semantic_head;  // present iff cfg.with_semantic_head
    Projector<T> projector;     // present iff cfg.with_projector

    explicit Detector(const DetectorConfig& config, uint64_t init_seed) : cfg(config) {
        cfg.validate();
        Rng rng = Rng(init_seed).fork(0xde7ec7);
        backbone = Backbone<T>(params, rng, cfg.channels);
        fusion = FusionBlock<T>(params, rng, cfg.channels, cfg.attention_reduction, cfg.fusion);
        pyramid = PyramidBlock<T>(params, rng, cfg.channels, cfg.pyramid_scales);
        change_head = ConvHead<T>(params, rng, "change_head", 2 * cfg.channels, cfg.head_hidden,
                                  1);
        if (cfg.with_semantic_head)
            semantic_head = ConvHead<T>(params, rng, "semantic_head", cfg.channels,
                                        cfg.head_hidden, cfg.num_classes);
        if (cfg.with_projector)
            projector = Projector<T>(params, rng, cfg.channels, cfg.proj_hidden, cfg.embed_dim);
    }

    NodePtr<T> extract(const NodePtr<T>& image, bool training) const {
        return backbone(image, training);
    }

    struct Forward {
        NodePtr<T> feat_t1, feat_t2;     // [n,C,h,w] backbone features
        NodePtr<T> fused;                // [n,C,h,w] change features
        NodePtr<T> change_prob;          // [n,1,H,W] in (0,1)
        NodePtr<T> sem_logits_t1, sem_logits_t2;  // [n,K,H,W] when semantic head exists
    };

    Forward forward(const NodePtr<T>& img1, const NodePtr<T>& img2, bool training) const {
        if (!img1->value.same_shape(img2->value))
            throw ShapeError("detector: image pair shapes differ: " + img1->value.shape_str() +
                             " vs " + img2->value.shape_str());
        Forward out;
        out.feat_t1 = extract(img1, training);
        out.feat_t2 = extract(img2, training);
        out.fused = fusion(out.feat_t1, out.feat_t2, training);
        auto pooled = pyramid(out.fused, training);
        int ih = img1->value.shape[2], iw = img1->value.shape[3];
        auto logits = upsample_bilinear2d(change_head(pooled), ih, iw);
        out.change_prob = sigmoid(logits);
        if (cfg.with_semantic_head) {
            out.sem_logits_t1 = upsample_bilinear2d(semantic_head(out.feat_t1), ih, iw);
            out.sem_logits_t2 = upsample_bilinear2d(semantic_head(out.feat_t2), ih, iw);
        }
        return out;
    }

    // Pixel embeddings for a feature field (backbone or fused), [n,D,h,w].
    NodePtr<T> project(const NodePtr<T>& field) const {
        if (!cfg.with_projector) throw ConfigError("detector: projector not enabled");
        return projector(field);
    }

    // Binary map from a probability map; ties at the threshold go to 1.
    nn::Tensor<int> binarize(const nn::Tensor<T>& prob) const {
        nn::Tensor<int> out = nn::Tensor<int>::zeros(prob.shape);
        for (int64_t i = 0; i < prob.numel(); ++i)
            out.data[i] = prob.data[i] >= static_cast<T>(cfg.threshold) ? 1 : 0;
        return out;
    }
};

}  // namespace phenocd::model
