#include "ttrx/model.hpp"

#include <cmath>

#include "ttrx/errors.hpp"

namespace ttrx {

namespace {

Tensor uniform_tensor(Shape shape, double half_width, RngState& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(-half_width, half_width);
    return t;
}

}  // namespace

Tensor& BackboneParams::at(std::string_view name) {
    for (auto& p : params)
        if (p.name == name) return p.tensor;
    throw StateError("backbone has no parameter named '" + std::string(name) + "'");
}

const Tensor& BackboneParams::at(std::string_view name) const {
    for (const auto& p : params)
        if (p.name == name) return p.tensor;
    throw StateError("backbone has no parameter named '" + std::string(name) + "'");
}

std::vector<ParamRef> parameters(SegmentationModel& model) {
    std::vector<ParamRef> refs;
    for (auto& p : model.backbone.params) refs.push_back({p.name, &p.tensor});
    refs.push_back({"head.weight", &model.head.weight});
    refs.push_back({"head.bias", &model.head.bias});
    return refs;
}

bool all_params(std::string_view) { return true; }
bool head_only(std::string_view name) { return name.starts_with("head."); }

BackboneParams zero_backbone(const ArchitectureDescriptor& a) {
    BackboneParams b;
    b.arch = a;
    const std::size_t decoder_in = a.middle_channels + a.encoder_channels;
    b.params.push_back({"encoder.weight", Tensor(Shape{a.encoder_channels, a.in_channels, a.kernel, a.kernel})});
    b.params.push_back({"encoder.bias", Tensor(Shape{a.encoder_channels})});
    b.params.push_back({"middle.weight", Tensor(Shape{a.middle_channels, a.encoder_channels, a.kernel, a.kernel})});
    b.params.push_back({"middle.bias", Tensor(Shape{a.middle_channels})});
    b.params.push_back(
        {"decoder.weight", Tensor(Shape{a.feature_channels, decoder_in, a.decoder_kernel, a.decoder_kernel})});
    b.params.push_back({"decoder.bias", Tensor(Shape{a.feature_channels})});
    return b;
}

BackboneParams random_backbone(const ArchitectureDescriptor& a, RngState& rng) {
    BackboneParams b = zero_backbone(a);
    for (auto& p : b.params) {
        if (!p.name.ends_with(".weight")) continue;
        const auto& s = p.tensor.shape();
        const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
        // ReLU layers get He scaling; the linear decoder gets plain fan-in scaling.
        const double gain = p.name == "decoder.weight" ? 3.0 : 6.0;
        p.tensor = uniform_tensor(s, std::sqrt(gain / fan_in), rng);
    }
    return b;
}

HeadParams random_head(std::size_t tracts, std::size_t channels, RngState& rng) {
    return HeadParams{uniform_tensor(Shape{tracts, channels}, 1.0 / std::sqrt(static_cast<double>(channels)), rng),
                      Tensor(Shape{tracts})};
}

HeadParams zero_head(std::size_t tracts, std::size_t channels) {
    return HeadParams{Tensor(Shape{tracts, channels}), Tensor(Shape{tracts})};
}

ad::Var extract_features(ad::Graph& g, const Tensor& input, BackboneParams& backbone, const ForwardMode& mode,
                         RngState& rng) {
    const auto& a = backbone.arch;
    if (input.rank() != 3 || input.dim(0) != a.in_channels)
        throw ShapeError("extract_features: expected [" + std::to_string(a.in_channels) + " x H x W] input, got " +
                         shape_string(input.shape()));
    const std::size_t div = a.spatial_divisor();
    if (input.dim(1) % div || input.dim(2) % div)
        throw ShapeError("extract_features: spatial size " + shape_string(input.shape()) + " not divisible by " +
                         std::to_string(div));

    auto x = g.input(input);
    auto enc = ad::relu(ad::conv2d(x, g.parameter(backbone.at("encoder.weight")), g.parameter(backbone.at("encoder.bias"))));
    auto mid = enc;
    for (std::size_t i = 0; i < a.pool_levels; ++i) mid = ad::avg_pool2(mid);
    mid = ad::relu(ad::conv2d(mid, g.parameter(backbone.at("middle.weight")), g.parameter(backbone.at("middle.bias"))));
    mid = ad::dropout(mid, mode.dropout_rate, rng, mode.training);
    for (std::size_t i = 0; i < a.pool_levels; ++i) mid = ad::upsample2(mid);
    auto joined = ad::concat_channels(mid, enc);
    return ad::conv2d(joined, g.parameter(backbone.at("decoder.weight")), g.parameter(backbone.at("decoder.bias")));
}

ad::Var head_logits(ad::Var features, HeadParams& head) {
    const auto& fs = features.shape();
    if (fs.size() != 3) throw ShapeError("head_logits: features must be [C x H x W], got " + shape_string(fs));
    if (head.weight.rank() != 2 || head.weight.dim(1) != fs[0])
        throw ShapeError("head_logits: head weight " + shape_string(head.weight.shape()) + " does not match features " +
                         shape_string(fs));
    if (head.bias.size() != head.weight.dim(0))
        throw ShapeError("head_logits: bias " + shape_string(head.bias.shape()) + " does not match weight " +
                         shape_string(head.weight.shape()));
    auto& g = *features.graph;
    const std::size_t t = head.weight.dim(0), c = fs[0], h = fs[1], w = fs[2];
    auto flat = ad::reshape(features, Shape{c, h * w});
    auto z = ad::add_bias(ad::matmul(g.parameter(head.weight), flat), g.parameter(head.bias));
    return ad::reshape(z, Shape{t, h, w});
}

ad::Var head_forward(ad::Var features, HeadParams& head) { return ad::sigmoid(head_logits(features, head)); }

Tensor compute_features(const Tensor& input, const BackboneParams& backbone) {
    ad::Graph g;
    RngState unused(0);
    // Evaluation mode never touches the parameters' grad state, so the
    // const_cast only serves the graph binding.
    auto& bb = const_cast<BackboneParams&>(backbone);
    return extract_features(g, input, bb, ForwardMode{false, 0.0}, unused).value();
}

Tensor compute_head_logits(const Tensor& features, const HeadParams& head) {
    ad::Graph g;
    return head_logits(g.input(features), const_cast<HeadParams&>(head)).value();
}

Tensor compute_probabilities(const Tensor& input, const SegmentationModel& model) {
    ad::Graph g;
    RngState unused(0);
    auto& m = const_cast<SegmentationModel&>(model);
    auto f = extract_features(g, input, m.backbone, ForwardMode{false, 0.0}, unused);
    return head_forward(f, m.head).value();
}

}  // namespace ttrx
