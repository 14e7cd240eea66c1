#include "uld/model.hpp"

namespace uld {

namespace {

AggregatorConfig make_agg_config(const ModelConfig& cfg, const BackboneAdapter& adapter) {
    AggregatorConfig a;
    a.out_channels = cfg.aggregator_channels;
    a.out_height = adapter.input_height();
    a.out_width = adapter.input_width();
    a.activation = activation_from_string(cfg.aggregator_activation);
    return a;
}

HeadConfig make_head_config(const ModelConfig& cfg, int out_channels) {
    HeadConfig h;
    h.in_channels = cfg.aggregator_channels;
    h.hidden1 = cfg.head_hidden1;
    h.hidden2 = cfg.head_hidden2;
    h.out_channels = out_channels;
    return h;
}

}  // namespace

Model::Model(const ModelConfig& cfg)
    : adapter(make_adapter(cfg.backbone_kind, cfg.oracle)),
      aggregator(adapter->layout(), make_agg_config(cfg, *adapter)),
      detector(make_head_config(cfg, 1), /*sigmoid_output=*/true),
      descriptor(make_head_config(cfg, cfg.descriptor_dim), /*sigmoid_output=*/false),
      vae(cfg.vae),
      cfg_(cfg) {
    Rng rng(cfg.init_seed);
    if (cfg.aggregator_init == "identity")
        aggregator.init_identity();
    else if (cfg.aggregator_init == "random")
        aggregator.init_random(rng);
    else
        throw std::invalid_argument("Model: unknown aggregator_init '" + cfg.aggregator_init + "'");
    detector.init(rng);
    descriptor.init(rng);
    vae.init(rng);
}

FeatureMap Model::features(const Image& image, Aggregator::Ctx* ctx) const {
    const RawFeatureStack stack = extract_raw(image, *adapter);
    return aggregator.forward(stack, ctx);
}

ImageExtraction extract_keypoints(const Model& model, const Image& image, const ExtractionOptions& options,
                                  bool with_latent) {
    const FeatureMap fmap = model.features(image);
    const Heatmap heat = detect(fmap, model.detector);
    const FeatureMap volume = describe(fmap, model.descriptor);
    const std::vector<Keypoint> keypoints =
        nms_extract(heat, options.nms_window, options.nms_threshold, options.max_keypoints);

    ImageExtraction out;
    out.keypoints = keypoints;
    out.descriptors.resize(static_cast<long>(keypoints.size()), volume.channels());
    for (std::size_t i = 0; i < keypoints.size(); ++i)
        out.descriptors.row(static_cast<long>(i)) = sample_descriptor(volume, keypoints[i]).f.transpose();
    if (with_latent) out.latent = encode(heat, model.vae).phi;
    return out;
}

}  // namespace uld
