#pragma once

#include "smunet/adam.hpp"
#include "smunet/checkpoint.hpp"
#include "smunet/objectives.hpp"
#include "smunet/raw_io.hpp"

namespace smunet {

enum class MaskPolicy { fixed, random_subset };

inline const char* mask_policy_name(MaskPolicy p) {
    return p == MaskPolicy::fixed ? "fixed" : "random_subset";
}

inline MaskPolicy parse_mask_policy(const std::string& s) {
    if (s == "fixed") return MaskPolicy::fixed;
    if (s == "random_subset") return MaskPolicy::random_subset;
    throw std::invalid_argument("unknown mask policy '" + s + "' (valid: fixed, random_subset)");
}

/// Full training recipe. Defaults follow the training setup (Adam, lr 1e-4,
/// batch size 1) at desk scale (20 epochs, 32^3 volumes).
struct TrainConfig {
    double learning_rate = 1e-4;
    std::int64_t batch_size = 1;
    std::int64_t epochs = 20;
    std::uint64_t seed = 0;
    MaskPolicy mask_policy = MaskPolicy::fixed;
    ModalityMask fixed_mask = ModalityMask::parse("1000"); // per-scenario default: FLAIR only
    StyleModule style_module = StyleModule::adversarial;
    LossWeights weights;
    std::int64_t d_z = 16;
    bool add_texture_loss = true;
    std::array<std::int64_t, 3> spatial_size = {32, 32, 32}; // (H, W, D)
    UNetConfig unet;
    std::int64_t checkpoint_every = 1; // epochs between checkpoints; 0 = final only

    Dims3 dims() const { return {spatial_size[2], spatial_size[0], spatial_size[1]}; }

    void validate() const {
        if (!(learning_rate > 0) || !std::isfinite(learning_rate))
            throw std::invalid_argument("TrainConfig: learning_rate must be positive");
        if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
        if (batch_size != 1)
            throw std::invalid_argument("TrainConfig: only batch_size 1 is supported");
        if (d_z <= 0) throw std::invalid_argument("TrainConfig: d_z must be positive");
        if (checkpoint_every < 0)
            throw std::invalid_argument("TrainConfig: checkpoint_every must be >= 0");
        weights.validate();
        unet.validate();
        for (auto s : spatial_size)
            if (s <= 0 || s % unet.pool_factor() != 0)
                throw std::invalid_argument("TrainConfig: spatial sizes must be multiples of " +
                                            std::to_string(unet.pool_factor()));
    }
};

inline nlohmann::json to_json(const LossWeights& w) {
    return {{"lambda_seg", w.lambda_seg},
            {"lambda_consistency", w.lambda_consistency},
            {"lambda_style", w.lambda_style},
            {"lambda_content", w.lambda_content}};
}

inline LossWeights loss_weights_from_json(const nlohmann::json& j) {
    LossWeights w;
    w.lambda_seg = j.value("lambda_seg", w.lambda_seg);
    w.lambda_consistency = j.value("lambda_consistency", w.lambda_consistency);
    w.lambda_style = j.value("lambda_style", w.lambda_style);
    w.lambda_content = j.value("lambda_content", w.lambda_content);
    return w;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"seed", c.seed},
            {"mask_policy", mask_policy_name(c.mask_policy)},
            {"fixed_mask", c.fixed_mask.bits()},
            {"style_module", style_module_name(c.style_module)},
            {"weights", to_json(c.weights)},
            {"d_z", c.d_z},
            {"add_texture_loss", c.add_texture_loss},
            {"spatial_size", c.spatial_size},
            {"checkpoint_every", c.checkpoint_every},
            {"unet",
             {{"in_channels", c.unet.in_channels},
              {"base_width", c.unet.base_width},
              {"num_blocks", c.unet.num_blocks},
              {"norm_groups", c.unet.norm_groups},
              {"num_classes", c.unet.num_classes}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    if (j.contains("mask_policy")) c.mask_policy = parse_mask_policy(j["mask_policy"]);
    if (j.contains("fixed_mask")) c.fixed_mask = ModalityMask::parse(j["fixed_mask"]);
    if (j.contains("style_module")) c.style_module = parse_style_module(j["style_module"]);
    if (j.contains("weights")) c.weights = loss_weights_from_json(j["weights"]);
    c.d_z = j.value("d_z", c.d_z);
    c.add_texture_loss = j.value("add_texture_loss", c.add_texture_loss);
    if (j.contains("spatial_size")) c.spatial_size = j["spatial_size"].get<std::array<std::int64_t, 3>>();
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("unet")) {
        const auto& u = j["unet"];
        c.unet.in_channels = u.value("in_channels", c.unet.in_channels);
        c.unet.base_width = u.value("base_width", c.unet.base_width);
        c.unet.num_blocks = u.value("num_blocks", c.unet.num_blocks);
        c.unet.norm_groups = u.value("norm_groups", c.unet.norm_groups);
        c.unet.num_classes = u.value("num_classes", c.unet.num_classes);
    }
    return c;
}

/// Deterministic loss line; %.17g keeps doubles exact across runs.
inline std::string loss_report_jsonl(const LossReport& r) {
    auto fmt = [](double v) {
        char b[40];
        std::snprintf(b, sizeof(b), "%.17g", v);
        return std::string(b);
    };
    std::string line = "{\"step\":" + std::to_string(r.step) +
                       ",\"seg_full\":" + fmt(r.seg_full) +
                       ",\"seg_missing\":" + fmt(r.seg_missing) + ",\"mi\":" + fmt(r.mi) +
                       ",\"l1\":" + fmt(r.l1) + ",\"style\":" + fmt(r.style) +
                       ",\"content\":" + fmt(r.content) + ",\"joint\":" + fmt(r.joint);
    if (r.has_d_loss) line += ",\"d_loss\":" + fmt(r.d_loss);
    line += "}";
    return line;
}

/// The co-trained pair plus every auxiliary head. All components exist for
/// every variant so checkpoints are uniform and shared initializations are
/// identical across variant choices; the variant only shapes the step graph.
template <typename T>
struct CoTrainModel {
    TrainConfig config;
    ParamStore<T> params;
    UNet3d<T> full_net, miss_net;
    ModificationHeads<T> mod_heads;
    FusionHeads<T> fusion;
    GaussianHead<T> posterior, prior;
    DiscriminatorNet<T> disc;
    Critic<T> critic;
    Adam<T> main_opt, disc_opt;
    std::int64_t step = 0;

    static CoTrainModel make(const TrainConfig& cfg) {
        cfg.validate();
        CoTrainModel m;
        m.config = cfg;
        Rng rng(mix_seed(cfg.seed, stream_tag("init")));
        m.full_net = UNet3d<T>::make(m.params, "full", cfg.unet, rng);
        m.miss_net = UNet3d<T>::make(m.params, "miss", cfg.unet, rng);
        m.mod_heads = ModificationHeads<T>::make(m.params, "mod", cfg.unet, cfg.d_z);
        m.fusion = FusionHeads<T>::make(m.params, "fusion", cfg.unet, rng);
        std::int64_t pooled = 0;
        for (std::int64_t i = 0; i < cfg.unet.num_blocks; ++i) pooled += cfg.unet.width(i);
        m.posterior = GaussianHead<T>::make(m.params, "post", pooled, cfg.d_z, rng);
        m.prior = GaussianHead<T>::make(m.params, "prior", pooled, cfg.d_z, rng);
        m.disc = DiscriminatorNet<T>::make(m.params, "disc",
                                           cfg.unet.width(cfg.unet.num_blocks - 1), rng);
        m.critic = Critic<T>::make(m.params, "critic", cfg.unet.num_classes, rng);

        std::vector<Var<T>> main_params, disc_params;
        for (const auto& e : m.params.entries())
            (e.name.rfind("disc.", 0) == 0 ? disc_params : main_params).push_back(e.var);
        m.main_opt = Adam<T>(std::move(main_params), cfg.learning_rate);
        // The discriminator learns slower than the paths it judges; at equal
        // rates it wins early and the generator signal saturates at the clamp.
        m.disc_opt = Adam<T>(std::move(disc_params), cfg.learning_rate * 0.3);
        return m;
    }

    Rng step_rng(std::int64_t for_step) const {
        return Rng(mix_seed(mix_seed(config.seed, stream_tag("step")),
                            static_cast<std::uint64_t>(for_step)));
    }

    ModalityMask draw_mask(Rng& rng) const {
        if (config.mask_policy == MaskPolicy::fixed) return config.fixed_mask;
        const auto subsets = enumerate_subsets();
        return subsets[static_cast<std::size_t>(rng.below(15))];
    }

    Var<T> to_input(const LabeledVolume& v) const {
        return make_const(v.modalities.template cast<T>());
    }

    /// Student forward pass shared by training and inference. Returns the
    /// logits plus the style loss term (zero when no teacher is given).
    struct StudentPass {
        Var<T> logits;
        Var<T> style_loss;
        ContentRepresentation<T> content;
    };

    StudentPass student_forward(const Var<T>& x_m, const StyleRepresentation<T>* style_f,
                                const Tensor<T>& eps, Var<T>* d_loss_out = nullptr) const {
        auto enc_m = miss_net.encode(x_m);
        auto style_m = extract_style(enc_m);
        auto content_m = extract_content(enc_m);

        if (config.style_module == StyleModule::none) {
            return {miss_net.decode(enc_m), make_scalar(T(0)), content_m};
        }

        MatchingSignal<T> signal;
        Var<T> style_loss = make_scalar(T(0));
        switch (config.style_module) {
        case StyleModule::distribution: {
            auto r = distribution_match(style_f, style_m, posterior, prior, eps);
            signal = std::move(r.signal);
            style_loss = r.loss;
            break;
        }
        case StyleModule::adversarial: {
            if (style_f != nullptr) {
                auto r = adversarial_losses(*style_f, style_m, disc);
                signal = std::move(r.signal);
                style_loss = r.g_loss;
                if (d_loss_out) *d_loss_out = r.d_loss;
            } else {
                signal = recalibration_signal(StyleModule::adversarial, style_m);
            }
            break;
        }
        case StyleModule::texture: {
            signal = recalibration_signal(StyleModule::texture, style_m);
            if (style_f != nullptr) style_loss = texture_loss(*style_f, style_m);
            break;
        }
        default:
            break;
        }
        // The texture loss accompanies the other matching modules by default.
        if (config.add_texture_loss && style_f != nullptr &&
            config.style_module != StyleModule::texture)
            style_loss = add(style_loss, texture_loss(*style_f, style_m));

        auto modified = modify_style(style_m, signal, mod_heads);
        auto fused = recombine(enc_m, modified, content_m, fusion);
        return {miss_net.decode(fused), style_loss, content_m};
    }

    /// One co-training step: draw mask, run both paths, assemble the joint
    /// objective, and apply the optimizer update(s). Deterministic given
    /// (state, volume, step counter).
    LossReport train_step(const LabeledVolume& volume) {
        volume.validate("train_step volume");
        Rng rng = step_rng(step);
        const ModalityMask mask = draw_mask(rng);

        Tensor<T> eps({config.d_z});
        for (std::int64_t i = 0; i < config.d_z; ++i)
            eps[i] = static_cast<T>(rng.normal()); // reparameterization noise
        const std::uint64_t shuffle_seed = rng.next_u64();

        // Full path.
        auto x_f = to_input(volume);
        auto enc_f = full_net.encode(x_f);
        auto logits_f = full_net.decode(enc_f);
        auto style_f = extract_style(enc_f);
        auto content_f = extract_content(enc_f);

        // Missing path.
        auto x_m = to_input(apply_modality_mask(volume, mask));
        Var<T> d_loss;
        auto sp = student_forward(x_m, &style_f, eps, &d_loss);

        // Loss terms (teacher sides are constants inside each term).
        auto seg_f = dice_loss(logits_f, volume.labels);
        auto seg_m = dice_loss(sp.logits, volume.labels);
        auto mi = mi_js_loss(logits_f, sp.logits, critic, shuffle_seed);
        auto l1 = l1_global_loss(logits_f, sp.logits);
        auto content = content_loss(content_f, sp.content);

        LossReport r;
        r.step = step + 1;
        r.seg_full = static_cast<double>(seg_f->value.item());
        r.seg_missing = static_cast<double>(seg_m->value.item());
        r.mi = static_cast<double>(mi->value.item());
        r.l1 = static_cast<double>(l1->value.item());
        r.style = static_cast<double>(sp.style_loss->value.item());
        r.content = static_cast<double>(content->value.item());
        r.joint = joint_loss(r, config.weights); // validates finiteness by name
        if (d_loss) {
            r.d_loss = static_cast<double>(d_loss->value.item());
            r.has_d_loss = true;
            if (!std::isfinite(r.d_loss))
                throw std::runtime_error("train_step: non-finite component d_loss");
        }

        // Joint graph; zero-weighted terms stay out so unused heads keep
        // exactly zero gradient.
        const LossWeights& w = config.weights;
        auto joint = make_scalar(T(0));
        if (w.lambda_seg > 0)
            joint = add(joint, mul_scalar(add(seg_f, seg_m), static_cast<T>(w.lambda_seg)));
        if (w.lambda_consistency > 0)
            joint = add(joint, mul_scalar(add(mi, l1), static_cast<T>(w.lambda_consistency)));
        if (w.lambda_style > 0)
            joint = add(joint, mul_scalar(sp.style_loss, static_cast<T>(w.lambda_style)));
        if (w.lambda_content > 0)
            joint = add(joint, mul_scalar(content, static_cast<T>(w.lambda_content)));

        // Both gradient sets come from the same forward state: run the two
        // backward sweeps before either optimizer mutates a weight, then
        // apply the discriminator update followed by the main update.
        main_opt.zero_grad();
        disc_opt.zero_grad();
        backward(joint);
        const bool disc_step = d_loss && config.weights.lambda_style > 0;
        if (disc_step) {
            disc_opt.zero_grad(); // discard the g_loss spill; d_loss alone drives the disc
            backward(d_loss);     // styles are constants here, only disc params receive grads
            disc_opt.step();
        }
        main_opt.step();
        disc_opt.zero_grad();

        ++step;
        return r;
    }

    /// Missing-path-only inference: the full path is never evaluated; the
    /// reparameterization noise is pinned to zero. Returns labels in
    /// {0, 1, 2, 4}.
    Tensor<std::uint8_t> infer(const LabeledVolume& volume, const ModalityMask& mask) const {
        auto x_m = to_input(apply_modality_mask(volume, mask));
        Tensor<T> eps({config.d_z}); // zeros: z = posterior mean
        auto sp = student_forward(x_m, nullptr, eps);
        const auto& logits = sp.logits->value;
        const std::int64_t nvox = logits.spatial().voxels();
        const std::int64_t nc = logits.channels();
        Tensor<std::uint8_t> out({logits.dim(1), logits.dim(2), logits.dim(3)});
        for (std::int64_t i = 0; i < nvox; ++i) {
            std::int64_t best = 0;
            for (std::int64_t c = 1; c < nc; ++c)
                if (logits[c * nvox + i] > logits[best * nvox + i]) best = c;
            out[i] = static_cast<std::uint8_t>(class_to_label(best));
        }
        return out;
    }
};

/// Serializes parameters, optimizer moments, the step counter and the config
/// snapshot into one archive.
template <typename T>
void save_state(const CoTrainModel<T>& m, const std::filesystem::path& path) {
    std::vector<NamedTensor<T>> tensors;
    for (const auto& e : m.params.entries()) tensors.push_back({e.name, &e.var->value});
    auto& main_opt = const_cast<Adam<T>&>(m.main_opt);
    auto& disc_opt = const_cast<Adam<T>&>(m.disc_opt);
    for (std::size_t k = 0; k < m.main_opt.params().size(); ++k) {
        tensors.push_back({"opt.main.m." + std::to_string(k), &main_opt.moment1(k)});
        tensors.push_back({"opt.main.v." + std::to_string(k), &main_opt.moment2(k)});
    }
    for (std::size_t k = 0; k < m.disc_opt.params().size(); ++k) {
        tensors.push_back({"opt.disc.m." + std::to_string(k), &disc_opt.moment1(k)});
        tensors.push_back({"opt.disc.v." + std::to_string(k), &disc_opt.moment2(k)});
    }
    nlohmann::json extra;
    extra["step"] = m.step;
    extra["opt_steps"] = {{"main", m.main_opt.step_count()}, {"disc", m.disc_opt.step_count()}};
    extra["config"] = to_json(m.config);
    save_checkpoint(path, tensors, extra);
}

template <typename T>
CoTrainModel<T> load_state(const std::filesystem::path& path) {
    auto ar = load_checkpoint<T>(path);
    TrainConfig cfg = train_config_from_json(ar.manifest.at("config"));
    CoTrainModel<T> m = CoTrainModel<T>::make(cfg);
    for (const auto& e : m.params.entries()) {
        auto it = ar.tensors.find(e.name);
        if (it == ar.tensors.end())
            throw std::runtime_error("checkpoint " + path.string() + " lacks tensor " + e.name);
        if (!(it->second.shape() == e.var->value.shape()))
            throw std::runtime_error("checkpoint tensor " + e.name + " has shape " +
                                     it->second.shape_str() + ", expected " +
                                     e.var->value.shape_str());
        e.var->value = it->second;
    }
    auto load_moments = [&](Adam<T>& opt, const std::string& prefix) {
        for (std::size_t k = 0; k < opt.params().size(); ++k) {
            opt.moment1(k) = ar.tensors.at(prefix + ".m." + std::to_string(k));
            opt.moment2(k) = ar.tensors.at(prefix + ".v." + std::to_string(k));
        }
    };
    load_moments(m.main_opt, "opt.main");
    load_moments(m.disc_opt, "opt.disc");
    m.step = ar.manifest.at("step").template get<std::int64_t>();
    m.main_opt.set_step_count(ar.manifest.at("opt_steps").at("main").template get<std::int64_t>());
    m.disc_opt.set_step_count(ar.manifest.at("opt_steps").at("disc").template get<std::int64_t>());
    return m;
}

/// Runs the full loop: epochs x |data| steps with a seeded per-epoch shuffle,
/// loss lines appended to <run_dir>/losses.jsonl, periodic checkpoints and a
/// final one. An empty run_dir skips all file output.
template <typename T>
CoTrainModel<T> train(const TrainConfig& config, const std::vector<LabeledVolume>& data,
                      const std::filesystem::path& run_dir = {}) {
    config.validate();
    if (data.empty()) throw std::invalid_argument("train: dataset is empty");
    CoTrainModel<T> model = CoTrainModel<T>::make(config);

    const bool io = !run_dir.empty();
    std::ofstream losses;
    if (io) {
        std::filesystem::create_directories(run_dir);
        std::ofstream cf(run_dir / "config.json", std::ios::trunc);
        cf << to_json(config).dump(2) << "\n";
        losses.open(run_dir / "losses.jsonl", std::ios::trunc);
        if (!losses) throw std::runtime_error("cannot write losses.jsonl in " + run_dir.string());
    }

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        Rng erng(mix_seed(mix_seed(config.seed, stream_tag("epoch")),
                          static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(erng.below(
                                        static_cast<std::int64_t>(i)))]);
        for (std::size_t i : order) {
            LossReport r = model.train_step(data[i]);
            if (io) losses << loss_report_jsonl(r) << "\n";
        }
        if (io && config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0)
            save_state(model, run_dir / ("ckpt_epoch_" + std::to_string(epoch + 1)));
    }
    if (io) {
        losses.flush();
        save_state(model, run_dir / "final.ckpt");
    }
    return model;
}

} // namespace smunet
