// Command-line front end: synthetic data generation, co-training, subset
// evaluation and the ablation grid. Config precedence everywhere is
// built-in defaults < --config file < explicit flags; SMUNET_SEED is the
// seed fallback when neither source sets one.

#include <chrono>
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "smunet/engine.hpp"
#include "smunet/phantom.hpp"
#include "smunet/plot.hpp"

using namespace smunet;
namespace fs = std::filesystem;

namespace {

std::string iso_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

/// Git-style hex id derived from the command, config and wall clock.
std::string make_run_id(const std::string& command, const nlohmann::json& config) {
    const std::string payload = command + config.dump() + iso_timestamp() +
                                std::to_string(std::chrono::steady_clock::now()
                                                   .time_since_epoch()
                                                   .count());
    std::uint64_t h1 = 0xcbf29ce484222325ull, h2 = 0x84222325cbf29ce4ull;
    for (unsigned char c : payload) {
        h1 = (h1 ^ c) * 0x100000001b3ull;
        h2 = (h2 ^ (c + 0x9e)) * 0x100000001b3ull;
    }
    char buf[33];
    std::snprintf(buf, sizeof(buf), "%016llx%016llx", static_cast<unsigned long long>(h1),
                  static_cast<unsigned long long>(h2));
    return buf;
}

struct Manifest {
    fs::path dir;
    nlohmann::json j;

    static Manifest begin(const fs::path& dir, const std::string& command,
                          const nlohmann::json& config) {
        Manifest m;
        m.dir = dir;
        m.j["command"] = command;
        m.j["run_id"] = make_run_id(command, config);
        m.j["config"] = config;
        m.j["started_at"] = iso_timestamp();
        m.j["outputs"] = nlohmann::json::array();
        fs::create_directories(dir);
        m.flush();
        return m;
    }

    void add_output(const fs::path& p) { j["outputs"].push_back(p.string()); }

    void finish() {
        j["finished_at"] = iso_timestamp();
        flush();
    }

    void flush() const {
        std::ofstream f(dir / "manifest.json", std::ios::trunc);
        f << j.dump(2) << "\n";
    }
};

std::uint64_t env_seed_fallback(std::uint64_t value, bool was_set) {
    if (was_set) return value;
    if (const char* env = std::getenv("SMUNET_SEED")) return std::strtoull(env, nullptr, 10);
    return value;
}

void require_empty_or_force(const fs::path& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw std::runtime_error(dir.string() +
                                 " exists and is not empty (use --force to overwrite)");
}

nlohmann::json load_config_file(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot read config file " + path);
    nlohmann::json j;
    f >> j;
    return j;
}

PhantomConfig phantom_config_from_json(const nlohmann::json& j) {
    PhantomConfig c;
    if (j.contains("spatial_size")) c.spatial_size = j["spatial_size"].get<std::array<std::int64_t, 3>>();
    c.num_volumes = j.value("num_volumes", c.num_volumes);
    c.seed = j.value("seed", c.seed);
    c.style_gap = j.value("style_gap", c.style_gap);
    c.tumor_probability = j.value("tumor_probability", c.tumor_probability);
    return c;
}

nlohmann::json to_json(const PhantomConfig& c) {
    return {{"spatial_size", c.spatial_size},
            {"num_volumes", c.num_volumes},
            {"seed", c.seed},
            {"style_gap", c.style_gap},
            {"tumor_probability", c.tumor_probability}};
}

// ---------------------------------------------------------------------------

struct SynthArgs {
    std::string config_file, out_dir, test_out;
    std::int64_t count = -1, size = 0, split_test = 0;
    std::uint64_t seed = 0;
    bool seed_set = false;
    double style_gap = -1, tumor_prob = -1;
    bool force = false;
};

int run_synth(const SynthArgs& a) {
    PhantomConfig cfg = phantom_config_from_json(load_config_file(a.config_file));
    if (a.count >= 0) cfg.num_volumes = a.count;
    if (a.size > 0) cfg.spatial_size = {a.size, a.size, a.size};
    cfg.seed = a.seed_set ? a.seed : env_seed_fallback(cfg.seed, false);
    if (a.style_gap >= 0) cfg.style_gap = a.style_gap;
    if (a.tumor_prob >= 0) cfg.tumor_probability = a.tumor_prob;
    cfg.validate();
    if (a.split_test > 0 && a.test_out.empty())
        throw std::runtime_error("--split-test requires --test-out");
    if (a.split_test >= cfg.num_volumes)
        throw std::runtime_error("--split-test must be smaller than the volume count");

    require_empty_or_force(a.out_dir, a.force);
    if (!a.test_out.empty()) require_empty_or_force(a.test_out, a.force);

    auto manifest = Manifest::begin(a.out_dir, "synth", to_json(cfg));
    auto vols = generate_phantom(cfg);
    const std::int64_t n_train = cfg.num_volumes - a.split_test;
    std::vector<LabeledVolume> train_vols(vols.begin(), vols.begin() + n_train);
    write_raw_dataset(a.out_dir, train_vols);
    for (std::int64_t i = 0; i < n_train; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "case_%03lld", static_cast<long long>(i));
        manifest.add_output(fs::path(a.out_dir) / name);
    }
    if (a.split_test > 0) {
        std::vector<LabeledVolume> test_vols(vols.begin() + n_train, vols.end());
        auto tman = Manifest::begin(a.test_out, "synth", to_json(cfg));
        write_raw_dataset(a.test_out, test_vols);
        tman.finish();
        std::cout << "wrote " << test_vols.size() << " test cases to " << a.test_out << "\n";
    }
    manifest.finish();
    std::cout << "wrote " << n_train << " cases to " << a.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct TrainFlags {
    std::string config_file, data_dir, out_dir;
    std::string style_module, mask, policy;
    std::int64_t epochs = -1, base_width = -1, norm_groups = -1, d_z = -1,
                 checkpoint_every = -1;
    double lr = -1;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool no_texture_loss = false;
    double lambda_seg = -1, lambda_consistency = -1, lambda_style = -1, lambda_content = -1;
    std::int64_t size = 0;
    bool force = false;
};

TrainConfig resolve_train_config(const TrainFlags& f) {
    TrainConfig cfg = train_config_from_json(load_config_file(f.config_file));
    if (f.epochs >= 0) cfg.epochs = f.epochs;
    if (f.lr > 0) cfg.learning_rate = f.lr;
    cfg.seed = f.seed_set ? f.seed : env_seed_fallback(cfg.seed, false);
    if (!f.style_module.empty()) cfg.style_module = parse_style_module(f.style_module);
    if (!f.mask.empty()) cfg.fixed_mask = ModalityMask::parse(f.mask);
    if (!f.policy.empty()) cfg.mask_policy = parse_mask_policy(f.policy);
    if (f.base_width > 0) cfg.unet.base_width = f.base_width;
    if (f.norm_groups > 0) cfg.unet.norm_groups = f.norm_groups;
    if (f.d_z > 0) cfg.d_z = f.d_z;
    if (f.checkpoint_every >= 0) cfg.checkpoint_every = f.checkpoint_every;
    if (f.no_texture_loss) cfg.add_texture_loss = false;
    if (f.lambda_seg >= 0) cfg.weights.lambda_seg = f.lambda_seg;
    if (f.lambda_consistency >= 0) cfg.weights.lambda_consistency = f.lambda_consistency;
    if (f.lambda_style >= 0) cfg.weights.lambda_style = f.lambda_style;
    if (f.lambda_content >= 0) cfg.weights.lambda_content = f.lambda_content;
    if (f.size > 0) cfg.spatial_size = {f.size, f.size, f.size};
    cfg.validate();
    return cfg;
}

int run_train(const TrainFlags& f) {
    TrainConfig cfg = resolve_train_config(f);
    require_empty_or_force(f.out_dir, f.force);
    auto data = ingest_raw(f.data_dir, cfg.spatial_size);
    if (data.empty()) throw std::runtime_error("no cases found in " + f.data_dir);

    auto manifest = Manifest::begin(f.out_dir, "train", to_json(cfg));
    manifest.add_output(fs::path(f.out_dir) / "losses.jsonl");
    manifest.add_output(fs::path(f.out_dir) / "final.ckpt");
    manifest.flush();
    train<float>(cfg, data, f.out_dir);
    manifest.finish();
    std::cout << "trained " << cfg.epochs << " epochs on " << data.size() << " cases; run dir "
              << f.out_dir << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string run_dir, data_dir, out_csv, plot_path, mask;
    std::vector<std::string> compare_runs;
};

SubsetReport evaluate_run(const fs::path& run_dir, const std::vector<LabeledVolume>& data) {
    const fs::path ckpt = run_dir / "final.ckpt";
    if (!fs::exists(ckpt)) throw std::runtime_error("missing checkpoint " + ckpt.string());
    auto model = load_state<float>(ckpt);
    Predictor predict = [&model](const LabeledVolume& v, const ModalityMask& m) {
        return model.infer(v, m);
    };
    return evaluate_subsets(predict, data);
}

int run_eval(const EvalArgs& a) {
    const fs::path run_dir = a.run_dir;
    auto cfg_json = load_config_file((run_dir / "config.json").string());
    TrainConfig cfg = train_config_from_json(cfg_json);
    auto data = ingest_raw(a.data_dir, cfg.spatial_size);
    if (data.empty()) throw std::runtime_error("no cases found in " + a.data_dir);

    auto report = evaluate_run(run_dir, data);
    std::optional<ModalityMask> only;
    if (!a.mask.empty()) only = ModalityMask::parse(a.mask);
    emit_table(report, a.out_csv, only);
    std::cout << "wrote " << a.out_csv << "\n";

    if (!a.plot_path.empty()) {
        std::vector<NamedReport> reports = {{run_dir.filename().string(), report}};
        for (const auto& other : a.compare_runs)
            reports.push_back({fs::path(other).filename().string(), evaluate_run(other, data)});
        emit_plot(reports, a.plot_path);
        std::cout << "wrote " << a.plot_path << "\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
    TrainFlags train; // shared config/flag plumbing; out_dir is the grid root
    std::string eval_data;
};

int run_ablate(const AblateArgs& a) {
    TrainConfig base = resolve_train_config(a.train);
    require_empty_or_force(a.train.out_dir, a.train.force);
    auto data = ingest_raw(a.train.data_dir, base.spatial_size);
    if (data.empty()) throw std::runtime_error("no cases found in " + a.train.data_dir);
    auto eval_data = ingest_raw(a.eval_data, base.spatial_size);
    if (eval_data.empty()) throw std::runtime_error("no cases found in " + a.eval_data);

    struct Row {
        bool consistency, content, style;
        StyleModule module;      // trained variant (none when style is off)
        const char* module_tag;  // reported column
        const char* name;
    };
    // The six-row grid: three single-loss ablations of the adversarial
    // configuration, then the three style-module variants with all losses on.
    const Row grid[] = {
        {false, true, true, StyleModule::adversarial, "adversarial", "no_consistency"},
        {true, false, true, StyleModule::adversarial, "adversarial", "no_content"},
        {true, true, false, StyleModule::none, "adversarial", "no_style"},
        {true, true, true, StyleModule::distribution, "distribution", "distribution"},
        {true, true, true, StyleModule::texture, "texture", "texture"},
        {true, true, true, StyleModule::adversarial, "adversarial", "adversarial"},
    };

    auto manifest = Manifest::begin(a.train.out_dir, "ablate", to_json(base));
    const fs::path csv_path = fs::path(a.train.out_dir) / "ablation.csv";
    std::ofstream csv(csv_path, std::ios::trunc);
    csv << "consistency,content,style,style_module,dice_wt,dice_ct,dice_et,average\n";

    for (const auto& row : grid) {
        TrainConfig cfg = base;
        cfg.style_module = row.module;
        cfg.weights.lambda_consistency = row.consistency ? base.weights.lambda_consistency : 0;
        cfg.weights.lambda_content = row.content ? base.weights.lambda_content : 0;
        cfg.weights.lambda_style = row.style ? base.weights.lambda_style : 0;
        const fs::path run_dir = fs::path(a.train.out_dir) / ("run_" + std::string(row.name));
        auto sub = Manifest::begin(run_dir, "ablate/" + std::string(row.name), to_json(cfg));
        auto model = train<float>(cfg, data, run_dir);
        sub.finish();

        double wt = 0, ct = 0, et = 0;
        for (const auto& vol : eval_data) {
            auto pred_regions = derive_regions(model.infer(vol, cfg.fixed_mask));
            auto true_regions = derive_regions(vol.labels);
            wt += dice_score(pred_regions.wt, true_regions.wt);
            ct += dice_score(pred_regions.ct, true_regions.ct);
            et += dice_score(pred_regions.et, true_regions.et);
        }
        const double n = static_cast<double>(eval_data.size());
        wt /= n;
        ct /= n;
        et /= n;
        char line[256];
        std::snprintf(line, sizeof(line), "%d,%d,%d,%s,%.17g,%.17g,%.17g,%.17g",
                      row.consistency ? 1 : 0, row.content ? 1 : 0, row.style ? 1 : 0,
                      row.module_tag, wt, ct, et, (wt + ct + et) / 3.0);
        csv << line << "\n";
        std::cout << row.name << ": wt " << wt << " ct " << ct << " et " << et << "\n";
    }
    csv.flush();
    manifest.add_output(csv_path);
    manifest.finish();
    std::cout << "wrote " << csv_path << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"SMU-Net: co-trained style-matching segmentation at desk scale"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* cs = app.add_subcommand("synth", "generate a synthetic raw dataset");
    cs->add_option("--config", synth.config_file, "JSON config file");
    cs->add_option("--out", synth.out_dir, "output dataset directory")->required();
    cs->add_option("--count", synth.count, "number of volumes");
    cs->add_option("--size", synth.size, "cubic spatial size (multiple of 16)");
    auto* ss = cs->add_option("--seed", synth.seed, "generation seed");
    cs->add_option("--style-gap", synth.style_gap, "per-modality texture gap in [0,inf)");
    cs->add_option("--tumor-prob", synth.tumor_prob, "probability a volume contains a tumor");
    cs->add_option("--split-test", synth.split_test, "hold out the last K cases");
    cs->add_option("--test-out", synth.test_out, "directory for held-out cases");
    cs->add_flag("--force", synth.force, "overwrite non-empty output directories");

    TrainFlags tf;
    auto* ct = app.add_subcommand("train", "co-train the two-path model");
    ct->add_option("--config", tf.config_file, "JSON config file");
    ct->add_option("--data", tf.data_dir, "training dataset directory")->required();
    ct->add_option("--out", tf.out_dir, "run directory")->required();
    ct->add_option("--style-module", tf.style_module,
                   "style matching module: none|distribution|adversarial|texture");
    ct->add_option("--mask", tf.mask, "fixed modality mask bits, order flair,t1,t1c,t2");
    ct->add_option("--mask-policy", tf.policy, "fixed | random_subset");
    ct->add_option("--epochs", tf.epochs, "training epochs");
    ct->add_option("--lr", tf.lr, "learning rate");
    auto* ts = ct->add_option("--seed", tf.seed, "training seed");
    ct->add_option("--base-width", tf.base_width, "U-Net base channel width");
    ct->add_option("--norm-groups", tf.norm_groups, "group-normalization group count");
    ct->add_option("--d-z", tf.d_z, "latent dimension of the distribution module");
    ct->add_option("--size", tf.size, "cubic spatial size override");
    ct->add_option("--checkpoint-every", tf.checkpoint_every,
                   "epochs between checkpoints (0: final only)");
    ct->add_flag("--no-texture-loss", tf.no_texture_loss,
                 "drop the texture term from the other style modules");
    ct->add_option("--lambda-seg", tf.lambda_seg, "segmentation weight");
    ct->add_option("--lambda-consistency", tf.lambda_consistency, "consistency weight");
    ct->add_option("--lambda-style", tf.lambda_style, "style weight");
    ct->add_option("--lambda-content", tf.lambda_content, "content weight");
    ct->add_flag("--force", tf.force, "overwrite a non-empty run directory");

    EvalArgs ea;
    auto* ce = app.add_subcommand("eval", "evaluate a run over the 15 modality subsets");
    ce->add_option("--run", ea.run_dir, "run directory with final.ckpt")->required();
    ce->add_option("--data", ea.data_dir, "evaluation dataset directory")->required();
    ce->add_option("--out", ea.out_csv, "output CSV path")->required();
    ce->add_option("--mask", ea.mask, "restrict the table to one subset row");
    ce->add_option("--plot", ea.plot_path, "also write a grouped bar chart (BMP)");
    ce->add_option("--compare", ea.compare_runs, "additional run directories for the chart");

    AblateArgs aa;
    auto* ca = app.add_subcommand("ablate", "run the six-row module-contribution grid");
    ca->add_option("--config", aa.train.config_file, "JSON config file");
    ca->add_option("--data", aa.train.data_dir, "training dataset directory")->required();
    ca->add_option("--eval-data", aa.eval_data, "evaluation dataset directory")->required();
    ca->add_option("--out", aa.train.out_dir, "output directory for the grid")->required();
    ca->add_option("--epochs", aa.train.epochs, "training epochs per row");
    auto* as = ca->add_option("--seed", aa.train.seed, "training seed");
    ca->add_option("--mask", aa.train.mask, "fixed modality mask for every row");
    ca->add_option("--base-width", aa.train.base_width, "U-Net base channel width");
    ca->add_option("--norm-groups", aa.train.norm_groups, "group-normalization group count");
    ca->add_option("--size", aa.train.size, "cubic spatial size override");
    ca->add_option("--checkpoint-every", aa.train.checkpoint_every,
                   "epochs between checkpoints (0: final only)");
    ca->add_flag("--force", aa.train.force, "overwrite a non-empty output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cs->parsed()) {
            synth.seed_set = ss->count() > 0;
            return run_synth(synth);
        }
        if (ct->parsed()) {
            tf.seed_set = ts->count() > 0;
            return run_train(tf);
        }
        if (ce->parsed()) return run_eval(ea);
        if (ca->parsed()) {
            aa.train.seed_set = as->count() > 0;
            return run_ablate(aa);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
