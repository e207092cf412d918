// odhn: two-branch recurrence-risk pipeline over tiled slide bundles and
// clinicopathologic records. One subcommand per pipeline stage; every
// artifact embeds the config echo and is written atomically.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "odhn/pipeline.hpp"
#include "odhn/synthgen.hpp"

namespace fs = std::filesystem;
using namespace odhn;

namespace {

struct CommonArgs {
    std::string config_path;
    std::int64_t seed = -1;  // -1: keep the config value
    std::string out;
    int threads = 1;
};

void add_common(CLI::App* sub, CommonArgs& args) {
    sub->add_option("--config", args.config_path, "pipeline config file")->required();
    sub->add_option("--seed", args.seed, "override the subcommand's primary seed");
    sub->add_option("--out", args.out, "override paths.output_dir");
    sub->add_option("--threads", args.threads, "worker threads for inference")
        ->check(CLI::PositiveNumber);
}

PipelineConfig load_config(const CommonArgs& args) {
    if (!fs::exists(args.config_path)) {
        std::cerr << "missing config: " << args.config_path << "\n";
        std::exit(2);
    }
    PipelineConfig cfg = PipelineConfig::from_file(args.config_path);
    if (!args.out.empty()) cfg.output_dir = args.out;
    cfg.threads = args.threads;
    cfg.echo["version"] = pipeline::kVersion;
    return cfg;
}

fs::path cohort_csv(const PipelineConfig& cfg) { return cfg.output_dir / "cohort" / "clinical.csv"; }
fs::path cohort_manifest(const PipelineConfig& cfg) { return cfg.output_dir / "cohort" / "manifest.csv"; }
fs::path checkpoint_path(const PipelineConfig& cfg, const std::string& name) {
    return cfg.output_dir / "checkpoints" / (name + ".odhn");
}

Checkpoint load_checkpoint(const PipelineConfig& cfg, const std::string& name,
                           const std::string& expected_phase) {
    const fs::path path = checkpoint_path(cfg, name);
    if (!fs::exists(path)) throw Error("missing checkpoint: " + path.string());
    Checkpoint cp = Checkpoint::load(path);
    if (!expected_phase.empty() && cp.phase != expected_phase)
        throw VersionError("checkpoint " + path.string() + " has phase '" + cp.phase +
                           "', expected '" + expected_phase + "'");
    return cp;
}

CohortManifest load_cohort(const PipelineConfig& cfg) {
    if (!fs::exists(cohort_csv(cfg)))
        throw Error("missing cohort: run the ingest subcommand first (" + cohort_csv(cfg).string() + ")");
    return ingest(cohort_csv(cfg), cohort_manifest(cfg));
}

std::string loss_csv(const std::vector<double>& history) {
    std::ostringstream os;
    os.precision(17);
    os << "step,loss\n";
    for (std::size_t i = 0; i < history.size(); ++i) os << i + 1 << ',' << history[i] << "\n";
    return os.str();
}

int cmd_synth_gen(const CommonArgs& args) {
    PipelineConfig cfg = load_config(args);
    if (args.seed >= 0) cfg.synth.seed = static_cast<std::uint64_t>(args.seed);
    const auto result = synth::generate(cfg.synth, cfg.cohort_dir);
    std::size_t high = 0;
    for (const auto& p : result.patients) high += p.label == RiskCategory::High;
    std::cout << "generated " << result.patients.size() << " patients (" << high << " high risk) under "
              << cfg.cohort_dir.string() << "\n";
    return 0;
}

int cmd_ingest(const CommonArgs& args) {
    PipelineConfig cfg = load_config(args);
    const auto cohort = ingest(cfg.cohort_dir / "clinical.csv", cfg.cohort_dir / "manifest.csv");
    fs::create_directories(cfg.output_dir / "cohort");
    serialize(cohort, cohort_csv(cfg), cohort_manifest(cfg));
    std::cout << "ingested " << cohort.records.size() << " patients, " << cohort.entries.size()
              << " slides\n";
    return 0;
}

int cmd_partition(const CommonArgs& args) {
    PipelineConfig cfg = load_config(args);
    if (args.seed >= 0) cfg.partition_seed = static_cast<std::uint64_t>(args.seed);
    const auto parted = partition(load_cohort(cfg), cfg.ratios, cfg.partition_seed);
    serialize(parted, cohort_csv(cfg), cohort_manifest(cfg));
    std::map<PartitionTag, std::set<std::string>> counts;
    for (const auto& e : parted.entries) counts[e.partition].insert(e.patient_id);
    std::cout << "partitioned patients: train=" << counts[PartitionTag::Train].size()
              << " dev=" << counts[PartitionTag::Dev].size()
              << " test=" << counts[PartitionTag::Test].size()
              << " external=" << counts[PartitionTag::External].size() << "\n";
    return 0;
}

int cmd_pretrain(const CommonArgs& args) {
    PipelineConfig cfg = load_config(args);
    if (args.seed >= 0) cfg.train_seed = static_cast<std::uint64_t>(args.seed);
    const auto cohort = load_cohort(cfg);
    const auto samples = pipeline::build_slide_samples(cohort, {PartitionTag::Train}, cfg);
    if (samples.empty()) throw Error("no slides in the train partition; run partition first");

    ImageModel model(cfg.encoder, cfg.aggregator, cfg.train_seed);
    TrainOptions opt;
    opt.steps = cfg.pretrain_steps;
    opt.batch = cfg.batch_regions;
    opt.lr = cfg.pretrain_lr;
    opt.seed = cfg.train_seed;
    const auto history = pretrain_masked(model, samples, opt);

    fs::create_directories(cfg.output_dir / "checkpoints");
    fs::create_directories(cfg.output_dir / "reports");
    image_model_checkpoint(model, cfg.echo).save(checkpoint_path(cfg, "pretrain"));
    atomic_write_file(cfg.output_dir / "reports" / "pretrain_loss.csv", loss_csv(history));
    std::cout << "pretrained " << cfg.pretrain_steps << " steps on " << samples.size()
              << " slides; final loss " << (history.empty() ? 0.0 : history.back()) << "\n";
    return 0;
}

int cmd_train_regression(const CommonArgs& args) {
    PipelineConfig cfg = load_config(args);
    if (args.seed >= 0) cfg.train_seed = static_cast<std::uint64_t>(args.seed);
    ImageModel model = image_model_from_checkpoint(load_checkpoint(cfg, "pretrain", "pretrain"));
    const auto cohort = load_cohort(cfg);
    const auto samples = pipeline::build_slide_samples(cohort, {PartitionTag::Train}, cfg);

    TrainOptions opt;
    opt.steps = cfg.regression_steps;
    opt.batch = cfg.batch_slides;
    opt.lr = cfg.finetune_lr;
    opt.head_warmup_steps = cfg.head_warmup_steps;
    opt.head_warmup_lr = cfg.head_warmup_lr;
    opt.seed = cfg.train_seed + 1;
    opt.freeze_encoder = cfg.freeze_encoder;
    const auto history = finetune_regression(model, samples, opt);

    image_model_checkpoint(model, cfg.echo).save(checkpoint_path(cfg, "regression"));
    atomic_write_file(cfg.output_dir / "reports" / "regression_loss.csv", loss_csv(history));
    std::cout << "regression fine-tune done; final loss "
              << (history.empty() ? 0.0 : history.back()) << "\n";
    return 0;
}

int cmd_train_classifier(const CommonArgs& args) {
    PipelineConfig cfg = load_config(args);
    if (args.seed >= 0) cfg.train_seed = static_cast<std::uint64_t>(args.seed);
    // two-phase recipe: the classifier starts from the regression checkpoint
    ImageModel model = image_model_from_checkpoint(load_checkpoint(cfg, "regression", "regression"));
    const auto cohort = load_cohort(cfg);
    const auto samples = pipeline::build_slide_samples(cohort, {PartitionTag::Train}, cfg);

    TrainOptions opt;
    opt.steps = cfg.classifier_steps;
    opt.batch = cfg.batch_slides;
    opt.lr = cfg.finetune_lr;
    opt.head_warmup_steps = cfg.head_warmup_steps;
    opt.head_warmup_lr = cfg.head_warmup_lr;
    opt.seed = cfg.train_seed + 2;
    opt.freeze_encoder = cfg.freeze_encoder;
    const auto history = finetune_classifier(model, samples, opt);

    image_model_checkpoint(model, cfg.echo).save(checkpoint_path(cfg, "classifier"));
    atomic_write_file(cfg.output_dir / "reports" / "classifier_loss.csv", loss_csv(history));
    std::cout << "classifier fine-tune done; final loss "
              << (history.empty() ? 0.0 : history.back()) << "\n";
    return 0;
}

int cmd_train_clinical(const CommonArgs& args) {
    PipelineConfig cfg = load_config(args);
    if (args.seed >= 0) cfg.clinical_seed = static_cast<std::uint64_t>(args.seed);
    const auto cohort = load_cohort(cfg);
    const auto train = pipeline::labeled_records(cohort, PartitionTag::Train);
    const auto dev = pipeline::labeled_records(cohort, PartitionTag::Dev);

    clin::FitOptions opt;
    opt.cv_folds = cfg.cv_folds;
    opt.cv_on_train = cfg.cv_on_train;
    opt.seed = cfg.clinical_seed;
    const auto grid = clin::default_grid();
    const auto model = clin::fit(train, dev, grid, opt);

    Checkpoint cp;
    cp.phase = "clinical";
    cp.config = cfg.echo;
    clin::add_to_checkpoint(cp, model);
    fs::create_directories(cfg.output_dir / "checkpoints");
    fs::create_directories(cfg.output_dir / "reports");
    cp.save(checkpoint_path(cfg, "clinical"));
    atomic_write_file(cfg.output_dir / "reports" / "importance.csv", clin::importance_csv(model));
    std::cout << "clinical model fit: strength=" << model.strength << " penalty="
              << clin::to_string(model.penalty) << " cv_auc=" << model.cv_auc << "\n";
    return 0;
}

int cmd_fuse(const CommonArgs& args) {
    PipelineConfig cfg = load_config(args);
    const ImageModel model = image_model_from_checkpoint(load_checkpoint(cfg, "classifier", "classifier"));
    const auto clinical = clin::from_checkpoint(load_checkpoint(cfg, "clinical", "clinical"));
    const auto cohort = load_cohort(cfg);
    const auto samples = pipeline::build_slide_samples(cohort, {PartitionTag::Dev}, cfg);
    if (samples.empty()) throw Error("no slides in the dev partition");
    const auto slide_scores = pipeline::score_slides(model, samples, cfg.threads);
    const auto scores = pipeline::patient_scores(cohort, slide_scores, &clinical);

    const auto fusion = fuse::fit_fusion(scores.image, scores.clinical, scores.labels, cfg.fusion_grid);
    fuse::save(fusion, cfg.output_dir / "fusion.json");
    std::cout << "fusion fit: w=" << fusion.w << " t_star=" << fusion.t_star
              << " dev_auc=" << fusion.dev_auc << "\n";
    return 0;
}

int cmd_evaluate(const CommonArgs& args) {
    PipelineConfig cfg = load_config(args);
    if (args.seed >= 0) cfg.eval_seed = static_cast<std::uint64_t>(args.seed);
    const ImageModel model = image_model_from_checkpoint(load_checkpoint(cfg, "classifier", "classifier"));
    const auto clinical = clin::from_checkpoint(load_checkpoint(cfg, "clinical", "clinical"));
    const fs::path fusion_path = cfg.output_dir / "fusion.json";
    if (!fs::exists(fusion_path)) throw Error("missing checkpoint: " + fusion_path.string());
    const auto fusion = fuse::load(fusion_path);
    const auto cohort = load_cohort(cfg);

    nlohmann::json report;
    fs::create_directories(cfg.output_dir / "reports");
    const auto run_cohort = [&](const std::string& name, PartitionTag tag) {
        const auto samples = pipeline::build_slide_samples(cohort, {tag}, cfg);
        if (samples.empty()) return false;
        const auto slide_scores = pipeline::score_slides(model, samples, cfg.threads);
        const auto scores = pipeline::patient_scores(cohort, slide_scores, &clinical);
        std::vector<std::pair<std::string, pipeline::ModelEval>> evals;
        report[name] = pipeline::evaluation_report(name, scores, fusion, cfg, &evals);
        std::vector<std::tuple<std::string, std::vector<stats::RocPoint>, double>> curves;
        for (const auto& [model_name, ev] : evals) {
            atomic_write_file(cfg.output_dir / "reports" / ("roc_" + name + "_" + model_name + ".csv"),
                              pipeline::roc_csv(ev.roc));
            curves.emplace_back(model_name, ev.roc, ev.auc);
            std::cout << name << " " << model_name << " auc=" << ev.auc << " (" << ev.ci_lo << "-"
                      << ev.ci_hi << ")\n";
        }
        atomic_write_file(cfg.output_dir / "reports" / ("roc_" + name + ".svg"),
                          pipeline::roc_svg(curves));
        return true;
    };
    run_cohort("internal", PartitionTag::Test);
    run_cohort("external", PartitionTag::External);
    if (report.empty()) throw Error("no test or external slides to evaluate");
    atomic_write_file(cfg.output_dir / "reports" / "report.json", report.dump(2) + "\n");
    return 0;
}

int cmd_predict(const CommonArgs& args, const std::string& slide_id) {
    PipelineConfig cfg = load_config(args);
    const ImageModel model = image_model_from_checkpoint(load_checkpoint(cfg, "classifier", "classifier"));
    const auto cohort = load_cohort(cfg);

    CohortManifest filtered = cohort;
    if (!slide_id.empty()) {
        filtered.entries.clear();
        for (const auto& e : cohort.entries)
            if (e.slide_id == slide_id) filtered.entries.push_back(e);
        if (filtered.entries.empty()) throw Error("unknown slide_id " + slide_id);
    }
    const auto samples = pipeline::build_slide_samples(filtered, {}, cfg);
    const auto slide_scores = pipeline::score_slides(model, samples, cfg.threads);

    std::ostringstream os;
    os.precision(17);
    os << "slide_id,patient_id,probability_high,score_estimate\n";
    for (const auto& s : slide_scores)
        os << s.slide_id << ',' << s.patient_id << ',' << s.probability << ',' << s.score_estimate
           << "\n";
    fs::create_directories(cfg.output_dir / "reports");
    atomic_write_file(cfg.output_dir / "reports" / "predictions.csv", os.str());
    std::cout << "scored " << slide_scores.size() << " slides -> "
              << (cfg.output_dir / "reports" / "predictions.csv").string() << "\n";
    return 0;
}

int cmd_heatmap(const CommonArgs& args, const std::string& slide_id, const std::string& out_path) {
    PipelineConfig cfg = load_config(args);
    const ImageModel model = image_model_from_checkpoint(load_checkpoint(cfg, "classifier", "classifier"));
    const auto cohort = load_cohort(cfg);

    const SlideEntry* entry = nullptr;
    for (const auto& e : cohort.entries)
        if (e.slide_id == slide_id) entry = &e;
    if (!entry) throw Error("unknown slide_id " + slide_id);
    if (entry->bundle_path.extension() == ".csv")
        throw Error("slide " + slide_id + " is a patch-only dataset; no full slide to render");

    CohortManifest one = cohort;
    one.entries = {*entry};
    const auto samples = pipeline::build_slide_samples(one, {}, cfg);
    const SlidePrediction pred = predict_slide(model, samples.at(0));

    const SlideBundle bundle = SlideBundle::open(entry->bundle_path);
    const ImageRGB overlay = pipeline::render_heatmap(bundle, pred.attentions, cfg.encoder.patch_side,
                                                      cfg.heatmap_alpha, cfg.heatmap_max_side);
    fs::path out = out_path.empty()
                       ? cfg.output_dir / "heatmaps" / (slide_id + ".png")
                       : fs::path(out_path);
    fs::create_directories(out.parent_path().empty() ? "." : out.parent_path());
    write_png(out, overlay);
    std::cout << "heatmap for " << slide_id << " (p_high=" << pred.probability_high << ") -> "
              << out.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-branch breast-cancer recurrence-risk pipeline"};
    app.set_version_flag("--version", std::string(pipeline::kVersion));
    app.require_subcommand(1);

    std::map<std::string, CommonArgs> common;
    std::string predict_slide_id, heatmap_slide_id, heatmap_out;

    for (const char* name : {"synth-gen", "ingest", "partition", "pretrain", "train-regression",
                             "train-classifier", "train-clinical", "fuse", "evaluate", "predict",
                             "heatmap"}) {
        CLI::App* sub = app.add_subcommand(name);
        add_common(sub, common[name]);
        if (std::string(name) == "predict")
            sub->add_option("--slide", predict_slide_id, "score a single slide");
        if (std::string(name) == "heatmap") {
            sub->add_option("--slide", heatmap_slide_id, "slide to render")->required();
            sub->add_option("--heatmap-out", heatmap_out, "output PNG path");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        std::cerr << "run with --help for usage\n";
        return 2;
    }

    try {
        if (app.got_subcommand("synth-gen")) return cmd_synth_gen(common["synth-gen"]);
        if (app.got_subcommand("ingest")) return cmd_ingest(common["ingest"]);
        if (app.got_subcommand("partition")) return cmd_partition(common["partition"]);
        if (app.got_subcommand("pretrain")) return cmd_pretrain(common["pretrain"]);
        if (app.got_subcommand("train-regression"))
            return cmd_train_regression(common["train-regression"]);
        if (app.got_subcommand("train-classifier"))
            return cmd_train_classifier(common["train-classifier"]);
        if (app.got_subcommand("train-clinical")) return cmd_train_clinical(common["train-clinical"]);
        if (app.got_subcommand("fuse")) return cmd_fuse(common["fuse"]);
        if (app.got_subcommand("evaluate")) return cmd_evaluate(common["evaluate"]);
        if (app.got_subcommand("predict")) return cmd_predict(common["predict"], predict_slide_id);
        if (app.got_subcommand("heatmap"))
            return cmd_heatmap(common["heatmap"], heatmap_slide_id, heatmap_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
