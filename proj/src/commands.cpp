#include "capseg/commands.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "capseg/capsule.hpp"
#include "capseg/data.hpp"
#include "capseg/losses.hpp"
#include "capseg/rng.hpp"

namespace capseg {

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw FormatError("cannot open '" + path + "' for writing", 0);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open '" + path + "'", 0);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

GenDataResult cmd_gen_data(const std::string& kind, std::uint64_t seed, int count,
                           std::int64_t size, int classes, const std::string& out_dir) {
    SegDataset ds;
    if (kind == "shapes2d")
        ds = gen_shapes_2d(seed, count, size, classes);
    else if (kind == "blobs3d")
        ds = gen_blobs_3d(seed, count, size, classes);
    else
        throw ConfigError("unknown dataset kind '" + kind + "' (expected shapes2d or blobs3d)");
    save_dataset(ds, out_dir);
    return {out_dir, static_cast<int>(ds.samples.size())};
}

namespace {

void require_dataset_matches(const SegDataset& ds, const TrainConfig& config,
                             const NetworkSpec& spec) {
    check_contract(ds.classes <= config.classes,
                   "dataset uses " + std::to_string(ds.classes) + " classes but config says " +
                       std::to_string(config.classes));
    for (const auto& s : ds.samples) {
        check_shape(s.image.shape() == spec.input_extents,
                    "dataset sample " + shape_str(s.image.shape()) +
                        " does not match network input " + shape_str(spec.input_extents));
    }
}

std::string checkpoint_name(std::int64_t iteration) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "checkpoint_%06lld.cpsc",
                  static_cast<long long>(iteration));
    return buf;
}

}  // namespace

TrainCmdResult cmd_train(const TrainConfig& config, const std::string& out_dir,
                         const std::string& resume_checkpoint) {
    config.validate();
    check_contract(!config.dataset.empty(), "cmd_train: config.dataset is required");
    std::filesystem::create_directories(out_dir);

    SegDataset full = load_dataset(config.dataset);
    NetworkSpec spec = build_network(config);
    require_dataset_matches(full, config, spec);

    auto [train, val] = config.folds > 1
                            ? split_fold(full, config.folds, 0, config.seed)
                            : split_train_val(full, config.val_fraction, config.seed);

    ModelParams params = init_params(spec, config.seed);
    AdamState opt;
    opt.learning_rate = config.learning_rate;
    std::int64_t start_iteration = 0;

    if (!resume_checkpoint.empty()) {
        Checkpoint ckpt = checkpoint_load(resume_checkpoint);
        start_iteration = checkpoint_apply(ckpt, params, &opt, config.architecture_hash());
    } else if (!config.init_extractor.empty()) {
        Checkpoint ckpt = checkpoint_load(config.init_extractor);
        const auto applied = checkpoint_apply_subset(ckpt, params);
        check_contract(!applied.empty(),
                       "init_extractor checkpoint shares no parameters with this network");
    }

    std::ostringstream csv;
    csv << kMetricsCsvHeader << "\n";
    const std::string final_path = out_dir + "/checkpoint_final.cpsc";
    auto hook = [&](std::int64_t iteration) {
        checkpoint_save(out_dir + "/" + checkpoint_name(iteration), params, opt, iteration,
                        config.architecture_hash());
    };

    TrainResult res =
        train_loop(spec, params, opt, train, val, config, start_iteration,
                   [&](const std::string& row) { csv << row << "\n"; }, hook);
    checkpoint_save(final_path, params, opt, res.iterations, config.architecture_hash());

    const std::string csv_path = out_dir + "/metrics.csv";
    write_text_file(csv_path, csv.str());
    write_text_file(out_dir + "/config_resolved.txt", config.canonical_text());

    // all-background reference on the validation split
    std::vector<SegMetrics> baseline;
    for (const auto& s : val.samples)
        baseline.push_back(
            seg_metrics(all_background(s.mask.shape), s.mask, spec.classes));

    TrainCmdResult out;
    out.checkpoint_path = final_path;
    out.csv_path = csv_path;
    out.iterations = res.iterations;
    out.final_val_dice = res.final_val_dice;
    out.baseline_dice = average_metrics(baseline).mean_dice;
    return out;
}

TrainCmdResult cmd_pretrain(const TrainConfig& config, const std::string& out_dir) {
    config.validate();
    check_contract(!config.dataset.empty(), "cmd_pretrain: config.dataset is required");
    std::filesystem::create_directories(out_dir);

    SegDataset ds = load_dataset(config.dataset);
    NetworkSpec spec = build_network(config);
    require_dataset_matches(ds, config, spec);

    ModelParams params = init_params(spec, config.seed);
    AdamState opt;
    opt.learning_rate = config.learning_rate;

    std::ostringstream csv;
    csv << kMetricsCsvHeader << "\n";

    // the pretrain checkpoint stores extractor tensors only; the copies share
    // storage with the live parameters, so they track training
    ModelParams extractor;
    for (const auto& name : extractor_param_names(spec))
        extractor.add(name, params.at(name), true);

    TrainResult res = pretrain_loop(spec, params, opt, ds, transform_pool(spec.input_extents[0]),
                                    config, 0,
                                    [&](const std::string& row) { csv << row << "\n"; },
                                    [](std::int64_t) {});
    const std::string final_path = out_dir + "/extractor_final.cpsc";
    checkpoint_save(final_path, extractor, opt, res.iterations, config.architecture_hash());

    const std::string csv_path = out_dir + "/pretrain_metrics.csv";
    write_text_file(csv_path, csv.str());

    TrainCmdResult out;
    out.checkpoint_path = final_path;
    out.csv_path = csv_path;
    out.iterations = res.iterations;
    return out;
}

namespace {

struct LoadedModel {
    NetworkSpec spec;
    ModelParams params;
};

LoadedModel load_model(const TrainConfig& config, const std::string& checkpoint_path) {
    LoadedModel m{build_network(config), {}};
    m.params = init_params(m.spec, config.seed);
    Checkpoint ckpt = checkpoint_load(checkpoint_path);
    checkpoint_apply(ckpt, m.params, nullptr, config.architecture_hash());
    return m;
}

std::string eval_csv(const SegMetrics& metrics) {
    std::ostringstream os;
    os << "class,recall,precision,dice\n";
    for (size_t c = 0; c < metrics.per_class.size(); ++c)
        os << c << "," << fmt_csv(metrics.per_class[c].recall) << ","
           << fmt_csv(metrics.per_class[c].precision) << "," << fmt_csv(metrics.per_class[c].dice)
           << "\n";
    os << "mean," << fmt_csv(metrics.mean_recall) << "," << fmt_csv(metrics.mean_precision) << ","
       << fmt_csv(metrics.mean_dice) << "\n";
    return os.str();
}

SegMetrics dataset_metrics(const NetworkSpec& spec, ModelParams& params, const SegDataset& ds,
                           bool multi_segcaps) {
    std::vector<SegMetrics> per_sample;
    for (const auto& s : ds.samples) {
        ForwardResult fwd = forward_segment(spec, params, s.image, nullptr, false, false);
        per_sample.push_back(seg_metrics(fwd.predicted(multi_segcaps), s.mask, spec.classes));
    }
    return average_metrics(per_sample);
}

}  // namespace

EvalCmdResult cmd_eval(const TrainConfig& config, const std::string& checkpoint_path,
                       const std::string& dataset_dir, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    LoadedModel m = load_model(config, checkpoint_path);
    SegDataset ds = load_dataset(dataset_dir);
    require_dataset_matches(ds, config, m.spec);

    EvalCmdResult out;
    out.metrics = dataset_metrics(m.spec, m.params, ds, m.spec.multi_segcaps);
    out.csv_text = eval_csv(out.metrics);
    out.csv_path = out_dir + "/eval.csv";
    write_text_file(out.csv_path, out.csv_text);
    return out;
}

RobustnessCmdResult cmd_robustness(const TrainConfig& config, const std::string& checkpoint_path,
                                   const std::string& dataset_dir,
                                   const std::vector<int>& angles,
                                   const std::vector<std::string>& axes,
                                   const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    LoadedModel m = load_model(config, checkpoint_path);
    if (m.spec.spatial_rank != 3)
        throw UnsupportedError("cmd_robustness requires a volumetric model");
    SegDataset ds = load_dataset(dataset_dir);
    require_dataset_matches(ds, config, m.spec);

    RobustnessCmdResult out;
    std::ostringstream csv;
    csv << "axis,angle,dice_mean\n";
    for (const auto& axis_name : axes) {
        const RotationAxis axis = rotation_axis_from_string(axis_name);
        for (int angle : angles) {
            std::vector<SegMetrics> per_sample;
            for (const auto& s : ds.samples) {
                Tensor rotated = rotate_image_3d(s.image, angle, axis, false);
                ForwardResult fwd = forward_segment(m.spec, m.params, rotated, nullptr, false,
                                                    false);
                LabelMap pred = fwd.predicted(m.spec.multi_segcaps);
                LabelMap pred_back = rotate_labels_3d(pred, angle, axis, /*inverse=*/true);
                per_sample.push_back(seg_metrics(pred_back, s.mask, m.spec.classes));
            }
            std::ostringstream row;
            row << axis_name << "," << angle << ","
                << fmt_csv(average_metrics(per_sample).mean_dice);
            out.rows.push_back(row.str());
            csv << row.str() << "\n";
        }
    }
    out.csv_text = csv.str();
    out.csv_path = out_dir + "/robustness.csv";
    write_text_file(out.csv_path, out.csv_text);
    return out;
}

SensitivityCmdResult cmd_sensitivity(const TrainConfig& config,
                                     const std::string& checkpoint_path,
                                     const std::string& dataset_dir,
                                     const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    LoadedModel m = load_model(config, checkpoint_path);
    SegDataset ds = load_dataset(dataset_dir);
    require_dataset_matches(ds, config, m.spec);

    auto model = [&](const Tensor& image) {
        return forward_segment(m.spec, m.params, image, nullptr, false, false).probs;
    };

    SensitivityCmdResult out;
    std::ostringstream csv;
    csv << "sample,p_label_change,mean_abs_change\n";
    double p_sum = 0.0, m_sum = 0.0;
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        SensitivityReport r = shift_sensitivity(model, ds.samples[i].image, 1);
        csv << i << "," << fmt_csv(r.p_label_change) << "," << fmt_csv(r.mean_abs_change) << "\n";
        p_sum += r.p_label_change;
        m_sum += r.mean_abs_change;
    }
    const auto n = static_cast<double>(ds.samples.size());
    out.mean = SensitivityReport{p_sum / n, m_sum / n};
    csv << "mean," << fmt_csv(out.mean.p_label_change) << "," << fmt_csv(out.mean.mean_abs_change)
        << "\n";
    out.csv_text = csv.str();
    out.csv_path = out_dir + "/sensitivity.csv";
    write_text_file(out.csv_path, out.csv_text);
    return out;
}

GradcheckReport cmd_gradcheck(std::uint64_t seed, double eps, double tolerance) {
    Rng rng(seed);
    const std::int64_t dim = 4;
    Tensor input = Tensor::uniform({8, 8, 1, dim}, rng, -0.8, 0.8);

    CapsuleLayerParams l1;
    l1.transform = Tensor::uniform({9, 1, dim, 2, dim}, rng, -0.5, 0.5, true);
    l1.kernel = 3;
    l1.stride = 2;
    l1.padding = 1;
    l1.iterations = 3;

    CapsuleLayerParams l2;
    l2.transform = Tensor::uniform({9, 2, dim, 2, dim}, rng, -0.5, 0.5, true);
    l2.kernel = 3;
    l2.stride = 1;
    l2.padding = 1;
    l2.iterations = 3;

    // fixed synthetic target for the margin head
    LabelMap target;
    target.shape = {4, 4};
    target.labels.resize(16);
    for (auto& l : target.labels) l = static_cast<std::uint8_t>(rng.below(2));
    Tensor target_onehot = one_hot(target, 2);

    auto f = [&]() {
        CapsuleGrid g{input, 2};
        CapsuleGrid h1 = capsule_conv_nd(g, l1, 2);
        CapsuleGrid h2 = capsule_conv_nd(h1, l2, 2);
        Tensor lengths = capsule_lengths(h2);
        Tensor margin = margin_loss(lengths, target_onehot);
        return add(margin, mean_all(square(h2.values)));
    };
    return gradcheck(f, {{"layer1.M", l1.transform}, {"layer2.M", l2.transform}}, eps, tolerance);
}

}  // namespace capseg
