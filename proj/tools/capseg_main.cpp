// Command-line front end: dataset generation, pretraining, training,
// evaluation, gradient checking, and the robustness/sensitivity studies.

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "capseg/commands.hpp"
#include "capseg/data.hpp"

using namespace capseg;

namespace {

struct ConfigCli {
    std::string config_path;
    std::map<std::string, std::string> overrides;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "config file (key = value lines)");
        cmd->add_option("--set", override_pairs,
                        "config override KEY=VALUE (repeatable, wins over the file)");
        add_shortcut(cmd, "--seed", "seed");
        add_shortcut(cmd, "--dataset", "dataset");
        add_shortcut(cmd, "--arch", "arch");
        add_shortcut(cmd, "--iters", "max_iterations");
        add_shortcut(cmd, "--lr", "learning_rate");
        add_shortcut(cmd, "--deterministic", "deterministic");
    }

    TrainConfig resolve() {
        TrainConfig c = config_path.empty() ? TrainConfig{} : parse_config_file(config_path);
        for (const auto& kv : override_pairs) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw ConfigError("--set expects KEY=VALUE, got '" + kv + "'");
            apply_config_entry(c, kv.substr(0, eq), kv.substr(eq + 1), "--set");
        }
        for (const auto& [key, value] : overrides)
            apply_config_entry(c, key, value, "--" + key);
        return c;
    }

private:
    void add_shortcut(CLI::App* cmd, const std::string& flag, const std::string& key) {
        auto holder = std::make_shared<std::string>();
        cmd->add_option_function<std::string>(
            flag, [this, key, holder](const std::string& v) { overrides[key] = v; },
            "overrides config key '" + key + "'");
    }

    std::vector<std::string> override_pairs;
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"capsule-network segmentation engine"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    std::string gen_kind = "shapes2d", gen_out = "data";
    std::uint64_t gen_seed = 0;
    int gen_count = 100, gen_classes = 2;
    std::int64_t gen_size = 64;
    gen->add_option("--kind", gen_kind, "shapes2d | blobs3d");
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--count", gen_count, "number of samples");
    gen->add_option("--size", gen_size, "per-axis spatial extent");
    gen->add_option("--classes", gen_classes, "label classes (2 or 3)");
    gen->add_option("--out", gen_out, "output directory")->required();

    // train
    auto* train = app.add_subcommand("train", "train a segmentation model");
    ConfigCli train_cfg;
    std::string train_out = "run", train_resume;
    train_cfg.attach(train);
    train->add_option("--out", train_out, "output directory");
    train->add_option("--resume", train_resume, "checkpoint to resume from");

    // pretrain
    auto* pretrain = app.add_subcommand("pretrain", "pretext-task pretraining of the extractor");
    ConfigCli pre_cfg;
    std::string pre_out = "pretrain";
    pre_cfg.attach(pretrain);
    pretrain->add_option("--out", pre_out, "output directory");

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    ConfigCli eval_cfg;
    std::string eval_ckpt, eval_data, eval_out = "eval";
    eval_cfg.attach(eval);
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--out", eval_out, "output directory");

    // gradcheck
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient fidelity report");
    std::uint64_t gc_seed = 7;
    double gc_eps = 1e-5, gc_tol = 1e-4;
    gc->add_option("--seed", gc_seed, "instance seed");
    gc->add_option("--eps", gc_eps, "finite-difference step scale");
    gc->add_option("--tolerance", gc_tol, "max relative error allowed");

    // robustness
    auto* rob = app.add_subcommand("robustness", "rotation robustness study (3d models)");
    ConfigCli rob_cfg;
    std::string rob_ckpt, rob_data, rob_out = "robustness";
    std::vector<int> rob_angles{0, 15, 30, 45, 60, 75, 90};
    std::vector<std::string> rob_axes{"x", "y", "z", "all"};
    rob_cfg.attach(rob);
    rob->add_option("--checkpoint", rob_ckpt, "checkpoint path")->required();
    rob->add_option("--data", rob_data, "dataset directory")->required();
    rob->add_option("--angles", rob_angles, "rotation angles in degrees");
    rob->add_option("--axes", rob_axes, "rotation axes (x y z all)");
    rob->add_option("--out", rob_out, "output directory");

    // sensitivity
    auto* sen = app.add_subcommand("sensitivity", "single-pixel shift sensitivity study");
    ConfigCli sen_cfg;
    std::string sen_ckpt, sen_data, sen_out = "sensitivity";
    sen_cfg.attach(sen);
    sen->add_option("--checkpoint", sen_ckpt, "checkpoint path")->required();
    sen->add_option("--data", sen_data, "dataset directory")->required();
    sen->add_option("--out", sen_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            auto res = cmd_gen_data(gen_kind, gen_seed, gen_count, gen_size, gen_classes, gen_out);
            std::printf("wrote %d samples to %s\n", res.count, res.dir.c_str());
        } else if (train->parsed()) {
            TrainConfig c = train_cfg.resolve();
            std::printf("resolved config:\n%s", c.canonical_text().c_str());
            auto res = cmd_train(c, train_out, train_resume);
            std::printf("trained %lld iterations, validation dice %.4f (baseline %.4f)\n",
                        static_cast<long long>(res.iterations), res.final_val_dice,
                        res.baseline_dice);
            std::printf("checkpoint: %s\nmetrics: %s\n", res.checkpoint_path.c_str(),
                        res.csv_path.c_str());
        } else if (pretrain->parsed()) {
            TrainConfig c = pre_cfg.resolve();
            std::printf("resolved config:\n%s", c.canonical_text().c_str());
            auto res = cmd_pretrain(c, pre_out);
            std::printf("pretrained %lld steps\nextractor checkpoint: %s\nmetrics: %s\n",
                        static_cast<long long>(res.iterations), res.checkpoint_path.c_str(),
                        res.csv_path.c_str());
        } else if (eval->parsed()) {
            auto res = cmd_eval(eval_cfg.resolve(), eval_ckpt, eval_data, eval_out);
            std::printf("%s", res.csv_text.c_str());
            std::printf("written: %s\n", res.csv_path.c_str());
        } else if (gc->parsed()) {
            auto report = cmd_gradcheck(gc_seed, gc_eps, gc_tol);
            std::printf("%s", report.table().c_str());
            return report.passed() ? 0 : 1;
        } else if (rob->parsed()) {
            auto res =
                cmd_robustness(rob_cfg.resolve(), rob_ckpt, rob_data, rob_angles, rob_axes, rob_out);
            std::printf("%s", res.csv_text.c_str());
            std::printf("written: %s\n", res.csv_path.c_str());
        } else if (sen->parsed()) {
            auto res = cmd_sensitivity(sen_cfg.resolve(), sen_ckpt, sen_data, sen_out);
            std::printf("%s", res.csv_text.c_str());
            std::printf("written: %s\n", res.csv_path.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
