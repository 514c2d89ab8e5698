#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "capseg/commands.hpp"
#include "capseg/data.hpp"

using namespace capseg;

namespace {

const std::string kWork = "/tmp/capseg_harness";

struct WorkDir {
    WorkDir() {
        std::filesystem::remove_all(kWork);
        std::filesystem::create_directories(kWork);
    }
};

std::string path(const std::string& rel) { return kWork + "/" + rel; }

TrainConfig tiny_config(const std::string& dataset) {
    TrainConfig c;
    c.arch = "segcaps2d";
    c.dataset = dataset;
    c.seed = 5;
    c.classes = 2;
    c.input_size = 24;
    c.max_iterations = 12;
    c.early_stop_iterations = 5000;
    c.eval_interval = 6;
    c.checkpoint_interval = 6;
    c.patience_iterations = 500;
    return c;
}

void ensure_dataset() {
    static bool done = false;
    if (done) return;
    cmd_gen_data("shapes2d", 77, 10, 24, 2, path("ds"));
    done = true;
}

}  // namespace

TEST_CASE("config: file parsing, defaults, overrides, errors") {
    WorkDir wd;
    {
        std::ofstream f(path("empty.cfg"));
        f << "# nothing but a comment\n\n";
    }
    TrainConfig c = parse_config_file(path("empty.cfg"));
    CHECK(c.learning_rate == 0.0001);
    CHECK(c.lr_decay_factor == 0.05);
    CHECK(c.patience_iterations == 500);
    CHECK(c.early_stop_iterations == 5000);
    CHECK(c.margin_m_plus == 0.9);
    CHECK(c.gamma == 0.001);
    CHECK(c.deterministic == true);

    {
        std::ofstream f(path("good.cfg"));
        f << "learning_rate = 0.002  # tweaked\n";
        f << "arch = ucaps3d\n";
        f << "seed = 9\n";
    }
    TrainConfig g = parse_config_file(path("good.cfg"));
    CHECK(g.learning_rate == 0.002);
    CHECK(g.arch == "ucaps3d");
    CHECK(g.seed == 9);

    // a flag-style override wins over the file value
    apply_config_entry(g, "learning_rate", "0.5", "--lr");
    CHECK(g.learning_rate == 0.5);

    {
        std::ofstream f(path("bad_key.cfg"));
        f << "foo = 1\n";
    }
    try {
        parse_config_file(path("bad_key.cfg"));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("foo") != std::string::npos);
        CHECK(std::string(e.what()).find(":1") != std::string::npos);
    }

    {
        std::ofstream f(path("bad_type.cfg"));
        f << "\n\nmax_iterations = soon\n";
    }
    try {
        parse_config_file(path("bad_type.cfg"));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("max_iterations") != std::string::npos);
        CHECK(std::string(e.what()).find(":3") != std::string::npos);
    }

    // canonical round trip: serialize then reparse
    {
        std::ofstream f(path("canon.cfg"));
        f << g.canonical_text();
    }
    TrainConfig back = parse_config_file(path("canon.cfg"));
    CHECK(back.canonical_text() == g.canonical_text());
}

TEST_CASE("zero-iteration training: checkpoint equals initialization, empty metrics body") {
    ensure_dataset();
    TrainConfig c = tiny_config(path("ds"));
    c.max_iterations = 0;
    auto res = cmd_train(c, path("run0"));
    CHECK(res.iterations == 0);
    const std::string csv = read_text_file(res.csv_path);
    CHECK(csv == std::string(kMetricsCsvHeader) + "\n");

    // checkpoint holds the f32-rounded seeded initialization
    NetworkSpec spec = build_network(c);
    ModelParams init = init_params(spec, c.seed);
    Checkpoint ckpt = checkpoint_load(res.checkpoint_path);
    checkpoint_apply(ckpt, init, nullptr, c.architecture_hash());
    ModelParams fresh = init_params(spec, c.seed);
    for (const auto& [name, t] : fresh.all()) {
        const auto loaded = init.at(name).to_vec();
        const auto original = t.to_vec();
        for (size_t i = 0; i < original.size(); ++i)
            CHECK(loaded[i] == static_cast<double>(static_cast<float>(original[i])));
    }
}

TEST_CASE("determinism: identical config and seed give identical bytes") {
    ensure_dataset();
    TrainConfig c = tiny_config(path("ds"));
    auto r1 = cmd_train(c, path("det1"));
    auto r2 = cmd_train(c, path("det2"));
    CHECK(read_text_file(r1.csv_path) == read_text_file(r2.csv_path));
    CHECK(read_text_file(r1.checkpoint_path) == read_text_file(r2.checkpoint_path));

    TrainConfig c2 = c;
    c2.seed = 6;
    auto r3 = cmd_train(c2, path("det3"));
    CHECK(read_text_file(r1.checkpoint_path) != read_text_file(r3.checkpoint_path));
}

TEST_CASE("resume: training through a checkpoint matches an uninterrupted run bitwise") {
    ensure_dataset();
    TrainConfig c = tiny_config(path("ds"));
    auto full = cmd_train(c, path("resume_full"));
    auto resumed = cmd_train(c, path("resume_cont"), path("resume_full") + "/checkpoint_000006.cpsc");
    CHECK(resumed.iterations == 12);
    CHECK(read_text_file(full.checkpoint_path) == read_text_file(resumed.checkpoint_path));
}

TEST_CASE("checkpoint: save-load-save identity, tampering, forward equality") {
    ensure_dataset();
    TrainConfig c = tiny_config(path("ds"));
    c.max_iterations = 4;
    c.eval_interval = 4;
    auto res = cmd_train(c, path("ckpt"));

    // save -> load -> save byte identity
    NetworkSpec spec = build_network(c);
    ModelParams params = init_params(spec, c.seed);
    AdamState opt;
    Checkpoint ckpt = checkpoint_load(res.checkpoint_path);
    const std::int64_t iter = checkpoint_apply(ckpt, params, &opt, c.architecture_hash());
    CHECK(iter == 4);
    checkpoint_save(path("ckpt/resaved.cpsc"), params, opt, iter, c.architecture_hash());
    CHECK(read_text_file(res.checkpoint_path) == read_text_file(path("ckpt/resaved.cpsc")));

    // forward after load matches a forward on the saved (rounded) weights
    SegDataset ds = load_dataset(path("ds"));
    ModelParams live = init_params(spec, c.seed);
    checkpoint_apply(ckpt, live, nullptr, c.architecture_hash());
    ForwardResult f1 = forward_segment(spec, params, ds.samples[0].image, nullptr, false, false);
    ForwardResult f2 = forward_segment(spec, live, ds.samples[0].image, nullptr, false, false);
    CHECK(f1.probs.to_vec() == f2.probs.to_vec());

    // tampered shape -> manifest mismatch listing the entry
    Checkpoint bad = ckpt;
    bad.params[0].shape[0] += 1;
    try {
        checkpoint_apply(bad, params, nullptr, c.architecture_hash());
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("manifest mismatch") != std::string::npos);
        CHECK(std::string(e.what()).find(bad.params[0].name) != std::string::npos);
    }

    // wrong architecture hash refuses to load
    CHECK_THROWS_AS(checkpoint_apply(ckpt, params, nullptr, c.architecture_hash() + 1),
                    ContractError);

    // corrupted bytes on disk -> format error, not a crash
    {
        std::string bytes = read_text_file(res.checkpoint_path);
        bytes.resize(bytes.size() / 3);
        write_text_file(path("ckpt/truncated.cpsc"), bytes);
    }
    CHECK_THROWS_AS(checkpoint_load(path("ckpt/truncated.cpsc")), FormatError);
}

TEST_CASE("pretrain: identity-only transforms are a fixed point; loss decreases") {
    ensure_dataset();
    TrainConfig c = tiny_config(path("ds"));
    c.max_iterations = 400;
    c.eval_interval = 100;
    c.checkpoint_interval = 0;
    NetworkSpec spec = build_network(c);

    // identity-only: loss exactly zero, parameters bitwise unchanged
    {
        SegDataset ds = load_dataset(path("ds"));
        ModelParams params = init_params(spec, c.seed);
        std::vector<double> before = params.at("extractor.conv1.w").to_vec();
        AdamState opt;
        opt.learning_rate = c.learning_rate;
        std::vector<std::string> rows;
        pretrain_loop(spec, params, opt, ds, {Transform{}}, c, 0,
                      [&](const std::string& row) { rows.push_back(row); },
                      [](std::int64_t) {});
        CHECK(params.at("extractor.conv1.w").to_vec() == before);
        for (const auto& row : rows)
            CHECK(row.find(",train,0,0,0,0,0") != std::string::npos);
    }

    // the real pool: pretext loss falls and the run is deterministic
    auto p1 = cmd_pretrain(c, path("pre1"));
    auto p2 = cmd_pretrain(c, path("pre2"));
    CHECK(read_text_file(p1.checkpoint_path) == read_text_file(p2.checkpoint_path));
    const std::string csv = read_text_file(p1.csv_path);
    std::vector<double> losses;
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        const auto a = line.find(',');
        const auto b = line.find(',', a + 1);
        const auto d = line.find(',', b + 1);
        losses.push_back(std::stod(line.substr(b + 1, d - b - 1)));
    }
    REQUIRE(losses.size() >= 2);
    CHECK(losses.back() < losses.front());

    // fine-tuning accepts the pretrained extractor
    TrainConfig ft = tiny_config(path("ds"));
    ft.max_iterations = 2;
    ft.eval_interval = 2;
    ft.init_extractor = p1.checkpoint_path;
    auto res = cmd_train(ft, path("ft"));
    CHECK(res.iterations == 2);
}

TEST_CASE("cmd_eval: csv schema and class-count mismatch") {
    ensure_dataset();
    TrainConfig c = tiny_config(path("ds"));
    c.max_iterations = 4;
    c.eval_interval = 4;
    auto res = cmd_train(c, path("eval_run"));

    auto ev = cmd_eval(c, res.checkpoint_path, path("ds"), path("eval_out"));
    const std::string& csv = ev.csv_text;
    CHECK(csv.rfind("class,recall,precision,dice\n", 0) == 0);
    CHECK(csv.find("\nmean,") != std::string::npos);
    CHECK(ev.metrics.per_class.size() == 2);

    TrainConfig wrong = c;
    wrong.classes = 3;
    CHECK_THROWS_AS(cmd_eval(wrong, res.checkpoint_path, path("ds"), path("eval_bad")),
                    ContractError);
}

TEST_CASE("cmd_robustness: row layout and angle-0 equivalence with eval") {
    cmd_gen_data("blobs3d", 3, 2, 16, 2, path("ds3d"));
    TrainConfig c;
    c.arch = "ucaps3d";
    c.dataset = path("ds3d");
    c.seed = 2;
    c.input_size = 16;
    c.max_iterations = 0;
    c.eval_interval = 4;
    auto trained = cmd_train(c, path("rob_run"));

    auto rob = cmd_robustness(c, trained.checkpoint_path, path("ds3d"), {0, 90}, {"z", "all"},
                              path("rob_out"));
    REQUIRE(rob.rows.size() == 4);  // |axes| x |angles|
    CHECK(rob.rows[0].rfind("z,0,", 0) == 0);
    CHECK(rob.rows[2].rfind("all,0,", 0) == 0);

    auto ev = cmd_eval(c, trained.checkpoint_path, path("ds3d"), path("rob_eval"));
    const std::string dice = fmt_csv(ev.metrics.mean_dice);
    CHECK(rob.rows[0] == "z,0," + dice);
    CHECK(rob.rows[2] == "all,0," + dice);

    // a 2d model refuses the rotation study
    ensure_dataset();
    TrainConfig c2d = tiny_config(path("ds"));
    c2d.max_iterations = 0;
    auto run2d = cmd_train(c2d, path("rob2d"));
    CHECK_THROWS_AS(cmd_robustness(c2d, run2d.checkpoint_path, path("ds"), {0}, {"z"},
                                   path("rob2d_out")),
                    UnsupportedError);
}

TEST_CASE("cmd_sensitivity: schema and ranges") {
    ensure_dataset();
    TrainConfig c = tiny_config(path("ds"));
    c.max_iterations = 0;
    auto trained = cmd_train(c, path("sen_run"));
    auto sen = cmd_sensitivity(c, trained.checkpoint_path, path("ds"), path("sen_out"));
    CHECK(sen.csv_text.rfind("sample,p_label_change,mean_abs_change\n", 0) == 0);
    CHECK(sen.csv_text.find("\nmean,") != std::string::npos);
    CHECK(sen.mean.p_label_change >= 0.0);
    CHECK(sen.mean.p_label_change <= 1.0);
    CHECK(sen.mean.mean_abs_change >= 0.0);
}

TEST_CASE("cmd_gradcheck: tiny capsule network passes at 1e-4") {
    auto report = cmd_gradcheck(7, 1e-5, 1e-4);
    CHECK(report.finite);
    CHECK(report.passed());
}
