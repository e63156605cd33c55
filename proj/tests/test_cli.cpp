#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <json.hpp>

#include "bevmine/scenes.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& args) {
    const std::string cmd = std::string(BEVMINE_BINARY) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<json> json_lines(const fs::path& p) {
    std::vector<json> out;
    std::ifstream in(p);
    std::string line;
    while (std::getline(in, line)) {
        out.push_back(json::parse(line));
    }
    return out;
}

struct Workspace {
    fs::path dir;
    fs::path config;

    Workspace() {
        dir = fs::temp_directory_path() / "bevmine_cli_test";
        fs::remove_all(dir);
        fs::create_directories(dir);
        config = dir / "tiny.toml";
        std::ofstream(config) << "[scenes]\nseed = 5\nmin_objects = 6\nmax_objects = 9\npoints_per_object = 60.0\n"
                                 "[data]\ntrain_scenes = 6\nval_scenes = 4\n"
                                 "[trainer]\ni_max = 20\npretrain_iterations = 20\nbatch_size = 2\n";
    }
    ~Workspace() { fs::remove_all(dir); }

    std::string q(const fs::path& p) const { return "'" + p.string() + "'"; }
    std::string cfg() const { return "--config " + q(config); }
};

}  // namespace

TEST_CASE("usage errors exit with 1") {
    Workspace w;
    CHECK(run("") == 1);
    CHECK(run("--help") == 0);
    CHECK(run("frobnicate") == 1);
    CHECK(run("gen-data") == 1);
    CHECK(run("train " + w.cfg() + " --data " + w.q(w.dir / "x.jsonl")) == 1);
    CHECK(run("eval " + w.cfg()) == 1);

    const fs::path bad = w.dir / "bad.toml";
    std::ofstream(bad) << "[trainer]\nnot_a_key = 3\n";
    CHECK(run("gen-data --config " + w.q(bad) + " --out " + w.q(w.dir / "d")) == 1);
    CHECK(run("gen-data --config " + w.q(w.dir / "missing.toml")) == 1);
}

TEST_CASE("data errors exit with 2") {
    Workspace w;
    const fs::path missing = w.dir / "nope.jsonl";
    CHECK(run("train " + w.cfg() + " --pretrain-static --data " + w.q(missing) + " --run-dir " + w.q(w.dir / "r")) == 2);
    const fs::path broken = w.dir / "broken.jsonl";
    std::ofstream(broken) << "{\"scene_id\": \"a\"\n";
    CHECK(run("eval " + w.cfg() + " --oracle-gt --data " + w.q(broken) + " --out " + w.q(w.dir / "r.json")) == 2);
    const fs::path empty = w.dir / "empty.jsonl";
    std::ofstream(empty).close();
    CHECK(run("eval " + w.cfg() + " --oracle-gt --data " + w.q(empty) + " --out " + w.q(w.dir / "r.json")) == 2);
}

TEST_CASE("numeric blow-up exits with 3") {
    Workspace w;
    const fs::path cfg = w.dir / "wild.toml";
    std::ofstream(cfg) << "[data]\ntrain_scenes = 4\nval_scenes = 0\n[trainer]\ni_max = 20\npretrain_iterations = 20\n"
                          "[optimizer]\nlr = 1e308\n";
    REQUIRE(run("gen-data --config " + w.q(cfg) + " --out " + w.q(w.dir / "d")) == 0);
    CHECK(run("train --config " + w.q(cfg) + " --pretrain-static --data " + w.q(w.dir / "d" / "train.jsonl") +
              " --run-dir " + w.q(w.dir / "r")) == 3);
}

TEST_CASE("gen-data writes a reproducible corpus and manifest") {
    Workspace w;
    const fs::path a = w.dir / "a";
    const fs::path b = w.dir / "b";
    REQUIRE(run("gen-data " + w.cfg() + " --out " + w.q(a)) == 0);
    REQUIRE(run("gen-data " + w.cfg() + " --out " + w.q(b)) == 0);
    for (const char* f : {"train.jsonl", "val.jsonl", "manifest.json"}) {
        CHECK(slurp(a / f) == slurp(b / f));
    }
    const auto train = bevmine::load_scenes(a / "train.jsonl");
    const auto val = bevmine::load_scenes(a / "val.jsonl");
    CHECK(train.size() == 6);
    CHECK(val.size() == 4);
    const json m = json::parse(slurp(a / "manifest.json"));
    const auto stats = bevmine::corpus_stats(train);
    CHECK(m["splits"]["train"]["stats"]["sparse_labels"] == stats.sparse_labels);
    CHECK(m["splits"]["train"]["stats"]["objects"] == stats.objects);
    CHECK(m["splits"]["train"]["stats"]["sparse_ratio"].get<double>() ==
          static_cast<double>(stats.agents) / static_cast<double>(stats.objects));
    CHECK(m["splits"]["val"]["first_index"] == 6);

    REQUIRE(run("gen-data " + w.cfg() + " --seed 9 --out " + w.q(b)) == 0);
    CHECK(slurp(a / "train.jsonl") != slurp(b / "train.jsonl"));

    const fs::path z = w.dir / "z";
    REQUIRE(run("gen-data " + w.cfg() + " --train-scenes 0 --val-scenes 0 --out " + w.q(z)) == 0);
    CHECK(slurp(z / "train.jsonl").empty());
    CHECK(json::parse(slurp(z / "manifest.json"))["splits"]["train"]["stats"]["scenes"] == 0);
}

TEST_CASE("train, mine and eval end to end") {
    Workspace w;
    const fs::path data = w.dir / "data";
    REQUIRE(run("gen-data " + w.cfg() + " --out " + w.q(data)) == 0);
    const std::string train_data = " --data " + w.q(data / "train.jsonl");
    const std::string val_data = " --data " + w.q(data / "val.jsonl");

    const fs::path r1 = w.dir / "run1";
    REQUIRE(run("train " + w.cfg() + " --pretrain-static" + train_data + " --run-dir " + w.q(r1)) == 0);
    for (const char* f : {"config.toml", "static_teacher.json", "student.json", "dynamic_teacher.json", "run_log.jsonl"}) {
        CHECK(fs::exists(r1 / f));
    }
    const auto log = json_lines(r1 / "run_log.jsonl");
    REQUIRE(log.size() == 20);
    for (const auto& rec : log) {
        CHECK(rec["stage"] == (rec["iter"].get<int>() < 10 ? "warm_up" : "refinement"));
        CHECK(rec["grid_overlap"] == 0);
    }

    SUBCASE("ablation and schedule overrides") {
        const fs::path r2 = w.dir / "run2";
        REQUIRE(run("train " + w.cfg() + " --static " + w.q(r1 / "static_teacher.json") + train_data +
                    " --ablation mfm-only --i-max 16 --i-refine 4 --run-dir " + w.q(r2)) == 0);
        const auto log2 = json_lines(r2 / "run_log.jsonl");
        REQUIRE(log2.size() == 16);
        for (const auto& rec : log2) {
            CHECK(rec["counts"]["pseudo_supp"] == 0);
            CHECK(rec["counts"]["neighbor"] == 0);
            CHECK(rec["stage"] == (rec["iter"].get<int>() < 4 ? "warm_up" : "refinement"));
        }
        CHECK(run("train " + w.cfg() + " --pretrain-static" + train_data + " --ablation bogus --run-dir " +
                  w.q(w.dir / "run3")) == 1);
    }

    SUBCASE("mined labels re-score identically") {
        const fs::path dump = w.dir / "labels.jsonl";
        REQUIRE(run("mine " + w.cfg() + train_data + " --static " + w.q(r1 / "static_teacher.json") + " --dynamic " +
                    w.q(r1 / "dynamic_teacher.json") + " --out " + w.q(dump)) == 0);
        const json summary = json::parse(slurp(w.dir / "labels.jsonl.summary.json"));
        CHECK(summary["sweep"].size() == 4);
        const fs::path rep = w.dir / "rescore.json";
        REQUIRE(run("eval " + w.cfg() + train_data + " --labels " + w.q(dump) + " --out " + w.q(rep)) == 0);
        const json report = json::parse(slurp(rep));
        CHECK(report["pseudo_labels"]["fpr"] == summary["dump"]["fpr"]);
        CHECK(report["pseudo_labels"]["mpr"] == summary["dump"]["mpr"]);

        const fs::path empty = w.dir / "empty.jsonl";
        std::ofstream(empty).close();
        const fs::path empty_dump = w.dir / "empty_labels.jsonl";
        REQUIRE(run("mine " + w.cfg() + " --data " + w.q(empty) + " --static " + w.q(r1 / "static_teacher.json") +
                    " --out " + w.q(empty_dump)) == 0);
        CHECK(slurp(empty_dump).empty());
    }

    SUBCASE("evaluation") {
        const fs::path a = w.dir / "a.json";
        const fs::path b = w.dir / "b.json";
        const fs::path csv = w.dir / "a.csv";
        REQUIRE(run("eval " + w.cfg() + val_data + " --checkpoint " + w.q(r1 / "dynamic_teacher.json") + " --out " +
                    w.q(a) + " --csv " + w.q(csv)) == 0);
        REQUIRE(run("eval " + w.cfg() + val_data + " --checkpoint " + w.q(r1 / "dynamic_teacher.json") + " --out " +
                    w.q(b)) == 0);
        CHECK(slurp(a) == slurp(b));
        CHECK(slurp(csv).rfind("method,frames,detections,AP@0.3", 0) == 0);
        const json report = json::parse(slurp(a));
        CHECK(report["ap"].contains("0.5"));

        const fs::path o = w.dir / "oracle.json";
        REQUIRE(run("eval " + w.cfg() + val_data + " --oracle-gt --out " + w.q(o)) == 0);
        const json oracle = json::parse(slurp(o));
        for (const char* t : {"0.3", "0.5", "0.7"}) {
            CHECK(oracle["ap"][t]["ap"] == 1.0);
        }

        CHECK(run("eval " + w.cfg() + val_data + " --checkpoint " + w.q(w.dir / "none.json") + " --out " + w.q(o)) == 2);
    }
}
