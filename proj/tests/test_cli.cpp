#include "doctest.h"

#include "spon/artifact.hpp"
#include "spon/model.hpp"
#include "test_util.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>

using namespace spon;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Workdir {
public:
    Workdir() : dir_(fs::temp_directory_path() / ("spon_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n_++))) {
        fs::remove_all(dir_);
        fs::create_directories(dir_);
        const std::string text = slurp(spon::test::data_path("sonnets.txt"));
        std::ofstream(dir_ / "corpus.txt", std::ios::binary) << text.substr(0, 20000);
    }
    ~Workdir() { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    // Runs the CLI with SPON_SEED unset unless `env` sets it.
    Run run(const std::string& args, const std::string& env = "") const {
        const std::string cmd = "env -u SPON_SEED " + env + " '" SPON_CLI_PATH "' " + args + " >'" + path("stdout") +
                                "' 2>'" + path("stderr") + "'";
        const int status = std::system(cmd.c_str());
        Run r;
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.out = slurp(path("stdout"));
        r.err = slurp(path("stderr"));
        return r;
    }

private:
    static inline int n_ = 0;
    fs::path dir_;
};

const std::string kModelFlags = "--d-model 16 --n-layers 2 --n-heads 2 --d-ff 32 --context-len 32 --batch 8 --block 32";

Run train(const Workdir& w, const std::string& out, const std::string& extra = "--epochs 1 --lr 3e-3") {
    return w.run("train --seed 7 --corpus " + w.path("corpus.txt") + " --out " + w.path(out) + " " + kModelFlags + " " +
                 extra);
}

Json json_at(const Workdir& w, const std::string& name) { return Json::parse(slurp(w.path(name))); }

// Full pipeline into `w`; returns the training stdout.
std::string pipeline(const Workdir& w) {
    const Run t = train(w, "model.bin");
    REQUIRE_MESSAGE(t.code == 0, t.err);
    const std::string c = " --corpus " + w.path("corpus.txt");
    Run r = w.run("calibrate-sparsity --seed 7 --model " + w.path("model.bin") + c + " --calib-tokens 2048 --target 0.5 --out " +
                  w.path("profile.json"));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    r = w.run("calibrate-spon --seed 7 --model " + w.path("model.bin") + c + " --profile " + w.path("profile.json") +
              " --calib-tokens 2048 --steps 10 --log-every 5 --spon-lr 1e-2 --out " + w.path("params.json"));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    r = w.run("fold --seed 7 --model " + w.path("model.bin") + " --params " + w.path("params.json") + " --out " +
              w.path("folded.bin"));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    r = w.run("eval --seed 7 --model " + w.path("model.bin") + c + " --profile " + w.path("profile.json") +
              " --params " + w.path("params.json") + " --prompts 10 --prompt-len 32 --out " + w.path("unfolded.json") +
              " --csv " + w.path("unfolded.csv"));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    r = w.run("eval --seed 7 --model " + w.path("folded.bin") + " --reference " + w.path("model.bin") + c +
              " --profile " + w.path("profile.json") + " --prompts 10 --prompt-len 32 --out " + w.path("folded.json"));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    r = w.run("eval --seed 7 --model " + w.path("model.bin") + c + " --prompts 10 --prompt-len 32 --out " +
              w.path("dense.json"));
    REQUIRE_MESSAGE(r.code == 0, r.err);
    return t.out;
}

}  // namespace

TEST_CASE("missing corpus exits 2 and names the path") {
    Workdir w;
    const Run r = w.run("train --seed 1 --corpus /nonexistent/corpus.txt --out " + w.path("m.bin"));
    CHECK(r.code == 2);
    CHECK(r.err.find("/nonexistent/corpus.txt") != std::string::npos);
    CHECK_FALSE(fs::exists(w.path("m.bin")));
}

TEST_CASE("usage errors exit 2") {
    Workdir w;
    CHECK(w.run("").code == 2);
    CHECK(w.run("frobnicate").code == 2);
    CHECK(w.run("train --seed 1 --corpus " + w.path("corpus.txt") + " --epochs banana --out x").code == 2);
    CHECK(w.run("--help").code == 0);
}

TEST_CASE("a seed is mandatory, with SPON_SEED as fallback") {
    Workdir w;
    const Run none = w.run("theory-demo --out " + w.path("t.json"));
    CHECK(none.code == 2);
    CHECK(none.err.find("seed") != std::string::npos);
    const Run env = w.run("theory-demo --out " + w.path("t.json"), "SPON_SEED=5");
    REQUIRE(env.code == 0);
    CHECK(json_at(w, "t.json").at("seed") == 5);
    const Run flag = w.run("theory-demo --seed 6 --out " + w.path("t.json"), "SPON_SEED=5");
    REQUIRE(flag.code == 0);
    CHECK(json_at(w, "t.json").at("seed") == 6);
    CHECK(w.run("theory-demo --out " + w.path("t.json"), "SPON_SEED=abc").code == 2);
}

TEST_CASE("theory demo report and config precedence") {
    Workdir w;
    REQUIRE(w.run("theory-demo --seed 1 --m 3 --m-prime 2 --out " + w.path("t.json")).code == 0);
    const Json j = json_at(w, "t.json");
    CHECK(j.at("kind") == "theory_report");
    CHECK(j.at("m") == 3);
    CHECK(j.at("K") == 6);
    CHECK(j.at("piece_count") == 4);
    CHECK(j.at("embed_ok") == true);
    CHECK(j.at("struct_linf_error").get<double>() > 1e-3);

    std::ofstream(w.path("cfg.json")) << R"({"m": 3, "m_prime": 1, "seed": 9})";
    REQUIRE(w.run("theory-demo --config " + w.path("cfg.json") + " --m 4 --out " + w.path("c.json")).code == 0);
    const Json c = json_at(w, "c.json");
    CHECK(c.at("m") == 4);
    CHECK(c.at("m_prime") == 1);
    CHECK(c.at("seed") == 9);

    CHECK(w.run("theory-demo --seed 1 --m 2 --m-prime 2 --out " + w.path("bad.json")).code == 2);
    std::ofstream(w.path("broken.json")) << "{not json";
    CHECK(w.run("theory-demo --config " + w.path("broken.json") + " --out " + w.path("x.json")).code == 3);
}

TEST_CASE("zero epochs writes the initial model") {
    Workdir w;
    REQUIRE(train(w, "init.bin", "--epochs 0").code == 0);
    const Model m = load_model(w.path("init.bin"));
    CHECK(m.config.seed == 7);
    CHECK(m.config.d_model == 16);
    CHECK(slurp(w.path("init.bin")) == serialize_model(init_model(m.config)));
}

TEST_CASE("pipeline: reproducible artifacts, consistent metrics, fold safety") {
    Workdir a, b;
    const std::string train_out = pipeline(a);
    pipeline(b);
    for (const char* f : {"model.bin", "profile.json", "params.json", "folded.bin", "unfolded.json", "unfolded.csv",
                          "folded.json", "dense.json"}) {
        INFO(f);
        CHECK(slurp(a.path(f)) == slurp(b.path(f)));
    }

    // Dense evaluation reproduces the held-out perplexity printed by training.
    const auto pos = train_out.find("(ppl ");
    REQUIRE(pos != std::string::npos);
    const double trained_ppl = std::stod(train_out.substr(pos + 5));
    const Json dense = json_at(a, "dense.json");
    CHECK(dense.at("mode") == "dense");
    CHECK(std::fabs(dense.at("perplexity").get<double>() - trained_ppl) <= 1e-4);

    const Json unfolded = json_at(a, "unfolded.json"), folded = json_at(a, "folded.json");
    CHECK(unfolded.at("mode") == "spon");
    CHECK(folded.at("mode") == "spon");
    CHECK(std::fabs(unfolded.at("perplexity").get<double>() - folded.at("perplexity").get<double>()) <= 1e-4);
    CHECK(std::fabs(unfolded.at("kl").get<double>() - folded.at("kl").get<double>()) <= 1e-4);
    CHECK(slurp(a.path("unfolded.csv")).rfind("mode,label,perplexity,", 0) == 0);

    // Folding the same parameters twice is refused.
    const Run again = a.run("fold --seed 7 --model " + a.path("folded.bin") + " --params " + a.path("params.json") +
                            " --out " + a.path("twice.bin"));
    CHECK(again.code == 3);
    CHECK_FALSE(fs::exists(a.path("twice.bin")));

    // Artifacts with the wrong schema version are refused.
    Json profile = json_at(a, "profile.json");
    profile["schema_version"] = 2;
    std::ofstream(a.path("profile2.json")) << profile.dump();
    const Run bad = a.run("eval --seed 7 --model " + a.path("model.bin") + " --corpus " + a.path("corpus.txt") +
                          " --profile " + a.path("profile2.json") + " --out " + a.path("e.json"));
    CHECK(bad.code == 3);
    // A profile passed where parameters are expected.
    CHECK(a.run("fold --seed 7 --model " + a.path("model.bin") + " --params " + a.path("profile.json") + " --out " +
                a.path("x.bin"))
              .code == 3);
    std::string corrupt = slurp(a.path("model.bin"));
    corrupt[corrupt.size() - 50] ^= 0x10;
    std::ofstream(a.path("corrupt.bin"), std::ios::binary) << corrupt;
    CHECK(a.run("eval --seed 7 --model " + a.path("corrupt.bin") + " --corpus " + a.path("corpus.txt") + " --out " +
                a.path("e.json"))
              .code == 3);

    const Run shift = a.run("repr-shift --seed 7 --model " + a.path("model.bin") + " --corpus " + a.path("corpus.txt") +
                            " --profile " + a.path("profile.json") + " --params " + a.path("params.json") +
                            " --prompts 10 --prompt-len 32 --out " + a.path("shift.json") + " --csv " + a.path("pca.csv"));
    REQUIRE_MESSAGE(shift.code == 0, shift.err);
    CHECK(json_at(a, "shift.json").at("kind") == "repr_shift");
    CHECK(slurp(a.path("pca.csv")).rfind("source,prompt,position,pc1,pc2\n", 0) == 0);

    const Run layers = a.run("ablate-layers --seed 7 --model " + a.path("model.bin") + " --corpus " +
                             a.path("corpus.txt") + " --profile " + a.path("profile.json") +
                             " --calib-tokens 2048 --steps 2 --out " + a.path("layers.json") + " --csv " +
                             a.path("layers.csv"));
    REQUIRE_MESSAGE(layers.code == 0, layers.err);
    CHECK(json_at(a, "layers.json").at("entries").size() == 2);
    const Run sites = a.run("ablate-sites --seed 7 --model " + a.path("model.bin") + " --corpus " +
                            a.path("corpus.txt") + " --profile " + a.path("profile.json") +
                            " --calib-tokens 2048 --steps 2 --sets 'down;kv' --out " + a.path("sites.json"));
    REQUIRE_MESSAGE(sites.code == 0, sites.err);
    CHECK(json_at(a, "sites.json").at("entries").size() == 2);
}

TEST_CASE("numeric overflow exits 4 with diagnostics") {
    Workdir w;
    Model m = init_model(spon::test::tiny_config(1));
    for (auto& [name, t] : m.weights.named_tensors())
        for (float& v : t->mutable_data()) v *= 1e30f;
    save_model(m, w.path("huge.bin"));
    const Run r = w.run("eval --seed 1 --model " + w.path("huge.bin") + " --corpus " + w.path("corpus.txt") + " --out " +
                        w.path("e.json"));
    CHECK(r.code == 4);
    CHECK(r.err.find("numeric error") != std::string::npos);
    REQUIRE(fs::exists(w.path("e.json.diagnostics.json")));
    const Json d = json_at(w, "e.json.diagnostics.json");
    CHECK(d.at("kind") == "diagnostics");
    CHECK_FALSE(fs::exists(w.path("e.json")));
}
