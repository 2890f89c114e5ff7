#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "ssrb/cli.hpp"

using namespace ssrb;

namespace {

std::filesystem::path tmp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / "ssrb_test_cli" / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

int run_cli(std::vector<std::string> args) {
    args.insert(args.begin(), "ssrb");
    std::vector<char*> argv;
    argv.reserve(args.size());
    for (auto& a : args) argv.push_back(a.data());
    return cli_main(static_cast<int>(argv.size()), argv.data());
}

json read_json(const std::filesystem::path& p) { return json::parse(read_text_file(p)); }

// dataset shared by the config/degrade tests (synthesis is cheap but not free)
const std::filesystem::path& shared_data() {
    static std::filesystem::path dir = [] {
        auto d = tmp_dir("data");
        REQUIRE(run_cli({"synth-data", "--count", "3", "--test-count", "2", "--size", "64",
                         "--seed", "1", "--out", d.string()}) == 0);
        return d;
    }();
    return dir;
}

}  // namespace

TEST_CASE("synth-data writes images, manifests and a run manifest") {
    const auto& d = shared_data();
    CHECK(std::filesystem::exists(d / "train" / "img_0000.ssrb"));
    CHECK(std::filesystem::exists(d / "train" / "img_0002.meta.json"));
    CHECK(std::filesystem::exists(d / "test" / "img_0001.ssrb"));
    DatasetManifest m = load_manifest(d / "train.manifest.json");
    CHECK(m.items.size() == 3);
    CHECK(m.size == 64);

    json rm = read_json(d / "run_manifest.json");
    CHECK(rm.at("subcommand") == "synth-data");
    CHECK(rm.at("artifact_version") == kArtifactVersion);
    CHECK(rm.contains("started_utc"));
    CHECK(rm.contains("finished_utc"));
    CHECK(rm.at("config").at("count") == 3);
}

TEST_CASE("usage errors exit 1 and help exits 0") {
    CHECK(run_cli({"definitely-not-a-subcommand"}) == 1);
    CHECK(run_cli({"synth-data", "--frobnicate", "3"}) == 1);
    CHECK(run_cli({}) == 1);
    CHECK(run_cli({"--help"}) == 0);
    CHECK(run_cli({"eval", "--help"}) == 0);
}

TEST_CASE("eval before any checkpoint exists is a user error") {
    auto d = tmp_dir("no-ckpt");
    CHECK(run_cli({"eval", "--ckpt", (d / "nope.json").string(), "--vae",
                   (d / "nope2.json").string(), "--data", d.string(), "--out",
                   (d / "e").string()}) == 1);
    // and a missing required flag is too
    CHECK(run_cli({"eval", "--out", (d / "e2").string()}) == 1);
}

TEST_CASE("config file precedence: defaults <- file <- flags") {
    const auto& d = shared_data();
    auto w        = tmp_dir("config");

    // empty file -> pure defaults
    atomic_write_file(w / "empty.json", "\n");
    REQUIRE(run_cli({"degrade", "--in", (d / "test" / "img_0000.ssrb").string(), "--config",
                     (w / "empty.json").string(), "--out", (w / "o1").string()}) == 0);
    json cfg = read_json(w / "o1" / "run_manifest.json").at("config");
    CHECK(cfg.at("blank_flux").get<double>() == Catch::Approx(5.0e4));
    CHECK(cfg.at("sample_steps") == 50);
    CHECK(cfg.at("lr").get<double>() == Catch::Approx(5e-5));
    CHECK(cfg.at("scale") == 2);

    // file sets scale 4, flag sets scale 2 -> flag wins
    atomic_write_file(w / "cfg.json", "{\"scale\": 4, \"seed\": 77}\n");
    REQUIRE(run_cli({"degrade", "--in", (d / "test" / "img_0000.ssrb").string(), "--config",
                     (w / "cfg.json").string(), "--scale", "2", "--out",
                     (w / "o2").string()}) == 0);
    cfg = read_json(w / "o2" / "run_manifest.json").at("config");
    CHECK(cfg.at("scale") == 2);
    CHECK(cfg.at("seed") == 77);  // file value survives where no flag overrides

    // unknown key warns but does not fail
    atomic_write_file(w / "odd.json", "{\"not_a_knob\": 1}\n");
    CHECK(run_cli({"degrade", "--in", (d / "test" / "img_0000.ssrb").string(), "--config",
                   (w / "odd.json").string(), "--out", (w / "o3").string()}) == 0);

    // malformed file is a user error
    atomic_write_file(w / "bad.json", "{\"scale\": \n");
    CHECK(run_cli({"degrade", "--in", (d / "test" / "img_0000.ssrb").string(), "--config",
                   (w / "bad.json").string(), "--out", (w / "o4").string()}) == 1);
}

TEST_CASE("run manifest config hash is recomputable from the stored config") {
    const auto& d = shared_data();
    json rm       = read_json(d / "run_manifest.json");
    CHECK(sha256_hex(rm.at("config").dump()) == rm.at("config_hash").get<std::string>());
}

TEST_CASE("SSRB_OUT overrides the default output root") {
    const auto& d = shared_data();
    auto root     = tmp_dir("envroot");
    setenv("SSRB_OUT", root.string().c_str(), 1);
    int rc = run_cli({"degrade", "--in", (d / "test" / "img_0000.ssrb").string()});
    unsetenv("SSRB_OUT");
    REQUIRE(rc == 0);
    CHECK(std::filesystem::exists(root / "degrade" / "lr.ssrb"));
    CHECK(std::filesystem::exists(root / "degrade" / "lr.pgm"));
    CHECK(std::filesystem::exists(root / "degrade" / "recipe.json"));
    CHECK(std::filesystem::exists(root / "degrade" / "run_manifest.json"));
}

TEST_CASE("degrade is seed-stable and leaves its input alone") {
    const auto& d = shared_data();
    auto w        = tmp_dir("degrade");
    auto in       = d / "test" / "img_0001.ssrb";
    auto before   = read_text_file(in);
    REQUIRE(run_cli({"degrade", "--in", in.string(), "--seed", "9", "--out",
                     (w / "a").string()}) == 0);
    REQUIRE(run_cli({"degrade", "--in", in.string(), "--seed", "9", "--out",
                     (w / "b").string()}) == 0);
    CHECK(read_text_file(w / "a" / "lr.ssrb") == read_text_file(w / "b" / "lr.ssrb"));
    CHECK(read_text_file(in) == before);
}

TEST_CASE("the full pipeline runs through the CLI and reruns from its manifest") {
    const auto& d = shared_data();
    auto w        = tmp_dir("pipeline");

    REQUIRE(run_cli({"train-vae", "--data", d.string(), "--iterations", "8", "--batch", "2",
                     "--seed", "1", "--out", (w / "vae").string()}) == 0);
    auto vae_ckpt = (w / "vae" / "vae.ckpt.json").string();
    REQUIRE(std::filesystem::exists(w / "vae" / "vae.losses.json"));

    REQUIRE(run_cli({"pretrain-base", "--data", d.string(), "--vae", vae_ckpt, "--iterations",
                     "4", "--batch", "2", "--seed", "1", "--out", (w / "base").string()}) == 0);
    auto base_ckpt = (w / "base" / "base.ckpt.json").string();

    REQUIRE(run_cli({"train-control", "--data", d.string(), "--vae", vae_ckpt, "--base",
                     base_ckpt, "--scale", "2", "--iterations", "4", "--batch", "2", "--seed",
                     "1", "--out", (w / "ctl").string()}) == 0);
    auto ctl_ckpt = (w / "ctl" / "control.ckpt.json").string();

    // the stored group hashes must witness the freeze: base group identical
    // across the base and control checkpoints
    json base_rm = read_json(w / "base" / "run_manifest.json");
    json ctl_rm  = read_json(w / "ctl" / "run_manifest.json");
    CHECK(base_rm.at("group_hashes").at("base") == ctl_rm.at("group_hashes").at("base"));

    REQUIRE(run_cli({"eval", "--ckpt", ctl_ckpt, "--vae", vae_ckpt, "--data", d.string(),
                     "--scale", "2", "--seed", "7", "--steps", "4", "--out",
                     (w / "eval").string()}) == 0);
    REQUIRE(std::filesystem::exists(w / "eval" / "report.json"));
    REQUIRE(std::filesystem::exists(w / "eval" / "report.txt"));
    CHECK(std::filesystem::exists(w / "eval" / "images" / "sr_0000.pgm"));
    CHECK(std::filesystem::exists(w / "eval" / "images" / "bicubic_0001.ssrb"));
    json rep = read_json(w / "eval" / "report.json");
    CHECK(rep.at("items").size() == 2);

    // criterion-style rerun: the manifest alone reproduces the report bytes
    REQUIRE(run_cli({"eval", "--from-manifest", (w / "eval" / "run_manifest.json").string(),
                     "--out", (w / "eval2").string()}) == 0);
    CHECK(read_text_file(w / "eval" / "report.json") ==
          read_text_file(w / "eval2" / "report.json"));

    // sample: LR input plus the dataset's meta sidecar
    REQUIRE(run_cli({"sample", "--ckpt", ctl_ckpt, "--vae", vae_ckpt, "--in",
                     (w / "eval" / "images" / "lr_0000.ssrb").string(), "--meta",
                     (d / "test" / "img_0000.meta.json").string(), "--scale", "2", "--seed",
                     "3", "--steps", "4", "--out", (w / "smp").string()}) == 0);
    Image sr = read_image_ssrb(w / "smp" / "sr.ssrb");
    CHECK(sr.h == 64);
    CHECK(sr.w == 64);
}
