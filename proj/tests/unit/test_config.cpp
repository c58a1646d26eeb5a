#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "sparsebridge/commands.hpp"
#include "sparsebridge/config.hpp"
#include "sparsebridge/errors.hpp"

using namespace sparsebridge;
namespace fs = std::filesystem;

TEST_CASE("defaults") {
    const ExperimentConfig c;
    CHECK(c.bridge.T == 1000);
    CHECK(c.sampler.steps == 100);
    CHECK(c.bridge.s == 1.0);
    CHECK(c.retriever.alpha == 1.0);
    CHECK(c.retriever.beta == 1.0);
    CHECK(c.retriever.lambda == 0.5);
    CHECK(c.tau.percentile == 5.0);
    CHECK(c.tau.mode == TauMode::percentile);
    CHECK(c.retriever.offsets == std::vector<int>{1, 2});
    CHECK(c.bridge.eps_const == 1e-8);
    CHECK(c.sampler.x0_iters == 3);
    CHECK(c.control.slerp_augment_prob == 0.25);
    CHECK(c.reconstruct.max_pos_delta == 4);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("json round trip and hash") {
    ExperimentConfig c;
    c.seed = 42;
    c.bridge.objective = ObjectiveKind::raw;
    c.retriever.offsets = {1, 3};
    const auto back = ExperimentConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
    CHECK(c.hash().size() == 16);
    CHECK(ExperimentConfig{}.hash() != c.hash());
    CHECK(ExperimentConfig::from_json(nlohmann::json::object()).hash() == ExperimentConfig{}.hash());
}

TEST_CASE("partial files override only their keys") {
    const auto c = ExperimentConfig::from_json({{"tau", {{"mode", "top_mean"}}}, {"corpus", {{"image_size", 16}}}});
    CHECK(c.tau.mode == TauMode::top_mean);
    CHECK(c.tau.percentile == 5.0);
    CHECK(c.bridge.denoiser.image_size == 16);
    CHECK(c.retriever.encoder.image_size == 16);
}

TEST_CASE("bad configs name the key") {
    auto message = [](const nlohmann::json &j) {
        try {
            ExperimentConfig::from_json(j);
        } catch (const ConfigError &e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message({{"bridge", {{"iterz", 3}}}}).find("bridge.iterz") != std::string::npos);
    CHECK(message({{"bridge", {{"iters", "many"}}}}).find("bridge.iters") != std::string::npos);
    CHECK(message({{"bridge", {{"iters", 2.5}}}}).find("bridge.iters") != std::string::npos);
    CHECK(message({{"tau", {{"mode", "median"}}}}).find("tau.mode") != std::string::npos);
    CHECK(message({{"tau", {{"percentile", 100}}}}).find("tau.percentile") != std::string::npos);
    CHECK(message({{"sampler", {{"steps", 5000}}}}).find("sampler.steps") != std::string::npos);
    CHECK_FALSE(message({{"bridge", {{"lr", 1}}}}).size());
}

TEST_CASE("stage seeds differ by stage and seed") {
    ExperimentConfig a, b;
    b.seed = 1;
    CHECK(a.stage_seed("bridge") != a.stage_seed("control"));
    CHECK(a.stage_seed("bridge") != b.stage_seed("bridge"));
    CHECK(a.stage_seed("bridge") == ExperimentConfig{}.stage_seed("bridge"));
}

TEST_CASE("file load") {
    const fs::path dir = fs::temp_directory_path() / "sparsebridge_test_config";
    fs::create_directories(dir);
    ExperimentConfig c;
    c.seed = 9;
    c.save(dir / "c.json");
    CHECK(ExperimentConfig::load(dir / "c.json").seed == 9);
    std::ofstream(dir / "bad.json") << "{";
    CHECK_THROWS_AS(ExperimentConfig::load(dir / "bad.json"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::load(dir / "none.json"), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("commands reject unknown names and missing artifacts") {
    const fs::path dir = fs::temp_directory_path() / "sparsebridge_test_commands";
    fs::remove_all(dir);
    CHECK(command_names().size() == 9);
    CHECK_THROWS_AS(run_command("train-everything", ExperimentConfig{}, dir), ConfigError);
    try {
        run_command("reconstruct", ExperimentConfig{}, dir);
        FAIL("expected a missing-artifact error");
    } catch (const ConfigError &e) {
        CHECK(std::string(e.what()).find("bridge.ckpt") != std::string::npos);
    }
    CHECK_THROWS_AS(run_command("train-bridge", ExperimentConfig{}, dir), ConfigError);
    fs::remove_all(dir);
}

TEST_CASE("reconstruction names") {
    ReconstructConfig rc;
    CHECK(reconstruction_name(rc) == "recon");
    rc.use_control = false;
    CHECK(reconstruction_name(rc) == "recon_uncontrolled");
    rc.use_control = true;
    rc.db_fraction = 0.3;
    CHECK(reconstruction_name(rc) == "recon_db030");
    rc.use_retrieval = false;
    CHECK(reconstruction_name(rc) == "recon_interp");
}
