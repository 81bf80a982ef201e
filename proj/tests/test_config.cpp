#include <sstream>

#include "doctest.h"
#include "waver/config.hpp"
#include "waver/error.hpp"

using namespace waver;

TEST_CASE("config text parsing") {
    std::istringstream is("# comment\nseed = 7\n\n  optim.base_lr=0.001 # trailing\nmodel.patch = 1x2x2\n");
    const auto kv = parse_config(is);
    CHECK(kv.at("seed") == "7");
    CHECK(kv.at("optim.base_lr") == "0.001");
    CHECK(kv.at("model.patch") == "1x2x2");
    CHECK(kv.size() == 3);

    const auto ov = parse_overrides({"a=1", "b = x"});
    CHECK(ov.at("a") == "1");
    CHECK(ov.at("b") == "x");
    CHECK_THROWS_AS(parse_overrides({"novalue"}), ContractError);
    CHECK(parse_dim3("2x3x4") == Dim3{2, 3, 4});
    CHECK_THROWS_AS(parse_dim3("2x3"), ContractError);
}

TEST_CASE("presets validate and round trip through text") {
    for (auto st : {Stage::T2I, Stage::LowresVideo, Stage::MidresVideo, Stage::Refiner}) {
        CAPTURE(to_string(st));
        const RunConfig c = RunConfig::preset(st);
        CHECK_NOTHROW(c.validate());
        std::istringstream is(c.to_text());
        const RunConfig back = make_run_config(parse_config(is));
        CHECK(back.to_text() == c.to_text());
        CHECK(back.hash() == c.hash());
        CHECK(stage_from_string(to_string(st)) == st);
    }
    CHECK(RunConfig::preset(Stage::Refiner).model.in_channels == 3);
    CHECK(RunConfig::preset(Stage::LowresVideo).model.in_channels == 7);
    CHECK(RunConfig::preset(Stage::T2I).data.frames == 1);
}

TEST_CASE("overrides change the hash and derived fields") {
    const RunConfig base = make_run_config({});
    RunConfig c = make_run_config({{"seed", "99"}});
    CHECK(c.seed == 99);
    CHECK(c.hash() != base.hash());
    c = make_run_config({{"model.d_model", "96"}, {"model.n_heads", "4"}});
    CHECK(c.model.head_dim == 24);
    CHECK(c.model.rope_split == default_rope_split(24));
    c = make_run_config({{"optim.warmup", "4"}, {"optim.base_lr", "0.01"}});
    CHECK(c.optim.lr_at(0) == doctest::Approx(0.0025));
    CHECK(c.optim.lr_at(3) == doctest::Approx(0.01));
    CHECK(c.optim.lr_at(100) == doctest::Approx(0.01));
}

TEST_CASE("malformed configs name the offending key") {
    auto msg = [](const ConfigMap& kv) {
        try {
            make_run_config(kv);
        } catch (const Error& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(msg({{"optim.bogus", "1"}}).find("optim.bogus") != std::string::npos);
    CHECK(msg({{"optim.steps", "abc"}}).find("optim.steps") != std::string::npos);
    CHECK(msg({{"stage", "nowhere"}}).find("nowhere") != std::string::npos);
    CHECK_FALSE(msg({{"stage", "refiner"}, {"model.in_channels", "7"}}).empty());
    CHECK_THROWS_AS(parse_config_file("/nonexistent/run.cfg"), Error);
}
