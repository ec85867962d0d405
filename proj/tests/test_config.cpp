#include <catch2/catch_amalgamated.hpp>

#include "condet/config.hpp"

using condet::json;
using condet::RunConfig;

TEST_CASE("empty config yields the defaults") {
    auto cfg = condet::parse_config(json::object());
    CHECK(cfg.schedule.sigma_min == 0.002);
    CHECK(cfg.schedule.sigma_max == 80.0);
    CHECK(cfg.schedule.rho == 7.0);
    CHECK(cfg.schedule.total_steps == 40);
    CHECK(cfg.schedule.sigma_data == 0.5);
    CHECK(cfg.loss.lambda_cls == 2.0);
    CHECK(cfg.loss.lambda_l1 == 5.0);
    CHECK(cfg.loss.lambda_giou == 2.0);
    CHECK(cfg.trainer.learning_rate == 2.5e-5);
    CHECK(cfg.trainer.weight_decay == 1e-4);
    CHECK(cfg.trainer.ema_decay == 0.95);
    CHECK(cfg.trainer.n_tr == 300);
    CHECK(cfg.data.num_classes == 3);
}

TEST_CASE("unknown section and key are startup errors naming the offender") {
    CHECK_THROWS_WITH(condet::parse_config(json{{"scheduler", json::object()}}),
                      Catch::Matchers::ContainsSubstring("scheduler"));
    CHECK_THROWS_WITH(condet::parse_config(json{{"schedule", {{"sgima_min", 0.1}}}}),
                      Catch::Matchers::ContainsSubstring("sgima_min"));
    CHECK_THROWS_WITH(condet::parse_config(json{{"trainer", {{"lr", 0.1}}}}),
                      Catch::Matchers::ContainsSubstring("trainer.lr"));
}

TEST_CASE("type errors are reported with the key path") {
    CHECK_THROWS_WITH(condet::parse_config(json{{"schedule", {{"sigma_min", "tiny"}}}}),
                      Catch::Matchers::ContainsSubstring("schedule.sigma_min"));
}

TEST_CASE("invalid values fail validation") {
    CHECK_THROWS_AS(condet::parse_config(json{{"schedule", {{"sigma_min", 100.0}}}}), std::invalid_argument);
    CHECK_THROWS_AS(condet::parse_config(json{{"trainer", {{"learning_rate", 0.0}}}}), std::invalid_argument);
    CHECK_THROWS_AS(condet::parse_config(json{{"schedule", {{"scalings", "other"}}}}), std::invalid_argument);
    CHECK_THROWS_AS(condet::parse_config(json{{"data", {{"source", "imagenet"}}}}), std::invalid_argument);
}

TEST_CASE("config echo round trips") {
    json j = {{"schedule", {{"total_steps", 20}, {"sigma_data", 0.4}}},
              {"model", {{"stages", 3}, {"num_classes", 5}}},
              {"trainer", {{"iterations", 123}, {"threads", 2}}},
              {"data", {{"image_size", 96}}}};
    auto cfg = condet::parse_config(j);
    auto echoed = condet::parse_config(condet::config_to_json(cfg));
    CHECK(echoed.schedule.total_steps == 20);
    CHECK(echoed.schedule.sigma_data == 0.4);
    CHECK(echoed.model.stages == 3);
    CHECK(echoed.model.num_classes == 5);
    CHECK(echoed.trainer.iterations == 123);
    CHECK(echoed.trainer.threads == 2);
    CHECK(echoed.data.image_size == 96);
}

TEST_CASE("partial overrides keep the other defaults") {
    auto cfg = condet::parse_config(json{{"loss", {{"lambda_l1", 1.0}}}});
    CHECK(cfg.loss.lambda_l1 == 1.0);
    CHECK(cfg.loss.lambda_cls == 2.0);
    CHECK(cfg.loss.lambda_giou == 2.0);
}
