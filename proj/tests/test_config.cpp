#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "mvdet/config.hpp"

using namespace mvdet;

TEST_CASE("presets carry their documented scales") {
  Config desk = preset_config("desk");
  REQUIRE(desk.grid.x_max == 16.0);
  REQUIRE(desk.grid.depth == 4);
  REQUIRE(desk.grid.height == 16);
  REQUIRE(desk.decoder.layers == 2);
  REQUIRE(desk.decoder.channels == 32);
  REQUIRE(desk.decoder.n_query == 25);
  REQUIRE(desk.decoder.n_classes == 3);
  REQUIRE(desk.feat_size == 32);

  Config paper = preset_config("paper-scale");
  REQUIRE(paper.grid.x_max == 51.2);
  REQUIRE(paper.grid.z_min == -5.0);
  REQUIRE(paper.grid.height == 144);
  REQUIRE(paper.decoder.layers == 6);
  REQUIRE(paper.decoder.channels == 256);
  REQUIRE(paper.decoder.n_heads == 8);
  REQUIRE(paper.decoder.n_query == 900);
  REQUIRE(paper.learning_rate == 2e-4);

  REQUIRE_THROWS_AS(preset_config("nope"), std::invalid_argument);
}

TEST_CASE("config emit/parse round-trips every field") {
  Config c = desk_config();
  c.seed = 1234;
  c.train_steps = 777;
  c.learning_rate = 3.25e-4;
  c.decoder.lambda_center = 0.625;
  c.flags.temporal = true;
  c.flags.attn_kind = AttnKind::sca2d;
  c.flags.ego_alignment = false;
  c.scene.n_objects = 5;
  c.scene.ego_speed = 3.5;
  c.scene.noise_sigma = 0.125;
  c.fetch_interval = 1.25;
  c.bank_capacity = 6;
  c.use_encoder = true;

  Config back = parse_config_string(emit_config(c));
  REQUIRE(back.seed == c.seed);
  REQUIRE(back.train_steps == c.train_steps);
  REQUIRE(back.learning_rate == c.learning_rate);
  REQUIRE(back.decoder.lambda_center == c.decoder.lambda_center);
  REQUIRE(back.flags.temporal == c.flags.temporal);
  REQUIRE(back.flags.attn_kind == AttnKind::sca2d);
  REQUIRE(back.flags.ego_alignment == false);
  REQUIRE(back.scene.n_objects == 5);
  REQUIRE(back.scene.ego_speed == 3.5);
  REQUIRE(back.scene.noise_sigma == 0.125);
  REQUIRE(back.fetch_interval == 1.25);
  REQUIRE(back.bank_capacity == 6);
  REQUIRE(back.use_encoder == true);
  // Round-trip stability: a second emit is byte-identical.
  REQUIRE(emit_config(back) == emit_config(c));
}

TEST_CASE("config parsing tolerates comments and blank lines") {
  Config c = parse_config_string(
      "# comment\n\n[run]\nseed = 9\n\n[decoder]\nn_query = 7\n");
  REQUIRE(c.seed == 9);
  REQUIRE(c.decoder.n_query == 7);
}

TEST_CASE("malformed lines are rejected") {
  REQUIRE_THROWS_AS(parse_config_string("seed 9\n"), std::runtime_error);
}

TEST_CASE("config files load from disk") {
  const std::string path = "/tmp/mvdet_config_test.cfg";
  {
    std::ofstream os(path);
    os << emit_config(desk_config());
  }
  Config c = load_config_file(path);
  REQUIRE(c.preset == "desk");
  REQUIRE(c.grid.width == 16);
  std::remove(path.c_str());
  REQUIRE_THROWS_AS(load_config_file("/nonexistent/x.cfg"), std::runtime_error);
}

TEST_CASE("config hash is stable and sensitive") {
  Config a = desk_config();
  Config b = desk_config();
  REQUIRE(config_hash(a) == config_hash(b));
  b.seed = a.seed + 1;
  REQUIRE(config_hash(a) != config_hash(b));
  Config c = desk_config();
  c.flags.attn_kind = AttnKind::sca2d;
  REQUIRE(config_hash(a) != config_hash(c));
}
