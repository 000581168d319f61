#pragma once

#include <cstdint>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include "mvdet/bev.hpp"
#include "mvdet/detector.hpp"
#include "mvdet/synth.hpp"

namespace mvdet {

/// Full experiment configuration. Sectioned key-value text format; parsing
/// then emitting then parsing again is identity.
struct Config {
  std::string preset = "desk";
  std::uint64_t seed = 1;

  BevGridSpec grid;
  DecoderConfig decoder;
  ModelFlags flags;

  // training
  int train_steps = 2000;
  double learning_rate = 2e-4;
  double weight_decay = 0.01;
  int train_scenes = 16;

  // scene generation
  SceneSpec scene;

  // temporal policy
  double fetch_interval = 1.5;  // seconds
  int bank_capacity = 8;
  double bank_horizon = 2.5;
  double pair_window = 2.0;

  // features
  int feat_channels = 32;
  int feat_size = 32;  // feature maps are feat_size x feat_size
  int image_size = 64;
  bool use_encoder = false;
};

inline Config desk_config() {
  Config c;
  c.preset = "desk";
  c.grid = BevGridSpec{-16.0, 16.0, -16.0, 16.0, -2.0, 2.0, 4, 16, 16};
  c.decoder = DecoderConfig{};  // 2 layers, C=32, N_h=4, N_s=4, 25 queries, 3 classes
  // Desk-scale training tune: the tiny model regresses centers faster with a
  // heavier L1 term and a larger step than the full-scale defaults.
  c.decoder.lambda_center = 1.0;
  c.learning_rate = 4e-4;
  return c;
}

inline Config paper_scale_config() {
  Config c;
  c.preset = "paper-scale";
  c.grid = BevGridSpec{-51.2, 51.2, -51.2, 51.2, -5.0, 3.0, 8, 144, 144};
  c.decoder.layers = 6;
  c.decoder.channels = 256;
  c.decoder.n_heads = 8;
  c.decoder.n_points = 8;
  c.decoder.n_query = 900;
  c.decoder.n_classes = 10;
  c.decoder.ffn_hidden = 512;
  c.feat_channels = 256;
  c.feat_size = 200;   // 1600 px / 8
  c.image_size = 1600;
  c.decoder.lambda_center = 0.25;
  c.learning_rate = 2e-4;
  return c;
}

inline Config preset_config(const std::string& name) {
  if (name == "desk") return desk_config();
  if (name == "paper-scale") return paper_scale_config();
  throw std::invalid_argument("unknown preset: " + name);
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

inline std::string emit_config(const Config& c) {
  std::ostringstream os;
  using detail::fmt;
  os << "[run]\n";
  os << "preset = " << c.preset << "\n";
  os << "seed = " << c.seed << "\n";
  os << "train_steps = " << c.train_steps << "\n";
  os << "learning_rate = " << fmt(c.learning_rate) << "\n";
  os << "weight_decay = " << fmt(c.weight_decay) << "\n";
  os << "train_scenes = " << c.train_scenes << "\n";
  os << "[grid]\n";
  os << "x_min = " << fmt(c.grid.x_min) << "\n";
  os << "x_max = " << fmt(c.grid.x_max) << "\n";
  os << "y_min = " << fmt(c.grid.y_min) << "\n";
  os << "y_max = " << fmt(c.grid.y_max) << "\n";
  os << "z_min = " << fmt(c.grid.z_min) << "\n";
  os << "z_max = " << fmt(c.grid.z_max) << "\n";
  os << "depth = " << c.grid.depth << "\n";
  os << "height = " << c.grid.height << "\n";
  os << "width = " << c.grid.width << "\n";
  os << "[decoder]\n";
  os << "layers = " << c.decoder.layers << "\n";
  os << "channels = " << c.decoder.channels << "\n";
  os << "n_heads = " << c.decoder.n_heads << "\n";
  os << "n_points = " << c.decoder.n_points << "\n";
  os << "n_query = " << c.decoder.n_query << "\n";
  os << "n_classes = " << c.decoder.n_classes << "\n";
  os << "ffn_hidden = " << c.decoder.ffn_hidden << "\n";
  os << "lambda_cls = " << fmt(c.decoder.lambda_cls) << "\n";
  os << "lambda_center = " << fmt(c.decoder.lambda_center) << "\n";
  os << "lambda_heatmap = " << fmt(c.decoder.lambda_heatmap) << "\n";
  os << "center_trust_region = " << fmt(c.decoder.center_trust_region) << "\n";
  os << "[flags]\n";
  os << "position_init = " << (c.flags.position_init ? 1 : 0) << "\n";
  os << "feature_init = " << (c.flags.feature_init ? 1 : 0) << "\n";
  os << "temporal = " << (c.flags.temporal ? 1 : 0) << "\n";
  os << "query_aggregation = " << (c.flags.query_aggregation ? 1 : 0) << "\n";
  os << "feature_aggregation = " << (c.flags.feature_aggregation ? 1 : 0) << "\n";
  os << "ego_alignment = " << (c.flags.ego_alignment ? 1 : 0) << "\n";
  os << "attn = " << (c.flags.attn_kind == AttnKind::pca ? "pca" : "sca2d") << "\n";
  os << "[scene]\n";
  os << "n_objects = " << c.scene.n_objects << "\n";
  os << "speed_min = " << fmt(c.scene.speed_min) << "\n";
  os << "speed_max = " << fmt(c.scene.speed_max) << "\n";
  os << "placement_radius = " << fmt(c.scene.placement_radius) << "\n";
  os << "ego_speed = " << fmt(c.scene.ego_speed) << "\n";
  os << "ego_yaw_rate = " << fmt(c.scene.ego_yaw_rate) << "\n";
  os << "duration = " << fmt(c.scene.duration) << "\n";
  os << "frame_period = " << fmt(c.scene.frame_period) << "\n";
  os << "noise_sigma = " << fmt(c.scene.noise_sigma) << "\n";
  os << "n_clutter = " << c.scene.n_clutter << "\n";
  os << "[temporal]\n";
  os << "fetch_interval = " << fmt(c.fetch_interval) << "\n";
  os << "bank_capacity = " << c.bank_capacity << "\n";
  os << "bank_horizon = " << fmt(c.bank_horizon) << "\n";
  os << "pair_window = " << fmt(c.pair_window) << "\n";
  os << "[features]\n";
  os << "feat_channels = " << c.feat_channels << "\n";
  os << "feat_size = " << c.feat_size << "\n";
  os << "image_size = " << c.image_size << "\n";
  os << "use_encoder = " << (c.use_encoder ? 1 : 0) << "\n";
  return os.str();
}

inline Config parse_config(std::istream& is) {
  Config c;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '[' || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config: bad line: " + line);
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    auto d = [&] { return std::stod(val); };
    auto i = [&] { return std::stoi(val); };
    auto b = [&] { return val == "1" || val == "true" || val == "on"; };
    if (key == "preset") c.preset = val;
    else if (key == "seed") c.seed = std::stoull(val);
    else if (key == "train_steps") c.train_steps = i();
    else if (key == "learning_rate") c.learning_rate = d();
    else if (key == "weight_decay") c.weight_decay = d();
    else if (key == "train_scenes") c.train_scenes = i();
    else if (key == "x_min") c.grid.x_min = d();
    else if (key == "x_max") c.grid.x_max = d();
    else if (key == "y_min") c.grid.y_min = d();
    else if (key == "y_max") c.grid.y_max = d();
    else if (key == "z_min") c.grid.z_min = d();
    else if (key == "z_max") c.grid.z_max = d();
    else if (key == "depth") c.grid.depth = i();
    else if (key == "height") c.grid.height = i();
    else if (key == "width") c.grid.width = i();
    else if (key == "layers") c.decoder.layers = i();
    else if (key == "channels") c.decoder.channels = i();
    else if (key == "n_heads") c.decoder.n_heads = i();
    else if (key == "n_points") c.decoder.n_points = i();
    else if (key == "n_query") c.decoder.n_query = i();
    else if (key == "n_classes") c.decoder.n_classes = i();
    else if (key == "ffn_hidden") c.decoder.ffn_hidden = i();
    else if (key == "lambda_cls") c.decoder.lambda_cls = d();
    else if (key == "lambda_center") c.decoder.lambda_center = d();
    else if (key == "lambda_heatmap") c.decoder.lambda_heatmap = d();
    else if (key == "center_trust_region") c.decoder.center_trust_region = d();
    else if (key == "position_init") c.flags.position_init = b();
    else if (key == "feature_init") c.flags.feature_init = b();
    else if (key == "temporal") c.flags.temporal = b();
    else if (key == "query_aggregation") c.flags.query_aggregation = b();
    else if (key == "feature_aggregation") c.flags.feature_aggregation = b();
    else if (key == "ego_alignment") c.flags.ego_alignment = b();
    else if (key == "attn")
      c.flags.attn_kind = (val == "sca2d") ? AttnKind::sca2d : AttnKind::pca;
    else if (key == "n_objects") c.scene.n_objects = i();
    else if (key == "speed_min") c.scene.speed_min = d();
    else if (key == "speed_max") c.scene.speed_max = d();
    else if (key == "placement_radius") c.scene.placement_radius = d();
    else if (key == "ego_speed") c.scene.ego_speed = d();
    else if (key == "ego_yaw_rate") c.scene.ego_yaw_rate = d();
    else if (key == "duration") c.scene.duration = d();
    else if (key == "frame_period") c.scene.frame_period = d();
    else if (key == "noise_sigma") c.scene.noise_sigma = d();
    else if (key == "n_clutter") c.scene.n_clutter = i();
    else if (key == "fetch_interval") c.fetch_interval = d();
    else if (key == "bank_capacity") c.bank_capacity = i();
    else if (key == "bank_horizon") c.bank_horizon = d();
    else if (key == "pair_window") c.pair_window = d();
    else if (key == "feat_channels") c.feat_channels = i();
    else if (key == "feat_size") c.feat_size = i();
    else if (key == "image_size") c.image_size = i();
    else if (key == "use_encoder") c.use_encoder = b();
    else throw std::runtime_error("config: unknown key: " + key);
  }
  return c;
}

inline Config parse_config_string(const std::string& text) {
  std::istringstream ss(text);
  return parse_config(ss);
}

inline Config load_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config: " + path);
  return parse_config(is);
}

/// FNV-1a over the emitted text; identifies a configuration in manifests.
inline std::string config_hash(const Config& c) {
  const std::string text = emit_config(c);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

}  // namespace mvdet
