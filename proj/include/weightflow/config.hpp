#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "weightflow/adjoint.hpp"
#include "weightflow/dataset.hpp"
#include "weightflow/metatrain.hpp"
#include "weightflow/pretrain.hpp"
#include "weightflow/shiftdetect.hpp"
#include "weightflow/weightcodec.hpp"

namespace wf {

// Minimal TOML subset: [section] headers, `key = value` lines, # comments.
// Values: integers, floats, booleans, "strings", and flat arrays of those.
using TomlScalar = std::variant<std::int64_t, double, bool, std::string>;
struct TomlValue {
  bool is_array = false;
  std::vector<TomlScalar> items;  // single element when not an array
};
using TomlTable = std::map<std::string, std::map<std::string, TomlValue>>;

TomlTable parse_toml(const std::string& text);

// Full run configuration; every unknown section or key is rejected.
struct RunConfig {
  std::string run_name = "run";
  std::string workspace = "runs";

  DatasetConfig dataset;

  struct Base {
    std::vector<std::size_t> hidden{8};
    std::string activation = "relu";
    std::string optimizer = "sgd";
    double lr = 0.1;
    std::size_t n_models = 6;
    PretrainConfig pretrain;
  } base;

  struct Vae {
    std::size_t latent_dim = 16;
    std::vector<std::size_t> hidden{64};
    VaeTrainConfig train;
  } vae;

  struct Meta {
    std::string kind = "cfm";
    std::size_t pad_dim = 0;  // 0: arch.param_count()
    MetaTrainConfig train;
  } meta;

  struct Finetune {
    std::string reward = "neg_ce";
    std::size_t m = 64;
    double reward_lr = 1.5;
    double reward_momentum = 0.01;
    double pad_reg_weight = 0.0;
    int corruption_level = 0;  // dataset the reward is computed on
    FtConfig cfg;
  } finetune;

  struct Detect {
    int corruption_level = 3;
    std::size_t n_seeds = 10;
    CdcConfig cdc = CdcConfig::make();
  } detect;

  struct Generate {
    std::size_t steps = 100;
    std::size_t count = 8;
  } generate;
};

RunConfig config_from_toml(const std::string& text);
RunConfig load_config(const std::string& path);

}  // namespace wf
