#pragma once

#include <string>

#include "wsseg/campipeline.hpp"
#include "wsseg/dataspace.hpp"
#include "wsseg/model.hpp"
#include "wsseg/train.hpp"

namespace wsseg {

// Merged view of every tunable: built-in defaults < JSON config file < CLI
// flags. Flag names mirror the JSON keys.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PipelineConfig pipeline;
  int n_train = 2000;
  int n_val = 200;
  int n_test = 200;
  uint64_t seed = 7;  // dataset seed for gen-data; training seed elsewhere

  void validate() const;
};

// applies a JSON object onto cfg; unknown keys raise std::invalid_argument
void apply_config_json(RunConfig& cfg, const std::string& json_text);
void apply_config_file(RunConfig& cfg, const std::string& path);

}  // namespace wsseg
