#pragma once

// Run configuration: merged view of the model, backbone-warmup and training
// settings plus data/output paths. Loaded from a JSON file; command-line
// flags override file values, file values override built-in defaults.
// Unknown keys are rejected.

#include <string>

#include "dempt/train.hpp"

namespace dempt {

struct RunConfig {
  ModelConfig model;  // vocab filled from the data directory at load time
  BackbonePretrainConfig backbone;
  TrainConfig train;
  std::string data_dir = "data";
  std::string out_dir = "runs/out";

  void validate() const {
    train.validate();
    DEMPT_CHECK(!data_dir.empty() && !out_dir.empty(), "run config: data_dir and out_dir must be set");
  }
};

RunConfig read_run_config(const std::string& path);
RunConfig default_run_config();

}  // namespace dempt
