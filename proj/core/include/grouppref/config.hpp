#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "grouppref/aligner.hpp"
#include "grouppref/grm.hpp"
#include "grouppref/grouping.hpp"
#include "grouppref/prefnet.hpp"
#include "grouppref/simworld.hpp"

namespace grouppref {

/// Every tunable of the pipeline. INI sections: world, prefnet, grouping, grm,
/// aligner, eval; `seed` sits at the top level.
struct PipelineConfig {
  std::uint64_t seed = 0;

  WorldConfig world;
  int exposures_per_pair = 8;
  int min_exposure = 50;

  // prefnet; dimensions tied to the world are filled in by prefnet_config()
  int pref_dim_d = 128;
  int pref_dim_dprime = 16;
  double pref_lr = 0.1;
  int pref_epochs = 4;
  int pref_batch_size = 64;
  double pref_holdout_fraction = 0.2;

  GroupingConfig grouping;

  GrmConfig grm;
  double grm_holdout_fraction = 0.2;

  PolicyShape policy;  // context_dim derived from grm.d_g + world.d_raw
  double beta = 0.1;
  double align_lr = 1.0;
  int align_steps = 150;
  std::string align_optimizer = "sgd";  // or "adam"
  int align_rounds = 4;                 // on-policy sampling rounds
  int n_candidates = 12;
  std::string judge = "grm";  // or "oracle"
  double pretrain_lr = 0.05;
  int pretrain_epochs = 150;
  double render_noise = 0.1;

  int ndcg_k = 5;

  void validate() const;
  PrefNetConfig prefnet_config() const;
  PolicyShape policy_shape() const;
  DpoConfig dpo_config() const;
  PretrainConfig pretrain_config() const;
};

/// Parses INI text on top of the defaults. Unknown sections or keys and
/// unparsable values raise ConfigError.
PipelineConfig parse_config(const std::string& ini_text);
PipelineConfig load_config(const std::filesystem::path& path);

/// Fully resolved configuration as INI text; parse_config(to_ini(c)) == c.
std::string to_ini(const PipelineConfig& config);
nlohmann::json config_to_json(const PipelineConfig& config);

}  // namespace grouppref
