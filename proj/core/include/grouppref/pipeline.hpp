#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "grouppref/config.hpp"
#include "grouppref/metrics.hpp"

namespace grouppref {

enum class Stage { kGenData, kTrainPref, kCluster, kTrainGrm, kPretrainPolicy, kAlign, kEval };

const std::vector<Stage>& all_stages();
std::string stage_name(Stage stage);
/// Throws ConfigError for an unknown name.
Stage stage_from_name(const std::string& name);

/// Files a stage reads, relative to the output directory.
std::vector<std::string> stage_inputs(Stage stage);
/// Files a stage writes (besides config.ini).
std::vector<std::string> stage_outputs(Stage stage);

/// Runs one stage in `out_dir`. Throws MissingArtifactError when a
/// prerequisite file is absent. Writes the resolved config.ini first.
void run_stage(Stage stage, const PipelineConfig& config, const std::filesystem::path& out_dir);

/// Every stage in order; returns the report written to report.json.
EvalReport run_pipeline(const PipelineConfig& config, const std::filesystem::path& out_dir);

}  // namespace grouppref
